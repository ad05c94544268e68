"""Super-word codebooks and histogram document representations.

Word vectors from the training documents are clustered with k-means; each
centroid acts as one vocabulary item ("super word").  A document becomes a
histogram of how many of its embedded tokens fall in each cluster,
L1-normalized so documents of different lengths are comparable, and
histograms are compared with the same min-sum intersection kernel used for
character n-grams.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .embeddings import EmbeddingModel, lookup
from .errors import BinaryFormatError, KernelMismatchError, KaesError
from .kdtree import KdTree, RandomizedKdForest, nearest_linear
from .seeding import KMEANS, derive_rng
from .string_kernel import KernelMatrix

logger = logging.getLogger(__name__)

DEFAULT_CLUSTERS = 500
DEFAULT_KMEANS_ITERS = 100

CODEBOOK_MAGIC = b"KAESCB01"


def _assign_blocked(
    points: np.ndarray, centroids: np.ndarray, budget: int = 8_000_000
) -> np.ndarray:
    """Exact nearest-centroid ids for every row of ``points``.

    Uses the same elementwise-difference formula as the tree and the linear
    scan, so all three routes agree bit for bit (ties go to the lowest
    cluster id).  Work is blocked to bound temporary memory.
    """
    n, dim = points.shape
    k = centroids.shape[0]
    out = np.empty(n, dtype=np.int64)
    block = max(1, budget // max(1, k * dim))
    for start in range(0, n, block):
        chunk = points[start : start + block]
        d = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[start : start + block] = d.argmin(axis=1)
    return out


def _sqdist_to_assigned(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray):
    return ((points - centroids[labels]) ** 2).sum(axis=1)


@dataclass
class Codebook:
    """k cluster centroids plus an exact nearest-neighbor index.

    Centroids are stored as float32 (the on-disk precision); all distance
    arithmetic runs on one shared float64 view so assignment is identical
    whether it goes through the tree, the blocked scan, or the reference
    linear scan.
    """

    k: int
    centroids: np.ndarray  # (k, dim) float32
    seed: int
    distortion: float | None
    _centroids64: np.ndarray = field(init=False, repr=False)
    _index: KdTree | None = field(default=None, init=False, repr=False)
    _forest: RandomizedKdForest | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self._centroids64 = self.centroids.astype(np.float64)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def index(self) -> KdTree:
        if self._index is None:
            self._index = KdTree(self._centroids64)
        return self._index

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.centroids.tobytes())
        return digest.hexdigest()[:16]

    def assign(self, vector: np.ndarray) -> int:
        """Nearest-centroid id via the exact tree; ties to the lowest id."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise KernelMismatchError(f"vector has shape {vector.shape}, expected ({self.dim},)")
        _, idx = self.index.query(vector)
        return idx

    def assign_linear(self, vector: np.ndarray) -> int:
        """Reference linear-scan assignment (oracle for the index)."""
        _, idx = nearest_linear(self._centroids64, np.asarray(vector, dtype=np.float64))
        return idx

    def assign_approx(self, vector: np.ndarray, max_checks: int = 64,
                      n_trees: int = 4) -> int:
        """Approximate assignment via the randomized multi-tree index.

        Optional mode with a fixed leaf-check budget per query; never used
        by the scoring pipeline, which stays exact.
        """
        if self._forest is None:
            self._forest = RandomizedKdForest(
                self._centroids64, n_trees=n_trees, seed=self.seed
            )
        _, idx = self._forest.query(np.asarray(vector, dtype=np.float64), max_checks)
        return idx

    def assign_batch(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        return _assign_blocked(vectors, self._centroids64)


def assign(codebook: Codebook, vector: np.ndarray) -> int:
    """Module-level convenience for :meth:`Codebook.assign`."""
    return codebook.assign(vector)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # All remaining points coincide with chosen centers; any pick works.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = points[idx]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def fit_codebook(
    vectors: np.ndarray,
    k: int = DEFAULT_CLUSTERS,
    seed: int = 0,
    max_iters: int = DEFAULT_KMEANS_ITERS,
    return_history: bool = False,
):
    """Cluster word vectors into a codebook with k-means.

    k-means++ seeding followed by Lloyd iterations; stops when no assignment
    changes or after ``max_iters``.  Deterministic given ``seed``.  Clusters
    that empty out keep their previous centroid, so the mean squared
    distortion never increases between iterations.

    With ``return_history=True`` returns ``(codebook, distortions)`` where
    ``distortions`` has one mean-squared-distance entry per Lloyd iteration.
    """
    points = np.ascontiguousarray(vectors, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise KaesError("vectors must be a nonempty 2-d array")
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct < k:
        raise KaesError(f"need at least k={k} distinct vectors, got {n_distinct}")

    rng = derive_rng(seed, KMEANS)
    centers = _kmeans_pp_init(points, k, rng)
    labels = _assign_blocked(points, centers)
    history: list[float] = []
    for _ in range(max_iters):
        history.append(float(_sqdist_to_assigned(points, centers, labels).mean()))
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        present, starts = np.unique(sorted_labels, return_index=True)
        sums = np.add.reduceat(points[order], starts, axis=0)
        counts = np.diff(np.append(starts, labels.size))
        centers = centers.copy()
        centers[present] = sums / counts[:, None]
        new_labels = _assign_blocked(points, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    codebook = Codebook(
        k=k,
        centroids=centers.astype(np.float32),
        seed=seed,
        distortion=None,
    )
    # Report distortion against the stored (float32) centroids, i.e. the
    # artifact a user actually gets back.
    final_labels = codebook.assign_batch(points)
    codebook.distortion = float(
        _sqdist_to_assigned(points, codebook._centroids64, final_labels).mean()
    )
    if return_history:
        return codebook, history
    return codebook


@dataclass(frozen=True)
class BosweHistogram:
    """Cluster-occurrence histogram of one document."""

    weights: dict[int, float]
    token_count: int
    normalized: bool
    codebook_fingerprint: str

    def self_similarity(self) -> float:
        return sum(self.weights.values())


def build_histogram(
    codebook: Codebook,
    tokens: Sequence[str],
    model: EmbeddingModel,
    normalize: bool = True,
) -> BosweHistogram:
    """Histogram of nearest-centroid assignments over the document's tokens.

    Out-of-vocabulary tokens are skipped; a document with no embedded tokens
    yields an empty histogram (token_count 0) that intersects to 0 with
    everything.
    """
    vecs = [v for v in (lookup(model, t) for t in tokens) if v is not None]
    if not vecs:
        return BosweHistogram(
            weights={}, token_count=0, normalized=normalize,
            codebook_fingerprint=codebook.fingerprint,
        )
    ids = codebook.assign_batch(np.vstack(vecs))
    counts = Counter(int(i) for i in ids)
    token_count = len(vecs)
    if normalize:
        weights = {cid: c / token_count for cid, c in sorted(counts.items())}
    else:
        weights = {cid: float(c) for cid, c in sorted(counts.items())}
    return BosweHistogram(
        weights=weights, token_count=token_count, normalized=normalize,
        codebook_fingerprint=codebook.fingerprint,
    )


def hik_pair(h1: BosweHistogram, h2: BosweHistogram) -> float:
    """Min-sum intersection of two histograms built on the same codebook."""
    if h1.codebook_fingerprint != h2.codebook_fingerprint:
        raise KernelMismatchError("histograms were built against different codebooks")
    small, large = (h1.weights, h2.weights) if len(h1.weights) <= len(h2.weights) else (
        h2.weights, h1.weights)
    value = 0.0
    for cid, w in small.items():
        other = large.get(cid)
        if other is not None:
            value += w if w <= other else other
    return value


def boswe_kernel_matrix(
    rows: Sequence[BosweHistogram],
    cols: Sequence[BosweHistogram] | None = None,
    row_ids: Sequence[str] | None = None,
    col_ids: Sequence[str] | None = None,
) -> KernelMatrix:
    """Intersection-kernel matrix between histogram lists (kind "boswe")."""
    symmetric = cols is None or cols is rows
    if len(rows) == 0 or (cols is not None and len(cols) == 0):
        raise KernelMismatchError("cannot build a kernel matrix from an empty document list")
    cols_eff = rows if symmetric else cols
    values = np.zeros((len(rows), len(cols_eff)), dtype=np.float64)
    if symmetric:
        for i in range(len(rows)):
            values[i, i] = rows[i].self_similarity()
            for j in range(i + 1, len(rows)):
                v = hik_pair(rows[i], rows[j])
                values[i, j] = v
                values[j, i] = v
    else:
        for i in range(len(rows)):
            for j in range(len(cols_eff)):
                values[i, j] = hik_pair(rows[i], cols_eff[j])
    rids = tuple(row_ids) if row_ids is not None else tuple(f"doc{i}" for i in range(len(rows)))
    cids = rids if symmetric and col_ids is None else (
        tuple(col_ids) if col_ids is not None
        else tuple(f"col{i}" for i in range(len(cols_eff)))
    )
    if len(rids) != len(rows) or len(cids) != len(cols_eff):
        raise KernelMismatchError("id list length does not match histogram list length")
    return KernelMatrix(
        values=values,
        row_ids=rids,
        col_ids=cids,
        kind="boswe",
        diag_rows=np.array([h.self_similarity() for h in rows]),
        diag_cols=np.array([h.self_similarity() for h in cols_eff]),
    )


def mean_std_doc_embedding(tokens: Sequence[str], model: EmbeddingModel) -> np.ndarray:
    """Per-component mean and population std of the document's word vectors.

    Output length is 2*dim (means first, stds second).  A document with no
    in-vocabulary tokens yields the zero vector and logs a warning.
    """
    vecs = [v for v in (lookup(model, t) for t in tokens) if v is not None]
    if not vecs:
        logger.warning("mean/std document embedding of an all-OOV document; returning zeros")
        return np.zeros(2 * model.dim)
    stacked = np.vstack(vecs).astype(np.float64)
    return np.concatenate([stacked.mean(axis=0), stacked.std(axis=0)])


def save_codebook(codebook: Codebook, path: str | Path | BinaryIO) -> None:
    """Write a codebook in the binary format (bit-exact round trip)."""
    stream, owned = _as_stream(path, "wb")
    try:
        stream.write(CODEBOOK_MAGIC)
        stream.write(struct.pack("<IIQ", codebook.k, codebook.dim, codebook.seed))
        stream.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
    finally:
        if owned:
            stream.close()


def load_codebook(path: str | Path | BinaryIO) -> Codebook:
    """Read a codebook written by :func:`save_codebook` (distortion is not stored)."""
    stream, owned = _as_stream(path, "rb")
    try:
        magic = stream.read(len(CODEBOOK_MAGIC))
        if magic != CODEBOOK_MAGIC:
            raise BinaryFormatError(f"bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}", offset=0)
        header = stream.read(16)
        if len(header) != 16:
            raise BinaryFormatError("truncated codebook header", offset=len(CODEBOOK_MAGIC))
        k, dim, seed = struct.unpack("<IIQ", header)
        nbytes = k * dim * 4
        raw = stream.read(nbytes)
        if len(raw) != nbytes:
            raise BinaryFormatError(
                f"truncated centroids: expected {nbytes} bytes, got {len(raw)}",
                offset=len(CODEBOOK_MAGIC) + 16,
            )
        centroids = np.frombuffer(raw, dtype="<f4").reshape(k, dim).copy()
        return Codebook(k=k, centroids=centroids, seed=seed, distortion=None)
    finally:
        if owned:
            stream.close()


def _as_stream(path: str | Path | BinaryIO, mode: str) -> tuple[BinaryIO, bool]:
    if isinstance(path, (str, Path)):
        return open(path, mode), True
    return path, False
