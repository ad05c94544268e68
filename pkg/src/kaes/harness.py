"""Experiment protocols: repeated cross-validation and source-to-target transfer.

In-domain: per prompt, a 5-fold cross-validation repeated several times with
fresh random partitions; every fold trains its own model (and, for the
histogram representation, its own codebook, fitted on training-fold tokens
only so nothing leaks from the evaluation fold).

Cross-domain: all essays of a source prompt train the model, optionally
augmented with a small sub-sample of target-prompt essays; evaluation is on
a held-out target fold, repeated over sub-sample draws.

The expensive character-n-gram Gram matrix depends only on the text, never
on the fold split, so it is computed once per document set and sliced per
fold; it can be cached on disk and reloaded bit-exactly.  Histogram kernels
are fold-dependent (the codebook is refit per fold) and are always computed
in place.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boswe import BosweHistogram, boswe_kernel_matrix, build_histogram, fit_codebook
from .corpus import (
    ASAP_SCORE_RANGES,
    Essay,
    make_folds,
    make_transfer_split,
    parse_asap_tsv,
    unscale_score,
)
from .embeddings import DEFAULT_VOCAB_LIMIT, EmbeddingModel, load_word2vec_binary, lookup, tokenize
from .errors import KaesError
from .fusion import sum_kernels
from .metrics import average_qwk, qwk
from .seeding import CODEBOOK, derive_rng
from .string_kernel import (
    DEFAULT_NGRAM_MAX,
    DEFAULT_NGRAM_MIN,
    KernelMatrix,
    extract_ngram_counts,
    kernel_matrix,
    load_kernel_matrix,
    normalize_kernel,
    save_kernel_matrix,
)
from .svr import SvrConfig, predict, train_nu_svr

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("hisk", "boswe", "fused")
DEFAULT_SUBSAMPLE_SIZES = (0, 10, 25, 50, 100)
MODES = ("in-domain", "cross-domain")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; file paths are explicit, no env vars."""

    mode: str
    representation: str
    data_path: str
    prompt: int | None = None  # in-domain; None runs every prompt in the data
    source: int | None = None  # cross-domain pair
    target: int | None = None
    embeddings_path: str | None = None
    cache_dir: str | None = None
    ngram_min: int = DEFAULT_NGRAM_MIN
    ngram_max: int = DEFAULT_NGRAM_MAX
    k: int = 500
    svr: SvrConfig = field(default_factory=SvrConfig)
    seed: int = 42
    folds: int = 5
    repetitions: int | None = None  # None: 10 in-domain, 5 cross-domain
    nt: tuple[int, ...] = DEFAULT_SUBSAMPLE_SIZES
    vocab_limit: int | None = DEFAULT_VOCAB_LIMIT
    kmeans_iters: int = 100
    audit: bool = False

    def resolved_repetitions(self) -> int:
        if self.repetitions is not None:
            return self.repetitions
        return 10 if self.mode == "in-domain" else 5

    def validate(self) -> None:
        if self.mode not in MODES:
            raise KaesError(f"unknown mode {self.mode!r}")
        if self.representation not in REPRESENTATIONS:
            raise KaesError(f"unknown representation {self.representation!r}")
        if self.representation in ("boswe", "fused") and not self.embeddings_path:
            raise KaesError(f"representation {self.representation!r} requires --embeddings")
        if self.mode == "cross-domain":
            if self.source is None or self.target is None:
                raise KaesError("cross-domain mode requires --source and --target")
            for p in (self.source, self.target):
                if p not in ASAP_SCORE_RANGES:
                    raise KaesError(f"invalid prompt id {p}")
        elif self.prompt is not None and self.prompt not in ASAP_SCORE_RANGES:
            raise KaesError(f"invalid prompt id {self.prompt}")

    def summary(self) -> str:
        parts = [
            f"mode={self.mode}",
            f"representation={self.representation}",
            f"ngram=[{self.ngram_min},{self.ngram_max}]",
            f"k={self.k}",
            f"c={self.svr.c:g}",
            f"nu={self.svr.nu:g}",
            f"seed={self.seed}",
            f"folds={self.folds}",
            f"repetitions={self.resolved_repetitions()}",
        ]
        if self.mode == "cross-domain":
            parts.append(f"pair={self.source}->{self.target}")
            parts.append("nt=" + ",".join(str(n) for n in self.nt))
        elif self.prompt is not None:
            parts.append(f"prompt={self.prompt}")
        return " ".join(parts)


@dataclass(frozen=True)
class AuditRecord:
    """Id sets used at each stage of one cell, for leakage inspection."""

    key: str
    repetition: int
    fold_or_nt: int
    train_ids: tuple[str, ...]
    eval_ids: tuple[str, ...]
    codebook_doc_ids: tuple[str, ...] | None


@dataclass
class ResultCell:
    """Aggregated QWK of one (prompt or pair, n_t) cell."""

    key: str
    n_t: int | None
    representation: str
    mean: float | None
    std: float | None
    values: tuple[float, ...] = ()
    rep_means: tuple[float, ...] = ()
    n_runs: int = 0
    failed: str | None = None


@dataclass
class ResultTable:
    mode: str
    representation: str
    meta: str = ""
    cells: list[ResultCell] = field(default_factory=list)
    audit: list[AuditRecord] = field(default_factory=list)

    def overall(self) -> float | None:
        """Unweighted mean over per-key means (in-domain all-prompt runs)."""
        means = [c.mean for c in self.cells if c.mean is not None]
        if not means:
            return None
        return average_qwk(means)


def _fmt(value: float | None, decimals: int) -> str:
    return "-" if value is None else f"{value:.{decimals}f}"


def emit_report(table: ResultTable, format: str = "text") -> bytes:
    """Render a result table deterministically as text or csv.

    Rows are ordered by key then sub-sample size; kappa values print with 3
    decimals.  The csv variant is a plain table (no comment lines) so any
    csv reader round-trips it.
    """
    cells = sorted(table.cells, key=lambda c: (c.key, -1 if c.n_t is None else c.n_t))
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "n_t", "representation", "qwk_mean", "qwk_std", "runs", "failed"])
        for c in cells:
            writer.writerow(
                [
                    c.key,
                    "" if c.n_t is None else c.n_t,
                    c.representation,
                    "" if c.mean is None else f"{c.mean:.3f}",
                    "" if c.std is None else f"{c.std:.4f}",
                    c.n_runs,
                    c.failed or "",
                ]
            )
        return buf.getvalue().encode("utf-8")
    if format != "text":
        raise KaesError(f"unknown report format {format!r}")

    lines = []
    if table.meta:
        lines.append(f"# {table.meta}")
    lines.append(f"{'key':<12} {'n_t':>5} {'qwk':>7} {'std':>8} {'runs':>5}  note")
    for c in cells:
        nt = "-" if c.n_t is None else str(c.n_t)
        lines.append(
            f"{c.key:<12} {nt:>5} {_fmt(c.mean, 3):>7} {_fmt(c.std, 4):>8} "
            f"{c.n_runs:>5}  {c.failed or ''}".rstrip()
        )
    if table.mode == "in-domain" and len(cells) > 1:
        lines.append(
            f"{'overall':<12} {'-':>5} {_fmt(table.overall(), 3):>7} {'-':>8} "
            f"{len(cells):>5}".rstrip()
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def table_from_csv(data: bytes) -> ResultTable:
    """Rebuild a table from the csv emitted by :func:`emit_report`."""
    reader = csv.reader(io.StringIO(data.decode("utf-8")))
    rows = list(reader)
    if not rows or rows[0][:3] != ["key", "n_t", "representation"]:
        raise KaesError("not a result-table csv (missing header row)")
    cells = []
    representation = ""
    for row in rows[1:]:
        key, nt, representation, mean, std, runs, failed = row
        cells.append(
            ResultCell(
                key=key,
                n_t=None if nt == "" else int(nt),
                representation=representation,
                mean=None if mean == "" else float(mean),
                std=None if std == "" else float(std),
                n_runs=int(runs),
                failed=failed or None,
            )
        )
    mode = "cross-domain" if any(c.n_t is not None for c in cells) else "in-domain"
    return ResultTable(mode=mode, representation=representation, cells=cells)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value config file; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise KaesError(f"{path}: line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Shared plumbing


def load_essays(cfg: ExperimentConfig) -> list[Essay]:
    data = Path(cfg.data_path).read_bytes()
    return parse_asap_tsv(data)


def load_embeddings_if_needed(cfg: ExperimentConfig) -> EmbeddingModel | None:
    if cfg.representation not in ("boswe", "fused"):
        return None
    logger.info("loading embeddings from %s", cfg.embeddings_path)
    return load_word2vec_binary(cfg.embeddings_path, vocab_limit=cfg.vocab_limit)


def _gram_cache_key(essays: Sequence[Essay], cfg: ExperimentConfig) -> str:
    digest = hashlib.sha256()
    digest.update(f"hisk-gram|v1|{cfg.ngram_min}|{cfg.ngram_max}|".encode())
    for e in essays:
        digest.update(e.id.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(e.text.encode("utf-8", errors="surrogatepass"))
        digest.update(b"\x01")
    return digest.hexdigest()[:24]


def normalized_hisk_gram(essays: Sequence[Essay], cfg: ExperimentConfig) -> KernelMatrix:
    """Full normalized n-gram Gram over a document set, disk-cached when possible."""
    ids = tuple(e.id for e in essays)
    cache_path = None
    if cfg.cache_dir:
        Path(cfg.cache_dir).mkdir(parents=True, exist_ok=True)
        cache_path = Path(cfg.cache_dir) / f"hisk_{_gram_cache_key(essays, cfg)}.km"
        if cache_path.exists():
            logger.info("loading cached Gram matrix %s", cache_path.name)
            raw = load_kernel_matrix(cache_path)
            if raw.row_ids != ids:
                raise KaesError(f"cache file {cache_path} does not match the document set")
            return normalize_kernel(raw)
    logger.info(
        "computing %d-document n-gram Gram matrix (range [%d,%d])",
        len(essays), cfg.ngram_min, cfg.ngram_max,
    )
    profiles = [extract_ngram_counts(e.text, cfg.ngram_min, cfg.ngram_max) for e in essays]
    raw = kernel_matrix(profiles, row_ids=ids)
    if cache_path is not None:
        save_kernel_matrix(raw, cache_path)
        logger.info("cached Gram matrix at %s", cache_path.name)
    return normalize_kernel(raw)


def _fold_codebook(
    tokens_by_id: dict[str, list[str]],
    train_ids: Sequence[str],
    model: EmbeddingModel,
    cfg: ExperimentConfig,
    *tags: int,
):
    """Fit a codebook on the embedded token types found in the training docs."""
    types = sorted({t for eid in train_ids for t in tokens_by_id[eid]})
    vectors = [v for v in (lookup(model, t) for t in types) if v is not None]
    if not vectors:
        raise KaesError("no embedded tokens in the training documents")
    seed = int(derive_rng(cfg.seed, CODEBOOK, *tags).integers(0, 2**31 - 1))
    return fit_codebook(np.vstack(vectors), k=cfg.k, seed=seed, max_iters=cfg.kmeans_iters)


def _histograms(
    codebook, tokens_by_id: dict[str, list[str]], ids: Sequence[str], model: EmbeddingModel
) -> dict[str, BosweHistogram]:
    hists: dict[str, BosweHistogram] = {}
    oov_rates: dict[str, float] = {}
    for eid in ids:
        tokens = tokens_by_id[eid]
        hist = build_histogram(codebook, tokens, model, normalize=True)
        hists[eid] = hist
        if tokens:
            oov_rates[eid] = 1.0 - hist.token_count / len(tokens)
    if oov_rates:
        logger.debug(
            "histograms: mean OOV rate %.3f, per-document %s",
            sum(oov_rates.values()) / len(oov_rates),
            oov_rates,
        )
    return hists


def _cell_blocks(
    cfg: ExperimentConfig,
    train_ids: tuple[str, ...],
    eval_ids: tuple[str, ...],
    hisk_gram: KernelMatrix | None,
    tokens_by_id: dict[str, list[str]] | None,
    emb_model: EmbeddingModel | None,
    tags: tuple[int, ...],
) -> tuple[KernelMatrix, KernelMatrix, tuple[str, ...] | None]:
    """Train and eval kernel blocks for one cell, plus codebook source ids."""
    codebook_ids: tuple[str, ...] | None = None
    if cfg.representation == "hisk":
        return hisk_gram.take(train_ids, train_ids), hisk_gram.take(eval_ids, train_ids), None

    codebook = _fold_codebook(tokens_by_id, train_ids, emb_model, cfg, *tags)
    codebook_ids = train_ids
    hists = _histograms(codebook, tokens_by_id, list(train_ids) + list(eval_ids), emb_model)
    train_h = [hists[eid] for eid in train_ids]
    eval_h = [hists[eid] for eid in eval_ids]
    k_train = boswe_kernel_matrix(train_h, row_ids=train_ids)
    k_eval = boswe_kernel_matrix(eval_h, train_h, row_ids=eval_ids, col_ids=train_ids)
    if cfg.representation == "boswe":
        return k_train, k_eval, codebook_ids
    return (
        sum_kernels(hisk_gram.take(train_ids, train_ids), k_train),
        sum_kernels(hisk_gram.take(eval_ids, train_ids), k_eval),
        codebook_ids,
    )


def _score_cell(
    cfg: ExperimentConfig,
    k_train: KernelMatrix,
    k_eval: KernelMatrix,
    unit_by_id: dict[str, float],
    raw_by_id: dict[str, int],
    eval_range,
) -> float:
    y_train = np.array([unit_by_id[eid] for eid in k_train.row_ids])
    model = train_nu_svr(k_train, y_train, cfg.svr, seed=cfg.seed)
    preds = predict(model, k_eval)
    pred_scores = [unscale_score(p, eval_range) for p in preds]
    gold_scores = [raw_by_id[eid] for eid in k_eval.row_ids]
    report = qwk(pred_scores, gold_scores, eval_range)
    logger.debug("cell report: %s", report.to_text())
    return report.kappa


# ---------------------------------------------------------------------------
# Protocols


def run_in_domain(cfg: ExperimentConfig) -> ResultTable:
    """Repeated cross-validation per prompt; one result cell per prompt."""
    cfg.validate()
    if cfg.mode != "in-domain":
        raise KaesError(f"run_in_domain called with mode {cfg.mode!r}")
    essays = load_essays(cfg)
    if cfg.prompt is not None:
        essays = [e for e in essays if e.prompt == cfg.prompt]
    if not essays:
        raise KaesError("no essays selected; check --data and --prompt")
    emb_model = load_embeddings_if_needed(cfg)
    reps = cfg.resolved_repetitions()

    table = ResultTable(mode=cfg.mode, representation=cfg.representation, meta=cfg.summary())
    prompts = sorted({e.prompt for e in essays})
    for prompt in prompts:
        subset = [e for e in essays if e.prompt == prompt]
        table.cells.append(
            _in_domain_prompt_cell(cfg, prompt, subset, emb_model, reps, table.audit)
        )
    return table


def _in_domain_prompt_cell(
    cfg: ExperimentConfig,
    prompt: int,
    essays: list[Essay],
    emb_model: EmbeddingModel | None,
    reps: int,
    audit: list[AuditRecord],
) -> ResultCell:
    key = str(prompt)
    score_range = ASAP_SCORE_RANGES[prompt]
    logger.info("prompt %d: %d essays, %d repetitions x %d folds",
                prompt, len(essays), reps, cfg.folds)
    try:
        plan = make_folds(essays, fold_count=cfg.folds, repetitions=reps, seed=cfg.seed)
        hisk_gram = None
        if cfg.representation in ("hisk", "fused"):
            hisk_gram = normalized_hisk_gram(essays, cfg)
        tokens_by_id = None
        if cfg.representation in ("boswe", "fused"):
            tokens_by_id = {e.id: tokenize(e.text) for e in essays}
    except Exception as exc:  # noqa: BLE001 - a failed cell must not kill siblings
        logger.error("prompt %d failed during preparation: %s", prompt, exc)
        return ResultCell(key=key, n_t=None, representation=cfg.representation,
                          mean=None, std=None, failed=f"prepare: {exc}")

    unit_by_id = {e.id: e.unit_score for e in essays}
    raw_by_id = {e.id: e.raw_score for e in essays}
    values: list[float] = []
    rep_means: list[float] = []
    failures: list[str] = []
    for rep in range(reps):
        fold_kappas: list[float] = []
        for fold in range(cfg.folds):
            train_ids, eval_ids = plan.split_ids(rep, fold)
            logger.debug("prompt %d rep %d fold %d: train=%s eval=%s",
                         prompt, rep, fold, sorted(train_ids), sorted(eval_ids))
            try:
                k_train, k_eval, cb_ids = _cell_blocks(
                    cfg, train_ids, eval_ids, hisk_gram, tokens_by_id, emb_model,
                    (rep, fold),
                )
                kappa = _score_cell(cfg, k_train, k_eval, unit_by_id, raw_by_id, score_range)
            except Exception as exc:  # noqa: BLE001
                failures.append(f"rep{rep}/fold{fold}: {exc}")
                logger.error("prompt %d rep %d fold %d failed: %s", prompt, rep, fold, exc)
                continue
            fold_kappas.append(kappa)
            values.append(kappa)
            if cfg.audit:
                audit.append(AuditRecord(
                    key=key, repetition=rep, fold_or_nt=fold,
                    train_ids=tuple(sorted(train_ids)), eval_ids=tuple(sorted(eval_ids)),
                    codebook_doc_ids=None if cb_ids is None else tuple(sorted(cb_ids)),
                ))
        if fold_kappas:
            rep_means.append(float(np.mean(fold_kappas)))
    if not values:
        return ResultCell(key=key, n_t=None, representation=cfg.representation,
                          mean=None, std=None, failed="; ".join(failures) or "no runs")
    return ResultCell(
        key=key,
        n_t=None,
        representation=cfg.representation,
        mean=float(np.mean(values)),
        std=float(np.std(rep_means)) if len(rep_means) > 1 else 0.0,
        values=tuple(values),
        rep_means=tuple(rep_means),
        n_runs=len(values),
        failed="; ".join(failures) or None,
    )


def run_cross_domain(cfg: ExperimentConfig) -> ResultTable:
    """Source-to-target transfer over the configured sub-sample sizes."""
    cfg.validate()
    if cfg.mode != "cross-domain":
        raise KaesError(f"run_cross_domain called with mode {cfg.mode!r}")
    essays = load_essays(cfg)
    source_essays = [e for e in essays if e.prompt == cfg.source]
    target_essays = [e for e in essays if e.prompt == cfg.target]
    if not source_essays or not target_essays:
        raise KaesError(
            f"data must contain both prompts {cfg.source} and {cfg.target} "
            f"(got {len(source_essays)} and {len(target_essays)} essays)"
        )
    emb_model = load_embeddings_if_needed(cfg)
    reps = cfg.resolved_repetitions()
    key = f"{cfg.source}->{cfg.target}"
    target_range = ASAP_SCORE_RANGES[cfg.target]

    table = ResultTable(mode=cfg.mode, representation=cfg.representation, meta=cfg.summary())
    both = source_essays + target_essays
    try:
        hisk_gram = None
        if cfg.representation in ("hisk", "fused"):
            hisk_gram = normalized_hisk_gram(both, cfg)
        tokens_by_id = None
        if cfg.representation in ("boswe", "fused"):
            tokens_by_id = {e.id: tokenize(e.text) for e in both}
    except Exception as exc:  # noqa: BLE001
        logger.error("pair %s failed during preparation: %s", key, exc)
        for n_t in cfg.nt:
            table.cells.append(ResultCell(key=key, n_t=n_t, representation=cfg.representation,
                                          mean=None, std=None, failed=f"prepare: {exc}"))
        return table

    unit_by_id = {e.id: e.unit_score for e in both}
    raw_by_id = {e.id: e.raw_score for e in both}
    source_ids = tuple(e.id for e in source_essays)
    for nt_index, n_t in enumerate(cfg.nt):
        values: list[float] = []
        failures: list[str] = []
        for rep in range(reps):
            try:
                extra_ids, eval_ids = make_transfer_split(
                    target_essays, n_t, rep, cfg.seed, fold_count=cfg.folds
                )
                train_ids = source_ids + extra_ids
                logger.debug("pair %s n_t=%d rep %d: train=%d eval=%d",
                             key, n_t, rep, len(train_ids), len(eval_ids))
                k_train, k_eval, cb_ids = _cell_blocks(
                    cfg, train_ids, eval_ids, hisk_gram, tokens_by_id, emb_model,
                    (rep, nt_index),
                )
                kappa = _score_cell(cfg, k_train, k_eval, unit_by_id, raw_by_id, target_range)
            except Exception as exc:  # noqa: BLE001
                failures.append(f"rep{rep}: {exc}")
                logger.error("pair %s n_t=%d rep %d failed: %s", key, n_t, rep, exc)
                continue
            values.append(kappa)
            if cfg.audit:
                table.audit.append(AuditRecord(
                    key=key, repetition=rep, fold_or_nt=n_t,
                    train_ids=tuple(sorted(train_ids)), eval_ids=tuple(sorted(eval_ids)),
                    codebook_doc_ids=None if cb_ids is None else tuple(sorted(cb_ids)),
                ))
        if not values:
            table.cells.append(ResultCell(key=key, n_t=n_t, representation=cfg.representation,
                                          mean=None, std=None,
                                          failed="; ".join(failures) or "no runs"))
        else:
            table.cells.append(ResultCell(
                key=key,
                n_t=n_t,
                representation=cfg.representation,
                mean=float(np.mean(values)),
                std=float(np.std(values)) if len(values) > 1 else 0.0,
                values=tuple(values),
                rep_means=tuple(values),
                n_runs=len(values),
                failed="; ".join(failures) or None,
            ))
    return table
