"""Pre-trained word embeddings (word2vec binary format) and tokenization.

The binary format is an ASCII header ``"<vocab_size> <dim>\\n"`` followed by
one record per word: the token bytes, a single space, then ``dim`` 4-byte
little-endian floats.  A newline after the floats is optional and tolerated.
Vectors are loaded verbatim; no renormalization.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import BinaryFormatError

DEFAULT_VOCAB_LIMIT = 500_000

# Lowercase word characters, with "@person1"-style anonymization markers
# kept as single tokens.
_TOKEN_RE = re.compile(r"@[a-z]+\d+|[a-z0-9]+")


@dataclass
class EmbeddingModel:
    """Immutable token-to-vector table."""

    dim: int
    vocab: dict[str, int]
    vectors: np.ndarray  # (len(vocab), dim) float32

    def __len__(self) -> int:
        return len(self.vocab)


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumeric boundaries.

    Anonymization markers like "@PERSON1" survive as one token.  The output
    re-tokenizes to itself when joined with spaces.
    """
    return _TOKEN_RE.findall(text.lower())


def lookup(model: EmbeddingModel, token: str) -> np.ndarray | None:
    """The stored vector for ``token``, or None when out of vocabulary."""
    idx = model.vocab.get(token)
    if idx is None:
        return None
    return model.vectors[idx]


class _Reader:
    """Buffered byte scanner that tracks the absolute offset for errors."""

    def __init__(self, stream: BinaryIO, chunk: int = 1 << 20):
        self._stream = stream
        self._chunk = chunk
        self._buf = b""
        self._pos = 0
        self.offset = 0

    def _fill(self) -> bool:
        data = self._stream.read(self._chunk)
        if not data:
            return False
        self._buf = self._buf[self._pos :] + data
        self._pos = 0
        return True

    def read_until(self, delim: bytes, what: str) -> bytes:
        while True:
            idx = self._buf.find(delim, self._pos)
            if idx != -1:
                out = self._buf[self._pos : idx]
                consumed = idx + 1 - self._pos
                self._pos = idx + 1
                self.offset += consumed
                return out
            if not self._fill():
                raise BinaryFormatError(f"stream ended while reading {what}", offset=self.offset)

    def read_exact(self, n: int, what: str) -> bytes:
        while len(self._buf) - self._pos < n:
            if not self._fill():
                available = len(self._buf) - self._pos
                raise BinaryFormatError(
                    f"stream ended while reading {what}: expected {n} bytes, "
                    f"only {available} available",
                    offset=self.offset,
                )
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        self.offset += n
        return out

    def skip_newlines(self) -> None:
        while True:
            if self._pos >= len(self._buf) and not self._fill():
                return
            if self._buf[self._pos : self._pos + 1] == b"\n":
                self._pos += 1
                self.offset += 1
            else:
                return


def load_word2vec_binary(
    source: str | Path | BinaryIO, vocab_limit: int | None = DEFAULT_VOCAB_LIMIT
) -> EmbeddingModel:
    """Load a word2vec binary model, keeping the first ``vocab_limit`` words.

    word2vec files are frequency-ordered, so the limit keeps the most
    frequent words.  Pass ``vocab_limit=None`` for the full vocabulary.
    Duplicate tokens keep their first (most frequent) vector.
    """
    stream, owned = _as_stream(source)
    try:
        reader = _Reader(stream)
        header = reader.read_until(b"\n", "header")
        try:
            count_s, dim_s = header.split()
            vocab_size, dim = int(count_s), int(dim_s)
        except ValueError:
            raise BinaryFormatError(f"malformed header {header!r}", offset=0) from None
        if vocab_size <= 0 or dim <= 0:
            raise BinaryFormatError(f"non-positive header values {header!r}", offset=0)

        n_load = vocab_size if vocab_limit is None else min(vocab_limit, vocab_size)
        vocab: dict[str, int] = {}
        rows: list[np.ndarray] = []
        for _ in range(n_load):
            reader.skip_newlines()
            raw_token = reader.read_until(b" ", "token")
            token = raw_token.decode("utf-8", errors="surrogateescape")
            raw_vec = reader.read_exact(4 * dim, f"vector of {token!r}")
            if token in vocab:
                continue
            vocab[token] = len(rows)
            rows.append(np.frombuffer(raw_vec, dtype="<f4"))
        vectors = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
        return EmbeddingModel(dim=dim, vocab=vocab, vectors=vectors)
    finally:
        if owned:
            stream.close()


def save_word2vec_binary(model: EmbeddingModel, target: str | Path | BinaryIO) -> None:
    """Write a model back in the binary format (companion to the loader)."""
    stream, owned = _as_stream(target, write=True)
    try:
        stream.write(f"{len(model.vocab)} {model.dim}\n".encode("ascii"))
        by_index = sorted(model.vocab.items(), key=lambda item: item[1])
        for token, idx in by_index:
            stream.write(token.encode("utf-8", errors="surrogateescape"))
            stream.write(b" ")
            stream.write(np.ascontiguousarray(model.vectors[idx], dtype="<f4").tobytes())
            stream.write(b"\n")
    finally:
        if owned:
            stream.close()


def _as_stream(source: str | Path | BinaryIO, write: bool = False) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        return open(source, "wb" if write else "rb"), True
    return source, False
