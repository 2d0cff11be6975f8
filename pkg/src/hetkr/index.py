"""Exact dense top-k retrieval with binary persistence."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TYPE_ORDER, EvidenceRecord, KnowledgeType
from .encoder import EmbeddingVector, EncoderParams, FormatError, encode_matrix
from .textproc import Vocabulary

MAGIC = b"HGIX"
VERSION = 1
_HEADER = struct.Struct("<4sIQI32s")


@dataclass(frozen=True)
class SearchHit:
    evidence_id: int
    score: float
    rank: int
    etype: KnowledgeType


@dataclass
class VectorIndex:
    matrix: np.ndarray  # float32, unit rows
    ids: np.ndarray  # int64, ascending
    types: np.ndarray  # uint8 codes into TYPE_ORDER
    fingerprint: bytes
    _f64: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (len(self.matrix) == len(self.ids) == len(self.types)):
            raise ValueError("index rows, ids and types differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def scores(self, query: np.ndarray) -> np.ndarray:
        if self._f64 is None:
            self._f64 = self.matrix.astype(np.float64)
        return self._f64 @ np.asarray(query, dtype=np.float64)

    def etype(self, row: int) -> KnowledgeType:
        return TYPE_ORDER[int(self.types[row])]

    def save(self, path: str | Path) -> None:
        header = _HEADER.pack(MAGIC, VERSION, len(self.ids), self.dim, self.fingerprint)
        payload = (
            header
            + np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()
            + np.ascontiguousarray(self.ids, dtype="<i8").tobytes()
            + np.ascontiguousarray(self.types, dtype=np.uint8).tobytes()
        )
        Path(path).write_bytes(payload + hashlib.sha256(payload).digest())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size + 32:
            raise FormatError(f"{path}: truncated index file")
        payload, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise FormatError(f"{path}: checksum mismatch")
        magic, version, n, d, fp = _HEADER.unpack_from(payload)
        if magic != MAGIC or version != VERSION:
            raise FormatError(f"{path}: not an index file")
        off = _HEADER.size
        expected = off + n * d * 4 + n * 8 + n
        if len(payload) != expected:
            raise FormatError(f"{path}: size mismatch for {n} rows of dim {d}")
        matrix = np.frombuffer(payload, dtype="<f4", count=n * d, offset=off).astype(np.float32).reshape(n, d)
        off += n * d * 4
        ids = np.frombuffer(payload, dtype="<i8", count=n, offset=off).astype(np.int64)
        off += n * 8
        types = np.frombuffer(payload, dtype=np.uint8, count=n, offset=off).copy()
        return cls(matrix, ids, types, fp)


def build_index(params: EncoderParams, vocab: Vocabulary, corpus: Sequence[EvidenceRecord]) -> VectorIndex:
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    ordered = sorted(corpus, key=lambda e: e.evidence_id)
    vecs = encode_matrix(params, [vocab.encode(e.text).ids for e in ordered]).astype(np.float32)
    ids = np.array([e.evidence_id for e in ordered], dtype=np.int64)
    types = np.array([TYPE_ORDER.index(e.etype) for e in ordered], dtype=np.uint8)
    return VectorIndex(vecs, ids, types, params.fingerprint())


def top_k_search(index: VectorIndex, query: EmbeddingVector | np.ndarray, k: int) -> list[SearchHit]:
    """Exact scan; highest dot products first, ties by ascending evidence id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    q = query.values if isinstance(query, EmbeddingVector) else query
    scores = index.scores(q)
    n = len(scores)
    if k < n:
        # everything tied with the k-th best score stays a candidate
        kth = np.partition(scores, n - k)[n - k]
        cand = np.nonzero(scores >= kth)[0]
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((index.ids[cand], -scores[cand]))][:k]
    return [SearchHit(int(index.ids[r]), float(scores[r]), rank, index.etype(r)) for rank, r in enumerate(order, 1)]
