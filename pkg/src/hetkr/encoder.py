"""Mean-pooled token-embedding encoder with exact manual gradients."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .textproc import UNK_ID, TokenSequence

MAGIC = b"HGEN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIq")
NORM_EPS = 1e-8


class FormatError(ValueError):
    pass


@dataclass
class EncoderParams:
    table: np.ndarray
    seed: int = 0
    init_scale: float = 0.02

    @classmethod
    def init(cls, vocab_size: int, dim: int = 64, seed: int = 0, scale: float = 0.02) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        table = rng.uniform(-scale, scale, size=(vocab_size, dim)).astype(np.float32)
        return cls(table, seed, scale)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.table.copy(), self.seed, self.init_scale)

    def _payload(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.vocab_size, self.dim, self.seed) + np.ascontiguousarray(self.table, dtype="<f4").tobytes()

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self._payload()).digest()

    def save(self, path: str | Path) -> None:
        payload = self._payload()
        Path(path).write_bytes(payload + hashlib.sha256(payload).digest())

    @classmethod
    def load(cls, path: str | Path) -> "EncoderParams":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size + 32:
            raise FormatError(f"{path}: truncated encoder file")
        payload, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise FormatError(f"{path}: checksum mismatch")
        magic, version, v, d, seed = _HEADER.unpack_from(payload)
        if magic != MAGIC or version != VERSION:
            raise FormatError(f"{path}: not an encoder file (magic={magic!r}, version={version})")
        body = payload[_HEADER.size :]
        if len(body) != v * d * 4:
            raise FormatError(f"{path}: expected {v}x{d} table")
        table = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(v, d)
        return cls(table, seed)


@dataclass
class EmbeddingVector:
    values: np.ndarray
    normalized: bool

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class GradientBuffer:
    grad: np.ndarray
    count: int = 0
    clamped: bool = False

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientBuffer":
        return cls(np.zeros(params.table.shape, dtype=np.float64))

    def add(self, contribution: np.ndarray) -> None:
        self.grad += contribution
        self.count += 1

    def zero(self) -> None:
        self.grad[...] = 0.0
        self.count = 0
        self.clamped = False


def _ids(seq) -> Sequence[int]:
    return seq.ids if isinstance(seq, TokenSequence) else seq


def pooling_matrix(sequences: Sequence, vocab_size: int) -> sp.csr_matrix:
    """Row i averages the embedding rows of sequence i; an empty sequence pools UNK alone."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for seq in sequences:
        ids = list(_ids(seq)) or [UNK_ID]
        for t in ids:
            if not 0 <= t < vocab_size:
                raise IndexError(f"token id {t} outside vocabulary of size {vocab_size}")
        w = 1.0 / len(ids)
        indices.extend(ids)
        data.extend([w] * len(ids))
        indptr.append(len(indices))
    return sp.csr_matrix((np.array(data), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)), shape=(len(sequences), vocab_size))


def l2_normalize(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (unit rows, clamped norms, clamp flags)."""
    norms = np.linalg.norm(pooled, axis=-1)
    flags = norms < NORM_EPS
    norms = np.maximum(norms, NORM_EPS)
    return pooled / norms[..., None], norms, flags


@dataclass
class Forward:
    """Cached forward pass for a batch of sequences."""

    pool: sp.csr_matrix
    pooled: np.ndarray
    unit: np.ndarray
    norms: np.ndarray
    clamped: Optional[np.ndarray] = None


def forward(table: np.ndarray, sequences: Sequence) -> Forward:
    table = np.asarray(table, dtype=np.float64)
    pool = pooling_matrix(sequences, table.shape[0])
    pooled = np.asarray(pool @ table)
    unit, norms, flags = l2_normalize(pooled)
    return Forward(pool, pooled, unit, norms, flags)


def backward_normalized(fw: Forward, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the embedding table given dL/d(unit vectors)."""
    radial = np.sum(grad_unit * fw.unit, axis=1, keepdims=True)
    grad_pooled = (grad_unit - radial * fw.unit) / fw.norms[:, None]
    return backward_pooled(fw, grad_pooled)


def backward_pooled(fw: Forward, grad_pooled: np.ndarray) -> np.ndarray:
    return np.asarray(fw.pool.T @ grad_pooled)


def encode_matrix(params: EncoderParams, sequences: Sequence, normalize: bool = True) -> np.ndarray:
    fw = forward(params.table, sequences)
    return fw.unit if normalize else fw.pooled


def encode_batch(params: EncoderParams, sequences: Sequence, normalize: bool = True) -> list[EmbeddingVector]:
    mat = encode_matrix(params, sequences, normalize)
    return [EmbeddingVector(row, normalize) for row in mat]


def encode(params: EncoderParams, tokens, normalize: bool = True) -> EmbeddingVector:
    return encode_batch(params, [tokens], normalize)[0]


def similarity(u: EmbeddingVector | np.ndarray, v: EmbeddingVector | np.ndarray) -> float:
    a = u.values if isinstance(u, EmbeddingVector) else np.asarray(u)
    b = v.values if isinstance(v, EmbeddingVector) else np.asarray(v)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def backprop_pooled(params: EncoderParams, tokens, upstream: np.ndarray) -> GradientBuffer:
    """Gradient contribution of one sequence given dL/d(normalized encoding)."""
    fw = forward(params.table, [tokens])
    buf = GradientBuffer(backward_normalized(fw, np.asarray(upstream, dtype=np.float64)[None, :]), count=1)
    buf.clamped = bool(fw.clamped[0])
    return buf


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their joint norm is at most max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def sgd_update(param: np.ndarray, grad: np.ndarray, lr: float) -> None:
    param -= (lr * grad).astype(param.dtype)


class Optimizer:
    """Plain SGD, or Adam with decoupled weight decay, over a fixed list of arrays."""

    def __init__(self, params: Sequence[np.ndarray], kind: str = "sgd", lr: float = 0.1, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: float = 1.0):
        if kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.steps = 0
        if kind == "adamw":
            self.m = [np.zeros(p.shape) for p in self.params]
            self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        norm = clip_gradients(grads, self.clip_norm)
        self.steps += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                sgd_update(p, g, self.lr)
            return norm
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)
            p -= upd.astype(p.dtype)
        return norm
