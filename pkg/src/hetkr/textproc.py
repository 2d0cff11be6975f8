"""Tokenization, vocabulary, and an Okapi BM25 lexical scorer."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "[UNK]"
MASK = "[MASK]"
UNK_ID = 0
MASK_ID = 1
MAX_SEQUENCE_LENGTH = 256

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every run of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    original_length: int

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_frequency: int = 1, max_size: int = 50_000):
        if list(tokens[:2]) != [UNK, MASK]:
            raise ValueError("vocabulary must start with the UNK and MASK tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        self.min_frequency = min_frequency
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str, max_length: int = MAX_SEQUENCE_LENGTH) -> TokenSequence:
        toks = tokenize(text)
        return TokenSequence(tuple(self.id(t) for t in toks[:max_length]), len(toks))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.rsplit("\t", 1)
                entries.append((int(idx), tok))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: vocabulary ids are not dense")
        return cls([t for _, t in entries])


def build_vocab(texts: Iterable[str], min_frequency: int = 1, max_size: int = 50_000) -> Vocabulary:
    if max_size < 2:
        raise ValueError("max_size must leave room for UNK and MASK")
    counts: Counter = Counter()
    for text in texts:
        counts.update(tokenize(text))
    kept = [(t, c) for t, c in counts.items() if c >= min_frequency]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = [UNK, MASK] + [t for t, _ in kept[: max_size - 2]]
    return Vocabulary(tokens, min_frequency, max_size)


class BM25Index:
    """Inverted index with Okapi BM25 scoring (k1=1.2, b=0.75 by default)."""

    def __init__(self, docs: Sequence[Sequence[str]], evidence_ids: Sequence[int], k1: float = 1.2, b: float = 0.75):
        if len(docs) != len(evidence_ids):
            raise ValueError("docs and ids differ in length")
        self.k1 = k1
        self.b = b
        self.evidence_ids = np.asarray(evidence_ids, dtype=np.int64)
        self.row_of = {int(e): i for i, e in enumerate(self.evidence_ids)}
        self.n_docs = len(docs)
        self.doc_len = np.array([len(d) for d in docs], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) if self.doc_len.sum() > 0 else 1.0
        postings: dict[str, dict[int, int]] = {}
        for row, doc in enumerate(docs):
            for term, tf in Counter(doc).items():
                postings.setdefault(term, {})[row] = tf
        self.postings = {t: (np.fromiter(p.keys(), np.int64, len(p)), np.fromiter(p.values(), np.float64, len(p))) for t, p in postings.items()}
        self.tf = [Counter(d) for d in docs]

    @classmethod
    def from_texts(cls, texts: Sequence[str], evidence_ids: Sequence[int], **kw) -> "BM25Index":
        return cls([tokenize(t) for t in texts], evidence_ids, **kw)

    def idf(self, term: str) -> float:
        df = len(self.postings[term][0]) if term in self.postings else 0
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def _norm(self, row: int) -> float:
        return self.k1 * (1.0 - self.b + self.b * self.doc_len[row] / self.avgdl)

    def score(self, query_tokens: Sequence[str], evidence_id: int) -> float:
        try:
            row = self.row_of[int(evidence_id)]
        except KeyError:
            raise KeyError(f"unknown evidence id {evidence_id}") from None
        tf = self.tf[row]
        total = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1.0) / (f + self._norm(row))
        return total

    def score_all(self, query_tokens: Sequence[str]) -> np.ndarray:
        """Scores for every document, in row order; duplicates in the query count again."""
        scores = np.zeros(self.n_docs)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl)
        for term in query_tokens:
            if term not in self.postings:
                continue
            rows, tf = self.postings[term]
            scores[rows] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[rows])
        return scores

    def top_k(self, query_tokens: Sequence[str], k: int) -> list[tuple[int, float]]:
        scores = self.score_all(query_tokens)
        order = np.lexsort((self.evidence_ids, -scores))[:k]
        return [(int(self.evidence_ids[i]), float(scores[i])) for i in order]
