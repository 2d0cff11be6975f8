"""Scenario 1 and scenario 2 retrieval metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import KnowledgeType, QuestionRecord
from .encoder import EncoderParams, encode_matrix
from .index import VectorIndex, top_k_search
from .instructions import InstructionGroup, InstructionSet, build_retrieval_query, default_instructions
from .textproc import BM25Index, Vocabulary, tokenize

RUN_DEPTH = 100
HIT_KS = (5, 10, 100)

_CELL = {
    KnowledgeType.KG: "kg_hit",
    KnowledgeType.TEXT: "text_hit",
    KnowledgeType.TABLE: "table_hit",
    KnowledgeType.INFO: "info_hit",
}


class FingerprintMismatch(ValueError):
    pass


@dataclass
class RankedHit:
    evidence_id: int
    score: float
    relevant: bool
    etype: KnowledgeType


@dataclass
class RunResult:
    question_id: int
    group: InstructionGroup
    hits: list[RankedHit]

    def __post_init__(self):
        if len(self.hits) > RUN_DEPTH:
            raise ValueError(f"run keeps at most {RUN_DEPTH} hits")

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "group": self.group.value,
            "hits": [{"id": h.evidence_id, "score": h.score, "relevant": h.relevant, "type": h.etype.value} for h in self.hits],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunResult":
        hits = [RankedHit(int(h["id"]), float(h["score"]), bool(h["relevant"]), KnowledgeType(h["type"])) for h in obj["hits"]]
        return cls(int(obj["question_id"]), InstructionGroup.parse(obj["group"]), hits)


def hit_at_k(result: RunResult, k: int) -> int:
    return int(any(h.relevant for h in result.hits[:k]))


def mrr_at_k(result: RunResult, k: int = 100) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    for rank, h in enumerate(result.hits[:k], 1):
        if h.relevant:
            return 1.0 / rank
    return 0.0


def type_hit(result: RunResult, etype: KnowledgeType, k: int = 100) -> int:
    return int(any(h.relevant and h.etype is etype for h in result.hits[:k]))


@dataclass
class Cell:
    value: Optional[float]
    n: int


@dataclass
class MetricReport:
    scenario1: dict[str, Cell] = field(default_factory=dict)
    scenario2: dict[str, Cell] = field(default_factory=dict)
    scenario2_under_all: dict[str, Cell] = field(default_factory=dict)

    @property
    def hit100(self) -> float:
        return self.scenario1["hit@100"].value or 0.0

    def type_hit(self, etype: KnowledgeType, under_all: bool = False) -> Optional[float]:
        cells = self.scenario2_under_all if under_all else self.scenario2
        return cells[_CELL[etype]].value

    def to_json(self) -> dict:
        def dump(cells: Mapping[str, Cell]) -> dict:
            return {k: {"value": None if c.value is None else round(c.value, 2), "n": c.n} for k, c in cells.items()}

        out = {"scenario1": dump(self.scenario1), "scenario2": dump(self.scenario2)}
        if self.scenario2_under_all:
            out["scenario2_under_all"] = dump(self.scenario2_under_all)
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def to_table(self) -> str:
        def fmt(c: Cell) -> str:
            return "-" if c.value is None else f"{c.value:.2f}"

        lines = ["Scenario 1 (I_All)"]
        keys = list(self.scenario1)
        lines.append("  " + "  ".join(f"{k:>8}" for k in keys))
        lines.append("  " + "  ".join(f"{fmt(self.scenario1[k]):>8}" for k in keys))
        lines.append("Scenario 2 (Type-Hit@100)")
        keys = [_CELL[t] for t in (KnowledgeType.KG, KnowledgeType.TEXT, KnowledgeType.TABLE, KnowledgeType.INFO)]
        lines.append("  " + f"{'':>6}" + "".join(f"{k:>11}" for k in keys))
        lines.append("  " + f"{'I_type':>6}" + "".join(f"{fmt(self.scenario2[k]):>11}" for k in keys))
        if self.scenario2_under_all:
            lines.append("  " + f"{'I_All':>6}" + "".join(f"{fmt(self.scenario2_under_all[k]):>11}" for k in keys))
        lines.append("  " + f"{'n':>6}" + "".join(f"{self.scenario2[k].n:>11}" for k in keys))
        return "\n".join(lines)


def _mean_pct(values: Sequence[float]) -> Cell:
    if not values:
        return Cell(None, 0)
    return Cell(100.0 * float(sum(values)) / len(values), len(values))


def aggregate(runs: Sequence[RunResult], eligibility: Mapping[int, set[KnowledgeType]]) -> MetricReport:
    """Fold per-question runs into a report; every cell keeps its denominator."""
    all_runs = [r for r in runs if r.group is InstructionGroup.ALL]
    report = MetricReport()
    for k in HIT_KS:
        report.scenario1[f"hit@{k}"] = _mean_pct([hit_at_k(r, k) for r in all_runs])
    report.scenario1["mrr@100"] = _mean_pct([mrr_at_k(r, 100) for r in all_runs])
    by_group: dict[InstructionGroup, list[RunResult]] = {}
    for r in runs:
        by_group.setdefault(r.group, []).append(r)
    for t in (KnowledgeType.KG, KnowledgeType.TEXT, KnowledgeType.TABLE, KnowledgeType.INFO):
        g = InstructionGroup.for_type(t)
        typed = [r for r in by_group.get(g, []) if t in eligibility.get(r.question_id, ())]
        report.scenario2[_CELL[t]] = _mean_pct([type_hit(r, t) for r in typed])
        under_all = [r for r in all_runs if t in eligibility.get(r.question_id, ())]
        if under_all:
            report.scenario2_under_all[_CELL[t]] = _mean_pct([type_hit(r, t) for r in under_all])
        else:
            report.scenario2_under_all[_CELL[t]] = Cell(None, 0)
    return report


def _runs_from_scores(qids, group, index: VectorIndex, queries: np.ndarray, relevant: Mapping[int, set[int]], depth: int) -> list[RunResult]:
    runs = []
    for qid, qvec in zip(qids, queries):
        rel = relevant.get(qid, set())
        hits = top_k_search(index, qvec, depth)
        runs.append(RunResult(qid, group, [RankedHit(h.evidence_id, h.score, h.evidence_id in rel, h.etype) for h in hits]))
    return runs


def question_eligibility(questions: Sequence[QuestionRecord], relevant: Mapping[int, set[int]], index: VectorIndex) -> dict[int, set[KnowledgeType]]:
    row_of = {int(e): i for i, e in enumerate(index.ids)}
    return {q.question_id: {index.etype(row_of[e]) for e in relevant.get(q.question_id, ()) if e in row_of} for q in questions}


def run_dense(
    params: EncoderParams,
    vocab: Vocabulary,
    index: VectorIndex,
    questions: Sequence[QuestionRecord],
    relevant: Mapping[int, set[int]],
    instructions: Optional[InstructionSet] = None,
    depth: int = RUN_DEPTH,
) -> tuple[list[RunResult], dict[int, set[KnowledgeType]]]:
    """Canonical I_All run for every question plus I_type runs for type-eligible questions."""
    if params.fingerprint() != index.fingerprint:
        raise FingerprintMismatch("index was built with a different encoder")
    instructions = instructions or default_instructions()
    eligibility = question_eligibility(questions, relevant, index)
    runs: list[RunResult] = []
    for group in InstructionGroup:
        target = group.target_type
        qs = [q for q in questions if target is None or target in eligibility[q.question_id]]
        if not qs:
            continue
        texts = [build_retrieval_query(instructions.render(group, q.domain, 0), q).text for q in qs]
        qvecs = encode_matrix(params, [vocab.encode(t).ids for t in texts])
        runs.extend(_runs_from_scores([q.question_id for q in qs], group, index, qvecs, relevant, depth))
    return runs, eligibility


def evaluate_scenarios(
    params: EncoderParams,
    vocab: Vocabulary,
    index: VectorIndex,
    questions: Sequence[QuestionRecord],
    relevant: Mapping[int, set[int]],
    instructions: Optional[InstructionSet] = None,
) -> tuple[MetricReport, list[RunResult]]:
    runs, eligibility = run_dense(params, vocab, index, questions, relevant, instructions)
    return aggregate(runs, eligibility), runs


def evaluate_bm25(bm25: BM25Index, types: Mapping[int, KnowledgeType], questions: Sequence[QuestionRecord], relevant: Mapping[int, set[int]], depth: int = RUN_DEPTH) -> MetricReport:
    """Scenario 1 metrics for the lexical baseline, queried with the bare question."""
    runs = []
    for q in questions:
        rel = relevant.get(q.question_id, set())
        hits = bm25.top_k(tokenize(q.text), depth)
        runs.append(RunResult(q.question_id, InstructionGroup.ALL, [RankedHit(e, s, e in rel, types[e]) for e, s in hits]))
    eligibility = {q.question_id: {types[e] for e in relevant.get(q.question_id, ())} for q in questions}
    return aggregate(runs, eligibility)


def write_runs(path: str | Path, runs: Iterable[RunResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in runs:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_runs(path: str | Path) -> list[RunResult]:
    with open(path, encoding="utf-8") as fh:
        return [RunResult.from_json(json.loads(line)) for line in fh if line.strip()]
