"""In-memory orchestration shared by the CLI and the acceptance runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import (
    DataTextPair,
    EvidenceRecord,
    ExternalVerbalizer,
    KnowledgeType,
    QuestionRecord,
    RelevanceIndex,
    make_pairs,
)
from .encoder import EncoderParams
from .evaluation import MetricReport, RunResult, evaluate_bm25, evaluate_scenarios
from .index import build_index
from .instructions import InstructionGroup, InstructionSet, default_instructions
from .textproc import BM25Index, Vocabulary, build_vocab
from .training import StageReport, TrainConfig, stage1_pretrain, stage2_align, stage3_finetune


@dataclass
class Dataset:
    corpus: list[EvidenceRecord]
    questions: list[QuestionRecord]
    relevant: dict[int, set[int]]
    pairs: list[tuple[str, str]]
    vocab: Vocabulary

    def split(self, name: str) -> list[QuestionRecord]:
        return [q for q in self.questions if q.split == name]

    @property
    def types(self) -> dict[int, KnowledgeType]:
        return {e.evidence_id: e.etype for e in self.corpus}


def instruction_texts(instructions: InstructionSet) -> list[str]:
    texts = []
    for g in InstructionGroup:
        for idx in range(instructions.count(g) + 1):
            for dom in ("", "books", "movies", "music", "tvseries", "football"):
                texts.append(instructions.render(g, dom, idx).text)
    return texts


def vocab_texts(
    corpus: Sequence[EvidenceRecord],
    pair_texts: Sequence[tuple[str, str]],
    questions: Sequence[QuestionRecord],
    instructions: InstructionSet,
) -> list[str]:
    """Every string the encoder will see: evidence, verbalized pairs, questions and instructions."""
    return [e.text for e in corpus] + [t for _, t in pair_texts] + [q.text for q in questions] + instruction_texts(instructions)


def label_all(corpus: Sequence[EvidenceRecord], questions: Sequence[QuestionRecord], text_fallback: bool = True) -> dict[int, set[int]]:
    rel = RelevanceIndex(corpus, text_fallback)
    return {q.question_id: set(rel.relevant_ids(q)) for q in questions}


def prepare(
    corpus: Sequence[EvidenceRecord],
    questions: Sequence[QuestionRecord],
    instructions: Optional[InstructionSet] = None,
    min_frequency: int = 1,
    max_size: int = 50_000,
    generator: Optional[ExternalVerbalizer] = None,
) -> Dataset:
    instructions = instructions or default_instructions()
    corpus = sorted(corpus, key=lambda e: e.evidence_id)
    pairs: list[DataTextPair] = make_pairs(corpus, generator)
    pair_texts = [(p.data.text, p.text) for p in pairs]
    vocab = build_vocab(vocab_texts(corpus, pair_texts, questions, instructions), min_frequency, max_size)
    return Dataset(list(corpus), list(questions), label_all(corpus, questions), pair_texts, vocab)


@dataclass
class StagedResult:
    params: EncoderParams
    reports: list[StageReport] = field(default_factory=list)
    metrics: dict[str, MetricReport] = field(default_factory=dict)
    runs: dict[str, list[RunResult]] = field(default_factory=dict)


def evaluate(params: EncoderParams, data: Dataset, questions: Sequence[QuestionRecord], instructions: Optional[InstructionSet] = None) -> tuple[MetricReport, list[RunResult]]:
    index = build_index(params, data.vocab, data.corpus)
    return evaluate_scenarios(params, data.vocab, index, questions, data.relevant, instructions)


def bm25_report(data: Dataset, questions: Sequence[QuestionRecord]) -> MetricReport:
    bm25 = BM25Index.from_texts([e.text for e in data.corpus], [e.evidence_id for e in data.corpus])
    return evaluate_bm25(bm25, data.types, questions, data.relevant)


def train_stages(
    data: Dataset,
    config: TrainConfig,
    dim: int = 64,
    init_scale: float = 0.02,
    instructions: Optional[InstructionSet] = None,
    eval_questions: Optional[Sequence[QuestionRecord]] = None,
    on_stage: Optional[Callable[[str, EncoderParams], None]] = None,
) -> StagedResult:
    """Run stages 1 -> 2 -> 3, optionally evaluating the encoder before and after each."""
    instructions = instructions or default_instructions()
    params = EncoderParams.init(len(data.vocab), dim, config.seed, init_scale)
    result = StagedResult(params)

    def checkpoint(name: str) -> None:
        if on_stage is not None:
            on_stage(name, params)
        if eval_questions is not None:
            report, runs = evaluate(params, data, eval_questions, instructions)
            result.metrics[name] = report
            result.runs[name] = runs

    checkpoint("untrained")
    result.reports.append(stage1_pretrain(params, data.pairs, data.vocab, config, rng=np.random.default_rng([config.seed, 11])))
    checkpoint("stage1")
    result.reports.append(stage2_align(params, data.pairs, data.vocab, config, rng=np.random.default_rng([config.seed, 22])))
    checkpoint("stage2")
    train = data.split("train") or data.questions
    result.reports.append(
        stage3_finetune(params, train, data.corpus, data.relevant, data.vocab, config, instructions, rng=np.random.default_rng([config.seed, 33]))
    )
    checkpoint("stage3")
    return result
