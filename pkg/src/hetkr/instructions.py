"""Instruction schema rendering and instruction-prefixed retrieval queries."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import KnowledgeType, QuestionRecord

TEMPLATE = "Given a question in the [domain] domain, retrieve relevant evidence to answer the question from the [source]."
TEMPLATE_NO_DOMAIN = "Given a question, retrieve relevant evidence to answer the question from the [source]."

DOMAINS = ("books", "movies", "music", "television series", "football")

# dataset domain codes -> display strings
DOMAIN_CODES = {
    "books": "books",
    "book": "books",
    "movies": "movies",
    "movie": "movies",
    "music": "music",
    "tvseries": "television series",
    "tv series": "television series",
    "television series": "television series",
    "soccer": "football",
    "football": "football",
}


class InvalidDomainError(ValueError):
    pass


class InstructionGroup(str, enum.Enum):
    ALL = "I_All"
    TEXT = "I_Text"
    KG = "I_KG"
    TABLE = "I_Table"
    INFO = "I_Info"

    @property
    def source(self) -> str:
        return _SOURCES[self]

    @property
    def target_type(self) -> Optional[KnowledgeType]:
        return _TARGETS.get(self)

    @classmethod
    def for_type(cls, etype: KnowledgeType) -> "InstructionGroup":
        return {v: k for k, v in _TARGETS.items()}[etype]

    @classmethod
    def parse(cls, value: str) -> "InstructionGroup":
        for g in cls:
            if value in (g.value, g.name, g.value.lower()):
                return g
        raise ValueError(f"unknown instruction group {value!r}")


_SOURCES = {
    InstructionGroup.ALL: "All Knowledge Sources",
    InstructionGroup.TEXT: "Text",
    InstructionGroup.KG: "Knowledge Graph Triples",
    InstructionGroup.TABLE: "Table",
    InstructionGroup.INFO: "Infobox",
}

_TARGETS = {
    InstructionGroup.TEXT: KnowledgeType.TEXT,
    InstructionGroup.KG: KnowledgeType.KG,
    InstructionGroup.TABLE: KnowledgeType.TABLE,
    InstructionGroup.INFO: KnowledgeType.INFO,
}


@dataclass(frozen=True)
class RenderedInstruction:
    group: InstructionGroup
    domain: str
    text: str
    paraphrase_index: int = 0


@dataclass(frozen=True)
class RetrievalQuery:
    instruction: RenderedInstruction
    question: QuestionRecord
    text: str


def normalize_domain(domain: str) -> str:
    """Map a dataset domain code to its display string; '' stays ''."""
    key = (domain or "").strip().lower()
    if not key:
        return ""
    try:
        return DOMAIN_CODES[key]
    except KeyError:
        raise InvalidDomainError(f"unknown domain {domain!r}; expected one of {', '.join(DOMAINS)}") from None


_DOMAIN_CLAUSE = re.compile(r"\s+(?:in|related to|within|about|on|from|concerning)\s+the\s+\[domain\]\s+domain", re.IGNORECASE)


def _fill(template: str, domain: str, source: str) -> str:
    if not domain:
        template = _DOMAIN_CLAUSE.sub("", template)
        template = template.replace("[domain]", "general")
    return template.replace("[domain]", domain).replace("[source]", source)


class InstructionSet:
    """Canonical template plus per-group paraphrases; immutable after load."""

    def __init__(self, paraphrases: Optional[Mapping[InstructionGroup, Sequence[str]]] = None):
        paraphrases = paraphrases or {}
        self.paraphrases: dict[InstructionGroup, tuple[str, ...]] = {g: tuple(paraphrases.get(g, ())) for g in InstructionGroup}

    @classmethod
    def load(cls, path: str | Path | None = None) -> "InstructionSet":
        if path is None:
            text = resources.files("hetkr").joinpath("data/paraphrases.txt").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(parse_paraphrases(text))

    def count(self, group: InstructionGroup) -> int:
        return len(self.paraphrases[group])

    def render(self, group: InstructionGroup, domain: str = "", paraphrase_index: int = 0) -> RenderedInstruction:
        display = normalize_domain(domain)
        n = self.count(group)
        if not 0 <= paraphrase_index <= n:
            raise IndexError(f"paraphrase index {paraphrase_index} outside [0, {n}] for {group.value}")
        if paraphrase_index == 0:
            template = TEMPLATE if display else TEMPLATE_NO_DOMAIN
        else:
            template = self.paraphrases[group][paraphrase_index - 1]
        return RenderedInstruction(group, display, _fill(template, display, group.source), paraphrase_index)

    def sample(self, group: InstructionGroup, domain: str, rng: np.random.Generator) -> RenderedInstruction:
        """Uniform draw over the canonical form and every paraphrase."""
        idx = int(rng.integers(0, self.count(group) + 1))
        return self.render(group, domain, idx)


def parse_paraphrases(text: str) -> dict[InstructionGroup, list[str]]:
    out: dict[InstructionGroup, list[str]] = {}
    current: Optional[InstructionGroup] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]") and line not in ("[domain]", "[source]"):
            current = InstructionGroup.parse(line[1:-1])
            out.setdefault(current, [])
            continue
        if current is None:
            raise ValueError(f"paraphrase line {lineno} appears before any group header")
        if "[source]" not in line:
            raise ValueError(f"paraphrase line {lineno} lacks the [source] placeholder")
        out[current].append(line)
    return out


_DEFAULT: Optional[InstructionSet] = None


def default_instructions() -> InstructionSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = InstructionSet.load()
    return _DEFAULT


def render_instruction(group: InstructionGroup, domain: str = "", paraphrase_index: int = 0, instructions: Optional[InstructionSet] = None) -> RenderedInstruction:
    return (instructions or default_instructions()).render(group, domain, paraphrase_index)


def sample_training_instruction(group: InstructionGroup, domain: str, rng: np.random.Generator, instructions: Optional[InstructionSet] = None) -> RenderedInstruction:
    return (instructions or default_instructions()).sample(group, domain, rng)


def query_text(instruction: RenderedInstruction, question: str) -> str:
    """Instruction and question joined by one space."""
    return f"{instruction.text} {question}"


def build_retrieval_query(instruction: RenderedInstruction, question: QuestionRecord) -> RetrievalQuery:
    return RetrievalQuery(instruction, question, query_text(instruction, question.text))
