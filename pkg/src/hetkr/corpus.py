"""Evidence and question records, structured-data linearization, relevance labels."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

logger = logging.getLogger(__name__)

SEP = ", "


class InvalidInputError(ValueError):
    pass


class KnowledgeType(str, enum.Enum):
    TEXT = "text"
    KG = "kg"
    TABLE = "table"
    INFO = "info"

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, value: str) -> "KnowledgeType":
        key = value.strip().lower()
        if key in ("infobox",):
            key = "info"
        try:
            return cls(key)
        except ValueError:
            raise InvalidInputError(f"unknown evidence source {value!r}") from None


_DISPLAY = {
    KnowledgeType.TEXT: "Text",
    KnowledgeType.KG: "KG",
    KnowledgeType.TABLE: "Table",
    KnowledgeType.INFO: "Info",
}

# fixed order used for round-robin allocation and report columns
TYPE_ORDER = (KnowledgeType.TEXT, KnowledgeType.KG, KnowledgeType.TABLE, KnowledgeType.INFO)


@dataclass(frozen=True)
class EntityRef:
    id: str
    label: str = ""

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("entity id must be non-empty")

    def to_json(self) -> dict:
        return {"id": self.id, "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> "EntityRef":
        return cls(str(obj["id"]), str(obj.get("label", "")))


@dataclass(frozen=True)
class EvidenceRecord:
    evidence_id: int
    etype: KnowledgeType
    text: str
    entities: tuple[EntityRef, ...] = ()
    page_title: str = ""
    retrieved_for: Optional[EntityRef] = None
    disambiguations: tuple = ()

    def __post_init__(self):
        if not self.text:
            raise InvalidInputError(f"evidence {self.evidence_id} has empty text")


@dataclass(frozen=True)
class QuestionRecord:
    question_id: int
    text: str
    domain: str = ""
    answer_text: str = ""
    answer_entities: tuple[EntityRef, ...] = ()
    split: str = ""

    def __post_init__(self):
        if not self.text:
            raise InvalidInputError(f"question {self.question_id} has empty text")
        if not self.answer_text and not self.answer_entities:
            raise InvalidInputError(f"question {self.question_id} has no answer")


@dataclass(frozen=True)
class DataTextPair:
    data: EvidenceRecord
    text: str

    def __post_init__(self):
        if self.data.etype is KnowledgeType.TEXT:
            raise InvalidInputError("data side of a data-text pair cannot be Text evidence")
        if not self.text:
            raise InvalidInputError("pair text must be non-empty")


@dataclass
class TypeStats:
    count: int
    avg_length: float
    percentage: float


@dataclass
class CorpusStats:
    per_type: dict[KnowledgeType, TypeStats]
    total_count: int
    total_avg_length: float

    def to_table(self) -> str:
        rows = [("Types", "Avg. length", "Count", "Percentage")]
        for t in TYPE_ORDER:
            s = self.per_type[t]
            rows.append((_STAT_NAMES[t], f"{s.avg_length:.2f}", f"{s.count:,}", f"{s.percentage:.2f}%"))
        total_pct = sum(s.percentage for s in self.per_type.values())
        rows.append(("Sum", f"{self.total_avg_length:.2f}", f"{self.total_count:,}", f"{total_pct:.2f}%"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = []
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "types": {
                t.value: {"count": s.count, "avg_length": s.avg_length, "percentage": s.percentage}
                for t, s in self.per_type.items()
            },
            "total": {"count": self.total_count, "avg_length": self.total_avg_length},
        }


_STAT_NAMES = {
    KnowledgeType.TEXT: "Text",
    KnowledgeType.KG: "KG",
    KnowledgeType.TABLE: "Table",
    KnowledgeType.INFO: "Infobox",
}


# -- linearizers -----------------------------------------------------------


def linearize_kg_fact(
    page_title: str,
    subject: str,
    relation: str,
    obj: str,
    qualifiers: Sequence[tuple[str, str]] = (),
) -> str:
    """Flatten a KG fact; the subject anchors the string, so page_title is unused."""
    if not subject or not relation or not obj:
        raise InvalidInputError("KG fact needs non-empty subject, relation and object")
    parts = [subject, relation, obj]
    for rel, value in qualifiers:
        parts.extend((rel, value))
    return SEP.join(parts)


def linearize_table_row(page_title: str, cells: Sequence[tuple[str, str]]) -> str:
    if not page_title:
        raise InvalidInputError("table row needs a page title")
    parts = [page_title]
    for header, value in cells:
        if not header:
            raise InvalidInputError("table header must be non-empty")
        parts.append(f"{header} is {value}" if value else f"{header} is")
    return SEP.join(parts)


def linearize_infobox(page_title: str, subject: str, pairs: Sequence[tuple[str, str]]) -> str:
    if not page_title or not subject:
        raise InvalidInputError("infobox needs page title and subject")
    parts = [page_title, subject]
    for prop, value in pairs:
        parts.extend((prop, value))
    return SEP.join(parts)


# -- relevance -------------------------------------------------------------

_WORD_RE = re.compile(r"[^\W_]+")


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _contains_phrase(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    return any(list(haystack[i : i + n]) == list(needle) for i in range(len(haystack) - n + 1))


def label_relevance(question: QuestionRecord, evidence: EvidenceRecord, text_fallback: bool = True) -> bool:
    """True when the evidence mentions an answer entity of the question.

    Questions without answer entities fall back to whole-token, case-insensitive
    containment of the answer text.
    """
    if question.answer_entities:
        wanted = {e.id for e in question.answer_entities}
        return any(e.id in wanted for e in evidence.entities)
    if not text_fallback:
        return False
    return _contains_phrase(_words(evidence.text), _words(question.answer_text))


class RelevanceIndex:
    """Entity-id inverted map for labelling a whole corpus against many questions."""

    def __init__(self, corpus: Sequence[EvidenceRecord], text_fallback: bool = True):
        self.corpus = list(corpus)
        self.text_fallback = text_fallback
        self._by_entity: dict[str, list[int]] = {}
        for ev in self.corpus:
            for ent in {e.id for e in ev.entities}:
                self._by_entity.setdefault(ent, []).append(ev.evidence_id)
        self._by_id = {ev.evidence_id: ev for ev in self.corpus}

    def relevant_ids(self, question: QuestionRecord) -> list[int]:
        if question.answer_entities:
            found: set[int] = set()
            for ent in question.answer_entities:
                found.update(self._by_entity.get(ent.id, ()))
            return sorted(found)
        if not self.text_fallback:
            return []
        return sorted(ev.evidence_id for ev in self.corpus if label_relevance(question, ev))


# -- verbalization ---------------------------------------------------------


def _parse_table(text: str) -> tuple[str, list[tuple[str, str]]]:
    parts = text.split(SEP)
    cells = []
    for cell in parts[1:]:
        if cell.endswith(" is"):
            cells.append((cell[:-3], ""))
        elif " is " in cell:
            header, value = cell.split(" is ", 1)
            cells.append((header, value))
        elif cells:
            # value contained the separator; glue it back
            h, v = cells[-1]
            cells[-1] = (h, v + SEP + cell)
        else:
            cells.append((cell, ""))
    return parts[0], cells


def template_verbalize(data: EvidenceRecord) -> str:
    """Deterministic data-to-text rendering of a linearized structured evidence."""
    parts = data.text.split(SEP)
    if data.etype is KnowledgeType.KG:
        if len(parts) < 3:
            return f"{data.text}."
        subj, rel, obj = parts[0], parts[1], parts[2]
        out = f"The {rel} of {subj} is {obj}"
        rest = parts[3:]
        quals = [f"{rest[i]} is {rest[i + 1]}" if i + 1 < len(rest) else rest[i] for i in range(0, len(rest), 2)]
        if quals:
            out += SEP + SEP.join(quals)
        return out + "."
    if data.etype is KnowledgeType.TABLE:
        title, cells = _parse_table(data.text)
        rendered = [f"{h} is {v}" if v else f"{h} is" for h, v in cells]
        if not rendered:
            return f"In {title}."
        if len(rendered) > 1:
            rendered[-1] = "and " + rendered[-1]
        return f"In {title}, " + SEP.join(rendered) + "."
    if data.etype is KnowledgeType.INFO:
        if len(parts) < 2:
            return f"{data.text}."
        subject = parts[1]
        rest = parts[2:]
        sentences = []
        for i in range(0, len(rest), 2):
            prop = rest[i]
            value = rest[i + 1] if i + 1 < len(rest) else ""
            sentences.append(f"The {prop} of {subject} is {value}." if value else f"The {prop} of {subject} is unknown.")
        return " ".join(sentences) if sentences else f"{subject}."
    raise InvalidInputError("Text evidence cannot be verbalized")


@dataclass
class ExternalVerbalizer:
    """Client for an HTTP data-to-text service.

    POSTs {"evidence", "source"} and expects {"text"}; any failure falls back
    to the template rendering and logs a warning.
    """

    url: str
    token_env: str = "HETKR_VERBALIZER_TOKEN"
    timeout: float = 10.0
    retries: int = 2
    failures: int = field(default=0, init=False)

    def _request(self, payload: dict) -> str:
        body = json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            data = json.loads(resp.read().decode("utf-8"))
        text = data.get("text") if isinstance(data, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise ValueError("verbalizer response missing 'text'")
        return text.strip()

    def __call__(self, data: EvidenceRecord) -> str:
        if data.etype is KnowledgeType.TEXT:
            raise InvalidInputError("Text evidence cannot be verbalized")
        payload = {"evidence": data.text, "source": data.etype.value}
        last_err: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return self._request(payload)
            except (urllib.error.URLError, OSError, ValueError) as err:
                last_err = err
                if attempt < self.retries:
                    time.sleep(min(0.05 * 2**attempt, 1.0))
        self.failures += 1
        logger.warning("external verbalizer failed for evidence %d (%s); using template", data.evidence_id, last_err)
        return template_verbalize(data)


def verbalize(data: EvidenceRecord, generator: Optional[ExternalVerbalizer] = None) -> str:
    if data.etype is KnowledgeType.TEXT:
        raise InvalidInputError("Text evidence cannot be verbalized")
    if generator is not None:
        return generator(data)
    return template_verbalize(data)


def make_pairs(corpus: Iterable[EvidenceRecord], generator: Optional[ExternalVerbalizer] = None) -> list[DataTextPair]:
    return [DataTextPair(ev, verbalize(ev, generator)) for ev in corpus if ev.etype is not KnowledgeType.TEXT]


# -- statistics ------------------------------------------------------------


def corpus_stats(corpus: Sequence[EvidenceRecord]) -> CorpusStats:
    if not corpus:
        raise InvalidInputError("corpus is empty")
    counts: Counter = Counter()
    lengths: Counter = Counter()
    for ev in corpus:
        counts[ev.etype] += 1
        lengths[ev.etype] += len(ev.text.split())
    total = sum(counts.values())
    per_type = {}
    for t in TYPE_ORDER:
        c = counts[t]
        per_type[t] = TypeStats(c, lengths[t] / c if c else 0.0, 100.0 * c / total)
    return CorpusStats(per_type, total, sum(lengths.values()) / total)


# -- JSONL io --------------------------------------------------------------


def evidence_from_json(obj: dict, evidence_id: int) -> EvidenceRecord:
    try:
        text = obj["linearized evidence text"]
        etype = KnowledgeType.parse(obj["source"])
    except KeyError as err:
        raise InvalidInputError(f"evidence line {evidence_id} missing key {err}") from None
    ents = tuple(EntityRef.from_json(e) for e in obj.get("wikidata entities", []) or [])
    rf = obj.get("retrieved for entity")
    eid = int(obj.get("evidence id", evidence_id))
    page_title = obj.get("page title")
    if page_title is None:
        page_title = "" if etype is KnowledgeType.KG else text.split(SEP, 1)[0]
    dis = tuple(tuple(d) for d in obj.get("disambiguations", []) or [])
    return EvidenceRecord(eid, etype, text, ents, page_title, EntityRef.from_json(rf) if rf else None, dis)


def evidence_to_json(ev: EvidenceRecord) -> dict:
    obj = {
        "evidence id": ev.evidence_id,
        "linearized evidence text": ev.text,
        "wikidata entities": [e.to_json() for e in ev.entities],
        "source": ev.etype.value,
    }
    if ev.page_title:
        obj["page title"] = ev.page_title
    if ev.retrieved_for is not None:
        obj["retrieved for entity"] = ev.retrieved_for.to_json()
    if ev.disambiguations:
        obj["disambiguations"] = [list(d) for d in ev.disambiguations]
    return obj


def question_from_json(obj: dict) -> QuestionRecord:
    try:
        qid = int(obj["question id"])
        text = obj["question"]
    except KeyError as err:
        raise InvalidInputError(f"question line missing key {err}") from None
    answers = tuple(EntityRef.from_json(a) for a in obj.get("answers", []) or [])
    return QuestionRecord(qid, text, obj.get("domain", "") or "", obj.get("answer text", "") or "", answers, obj.get("split", "") or "")


def question_to_json(q: QuestionRecord) -> dict:
    obj = {
        "question id": str(q.question_id),
        "question": q.text,
        "domain": q.domain,
        "answers": [a.to_json() for a in q.answer_entities],
        "answer text": q.answer_text,
    }
    if q.split:
        obj["split"] = q.split
    return obj


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as err:
                raise InvalidInputError(f"{path}:{lineno}: {err}") from None


def read_evidence(path: str | Path) -> list[EvidenceRecord]:
    records = [evidence_from_json(obj, i) for i, (_, obj) in enumerate(_iter_jsonl(Path(path)))]
    seen: set[int] = set()
    for ev in records:
        if ev.evidence_id in seen:
            raise InvalidInputError(f"duplicate evidence id {ev.evidence_id}")
        seen.add(ev.evidence_id)
    return sorted(records, key=lambda e: e.evidence_id)


def read_questions(path: str | Path) -> list[QuestionRecord]:
    return [question_from_json(obj) for _, obj in _iter_jsonl(Path(path))]


def write_jsonl(path: str | Path, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=False) + "\n")


def write_evidence(path: str | Path, corpus: Iterable[EvidenceRecord]) -> None:
    write_jsonl(path, (evidence_to_json(ev) for ev in corpus))


def write_questions(path: str | Path, questions: Iterable[QuestionRecord]) -> None:
    write_jsonl(path, (question_to_json(q) for q in questions))


def write_pairs(path: str | Path, pairs: Iterable[DataTextPair]) -> None:
    write_jsonl(path, ({"evidence id": p.data.evidence_id, "source": p.data.etype.value, "data": p.data.text, "text": p.text} for p in pairs))


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    return [(obj["data"], obj["text"]) for _, obj in _iter_jsonl(Path(path))]
