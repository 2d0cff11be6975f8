"""Seeded toy corpus with four evidence types and planted answers.

Subjects in different domains share names, each fact is rendered in a random
subset of the four evidence types with type-specific wording, and questions
use their own wording for the relation. That keeps lexical overlap from
solving the task on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import (
    EntityRef,
    EvidenceRecord,
    KnowledgeType,
    QuestionRecord,
    linearize_infobox,
    linearize_kg_fact,
    linearize_table_row,
    write_evidence,
    write_questions,
)


@dataclass(frozen=True)
class Relation:
    kg: str
    table: str
    info: str
    text: str
    questions: tuple[str, ...]


RELATIONS: dict[str, tuple[Relation, ...]] = {
    "books": (
        Relation("author", "Writer", "Written by", "was penned by", ("Who wrote {s}?", "Who is the writer of the novel {s}?")),
        Relation("publisher", "Imprint", "Published by", "was released through the house of", ("Which company published {s}?", "Who put out the book {s}?")),
        Relation("illustrator", "Artwork", "Illustrations by", "features drawings made by", ("Who drew the pictures in {s}?", "Who illustrated {s}?")),
        Relation("translator", "Translation", "Translated by", "was rendered into english by", ("Who translated {s}?", "Which translator worked on {s}?")),
        Relation("editor", "Edited", "Editor", "was prepared for print by", ("Who edited the book {s}?", "Which editor handled {s}?")),
    ),
    "movies": (
        Relation("director", "Directed", "Directed by", "was helmed by", ("Who directed {s}?", "Who was the filmmaker behind {s}?")),
        Relation("cast member", "Lead actor", "Starring", "stars", ("Who played the lead in the film {s}?", "Which actor starred in {s}?")),
        Relation("screenwriter", "Script", "Screenplay by", "has a script written by", ("Who wrote the screenplay for {s}?", "Who scripted the movie {s}?")),
        Relation("composer", "Score", "Music by", "has a soundtrack composed by", ("Who composed the music for {s}?", "Who scored the film {s}?")),
        Relation("production company", "Studio", "Production company", "was financed by the studio", ("Which studio made {s}?", "What company produced the movie {s}?")),
    ),
    "music": (
        Relation("performer", "Artist", "Performed by", "was recorded by", ("Who sang {s}?", "Which artist performs the song {s}?")),
        Relation("record label", "Label", "Label", "came out on the label", ("Which label released {s}?", "On what record label did {s} appear?")),
        Relation("producer", "Producer", "Produced by", "was produced in the studio by", ("Who produced the track {s}?", "Which producer worked on {s}?")),
        Relation("lyricist", "Lyrics", "Lyrics by", "has words written by", ("Who wrote the lyrics of {s}?", "Who penned the words to {s}?")),
        Relation("arranger", "Arrangement", "Arranged by", "was orchestrated by", ("Who arranged the song {s}?", "Who did the arrangement for {s}?")),
    ),
    "tvseries": (
        Relation("creator", "Created", "Created by", "was devised by", ("Who created the show {s}?", "Who came up with the series {s}?")),
        Relation("voice actor", "Voice", "Voices", "features the voice of", ("Who voiced the main character in {s}?", "Which voice actor appears in {s}?")),
        Relation("original broadcaster", "Network", "Original network", "first aired on the channel", ("Which network aired {s}?", "What channel broadcast the series {s}?")),
        Relation("showrunner", "Showrunner", "Showrunner", "was run day to day by", ("Who was the showrunner of {s}?", "Who ran the television series {s}?")),
        Relation("narrator", "Narration", "Narrated by", "is narrated by", ("Who narrates the show {s}?", "Who is the narrator of {s}?")),
    ),
    "football": (
        Relation("head coach", "Manager", "Head coach", "is managed by", ("Who coaches {s}?", "Who is the manager of the club {s}?")),
        Relation("home venue", "Ground", "Stadium", "plays its home matches at", ("Where does {s} play home games?", "What is the stadium of {s}?")),
        Relation("captain", "Captain", "Captain", "is led on the pitch by", ("Who captains {s}?", "Who is the team captain of {s}?")),
        Relation("owned by", "Owner", "Owner", "is owned by the investor", ("Who owns the club {s}?", "Which investor owns {s}?")),
        Relation("league", "Division", "League", "competes in the", ("Which league does {s} play in?", "In what division is {s}?")),
    ),
}

FILLER = (
    "early career release critics reception later years history background plot overview production "
    "development notable award season version edition original popular success public response legacy "
    "influence style period during following after before time first second third final new old great "
    "small large major minor local national international recorded described known called named "
    "considered regarded became remained moved returned began ended continued featured included received "
    "several many various other some most few also however although while since until again often "
    "widely generally mainly largely strongly later soon long short high low high quality critical "
    "commercial annual regional modern classic live studio single album volume series episode chapter"
).split()

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr", "tr", "st", "th", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "io", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "th", "m", "x", "nd"]


def _pseudo_words(rng: np.random.Generator, n: int, syllables: tuple[int, int] = (2, 3)) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        w += _CODAS[rng.integers(len(_CODAS))]
        if w not in seen and len(w) >= 4:
            seen.add(w)
            out.append(w.capitalize())
    return out


@dataclass
class SynthConfig:
    seed: int = 0
    n_subjects: int = 250
    n_names: int = 10
    n_given: int = 60
    n_family: int = 60
    questions_per_subject: int = 2
    n_train: int = 400
    n_test: int = 100
    type_probs: tuple[float, float, float, float] = (0.55, 0.6, 0.5, 0.5)  # text, kg, table, info
    distractor_texts: tuple[int, int] = (6, 10)
    filler_words: tuple[int, int] = (4, 10)


@dataclass
class SynthData:
    corpus: list[EvidenceRecord]
    questions: list[QuestionRecord]

    @property
    def train(self) -> list[QuestionRecord]:
        return [q for q in self.questions if q.split == "train"]

    @property
    def test(self) -> list[QuestionRecord]:
        return [q for q in self.questions if q.split == "test"]

    def write(self, outdir: str | Path) -> tuple[Path, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        cpath, qpath = outdir / "corpus.jsonl", outdir / "questions.jsonl"
        write_evidence(cpath, self.corpus)
        write_questions(qpath, self.questions)
        return cpath, qpath


def generate(config: Optional[SynthConfig] = None) -> SynthData:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    names = _pseudo_words(rng, cfg.n_names, (2, 3))
    given = _pseudo_words(rng, cfg.n_given + cfg.n_names, (1, 2))
    given = [g for g in given if g not in names][: cfg.n_given]
    family = [f for f in _pseudo_words(rng, cfg.n_family + cfg.n_names + cfg.n_given, (2, 3)) if f not in names and f not in given][: cfg.n_family]

    domains = list(RELATIONS)
    qcounter = 1
    people_used: set[tuple[int, int]] = set()
    next_entity = 1000

    def new_entity(label: str) -> EntityRef:
        nonlocal next_entity
        next_entity += 1
        return EntityRef(f"Q{next_entity}", label)

    def new_person() -> EntityRef:
        while True:
            pair = (int(rng.integers(len(given))), int(rng.integers(len(family))))
            if pair not in people_used:
                people_used.add(pair)
                return new_entity(f"{given[pair[0]]} {family[pair[1]]}")

    def filler(lo_hi=cfg.filler_words) -> str:
        n = int(rng.integers(lo_hi[0], lo_hi[1] + 1))
        return " ".join(FILLER[i] for i in rng.integers(len(FILLER), size=n))

    raw: list[tuple[KnowledgeType, str, tuple[EntityRef, ...], str, Optional[EntityRef]]] = []
    pending_questions: list[tuple[str, str, EntityRef]] = []
    for si in range(cfg.n_subjects):
        domain = domains[si % len(domains)]
        name = names[int(rng.integers(len(names)))]
        subj = new_entity(name)
        facts = []
        for rel in RELATIONS[domain]:
            obj = new_person()
            facts.append((rel, obj))
            year = str(int(rng.integers(1950, 2024)))
            chosen = [t for t, p in zip((KnowledgeType.TEXT, KnowledgeType.KG, KnowledgeType.TABLE, KnowledgeType.INFO), cfg.type_probs) if rng.random() < p]
            if not chosen:
                chosen = [(KnowledgeType.TEXT, KnowledgeType.KG, KnowledgeType.TABLE, KnowledgeType.INFO)[int(rng.integers(4))]]
            for t in chosen:
                ents = (subj, obj)
                if t is KnowledgeType.KG:
                    raw.append((t, linearize_kg_fact("", name, rel.kg, obj.label), ents, "", None))
                elif t is KnowledgeType.TABLE:
                    cells = [("Year", year), (rel.table, obj.label), ("Notes", filler((0, 4)))]
                    raw.append((t, linearize_table_row(name, cells), ents, name, subj))
                elif t is KnowledgeType.INFO:
                    raw.append((t, linearize_infobox(name, name, [(rel.info, obj.label)]), ents, name, subj))
                else:
                    body = f"{name} {rel.text} {obj.label} {filler()}."
                    raw.append((t, f"{name}, {body}", ents, name, subj))
        for _ in range(int(rng.integers(cfg.distractor_texts[0], cfg.distractor_texts[1] + 1))):
            raw.append((KnowledgeType.TEXT, f"{name}, {name} {filler((6, 14))}.", (subj,), name, subj))
        picks = rng.choice(len(facts), size=min(cfg.questions_per_subject, len(facts)), replace=False)
        for fi in sorted(int(p) for p in picks):
            rel, obj = facts[fi]
            template = rel.questions[int(rng.integers(len(rel.questions)))]
            pending_questions.append((template.format(s=name), domain, obj))

    order = rng.permutation(len(raw))
    corpus = []
    for eid, r in enumerate(order, 1):
        t, text, ents, title, rf = raw[r]
        corpus.append(EvidenceRecord(eid, t, text, ents, title, rf))

    qorder = rng.permutation(len(pending_questions))
    questions = []
    for rank, qi in enumerate(qorder):
        text, domain, obj = pending_questions[qi]
        if rank < cfg.n_train:
            split = "train"
        elif rank < cfg.n_train + cfg.n_test:
            split = "test"
        else:
            split = "dev"
        questions.append(QuestionRecord(qcounter, text, domain, obj.label, (obj,), split))
        qcounter += 1
    return SynthData(corpus, questions)
