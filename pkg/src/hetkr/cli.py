"""Command-line entry point: one subcommand per pipeline phase over a shared workdir."""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import synth
from .corpus import (
    ExternalVerbalizer,
    InvalidInputError,
    QuestionRecord,
    corpus_stats,
    make_pairs,
    read_evidence,
    read_pairs,
    read_questions,
    write_evidence,
    write_jsonl,
    write_pairs,
    write_questions,
)
from .encoder import EncoderParams, encode
from .evaluation import evaluate_bm25, evaluate_scenarios, write_runs
from .index import VectorIndex, build_index, top_k_search
from .instructions import InstructionGroup, InstructionSet, InvalidDomainError, default_instructions, query_text
from .pipeline import label_all, vocab_texts
from .textproc import BM25Index, Vocabulary, build_vocab
from .training import TrainConfig, stage1_pretrain, stage2_align, stage3_finetune

logger = logging.getLogger("hetkr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# fixed artifact names inside the workdir
EVIDENCE = "evidence.jsonl"
QUESTIONS = "questions.jsonl"
QRELS = "qrels.jsonl"
PAIRS = "pairs.jsonl"
VOCAB = "vocab.tsv"
ENCODER_STAGE1 = "encoder.stage1.bin"
ENCODER_STAGE2 = "encoder.stage2.bin"
ENCODER = "encoder.bin"
INDEX = "index.hgix"
RUN = "run.jsonl"
METRICS = "metrics.json"
METRICS_TEXT = "metrics.txt"
METRICS_BM25 = "metrics_bm25.json"
TRAIN_CONFIG = "train_config.json"
LOCK = ".hetkr.lock"

PIPELINE_ORDER = ("ingest", "pairs", "pretrain", "align", "finetune", "index", "eval")


class ValidationError(ValueError):
    """Bad configuration, flags or inputs; maps to exit code 1."""


class UsageError(ValidationError):
    pass


@dataclass
class PipelineConfig:
    workdir: Path = Path("work")
    corpus: Optional[Path] = None
    questions: Optional[Path] = None
    paraphrases: Optional[Path] = None
    seed: int = 0
    min_frequency: int = 1
    max_size: int = 50_000
    dim: int = 64
    init_scale: float = 0.02
    text_fallback: bool = True
    bm25: bool = True
    verbalizer_url: str = ""
    verbalizer_timeout: float = 10.0
    verbalizer_retries: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)

    @property
    def corpus_path(self) -> Path:
        return self.corpus or self.workdir / "input" / "corpus.jsonl"

    @property
    def questions_path(self) -> Path:
        return self.questions or self.workdir / "input" / "questions.jsonl"

    def artifact(self, name: str) -> Path:
        return self.workdir / name

    def instructions(self) -> InstructionSet:
        if self.paraphrases is None:
            return default_instructions()
        return InstructionSet.load(self.paraphrases)

    def verbalizer(self) -> Optional[ExternalVerbalizer]:
        if not self.verbalizer_url:
            return None
        return ExternalVerbalizer(self.verbalizer_url, timeout=self.verbalizer_timeout, retries=self.verbalizer_retries)

    @classmethod
    def from_toml(cls, path: Path) -> "PipelineConfig":
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as err:
            raise ValidationError(f"{path}: {err}") from None
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "PipelineConfig":
        raw = dict(raw)
        cfg = cls()

        def rel(value) -> Path:
            p = Path(value)
            return p if p.is_absolute() else base / p

        try:
            paths = raw.pop("paths", {})
            for key in ("workdir", "corpus", "questions", "paraphrases"):
                value = paths.pop(key, "")
                if value:
                    setattr(cfg, key, rel(value))
            _reject_unknown("paths", paths)
            cfg.seed = int(raw.pop("seed", cfg.seed))
            vocab = raw.pop("vocab", {})
            cfg.min_frequency = int(vocab.pop("min_frequency", cfg.min_frequency))
            cfg.max_size = int(vocab.pop("max_size", cfg.max_size))
            _reject_unknown("vocab", vocab)
            enc = raw.pop("encoder", {})
            cfg.dim = int(enc.pop("dim", cfg.dim))
            cfg.init_scale = float(enc.pop("init_scale", cfg.init_scale))
            _reject_unknown("encoder", enc)
            ev = raw.pop("eval", {})
            cfg.bm25 = bool(ev.pop("bm25", cfg.bm25))
            cfg.text_fallback = bool(ev.pop("text_fallback", cfg.text_fallback))
            _reject_unknown("eval", ev)
            verb = raw.pop("verbalizer", {})
            cfg.verbalizer_url = str(verb.pop("url", ""))
            cfg.verbalizer_timeout = float(verb.pop("timeout", cfg.verbalizer_timeout))
            cfg.verbalizer_retries = int(verb.pop("retries", cfg.verbalizer_retries))
            _reject_unknown("verbalizer", verb)
            cfg.train = TrainConfig.from_dict(raw.pop("train", {}))
            syn = raw.pop("synth", {})
            known = {f.name for f in fields(synth.SynthConfig)}
            _reject_unknown("synth", {k: v for k, v in syn.items() if k not in known})
            cfg.synth = synth.SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in syn.items()})
            _reject_unknown("top level", raw)
        except (TypeError, ValueError) as err:
            if isinstance(err, ValidationError):
                raise
            raise ValidationError(f"invalid configuration: {err}") from None
        if cfg.dim < 1:
            raise ValidationError("encoder.dim must be positive")
        return cfg


def _reject_unknown(section: str, leftover: dict) -> None:
    if leftover:
        raise ValidationError(f"unknown keys in {section}: {', '.join(sorted(leftover))}")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ValidationError(f"missing {what}: {path}")
    return path


@contextmanager
def workdir_lock(workdir: Path):
    """Exclusive advisory lock so two invocations never share a workdir."""
    workdir.mkdir(parents=True, exist_ok=True)
    with open(workdir / LOCK, "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RuntimeError(f"workdir {workdir} is locked by another process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# -- loaders ----------------------------------------------------------------


def _load_corpus(cfg: PipelineConfig):
    return read_evidence(_require(cfg.artifact(EVIDENCE), "ingested evidence (run ingest first)"))


def _load_questions(cfg: PipelineConfig):
    return read_questions(_require(cfg.artifact(QUESTIONS), "ingested questions (run ingest first)"))


def _load_qrels(cfg: PipelineConfig) -> dict[int, set[int]]:
    path = _require(cfg.artifact(QRELS), "relevance labels (run ingest first)")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[int(obj["question id"])] = set(int(i) for i in obj["relevant"])
    return out


def _load_vocab(cfg: PipelineConfig) -> Vocabulary:
    return Vocabulary.load(_require(cfg.artifact(VOCAB), "vocabulary (run pairs first)"))


def _load_encoder(cfg: PipelineConfig, name: str, producer: str) -> EncoderParams:
    return EncoderParams.load(_require(cfg.artifact(name), f"encoder (run {producer} first)"))


def _split(questions: list[QuestionRecord], name: str) -> list[QuestionRecord]:
    return [q for q in questions if q.split == name] or list(questions)


# -- subcommands -------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, args) -> int:
    cfg.synth.seed = cfg.seed
    data = synth.generate(cfg.synth)
    cfg.corpus_path.parent.mkdir(parents=True, exist_ok=True)
    cfg.questions_path.parent.mkdir(parents=True, exist_ok=True)
    write_evidence(cfg.corpus_path, data.corpus)
    write_questions(cfg.questions_path, data.questions)
    print(f"wrote {len(data.corpus)} evidences to {cfg.corpus_path} and {len(data.questions)} questions to {cfg.questions_path}")
    return EXIT_OK


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    corpus = read_evidence(_require(cfg.corpus_path, "corpus file"))
    questions = read_questions(_require(cfg.questions_path, "questions file"))
    if not corpus:
        raise ValidationError(f"corpus {cfg.corpus_path} is empty")
    qids = [q.question_id for q in questions]
    if len(set(qids)) != len(qids):
        raise ValidationError("duplicate question ids")
    relevant = label_all(corpus, questions, cfg.text_fallback)
    write_evidence(cfg.artifact(EVIDENCE), corpus)
    write_questions(cfg.artifact(QUESTIONS), questions)
    write_jsonl(cfg.artifact(QRELS), ({"question id": q.question_id, "relevant": sorted(relevant[q.question_id])} for q in questions))
    unanswerable = sum(1 for q in questions if not relevant[q.question_id])
    print(f"ingested {len(corpus)} evidences, {len(questions)} questions ({unanswerable} without relevant evidence)")
    return EXIT_OK


def cmd_pairs(cfg: PipelineConfig, args) -> int:
    corpus = _load_corpus(cfg)
    questions = _load_questions(cfg)
    generator = cfg.verbalizer()
    pairs = make_pairs(corpus, generator)
    write_pairs(cfg.artifact(PAIRS), pairs)
    texts = vocab_texts(corpus, [(p.data.text, p.text) for p in pairs], questions, cfg.instructions())
    vocab = build_vocab(texts, cfg.min_frequency, cfg.max_size)
    vocab.save(cfg.artifact(VOCAB))
    note = f", {generator.failures} generator fallbacks" if generator else ""
    print(f"wrote {len(pairs)} data-text pairs and a vocabulary of {len(vocab)} tokens{note}")
    return EXIT_OK


def cmd_pretrain(cfg: PipelineConfig, args) -> int:
    pairs = read_pairs(_require(cfg.artifact(PAIRS), "pairs file"))
    vocab = _load_vocab(cfg)
    params = EncoderParams.init(len(vocab), cfg.dim, cfg.seed, cfg.init_scale)
    report = stage1_pretrain(params, pairs, vocab, cfg.train, rng=np.random.default_rng([cfg.seed, 11]))
    params.save(cfg.artifact(ENCODER_STAGE1))
    report.write_jsonl(cfg.artifact("stage1.jsonl"))
    cfg.artifact(TRAIN_CONFIG).write_text(json.dumps(cfg.train.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"stage 1 losses: {', '.join(f'{x:.4f}' for x in report.losses)}")
    return EXIT_OK


def cmd_align(cfg: PipelineConfig, args) -> int:
    pairs = read_pairs(_require(cfg.artifact(PAIRS), "pairs file"))
    params = _load_encoder(cfg, ENCODER_STAGE1, "pretrain")
    report = stage2_align(params, pairs, _load_vocab(cfg), cfg.train, rng=np.random.default_rng([cfg.seed, 22]))
    params.save(cfg.artifact(ENCODER_STAGE2))
    report.write_jsonl(cfg.artifact("stage2.jsonl"))
    print(f"stage 2 losses: {', '.join(f'{x:.4f}' for x in report.losses)}")
    return EXIT_OK


def cmd_finetune(cfg: PipelineConfig, args) -> int:
    params = _load_encoder(cfg, ENCODER_STAGE2, "align")
    questions = _split(_load_questions(cfg), "train")
    report = stage3_finetune(
        params, questions, _load_corpus(cfg), _load_qrels(cfg), _load_vocab(cfg), cfg.train, cfg.instructions(), rng=np.random.default_rng([cfg.seed, 33])
    )
    params.save(cfg.artifact(ENCODER))
    report.write_jsonl(cfg.artifact("stage3.jsonl"))
    print(f"stage 3 losses: {', '.join(f'{x:.4f}' for x in report.losses)}; unfollowing members {report.extra['unfollowing_members']}")
    return EXIT_OK


def cmd_index(cfg: PipelineConfig, args) -> int:
    params = _load_encoder(cfg, ENCODER, "finetune")
    index = build_index(params, _load_vocab(cfg), _load_corpus(cfg))
    index.save(cfg.artifact(INDEX))
    print(f"indexed {len(index)} evidences (dim {index.dim})")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    params = _load_encoder(cfg, ENCODER, "finetune")
    index = VectorIndex.load(_require(cfg.artifact(INDEX), "index (run index first)"))
    corpus = _load_corpus(cfg)
    relevant = _load_qrels(cfg)
    questions = _split(_load_questions(cfg), "test")
    report, runs = evaluate_scenarios(params, _load_vocab(cfg), index, questions, relevant, cfg.instructions())
    write_runs(cfg.artifact(RUN), runs)
    report.write(cfg.artifact(METRICS))
    table = report.to_table()
    cfg.artifact(METRICS_TEXT).write_text(table + "\n", encoding="utf-8")
    print(table)
    if cfg.bm25:
        bm25 = BM25Index.from_texts([e.text for e in corpus], [e.evidence_id for e in corpus])
        lexical = evaluate_bm25(bm25, {e.evidence_id: e.etype for e in corpus}, questions, relevant)
        lexical.write(cfg.artifact(METRICS_BM25))
        print(f"BM25 Hit@100 {lexical.hit100:.2f}")
    return EXIT_OK


def cmd_search(cfg: PipelineConfig, args) -> int:
    if not args.query:
        raise UsageError("search needs --query")
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    group = args.group
    params = _load_encoder(cfg, ENCODER, "finetune")
    vocab = _load_vocab(cfg)
    index = VectorIndex.load(_require(cfg.artifact(INDEX), "index (run index first)"))
    texts = {e.evidence_id: e.text for e in _load_corpus(cfg)}
    instruction = cfg.instructions().render(group, args.domain or "", 0)
    text = query_text(instruction, args.query)
    hits = top_k_search(index, encode(params, vocab.encode(text).ids), args.k)
    print(f"# {text}")
    for h in hits:
        print(f"{h.rank}\t{h.evidence_id}\t{h.etype.value}\t{h.score:.4f}\t{texts.get(h.evidence_id, '')}")
    return EXIT_OK


def cmd_stats(cfg: PipelineConfig, args) -> int:
    path = cfg.artifact(EVIDENCE) if cfg.artifact(EVIDENCE).is_file() and cfg.corpus is None else cfg.corpus_path
    corpus = read_evidence(_require(path, "corpus file"))
    print(corpus_stats(corpus).to_table())
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig, args) -> int:
    for name in PIPELINE_ORDER:
        logger.info("running %s", name)
        COMMANDS[name](cfg, args)
    return EXIT_OK


COMMANDS: dict[str, Callable[[PipelineConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "pairs": cmd_pairs,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "finetune": cmd_finetune,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "pipeline": cmd_pipeline,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _group(value: str) -> InstructionGroup:
    try:
        return InstructionGroup.parse(value)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetkr", description="Instruction-aware retrieval over heterogeneous evidence.")
    parser.add_argument("command", choices=sorted(COMMANDS), metavar="command", help=f"one of: {', '.join(sorted(COMMANDS))}")
    parser.add_argument("--config", type=Path, help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="overrides the configured seed")
    parser.add_argument("--workdir", type=Path, help="overrides paths.workdir")
    parser.add_argument("--k", type=int, default=10, help="hits to print for search")
    parser.add_argument("--group", type=_group, default=InstructionGroup.ALL, help="instruction group for search")
    parser.add_argument("--domain", default="", help="question domain for search")
    parser.add_argument("--query", help="question text for search")
    parser.add_argument("--threads", type=int, help="cap on BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = PipelineConfig.from_toml(args.config) if args.config else PipelineConfig()
        if args.workdir is not None:
            cfg.workdir = args.workdir
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.train.seed = cfg.seed
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        with workdir_lock(cfg.workdir), threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except (ValidationError, InvalidInputError, InvalidDomainError) as err:
        print(f"hetkr: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        # --help exits cleanly through argparse
        return int(exc.code or 0)
    except Exception as err:  # noqa: BLE001
        print(f"hetkr: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
