"""Three-stage training: masked reconstruction, text-anchored alignment, instruction-aware fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import encoder as enc_mod
from .corpus import TYPE_ORDER, EvidenceRecord, KnowledgeType, QuestionRecord
from .encoder import EncoderParams
from .instructions import (
    InstructionGroup,
    InstructionSet,
    RetrievalQuery,
    build_retrieval_query,
    default_instructions,
)
from .textproc import MASK_ID, MAX_SEQUENCE_LENGTH, BM25Index, Vocabulary, tokenize

logger = logging.getLogger(__name__)


class SkipSample(ValueError):
    """Raised for inputs too short to build a masked sample."""


# -- configuration ---------------------------------------------------------


@dataclass
class StageConfig:
    lr: float
    epochs: int
    batch_size: int


@dataclass
class TrainConfig:
    temperature: float = 0.02
    seed: int = 0
    clip_norm: float = 1.0
    encoder_mask_ratio: float = 0.15
    decoder_mask_ratio: float = 0.50
    stage1: StageConfig = field(default_factory=lambda: StageConfig(lr=0.01, epochs=2, batch_size=32))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(lr=0.01, epochs=2, batch_size=64))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(lr=0.003, epochs=3, batch_size=32))
    group_capacity: int = 15
    unfollow_prob: float = 0.005
    pool_size: int = 50
    miner: str = "dense"
    optimizer: str = "adamw"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.unfollow_prob <= 1.0:
            raise ValueError("unfollow_prob must lie in [0, 1]")
        for name in ("stage1", "stage2", "stage3"):
            val = getattr(self, name)
            if isinstance(val, Mapping):
                setattr(self, name, StageConfig(**val))

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    mean_loss: float
    samples: int
    wall_ms: int


@dataclass
class StageReport:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                fh.write(json.dumps(asdict(e)) + "\n")


def _optimizer(config: TrainConfig, stage: StageConfig, arrays: list[np.ndarray]) -> enc_mod.Optimizer:
    return enc_mod.Optimizer(arrays, config.optimizer, stage.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _as_f64(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


# -- stage 1: masked reconstruction ---------------------------------------


@dataclass
class DecoderParams:
    matrix: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, vocab_size: int, dim: int, seed: int = 0, scale: float = 0.02) -> "DecoderParams":
        rng = np.random.default_rng([seed, 1])
        return cls(rng.uniform(-scale, scale, size=(vocab_size, dim)), np.zeros(vocab_size))


@dataclass(frozen=True)
class MaskedSample:
    clean: tuple[int, ...]
    masked: tuple[int, ...]
    mask_positions: tuple[int, ...]
    target_positions: tuple[int, ...]

    @property
    def targets(self) -> list[int]:
        return [self.clean[p] for p in self.target_positions]


def make_masked_sample(tokens: Sequence[int], rng: np.random.Generator, encoder_ratio: float = 0.15, decoder_ratio: float = 0.50) -> MaskedSample:
    n = len(tokens)
    if n < 2:
        raise SkipSample("need at least two tokens")
    n_mask = max(1, _round_half_up(encoder_ratio * n))
    n_target = max(1, _round_half_up(decoder_ratio * n))
    mask_pos = np.sort(rng.choice(n, size=n_mask, replace=False))
    target_pos = np.sort(rng.choice(n, size=n_target, replace=False))
    masked = list(tokens)
    for p in mask_pos:
        masked[p] = MASK_ID
    return MaskedSample(tuple(tokens), tuple(masked), tuple(int(p) for p in mask_pos), tuple(int(p) for p in target_pos))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def stage1_batch_loss(table: np.ndarray, dec: DecoderParams, samples: Sequence[MaskedSample]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over samples of the summed target-token cross-entropy, with gradients for E, D and bias."""
    table = _as_f64(table)
    D = _as_f64(dec.matrix)
    V = table.shape[0]
    fw = enc_mod.forward(table, [s.masked for s in samples])
    H = fw.pooled
    logits = H @ D.T + dec.bias
    logp = _log_softmax(logits)
    rows, cols = [], []
    for i, s in enumerate(samples):
        for t in s.targets:
            rows.append(i)
            cols.append(t)
    counts = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(samples), V)).toarray()
    n_targets = counts.sum(axis=1)
    B = len(samples)
    loss = float(-(counts * logp).sum() / B)
    dlogits = (n_targets[:, None] * np.exp(logp) - counts) / B
    grads = {
        "D": dlogits.T @ H,
        "bias": dlogits.sum(axis=0),
        "E": enc_mod.backward_pooled(fw, dlogits @ D),
    }
    return loss, grads


def stage1_loss(table: np.ndarray, dec: DecoderParams, sample: MaskedSample) -> tuple[float, dict[str, np.ndarray]]:
    return stage1_batch_loss(table, dec, [sample])


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def pair_token_ids(pairs: Sequence[tuple[str, str]], vocab: Vocabulary) -> list[list[int]]:
    seqs = []
    for data, text in pairs:
        ids = [vocab.id(t) for t in tokenize(data)] + [vocab.id(t) for t in tokenize(text)]
        seqs.append(ids[:MAX_SEQUENCE_LENGTH])
    return seqs


def stage1_eval_loss(params: EncoderParams, dec: DecoderParams, samples: Sequence[MaskedSample]) -> float:
    return stage1_batch_loss(params.table, dec, samples)[0]


def stage1_pretrain(
    params: EncoderParams,
    pairs: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    config: TrainConfig,
    dec: Optional[DecoderParams] = None,
    rng: Optional[np.random.Generator] = None,
) -> StageReport:
    """Masked reconstruction over concatenated data-text inputs; mutates params.

    The decoder is local to this stage and dropped when it returns.
    """
    if not pairs:
        raise ValueError("stage 1 needs at least one data-text pair")
    rng = rng if rng is not None else np.random.default_rng([config.seed, 11])
    dec = dec if dec is not None else DecoderParams.init(params.vocab_size, params.dim, config.seed)
    seqs = [s for s in pair_token_ids(pairs, vocab) if len(s) >= 2]
    cfg = config.stage1
    opt = _optimizer(config, cfg, [params.table, dec.matrix, dec.bias])
    report = StageReport("stage1")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        samples = [make_masked_sample(s, rng, config.encoder_mask_ratio, config.decoder_mask_ratio) for s in seqs]
        total, count = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            batch = [samples[i] for i in idx]
            loss, g = stage1_batch_loss(params.table, dec, batch)
            opt.step([g["E"], g["D"], g["bias"]])
            total += loss * len(batch)
            count += len(batch)
        rec = EpochRecord("stage1", epoch, total / max(count, 1), count, int(1000 * (time.perf_counter() - t0)))
        logger.info("stage1 epoch %d loss %.4f", epoch, rec.mean_loss)
        report.epochs.append(rec)
    return report


# -- stage 2: text-anchored alignment -------------------------------------


def stage2_loss(table: np.ndarray, anchors: Sequence, positives: Sequence, tau: float) -> tuple[float, np.ndarray]:
    """In-batch contrastive loss aligning each anchor with its own positive."""
    B = len(anchors)
    if B < 2 or len(positives) != B:
        raise ValueError("stage 2 batches need B >= 2 matched pairs")
    fw = enc_mod.forward(table, list(anchors) + list(positives))
    A, P = fw.unit[:B], fw.unit[B:]
    S = A @ P.T / tau
    logp = _log_softmax(S)
    loss = float(-np.trace(logp) / B)
    dS = (np.exp(logp) - np.eye(B)) / B
    grad_unit = np.vstack([dS @ P / tau, dS.T @ A / tau])
    return loss, enc_mod.backward_normalized(fw, grad_unit)


def stage2_align(params: EncoderParams, pairs: Sequence[tuple[str, str]], vocab: Vocabulary, config: TrainConfig, rng: Optional[np.random.Generator] = None) -> StageReport:
    if len(pairs) < 2:
        raise ValueError("stage 2 needs at least two data-text pairs")
    rng = rng if rng is not None else np.random.default_rng([config.seed, 22])
    data_seqs = [vocab.encode(d).ids for d, _ in pairs]
    text_seqs = [vocab.encode(t).ids for _, t in pairs]
    cfg = config.stage2
    opt = _optimizer(config, cfg, [params.table])
    report = StageReport("stage2")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            loss, g = stage2_loss(params.table, [data_seqs[i] for i in idx], [text_seqs[i] for i in idx], config.temperature)
            opt.step([g])
            total += loss * len(idx)
            count += len(idx)
        rec = EpochRecord("stage2", epoch, total / max(count, 1), count, int(1000 * (time.perf_counter() - t0)))
        logger.info("stage2 epoch %d loss %.4f", epoch, rec.mean_loss)
        report.epochs.append(rec)
    return report


# -- stage 3: negatives ----------------------------------------------------


Scorer = Callable[[Sequence[str]], np.ndarray]


class DenseScorer:
    """Scores every corpus row against a question with the current encoder."""

    def __init__(self, params: EncoderParams, vocab: Vocabulary, corpus: Sequence[EvidenceRecord]):
        self.params = params
        self.vocab = vocab
        self.matrix = enc_mod.encode_matrix(params, [vocab.encode(e.text).ids for e in corpus])

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        q = enc_mod.encode_matrix(self.params, [self.vocab.encode(t).ids for t in texts])
        return q @ self.matrix.T


class BM25Scorer:
    def __init__(self, corpus: Sequence[EvidenceRecord]):
        self.index = BM25Index.from_texts([e.text for e in corpus], [e.evidence_id for e in corpus])

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self.index.score_all(tokenize(t)) for t in texts])


def mine_hard_negatives(
    questions: Sequence[QuestionRecord],
    corpus: Sequence[EvidenceRecord],
    scorer: Scorer,
    relevant: Mapping[int, set[int]],
    pool_size: int = 50,
) -> dict[int, dict[KnowledgeType, list[EvidenceRecord]]]:
    """Per question, the top non-relevant evidence of each type, best first, ties by lower id."""
    ids = np.array([e.evidence_id for e in corpus], dtype=np.int64)
    types = np.array([TYPE_ORDER.index(e.etype) for e in corpus])
    scores = scorer([q.text for q in questions]) if questions else np.zeros((0, len(corpus)))
    out: dict[int, dict[KnowledgeType, list[EvidenceRecord]]] = {}
    for qi, q in enumerate(questions):
        rel = relevant.get(q.question_id, set())
        keep = ~np.isin(ids, np.fromiter(rel, np.int64, len(rel))) if rel else np.ones(len(ids), bool)
        pools = {}
        for ti, t in enumerate(TYPE_ORDER):
            rows = np.nonzero(keep & (types == ti))[0]
            order = rows[np.lexsort((ids[rows], -scores[qi, rows]))][:pool_size]
            pools[t] = [corpus[r] for r in order]
        out[q.question_id] = pools
    return out


@dataclass
class NegativeGroup:
    preferred: Optional[KnowledgeType]
    members: list[EvidenceRecord]
    counts: dict[KnowledgeType, int]
    capacity: int
    unfollowing: Optional[EvidenceRecord] = None
    short: bool = False


def allocate_counts(available: Mapping[KnowledgeType, int], preferred: Optional[KnowledgeType], capacity: int) -> dict[KnowledgeType, int]:
    """Round-robin over the fixed type order, skipping the preferred type and exhausted pools."""
    order = [t for t in TYPE_ORDER if t is not preferred]
    counts = {t: 0 for t in TYPE_ORDER}
    remaining = capacity
    while remaining > 0:
        progressed = False
        for t in order:
            if remaining == 0:
                break
            if counts[t] < available.get(t, 0):
                counts[t] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return counts


def build_negative_group(
    pools: Mapping[KnowledgeType, Sequence[EvidenceRecord]],
    preferred: Optional[KnowledgeType] = None,
    capacity: int = 15,
    rng: Optional[np.random.Generator] = None,
    unfollow_prob: float = 0.0,
    unfollow_candidates: Sequence[EvidenceRecord] = (),
) -> NegativeGroup:
    """Typed hard-negative group; balanced when preferred is None, else k_preferred = 0.

    With an rng, members of each type are drawn uniformly from that type's
    pool; without one, the best-ranked members are taken.
    """
    counts = allocate_counts({t: len(p) for t, p in pools.items()}, preferred, capacity)
    members: list[EvidenceRecord] = []
    for t in TYPE_ORDER:
        k = counts[t]
        if not k:
            continue
        pool = list(pools[t])
        if rng is not None:
            picks = np.sort(rng.choice(len(pool), size=k, replace=False))
            members.extend(pool[i] for i in picks)
        else:
            members.extend(pool[:k])
    unfollowing = None
    if preferred is not None and rng is not None and unfollow_prob > 0:
        fire = rng.random() < unfollow_prob
        cands = [e for e in unfollow_candidates if e.etype is not preferred]
        if fire and cands:
            unfollowing = cands[int(rng.integers(len(cands)))]
            if len(members) >= capacity:
                dropped = members.pop()
                counts[dropped.etype] -= 1
            members.append(unfollowing)
            counts[unfollowing.etype] += 1
    return NegativeGroup(preferred, members, counts, capacity, unfollowing, len(members) < capacity)


@dataclass
class TrainingSample:
    query: RetrievalQuery
    positive: EvidenceRecord
    negatives: NegativeGroup
    scenario: int

    def __post_init__(self):
        group = self.query.instruction.group
        if self.scenario == 1:
            if group is not InstructionGroup.ALL or self.negatives.preferred is not None:
                raise ValueError("scenario 1 samples use I_All with a balanced group")
        elif self.scenario == 2:
            if not group.target_type is self.positive.etype is self.negatives.preferred:
                raise ValueError("scenario 2 instruction, positive and group must share one type")
        else:
            raise ValueError(f"unknown scenario {self.scenario}")


def make_training_samples(
    questions: Sequence[QuestionRecord],
    positives: Mapping[int, Sequence[EvidenceRecord]],
    pools: Mapping[int, Mapping[KnowledgeType, Sequence[EvidenceRecord]]],
    rng: np.random.Generator,
    capacity: int = 15,
    unfollow_prob: float = 0.005,
    instructions: Optional[InstructionSet] = None,
) -> list[TrainingSample]:
    """Two samples per (question, positive): balanced under I_All and preferred under I_type."""
    instructions = instructions or default_instructions()
    samples = []
    for q in questions:
        pos_list = positives.get(q.question_id, ())
        for pos in pos_list:
            inst = instructions.sample(InstructionGroup.ALL, q.domain, rng)
            group = build_negative_group(pools[q.question_id], None, capacity, rng)
            samples.append(TrainingSample(build_retrieval_query(inst, q), pos, group, 1))
            lam = pos.etype
            inst = instructions.sample(InstructionGroup.for_type(lam), q.domain, rng)
            unfollow = [e for e in pos_list if e.etype is not lam]
            group = build_negative_group(pools[q.question_id], lam, capacity, rng, unfollow_prob, unfollow)
            samples.append(TrainingSample(build_retrieval_query(inst, q), pos, group, 2))
    return samples


# -- stage 3: loss ---------------------------------------------------------


@dataclass
class LossBreakdown:
    total: float
    align: float
    uniformity: float
    repel: float
    repel_by_type: dict[KnowledgeType, float] = field(default_factory=dict)
    in_batch: float = 0.0


def stage3_core(
    table: np.ndarray,
    query_seqs: Sequence,
    pool_seqs: Sequence,
    pos_index: Sequence[int],
    pool_negative_mask: np.ndarray,
    group_seqs: Sequence[Sequence],
    group_types: Sequence[Sequence[KnowledgeType]],
    tau: float,
) -> tuple[list[LossBreakdown], np.ndarray]:
    """Batched instruction-aware contrastive loss.

    Sample i scores its query against its positive (pool entry pos_index[i]),
    its own hard-negative group, and every pool entry flagged in row i of
    pool_negative_mask (in-batch negatives). Returns per-sample breakdowns and
    the gradient of their mean w.r.t. the embedding table.
    """
    B, K = len(query_seqs), len(pool_seqs)
    G = max((len(g) for g in group_seqs), default=0)
    pool_negative_mask = np.asarray(pool_negative_mask, dtype=bool).reshape(B, K)
    flat_group = [s for g in group_seqs for s in g]
    fw = enc_mod.forward(table, list(query_seqs) + list(pool_seqs) + flat_group)
    Q = fw.unit[:B]
    P = fw.unit[B : B + K]
    flat = fw.unit[B + K :]
    gmask = np.zeros((B, G), dtype=bool)
    gidx = np.zeros((B, G), dtype=np.int64)
    offset = 0
    for i, g in enumerate(group_seqs):
        gmask[i, : len(g)] = True
        gidx[i, : len(g)] = np.arange(offset, offset + len(g))
        offset += len(g)
    Gv = flat[gidx] if len(flat) else np.zeros((B, G, Q.shape[1]))

    pos_index = np.asarray(pos_index)
    s_pool = Q @ P.T / tau  # B x K
    s_pos = s_pool[np.arange(B), pos_index]
    s_group = np.einsum("bd,bgd->bg", Q, Gv) / tau if G else np.zeros((B, 0))

    pool_mask = pool_negative_mask.copy()
    pool_mask[np.arange(B), pos_index] = False
    if not (gmask.any(axis=1) | pool_mask.any(axis=1)).all():
        raise ValueError("every sample needs at least one negative")

    # stable log-sum-exp over {positive} + group + in-batch
    allmax = np.maximum(s_pos, np.maximum(np.where(gmask, s_group, -np.inf).max(axis=1, initial=-np.inf), np.where(pool_mask, s_pool, -np.inf).max(axis=1, initial=-np.inf)))
    e_pos = np.exp(s_pos - allmax)
    e_group = np.where(gmask, np.exp(s_group - allmax[:, None]), 0.0)
    e_pool = np.where(pool_mask, np.exp(s_pool - allmax[:, None]), 0.0)
    z = e_pos + e_group.sum(axis=1) + e_pool.sum(axis=1)
    lse = allmax + np.log(z)
    totals = lse - s_pos

    breakdowns = []
    for i in range(B):
        raw_group = np.exp(s_group[i, gmask[i]])
        by_type: dict[KnowledgeType, float] = {t: 0.0 for t in TYPE_ORDER}
        for t, val in zip(group_types[i], raw_group):
            by_type[t] += float(val)
        repel = float(raw_group.sum())
        in_batch = float(np.exp(s_pool[i, pool_mask[i]]).sum())
        align = float(s_pos[i])
        uniformity = math.log(math.exp(align) + repel + in_batch)
        breakdowns.append(LossBreakdown(float(totals[i]), align, uniformity, repel, by_type, in_batch))

    # d(mean total)/d logits = (softmax - onehot) / B
    w_pos = (e_pos / z - 1.0) / B
    w_group = e_group / z[:, None] / B
    w_pool = e_pool / z[:, None] / B
    w_pool[np.arange(B), pos_index] += w_pos
    dQ = (w_pool @ P + np.einsum("bg,bgd->bd", w_group, Gv)) / tau
    dP = w_pool.T @ Q / tau
    dflat = np.zeros_like(flat)
    if G:
        np.add.at(dflat, gidx[gmask], (w_group[:, :, None] * Q[:, None, :])[gmask] / tau)
    grad_unit = np.vstack([dQ, dP, dflat])
    return breakdowns, enc_mod.backward_normalized(fw, grad_unit)


def stage3_loss(
    table: np.ndarray,
    query_seq,
    positive_seq,
    group_seqs: Sequence,
    group_types: Sequence[KnowledgeType],
    in_batch_seqs: Sequence = (),
    tau: float = 0.02,
) -> tuple[LossBreakdown, np.ndarray]:
    """Single-sample form: positive, typed hard negatives, optional extra in-batch negatives."""
    pool = [positive_seq] + list(in_batch_seqs)
    mask = np.ones((1, len(pool)), dtype=bool)
    mask[0, 0] = False
    if not group_seqs and not in_batch_seqs:
        raise ValueError("stage 3 needs at least one negative")
    bd, grad = stage3_core(table, [query_seq], pool, [0], mask, [list(group_seqs)], [list(group_types)], tau)
    return bd[0], grad


def stage3_finetune(
    params: EncoderParams,
    questions: Sequence[QuestionRecord],
    corpus: Sequence[EvidenceRecord],
    relevant: Mapping[int, set[int]],
    vocab: Vocabulary,
    config: TrainConfig,
    instructions: Optional[InstructionSet] = None,
    rng: Optional[np.random.Generator] = None,
) -> StageReport:
    """Mine typed hard negatives with the current encoder, then fine-tune; mutates params."""
    instructions = instructions or default_instructions()
    rng = rng if rng is not None else np.random.default_rng([config.seed, 33])
    by_id = {e.evidence_id: e for e in corpus}
    questions = [q for q in questions if relevant.get(q.question_id)]
    if not questions:
        raise ValueError("stage 3 needs questions with labelled positives")
    positives = {q.question_id: [by_id[i] for i in sorted(relevant[q.question_id])] for q in questions}

    scorer: Scorer = BM25Scorer(corpus) if config.miner == "bm25" else DenseScorer(params, vocab, corpus)
    pools = mine_hard_negatives(questions, corpus, scorer, relevant, config.pool_size)

    seq_cache: dict[int, tuple[int, ...]] = {}

    def ev_seq(e: EvidenceRecord):
        if e.evidence_id not in seq_cache:
            seq_cache[e.evidence_id] = vocab.encode(e.text).ids
        return seq_cache[e.evidence_id]

    cfg = config.stage3
    opt = _optimizer(config, cfg, [params.table])
    report = StageReport("stage3")
    unfollow_hits = 0
    scen2 = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        samples = make_training_samples(questions, positives, pools, rng, config.group_capacity, config.unfollow_prob, instructions)
        unfollow_hits += sum(s.negatives.unfollowing is not None for s in samples)
        scen2 += sum(s.scenario == 2 for s in samples)
        total, count = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            batch = [samples[i] for i in idx]
            pos_ids = [s.positive.evidence_id for s in batch]
            mask = np.array([[pid not in relevant[s.query.question.question_id] for pid in pos_ids] for s in batch], dtype=bool)
            np.fill_diagonal(mask, False)
            bds, g = stage3_core(
                params.table,
                [vocab.encode(s.query.text).ids for s in batch],
                [ev_seq(s.positive) for s in batch],
                np.arange(len(batch)),
                mask,
                [[ev_seq(m) for m in s.negatives.members] for s in batch],
                [[m.etype for m in s.negatives.members] for s in batch],
                config.temperature,
            )
            opt.step([g])
            total += sum(b.total for b in bds)
            count += len(batch)
        rec = EpochRecord("stage3", epoch, total / max(count, 1), count, int(1000 * (time.perf_counter() - t0)))
        logger.info("stage3 epoch %d loss %.4f", epoch, rec.mean_loss)
        report.epochs.append(rec)
    report.extra = {"unfollowing_members": unfollow_hits, "scenario2_samples": scen2}
    return report
