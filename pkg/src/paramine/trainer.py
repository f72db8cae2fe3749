"""Projection-head training over frozen base embeddings.

Base sentence vectors are never modified.  A single affine layer with an
optional tanh, followed by L2 normalization, is trained with the AMS loss,
in-batch negatives, dataset hard negatives, and mega-batch mining.  The
optimizer is plain SGD with classical momentum.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import geometry as geo
from .dataset import PairRecord, Sentence, filter_languages
from .errors import DimensionMismatch, DomainError, EmptyInput, FormatError, ZeroVector
from .evaluation import (ThresholdStrategy, align_loss, calibrate_threshold, score_pairs,
                         uniform_loss)
from .loss import LossBatch, LossParams, ams_loss, ams_loss_grad
from .mining import MiningStrategy, aggregate_mega_batch, mine, split_mini_batches

logger = logging.getLogger(__name__)

HEAD_MAGIC = b"HEAD"
ACTIVATIONS = ("identity", "tanh")


@dataclass
class ProjectionHead:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch(f"W {self.W.shape} and b {self.b.shape} do not fit")
        if self.d_out < 2:
            raise DimensionMismatch("d_out must be >= 2")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise DomainError("head parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator,
             activation: str = "identity") -> ProjectionHead:
        bound = 1.0 / math.sqrt(d_in)
        return cls(rng.uniform(-bound, bound, size=(d_out, d_in)), np.zeros(d_out), activation)

    @classmethod
    def identity(cls, dim: int) -> ProjectionHead:
        return cls(np.eye(dim), np.zeros(dim))

    def copy(self) -> ProjectionHead:
        return ProjectionHead(self.W.copy(), self.b.copy(), self.activation)

    def _pre(self, bases: np.ndarray):
        bases = geo.as_matrix(bases)
        if bases.shape[1] != self.d_in:
            raise DimensionMismatch(f"expected base dimension {self.d_in}, got {bases.shape[1]}")
        z = geo.ordered_matmul(bases, self.W) + self.b
        a = np.tanh(z) if self.activation == "tanh" else z
        return bases, z, a

    def encode_batch(self, bases: np.ndarray) -> np.ndarray:
        _, _, a = self._pre(bases)
        return geo.normalize_rows(a)


def encode(head: ProjectionHead, base) -> np.ndarray:
    """``l2_normalize(activation(W @ base + b))``."""
    base = geo.as_vector(base)
    _, _, a = head._pre(base[None, :])
    try:
        return geo.normalize_rows(a)[0]
    except ZeroVector:
        raise ZeroVector("head output vanished before normalization") from None


def head_gradient(head: ProjectionHead, bases: np.ndarray, upstream: np.ndarray):
    """Backpropagate gradients w.r.t. normalized outputs into ``(dW, db)``."""
    bases, z, a = head._pre(bases)
    upstream = geo.as_matrix(upstream)
    if upstream.shape != (bases.shape[0], head.d_out):
        raise DimensionMismatch(
            f"upstream shape {upstream.shape} does not match {(bases.shape[0], head.d_out)}")
    norms = geo.row_norms(a)
    if bases.shape[0] and norms.min() < geo.ZERO_NORM:
        raise ZeroVector("head output vanished before normalization")
    out = a / norms[:, None]
    radial = np.zeros(bases.shape[0])
    for k in range(head.d_out):
        radial += upstream[:, k] * out[:, k]
    d_a = (upstream - radial[:, None] * out) / norms[:, None]
    d_z = d_a * (1.0 - a * a) if head.activation == "tanh" else d_a
    d_w = geo.ordered_matmul(d_z.T, bases.T)
    d_b = np.zeros(head.d_out)
    for row in d_z:
        d_b += row
    return d_w, d_b


def save_head(head: ProjectionHead, path: str | Path) -> None:
    tag = ACTIVATIONS.index(head.activation)
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<IIB", head.d_in, head.d_out, tag))
        fh.write(head.W.astype("<f4").tobytes())
        fh.write(head.b.astype("<f4").tobytes())


def load_head(path: str | Path) -> ProjectionHead:
    raw = Path(path).read_bytes()
    if raw[:4] != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated header")
    d_in, d_out, tag = struct.unpack("<IIB", raw[4:13])
    expected = 13 + 4 * (d_out * d_in + d_out)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if tag >= len(ACTIVATIONS):
        raise FormatError(f"{path}: unknown activation tag {tag}")
    values = np.frombuffer(raw[13:], dtype="<f4").astype(np.float64)
    W = values[:d_out * d_in].reshape(d_out, d_in)
    b = values[d_out * d_in:]
    try:
        return ProjectionHead(W, b, ACTIVATIONS[tag])
    except (DimensionMismatch, DomainError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    mini_batch_size: int = 8
    mega_batch_M: int = 20
    loss: LossParams = field(default_factory=LossParams)
    mining: MiningStrategy | None = field(default_factory=MiningStrategy)
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    language_include: frozenset[str] | None = None
    d_out: int | None = None
    activation: str = "identity"
    exclude_known_positives: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mini_batch_size < 2:
            raise ValueError("mini_batch_size must be >= 2")
        if self.mega_batch_M < 1:
            raise ValueError("mega_batch_M must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.language_include is not None:
            object.__setattr__(self, "language_include", frozenset(self.language_include))
            if not self.language_include:
                raise ValueError("language_include must not be empty")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    dev_acc: float
    align: float
    uniform: float
    seconds: float = 0.0


@dataclass
class TrainState:
    head: ProjectionHead
    velocity_W: np.ndarray
    velocity_b: np.ndarray
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def start(cls, head: ProjectionHead, rng: np.random.Generator) -> TrainState:
        return cls(head, np.zeros_like(head.W), np.zeros_like(head.b), rng)


@dataclass
class TrainData:
    """Training pairs plus lookups derived once per fit."""

    members: list[PairRecord]
    base: Mapping[str, np.ndarray]
    dataset_hards: dict[str, list[str]]
    paraphrase_class: dict[str, frozenset[str]]
    dev: list[PairRecord]
    corpus: Mapping[str, Sentence]

    @classmethod
    def build(cls, corpus, records, base, config: TrainConfig) -> TrainData:
        train = [r for r in records if r.split == "train"]
        if config.language_include is not None:
            train, _ = filter_languages(train, corpus, config.language_include)
        members = [r for r in train if r.label == 1]
        if not members:
            raise EmptyInput("no positive training pairs")
        dev = [r for r in records if r.split == "dev"]
        if not dev:
            raise EmptyInput("dev split is empty")

        hards: dict[str, list[str]] = {}
        for r in train:
            if r.label == 0:
                hards.setdefault(r.anchor_id, []).append(r.candidate_id)
                hards.setdefault(r.candidate_id, []).append(r.anchor_id)
        return cls(members, base, hards, _paraphrase_classes(members), dev, corpus)


def _paraphrase_classes(members: Sequence[PairRecord]) -> dict[str, frozenset[str]]:
    """Connected components of the positive-pair graph."""
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r in members:
        ra, rb = find(r.anchor_id), find(r.candidate_id)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, set[str]] = {}
    for x in list(parent):
        groups.setdefault(find(x), set()).add(x)
    return {x: frozenset(groups[find(x)]) for x in parent}


def schedule_mega_batches(members: Sequence[PairRecord], order: Sequence[int],
                          capacity: int) -> list[list[int]]:
    """Greedily pack shuffled members into mega-batches with distinct anchors.

    Members whose anchor is already present are deferred, keeping their
    relative order, to the next mega-batch.
    """
    remaining = list(order)
    batches = []
    while remaining:
        used: set[str] = set()
        current, deferred = [], []
        for idx in remaining:
            anchor = members[idx].anchor_id
            if len(current) < capacity and anchor not in used:
                current.append(idx)
                used.add(anchor)
            else:
                deferred.append(idx)
        batches.append(current)
        remaining = deferred
    return batches


def _encode_ids(head: ProjectionHead, base: Mapping[str, np.ndarray], ids: Sequence[str]):
    mat = geo.as_matrix([base[i] for i in ids], head.d_in)
    return mat, head.encode_batch(mat)


def _sgd_step(state: TrainState, blueprint, data: TrainData, config: TrainConfig) -> float:
    head = state.head
    k = len(blueprint.anchors)
    hard_counts = [len(h) for h in blueprint.hard_negatives]
    ids = [*blueprint.anchors, *blueprint.positives,
           *(sid for hs in blueprint.hard_negatives for sid in hs)]
    bases, outs = _encode_ids(head, data.base, ids)
    offsets = np.cumsum([2 * k, *hard_counts])
    hard_outs = [outs[offsets[i]:offsets[i] + hard_counts[i]] for i in range(k)]
    batch = LossBatch(outs[:k], outs[k:2 * k], hard_outs)

    value = ams_loss(batch, config.loss)
    grad = ams_loss_grad(batch, config.loss)
    upstream = np.vstack([grad.anchors, grad.positives, *grad.hard_negatives])
    d_w, d_b = head_gradient(head, bases, upstream)

    lr, mu = config.learning_rate, config.momentum
    state.velocity_W = mu * state.velocity_W - lr * d_w
    state.velocity_b = mu * state.velocity_b - lr * d_b
    head.W = head.W + state.velocity_W
    head.b = head.b + state.velocity_b
    return value.total


def dev_metrics(head: ProjectionHead, data: TrainData) -> tuple[float, float, float]:
    scored = score_pairs(head, data.base, data.dev, data.corpus)
    report = calibrate_threshold(scored, ThresholdStrategy.MAX_ACCURACY)
    ids = sorted({sid for r in data.dev for sid in (r.anchor_id, r.candidate_id)})
    _, outs = _encode_ids(head, data.base, ids)
    emb = dict(zip(ids, outs))
    pos = [(emb[r.anchor_id], emb[r.candidate_id]) for r in data.dev if r.label == 1]
    align = align_loss(pos) if pos else float("nan")
    uniform = uniform_loss(outs) if len(ids) >= 2 else float("nan")
    return report.achieved, align, uniform


def train_epoch(state: TrainState, data: TrainData, config: TrainConfig):
    """One pass over the shuffled positive pairs; returns ``(state, EpochStats)``."""
    started = time.perf_counter()
    members = data.members
    order = state.rng.permutation(len(members))
    bsz = config.mini_batch_size
    capacity = bsz * config.mega_batch_M
    losses = []

    for mega_idx in schedule_mega_batches(members, order, capacity):
        chunks = [mega_idx[i:i + bsz] for i in range(0, len(mega_idx), bsz)]
        chunks = [c for c in chunks if len(c) >= 2]
        if not chunks:
            continue
        mega = aggregate_mega_batch([[members[i] for i in c] for c in chunks])

        own = [frozenset(pair) for pair in mega.members]
        if config.mining is not None:
            pool = sorted({sid for pair in mega.members for sid in pair})
            _, outs = _encode_ids(state.head, data.base, pool)
            snapshot = dict(zip(pool, outs))
            exclude = None
            if config.exclude_known_positives:
                exclude = [data.paraphrase_class.get(a, frozenset()) for a, _ in mega.members]
            mined = mine(mega, snapshot, config.mining, exclude=exclude)
        else:
            mined = [[] for _ in mega.members]
        dataset_hards = [
            [h for h in data.dataset_hards.get(a, ()) if h not in own[i]]
            for i, (a, _) in enumerate(mega.members)
        ]
        for blueprint in split_mini_batches(mega, mined, dataset_hards):
            losses.append(_sgd_step(state, blueprint, data, config))

    if not losses:
        raise EmptyInput("epoch produced no mini-batches")
    state.epoch += 1
    mean_loss = math.fsum(losses) / len(losses)
    dev_acc, align, uniform = dev_metrics(state.head, data)
    stats = EpochStats(state.epoch, mean_loss, dev_acc, align, uniform,
                       time.perf_counter() - started)
    logger.info("epoch %d loss %.5f dev_acc %.4f align %.4f uniform %.4f",
                stats.epoch, stats.loss, stats.dev_acc, stats.align, stats.uniform)
    return state, stats


@dataclass
class FitResult:
    head: ProjectionHead
    best_head: ProjectionHead
    best_epoch: int
    history: list[EpochStats]


def fit(corpus: Mapping[str, Sentence], records: Sequence[PairRecord],
        base: Mapping[str, np.ndarray], config: TrainConfig) -> FitResult:
    """Train a fresh head for ``config.epochs`` epochs.

    The best head is the one with the highest dev max-accuracy, earliest on ties.
    """
    data = TrainData.build(corpus, records, base, config)
    d_in = len(next(iter(base.values())))
    rng = np.random.default_rng(config.seed)
    head = ProjectionHead.init(d_in, config.d_out or d_in, rng, config.activation)
    state = TrainState.start(head, rng)
    history: list[EpochStats] = []
    best, best_epoch, best_acc = head.copy(), 0, -1.0
    for _ in range(config.epochs):
        state, stats = train_epoch(state, data, config)
        if not math.isfinite(stats.loss):
            raise DomainError(f"loss diverged at epoch {stats.epoch}")
        history.append(stats)
        if stats.dev_acc > best_acc:
            best, best_epoch, best_acc = state.head.copy(), stats.epoch, stats.dev_acc
    return FitResult(head=state.head, best_head=best, best_epoch=best_epoch, history=history)


