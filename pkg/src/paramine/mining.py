"""Mega-batch aggregation and hard-negative mining.

Mini-batches of positive pairs are concatenated into a mega-batch, each
member's anchor is scored against every other anchor and positive in the
mega-batch, and the closest candidates become extra hard negatives before the
mega-batch is split back into its mini-batches.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Collection, Mapping, Sequence

import numpy as np

from . import geometry as geo
from .errors import DomainError, DuplicateAnchor, EmptyInput, IndexMismatch, MissingEmbedding


class MiningMode(str, enum.Enum):
    TOP_N = "top_n"
    THRESHOLD = "threshold"


@dataclass(frozen=True)
class MiningStrategy:
    mode: MiningMode = MiningMode.TOP_N
    n: int = 5
    tau: float = 0.5
    cap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", MiningMode(self.mode))
        if self.mode is MiningMode.TOP_N and self.n < 1:
            raise ValueError(f"top_n mining needs n >= 1, got {self.n}")
        if self.mode is MiningMode.THRESHOLD:
            if not (math.isfinite(self.tau) and -1.0 < self.tau < 1.0):
                raise ValueError(f"threshold tau must lie in (-1, 1), got {self.tau}")
            if self.cap is not None and self.cap < 0:
                raise ValueError(f"cap must be non-negative, got {self.cap}")


@dataclass(frozen=True)
class MegaBatch:
    members: tuple[tuple[str, str], ...]
    assignment: tuple[int, ...]
    M: int

    @property
    def anchors(self) -> list[str]:
        return [a for a, _ in self.members]

    @property
    def positives(self) -> list[str]:
        return [p for _, p in self.members]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class BatchBlueprint:
    """Sentence ids for one mini-batch, ready to be embedded into a LossBatch."""

    anchors: tuple[str, ...]
    positives: tuple[str, ...]
    hard_negatives: tuple[tuple[str, ...], ...]


def aggregate_mega_batch(mini_batches: Sequence[Sequence]) -> MegaBatch:
    """Concatenate positive-pair mini-batches, remembering where each member came from.

    Raises:
        EmptyInput: no mini-batches, or an empty one.
        DuplicateAnchor: an anchor id occurs twice across the mini-batches.
    """
    if not mini_batches:
        raise EmptyInput("no mini-batches to aggregate")
    members: list[tuple[str, str]] = []
    assignment: list[int] = []
    seen: set[str] = set()
    for b, batch in enumerate(mini_batches):
        if not batch:
            raise EmptyInput(f"mini-batch {b} is empty")
        for rec in batch:
            if rec.label != 1:
                raise DomainError(
                    f"only positive pairs enter a mega-batch, got label {rec.label} "
                    f"for ({rec.anchor_id}, {rec.candidate_id})")
            if rec.anchor_id in seen:
                raise DuplicateAnchor(rec.anchor_id)
            seen.add(rec.anchor_id)
            members.append((rec.anchor_id, rec.candidate_id))
            assignment.append(b)
    return MegaBatch(members=tuple(members), assignment=tuple(assignment), M=len(mini_batches))


def _scores(mega: MegaBatch, embeddings: Mapping[str, np.ndarray]):
    pool = sorted({i for pair in mega.members for i in pair})
    for sid in pool:
        if sid not in embeddings:
            raise MissingEmbedding(sid)
    anchors = geo.as_matrix([embeddings[a] for a in mega.anchors])
    pool_vecs = geo.as_matrix([embeddings[p] for p in pool])
    return pool, geo.pairwise_cosine(anchors, pool_vecs)


def _ranked(mega, embeddings, exclude, select, limit=None):
    """Shared ranking: descending cosine, ascending id on ties.

    ``select(sims, eligible)`` returns a boolean mask of candidates worth
    sorting; only those are ranked, then the first ``limit`` are kept.
    """
    if exclude is not None and len(exclude) != len(mega):
        raise IndexMismatch("exclude must provide one id set per member")
    pool, sims = _scores(mega, embeddings)
    pool_index = {sid: k for k, sid in enumerate(pool)}
    eligible = np.ones(sims.shape, dtype=bool)
    for i, (anchor, positive) in enumerate(mega.members):
        banned = {anchor, positive}
        if exclude is not None:
            banned.update(exclude[i])
        cols = [pool_index[sid] for sid in banned if sid in pool_index]
        eligible[i, cols] = False
    candidates = select(sims, eligible)
    out: list[list[str]] = []
    for i in range(len(mega)):
        idx = np.flatnonzero(candidates[i])
        # pool is id-sorted, so a stable sort breaks ties by ascending id
        order = idx[np.argsort(-sims[i, idx], kind="stable")]
        if limit is not None:
            order = order[:limit]
        out.append([pool[k] for k in order.tolist()])
    return out


def mine_top_n(mega: MegaBatch, embeddings: Mapping[str, np.ndarray], n: int,
               exclude: Sequence[Collection[str]] | None = None) -> list[list[str]]:
    """The ``n`` most similar mega-batch sentences for every member's anchor.

    ``exclude`` optionally bans further ids per member (for example other
    known paraphrases of the anchor) on top of the member's own pair.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    def select(sims, eligible):
        width = sims.shape[1]
        if n >= width:
            return eligible
        masked = np.where(eligible, sims, -np.inf)
        # n-th largest eligible cosine per row; ties at the cut stay in
        kth = np.partition(masked, width - n, axis=1)[:, width - n]
        return eligible & (masked >= kth[:, None])

    return _ranked(mega, embeddings, exclude, select, limit=n)


def mine_threshold(mega: MegaBatch, embeddings: Mapping[str, np.ndarray], tau: float,
                   cap: int | None = None,
                   exclude: Sequence[Collection[str]] | None = None) -> list[list[str]]:
    """All mega-batch sentences with cosine strictly above ``tau``, optionally capped."""
    if not -1.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (-1, 1), got {tau}")
    return _ranked(mega, embeddings, exclude, lambda sims, eligible: eligible & (sims > tau),
                   limit=cap)


def mine(mega: MegaBatch, embeddings: Mapping[str, np.ndarray], strategy: MiningStrategy,
         exclude: Sequence[Collection[str]] | None = None) -> list[list[str]]:
    if strategy.mode is MiningMode.TOP_N:
        return mine_top_n(mega, embeddings, strategy.n, exclude=exclude)
    return mine_threshold(mega, embeddings, strategy.tau, strategy.cap, exclude=exclude)


def _per_member(lists, size: int, what: str) -> list[list[str]]:
    if isinstance(lists, Mapping):
        bad = [k for k in lists if not (isinstance(k, int) and 0 <= k < size)]
        if bad:
            raise IndexMismatch(f"{what} refers to members {bad} outside the mega-batch")
        return [list(lists.get(i, ())) for i in range(size)]
    if len(lists) != size:
        raise IndexMismatch(f"{what} has {len(lists)} entries for {size} members")
    return [list(x) for x in lists]


def split_mini_batches(mega: MegaBatch, mined, dataset_hards) -> list[BatchBlueprint]:
    """Restore the original mini-batches, attaching dataset-then-mined hard negatives."""
    size = len(mega)
    mined = _per_member(mined, size, "mined")
    dataset_hards = _per_member(dataset_hards, size, "dataset_hards")
    groups: list[list[int]] = [[] for _ in range(mega.M)]
    for i, b in enumerate(mega.assignment):
        groups[b].append(i)
    blueprints = []
    for members in groups:
        hards = []
        for i in members:
            merged = list(dict.fromkeys([*dataset_hards[i], *mined[i]]))
            hards.append(tuple(merged))
        blueprints.append(BatchBlueprint(
            anchors=tuple(mega.members[i][0] for i in members),
            positives=tuple(mega.members[i][1] for i in members),
            hard_negatives=tuple(hards),
        ))
    return blueprints
