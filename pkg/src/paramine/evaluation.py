"""Threshold calibration, per-class accuracy, and embedding-space metrics."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import geometry as geo
from .dataset import PairClass, PairRecord, Sentence, classify_pair
from .errors import DegenerateLabels, EmptyInput, FormatError, MissingEmbedding

if TYPE_CHECKING:
    from .trainer import ProjectionHead

REPORT_HEADER = ("metric", "class", "value", "count")


class ThresholdStrategy(str, enum.Enum):
    MAX_ACCURACY = "max_acc"
    EER = "eer"
    MAX_F1 = "max_f1"


@dataclass(frozen=True)
class ScoredPair:
    pair: PairRecord
    score: float
    pair_class: PairClass


@dataclass(frozen=True)
class ThresholdReport:
    strategy: ThresholdStrategy
    threshold: float
    achieved: float
    split: str | None = None


@dataclass
class EvalReport:
    accuracy: float
    count: int
    per_class: dict[PairClass, float]
    class_counts: dict[PairClass, int]
    align: float | None = None
    uniform: float | None = None
    align_count: int = 0
    uniform_count: int = 0
    threshold: float | None = None

    def weighted_class_mean(self) -> float:
        total = math.fsum(self.per_class[c] * self.class_counts[c] for c in self.per_class)
        return total / self.count


def _encode_all(head: ProjectionHead, base: Mapping[str, np.ndarray], ids: Sequence[str]):
    for sid in ids:
        if sid not in base:
            raise MissingEmbedding(sid)
    mat = geo.as_matrix([base[sid] for sid in ids], head.d_in)
    return dict(zip(ids, head.encode_batch(mat)))


def score_pairs(head: ProjectionHead, base: Mapping[str, np.ndarray],
                pairs: Sequence[PairRecord], corpus: Mapping[str, Sentence],
                threads: int = 1) -> list[ScoredPair]:
    """Cosine of the encoded anchor and candidate for every pair, in input order."""
    ids = sorted({sid for p in pairs for sid in (p.anchor_id, p.candidate_id)})
    emb = _encode_all(head, base, ids)

    def score(chunk):
        return [
            ScoredPair(p, geo.cosine(emb[p.anchor_id], emb[p.candidate_id]),
                       classify_pair(corpus[p.anchor_id], corpus[p.candidate_id]))
            for p in chunk
        ]

    if threads <= 1 or len(pairs) < 2 * threads:
        return score(pairs)
    step = math.ceil(len(pairs) / threads)
    chunks = [pairs[i:i + step] for i in range(0, len(pairs), step)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return [sp for part in pool.map(score, chunks) for sp in part]


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """Sentinels -1 and +1 plus midpoints between adjacent distinct scores, ascending."""
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate(([-1.0], mids, [1.0])))


def _confusion(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray):
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    return tp, fp, len(pos) - tp, len(neg) - fp


def calibrate_scores(scores, labels, strategy: ThresholdStrategy | str,
                     split: str | None = None) -> ThresholdReport:
    """Pick a decision threshold (predict 1 iff score >= threshold).

    Ties in the target metric go to the smallest threshold.  For EER the
    threshold minimizes |FAR - FRR| and the reported value is their mean.
    """
    strategy = ThresholdStrategy(strategy)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("calibration needs both positive and negative labels")
    cands = threshold_candidates(scores)
    tp, fp, fn, tn = _confusion(scores, labels, cands)
    if strategy is ThresholdStrategy.MAX_ACCURACY:
        metric = (tp + tn) / len(scores)
        k = int(np.argmax(metric))
        achieved = float(metric[k])
    elif strategy is ThresholdStrategy.MAX_F1:
        metric = 2 * tp / (2 * tp + fp + fn)
        k = int(np.argmax(metric))
        achieved = float(metric[k])
    else:
        gap = np.abs(fp * n_pos - fn * n_neg)
        k = int(np.argmin(gap))
        achieved = float((fp[k] / n_neg + fn[k] / n_pos) / 2)
    return ThresholdReport(strategy, float(cands[k]), achieved, split)


def calibrate_threshold(scored: Sequence[ScoredPair], strategy: ThresholdStrategy | str,
                        split: str | None = None) -> ThresholdReport:
    if not scored:
        raise EmptyInput("nothing to calibrate on")
    if split is None:
        splits = {sp.pair.split for sp in scored}
        split = splits.pop() if len(splits) == 1 else None
    return calibrate_scores([sp.score for sp in scored], [sp.pair.label for sp in scored],
                            strategy, split)


def align_loss(pairs) -> float:
    """Mean squared distance between paired unit embeddings."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("align_loss needs at least one positive pair")
    u = geo.as_matrix([a for a, _ in pairs])
    v = geo.as_matrix([b for _, b in pairs], u.shape[1])
    sq = geo.row_norms(u - v) ** 2
    return math.fsum(sq.tolist()) / len(pairs)


def uniform_loss(points, t: float = 2.0) -> float:
    """``log mean exp(-t * ||u - v||^2)`` over unordered distinct pairs."""
    x = geo.as_matrix(points)
    n = x.shape[0]
    if n < 2:
        raise EmptyInput("uniform_loss needs at least two embeddings")
    logits = np.concatenate([-t * geo.row_norms(x[i + 1:] - x[i]) ** 2 for i in range(n - 1)])
    top = float(logits.max())
    return top + math.log(math.fsum(np.exp(logits - top).tolist())) - math.log(len(logits))


def evaluate(scored: Sequence[ScoredPair], threshold: float,
             embeddings: Mapping[str, np.ndarray] | None = None,
             uniform_scope: str = "all", t: float = 2.0) -> EvalReport:
    """Accuracy overall and per pair class at a fixed threshold.

    Classes with no pairs are left out of ``per_class``.  When encoded
    ``embeddings`` are given, align is computed over the positive pairs and
    uniform over every sentence (``uniform_scope="all"``) or only sentences in
    positive pairs (``"positives"``).
    """
    if not scored:
        raise EmptyInput("nothing to evaluate")
    correct: dict[PairClass, int] = {}
    counts: dict[PairClass, int] = {}
    for sp in scored:
        hit = int((sp.score >= threshold) == (sp.pair.label == 1))
        correct[sp.pair_class] = correct.get(sp.pair_class, 0) + hit
        counts[sp.pair_class] = counts.get(sp.pair_class, 0) + 1
    ordered = [c for c in PairClass if c in counts]
    report = EvalReport(
        accuracy=sum(correct.values()) / len(scored),
        count=len(scored),
        per_class={c: correct[c] / counts[c] for c in ordered},
        class_counts={c: counts[c] for c in ordered},
        threshold=threshold,
    )
    if embeddings is not None:
        positives = [sp.pair for sp in scored if sp.pair.label == 1]
        if positives:
            report.align = align_loss(
                (embeddings[p.anchor_id], embeddings[p.candidate_id]) for p in positives)
            report.align_count = len(positives)
        if uniform_scope == "all":
            source = [sp.pair for sp in scored]
        elif uniform_scope == "positives":
            source = positives
        else:
            raise ValueError(f"unknown uniform_scope {uniform_scope!r}")
        ids = sorted({sid for p in source for sid in (p.anchor_id, p.candidate_id)})
        if len(ids) >= 2:
            report.uniform = uniform_loss([embeddings[i] for i in ids], t)
            report.uniform_count = len(ids)
    return report


def _fmt(value: float) -> str:
    return repr(float(value))


def write_report(report: EvalReport, stream: TextIO) -> None:
    stream.write("\t".join(REPORT_HEADER) + "\n")
    stream.write(f"accuracy\toverall\t{_fmt(report.accuracy)}\t{report.count}\n")
    for c, acc in report.per_class.items():
        stream.write(f"accuracy\t{c.value}\t{_fmt(acc)}\t{report.class_counts[c]}\n")
    if report.align is not None:
        stream.write(f"align\t-\t{_fmt(report.align)}\t{report.align_count}\n")
    if report.uniform is not None:
        stream.write(f"uniform\t-\t{_fmt(report.uniform)}\t{report.uniform_count}\n")
    if report.threshold is not None:
        stream.write(f"threshold\t-\t{_fmt(report.threshold)}\t{report.count}\n")


@dataclass
class ReportRow:
    metric: str
    cls: str
    value: float
    count: int


def read_report(stream: Iterable[str]) -> list[ReportRow]:
    lines = iter(stream)
    header = next(lines, "").rstrip("\r\n")
    if tuple(header.split("\t")) != REPORT_HEADER:
        raise FormatError("report: bad header")
    rows = []
    for line_no, line in enumerate(lines, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"report line {line_no}: expected 4 fields")
        try:
            rows.append(ReportRow(parts[0], parts[1], float(parts[2]), int(parts[3])))
        except ValueError:
            raise FormatError(f"report line {line_no}: bad number") from None
    return rows
