"""Sentences, labelled pairs, the pair-class taxonomy, and corpus I/O.

Also holds a seeded generator of multilingual sentence clusters with base
embeddings, used in place of a real paraphrase corpus for desk-scale runs.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, TextIO

import numpy as np

from . import geometry as geo
from .errors import (DuplicateId, EmptyResult, FormatError, MalformedLine, UnknownId)

logger = logging.getLogger(__name__)

SENTENCE_HEADER = ("id", "lang", "group_id", "text")
PAIR_HEADER = ("anchor_id", "candidate_id", "label", "split")
SPLITS = ("train", "dev", "test")
EMB_MAGIC = b"EMB1"


@dataclass(frozen=True)
class Sentence:
    id: str
    lang: str
    group_id: str
    text: str = ""


@dataclass(frozen=True)
class PairRecord:
    anchor_id: str
    candidate_id: str
    label: int
    split: str = "train"


class PairClass(str, enum.Enum):
    INTRA_LINGUAL = "intra_lingual"
    INTER_LINGUAL_TRANSLATION = "inter_lingual_translation"
    INTER_LINGUAL_PARAPHRASE = "inter_lingual_paraphrase"


Corpus = dict[str, Sentence]


def classify_pair(a: Sentence, b: Sentence) -> PairClass:
    if a.lang == b.lang:
        return PairClass.INTRA_LINGUAL
    if a.group_id == b.group_id:
        return PairClass.INTER_LINGUAL_TRANSLATION
    return PairClass.INTER_LINGUAL_PARAPHRASE


# --- TSV ingestion -----------------------------------------------------------

def escape_text(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def unescape_text(text: str) -> str:
    out = []
    chars = iter(text)
    for ch in chars:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(chars, "")
        out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
    return "".join(out)


def _rows(stream: Iterable[str], header: tuple[str, ...]):
    lines = iter(stream)
    first = next(lines, None)
    if first is None or tuple(first.rstrip("\r\n").split("\t")) != header:
        raise MalformedLine(1, f"expected header {chr(9).join(header)!r}")
    for line_no, line in enumerate(lines, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise MalformedLine(line_no, f"expected {len(header)} fields, got {len(fields)}")
        yield line_no, fields


def parse_sentences(stream: Iterable[str]) -> Corpus:
    corpus: Corpus = {}
    for line_no, (sid, lang, group_id, text) in _rows(stream, SENTENCE_HEADER):
        if not sid or not lang:
            raise MalformedLine(line_no, "id and lang must be non-empty")
        if sid in corpus:
            raise DuplicateId(sid, line_no)
        corpus[sid] = Sentence(sid, lang, group_id, unescape_text(text))
    return corpus


def parse_pair_records(stream: Iterable[str], corpus: Mapping[str, Sentence]) -> list[PairRecord]:
    records = []
    for line_no, (anchor, candidate, label, split) in _rows(stream, PAIR_HEADER):
        if label not in ("0", "1"):
            raise MalformedLine(line_no, f"label must be 0 or 1, got {label!r}")
        if split not in SPLITS:
            raise MalformedLine(line_no, f"unknown split {split!r}")
        if anchor == candidate:
            raise MalformedLine(line_no, "anchor and candidate are the same sentence")
        for sid in (anchor, candidate):
            if sid not in corpus:
                raise UnknownId(sid, line_no)
        records.append(PairRecord(anchor, candidate, int(label), split))
    return records


def parse_pairs(sentences_stream: Iterable[str],
                pairs_stream: Iterable[str]) -> tuple[Corpus, list[PairRecord]]:
    """Read ``sentences.tsv`` and ``pairs.tsv`` streams.

    Raises:
        MalformedLine: wrong header, field count, label or split.
        DuplicateId: a sentence id defined twice.
        UnknownId: a pair referencing an undefined sentence.
    """
    corpus = parse_sentences(sentences_stream)
    records = parse_pair_records(pairs_stream, corpus)
    for (split, label), n in sorted(count_records(records).items()):
        logger.info("loaded %d %s pairs with label %d", n, split, label)
    return corpus, records


def count_records(records: Iterable[PairRecord]) -> Counter:
    return Counter((r.split, r.label) for r in records)


def write_sentences(corpus: Mapping[str, Sentence], stream: TextIO) -> None:
    stream.write("\t".join(SENTENCE_HEADER) + "\n")
    for s in corpus.values():
        stream.write(f"{s.id}\t{s.lang}\t{s.group_id}\t{escape_text(s.text)}\n")


def write_pairs(records: Iterable[PairRecord], stream: TextIO) -> None:
    stream.write("\t".join(PAIR_HEADER) + "\n")
    for r in records:
        stream.write(f"{r.anchor_id}\t{r.candidate_id}\t{r.label}\t{r.split}\n")


# --- binary base embeddings ----------------------------------------------------

def write_embeddings(path: str | Path, embeddings: Mapping[str, np.ndarray]) -> None:
    """Write ``embeddings.bin`` plus the ``embeddings.ids`` sidecar, in mapping order."""
    path = Path(path)
    ids = list(embeddings)
    mat = geo.as_matrix([embeddings[i] for i in ids])
    count, dim = mat.shape if ids else (0, 0)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(mat.astype("<f4").tobytes())
    with open(path.with_suffix(".ids"), "w", encoding="utf-8", newline="\n") as fh:
        for sid in ids:
            fh.write(sid + "\n")


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    mat = np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).astype(np.float64)
    ids = path.with_suffix(".ids").read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise FormatError(f"{path}: {count} vectors but {len(ids)} ids in sidecar")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate ids in sidecar")
    return {sid: mat[k] for k, sid in enumerate(ids)}


def load_data_dir(data_dir: str | Path):
    """Load the ``sentences.tsv`` / ``pairs.tsv`` / ``embeddings.bin`` triplet."""
    data_dir = Path(data_dir)
    with open(data_dir / "sentences.tsv", encoding="utf-8") as s, \
            open(data_dir / "pairs.tsv", encoding="utf-8") as p:
        corpus, records = parse_pairs(s, p)
    embeddings = read_embeddings(data_dir / "embeddings.bin")
    missing = [sid for sid in corpus if sid not in embeddings]
    if missing:
        raise FormatError(f"no base embedding for {len(missing)} sentences, e.g. {missing[0]!r}")
    return corpus, records, embeddings


def filter_languages(records: Iterable[PairRecord], corpus: Mapping[str, Sentence],
                     include: Iterable[str]) -> tuple[list[PairRecord], int]:
    """Keep pairs whose two sentences are both in ``include``; return (kept, dropped)."""
    include = frozenset(include)
    if not include:
        raise ValueError("include must name at least one language")
    kept, dropped = [], 0
    for r in records:
        if corpus[r.anchor_id].lang in include and corpus[r.candidate_id].lang in include:
            kept.append(r)
        else:
            dropped += 1
    if not kept:
        raise EmptyResult(f"no pairs left after restricting to languages {sorted(include)}")
    logger.info("language filter kept %d pairs, dropped %d", len(kept), dropped)
    return kept, dropped


# --- synthetic clusters --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for :func:`generate_synthetic`.

    Noise magnitudes are expected vector norms: an isotropic Gaussian with
    per-coordinate deviation ``sigma / sqrt(dim)``.
    """

    n_groups: int = 50
    langs: tuple[str, ...] = ("en", "de", "fr", "ko")
    dim: int = 32
    paraphrase_noise: float = 0.1
    hard_negative_offset: float = 0.35
    lang_offset: float = 0.2
    positive_ratio: float = 0.5
    cross_lang_ratio: float = 1.0
    dev_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "langs", tuple(self.langs))
        if self.n_groups < 2:
            raise ValueError("n_groups must be >= 2")
        if self.dim < 4:
            raise ValueError("dim must be >= 4")
        if not self.langs or len(set(self.langs)) != len(self.langs):
            raise ValueError("langs must be a non-empty list of distinct codes")
        if not self.paraphrase_noise > 0:
            raise ValueError("paraphrase_noise must be > 0")
        if not self.hard_negative_offset > 0:
            raise ValueError("hard_negative_offset must be > 0")
        if self.lang_offset < 0:
            raise ValueError("lang_offset must be >= 0")
        if not 0 < self.positive_ratio < 1:
            raise ValueError("positive_ratio must lie in (0, 1)")
        if not 0 <= self.cross_lang_ratio <= 1:
            raise ValueError("cross_lang_ratio must lie in [0, 1]")
        if not (0 <= self.dev_fraction < 1 and 0 <= self.test_fraction < 1):
            raise ValueError("split fractions must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class SyntheticData:
    corpus: Corpus
    records: list[PairRecord]
    embeddings: dict[str, np.ndarray]
    centers: np.ndarray = field(repr=False)


def _random_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return geo.normalize_rows(rng.standard_normal((n, dim)))


def _split_groups(cfg: SyntheticConfig, rng: np.random.Generator) -> list[str]:
    n = cfg.n_groups
    n_dev = max(1, round(cfg.dev_fraction * n))
    n_test = max(1, round(cfg.test_fraction * n)) if n >= 3 else 0
    if n - n_dev - n_test < 1:
        raise ValueError("split fractions leave no training groups")
    order = rng.permutation(n)
    split = ["train"] * n
    for k in order[:n_dev]:
        split[k] = "dev"
    for k in order[n_dev:n_dev + n_test]:
        split[k] = "test"
    return split


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Seeded multilingual paraphrase clusters with base embeddings.

    Every group has a meaning center on the sphere and three source sentences,
    each rendered in every language: an original ``a``, a paraphrase ``b``
    (center plus Gaussian noise) and a hard negative ``n`` (center pushed a
    fixed distance along a random orthogonal direction).  Each language adds
    its own fixed offset vector.  Sentences sharing a source are translations
    of each other and share a ``group_id``.

    Positive pairs join ``a``/``b`` sentences of one group, negatives join an
    ``a`` or ``b`` sentence with an ``n`` sentence.  Pairs are subsampled to
    hit ``positive_ratio``; splits are assigned per group.
    """
    rng = np.random.default_rng(cfg.seed)
    dim, langs = cfg.dim, cfg.langs
    split = _split_groups(cfg, rng)
    centers = _random_unit(rng, cfg.n_groups, dim)
    lang_vecs = _random_unit(rng, len(langs), dim) * cfg.lang_offset
    para_noise = rng.standard_normal((cfg.n_groups, dim)) * (cfg.paraphrase_noise / math.sqrt(dim))
    raw_dirs = rng.standard_normal((cfg.n_groups, dim))
    raw_dirs -= (raw_dirs * centers).sum(axis=1, keepdims=True) * centers
    hard_dirs = geo.normalize_rows(raw_dirs) * cfg.hard_negative_offset

    corpus: Corpus = {}
    vectors: dict[str, np.ndarray] = {}
    positives: list[tuple[str, str, str]] = []
    negatives: list[tuple[str, str, str]] = []

    def sid(g: int, kind: str, lang: str) -> str:
        return f"g{g:04d}.{kind}.{lang}"

    for g in range(cfg.n_groups):
        sources = {
            "a": centers[g],
            "b": centers[g] + para_noise[g],
            "n": centers[g] + hard_dirs[g],
        }
        for kind, base in sources.items():
            for li, lang in enumerate(langs):
                key = sid(g, kind, lang)
                corpus[key] = Sentence(key, lang, f"g{g:04d}.{kind}", "")
                vectors[key] = base + lang_vecs[li]

        def keep(l1: str, l2: str) -> bool:
            return l1 == l2 or rng.random() < cfg.cross_lang_ratio

        for i, l1 in enumerate(langs):
            for j, l2 in enumerate(langs):
                if i < j:
                    for kind in ("a", "b"):
                        if keep(l1, l2):
                            positives.append((sid(g, kind, l1), sid(g, kind, l2), split[g]))
                if keep(l1, l2):
                    positives.append((sid(g, "a", l1), sid(g, "b", l2), split[g]))
                for kind in ("a", "b"):
                    if keep(l1, l2):
                        negatives.append((sid(g, kind, l1), sid(g, "n", l2), split[g]))

    n_pos, n_neg = len(positives), len(negatives)
    r = cfg.positive_ratio
    if n_pos / (n_pos + n_neg) > r:
        n_pos = min(n_pos, round(r * n_neg / (1 - r)))
    else:
        n_neg = min(n_neg, round((1 - r) * n_pos / r))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("configuration yields no positive or no negative pairs")
    pos_keep = np.sort(rng.permutation(len(positives))[:n_pos])
    neg_keep = np.sort(rng.permutation(len(negatives))[:n_neg])
    flips = rng.random(len(pos_keep)) < 0.5

    records = []
    for k, flip in zip(pos_keep.tolist(), flips.tolist()):
        a, b, sp = positives[k]
        records.append(PairRecord(b, a, 1, sp) if flip else PairRecord(a, b, 1, sp))
    for k in neg_keep.tolist():
        a, b, sp = negatives[k]
        records.append(PairRecord(a, b, 0, sp))
    order = {s: k for k, s in enumerate(SPLITS)}
    records.sort(key=lambda rec: (order[rec.split], rec.anchor_id, rec.candidate_id))

    ids = list(corpus)
    unit = geo.normalize_rows(np.vstack([vectors[i] for i in ids]))
    # round-trip through float32 so in-memory data equals what embeddings.bin holds
    unit = unit.astype(np.float32).astype(np.float64)
    embeddings = {i: unit[k] for k, i in enumerate(ids)}
    return SyntheticData(corpus=corpus, records=records, embeddings=embeddings, centers=centers)
