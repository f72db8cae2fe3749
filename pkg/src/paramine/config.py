"""``key = value`` configuration files for the generator and the trainer.

Blank lines and ``#`` comments are ignored.  Unknown keys, repeated keys and
unparsable values raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable

from .dataset import SyntheticConfig
from .errors import ConfigError
from .loss import LossParams
from .mining import MiningMode, MiningStrategy
from .trainer import TrainConfig


def parse_kv(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{line_no}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: key {key!r} given twice")
        values[key] = value
    return values


def read_kv(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_kv(fh, str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _langs(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


SYNTHETIC_KEYS: dict[str, Callable[[str], object]] = {
    "n_groups": int,
    "langs": _langs,
    "dim": int,
    "paraphrase_noise": float,
    "hard_negative_offset": float,
    "lang_offset": float,
    "positive_ratio": float,
    "cross_lang_ratio": float,
    "dev_fraction": float,
    "test_fraction": float,
    "seed": int,
}

TRAIN_KEYS: dict[str, Callable[[str], object]] = {
    "epochs": int,
    "mini_batch_size": int,
    "mega_batch_M": int,
    "margin": float,
    "scale": float,
    "gamma": float,
    "mining": str,
    "mining_n": int,
    "mining_tau": float,
    "mining_cap": _optional_int,
    "learning_rate": float,
    "momentum": float,
    "seed": int,
    "language_include": str,
    "d_out": _optional_int,
    "activation": str,
    "exclude_known_positives": _bool,
}


def _typed(raw: dict[str, str], table: dict[str, Callable[[str], object]]) -> dict[str, object]:
    out = {}
    for key, text in raw.items():
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = table[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return out


def synthetic_config(raw: dict[str, str], seed: int | None = None) -> SyntheticConfig:
    values = _typed(raw, SYNTHETIC_KEYS)
    if seed is not None:
        values["seed"] = seed
    try:
        return SyntheticConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(raw: dict[str, str], seed: int | None = None,
                 mining: str | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig`; ``seed`` and ``mining`` override file values."""
    v = _typed(raw, TRAIN_KEYS)
    if seed is not None:
        v["seed"] = seed
    if mining is not None:
        v["mining"] = mining
    defaults = TrainConfig()
    try:
        loss = LossParams(
            s=v.pop("scale", defaults.loss.s),
            m=v.pop("margin", defaults.loss.m),
            g=v.pop("gamma", defaults.loss.g),
        )
        mode = v.pop("mining", "top_n")
        n, tau, cap = v.pop("mining_n", 5), v.pop("mining_tau", 0.5), v.pop("mining_cap", None)
        strategy = None if mode == "none" else MiningStrategy(MiningMode(mode), n, tau, cap)
        langs = v.pop("language_include", "all")
        include = None if langs == "all" else frozenset(_langs(langs))
        return TrainConfig(loss=loss, mining=strategy, language_include=include, **v)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def describe_train_config(cfg: TrainConfig) -> dict[str, str]:
    """Flatten a config back into file keys, for manifests."""
    mining = cfg.mining
    return {
        "epochs": str(cfg.epochs),
        "mini_batch_size": str(cfg.mini_batch_size),
        "mega_batch_M": str(cfg.mega_batch_M),
        "margin": repr(cfg.loss.m),
        "scale": repr(cfg.loss.s),
        "gamma": repr(cfg.loss.g),
        "mining": "none" if mining is None else mining.mode.value,
        "mining_n": str(mining.n if mining else 5),
        "mining_tau": repr(mining.tau if mining else 0.5),
        "mining_cap": str(mining.cap if mining else None),
        "learning_rate": repr(cfg.learning_rate),
        "momentum": repr(cfg.momentum),
        "seed": str(cfg.seed),
        "language_include": ("all" if cfg.language_include is None
                             else ",".join(sorted(cfg.language_include))),
        "d_out": str(cfg.d_out),
        "activation": cfg.activation,
        "exclude_known_positives": str(cfg.exclude_known_positives).lower(),
    }


def describe_synthetic_config(cfg: SyntheticConfig) -> dict[str, str]:
    return {
        key: ",".join(getattr(cfg, key)) if key == "langs" else repr(getattr(cfg, key))
        for key in SYNTHETIC_KEYS
    }
