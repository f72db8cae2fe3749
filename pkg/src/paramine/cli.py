"""``paramine`` command line: gen, train, eval, report.

Exit codes: 0 success, 1 domain error, 2 format or I/O error, 3 config error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import (describe_synthetic_config, describe_train_config, read_kv,
                     synthetic_config, train_config)
from .dataset import (generate_synthetic, load_data_dir, write_embeddings, write_pairs,
                      write_sentences)
from .errors import DomainError, EmptyInput, FormatError, ParamineError
from .evaluation import (ThresholdStrategy, calibrate_threshold, evaluate, read_report,
                         score_pairs, write_report)
from .trainer import fit, load_head, save_head

logger = logging.getLogger("paramine")

DATA_FILES = ("sentences.tsv", "pairs.tsv", "embeddings.bin", "embeddings.ids")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs: list[Path],
                   outputs: list[Path], seed: int | None, started: str, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {p.name: sha256(p) for p in outputs},
        "started": started,
        "finished": _now(),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    started = _now()
    cfg = synthetic_config(read_kv(args.config), seed=args.seed)
    out = _out_dir(args.out)
    data = generate_synthetic(cfg)
    with open(out / "sentences.tsv", "w", encoding="utf-8", newline="\n") as fh:
        write_sentences(data.corpus, fh)
    with open(out / "pairs.tsv", "w", encoding="utf-8", newline="\n") as fh:
        write_pairs(data.records, fh)
    write_embeddings(out / "embeddings.bin", data.embeddings)
    inputs = [Path(args.config)] if args.config else []
    write_manifest(out, "gen", describe_synthetic_config(cfg), inputs,
                   [out / f for f in DATA_FILES], cfg.seed, started)
    n_pos = sum(r.label for r in data.records)
    print(f"wrote {len(data.corpus)} sentences, {len(data.records)} pairs "
          f"({n_pos} positive) to {out}")
    return 0


def _data_inputs(data_dir: Path) -> list[Path]:
    return [data_dir / f for f in DATA_FILES]


def cmd_train(args) -> int:
    started = _now()
    cfg = train_config(read_kv(args.config), seed=args.seed, mining=args.mining)
    data_dir = Path(args.data)
    corpus, records, base = load_data_dir(data_dir)
    out = _out_dir(args.out)
    result = fit(corpus, records, base, cfg)
    save_head(result.head, out / "head.bin")
    save_head(result.best_head, out / "best_head.bin")
    with open(out / "history.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\tloss\tdev_acc\talign\tuniform\n")
        for h in result.history:
            fh.write(f"{h.epoch}\t{h.loss!r}\t{h.dev_acc!r}\t{h.align!r}\t{h.uniform!r}\n")
    inputs = _data_inputs(data_dir) + ([Path(args.config)] if args.config else [])
    write_manifest(out, "train", describe_train_config(cfg), inputs,
                   [out / "head.bin", out / "best_head.bin", out / "history.tsv"],
                   cfg.seed, started, threads=args.threads, best_epoch=result.best_epoch,
                   epoch_seconds=[round(h.seconds, 3) for h in result.history])
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs: loss {last.loss:.4f}, "
          f"dev_acc {last.dev_acc:.4f} (best {result.best_epoch})")
    return 0


def _print_rows(rows) -> None:
    for row in rows:
        print(f"{row.metric:<10} {row.cls:<26} {row.value:>9.4f}  n={row.count}")


def cmd_eval(args) -> int:
    started = _now()
    data_dir = Path(args.data)
    corpus, records, base = load_data_dir(data_dir)
    head = load_head(args.head)
    dev = [r for r in records if r.split == "dev"]
    test = [r for r in records if r.split == "test"]
    if not dev or not test:
        raise EmptyInput("eval needs non-empty dev and test splits")
    calibration = calibrate_threshold(score_pairs(head, base, dev, corpus, args.threads),
                                      args.strategy, split="dev")
    if calibration.split != "dev":
        raise DomainError("threshold must be calibrated on the dev split")
    scored = score_pairs(head, base, test, corpus, args.threads)
    ids = sorted({sid for r in test for sid in (r.anchor_id, r.candidate_id)})
    encoded = dict(zip(ids, head.encode_batch([base[i] for i in ids])))
    report = evaluate(scored, calibration.threshold, encoded, uniform_scope=args.uniform_scope)
    out = _out_dir(args.out)
    with open(out / "report.tsv", "w", encoding="utf-8", newline="\n") as fh:
        write_report(report, fh)
    write_manifest(out, "eval",
                   {"strategy": calibration.strategy.value, "uniform_scope": args.uniform_scope,
                    "threshold": repr(calibration.threshold),
                    "dev_achieved": repr(calibration.achieved)},
                   _data_inputs(data_dir) + [Path(args.head)], [out / "report.tsv"], None,
                   started, threads=args.threads)
    print(f"threshold {calibration.threshold:.6f} ({calibration.strategy.value} on dev, "
          f"achieved {calibration.achieved:.4f})")
    with open(out / "report.tsv", encoding="utf-8") as fh:
        _print_rows(read_report(fh))
    return 0


def cmd_report(args) -> int:
    path = Path(args.data)
    if path.is_dir():
        path = path / "report.tsv"
    with open(path, encoding="utf-8") as fh:
        _print_rows(read_report(fh))
    history = path.parent / "history.tsv"
    if history.exists():
        print(history.read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paramine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus with base embeddings")
    gen.add_argument("--config", help="key = value file (n_groups, langs, dim, paraphrase_noise, "
                                      "hard_negative_offset, lang_offset, positive_ratio, "
                                      "cross_lang_ratio, dev_fraction, test_fraction, seed)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train a projection head")
    train.add_argument("--data", required=True, help="directory with the corpus files")
    train.add_argument("--config", help="key = value file (epochs, mini_batch_size, mega_batch_M, "
                                        "margin, scale, gamma, mining, mining_n, mining_tau, "
                                        "mining_cap, learning_rate, momentum, seed, "
                                        "language_include, d_out, activation, "
                                        "exclude_known_positives)")
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--mining", choices=("top_n", "threshold", "none"))
    train.add_argument("--threads", type=int, default=1)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="calibrate on dev, evaluate on test")
    ev.add_argument("--data", required=True)
    ev.add_argument("--head", required=True, help="head.bin to evaluate")
    ev.add_argument("--strategy", choices=[s.value for s in ThresholdStrategy],
                    default=ThresholdStrategy.MAX_ACCURACY.value)
    ev.add_argument("--uniform-scope", choices=("all", "positives"), default="all")
    ev.add_argument("--out", required=True)
    ev.add_argument("--threads", type=int, default=1)
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="print a report.tsv (and history.tsv next to it)")
    rep.add_argument("--data", required=True, help="report.tsv or the directory holding it")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParamineError as exc:
        print(f"paramine: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"paramine: error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
