"""Command-line entry point: gen, train, eval, solve, verify.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
``ESIB_THREADS`` caps the torch worker count (default 1, which is also the
only setting under which training is bit-reproducible).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import random
import sys
from pathlib import Path

import torch

from .corpus import ConfigError, CorpusFormatError, generate_synthetic, load_corpus, templates_by_family, write_corpus
from .expr import ExprError
from .objectives import AlignmentError
from .trainer import PRESETS, NumericalFailure, TrainConfig, preset, train
from .vib import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("esib")

DATA_KEYS = ("corpus", "val_corpus", "out", "val_fraction")


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("ESIB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ESIB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ESIB_THREADS must be >= 1")
    return n


# --------------------------------------------------------------------------
# run configuration


def _field_types() -> dict[str, type]:
    hints = {"int": int, "float": float}
    out = {}
    for f in dataclasses.fields(TrainConfig):
        out[f.name] = hints.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
    return out


def _coerce(key: str, value: str):
    if key == "ablate":
        return tuple(a.strip() for a in value.split(",") if a.strip())
    kind = _field_types()[key]
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def read_config_file(path: str | Path) -> tuple[dict, dict]:
    """Parse a sectioned key = value file into (train overrides, data settings)."""
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise UsageError(f"config file not found: {path}")
    train_opts: dict = {}
    data: dict = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if section == "train":
                if key == "preset":
                    train_opts["preset"] = value
                elif key in TrainConfig.field_names():
                    train_opts[key] = _coerce(key, value)
                else:
                    raise ConfigError(f"unknown key [train] {key}")
            elif section == "data":
                if key not in DATA_KEYS:
                    raise ConfigError(f"unknown key [data] {key}")
                data[key] = value
            else:
                raise ConfigError(f"unknown section [{section}]")
    return train_opts, data


def resolve_run_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    train_opts, data = read_config_file(args.config) if args.config else ({}, {})
    for name in TrainConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            train_opts[name] = _coerce(name, value) if name == "ablate" else value
    preset_name = args.preset or train_opts.pop("preset", None) or "desk"
    train_opts.pop("preset", None)
    try:
        config = preset(preset_name, **train_opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for key in ("corpus", "val_corpus", "out"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if args.val_fraction is not None:
        data["val_fraction"] = args.val_fraction
    if not data.get("corpus"):
        raise UsageError("a training corpus is required (--corpus or [data] corpus)")
    if not data.get("out"):
        raise UsageError("an output directory is required (--out or [data] out)")
    for key in ("corpus", "val_corpus", "out"):
        if data.get(key):
            data[key] = str(Path(data[key]).resolve())
    data["val_fraction"] = float(data.get("val_fraction", 0.1))
    if not 0.0 <= data["val_fraction"] < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")
    data["preset"] = preset_name
    return config, data


def write_effective_config(config: TrainConfig, data: dict, path: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser["train"] = {"preset": data["preset"]}
    for k, v in config.to_dict().items():
        parser["train"][k] = ",".join(v) if k == "ablate" else repr(v) if isinstance(v, float) else str(v)
    parser["data"] = {k: str(data[k]) for k in DATA_KEYS if data.get(k) not in (None, "")}
    with path.open("w") as fh:
        parser.write(fh)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    families = [f for f in args.templates.split(",") if f] if args.templates else None
    problems = generate_synthetic(args.n, args.seed, templates_by_family(families), args.distractor_rate)
    write_corpus(problems, args.out)
    print(f"wrote {len(problems)} problems to {args.out}")
    return EXIT_OK


def _load(path: str):
    if not Path(path).is_file():
        raise UsageError(f"corpus not found: {path}")
    return load_corpus(path)


def cmd_train(args) -> int:
    config, data = resolve_run_config(args)
    problems = _load(data["corpus"])
    if data.get("val_corpus"):
        train_set, val_set = problems, _load(data["val_corpus"])
    else:
        order = list(range(len(problems)))
        random.Random(derive_seed(config.seed, "val-split")).shuffle(order)
        n_val = int(round(data["val_fraction"] * len(problems)))
        val_set = [problems[i] for i in sorted(order[:n_val])]
        train_set = [problems[i] for i in sorted(order[n_val:])]
    out = Path(data["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, data, out / "effective_config.ini")
    result = train(train_set, val_set, config, out)
    last = result.metrics[-1]
    print(
        f"trained {config.epochs} epochs on {len(train_set)} problems; "
        f"val answer acc SN {last['val_answer_acc_sn']:.3f} CN {last['val_answer_acc_cn']:.3f}; "
        f"outputs in {out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate_model, format_table, write_report
    from .network import ESIBNet

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    problems = _load(args.corpus)
    net = ESIBNet.load(args.checkpoint)
    if args.predictions:
        report = _eval_predictions(args.predictions, problems)
    else:
        report = evaluate_model(net, problems, args.beam, args.max_len)
    name = Path(args.checkpoint).stem
    if args.out:
        write_report(report, problems, args.out, name)
    print(format_table([(name, report)]))
    return EXIT_OK


def _eval_predictions(path: str, problems):
    """Score an external prediction file: one {"id", "expression"} record per line (infix)."""
    from .evalkit import compute_metrics
    from .expr import parse_infix

    by_id = {p.id: p for p in problems}
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            gold = by_id.get(rec["id"])
            if gold is None:
                raise AlignmentError(f"prediction for unknown problem id {rec['id']!r}")
            preds[rec["id"]] = parse_infix(rec["expression"], gold.qmap) if rec.get("expression") else None
    return compute_metrics(preds, problems)


def cmd_solve(args) -> int:
    from .evalkit import solve

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    solutions = solve(args.text, args.checkpoint, args.beam, args.max_len)
    if args.json:
        print(json.dumps([dataclasses.asdict(s) for s in solutions], ensure_ascii=False))
    else:
        for rank, s in enumerate(solutions, 1):
            print(f"{rank}. {s.infix} = {s.answer:g}  (score {s.score:.4f}; pre-order {s.preorder})")
        if not solutions:
            print("no valid solution")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    suites = {
        "kl": lambda: verify.kl_suite(n_samples=100_000 if args.quick else 1_000_000),
        "gradients": lambda: verify.gradient_suite(
            sample_per_tensor=4 if args.quick else 8, inject_bug=args.inject_gradient_bug,
            exhaustive_l2=not args.quick,
        ),
        "trees": verify.tree_suite,
        "beam": verify.beam_suite,
    }
    chosen = args.suite or list(suites)
    ok = True
    for name in chosen:
        result = suites[name]()
        print(result.line(), flush=True)
        ok &= result.passed
    print("all suites passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esib", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--templates", help="comma-separated template families (default: all)")
    p.add_argument("--distractor-rate", type=float, default=0.3)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train SN and CN")
    p.add_argument("--config", help="sectioned key = value file ([train], [data])")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--corpus")
    p.add_argument("--val-corpus", dest="val_corpus")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--out")
    for name, kind in _field_types().items():
        flag = "--" + name.replace("_", "-")
        if name == "ablate":
            p.add_argument(flag, dest=name, help="comma-separated subset of mt,vib,sdl")
        else:
            p.add_argument(flag, dest=name, type=kind)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--predictions", help="score this prediction file instead of decoding")
    p.add_argument("--out", help="directory for record, summary and table files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="solve one problem")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--json", action="store_true")
    p.add_argument("text")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--suite", action="append", choices=["kl", "gradients", "trees", "beam"])
    p.add_argument("--quick", action="store_true", help="fewer Monte Carlo samples and gradient coordinates")
    p.add_argument("--inject-gradient-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads())
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"esib {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusFormatError, AlignmentError, ExprError, json.JSONDecodeError, KeyError, OSError) as exc:
        print(f"esib {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"esib {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
