"""Desk-scale experiments behind the acceptance suite, cached on disk.

Each run trains SN and CN on the seed-7 synthetic corpus (4000/500/500
split), takes CN's best-validation checkpoint and scores it on the 500
held-out problems with beam 5.  Results are keyed by the run config, the
corpus parameters and a hash of every source file that affects numerics,
so an edited model invalidates its cache entries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import time
from pathlib import Path

import torch

from .corpus import generate_synthetic, split
from .evalkit import evaluate_model
from .trainer import preset, train

log = logging.getLogger(__name__)

CORPUS_N = 5000
CORPUS_SEED = 7
SEEDS = (0, 1, 2, 3, 4)
# ablation table rows run without self-distillation, matching the compared variants
ABLATION_ROWS = {
    "CN": ("sdl",),
    "CN w/o MT": ("mt", "sdl"),
    "CN w/o VIB": ("sdl", "vib"),
    "CN w/o MT+VIB": ("mt", "sdl", "vib"),
}
DIVERSITY_ROWS = {"SDL enabled": (), "SDL disabled": ("sdl",)}

_NUMERIC_SOURCES = (
    "expr.py", "corpus.py", "encoder.py", "vib.py", "decoder.py",
    "network.py", "objectives.py", "trainer.py", "evalkit.py", "experiments.py",
)


def default_cache_dir() -> Path:
    return Path(os.environ.get("ESIB_CACHE", Path(__file__).resolve().parents[2] / ".esib_cache"))


def source_hash() -> str:
    h = hashlib.blake2b(digest_size=8)
    here = Path(__file__).parent
    for name in _NUMERIC_SOURCES:
        h.update((here / name).read_bytes())
    return h.hexdigest()


def desk_corpus(n: int = CORPUS_N, seed: int = CORPUS_SEED):
    return split(generate_synthetic(n, seed), (0.8, 0.1, 0.1), seed)


def run_key(seed: int, ablate: tuple[str, ...], beam: int) -> str:
    config = preset("desk", seed=seed, ablate=ablate)
    payload = json.dumps(
        {"config": config.to_dict(), "corpus": [CORPUS_N, CORPUS_SEED], "beam": beam, "src": source_hash()},
        sort_keys=True,
    )
    return hashlib.blake2b(payload.encode(), digest_size=10).hexdigest()


def run_desk(seed: int, ablate: tuple[str, ...] = (), beam: int = 5, cache_dir: Path | None = None) -> dict:
    """Train (or load from cache) one desk run and return its test summary."""
    ablate = tuple(sorted(ablate))
    cache = Path(cache_dir or default_cache_dir())
    path = cache / f"desk-{run_key(seed, ablate, beam)}.json"
    if path.exists():
        return json.loads(path.read_text())
    torch.set_num_threads(1)
    train_set, val_set, test_set = desk_corpus()
    config = preset("desk", seed=seed, ablate=ablate)
    t0 = time.perf_counter()
    result = train(train_set, val_set, config)
    train_s = time.perf_counter() - t0
    report = evaluate_model(result.best_network("cn"), test_set, beam, config.max_expr_length)
    summary = {
        "seed": seed,
        "ablate": list(ablate),
        "beam": beam,
        "epochs": config.epochs,
        "n_test": len(test_set),
        "answer_acc": report.answer_acc,
        "expression_acc": report.expression_acc,
        "diversity": report.diversity,
        "best_val_cn": result.best_val.get("cn"),
        "train_seconds": round(train_s, 1),
        "eval_seconds": round(time.perf_counter() - t0 - train_s, 1),
        "metrics": result.metrics,
    }
    cache.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def all_runs() -> list[tuple[int, tuple[str, ...]]]:
    """Every (seed, ablate) pair needed by the acceptance suite."""
    variants = list(dict.fromkeys(list(DIVERSITY_ROWS.values()) + list(ABLATION_ROWS.values())))
    return [(seed, tuple(sorted(v))) for v in variants for seed in SEEDS]


def table(rows: dict[str, tuple[str, ...]], cache_dir: Path | None = None) -> list[dict]:
    """Per-row means over seeds."""
    out = []
    for name, ablate in rows.items():
        runs = [run_desk(s, ablate, cache_dir=cache_dir) for s in SEEDS]
        n = len(runs)
        out.append({
            "row": name,
            "ablate": list(ablate),
            "answer_acc": sum(r["answer_acc"] for r in runs) / n,
            "expression_acc": sum(r["expression_acc"] for r in runs) / n,
            "diversity": sum(r["diversity"] for r in runs) / n,
            "per_seed_answer_acc": [r["answer_acc"] for r in runs],
            "per_seed_diversity": [r["diversity"] for r in runs],
        })
    return out


def format_rows(rows: list[dict]) -> str:
    width = max(len(r["row"]) for r in rows)
    lines = [f"{'Model':<{width}}  Answer-Acc  Equation-Acc  Diversity  (mean of {len(SEEDS)} seeds)"]
    for r in rows:
        lines.append(
            f"{r['row']:<{width}}  {100 * r['answer_acc']:10.2f}  {100 * r['expression_acc']:12.2f}  {100 * r['diversity']:9.2f}"
        )
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run and cache the desk-scale acceptance experiments.")
    parser.add_argument("--cache", type=Path, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for seed, ablate in all_runs():
        t0 = time.perf_counter()
        r = run_desk(seed, ablate, cache_dir=args.cache)
        log.info("seed %d ablate %s: answer %.4f expr %.4f (%.0fs)", seed, ",".join(ablate) or "-",
                 r["answer_acc"], r["expression_acc"], time.perf_counter() - t0)
    print(format_rows(table(ABLATION_ROWS, args.cache)))
    print(format_rows(table(DIVERSITY_ROWS, args.cache)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
