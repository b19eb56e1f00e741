"""Primary acceptance criteria, one test each, at their stated tolerances.

Criteria 6-8 train 25 desk-scale runs; results are cached on disk (see
``esib.experiments``), so only the first invocation pays for training.
"""

import json
import random

import torch

from conftest import record_acceptance
from esib import experiments as ex
from esib import verify
from esib.corpus import generate_synthetic
from esib.evalkit import compute_metrics
from esib.trainer import preset, train


def test_criterion_1_kl_oracle():
    r = verify.kl_suite(n_draws=50, n_samples=1_000_000)
    ok = r.passed and r.seconds < 30
    record_acceptance(
        1, "KL oracle", ok,
        f"{r.details['failures']}/50 draws beyond 3 SE (worst |z|={r.details['worst_z']:.2f}), "
        f"KL(0,1)={r.details['kl_at_prior']}, {r.seconds:.1f}s",
    )
    assert ok, r.details


def test_criterion_2_gradient_suite():
    r = verify.gradient_suite()
    ok = r.passed and r.seconds < 120
    parts = ", ".join(f"{k} {v['max_rel_error']:.1e} ({v['checked']} coords)" for k, v in r.details.items())
    record_acceptance(2, "gradient suite", ok, f"max rel err {r.max_rel_error:.2e} <= 1e-3; {parts}; {r.seconds:.1f}s")
    assert ok, r.details


def test_criterion_3_tree_suite():
    r = verify.tree_suite(n=1000)
    record_acceptance(
        3, "tree suite", r.passed,
        f"round-trip failures {r.details['roundtrip_failures']}, evaluator max rel err {r.max_rel_error:.1e}, "
        f"unparseable decodes {r.details['unparseable_decodes']}/{r.details['decoded']}",
    )
    assert r.passed, r.details


def test_criterion_4_beam_oracle():
    r = verify.beam_suite()
    agree = ", ".join(f"{k} {v}" for k, v in r.details["agreement"].items())
    record_acceptance(
        4, "beam oracle", r.passed,
        f"beam set == exhaustive top-K: {agree}; beam=1 vs greedy mismatches "
        f"{r.details['greedy_mismatches']}/{r.details['greedy_checked']}; hypothesis score err {r.max_rel_error:.1e}",
    )
    assert r.passed, json.dumps(r.details["mismatches"][:3])


def test_criterion_5_metric_identities():
    rng = random.Random(0)
    problems = generate_synthetic(300, 21)
    checked = 0
    ok = True
    for _ in range(50):
        preds = {}
        for p in problems:
            choice = rng.random()
            preds[p.id] = p.target if choice < 0.5 else rng.choice(problems).target if choice < 0.9 else None
        rep = compute_metrics(preds, problems)
        ok &= rep.diversity == rep.answer_acc - rep.expression_acc and rep.expression_acc <= rep.answer_acc
        checked += 1
    for run in _cached_runs():
        ok &= run["diversity"] == run["answer_acc"] - run["expression_acc"]
        ok &= run["expression_acc"] <= run["answer_acc"]
        checked += 1
    record_acceptance(5, "metric identities", ok, f"diversity = answer - expression and expression <= answer on {checked} reports")
    assert ok


def _cached_runs():
    cache = ex.default_cache_dir()
    return [json.loads(p.read_text()) for p in sorted(cache.glob("desk-*.json"))] if cache.exists() else []


def test_criterion_6_desk_training():
    run = ex.run_desk(seed=0, ablate=())
    minutes = (run["train_seconds"] + run["eval_seconds"]) / 60
    ok = run["answer_acc"] >= 0.90 and minutes <= 30
    record_acceptance(
        6, "desk training", ok,
        f"CN top-1 answer acc {run['answer_acc']:.3f} on {run['n_test']} held-out (>= 0.90), "
        f"expression acc {run['expression_acc']:.3f}, {run['epochs']} epochs, {minutes:.1f} CPU min (<= 30)",
    )
    assert ok


def test_criterion_7_ablation_direction():
    rows = ex.table(ex.ABLATION_ROWS)
    by_name = {r["row"]: r for r in rows}
    full, neither = by_name["CN"]["answer_acc"], by_name["CN w/o MT+VIB"]["answer_acc"]
    ok = full >= neither
    print("\n" + ex.format_rows(rows))
    record_acceptance(
        7, "ablation direction", ok,
        "; ".join(f"{r['row']} {100 * r['answer_acc']:.2f}" for r in rows) + f" (full >= w/o MT+VIB: {full:.4f} vs {neither:.4f})",
    )
    assert ok


def test_criterion_8_diversity():
    rows = ex.table(ex.DIVERSITY_ROWS)
    by_name = {r["row"]: r for r in rows}
    on, off = by_name["SDL enabled"]["diversity"], by_name["SDL disabled"]["diversity"]
    ok = on >= off
    print("\n" + ex.format_rows(rows))
    record_acceptance(
        8, "diversity", ok,
        f"SDL enabled {100 * on:.2f} vs disabled {100 * off:.2f} "
        f"(per seed {['%.3f' % d for d in by_name['SDL enabled']['per_seed_diversity']]} vs "
        f"{['%.3f' % d for d in by_name['SDL disabled']['per_seed_diversity']]})",
    )
    assert ok


def test_criterion_9_determinism(tmp_path):
    torch.set_num_threads(1)
    problems = generate_synthetic(200, 13)
    cfg = preset("tiny", epochs=2, dropout=0.3, hidden_dim=16, embedding_dim=16)
    train(problems[:160], problems[160:], cfg, tmp_path / "a")
    train(problems[:160], problems[160:], cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = a == b and len(a) > 0
    record_acceptance(9, "determinism", ok, f"metrics streams byte-identical ({len(a)} bytes, 2 epochs, dropout and all losses on)")
    assert ok
