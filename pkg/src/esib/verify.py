"""Oracle suites: KL Monte Carlo, gradient checks, tree round-trips, beam vs exhaustive.

Each suite returns a :class:`SuiteResult`; ``run_all`` backs the
``verify`` CLI command and the acceptance tests.
"""

from __future__ import annotations

import itertools
import math
import operator
import random
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .corpus import Problem, Template, Vocabulary, generate_synthetic, templates_by_family
from .encoder import EncodedBatch
from .decoder import beam_search, greedy_decode, greedy_decode_batch
from .expr import (
    OPERATORS,
    ExprError,
    ExprToken,
    ExprTree,
    QuantityMap,
    evaluate,
    from_preorder,
    to_preorder,
)
from .gradcheck import finite_difference_check
from .network import ESIBNet, ModelConfig, make_batch
from .objectives import LossFlags, self_distillation_loss, skl_mutual_loss, total_loss, vib_loss
from .trainer import preset, train


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_rel_error: float | None = None
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        err = "" if self.max_rel_error is None else f" max_rel_err={self.max_rel_error:.3e}"
        return f"[{status}] {self.name}{err} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs) -> SuiteResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --------------------------------------------------------------------------
# KL Monte Carlo


def kl_monte_carlo(mu: np.ndarray, sigma: np.ndarray, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Estimate KL(N(mu, sigma^2) || N(0, I)) as the mean of log q(z) - log p(z), z ~ q.

    Returns (estimate, standard error).
    """
    eps = rng.standard_normal((n, mu.shape[0]))
    z = mu + eps * sigma
    log_ratio = (-0.5 * eps**2 - np.log(sigma)).sum(1) - (-0.5 * z**2).sum(1)
    return float(log_ratio.mean()), float(log_ratio.std(ddof=1) / math.sqrt(n))


@_timed
def kl_suite(n_draws: int = 50, n_samples: int = 1_000_000, dim: int = 4, seed: int = 0) -> SuiteResult:
    from .vib import kl_to_standard_normal

    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in range(n_draws):
        mu = rng.normal(0.0, 1.0, dim)
        sigma = np.exp(rng.normal(0.0, 0.5, dim))
        exact = float(kl_to_standard_normal(mu, sigma))
        est, se = kl_monte_carlo(mu, sigma, n_samples, rng)
        z = abs(exact - est) / se
        worst = max(worst, z)
        failures += z > 3.0
    zero = float(kl_to_standard_normal(np.zeros(dim), np.ones(dim)))
    return SuiteResult(
        "kl_monte_carlo", failures == 0 and zero == 0.0, None,
        details={"worst_z": worst, "failures": failures, "kl_at_prior": zero},
    )


# --------------------------------------------------------------------------
# gradient checks


class _ScaleGrad(torch.autograd.Function):
    """Identity forward with a deliberately wrong backward (harness self-test)."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def tiny_setup(seed: int = 0, n_problems: int = 2):
    problems = generate_synthetic(n_problems, seed, distractor_rate=0.0)
    vocab = Vocabulary.build(problems)
    cfg = ModelConfig(hidden_dim=8, embedding_dim=8, latent_dim=4, dropout=0.0)
    nets = []
    for s in (seed + 11, seed + 12):
        net = ESIBNet(vocab, cfg).double()
        net.reset_parameters(s)
        net.eval()
        nets.append(net)
    batch = make_batch(problems, vocab)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(n_problems, cfg.latent_dim, generator=gen, dtype=torch.float64)
    return problems, vocab, nets[0], nets[1], batch, eps


def gradient_losses(cn: ESIBNet, sn: ESIBNet, batch, eps, lam: float = 0.5, alpha: float = 0.7) -> dict[str, Callable[[], torch.Tensor]]:
    """Scalar closures for each objective of ``cn`` (partner ``sn`` frozen).

    Non-default weights make every term visible in the combined gradient.
    """
    with torch.no_grad():
        partner = sn(batch, eps).trace

    def vib():
        out = cn(batch, eps)
        kl_term, nll = vib_loss(out.trace.nll(), out.latent.mu, out.latent.sigma, lam)
        return kl_term + nll

    def skl():
        return skl_mutual_loss(cn(batch, eps).trace, partner)

    def sdl():
        out = cn(batch, eps)
        return self_distillation_loss(out.trace.hidden_mean(), out.latent.initial_state)

    def full():
        out = cn(batch, eps)
        return total_loss(
            out.trace, out.latent.mu, out.latent.sigma, out.latent.initial_state, partner,
            LossFlags(), lam, alpha,
        ).total

    return {"V_IB": vib, "L_SKL": skl, "V_SDL": sdl, "L2": full}


@_timed
def gradient_suite(
    tolerance: float = 1e-3, sample_per_tensor: int = 8, inject_bug: bool = False, seed: int = 0,
    exhaustive_l2: bool = True,
) -> SuiteResult:
    """Analytic vs central-difference gradients on a d=8, s=4 model and a 2-problem batch.

    The combined loss is checked on every coordinate (unless
    ``exhaustive_l2`` is False); the component losses on
    ``sample_per_tensor`` random coordinates of each parameter tensor.
    """
    _, _, cn, sn, batch, eps = tiny_setup(seed)
    handle = None
    if inject_bug:
        handle = cn.decoder.to_hidden.register_forward_hook(lambda m, i, o: _ScaleGrad.apply(o, 1.5))
    try:
        params = list(cn.parameters())
        details = {}
        worst = 0.0
        ok = True
        gen = torch.Generator().manual_seed(seed)
        for name, fn in gradient_losses(cn, sn, batch, eps).items():
            coords = None if name == "L2" and exhaustive_l2 else sample_per_tensor
            rep = finite_difference_check(fn, params, tolerance, max_coords=coords, generator=gen)
            details[name] = {"max_rel_error": rep.max_rel_error, "checked": rep.n_checked, "offenders": len(rep.offenders)}
            worst = max(worst, rep.max_rel_error)
            ok &= rep.passed
    finally:
        if handle is not None:
            handle.remove()
    return SuiteResult("gradients", ok, worst, details=details)


# --------------------------------------------------------------------------
# trees


def random_tree(rng: random.Random, max_depth: int, n_slots: int, constants=(1.0, 3.14), p_leaf: float = 0.3) -> ExprTree:
    if max_depth == 0 or rng.random() < p_leaf:
        if n_slots and rng.random() < 0.8:
            return ExprTree(ExprToken.slot(rng.randint(1, n_slots)))
        return ExprTree(ExprToken.const(rng.choice(constants)))
    return ExprTree(
        ExprToken.op(rng.choice(OPERATORS)),
        random_tree(rng, max_depth - 1, n_slots, constants, p_leaf),
        random_tree(rng, max_depth - 1, n_slots, constants, p_leaf),
    )


_ORACLE_OPS = {"+": operator.add, "−": operator.sub, "×": operator.mul, "÷": operator.truediv, "^": operator.pow}


def stack_machine_eval(tokens, values) -> float:
    """Evaluate a pre-order sequence by scanning it right to left with an operand stack.

    Shares no code with the recursive evaluator.
    """
    stack: list[float] = []
    for tok in reversed(list(tokens)):
        if tok.kind == "operator":
            a = stack.pop()
            b = stack.pop()
            stack.append(_ORACLE_OPS[tok.symbol](a, b))
        elif tok.kind == "slot":
            stack.append(values[tok.symbol - 1])
        else:
            stack.append(tok.symbol)
    if len(stack) != 1:
        raise ExprError("malformed sequence")
    return stack[0]


@_timed
def tree_suite(n: int = 1000, seed: int = 0) -> SuiteResult:
    rng = random.Random(seed)
    roundtrip_fail = 0
    eval_checked = 0
    worst = 0.0
    for _ in range(n):
        n_slots = rng.randint(1, 6)
        tree = random_tree(rng, rng.randint(0, 6), n_slots)
        toks = to_preorder(tree)
        if from_preorder(toks) != tree:
            roundtrip_fail += 1
        ops = sum(t.kind == "operator" for t in toks)
        if len(toks) != 2 * ops + 1:
            roundtrip_fail += 1
    eval_fail = 0
    while eval_checked < n:
        n_slots = rng.randint(1, 6)
        tree = random_tree(rng, rng.randint(0, 5), n_slots)
        values = [rng.uniform(-50, 50) for _ in range(n_slots)]
        try:
            got = evaluate(tree, QuantityMap(values))
        except ExprError:
            continue
        want = stack_machine_eval(to_preorder(tree), values)
        rel = abs(got - want) / max(abs(want), 1e-300)
        worst = max(worst, rel if want != 0 else abs(got))
        eval_fail += rel > 1e-9
        eval_checked += 1

    decoded_fail, n_decoded = _untrained_decodes(n, seed)
    ok = roundtrip_fail == 0 and eval_fail == 0 and decoded_fail == 0
    return SuiteResult(
        "trees", ok, worst,
        details={"roundtrip_failures": roundtrip_fail, "eval_failures": eval_fail,
                 "decoded": n_decoded, "unparseable_decodes": decoded_fail},
    )


def _untrained_decodes(n: int, seed: int) -> tuple[int, int]:
    problems = generate_synthetic(n, seed + 1)
    vocab = Vocabulary.build(problems)
    net = ESIBNet(vocab, ModelConfig(hidden_dim=16, embedding_dim=16, latent_dim=4, dropout=0.0))
    net.reset_parameters(seed)
    net.eval()
    failures = 0
    with torch.no_grad():
        for i in range(0, n, 250):
            part = problems[i : i + 250]
            batch = make_batch(part, vocab, with_targets=False)
            enc = net.encode(batch)
            zbar = net.compressor(enc.pooled, None).initial_state
            for toks in greedy_decode_batch(net.decoder, enc, zbar, 50):
                try:
                    from_preorder([net.output_token(t) for t in toks])
                except ExprError:
                    failures += 1
    return failures, n


# --------------------------------------------------------------------------
# beam search vs exhaustive enumeration


def enumerate_trees(n_ops: int, leaf_ids: list[int], max_depth: int) -> list[tuple[int, ...]]:
    """All pre-order token sequences of trees with depth <= ``max_depth``."""
    by_depth: list[list[tuple[int, ...]]] = [[(t,) for t in leaf_ids]]
    for _ in range(max_depth):
        prev = by_depth[-1]
        level = [(t,) for t in leaf_ids]
        for op in range(n_ops):
            for left, right in itertools.product(prev, prev):
                level.append((op,) + left + right)
        by_depth.append(level)
    return by_depth[-1]


@torch.no_grad()
def exhaustive_scores(net: ESIBNet, problem: Problem, max_depth: int, chunk: int = 2048) -> list[tuple[float, tuple[int, ...]]]:
    """Teacher-forced log-probability of every tree up to ``max_depth``, best first."""
    vocab = net.vocab
    n_slots = len(problem.qmap)
    leaf_ids = list(range(vocab.n_ops, vocab.slot_offset + n_slots))
    trees = enumerate_trees(vocab.n_ops, leaf_ids, max_depth)
    batch = make_batch([problem], vocab, with_targets=False)
    enc = net.encode(batch)
    zbar = net.compressor(enc.pooled, None).initial_state
    scored = []
    for i in range(0, len(trees), chunk):
        part = trees[i : i + chunk]
        k = len(part)
        rep = EncodedBatch(
            enc.states.expand(k, -1, -1), enc.mask.expand(k, -1), enc.pooled.expand(k, -1),
            enc.quantities.expand(k, -1, -1), enc.n_slots.expand(k), enc.slot_positions * k,
        )
        trace = net.decoder.teacher_forced(rep, zbar.expand(k, -1), part)
        scores = (-trace.nll()).tolist()
        scored.extend(zip(scores, part))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored


def toy_beam_model(seed: int = 0) -> tuple[ESIBNet, list[Problem]]:
    """A small float64 model trained to convergence on <=3-slot, depth<=2 problems.

    Auxiliary losses are off: the fixture only exercises search.
    """
    names = ("car_speed", "distance", "clock_distance", "cost", "change", "circumference")
    templates: list[Template] = [t for t in templates_by_family(None) if t.name in names]
    problems = [
        p for p in generate_synthetic(1500, seed + 100, templates, distractor_rate=0.0)
        if len(p.qmap) <= 3 and p.target.depth() <= 2
    ]
    cfg = preset(
        "tiny", epochs=12, lr=3e-3, hidden_dim=32, embedding_dim=32, latent_dim=4, seed=seed,
        ablate=("mt", "sdl", "vib"),
    )
    result = train(problems[:-100], [], cfg)
    net = result.nets.cn.double()
    net.eval()
    return net, problems[-100:]


@_timed
def beam_suite(
    n_problems: int = 10, n_greedy: int = 100, max_depth: int = 2, seed: int = 0, tie_tol: float = 1e-9,
    model: tuple[ESIBNet, list[Problem]] | None = None,
) -> SuiteResult:
    """Beam(K) sets against exhaustive top-K for K in {1, 3, 5}, and beam=1 against greedy.

    Also confirms each beam hypothesis carries its exact teacher-forced score,
    which separates pruning misses from scoring errors.
    """
    net, held_out = model or toy_beam_model(seed)
    mismatches = []
    agree = {1: 0, 3: 0, 5: 0}
    score_err = 0.0
    with torch.no_grad():
        for p in held_out[:n_problems]:
            ranked = exhaustive_scores(net, p, max_depth)
            exact = {toks: s for s, toks in ranked}
            batch = make_batch([p], net.vocab, with_targets=False)
            enc = net.encode(batch)
            zbar = net.compressor(enc.pooled, None).initial_state[0]
            for k in agree:
                res = beam_search(net.decoder, enc.select(0), zbar, k, max_len=2 ** (max_depth + 1) - 1, max_depth=max_depth)
                got = {h.tokens for h in res.hypotheses}
                for h in res.hypotheses:
                    score_err = max(score_err, abs(h.score - exact[h.tokens]) / max(1.0, abs(h.score)))
                want = {toks for _, toks in ranked[:k]}
                # hypotheses tied with the k-th best may legitimately swap in
                kth = ranked[k - 1][0]
                tied = {toks for s, toks in ranked if abs(s - kth) <= tie_tol}
                if got - want <= tied and len(got) == k:
                    agree[k] += 1
                else:
                    mismatches.append({"id": p.id, "k": k, "beam": sorted(got), "exhaustive": sorted(want)})
        greedy_mismatch = 0
        for p in held_out[:n_greedy]:
            batch = make_batch([p], net.vocab, with_targets=False)
            enc = net.encode(batch)
            zbar = net.compressor(enc.pooled, None).initial_state[0]
            g = greedy_decode(net.decoder, enc.select(0), zbar, 50)
            b = beam_search(net.decoder, enc.select(0), zbar, 1, 50)
            greedy_mismatch += b.hypotheses[0].tokens != g.tokens
    n = min(n_problems, len(held_out))
    ok = not mismatches and greedy_mismatch == 0 and score_err <= 1e-9
    return SuiteResult(
        "beam_vs_exhaustive", ok, score_err,
        details={"problems": n, "agreement": {f"K={k}": f"{v}/{n}" for k, v in agree.items()},
                 "mismatches": mismatches, "greedy_checked": min(n_greedy, len(held_out)),
                 "greedy_mismatches": greedy_mismatch},
    )


def run_all(quick: bool = False) -> list[SuiteResult]:
    return [
        kl_suite(n_samples=100_000 if quick else 1_000_000),
        gradient_suite(sample_per_tensor=4 if quick else 8, exhaustive_l2=not quick),
        tree_suite(),
        beam_suite(),
    ]
