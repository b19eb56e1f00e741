"""Training objectives: VIB bound, mutual-learning SKL, self-distillation."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .decoder import BatchTrace
from .vib import kl_to_standard_normal

DEFAULT_ALPHA = 0.005
DEFAULT_LAMBDA = 1e-3


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class LossFlags:
    vib: bool = True
    mt: bool = True
    sdl: bool = True

    @classmethod
    def from_ablations(cls, ablate) -> "LossFlags":
        ablate = set(ablate or ())
        unknown = ablate - {"vib", "mt", "sdl"}
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")
        return cls(vib="vib" not in ablate, mt="mt" not in ablate, sdl="sdl" not in ablate)


@dataclass
class LossBreakdown:
    """Loss components for one network on one batch (scalars, batch-averaged)."""

    nll: torch.Tensor
    kl: torch.Tensor
    skl: torch.Tensor
    sdl: torch.Tensor
    total: torch.Tensor
    lam: float
    alpha: float

    def to_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def vib_loss(nll: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, lam: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(lam * mean KL, mean NLL)`` for per-problem ``nll`` and posteriors."""
    return lam * kl_to_standard_normal(mu, sigma).mean(), nll.mean()


def _kl_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    # masked entries are -inf in both; they contribute 0
    p = log_p.exp()
    diff = torch.where(torch.isfinite(log_p), log_p - log_q, torch.zeros_like(log_p))
    return (p * diff).sum(-1)


def symmetric_kl(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Row-wise 0.5 * (KL(P||Q) + KL(Q||P)) for log-distributions."""
    return 0.5 * (_kl_rows(log_p, log_q) + _kl_rows(log_q, log_p))


def skl_mutual_loss(trace_self: BatchTrace, trace_partner: BatchTrace) -> torch.Tensor:
    """Step-aligned symmetrized KL to a frozen partner, summed over steps, batch-averaged."""
    if (
        trace_self.log_probs.shape != trace_partner.log_probs.shape
        or not torch.equal(trace_self.targets, trace_partner.targets)
        or not torch.equal(trace_self.problem, trace_partner.problem)
    ):
        raise AlignmentError("traces are not step-aligned on the same targets")
    per_step = symmetric_kl(trace_self.log_probs, trace_partner.log_probs.detach())
    return trace_self.per_problem_sum(per_step).mean()


def self_distillation_loss(y_mean: torch.Tensor, initial_state: torch.Tensor) -> torch.Tensor:
    """Symmetrized KL between N(y_mean, I) and N(initial_state, I): 0.5 * ||diff||^2, batch-averaged."""
    if y_mean.shape != initial_state.shape:
        raise ValueError(f"shape mismatch {tuple(y_mean.shape)} vs {tuple(initial_state.shape)}")
    return 0.5 * ((y_mean - initial_state) ** 2).sum(-1).mean()


def total_loss(
    trace: BatchTrace,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    initial_state: torch.Tensor,
    partner: BatchTrace | None,
    flags: LossFlags = LossFlags(),
    lam: float = DEFAULT_LAMBDA,
    alpha: float = DEFAULT_ALPHA,
) -> LossBreakdown:
    """Combine components; disabled ones are exactly zero and skipped."""
    zero = trace.log_probs.new_zeros(())
    nll_per_problem = trace.nll()
    if flags.vib:
        kl = kl_to_standard_normal(mu, sigma).mean()
    else:
        kl = zero
    nll = nll_per_problem.mean()
    skl = skl_mutual_loss(trace, partner) if flags.mt and partner is not None else zero
    sdl = self_distillation_loss(trace.hidden_mean(), initial_state) if flags.sdl else zero
    total = nll
    if flags.vib:
        total = total + lam * kl
    if flags.sdl:
        total = total + sdl
    if flags.mt and partner is not None:
        total = total + alpha * skl
    return LossBreakdown(nll, kl, skl, sdl, total, lam, alpha)
