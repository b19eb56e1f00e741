"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    tolerance: float = 1e-3
    offenders: list[tuple[int, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.offenders

    def summary(self) -> str:
        status = "ok" if self.passed else f"{len(self.offenders)} offending coordinate(s)"
        return f"{self.n_checked} coords, max rel err {self.max_rel_error:.2e} ({status})"


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from dominating.  ``max_coords`` samples that many
    coordinates per tensor (all when None).  Params should be float64.
    """
    params = [p for p in params if p.numel() > 0]
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, analytic)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + step
                up = loss_fn().item()
                flat[c] = orig - step
                down = loss_fn().item()
                flat[c] = orig
                numeric = (up - down) / (2 * step)
                a = g.view(-1)[c].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                report.n_checked += 1
                report.max_rel_error = max(report.max_rel_error, rel)
                if rel > tolerance:
                    idx = tuple(int(i) for i in torch.unravel_index(torch.tensor(c), p.shape))
                    report.offenders.append((pi, idx, a, numeric, rel))
    return report
