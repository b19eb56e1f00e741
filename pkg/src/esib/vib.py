"""Variational information bottleneck between the encoder and the decoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

SIGMA_FLOOR = 1e-6


class DomainError(ValueError):
    pass


@dataclass
class LatentBottleneck:
    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor
    initial_state: torch.Tensor


class Compressor(nn.Module):
    """``v -> (mu, sigma)`` and ``z -> z_bar`` (the decoder's root goal)."""

    def __init__(self, hidden_dim: int, latent_dim: int):
        super().__init__()
        self.mean = nn.Linear(hidden_dim, latent_dim)
        self.log_scale = nn.Linear(hidden_dim, latent_dim)
        self.initial = nn.Linear(latent_dim, hidden_dim)

    def compress(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not torch.isfinite(v).all():
            raise FloatingPointError("non-finite latent passed to compressor")
        mu = self.mean(v)
        sigma = torch.exp(self.log_scale(v)).clamp_min(SIGMA_FLOOR)
        return mu, sigma

    def project_initial_state(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.initial(z))

    def forward(self, v: torch.Tensor, eps: torch.Tensor | None) -> LatentBottleneck:
        """``eps=None`` disables sampling (``z = mu``)."""
        mu, sigma = self.compress(v)
        z = mu if eps is None else sample_z(mu, sigma, eps)
        return LatentBottleneck(mu, sigma, z, self.project_initial_state(z))


def sample_z(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + eps * sigma


def kl_to_standard_normal(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis.

    Works on tensors (differentiable) and on numpy arrays / sequences.
    """
    if isinstance(mu, torch.Tensor):
        if (sigma <= 0).any():
            raise DomainError("sigma must be strictly positive")
        var = sigma * sigma
        return 0.5 * (mu * mu + var - 1.0 - torch.log(var)).sum(-1)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    var = sigma * sigma
    return 0.5 * np.sum(mu * mu + var - 1.0 - np.log(var), axis=-1)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from labelled parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def noise_for(run_seed: int, problem_id: str, epoch: int, dim: int) -> np.ndarray:
    """Counter-based standard-normal draw keyed by (seed, problem, epoch)."""
    key = derive_seed(run_seed, problem_id, epoch)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(dim)


def noise_batch(run_seed: int, problem_ids, epoch: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(
        np.stack([noise_for(run_seed, pid, epoch, dim) for pid in problem_ids]), dtype=dtype
    )
