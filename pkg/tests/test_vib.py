import math

import numpy as np
import pytest
import torch

from esib.gradcheck import finite_difference_check
from esib.verify import kl_monte_carlo
from esib.vib import Compressor, DomainError, derive_seed, kl_to_standard_normal, noise_batch, noise_for, sample_z


def test_zero_weights_give_unit_sigma():
    comp = Compressor(6, 3)
    for p in comp.parameters():
        torch.nn.init.zeros_(p)
    mu, sigma = comp.compress(torch.randn(2, 6))
    assert torch.equal(mu, torch.zeros(2, 3)) and torch.equal(sigma, torch.ones(2, 3))


def test_shapes_and_determinism():
    comp = Compressor(6, 3)
    v = torch.randn(4, 6)
    a, b = comp(v, None), comp(v, None)
    assert a.mu.shape == a.sigma.shape == (4, 3)
    assert a.initial_state.shape == (4, 6)
    assert torch.equal(a.initial_state, b.initial_state)
    assert torch.equal(a.z, a.mu)
    assert (a.sigma > 0).all()


def test_non_finite_input_rejected():
    with pytest.raises(FloatingPointError):
        Compressor(2, 2).compress(torch.tensor([[float("nan"), 0.0]]))


def test_sample_z_cases():
    mu, sigma = torch.tensor([1.0, -2.0]), torch.tensor([0.5, 2.0])
    assert torch.equal(sample_z(mu, sigma, torch.zeros(2)), mu)
    e = torch.tensor([0.3, -1.2])
    assert torch.equal(sample_z(torch.zeros(2), torch.ones(2), e), e)
    assert torch.equal(sample_z(mu, sigma, e), mu + e * sigma)


def test_sample_mean_within_three_standard_errors():
    mu = torch.tensor([0.7, -1.3, 2.0], dtype=torch.float64)
    sigma = torch.tensor([0.5, 1.0, 3.0], dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    z = sample_z(mu, sigma, torch.randn(1_000_000, 3, generator=g, dtype=torch.float64))
    assert ((z.mean(0) - mu).abs() <= 3 * sigma / math.sqrt(1_000_000)).all()


def test_kl_closed_forms():
    assert kl_to_standard_normal(np.zeros(4), np.ones(4)) == 0.0
    assert kl_to_standard_normal([1.0], [1.0]) == pytest.approx(0.5)
    t = kl_to_standard_normal(torch.tensor([[1.0], [0.0]]), torch.tensor([[1.0], [1.0]]))
    assert t.tolist() == [0.5, 0.0]
    with pytest.raises(DomainError):
        kl_to_standard_normal([0.0], [0.0])
    with pytest.raises(DomainError):
        kl_to_standard_normal(torch.zeros(1), -torch.ones(1))


def test_kl_nonnegative_random():
    rng = np.random.default_rng(1)
    vals = kl_to_standard_normal(rng.normal(size=(1000, 5)), np.exp(rng.normal(size=(1000, 5))))
    assert (vals >= 0).all()


def test_kl_monte_carlo_exceedances_are_binomially_plausible():
    # at 3 standard errors, 0.27% of correct comparisons exceed by chance
    rng = np.random.default_rng(123)
    z = []
    for _ in range(200):
        mu, sigma = rng.normal(size=3), np.exp(rng.normal(0, 0.5, size=3))
        est, se = kl_monte_carlo(mu, sigma, 20_000, rng)
        z.append((est - kl_to_standard_normal(mu, sigma)) / se)
    z = np.array(z)
    assert (np.abs(z) > 3).sum() <= 3
    assert abs(z.mean()) < 0.3 and 0.75 < z.std() < 1.25


def test_compressor_gradients_match_finite_differences():
    comp = Compressor(5, 3).double()
    v = torch.randn(2, 5, dtype=torch.float64)
    eps = torch.randn(2, 3, dtype=torch.float64)
    mu_sq = finite_difference_check(lambda: (comp.compress(v)[0] ** 2).sum(), list(comp.parameters()))
    assert mu_sq.passed and mu_sq.max_rel_error <= 1e-3
    full = finite_difference_check(
        lambda: comp(v, eps).initial_state.sum() + kl_to_standard_normal(*comp.compress(v)).sum(),
        list(comp.parameters()),
    )
    assert full.passed, full.summary()


def test_noise_is_counter_based():
    a = noise_for(5, "p1", 3, 4)
    assert np.array_equal(a, noise_for(5, "p1", 3, 4))
    assert not np.array_equal(a, noise_for(5, "p1", 4, 4))
    assert not np.array_equal(a, noise_for(6, "p1", 3, 4))
    batch = noise_batch(5, ["p2", "p1"], 3, 4, torch.float64)
    assert np.array_equal(batch[1].numpy(), a)
    assert derive_seed(1, "SN") != derive_seed(1, "CN")
