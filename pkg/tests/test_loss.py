import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidanomaly.layers import backward
from vidanomaly.loss import LossConfig, LossError, kl_gaussian, mse_loss, vae_loss

from fdcheck import check


def monte_carlo_kl(mu, logvar, n=1_000_000, seed=0):
    """KL(q || N(0, I)) estimated as E_q[log q(z) - log p(z)]."""
    rng = np.random.default_rng(seed)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + logvar + math.log(2 * math.pi))
    log_p = -0.5 * (z ** 2 + math.log(2 * math.pi))
    return float((log_q - log_p).sum(axis=1).mean())


def test_mse_examples():
    x = torch.rand(2, 10, 4, 4, dtype=torch.float64)
    assert mse_loss(x, x) == 0
    assert mse_loss(torch.ones(3, 4), torch.zeros(3, 4)) == 1
    assert mse_loss([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(0.25)
    with pytest.raises(LossError):
        mse_loss(torch.zeros(2), torch.zeros(3))


def test_mse_sum_reduction_is_per_sample():
    x = torch.ones(4, 10, 2, 2)
    assert mse_loss(x, torch.zeros_like(x), "sum").item() == 40.0


def test_kl_examples():
    assert kl_gaussian([0.0, 0.0], [0.0, 0.0]).item() == 0.0
    assert kl_gaussian([1.0, 0.0], [0.0, 0.0]).item() == pytest.approx(0.5)
    expected = -0.5 * (1 + math.log(4) - 4)
    assert kl_gaussian([0.0], [math.log(4)]).item() == pytest.approx(expected)
    assert expected == pytest.approx(0.8069, abs=1e-4)
    assert monte_carlo_kl(np.zeros(1), np.array([math.log(4)])) == pytest.approx(expected, rel=0.02)


def test_kl_rejects_non_finite():
    with pytest.raises(LossError):
        kl_gaussian([float("nan")], [0.0])


def test_kl_batch_average():
    mu = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert kl_gaussian(mu, torch.zeros(2, 2)).item() == pytest.approx(0.25)


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_monte_carlo(seed):
    rng = np.random.default_rng(100 + seed)
    mu = rng.normal(0, 1, 4)
    logvar = rng.normal(0, 0.7, 4)
    assert kl_gaussian(mu, logvar).item() == pytest.approx(monte_carlo_kl(mu, logvar, seed=seed),
                                                           rel=0.02)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_kl_non_negative(pairs):
    mu = [p[0] for p in pairs]
    logvar = [p[1] for p in pairs]
    kl = kl_gaussian(mu, logvar).item()
    assert kl >= 0
    if all(m == 0 for m in mu) and all(v == 0 for v in logvar):
        assert kl == 0
    elif any(abs(m) > 1e-3 or abs(v) > 1e-3 for m, v in pairs):
        assert kl > 0


def test_vae_loss_examples():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 10, 8, 8, generator=g)
    x_hat = torch.rand(2, 10, 8, 8, generator=g)
    mu = torch.randn(2, 32, generator=g)
    logvar = torch.randn(2, 32, generator=g) * 0.3
    assert torch.equal(vae_loss(x, x_hat, mu, logvar, beta=0.0), mse_loss(x, x_hat))
    assert vae_loss(x, x_hat, mu, logvar, 4.0) > vae_loss(x, x_hat, mu, logvar, 1.0)
    with pytest.raises(LossError):
        vae_loss(x, x_hat, mu, logvar, -1.0)


def test_vae_loss_is_linear_combination():
    # inputs chosen so that mse = 0.5 and KL = 0.25
    x = torch.tensor([1.0, 0.0], dtype=torch.float64)
    x_hat = torch.tensor([0.0, 1.0], dtype=torch.float64) * math.sqrt(0.5) + \
        torch.tensor([1.0 - math.sqrt(0.5), 0.0], dtype=torch.float64)
    mu = torch.tensor([math.sqrt(0.5), 0.0], dtype=torch.float64)
    logvar = torch.zeros(2, dtype=torch.float64)
    assert mse_loss(x, x_hat).item() == pytest.approx(0.5)
    assert kl_gaussian(mu, logvar).item() == pytest.approx(0.25)
    assert vae_loss(x, x_hat, mu, logvar, 1.0).item() == pytest.approx(0.75)


@settings(max_examples=30, deadline=None)
@given(b1=st.floats(0, 10), b2=st.floats(0, 10))
def test_vae_loss_monotone_in_beta(b1, b2):
    g = torch.Generator().manual_seed(1)
    args = (torch.rand(6, generator=g), torch.rand(6, generator=g), torch.randn(3, generator=g),
            torch.randn(3, generator=g))
    lo, hi = sorted((b1, b2))
    assert vae_loss(*args, lo) <= vae_loss(*args, hi)


def test_loss_config_validation():
    with pytest.raises(LossError):
        LossConfig("vae", beta=-1)
    with pytest.raises(LossError):
        LossConfig("hinge")
    with pytest.raises(LossError):
        LossConfig(reduction="max")


@pytest.mark.parametrize("reduction", ["mean_per_pixel", "sum"])
def test_loss_gradients_match_finite_differences(reduction):
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    tensors = {"x_hat": torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64),
               "mu": torch.randn(2, 4, generator=g, dtype=torch.float64),
               "logvar": torch.randn(2, 4, generator=g, dtype=torch.float64) * 0.5}

    def value():
        return vae_loss(x, tensors["x_hat"], tensors["mu"], tensors["logvar"], 2.0, reduction)

    leaves = {k: v.clone().requires_grad_(True) for k, v in tensors.items()}
    out = vae_loss(x, leaves["x_hat"], leaves["mu"], leaves["logvar"], 2.0, reduction)
    errors = check(value, tensors, backward(out, leaves))
    assert max(errors.values()) < 1e-3, errors

    def mse_value():
        return mse_loss(x, tensors["x_hat"], reduction)

    leaf = tensors["x_hat"].clone().requires_grad_(True)
    errors = check(mse_value, {"x_hat": tensors["x_hat"]},
                   backward(mse_loss(x, leaf, reduction), {"x_hat": leaf}))
    assert errors["x_hat"] < 1e-3
