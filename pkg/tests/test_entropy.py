import math

import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.stats import norm

from ipcodec.entropy import (LIKELIHOOD_FLOOR, SCALE_TABLE, FactorizedPrior, build_pmf_tables, clamp_to_support,
                             factorized_tables, gaussian_table, likelihood_factorized, likelihood_gaussian,
                             quantize_pmf, snap_scale_index)
from ipcodec.rangecoder import TOTAL


def test_logistic_init_p0():
    prior = FactorizedPrior(2, init="logistic")
    p = likelihood_factorized(torch.zeros(1, 2, 1, 1), prior)
    expected = 1 / (1 + math.exp(-0.5)) - 1 / (1 + math.exp(0.5))
    assert abs(expected - 0.244919) < 1e-6
    assert torch.allclose(p, torch.full_like(p, expected), atol=1e-7)


def test_factorized_symmetric_at_init():
    prior = FactorizedPrior(3, init="logistic")
    k = torch.arange(1, 6, dtype=torch.float32).view(1, 1, 1, 5).expand(1, 3, 1, 5)
    assert torch.allclose(likelihood_factorized(k, prior), likelihood_factorized(-k, prior), atol=1e-7)


def test_factorized_mass_over_support_at_most_one():
    from ipcodec.entropy import _interval_mass
    prior = FactorizedPrior(2, seed=3).double()
    for ch, t in enumerate(factorized_tables(prior)):
        k = torch.arange(t.lower, t.upper + 1, dtype=torch.float64)
        v = torch.zeros(2, 1, len(k), dtype=torch.float64)
        v[ch, 0] = k
        with torch.no_grad():
            raw = _interval_mass(prior.logits_cumulative(v - 0.5), prior.logits_cumulative(v + 0.5))[ch, 0]
        # telescoping CDF differences
        assert 1 - 1e-9 < raw.sum().item() <= 1 + 1e-12
        # the likelihood floor can only add floor-sized mass per symbol
        floored = torch.clamp(raw, min=LIKELIHOOD_FLOOR).sum().item()
        assert floored <= 1 + len(k) * LIKELIHOOD_FLOOR


def test_cdf_monotone_over_random_parameterizations():
    g = torch.Generator().manual_seed(0)
    v = torch.linspace(-30, 30, 401).view(1, 1, -1)
    for i in range(1000):
        prior = FactorizedPrior(1, seed=i)
        with torch.no_grad():
            for p in prior.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 2)
            c = prior.cdf(v)
        assert torch.all(c[..., 1:] >= c[..., :-1])


def test_gaussian_examples():
    p = likelihood_gaussian(torch.tensor([0.0]), torch.tensor([0.5]))
    assert abs(p.item() - (2 * norm.cdf(1) - 1)) < 1e-6
    k = torch.arange(1.0, 8.0, dtype=torch.float64)
    s = torch.full_like(k, 1.7)
    assert torch.equal(likelihood_gaussian(k, s), likelihood_gaussian(-k, s))


def test_gaussian_matches_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = float(rng.integers(-6, 7))
        s = float(rng.uniform(0.11, 8))
        oracle, _ = integrate.quad(lambda t: math.exp(-t * t / (2 * s * s)) / (s * math.sqrt(2 * math.pi)),
                                   y - 0.5, y + 0.5, epsabs=1e-14, epsrel=1e-12)
        got = likelihood_gaussian(torch.tensor([y], dtype=torch.float64), torch.tensor([s], dtype=torch.float64))
        assert abs(got.item() - max(oracle, LIKELIHOOD_FLOOR)) < 1e-8


def test_likelihood_floor():
    p = likelihood_gaussian(torch.tensor([60.0]), torch.tensor([0.11]))
    assert p.item() == pytest.approx(LIKELIHOOD_FLOOR)


def test_scale_table():
    assert len(SCALE_TABLE) == 64
    assert SCALE_TABLE[0] == pytest.approx(0.11) and SCALE_TABLE[-1] == pytest.approx(64)
    assert np.all(np.diff(SCALE_TABLE) > 0)
    assert snap_scale_index(SCALE_TABLE).tolist() == list(range(64))
    assert snap_scale_index([0.01, 1000.0]).tolist() == [0, 63]


def test_tables_strictly_increasing_and_exact_total():
    tables = build_pmf_tables(FactorizedPrior(4, seed=0))
    for t in tables.factorized + tables.gaussian:
        assert t.cdf[0] == 0 and t.cdf[-1] == TOTAL
        assert all(b > a for a, b in zip(t.cdf, t.cdf[1:]))
        assert sum(t.freq(s) for s in range(t.lower, t.upper + 1)) == TOTAL


def test_gaussian_table_tail_mass():
    for s in (0.11, 1.0, 64.0):
        t = gaussian_table(s)
        tail = 2 * norm.sf((t.upper + 0.5) / s)
        assert tail < 1e-9


def test_code_length_close_to_entropy_sigma_one():
    t = gaussian_table(1.0)
    k = np.arange(t.lower, t.upper + 1)
    exact = norm.cdf((k + 0.5)) - norm.cdf((k - 0.5))
    entropy = -np.sum(exact * np.log2(exact))
    q = np.array(t.probabilities())
    expected_len = -np.sum(exact * np.log2(q))
    assert abs(expected_len - entropy) / entropy < 1e-3


def test_near_delta_prior_table():
    t = quantize_pmf(np.array([1e-12, 1 - 2e-12, 1e-12]), -1)
    assert t.size <= 3
    assert t.freq(0) >= TOTAL - 2


def test_delta_factorized_prior_has_tiny_support():
    prior = FactorizedPrior(1, init_scale=1e-3)
    with torch.no_grad():
        prior.matrices[0].fill_(20.0)  # very steep CDF
    (t,) = factorized_tables(prior)
    assert t.size <= 3
    assert max(t.freq(s) for s in range(t.lower, t.upper + 1)) >= TOTAL - 2


def test_quantize_pmf_every_freq_positive():
    pmf = np.full(5000, 1e-9)
    pmf[2500] = 1.0
    t = quantize_pmf(pmf, -2500)
    assert min(t.freq(s) for s in range(t.lower, t.upper + 1)) >= 1


def test_clamp_examples():
    v, n = clamp_to_support(np.array([-2, 0, 3]), -5, 5)
    assert v.tolist() == [-2, 0, 3] and n == 0
    v, n = clamp_to_support(np.array([8]), -5, 5)
    assert v.tolist() == [5] and n == 1
    v, n = clamp_to_support(np.array([-9, 9, 1]), np.array([-1, -1, -1]), np.array([1, 1, 1]))
    assert v.tolist() == [-1, 1, 1] and n == 2


def test_gradients_of_neg_log_likelihood(f64):
    from ipcodec.gradcheck import _rate_factorized_case, _rate_gaussian_case, check_case
    assert check_case(_rate_gaussian_case, 10) < 1e-4
    assert check_case(_rate_factorized_case, 10) < 1e-4
