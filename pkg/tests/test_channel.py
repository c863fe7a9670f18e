"""Turbulence model tests: closed-form shape parameters, density
normalization by quadrature, and sampler statistics with a KS check."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from fsolc.channel import (
    ChannelRealization,
    TurbulenceParams,
    alpha_beta_from_rytov,
    gg_pdf,
    rytov_variance,
    sample_channel,
    sample_gains,
)

MODERATE = TurbulenceParams(alpha=4.0, beta=1.9)


class TestAlphaBeta:
    def test_golden_value_at_unit_rytov(self):
        # frozen from a 30-digit evaluation of the two closed forms
        alpha, beta = alpha_beta_from_rytov(1.0)
        assert math.isclose(alpha, 4.3938590253921468, rel_tol=1e-12)
        assert math.isclose(beta, 2.563631979503695, rel_tol=1e-12)

    def test_turbulence_free_limit_diverges(self):
        alpha, beta = alpha_beta_from_rytov(1e-9)
        assert alpha > 1e8 and beta > 1e8

    def test_decreasing_into_the_focusing_regime_then_rising(self):
        # both parameters fall with turbulence strength up to their minima
        # (sigma2 ~ 0.75 for alpha, ~ 1.16 for beta) and rise again beyond;
        # sampled-grid check of the closed forms
        grid = np.linspace(0.05, 0.75, 40)
        alphas, betas = zip(*[alpha_beta_from_rytov(s) for s in grid])
        assert all(a1 > a2 for a1, a2 in zip(alphas, alphas[1:]))
        assert all(b1 > b2 for b1, b2 in zip(betas, betas[1:]))
        a_lo, a_mid, a_hi = (alpha_beta_from_rytov(s)[0] for s in (0.2, 0.75, 10.0))
        assert a_mid < a_lo and a_mid < a_hi

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            alpha_beta_from_rytov(0.0)

    def test_rytov_variance_formula(self):
        cn2, lam, z = 5e-14, 1.55e-6, 2000.0
        k = 2 * math.pi / lam
        assert math.isclose(rytov_variance(cn2, lam, z),
                            1.23 * cn2 * k ** (7 / 6) * z ** (11 / 6), rel_tol=1e-12)

    def test_from_rytov_matches_function(self):
        p = TurbulenceParams.from_rytov(0.7)
        a, b = alpha_beta_from_rytov(0.7)
        assert p.alpha == a and p.beta == b


class TestGgPdf:
    def test_integrates_to_one(self):
        total, err = integrate.quad(lambda i: gg_pdf(i, MODERATE), 0, np.inf, limit=200)
        assert abs(total - 1.0) < 1e-6

    def test_unit_mean(self):
        mean, err = integrate.quad(lambda i: i * gg_pdf(i, MODERATE), 0, np.inf, limit=200)
        assert abs(mean - 1.0) < 1e-6

    def test_second_moment_matches_scintillation_index(self):
        m2, _ = integrate.quad(lambda i: i * i * gg_pdf(i, MODERATE), 0, np.inf, limit=200)
        assert abs((m2 - 1.0) - MODERATE.scintillation_index) < 1e-6

    def test_positive_everywhere(self):
        grid = np.logspace(-4, 1.5, 200)
        assert np.all(gg_pdf(grid, MODERATE) > 0)

    def test_rejects_nonpositive_intensity(self):
        with pytest.raises(ValueError):
            gg_pdf(0.0, MODERATE)

    def test_other_parameter_pairs_normalize(self):
        for params in (TurbulenceParams(2.5, 1.2), TurbulenceParams(8.0, 6.0)):
            total, _ = integrate.quad(lambda i: gg_pdf(i, params), 0, np.inf, limit=200)
            assert abs(total - 1.0) < 1e-6


def numeric_cdf(params, grid_max=60.0, n=200_000):
    grid = np.linspace(1e-9, grid_max, n)
    pdf = gg_pdf(grid, params)
    cdf = integrate.cumulative_trapezoid(pdf, grid, initial=0.0)

    def evaluate(x):
        return np.interp(x, grid, cdf)

    return evaluate


class TestSampler:
    def test_mean_is_one(self):
        rng = np.random.default_rng(100)
        draws = sample_gains(MODERATE, 1_000_000, rng)
        assert abs(draws.mean() - 1.0) < 0.005

    def test_scintillation_index(self):
        rng = np.random.default_rng(101)
        draws = sample_gains(MODERATE, 1_000_000, rng)
        si = draws.var() / draws.mean() ** 2
        expected = MODERATE.scintillation_index
        assert abs(si - expected) / expected < 0.02

    @pytest.mark.parametrize("params", [MODERATE, TurbulenceParams(2.5, 1.2),
                                        TurbulenceParams(8.0, 6.0)])
    def test_ks_against_pdf(self, params):
        rng = np.random.default_rng(102)
        draws = sample_gains(params, 100_000, rng)
        stat, _ = stats.kstest(draws, numeric_cdf(params))
        critical_1pct = 1.62762 / math.sqrt(draws.size)
        assert stat < critical_1pct

    def test_channel_realization_fields(self):
        rng = np.random.default_rng(103)
        block = sample_channel(MODERATE, antennas=4, rng=rng, coherence_len=10)
        assert block.h.shape == (4,)
        assert block.coherence_len == 10
        assert np.all(block.h > 0)

    def test_antenna_independence(self):
        rng = np.random.default_rng(104)
        draws = sample_gains(MODERATE, (100_000, 2), rng)
        rho = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(rho) < 0.01

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            TurbulenceParams(alpha=-1.0, beta=2.0)
        with pytest.raises(ValueError):
            TurbulenceParams(alpha=math.inf, beta=2.0)
        with pytest.raises(ValueError):
            sample_channel(MODERATE, antennas=0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            ChannelRealization(h=np.array([1.0, -0.1]), coherence_len=3)
