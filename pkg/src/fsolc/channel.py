"""Gamma-Gamma atmospheric turbulence channel.

Intensity fading is modeled as the product of two independent unit-mean
Gamma variates (small- and large-scale eddies), so E[I] = 1 and the
scintillation index is 1/alpha + 1/beta + 1/(alpha*beta). The shape
parameters can be given directly or derived from the Rytov variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


def rytov_variance(cn2, wavelength, distance):
    """Turbulence strength 1.23 * Cn2 * k^(7/6) * z^(11/6) for a plane wave,
    with k the optical wavenumber 2*pi/wavelength."""
    if cn2 <= 0 or wavelength <= 0 or distance <= 0:
        raise ValueError("cn2, wavelength and distance must be positive")
    k = 2.0 * math.pi / wavelength
    return 1.23 * cn2 * k ** (7.0 / 6.0) * distance ** (11.0 / 6.0)


def alpha_beta_from_rytov(rytov_var):
    """Shape parameters of the small/large scale eddies from the Rytov
    variance; both diverge in the turbulence-free limit."""
    s2 = float(rytov_var)
    if s2 <= 0:
        raise ValueError("rytov variance must be positive")
    alpha = 1.0 / math.expm1(0.49 * s2 / (1.0 + 1.11 * s2 ** (12.0 / 5.0)) ** (7.0 / 6.0))
    beta = 1.0 / math.expm1(0.51 * s2 / (1.0 + 0.69 * s2 ** (12.0 / 5.0)) ** (5.0 / 6.0))
    return alpha, beta


@dataclass(frozen=True)
class TurbulenceParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be finite and positive, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and positive, got {self.beta}")

    @staticmethod
    def from_rytov(rytov_var):
        return TurbulenceParams(*alpha_beta_from_rytov(rytov_var))

    @staticmethod
    def from_link(cn2, wavelength, distance):
        return TurbulenceParams.from_rytov(rytov_variance(cn2, wavelength, distance))

    @property
    def scintillation_index(self):
        return 1.0 / self.alpha + 1.0 / self.beta + 1.0 / (self.alpha * self.beta)


def gg_pdf(intensity, params):
    """Gamma-Gamma intensity density, evaluated in log space for stability.

    Uses the normalized form with the intensity inside the Bessel argument,
    K_{alpha-beta}(2*sqrt(alpha*beta*I)), which integrates to one.
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    if np.any(intensity <= 0):
        raise ValueError("intensity must be positive")
    a, b = params.alpha, params.beta
    z = 2.0 * np.sqrt(a * b * intensity)
    # kve = kv * exp(z) stays finite where kv underflows
    log_k = np.log(special.kve(a - b, z)) - z
    log_pdf = (
        math.log(2.0)
        + 0.5 * (a + b) * math.log(a * b)
        - special.gammaln(a)
        - special.gammaln(b)
        + (0.5 * (a + b) - 1.0) * np.log(intensity)
        + log_k
    )
    out = np.exp(log_pdf)
    return float(out) if out.ndim == 0 else out


@dataclass
class ChannelRealization:
    """One coherence block's channel gains: an M-vector (M=1 for SISO),
    constant over the block's coherence_len symbols."""

    h: np.ndarray
    coherence_len: int

    def __post_init__(self):
        self.h = np.atleast_1d(np.asarray(self.h, dtype=np.float64))
        if np.any(self.h <= 0):
            raise ValueError("channel gains must be positive")


def sample_channel(params, antennas, rng, coherence_len=1):
    """Draw one coherence block: per antenna, the product of a Gamma(alpha,
    1/alpha) and an independent Gamma(beta, 1/beta) variate; antennas are
    spatially uncorrelated."""
    if antennas < 1:
        raise ValueError("need at least one antenna")
    small = rng.gamma(shape=params.alpha, scale=1.0 / params.alpha, size=antennas)
    large = rng.gamma(shape=params.beta, scale=1.0 / params.beta, size=antennas)
    return ChannelRealization(h=small * large, coherence_len=coherence_len)


def sample_gains(params, shape, rng):
    """Vectorized fading draws with the same product construction; shape may
    be an int or tuple, e.g. (blocks, antennas)."""
    small = rng.gamma(shape=params.alpha, scale=1.0 / params.alpha, size=shape)
    large = rng.gamma(shape=params.beta, scale=1.0 / params.beta, size=shape)
    return small * large
