"""Symbol detectors under comparison.

CNN receivers (full-precision or quantized) detect from the raw block with
no channel knowledge; maximum-likelihood baselines threshold against an
exact or corrupted channel estimate. All detectors are pure and operate on
single blocks or batches of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore, qinfer
from .nncore import Network
from .qmodel import QuantizedModel


@dataclass(frozen=True)
class CsiErrorModel:
    """Multiplicative Gaussian estimate error, redrawn per coherence block;
    error_std = 0 reduces to perfect CSI."""

    error_std: float = 0.2
    mode: str = "multiplicative"

    def __post_init__(self):
        if self.error_std < 0:
            raise ValueError("error_std must be >= 0")
        if self.mode != "multiplicative":
            raise ValueError(f"unsupported CSI error mode {self.mode!r}")


@dataclass
class ReceiverKind:
    """Tag plus the payload the tag implies (network, quantized model, or
    CSI error description for the ML baselines)."""

    tag: str
    payload: object

    def __post_init__(self):
        if self.tag.startswith("cnn"):
            if not isinstance(self.payload, (Network, QuantizedModel)):
                raise ValueError(f"{self.tag}: payload must be a network or quantized model")
        elif self.tag.startswith("ml"):
            if not isinstance(self.payload, CsiErrorModel):
                raise ValueError(f"{self.tag}: payload must be a CsiErrorModel")
        else:
            raise ValueError(f"unknown receiver tag {self.tag!r}")


def corrupt_csi(h, model, rng):
    """h * (1 + e) with e ~ N(0, error_std^2), clamped to a small positive
    floor so downstream thresholds stay meaningful."""
    h = np.asarray(h, dtype=np.float64)
    if model.error_std == 0.0:
        return h.copy()
    e = rng.normal(0.0, model.error_std, size=h.shape)
    return np.maximum(h * (1.0 + e), 1e-6 * h)


def detect_ml_siso(y, h_est, sigma=None):
    """Per-symbol OOK threshold at h_est/2 (Gaussian ML with equal priors).

    y is (L,) or (B, L); h_est a scalar or (B,) matching the batch.
    """
    y = np.asarray(y, dtype=np.float64)
    h_est = np.asarray(h_est, dtype=np.float64)
    threshold = h_est / 2.0
    if y.ndim == 2 and threshold.ndim == 1:
        threshold = threshold[:, None]
    return (y > threshold).astype(np.float64)


def detect_ml_simo(y, h_est, sigma=None):
    """Matched-filter OOK decision: 1 iff h_est . y > ||h_est||^2 / 2.

    y is (M, L) or (B, M, L); h_est is (M,) or (B, M).
    """
    y = np.asarray(y, dtype=np.float64)
    h_est = np.asarray(h_est, dtype=np.float64)
    if y.ndim == 2:
        score = h_est @ y
        threshold = np.dot(h_est, h_est) / 2.0
    else:
        score = np.einsum("bm,bml->bl", h_est, y)
        threshold = 0.5 * np.sum(h_est * h_est, axis=1)[:, None]
    return (score > threshold).astype(np.float64)


def detect_cnn(model, x):
    """Bit = 1 iff the network's symbol-one probability is >= 0.5 (ties
    decide 1); consumes no channel state."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 or (x.ndim == 2 and isinstance(model, (Network, QuantizedModel))
                             and _looks_like_single_simo(model, x))
    batch = x[None, ...] if single else x
    if isinstance(model, Network):
        probs = nncore.forward(model, batch)
    elif isinstance(model, QuantizedModel):
        probs = qinfer.qforward(model, batch, qinfer.OpCounter())
    else:
        raise TypeError(f"unsupported CNN payload {type(model).__name__}")
    bits = (probs >= 0.5).astype(np.float64)
    return bits[0] if single else bits


def _looks_like_single_simo(model, x):
    # a 2-D input is a single M x L block when the model's first layer is conv2d
    arch = model.arch if isinstance(model, QuantizedModel) else model.specs
    return arch[0].kind == "conv2d"
