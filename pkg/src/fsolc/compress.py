"""Joint quantization and pruning of network weights during training.

The training loop alternates between (a) minimizing the task loss augmented
with a quadratic penalty that pulls weights toward their quantized
counterparts, (b) re-learning per-layer codebooks from the current weight
distribution with a zero level pinned for pruning, and (c) projecting the
(multiplier-shifted) weights onto the codebook. Multiplier estimates and the
penalty coefficient are updated every epoch, so the consensus gap between the
full-precision and quantized weights shrinks as training proceeds.

Codebook levels are restricted to two-term signed powers of two so that every
multiplication at inference time can be replaced by bit shifts and additions
(see `fsolc.qinfer`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nncore

DEFAULT_EXP_RANGE = (-30, 30)


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the epoch it happened in."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")


# ---------------------------------------------------------------------------
# power-of-two levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pow2Level:
    """A quantization level of the form sign1*2^exp1 + sign2*2^exp2.

    One-term levels (exact powers of two) set two_term=False and ignore the
    second pair, which keeps pure powers exact instead of forcing a spurious
    minimal-magnitude second term.
    """

    f: int
    i: int
    g: int = 1
    j: int = 0
    two_term: bool = True

    def __post_init__(self):
        if self.f not in (-1, 1) or (self.two_term and self.g not in (-1, 1)):
            raise ValueError("level signs must be +1 or -1")

    @property
    def value(self):
        v = self.f * 2.0 ** self.i
        if self.two_term:
            v += self.g * 2.0 ** self.j
        return v


def _nearest_exponent(magnitude, exp_range):
    """Integer e in exp_range minimizing |2^e - magnitude|; ties take the
    smaller exponent. Returns (e, clamped) with clamped set when the
    unconstrained optimum fell outside the range."""
    lo, hi = exp_range
    if magnitude <= 2.0 ** lo:
        return lo, magnitude < 0.75 * 2.0 ** lo
    if magnitude >= 2.0 ** hi:
        return hi, magnitude > 1.5 * 2.0 ** hi
    e = math.floor(math.log2(magnitude))
    e = max(lo, min(e, hi - 1))
    d_lo = abs(2.0 ** e - magnitude)
    d_hi = abs(2.0 ** (e + 1) - magnitude)
    # strict '<' keeps the smaller exponent on ties
    return (e + 1, False) if d_hi < d_lo else (e, False)


def pow2_approx(x, exp_range=DEFAULT_EXP_RANGE):
    """Greedy two-term power-of-two approximation of a nonzero real.

    First pick sign/exponent minimizing the distance to x, then approximate
    the residual the same way, keeping the second term only when it strictly
    reduces the error (a zero or below-range residual yields a one-term
    level). Ties on the exponent resolve toward the smaller exponent, which
    makes the representation canonical; mirroring x flips both signs.
    """
    if x == 0:
        raise ValueError("zero is the reserved pruning level, not a pow2 level")
    lo, hi = exp_range
    if lo > hi:
        raise ValueError("empty exponent range")
    f = 1 if x > 0 else -1
    mag = abs(x)
    i, clamped = _nearest_exponent(mag, exp_range)
    if clamped:
        warnings.warn(f"|{x}| outside the representable pow2 range, clamping", RuntimeWarning)
    first = f * 2.0 ** i
    residual = x - first
    if residual == 0.0:
        return Pow2Level(f, i, two_term=False)
    g = 1 if residual > 0 else -1
    j, _ = _nearest_exponent(abs(residual), exp_range)
    if g == -f and j == i:
        # the pair would cancel to zero; zero is reserved
        return Pow2Level(f, i, two_term=False)
    if abs(g * 2.0 ** j - residual) >= abs(residual):
        return Pow2Level(f, i, two_term=False)
    return Pow2Level(f, i, g, j)


# ---------------------------------------------------------------------------
# codebooks
# ---------------------------------------------------------------------------

@dataclass
class LayerCodebook:
    """2^bits power-of-two levels plus the pinned zero level, sorted.

    levels holds Pow2Level entries with None marking the zero level. borders
    are the cluster boundaries, i.e. midpoints between adjacent level values.
    """

    bits: int
    levels: tuple
    values: np.ndarray = field(init=False, repr=False)
    borders: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vals = np.array([0.0 if lv is None else lv.value for lv in self.levels])
        if not np.all(np.diff(vals) > 0):
            raise ValueError("codebook levels must be strictly increasing")
        if sum(1 for lv in self.levels if lv is None) != 1:
            raise ValueError("codebook must contain the zero level exactly once")
        self.values = vals
        self.borders = (vals[1:] + vals[:-1]) / 2.0

    @property
    def zero_index(self):
        return next(idx for idx, lv in enumerate(self.levels) if lv is None)

    def __len__(self):
        return len(self.levels)


def _area_means(w, borders):
    """Mean weight inside each consecutive border pair; an empty area falls
    back to the midpoint of its borders."""
    centers = []
    for k in range(len(borders) - 1):
        lo, hi = borders[k], borders[k + 1]
        mask = (w >= lo) & ((w <= hi) if k == len(borders) - 2 else (w < hi))
        centers.append(float(w[mask].mean()) if mask.any() else (lo + hi) / 2.0)
    return centers


def _initial_centers(w, bits):
    """Hierarchical area construction: split at the mean for one bit, then
    reuse the previous borders plus centers as the next border set."""
    borders = [float(w.min()), float(w.mean()), float(w.max())]
    borders = sorted(set(borders))
    centers = _area_means(w, borders)
    for _ in range(bits - 1):
        borders = sorted(set(borders) | set(centers))
        centers = _area_means(w, borders)
    return centers


def _pinned_kmeans(w, centers, zero_idx, max_iter=100):
    """Lloyd iterations with the zero center held fixed.

    Weights nearer to zero than to any other center form the pruning cluster.
    An emptied non-zero cluster is re-seeded at the weight farthest from its
    nearest center; the pinned zero cluster may legitimately stay empty.
    """
    centers = np.asarray(centers, dtype=np.float64).copy()
    assign = None
    for _ in range(max_iter):
        dist = np.abs(w[:, None] - centers[None, :])
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(len(centers)):
            if c == zero_idx:
                continue
            members = w[assign == c]
            if members.size:
                centers[c] = members.mean()
            else:
                nearest = np.abs(w[:, None] - centers[None, :]).min(axis=1)
                centers[c] = w[nearest.argmax()]
    return centers, assign


def learn_codebook(weights, bits, prev=None, exp_range=DEFAULT_EXP_RANGE):
    """Learn the 2^bits + 1 levels (zero pinned) for one weight tensor.

    The area borders/centers are rebuilt from the current weights each call;
    `prev` is accepted for warm-start experiments but unused by default.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot learn a codebook from no weights")
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if w.min() == w.max():
        warnings.warn("all weights identical; degenerate codebook", RuntimeWarning)
        lone = float(w[0])
        levels = [None] if lone == 0.0 else sorted([None, pow2_approx(lone, exp_range)],
                                                   key=lambda lv: 0.0 if lv is None else lv.value)
        return LayerCodebook(bits=bits, levels=tuple(levels))

    centers = _initial_centers(w, bits)
    centers.append(0.0)
    centers, _ = _pinned_kmeans(w, centers, zero_idx=len(centers) - 1)

    levels = {0.0: None}
    for c in centers[:-1]:
        if c == 0.0:
            continue
        lv = pow2_approx(c, exp_range)
        if lv.value in levels:
            warnings.warn("pow2 approximation merged two levels", RuntimeWarning)
            continue
        levels[lv.value] = lv
    ordered = tuple(levels[v] for v in sorted(levels))
    return LayerCodebook(bits=bits, levels=ordered)


# ---------------------------------------------------------------------------
# projection and penalty
# ---------------------------------------------------------------------------

def project_indices(targets, values):
    """Index of the nearest codebook value for every target (ties go to the
    lower level). values must be sorted ascending."""
    t = np.asarray(targets, dtype=np.float64).ravel()
    if len(values) == 1:
        return np.zeros(t.size, dtype=np.intp)
    pos = np.searchsorted(values, t).clip(1, len(values) - 1)
    left, right = values[pos - 1], values[pos]
    take_right = (t - left) > (right - t)
    idx = pos - 1 + take_right
    # targets below the smallest value
    idx[t <= values[0]] = 0
    return idx


def project(w, lam, mu, codebook):
    """Elementwise nearest codebook level to (w - lam/mu): the minimizer of
    the consensus distance with entries restricted to codebook levels."""
    w = np.asarray(w, dtype=np.float64)
    target = w - np.asarray(lam, dtype=np.float64) / mu
    idx = project_indices(target, codebook.values)
    return codebook.values[idx].reshape(w.shape)


def penalty_gradient(w, w_hat, lam, mu):
    """Gradient of (mu/2)*||w - w_hat - lam/mu||^2 w.r.t. w."""
    w = np.asarray(w, dtype=np.float64)
    return mu * (w - np.asarray(w_hat) - np.asarray(lam) / mu)


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

def compression_rate(param_count, layer_count, bits):
    """Storage ratio of a 32-bit model to the quantized one: (bits+1)-bit
    indices per weight plus 17 bits per stored level (16 for the two
    exponents, 1 for each sign)."""
    if param_count < 1 or bits < 1 or layer_count < 0:
        raise ValueError("param_count and bits must be >= 1, layer_count >= 0")
    return 32.0 * param_count / ((bits + 1) * param_count + (2 ** bits) * 17 * layer_count)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class LcConfig:
    bits: int = 1
    a: float = 1.008
    mu0: float = 1e-3
    epochs: int = 30
    epoch_size: int = 30000
    lr: float = 1e-3
    mu_schedule: str = "as_written"  # or "geometric"
    exp_range: tuple = DEFAULT_EXP_RANGE

    def __post_init__(self):
        if self.bits < 1 or self.a <= 1.0 or self.mu0 <= 0.0:
            raise ValueError("require bits >= 1, a > 1, mu0 > 0")
        if self.mu_schedule not in ("as_written", "geometric"):
            raise ValueError(f"unknown mu schedule {self.mu_schedule!r}")


@dataclass
class LcState:
    """Per-epoch state of the quantize-prune loop."""

    mu: float
    a: float
    lam: dict
    w_hat: dict
    epoch: int = 0


@dataclass
class LcTracePoint:
    epoch: int
    loss: float
    gap: float  # ||w - w_hat|| over all quantizable tensors, after projection
    mu: float


def _consensus_gap(params, w_hat):
    sq = sum(float(np.sum((params[k] - w_hat[k]) ** 2)) for k in w_hat)
    return math.sqrt(sq)


def lc_train(net, data_source, config):
    """Run the joint quantize-prune loop on a pre-trained network.

    data_source(epoch_index) must yield (batch, target) pairs covering one
    epoch. Each epoch minimizes the penalized loss with ADAM for one pass,
    re-learns per-tensor codebooks, projects onto them, and updates the
    multiplier estimates and the penalty coefficient (mu_{i+1} = mu_i * a^i,
    or mu_i * a under the geometric schedule).

    Returns (net, QuantizedModel, trace). The net keeps its final
    full-precision weights; the quantized model is built from the final
    projection.
    """
    from .qmodel import QuantizedModel  # deferred, qmodel imports this module

    params = net.params()
    qnames = [k for k, q in net.quantizable.items() if q]
    state = LcState(
        mu=config.mu0,
        a=config.a,
        lam={k: np.zeros_like(params[k]) for k in qnames},
        w_hat={k: np.zeros_like(params[k]) for k in qnames},
    )
    adam = nncore.AdamState.for_params(params, lr=config.lr)
    codebooks = {}
    trace = []

    for epoch in range(config.epochs):
        state.epoch = epoch
        # one ADAM pass over the epoch with the penalty gradient injected
        n_batches = 0
        loss_sum = 0.0
        for batch, target in data_source(epoch):
            extra = {
                k: penalty_gradient(params[k], state.w_hat[k], state.lam[k], state.mu)
                for k in qnames
            }
            loss, grads = net.training_step(batch, target, extra_grad=extra)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            nncore.adam_step(adam, params, grads)
            loss_sum += loss
            n_batches += 1
        if n_batches == 0:
            raise ValueError(f"data source yielded no batches in epoch {epoch}")

        # re-learn the codebooks from the current weight distribution
        for k in qnames:
            codebooks[k] = learn_codebook(params[k], config.bits, exp_range=config.exp_range)
        # project the multiplier-shifted weights onto the levels
        for k in qnames:
            state.w_hat[k] = project(params[k], state.lam[k], state.mu, codebooks[k])
        # multiplier and penalty updates
        for k in qnames:
            state.lam[k] = state.lam[k] - state.mu * (params[k] - state.w_hat[k])
        trace.append(LcTracePoint(epoch=epoch, loss=loss_sum / n_batches,
                                  gap=_consensus_gap(params, state.w_hat), mu=state.mu))
        growth = config.a ** epoch if config.mu_schedule == "as_written" else config.a
        state.mu = state.mu * growth

    if not codebooks:  # epochs == 0: quantized weights stay at their zero init
        for k in qnames:
            codebooks[k] = learn_codebook(params[k], config.bits, exp_range=config.exp_range)
    model = QuantizedModel.from_network(net, config.bits, codebooks, state.w_hat)
    return net, model, trace


def post_train_compress(net, bits, exp_range=DEFAULT_EXP_RANGE):
    """One-shot baseline: learn codebooks from the trained weights and project
    them directly (no multipliers, no retraining)."""
    from .qmodel import QuantizedModel

    params = net.params()
    qnames = [k for k, q in net.quantizable.items() if q]
    codebooks = {}
    w_hat = {}
    for k in qnames:
        codebooks[k] = learn_codebook(params[k], bits, exp_range=exp_range)
        w_hat[k] = project(params[k], np.zeros_like(params[k]), 1.0, codebooks[k])
    return QuantizedModel.from_network(net, bits, codebooks, w_hat)
