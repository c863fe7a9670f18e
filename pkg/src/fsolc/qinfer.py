"""Multiplication-free execution of quantized models.

Every codebook level is a (sign, shift) pair or two of them, so a product
weight*x becomes sign1*(x << shift1) + sign2*(x << shift2). On float64
activations a "shift" is an exact scaling by 2^k (exponent adjustment),
which is what the bit shift means on the eventual fixed-point target.

The execution groups the accumulation by codebook level (weights sharing a
level pool their activations first, additions only, then get shifted), which
is numerically equal to shifting every product individually. The operation
counter follows the per-multiplication accounting of the hardware argument:
a two-term level costs 2 shifts, 1 combine add and 1 accumulate add per
replaced multiplication; a one-term level 1 shift and 1 accumulate add;
pruned weights cost nothing. Unquantized kernels fall back to ordinary
arithmetic and are reported through the multiply counter, never hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import ShapeError, _same_pad


@dataclass(frozen=True)
class ShiftAddOp:
    """Apply a codebook level to activations via exact 2^k scalings."""

    sign1: int
    shift1: int
    sign2: int | None = None
    shift2: int | None = None

    @staticmethod
    def from_level(level):
        if level.two_term:
            return ShiftAddOp(level.f, level.i, level.g, level.j)
        return ShiftAddOp(level.f, level.i)

    @property
    def two_term(self):
        return self.sign2 is not None

    def apply(self, x):
        out = np.ldexp(x, self.shift1)
        if self.sign1 < 0:
            out = -out
        if self.sign2 is not None:
            second = np.ldexp(x, self.shift2)
            out = out + second if self.sign2 > 0 else out - second
        return out


@dataclass
class LayerOps:
    name: str
    shifts: int = 0
    combine_adds: int = 0
    accumulate_adds: int = 0
    bias_adds: int = 0
    multiplies: int = 0
    fp_macs: int = 0  # multiply-accumulates the full-precision layer would do

    @property
    def adds(self):
        return self.combine_adds + self.accumulate_adds + self.bias_adds


@dataclass
class OpCounter:
    """Operation tally across qforward calls; multiplies must stay zero on
    fully quantized models."""

    shifts: int = 0
    adds: int = 0
    multiplies: int = 0
    layers: list = field(default_factory=list)

    def record(self, row):
        self.layers.append(row)
        self.shifts += row.shifts
        self.adds += row.adds
        self.multiplies += row.multiplies

    def merge(self, other):
        for row in other.layers:
            self.record(row)
        return self


# ---------------------------------------------------------------------------
# runtime construction
# ---------------------------------------------------------------------------

def _conv1d_columns(x, k):
    pl, pr = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    length = x.shape[2]
    col = np.stack([xp[:, :, s : s + length] for s in range(k)], axis=2)
    return col.reshape(x.shape[0], -1, length)


def _conv2d_columns(x, kh, kw):
    ph, pw = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
    b, c, h, w = x.shape
    cols = []
    for i in range(kh):
        for j in range(kw):
            cols.append(xp[:, :, i : i + h, j : j + w].reshape(b, c, h * w))
    col = np.stack(cols, axis=2)
    return col.reshape(b, c * kh * kw, h * w)


class _LevelPlan:
    """Per-tensor execution plan: for each non-zero level, the 0/1 matrix
    selecting the kernel entries that carry it, plus its ShiftAddOp."""

    def __init__(self, qt, fanin_first_matrix):
        # fanin_first_matrix: indices reshaped to (fanin, out_channels)
        self.ops = []
        zero = qt.codebook.zero_index
        self.nonzero_weights = 0
        self.two_term_weights = 0
        for lvl_idx, level in enumerate(qt.codebook.levels):
            if lvl_idx == zero:
                continue
            mask = fanin_first_matrix == lvl_idx
            n = int(mask.sum())
            if n == 0:
                continue
            op = ShiftAddOp.from_level(level)
            self.ops.append((op, mask.T.astype(np.float64), n))
            self.nonzero_weights += n
            self.two_term_weights += n if op.two_term else 0

    def execute(self, col):
        # col: (B, fanin, positions); returns (B, out_channels, positions)
        out = None
        for op, mask_t, _ in self.ops:
            pooled = np.matmul(mask_t, col)  # selection + additions only
            term = op.apply(pooled)
            out = term if out is None else out + term
        return out


class _QuantizedRuntime:
    """Built once per QuantizedModel; mirrors the nn-core layer stack."""

    def __init__(self, model):
        self.model = model
        self.plans = {}
        self.decoded = model.param_values()
        counts = {}
        self.layer_names = []
        for spec in model.arch:
            counts[spec.kind] = counts.get(spec.kind, 0) + 1
            self.layer_names.append(f"{spec.kind}{counts[spec.kind]}")
        for lname, spec in zip(self.layer_names, model.arch):
            key = f"{lname}.kernel"
            if key not in model.quantized:
                continue
            qt = model.quantized[key]
            if spec.kind == "dense":
                matrix = qt.indices.reshape(qt.shape)  # (in_dim, out_dim)
            elif spec.kind == "conv1d":
                c_out = qt.shape[0]
                matrix = qt.indices.reshape(c_out, -1).T  # (C*K, C_out)
            elif spec.kind == "conv2d":
                c_out = qt.shape[0]
                matrix = qt.indices.reshape(c_out, -1).T  # (C*KH*KW, C_out)
            else:
                continue
            self.plans[key] = _LevelPlan(qt, matrix)


def _runtime(model):
    rt = getattr(model, "_qinfer_runtime", None)
    if rt is None or rt.model is not model:
        rt = _QuantizedRuntime(model)
        model._qinfer_runtime = rt
    return rt


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _linear_counts(row, plan, batch, positions, out_channels, fanin, bias):
    per_point = batch * positions
    row.shifts += per_point * (2 * plan.two_term_weights
                               + (plan.nonzero_weights - plan.two_term_weights))
    row.combine_adds += per_point * plan.two_term_weights
    row.accumulate_adds += per_point * plan.nonzero_weights
    if bias is not None:
        row.bias_adds += per_point * out_channels
    row.fp_macs += per_point * out_channels * fanin


def qforward(model, batch, counter):
    """Run the quantized model on a batch using only shifts/adds for the
    quantized kernels; populates counter and returns the output tensor."""
    rt = _runtime(model)
    x = np.asarray(batch, dtype=np.float64)
    for lname, spec in zip(rt.layer_names, model.arch):
        if spec.kind == "relu":
            x = np.where(x > 0, x, 0.0)
            continue
        if spec.kind == "sigmoid":
            x = _sigmoid(x)
            continue
        if spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
            continue

        key = f"{lname}.kernel"
        bias = rt.decoded.get(f"{lname}.bias")
        row = LayerOps(name=lname)
        if spec.kind == "dense":
            if x.ndim != 2 or x.shape[1] != spec.in_dim:
                raise ShapeError(lname, f"(B, {spec.in_dim})", x.shape)
            col = x[:, :, None]  # (B, fanin, 1)
            positions = 1
            fanin, c_out = spec.in_dim, spec.out_dim
        elif spec.kind == "conv1d":
            if x.ndim == 2 and spec.in_channels == 1:
                x = x[:, None, :]
            if x.ndim != 3 or x.shape[1] != spec.in_channels:
                raise ShapeError(lname, f"(B, {spec.in_channels}, L)", x.shape)
            (k,) = spec.kernel_size
            col = _conv1d_columns(x, k)
            positions = x.shape[2]
            fanin, c_out = spec.in_channels * k, spec.filters
        elif spec.kind == "conv2d":
            if x.ndim == 3 and spec.in_channels == 1:
                x = x[:, None, :, :]
            if x.ndim != 4 or x.shape[1] != spec.in_channels:
                raise ShapeError(lname, f"(B, {spec.in_channels}, H, W)", x.shape)
            kh, kw = spec.kernel_size
            hw = x.shape[2:]
            col = _conv2d_columns(x, kh, kw)
            positions = hw[0] * hw[1]
            fanin, c_out = spec.in_channels * kh * kw, spec.filters
        else:
            raise ValueError(f"unsupported layer kind {spec.kind!r}")

        b = x.shape[0]
        if key in rt.plans:
            out = rt.plans[key].execute(col)
            if out is None:  # fully pruned kernel
                out = np.zeros((b, c_out, positions))
            _linear_counts(row, rt.plans[key], b, positions, c_out, fanin, bias)
        else:
            # unquantized kernel: ordinary arithmetic, reported as multiplies
            w = rt.decoded[key]
            w2 = w.T if spec.kind == "dense" else w.reshape(c_out, -1)
            out = np.matmul(w2, col)
            row.multiplies += b * positions * c_out * fanin
            row.accumulate_adds += b * positions * c_out * fanin
            row.fp_macs += b * positions * c_out * fanin
            if bias is not None:
                row.bias_adds += b * positions * c_out
        if bias is not None:
            out = out + bias[:, None]
        counter.record(row)

        if spec.kind == "dense":
            x = out[:, :, 0]
        elif spec.kind == "conv1d":
            x = out
        else:
            x = out.reshape(b, c_out, *hw)
    return x


def count_report(counter, model, reference_bits=32):
    """Per-layer and total shift/add cost against the reference_bits-wide
    multiplier model (reference_bits shifts and reference_bits-1 adds per
    multiplication)."""
    if not counter.layers:
        raise ValueError("counter is empty; run qforward first")
    rows = []
    for row in counter.layers:
        rows.append({
            "layer": row.name,
            "shifts": row.shifts,
            "combine_adds": row.combine_adds,
            "accumulate_adds": row.accumulate_adds,
            "bias_adds": row.bias_adds,
            "adds": row.adds,
            "multiplies": row.multiplies,
            "fp_macs": row.fp_macs,
        })
    total_macs = sum(r["fp_macs"] for r in rows)
    fp_shifts = reference_bits * total_macs
    fp_adds = (reference_bits - 1) * total_macs
    report = {
        "bits": model.bits,
        "reference_bits": reference_bits,
        "layers": rows,
        "totals": {
            "shifts": counter.shifts,
            "adds": counter.adds,
            "multiplies": counter.multiplies,
            "fp_macs": total_macs,
            "fp_shifts": fp_shifts,
            "fp_adds": fp_adds,
        },
        "shift_ratio": (fp_shifts / counter.shifts) if counter.shifts else None,
    }
    return report
