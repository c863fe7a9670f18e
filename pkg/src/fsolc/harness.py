"""Experiment orchestration: training, compression, BER sweeps and the
figure-reproduction pipeline.

Every run is driven by an ExperimentConfig that serializes losslessly to
JSON; outputs embed the config hash so records are traceable and re-runnable
bit-identically. Randomness is namespaced through numpy SeedSequence spawn
keys derived from the single master seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import compress, dataset, nncore, qinfer, receivers
from .channel import TurbulenceParams
from .compress import DivergenceError, LcConfig
from .qmodel import QuantizedModel
from .receivers import CsiErrorModel, ReceiverKind

THREADS_ENV = "FSOLC_THREADS"

# seed spawn-key namespaces (see dataset.py for the block/batch ones)
SEED_INIT = 10
SEED_TRAIN = 11
SEED_LC = 12
SEED_SWEEP_DATA = 13
SEED_SWEEP_CSI = 14

WILSON_Z = 1.959963984540054  # 95%


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ChannelConfig:
    alpha: float = 4.0
    beta: float = 1.9
    rytov: float | None = None  # when set, alpha/beta are derived from it


@dataclass
class LinkConfig:
    L: int = 10
    M: int = 8


@dataclass
class TrainSection:
    epochs: int = 10
    epoch_size: int = 10000
    batch_size: int = 128
    lr: float = 1e-3
    kernel_size: int = 3  # per-axis size; paper figures omit it, recorded in outputs
    filters: list = field(default_factory=lambda: [32, 64, 128])
    snr_grid_db: list | None = None  # None: reuse sweep grid


@dataclass
class LcSection:
    bits: int = 1
    a: float = 1.008
    mu0: float = 1e-3
    epochs: int = 10
    epoch_size: int = 10000
    lr: float = 1e-3
    mu_schedule: str = "as_written"


@dataclass
class SweepSection:
    snr_grid_db: list = field(default_factory=lambda: [10.0, 15.0, 20.0, 25.0, 30.0])
    min_errors: int = 100
    min_symbols: int = 100_000
    max_symbols: int = 10_000_000
    chunk_blocks: int = 2000


@dataclass
class ExperimentConfig:
    system: str = dataset.SISO
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    lc: LcSection = field(default_factory=LcSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    receivers: list = field(default_factory=lambda: ["ml_perfect_csi", "ml_imperfect_csi", "cnn_full"])
    csi_error_std: float = 0.4
    master_seed: int = 2024

    def __post_init__(self):
        if self.system not in (dataset.SISO, dataset.SIMO):
            raise ConfigError(f"system must be 'siso' or 'simo', got {self.system!r}")

    # -- derived -----------------------------------------------------------

    def turbulence(self):
        if self.channel.rytov is not None:
            return TurbulenceParams.from_rytov(self.channel.rytov)
        return TurbulenceParams(self.channel.alpha, self.channel.beta)

    def antennas(self):
        return 1 if self.system == dataset.SISO else self.link.M

    def train_snr_grid(self):
        grid = self.train.snr_grid_db
        return list(self.sweep.snr_grid_db) if grid is None else list(grid)

    def network_specs(self):
        if self.system == dataset.SISO:
            return nncore.siso_cnn_specs(self.link.L, filters=tuple(self.train.filters),
                                         kernel_size=self.train.kernel_size)
        size = self.train.kernel_size
        return nncore.simo_cnn_specs(self.link.M, self.link.L,
                                     filters=tuple(self.train.filters),
                                     kernel_size=(size, size))

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc):
        doc = dict(doc)
        sections = {"channel": ChannelConfig, "link": LinkConfig, "train": TrainSection,
                    "lc": LcSection, "sweep": SweepSection}
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                known = {f.name for f in dataclasses.fields(sections[key])}
                bad = set(value) - known
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                kwargs[key] = sections[key](**value)
            elif key in {f.name for f in dataclasses.fields(ExperimentConfig)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return ExperimentConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class BerRecord:
    receiver: str
    snr_db: float
    symbols: int
    errors: int
    ber: float
    wilson_low: float
    wilson_high: float
    low_confidence: bool
    config_hash: str
    seed: int

    FIELDS = ("receiver", "snr_db", "symbols", "errors", "ber",
              "wilson_low", "wilson_high", "low_confidence", "config_hash", "seed")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


def wilson_bounds(errors, trials, z=WILSON_Z):
    """95% Wilson score interval for a binomial proportion."""
    if trials == 0:
        return 0.0, 1.0
    p = errors / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1.0 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def write_records_csv(records, path, append=False):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(BerRecord.FIELDS)
        for rec in records:
            writer.writerow(rec.row())


def read_records_csv(path):
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(BerRecord(
                receiver=row["receiver"], snr_db=float(row["snr_db"]),
                symbols=int(row["symbols"]), errors=int(row["errors"]),
                ber=float(row["ber"]), wilson_low=float(row["wilson_low"]),
                wilson_high=float(row["wilson_high"]),
                low_confidence=row["low_confidence"] in ("True", "true", "1"),
                config_hash=row["config_hash"], seed=int(row["seed"])))
    return records


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _epoch_batches(config, namespace, epoch, epoch_size, snr_grid):
    """Yield (x, bits) batches for one epoch, seeded by (namespace, epoch, i)."""
    params = config.turbulence()
    batch = config.train.batch_size
    n_batches = max(1, epoch_size // batch)
    for i in range(n_batches):
        seq = np.random.SeedSequence(config.master_seed, spawn_key=(namespace, epoch, i))
        x, bits, _, _, _ = dataset.make_batch(config.system, params, config.link.L,
                                              config.antennas(), snr_grid, batch, seq)
        yield x, bits


def cmd_train(config, out_dir=None):
    """Pre-train the full-precision CNN on freshly generated blocks.

    Returns (net, history) where history holds one mean-loss entry per epoch;
    optionally writes checkpoint.npz plus a JSON meta mirror under out_dir.
    """
    init_seed = np.random.SeedSequence(config.master_seed, spawn_key=(SEED_INIT,))
    net = nncore.Network(config.network_specs(), rng=np.random.default_rng(init_seed))
    params = net.params()
    adam = nncore.AdamState.for_params(params, lr=config.train.lr)
    grid = config.train_snr_grid()
    history = []
    for epoch in range(config.train.epochs):
        loss_sum, n = 0.0, 0
        for x, bits in _epoch_batches(config, SEED_TRAIN, epoch,
                                      config.train.epoch_size, grid):
            loss, grads = net.training_step(x, bits)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            nncore.adam_step(adam, params, grads)
            loss_sum += loss
            n += 1
        history.append({"epoch": epoch, "loss": loss_sum / n})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(net, config, os.path.join(out_dir, "checkpoint.npz"), history)
    return net, history


def save_checkpoint(net, config, path, history=None):
    arrays = {f"param:{k}": v for k, v in net.params().items()}
    meta = {
        "arch": [s.to_dict() for s in net.specs],
        "quantizable": net.quantizable,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "history": history or [],
    }
    np.savez(path, meta=json.dumps(meta), **arrays)
    with open(str(path).replace(".npz", ".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        values = {k.split(":", 1)[1]: data[k] for k in data.files if k.startswith("param:")}
    net = nncore.Network([nncore.LayerSpec.from_dict(d) for d in meta["arch"]])
    net.set_params(values)
    net.quantizable.update(meta["quantizable"])
    return net, meta


# ---------------------------------------------------------------------------
# compression
# ---------------------------------------------------------------------------

def cmd_compress(net, config, method="lc", out_dir=None, tag=None):
    """Compress a trained network; method 'lc' runs the joint loop, 'post'
    is the one-shot post-training baseline. Returns (model, trace, report)."""
    lc_cfg = LcConfig(bits=config.lc.bits, a=config.lc.a, mu0=config.lc.mu0,
                      epochs=config.lc.epochs, epoch_size=config.lc.epoch_size,
                      lr=config.lc.lr, mu_schedule=config.lc.mu_schedule)
    grid = config.train_snr_grid()
    net = net.copy()  # leave the caller's checkpoint untouched
    if method == "lc":
        source = lambda epoch: _epoch_batches(config, SEED_LC, epoch,
                                              config.lc.epoch_size, grid)
        net, model, trace = compress.lc_train(net, source, lc_cfg)
    elif method == "post":
        model = compress.post_train_compress(net, config.lc.bits)
        trace = []
    else:
        raise ConfigError(f"unknown compression method {method!r}")
    report = compression_report(model, config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stem = tag or f"{method}_{config.lc.bits}bit"
        model.save_binary(os.path.join(out_dir, f"{stem}.p2qm"))
        model.save_json(os.path.join(out_dir, f"{stem}.json"))
        with open(os.path.join(out_dir, f"{stem}.report.json"), "w") as fh:
            json.dump(report, fh, indent=1)
        with open(os.path.join(out_dir, f"{stem}.trace.json"), "w") as fh:
            json.dump([dataclasses.asdict(t) for t in trace], fh, indent=1)
    return net, model, trace, report


def compression_report(model, config):
    per_layer = {
        name: {
            "levels": len(qt.codebook),
            "level_values": qt.codebook.values.tolist(),
            "pruned_fraction": qt.pruned_fraction,
            "params": int(np.prod(qt.shape)),
        }
        for name, qt in model.quantized.items()
    }
    return {
        "bits": model.bits,
        "quantized_params": model.param_count(),
        "quantized_layers": model.quantized_layer_count(),
        "compression_rate": model.storage_compression_rate(),
        "config_hash": config.config_hash(),
        "layers": per_layer,
    }


# ---------------------------------------------------------------------------
# BER sweep
# ---------------------------------------------------------------------------

def _chunk_errors(kind, x, bits, gains, rng_csi):
    """Bit errors of one receiver on one chunk of blocks."""
    if kind.tag == "ml_perfect_csi" or kind.tag == "ml_imperfect_csi":
        h = gains if kind.payload.error_std == 0 else receivers.corrupt_csi(gains, kind.payload, rng_csi)
        if x.ndim == 2:  # SISO chunks: (B, L)
            pred = receivers.detect_ml_siso(x, h[:, 0])
        else:
            pred = receivers.detect_ml_simo(x, h)
    elif kind.tag.startswith("cnn"):
        if isinstance(kind.payload, QuantizedModel):
            probs = qinfer.qforward(kind.payload, x, qinfer.OpCounter())
        else:
            probs = nncore.forward(kind.payload, x)
        pred = (probs >= 0.5).astype(np.float64)
    else:
        raise ConfigError(f"unknown receiver tag {kind.tag!r}")
    return int(np.sum(pred != bits))


def _sweep_point(kinds, config, point_index, snr_db):
    """Monte-Carlo BER for every receiver at one SNR point.

    All receivers see the same block stream (paired comparison); a receiver
    stops consuming chunks once its error/symbol targets are met.
    """
    params = config.turbulence()
    sweep = config.sweep
    L = config.link.L
    state = {k.tag: {"symbols": 0, "errors": 0} for k in kinds}

    def done(s):
        return s["symbols"] >= sweep.min_symbols and (
            s["errors"] >= sweep.min_errors or s["symbols"] >= sweep.max_symbols)

    chunk_idx = 0
    while any(not done(state[k.tag]) for k in kinds):
        seq = np.random.SeedSequence(config.master_seed,
                                     spawn_key=(SEED_SWEEP_DATA, point_index, chunk_idx))
        x, bits, gains, _, _ = dataset.make_batch(config.system, params, L,
                                                  config.antennas(), [snr_db],
                                                  sweep.chunk_blocks, seq)
        csi_seq = np.random.SeedSequence(config.master_seed,
                                         spawn_key=(SEED_SWEEP_CSI, point_index, chunk_idx))
        rng_csi = np.random.default_rng(csi_seq)
        for kind in kinds:
            s = state[kind.tag]
            if done(s):
                continue
            s["errors"] += _chunk_errors(kind, x, bits, gains, rng_csi)
            s["symbols"] += sweep.chunk_blocks * L
        chunk_idx += 1

    records = []
    for kind in kinds:
        s = state[kind.tag]
        low, high = wilson_bounds(s["errors"], s["symbols"])
        records.append(BerRecord(
            receiver=kind.tag, snr_db=float(snr_db), symbols=s["symbols"],
            errors=s["errors"], ber=s["errors"] / s["symbols"] if s["symbols"] else 0.0,
            wilson_low=low, wilson_high=high,
            low_confidence=s["errors"] < sweep.min_errors,
            config_hash=config.config_hash(), seed=config.master_seed))
    return records


def cmd_sweep(kinds, config, out_path=None):
    """BER versus SNR for every receiver; emits records per point as each
    point completes. Uses FSOLC_THREADS worker processes when > 1."""
    if not kinds:
        raise ConfigError("sweep needs at least one receiver")
    points = list(enumerate(config.sweep.snr_grid_db))
    threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    all_records = []
    first = True
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_sweep_point, kinds, config, p, snr) for p, snr in points]
            for future in futures:  # in point order: deterministic output
                records = future.result()
                all_records.extend(records)
                if out_path:
                    write_records_csv(records, out_path, append=not first)
                    first = False
    else:
        for p, snr in points:
            records = _sweep_point(kinds, config, p, snr)
            all_records.extend(records)
            if out_path:
                write_records_csv(records, out_path, append=not first)
                first = False
    return all_records


def has_low_confidence(records):
    return any(r.low_confidence for r in records)


# ---------------------------------------------------------------------------
# figure reproduction
# ---------------------------------------------------------------------------

FIGURES = {4: (dataset.SISO, 1), 5: (dataset.SISO, 2),
           6: (dataset.SIMO, 1), 7: (dataset.SIMO, 2)}

SISO_SNR_GRID = [10.0, 15.0, 20.0, 25.0, 30.0]
SIMO_SNR_GRID = [-6.0, -3.0, 0.0, 3.0, 6.0]

# scaling table: the paper-scale protocol is 30 epochs x 30000 samples for
# both pre-training and the compression loop with penalty growth a = 1.008;
# the desk preset shrinks the epoch budget and raises a to 1.08 so the
# penalty coefficient still reaches the same terminal value
# (mu0 * a^(sum i) ~ 0.03) despite the shorter loop.
SCALES = {
    "desk": {"epochs": 10, "epoch_size": 10000, "a": 1.08,
             "min_symbols": 100_000, "max_symbols": 1_000_000},
    "full": {"epochs": 30, "epoch_size": 30000, "a": 1.008,
             "min_symbols": 100_000, "max_symbols": 10_000_000},
}


def figure_config(figure, scale="desk", master_seed=2024):
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure}; choose one of {sorted(FIGURES)}")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose one of {sorted(SCALES)}")
    system, bits = FIGURES[figure]
    s = SCALES[scale]
    grid = SISO_SNR_GRID if system == dataset.SISO else SIMO_SNR_GRID
    return ExperimentConfig(
        system=system,
        train=TrainSection(epochs=s["epochs"], epoch_size=s["epoch_size"]),
        lc=LcSection(bits=bits, epochs=s["epochs"], epoch_size=s["epoch_size"], a=s["a"]),
        sweep=SweepSection(snr_grid_db=list(grid), min_symbols=s["min_symbols"],
                           max_symbols=s["max_symbols"]),
        receivers=["ml_perfect_csi", "ml_imperfect_csi", "cnn_full",
                   f"cnn_lc_{bits}bit", f"cnn_post_{bits}bit"],
        master_seed=master_seed,
    )


def build_receivers(config, net, lc_model=None, post_model=None):
    kinds = []
    bits = config.lc.bits
    for tag in config.receivers:
        if tag == "ml_perfect_csi":
            kinds.append(ReceiverKind(tag, CsiErrorModel(error_std=0.0)))
        elif tag == "ml_imperfect_csi":
            kinds.append(ReceiverKind(tag, CsiErrorModel(error_std=config.csi_error_std)))
        elif tag == "cnn_full":
            kinds.append(ReceiverKind(tag, net))
        elif tag == f"cnn_lc_{bits}bit":
            if lc_model is None:
                raise ConfigError(f"receiver {tag} requested but no LC model built")
            kinds.append(ReceiverKind(tag, lc_model))
        elif tag == f"cnn_post_{bits}bit":
            if post_model is None:
                raise ConfigError(f"receiver {tag} requested but no post model built")
            kinds.append(ReceiverKind(tag, post_model))
        else:
            raise ConfigError(f"unknown receiver tag {tag!r}")
    return kinds


PLOT_SPEC = {
    "x": {"column": "snr_db", "label": "SNR (dB)"},
    "y": {"column": "ber", "label": "BER", "scale": "log"},
    "series": {"column": "receiver"},
    "error_bounds": {"low": "wilson_low", "high": "wilson_high"},
}


def cmd_reproduce(figure, scale="desk", out_dir="reproduce", master_seed=2024,
                  config=None):
    """Full pipeline for one BER figure: train, compress (joint loop and
    post-training baseline), sweep all receivers, write plottable CSV."""
    cfg = config if config is not None else figure_config(figure, scale, master_seed)
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))

    net, history = cmd_train(cfg, out_dir=out_dir)
    # both compressors start from the same pre-trained weights; cnn_full keeps them
    _, lc_model, trace, report = cmd_compress(net, cfg, method="lc", out_dir=out_dir)
    _, post_model, _, _ = cmd_compress(net, cfg, method="post", out_dir=out_dir)

    kinds = build_receivers(cfg, net, lc_model, post_model)
    records_path = os.path.join(out_dir, f"figure{figure}_{scale}.csv")
    records = cmd_sweep(kinds, cfg, out_path=records_path)

    spec = dict(PLOT_SPEC)
    spec["title"] = f"BER versus SNR, {cfg.system.upper()}-OOK, {cfg.lc.bits}-bit quantization"
    spec["data"] = os.path.basename(records_path)
    with open(os.path.join(out_dir, f"figure{figure}_{scale}.plotspec.json"), "w") as fh:
        json.dump(spec, fh, indent=1)
    with open(os.path.join(out_dir, "training_log.json"), "w") as fh:
        json.dump(history, fh, indent=1)
    return {"config": cfg, "records": records, "records_path": records_path,
            "trace": trace, "report": report}
