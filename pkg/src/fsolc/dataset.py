"""OOK link sample generation for SISO and SIMO systems.

A sample is one coherence block: L uniform bits, one channel realization
held constant over the block, and iid Gaussian noise whose standard
deviation comes from the block's SNR label (SNR = 1/sigma^2 in linear
scale, unit-mean channel, unit responsivity, symbols in {0, 1}).

Reproducibility: block k of a stream with master seed s is generated from
numpy's SeedSequence(s, spawn_key=(STREAM_BLOCK, k)), and the (s, k) pair is
stored on the sample, so any block can be regenerated in isolation. The
vectorized batch helpers use their own spawn namespace and fixed draw order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, sample_gains

SISO = "siso"
SIMO = "simo"

# spawn-key namespaces so different generators never share streams
STREAM_BLOCK = 1
STREAM_BATCH = 2

DATASET_MAGIC = b"FSOD"


def snr_db_to_noise_std(snr_db):
    """SNR is defined as 1/sigma^2 in linear scale."""
    return 10.0 ** (-float(snr_db) / 20.0)


@dataclass
class LinkSample:
    """One received coherence block with everything needed to reproduce it."""

    x: np.ndarray  # (L,) for SISO, (M, L) for SIMO
    bits: np.ndarray  # (L,) in {0, 1}
    channel: ChannelRealization
    noise_std: float
    snr_db: float
    seed: tuple  # (master_seed, block_index)


def _block_rng(master_seed, index):
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(STREAM_BLOCK, index)))


def make_block(system, params, block_len, antennas, snr_grid_db, master_seed, index):
    """Generate one reproducible block. Draw order is fixed: SNR label,
    bits, channel, then noise."""
    rng = _block_rng(master_seed, index)
    grid = np.atleast_1d(np.asarray(snr_grid_db, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("empty SNR grid")
    snr_db = float(grid[rng.integers(0, grid.size)])
    sigma = snr_db_to_noise_std(snr_db)
    bits = rng.integers(0, 2, size=block_len).astype(np.float64)
    m = 1 if system == SISO else antennas
    gains = sample_gains(params, m, rng)
    if system == SISO:
        noise = rng.normal(0.0, sigma, size=block_len)
        x = gains[0] * bits + noise
    elif system == SIMO:
        noise = rng.normal(0.0, sigma, size=(m, block_len))
        x = gains[:, None] * bits[None, :] + noise
    else:
        raise ValueError(f"unknown system {system!r}")
    return LinkSample(
        x=x,
        bits=bits,
        channel=ChannelRealization(h=gains, coherence_len=block_len),
        noise_std=sigma,
        snr_db=snr_db,
        seed=(master_seed, index),
    )


def make_dataset(system, params, block_len, antennas, snr_grid_db, n_blocks, master_seed):
    """Stream of n_blocks LinkSamples; the SNR label is drawn uniformly from
    the grid per block (pass a single-point grid for a fixed sweep point)."""
    for index in range(n_blocks):
        yield make_block(system, params, block_len, antennas, snr_grid_db, master_seed, index)


def make_batch(system, params, block_len, antennas, snr_grid_db, n_blocks, seed_seq):
    """Vectorized block generation for training/evaluation loops.

    seed_seq is a numpy SeedSequence (callers derive it from the master seed
    with their own spawn keys). Returns (x, bits, gains, sigma, snr_db)
    where x is (n, L) or (n, M, L), gains is (n, M) and sigma/snr are (n,).
    """
    rng = np.random.default_rng(seed_seq)
    grid = np.atleast_1d(np.asarray(snr_grid_db, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("empty SNR grid")
    snr_db = grid[rng.integers(0, grid.size, size=n_blocks)]
    sigma = 10.0 ** (-snr_db / 20.0)
    bits = rng.integers(0, 2, size=(n_blocks, block_len)).astype(np.float64)
    m = 1 if system == SISO else antennas
    gains = sample_gains(params, (n_blocks, m), rng)
    if system == SISO:
        noise = rng.normal(0.0, 1.0, size=(n_blocks, block_len)) * sigma[:, None]
        x = gains * bits + noise  # gains is (n, 1), broadcasts over L
    else:
        noise = rng.normal(0.0, 1.0, size=(n_blocks, m, block_len)) * sigma[:, None, None]
        x = gains[:, :, None] * bits[:, None, :] + noise
    return x, bits, gains, sigma, snr_db


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_csv(samples, path):
    """CSV export: block id, master seed, block index, snr_db, sigma, then
    h_0..h_{M-1}, s_0..s_{L-1} and the flattened received block."""
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to export")
    m = samples[0].channel.h.size
    length = samples[0].bits.size
    header = (["block", "master_seed", "block_index", "snr_db", "sigma"]
              + [f"h{i}" for i in range(m)]
              + [f"s{i}" for i in range(length)]
              + [f"x{i}" for i in range(samples[0].x.size)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, s in enumerate(samples):
            writer.writerow([k, s.seed[0], s.seed[1], s.snr_db, s.noise_std]
                            + list(s.channel.h) + [int(b) for b in s.bits]
                            + list(s.x.ravel()))


def export_binary(samples, path):
    """Binary record stream (little-endian): magic "FSOD", u16 version=1,
    then per record: u64 master seed, u32 block index, f64 snr_db, f64 sigma,
    u16 M, u16 L, M float64 gains, L uint8 bits, M*L float64 received values.
    """
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<H", 1))
        for s in samples:
            m = s.channel.h.size
            length = s.bits.size
            fh.write(struct.pack("<QIddHH", s.seed[0], s.seed[1], s.snr_db,
                                 s.noise_std, m, length))
            fh.write(s.channel.h.astype("<f8").tobytes())
            fh.write(s.bits.astype(np.uint8).tobytes())
            fh.write(s.x.astype("<f8").ravel().tobytes())


def read_binary(path):
    """Inverse of export_binary; yields LinkSamples."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported dataset version {version}")
    off = 6
    head = struct.Struct("<QIddHH")
    while off < len(buf):
        master, index, snr_db, sigma, m, length = head.unpack_from(buf, off)
        off += head.size
        gains = np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy()
        off += 8 * m
        bits = np.frombuffer(buf, dtype=np.uint8, count=length, offset=off).astype(np.float64)
        off += length
        x = np.frombuffer(buf, dtype="<f8", count=m * length, offset=off).copy()
        off += 8 * m * length
        x = x.reshape((length,) if m == 1 else (m, length))
        yield LinkSample(x=x, bits=bits,
                         channel=ChannelRealization(h=gains, coherence_len=length),
                         noise_std=sigma, snr_db=snr_db, seed=(master, index))
