"""Quantized model container and its on-disk formats.

A QuantizedModel stores, per quantized tensor, a codebook of power-of-two
levels and a packed index map ((bits+1) bits per weight, one index reserved
for the zero/pruning level); non-quantized tensors (biases by default) keep
their raw float64 values. Decoding reproduces the projected weights
bit-exactly because levels are stored as integer (sign, exponent) pairs.

Binary layout (all little-endian), version 1:

    magic           4 bytes  b"P2QM"
    version         u16
    bits            u8
    n_quantized     u16
    n_raw           u16
    arch_len        u32      followed by arch_len bytes of UTF-8 JSON
                             (layer specs + quantizable map)
    per quantized tensor:
        name_len    u16      followed by UTF-8 name
        ndim        u8       followed by ndim u32 dims
        n_levels    u16
        per level:  flags u8 (bit0 = zero level, bit1 = two-term),
                    f i8, i i16, g i8, j i16
        stream_len  u32      followed by the packed index stream,
                             (bits+1) bits per index, LSB-first within bytes
    per raw tensor:
        name_len    u16, name, ndim u8, dims u32*ndim, float64 data

The JSON mirror carries the same information in readable form (levels appear
both as (f, i, g, j) tuples and as their float values) and is intended for
debugging, not as the primary format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .compress import LayerCodebook, Pow2Level, project_indices
from .nncore import LayerSpec, Network

MAGIC = b"P2QM"
VERSION = 1


def pack_indices(indices, width):
    """Pack small unsigned ints into a byte stream, width bits each, LSB-first."""
    idx = np.asarray(indices, dtype=np.uint32).ravel()
    if idx.size and idx.max() >= (1 << width):
        raise ValueError(f"index does not fit in {width} bits")
    bits = ((idx[:, None] >> np.arange(width)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_indices(buf, width, count):
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bits = bits[: count * width].reshape(count, width).astype(np.uint32)
    return (bits << np.arange(width)).sum(axis=1)


def _level_record(idx_is_zero, level):
    if idx_is_zero:
        return struct.pack("<Bbhbh", 1, 0, 0, 0, 0)
    flags = 2 if level.two_term else 0
    return struct.pack("<Bbhbh", flags, level.f, level.i,
                       level.g if level.two_term else 1,
                       level.j if level.two_term else 0)


def _read_level(buf, off):
    flags, f, i, g, j = struct.unpack_from("<Bbhbh", buf, off)
    off += struct.calcsize("<Bbhbh")
    if flags & 1:
        return None, off
    return Pow2Level(f, i, g, j, two_term=bool(flags & 2)), off


@dataclass
class QuantizedTensor:
    name: str
    shape: tuple
    codebook: LayerCodebook
    indices: np.ndarray  # flat, row-major, values index codebook.levels

    def decode(self):
        return self.codebook.values[self.indices].reshape(self.shape)

    @property
    def pruned_fraction(self):
        return float(np.mean(self.indices == self.codebook.zero_index))


@dataclass
class QuantizedModel:
    """Per-tensor index maps into power-of-two codebooks plus raw tensors."""

    bits: int
    arch: list  # list of LayerSpec
    quantized: dict  # name -> QuantizedTensor
    raw: dict  # name -> float64 ndarray

    @staticmethod
    def from_network(net, bits, codebooks, w_hat):
        """Build from a network whose quantizable tensors were projected to
        w_hat under the given per-tensor codebooks."""
        params = net.params()
        quantized = {}
        raw = {}
        for name, arr in params.items():
            if name in codebooks:
                cb = codebooks[name]
                idx = project_indices(w_hat[name], cb.values)
                decoded = cb.values[idx]
                if not np.array_equal(decoded, np.asarray(w_hat[name]).ravel()):
                    raise ValueError(f"{name}: projected weights are not codebook levels")
                quantized[name] = QuantizedTensor(name, arr.shape, cb, idx.astype(np.uint32))
            else:
                raw[name] = np.asarray(arr, dtype=np.float64).copy()
        return QuantizedModel(bits=bits, arch=list(net.specs), quantized=quantized, raw=raw)

    # -- reconstruction ----------------------------------------------------

    def decode(self):
        """name -> quantized weight tensor, reproduced exactly."""
        return {name: qt.decode() for name, qt in self.quantized.items()}

    def param_values(self):
        out = self.decode()
        out.update({k: v.copy() for k, v in self.raw.items()})
        return out

    def to_network(self):
        net = Network(self.arch)
        net.set_params(self.param_values())
        for name in net.quantizable:
            net.quantizable[name] = name in self.quantized
        return net

    def param_count(self):
        return sum(int(np.prod(qt.shape)) for qt in self.quantized.values())

    def quantized_layer_count(self):
        return len(self.quantized)

    def storage_compression_rate(self):
        from .compress import compression_rate

        return compression_rate(self.param_count(), self.quantized_layer_count(), self.bits)

    # -- binary format -------------------------------------------------------

    def save_binary(self, path):
        arch_blob = json.dumps([spec.to_dict() for spec in self.arch]).encode()
        width = self.bits + 1
        chunks = [MAGIC, struct.pack("<HBHH", VERSION, self.bits,
                                     len(self.quantized), len(self.raw)),
                  struct.pack("<I", len(arch_blob)), arch_blob]
        for name, qt in self.quantized.items():
            nb = name.encode()
            chunks.append(struct.pack("<H", len(nb)) + nb)
            chunks.append(struct.pack("<B", len(qt.shape)) +
                          struct.pack(f"<{len(qt.shape)}I", *qt.shape))
            chunks.append(struct.pack("<H", len(qt.codebook.levels)))
            for lv in qt.codebook.levels:
                chunks.append(_level_record(lv is None, lv))
            stream = pack_indices(qt.indices, width)
            chunks.append(struct.pack("<I", len(stream)) + stream)
        for name, arr in self.raw.items():
            nb = name.encode()
            chunks.append(struct.pack("<H", len(nb)) + nb)
            chunks.append(struct.pack("<B", arr.ndim) +
                          struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f8").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))

    @staticmethod
    def load_binary(path):
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != MAGIC:
            raise ValueError("not a quantized model file")
        off = 4
        version, bits, n_q, n_raw = struct.unpack_from("<HBHH", buf, off)
        off += struct.calcsize("<HBHH")
        if version != VERSION:
            raise ValueError(f"unsupported format version {version}")
        (arch_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        arch = [LayerSpec.from_dict(d) for d in json.loads(buf[off : off + arch_len])]
        off += arch_len
        width = bits + 1

        def read_name_shape(off):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            return name, shape, off

        quantized = {}
        for _ in range(n_q):
            name, shape, off = read_name_shape(off)
            (n_levels,) = struct.unpack_from("<H", buf, off)
            off += 2
            levels = []
            for _ in range(n_levels):
                lv, off = _read_level(buf, off)
                levels.append(lv)
            cb = LayerCodebook(bits=bits, levels=tuple(levels))
            (stream_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            count = int(np.prod(shape))
            idx = unpack_indices(buf[off : off + stream_len], width, count)
            off += stream_len
            quantized[name] = QuantizedTensor(name, tuple(shape), cb, idx.astype(np.uint32))
        raw = {}
        for _ in range(n_raw):
            name, shape, off = read_name_shape(off)
            count = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            raw[name] = arr.astype(np.float64)
        return QuantizedModel(bits=bits, arch=arch, quantized=quantized, raw=raw)

    # -- JSON mirror ---------------------------------------------------------

    def to_json_dict(self):
        def level_entry(lv):
            if lv is None:
                return {"zero": True, "value": 0.0}
            return {"f": lv.f, "i": lv.i, "g": lv.g, "j": lv.j,
                    "two_term": lv.two_term, "value": lv.value}

        return {
            "format": "p2qm-json",
            "version": VERSION,
            "bits": self.bits,
            "arch": [spec.to_dict() for spec in self.arch],
            "quantized": {
                name: {
                    "shape": list(qt.shape),
                    "levels": [level_entry(lv) for lv in qt.codebook.levels],
                    "indices": qt.indices.tolist(),
                }
                for name, qt in self.quantized.items()
            },
            "raw": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                    for name, arr in self.raw.items()},
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json_dict(doc):
        if doc.get("format") != "p2qm-json":
            raise ValueError("not a quantized model JSON mirror")
        bits = doc["bits"]
        arch = [LayerSpec.from_dict(d) for d in doc["arch"]]
        quantized = {}
        for name, entry in doc["quantized"].items():
            levels = tuple(
                None if lv.get("zero") else Pow2Level(lv["f"], lv["i"], lv["g"], lv["j"],
                                                      two_term=lv["two_term"])
                for lv in entry["levels"]
            )
            cb = LayerCodebook(bits=bits, levels=levels)
            idx = np.asarray(entry["indices"], dtype=np.uint32)
            quantized[name] = QuantizedTensor(name, tuple(entry["shape"]), cb, idx)
        raw = {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
               for name, entry in doc["raw"].items()}
        return QuantizedModel(bits=bits, arch=arch, quantized=quantized, raw=raw)

    @staticmethod
    def load_json(path):
        with open(path) as fh:
            return QuantizedModel.from_json_dict(json.load(fh))
