"""Model files and INQ checkpoints.

Container layout (all integers big-endian)::

    b"INQM" | u16 version | u8 kind (0 float, 1 quantized) | u32 nsections
    nsections x ( u32 length | payload | u32 crc32(payload) )

Section 0 is a UTF-8 JSON document with the input shape, the layer table
and the provenance record. Each further section holds one learnable layer:

    quantized: u8 b | i16 n1 | u8 ndim | ndim x u32 dims | u64 nbits |
               ceil(nbits/8) stream bytes | u32 nbias | nbias x f64 bias
    float:     u8 ndim | ndim x u32 dims | prod(dims) x f64 weights |
               u32 nbias | nbias x f64 bias
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .engine import Network, layer_from_dict, layer_to_dict
from .quantizer import QuantGrid

MAGIC = b"INQM"
VERSION = 1
KIND_FLOAT = 0
KIND_QUANTIZED = 1
CHECKPOINT_VERSION = 1


class ContainerError(ValueError):
    """Base class for unreadable model files."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


@dataclass
class QuantLayer:
    """One packed weight tensor plus its full-precision bias."""

    b: int
    n1: int
    shape: tuple
    stream: bytes
    nbits: int
    bias: np.ndarray

    @property
    def grid(self) -> QuantGrid:
        return QuantGrid(self.b, self.n1)

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))

    def weights(self) -> np.ndarray:
        return codec.decode_layer(self.stream, self.grid, self.count, self.shape)

    def signs_exponents(self):
        sign, exponent = codec.decode_signs_exponents(self.stream, self.grid, self.count)
        return sign.reshape(self.shape), exponent.reshape(self.shape)


@dataclass
class QuantizedModel:
    input_shape: tuple
    layers: list
    qlayers: list
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, grids, provenance=None) -> "QuantizedModel":
        qlayers = []
        for (w, bias), grid in zip(net.params, grids):
            stream, nbits = codec.encode_layer(w, grid)
            qlayers.append(QuantLayer(grid.b, grid.n1, tuple(w.shape), stream, nbits,
                                      bias.copy()))
        return cls(tuple(net.input_shape), list(net.layers), qlayers, dict(provenance or {}))

    def to_network(self) -> Network:
        return Network(self.input_shape, self.layers,
                       [[q.weights(), q.bias.copy()] for q in self.qlayers])

    @property
    def grids(self):
        return [q.grid for q in self.qlayers]


def _section(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload + struct.pack(">I", zlib.crc32(payload))


def _f64(values) -> bytes:
    return np.asarray(values, dtype=">f8").tobytes()


def _dims(shape) -> bytes:
    return struct.pack(">B", len(shape)) + b"".join(struct.pack(">I", d) for d in shape)


def _meta(input_shape, layers, provenance) -> bytes:
    doc = {"input_shape": list(input_shape),
           "layers": [layer_to_dict(l) for l in layers],
           "provenance": provenance or {}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def dumps_model(model, provenance=None) -> bytes:
    """Serialize a :class:`Network` or :class:`QuantizedModel` to bytes."""
    if isinstance(model, QuantizedModel):
        kind = KIND_QUANTIZED
        prov = provenance if provenance is not None else model.provenance
        sections = [_meta(model.input_shape, model.layers, prov)]
        for q in model.qlayers:
            sections.append(struct.pack(">Bh", q.b, q.n1) + _dims(q.shape)
                            + struct.pack(">Q", q.nbits) + q.stream
                            + struct.pack(">I", q.bias.size) + _f64(q.bias))
    elif isinstance(model, Network):
        kind = KIND_FLOAT
        sections = [_meta(model.input_shape, model.layers, provenance)]
        for w, bias in model.params:
            sections.append(_dims(w.shape) + _f64(w.reshape(-1))
                            + struct.pack(">I", bias.size) + _f64(bias))
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    head = MAGIC + struct.pack(">HBI", VERSION, kind, len(sections))
    return head + b"".join(_section(s) for s in sections)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(f"{self.what}: unexpected end of data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self):
        (ndim,) = self.unpack(">B")
        return tuple(self.unpack(f">{ndim}I")) if ndim else ()

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype=">f8").astype(np.float64)


def loads_model(data: bytes, with_provenance: bool = False):
    """Parse bytes written by :func:`dumps_model`."""
    r = _Reader(data, "model file")
    if r.take(4) != MAGIC:
        raise BadMagicError("not an INQM model file (bad magic)")
    version, kind, nsections = r.unpack(">HBI")
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, expected {VERSION}")
    sections = []
    for i in range(nsections):
        (length,) = r.unpack(">I")
        payload = r.take(length)
        (crc,) = r.unpack(">I")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in section {i}")
        sections.append(payload)
    if r.pos != len(data):
        raise ContainerError("trailing bytes after last section")
    meta = json.loads(sections[0].decode())
    input_shape = tuple(meta["input_shape"])
    layers = [layer_from_dict(d) for d in meta["layers"]]
    prov = meta.get("provenance", {})
    if kind == KIND_QUANTIZED:
        qlayers = []
        for payload in sections[1:]:
            s = _Reader(payload, "quantized layer")
            b, n1 = s.unpack(">Bh")
            shape = s.dims()
            (nbits,) = s.unpack(">Q")
            stream = s.take((nbits + 7) // 8)
            (nb,) = s.unpack(">I")
            qlayers.append(QuantLayer(b, n1, shape, stream, nbits, s.f64(nb)))
        model = QuantizedModel(input_shape, layers, qlayers, prov)
    elif kind == KIND_FLOAT:
        params = []
        for payload in sections[1:]:
            s = _Reader(payload, "float layer")
            shape = s.dims()
            w = s.f64(int(np.prod(shape))).reshape(shape)
            (nb,) = s.unpack(">I")
            params.append([w, s.f64(nb)])
        model = Network(input_shape, layers, params)
    else:
        raise ContainerError(f"unknown model kind {kind}")
    return (model, prov) if with_provenance else model


def save_model(path, model, provenance=None) -> None:
    Path(path).write_bytes(dumps_model(model, provenance))


def load_model(path, with_provenance: bool = False):
    return loads_model(Path(path).read_bytes(), with_provenance)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net: Network, masks, grids, step: int, extra=None) -> None:
    """Write the loop state between two INQ steps.

    Velocity is reset at every step boundary, so no optimizer buffers need
    to be stored.
    """
    meta = {"version": CHECKPOINT_VERSION, "step": int(step),
            "grids": [[g.b, g.n1] for g in grids], "extra": extra or {}}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
              "model": np.frombuffer(dumps_model(net), dtype=np.uint8)}
    for l, m in enumerate(masks):
        arrays[f"mask_{l}"] = np.asarray(m, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
        net = loads_model(z["model"].tobytes())
        masks = [z[f"mask_{l}"].copy() for l in range(len(net.params))]
    return {"net": net, "masks": masks, "step": meta["step"],
            "grids": [QuantGrid(b, n1) for b, n1 in meta["grids"]],
            "extra": meta["extra"]}
