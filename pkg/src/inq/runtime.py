"""Multiply-free inference and analysis of quantized models.

Every weight of a quantized model is ``sign * 2**exponent`` or zero, so a
product ``x * w`` is computed by scaling the exponent of ``x`` with
``ldexp`` and applying the sign. Both operations are exact in binary
floating point (ldexp rounds like a multiplication when the result leaves
the normal range), and the products are summed in the same order as
:func:`inq.engine.forward`. The outputs are therefore bit-identical to a
regular forward pass over the decoded weights.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .codec import encoded_bits
from .container import QuantizedModel
from .engine import (Dataset, ShapeError, conv_output, im2col, maxpool_forward,
                     topk_accuracy)


@dataclass
class ShiftLayer:
    """Weights of one learnable layer as sign (-1, 0, +1) and exponent arrays."""

    sign: np.ndarray
    exponent: np.ndarray
    bias: np.ndarray

    def weights(self) -> np.ndarray:
        mag = np.ldexp(1.0, self.exponent)
        out = np.where(self.sign < 0, -mag, mag)
        out[self.sign == 0] = 0.0
        return out


@dataclass
class ShiftModel:
    input_shape: tuple
    layers: list
    shift_layers: list

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features


def to_shift_form(model: QuantizedModel) -> ShiftModel:
    """Decode the packed codewords straight into sign/exponent form."""
    shift = []
    for q in model.qlayers:
        sign, exponent = q.signs_exponents()
        shift.append(ShiftLayer(sign, exponent, q.bias.copy()))
    return ShiftModel(tuple(model.input_shape), list(model.layers), shift)


def reconstruct(shift_model: ShiftModel) -> list[np.ndarray]:
    """Float weight tensors of every learnable layer."""
    return [s.weights() for s in shift_model.shift_layers]


def shift_accumulate(cols_t: np.ndarray, sign: np.ndarray, exponent: np.ndarray) -> np.ndarray:
    """Multiply-free counterpart of :func:`inq.engine.accumulate`.

    ``cols_t`` is ``(K, N)``; ``sign`` and ``exponent`` are ``(K, M)``.
    """
    k_dim, n = cols_t.shape
    out = np.zeros((n, sign.shape[1]))
    for k in range(k_dim):
        x = cols_t[k][:, None]
        with np.errstate(over="ignore"):  # reported by the caller's finiteness check
            term = np.ldexp(x, exponent[k])
        np.negative(term, out=term, where=sign[k] < 0)
        zero = sign[k] == 0
        if zero.any():
            # x * (+0.0) carries the sign of x
            term[:, zero] = np.copysign(0.0, x)
        out += term
    return out


def _finite(y: np.ndarray, i: int, kind: str) -> np.ndarray:
    if not np.isfinite(y).all():
        raise OverflowError(f"layer {i} ({kind}): exponent scaling overflowed")
    return y


def shift_forward(model: ShiftModel, batch: np.ndarray) -> np.ndarray:
    """Logits computed with sign flips and exponent scaling only."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != len(model.input_shape) + 1 or x.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"layer 0 ({model.layers[0].kind}): batch shape {x.shape} "
                         f"does not match network input {tuple(model.input_shape)}")
    if not np.isfinite(x).all():
        raise ValueError("batch contains non-finite values")
    l = 0
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "Dense":
            s = model.shift_layers[l]
            l += 1
            x = _finite(shift_accumulate(x.T, s.sign, s.exponent) + s.bias, i, kind)
        elif kind == "Conv2D":
            s = model.shift_layers[l]
            l += 1
            cols_t = im2col(x, layer)
            _, ho, wo = layer.output_shape(x.shape[1:])
            cout = s.sign.shape[0]
            acc = shift_accumulate(cols_t, s.sign.reshape(cout, -1).T,
                                   s.exponent.reshape(cout, -1).T)
            x = _finite(conv_output(acc, s.bias, x.shape[0], ho, wo), i, kind)
        elif kind == "ReLU":
            x = np.maximum(x, 0.0)
        elif kind == "MaxPool2D":
            x = maxpool_forward(x, layer.size)[0]
        elif kind == "Flatten":
            x = x.reshape(x.shape[0], -1)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {kind}")
    return x


def shift_evaluate(model: ShiftModel, data: Dataset, batch_size: int = 256) -> dict:
    if len(data) == 0:
        logits = np.zeros((0, model.num_classes))
    else:
        logits = np.concatenate([shift_forward(model, data.inputs[i:i + batch_size])
                                 for i in range(0, len(data), batch_size)])
    out = {"top1": topk_accuracy(logits, data.labels, 1)}
    if model.num_classes >= 5:
        out["top5"] = topk_accuracy(logits, data.labels, 5)
    return out


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


def layer_names(layers) -> list[str]:
    """``Conv1``, ``Conv2``, ``FC3``... numbered over learnable layers."""
    names = []
    for layer in layers:
        if layer.learnable:
            prefix = "Conv" if layer.kind == "Conv2D" else "FC"
            names.append(f"{prefix}{len(names) + 1}")
    return names


def effective_bitwidth(weights) -> int:
    """Width of a fixed-length code for the distinct values actually used."""
    distinct = np.unique(np.asarray(weights)).size
    return max(distinct - 1, 0).bit_length()


def level_label(value: float) -> str:
    if value == 0:
        return "0"
    _, e = np.frexp(abs(value))
    return f"{'-' if value < 0 else ''}2^{int(e) - 1}"


def _level_order(v: float):
    # negatives by growing magnitude, then zero, then positives ascending
    return (0, abs(v)) if v < 0 else ((1, 0.0) if v == 0 else (2, v))


def _pct_cell(p: float) -> str:
    return f"{p:.2f}%" if p >= 0.01 else f"{p:.1g}%"


def _render(header, rows) -> str:
    widths = [max(len(str(r[c])) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class DistributionTable:
    names: list
    counts: list  # per layer: {level: count}
    sizes: list

    def percentages(self) -> list[dict]:
        return [{v: 100.0 * c / n for v, c in counts.items()}
                for counts, n in zip(self.counts, self.sizes)]

    def levels(self) -> list[float]:
        return sorted({v for c in self.counts for v in c}, key=_level_order)

    def bitwidths(self) -> list[int]:
        return [max(len(c) - 1, 0).bit_length() for c in self.counts]

    def to_text(self) -> str:
        pct = self.percentages()
        rows = [[level_label(v)] + [_pct_cell(p[v]) if v in p else "-" for p in pct]
                for v in self.levels()]
        rows.append(["Total"] + [f"{sum(p.values()):.0f}%" for p in pct])
        rows.append(["Bit-width"] + [str(b) for b in self.bitwidths()])
        return _render(["Weight"] + self.names, rows)

    def to_csv(self) -> str:
        pct = self.percentages()
        rows = [[level_label(v)] + [repr(p.get(v, 0.0)) for p in pct] for v in self.levels()]
        return _csv(["level"] + self.names, rows)


def distribution(model) -> DistributionTable:
    """Share of weights at each grid level, per learnable layer."""
    weights = _layer_weights(model)
    counts = []
    for w in weights:
        values, n = np.unique(w, return_counts=True)
        counts.append({float(v): int(c) for v, c in zip(values, n)})
    return DistributionTable(layer_names(model.layers), counts, [w.size for w in weights])


def _layer_weights(model):
    if isinstance(model, QuantizedModel):
        return [q.weights() for q in model.qlayers]
    if isinstance(model, ShiftModel):
        return reconstruct(model)
    return [w for w, _ in model.params]


@dataclass
class CompressionReport:
    """Storage of the weight tensors against 32-bit floats.

    ``ratio`` uses the variable-length code (1 bit per zero, ``b`` bits per
    nonzero weight); ``fixed_ratio`` charges ``b`` bits to every weight.
    Biases and container metadata are not counted.
    """

    rows: list = field(default_factory=list)
    total: dict = field(default_factory=dict)

    HEADER = ["layer", "count", "zeros", "b", "encoded_bits", "ratio", "fixed_ratio"]

    def to_text(self) -> str:
        def fmt(r):
            return [r["layer"], r["count"], r["zeros"], r["b"], r["encoded_bits"],
                    f"{r['ratio']:.2f}x", f"{r['fixed_ratio']:.2f}x"]
        return _render(self.HEADER, [fmt(r) for r in self.rows + [self.total]])

    def to_csv(self) -> str:
        return _csv(self.HEADER, [[r[k] for k in self.HEADER] for r in self.rows + [self.total]])


def compression_report(model: QuantizedModel) -> CompressionReport:
    rows = []
    for name, q in zip(layer_names(model.layers), model.qlayers):
        w = q.weights()
        zeros = int(np.count_nonzero(w == 0))
        bits = encoded_bits(w, q.b)
        rows.append({"layer": name, "count": w.size, "zeros": zeros, "b": q.b,
                     "encoded_bits": bits, "ratio": 32 * w.size / bits,
                     "fixed_ratio": 32 * w.size / (w.size * q.b)})
    count = sum(r["count"] for r in rows)
    bits = sum(r["encoded_bits"] for r in rows)
    fixed = sum(r["count"] * r["b"] for r in rows)
    bs = {r["b"] for r in rows}
    total = {"layer": "Total", "count": count, "zeros": sum(r["zeros"] for r in rows),
             "b": bs.pop() if len(bs) == 1 else "mixed", "encoded_bits": bits,
             "ratio": 32 * count / bits, "fixed_ratio": 32 * count / fixed}
    return CompressionReport(rows, total)
