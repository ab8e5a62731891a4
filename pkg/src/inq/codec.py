"""Variable-length bit packing of power-of-two weights.

Codewords, written MSB first in flat row-major order::

    zero      -> 1
    +-2**e    -> 0 | sign (0 = +) | index (b-2 bits), e = n1 - index

The stream is padded with zero bits to a whole byte.
"""

from __future__ import annotations

import numpy as np

from .quantizer import QuantGrid


class CodecError(ValueError):
    """Malformed input to the encoder or decoder."""


def encoded_bits(weights, b: int) -> int:
    """Unpadded stream length: one bit per zero, ``b`` per nonzero."""
    w = np.asarray(weights)
    zeros = int(np.count_nonzero(w == 0))
    return zeros + (w.size - zeros) * b


def to_sign_exponent(weights, grid: QuantGrid):
    """Split grid values into ``(sign, exponent)`` int arrays; sign is 0 for zero.

    Raises :class:`CodecError` naming the first flat index not on the grid.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    ok = grid.contains(w)
    if not ok.all():
        i = int(np.argmin(ok))
        raise CodecError(f"weight {i} = {w[i]!r} is not a level of the grid "
                         f"(b={grid.b}, n1={grid.n1})")
    sign = np.sign(w).astype(np.int8)
    _, exp = np.frexp(np.abs(w))
    exponent = np.where(sign != 0, exp - 1, 0).astype(np.int32)
    return sign, exponent


def encode_layer(weights, grid: QuantGrid) -> tuple[bytes, int]:
    """Pack ``weights`` into ``(stream, nbits)`` where ``nbits`` excludes padding."""
    sign, exponent = to_sign_exponent(weights, grid)
    n, b = sign.size, grid.b
    index = grid.n1 - exponent
    # one row of b candidate bits per weight, then keep the codeword prefix
    bits = np.zeros((n, b), dtype=np.uint8)
    bits[:, 0] = sign == 0
    bits[:, 1] = sign < 0
    for j in range(b - 2):
        bits[:, 2 + j] = (index >> (b - 3 - j)) & 1
    lengths = np.where(sign == 0, 1, b)
    keep = np.arange(b)[None, :] < lengths[:, None]
    flat = bits[keep]
    return np.packbits(flat).tobytes(), int(flat.size)


def decode_signs_exponents(stream: bytes, grid: QuantGrid, count: int):
    """Parse ``count`` codewords into ``(sign, exponent)`` arrays."""
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8)).tolist()
    b, n1 = grid.b, grid.n1
    n_exp = 2 ** (b - 2)
    sign = np.zeros(count, dtype=np.int8)
    exponent = np.zeros(count, dtype=np.int32)
    pos = 0
    total = len(bits)
    for i in range(count):
        if pos >= total:
            raise CodecError(f"stream truncated at codeword {i} of {count}")
        if bits[pos]:
            pos += 1
            continue
        if pos + b > total:
            raise CodecError(f"stream truncated inside codeword {i} of {count}")
        idx = 0
        for bit in bits[pos + 2:pos + b]:
            idx = (idx << 1) | bit
        if idx >= n_exp:  # pragma: no cover - b-2 bits cannot exceed this
            raise CodecError(f"exponent index {idx} out of range at codeword {i}")
        sign[i] = -1 if bits[pos + 1] else 1
        exponent[i] = n1 - idx
        pos += b
    return sign, exponent


def from_sign_exponent(sign, exponent) -> np.ndarray:
    mag = np.ldexp(1.0, np.asarray(exponent, dtype=np.int32))
    out = np.where(np.asarray(sign) < 0, -mag, mag)
    out[np.asarray(sign) == 0] = 0.0
    return out


def decode_layer(stream: bytes, grid: QuantGrid, count: int, shape=None) -> np.ndarray:
    """Inverse of :func:`encode_layer`."""
    sign, exponent = decode_signs_exponents(stream, grid, count)
    out = from_sign_exponent(sign, exponent)
    return out.reshape(shape) if shape is not None else out
