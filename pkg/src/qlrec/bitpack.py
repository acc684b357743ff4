"""Bit-packed integer weight matrices and fused dequantize-matmul kernels.

Logical values are laid out row-major over ``(out_features, in_features)`` and
written into a little-endian stream of 32-bit words, least significant bit
first. Value ``i`` occupies stream bits ``[i*b, (i+1)*b)``; a value may span two
words (this happens for ``b = 3``).

When an activation-order permutation is present, stored column ``j`` holds
logical column ``perm[j]`` and quantization groups run along the stored order.
All public functions return results in logical column order.

Dequantization is ``W[r, c] = (q[r, c] - zeros[r, g(c)]) * scales[r, g(c)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .autodiff import DimensionError, Tensor, _record

SUPPORTED_BITS = (2, 3, 4, 8)
PER_ROW = -1


class PackingError(ValueError):
    """Raised for malformed packed matrices or out-of-range values."""


def _n_words(n_values: int, bits: int) -> int:
    return math.ceil(n_values * bits / 32)


@dataclass(frozen=True, eq=False)
class PackedMatrix:
    out_features: int
    in_features: int
    bits: int
    words: np.ndarray
    perm: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise PackingError(f"unsupported bit width {self.bits}; expected one of {SUPPORTED_BITS}")
        expected = _n_words(self.out_features * self.in_features, self.bits)
        words = np.ascontiguousarray(self.words, dtype="<u4")
        if words.ndim != 1 or words.shape[0] != expected:
            raise PackingError(
                f"packed buffer holds {words.size} words, expected {expected} for "
                f"{self.out_features}x{self.in_features} at {self.bits} bits")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)
        if self.perm is not None:
            perm = np.asarray(self.perm, dtype=np.int64)
            if perm.shape != (self.in_features,) or not np.array_equal(np.sort(perm), np.arange(self.in_features)):
                raise PackingError("perm is not a permutation of the input columns")
            perm.setflags(write=False)
            object.__setattr__(self, "perm", perm)

    @property
    def shape(self) -> tuple:
        return (self.out_features, self.in_features)

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    @cached_property
    def _words64(self) -> np.ndarray:
        # one zero word of padding so a value at the end can read word+1
        return np.concatenate([self.words, np.zeros(1, dtype="<u4")]).astype(np.uint64)

    @cached_property
    def inv_perm(self) -> Optional[np.ndarray]:
        return None if self.perm is None else np.argsort(self.perm)

    @cached_property
    def logical_columns(self) -> np.ndarray:
        """Logical column held at each stored position."""
        return np.arange(self.in_features) if self.perm is None else self.perm

    def decode(self, flat_index: np.ndarray) -> np.ndarray:
        """Decode stored values at the given flat (row-major, stored order) indices."""
        pos = flat_index.astype(np.uint64) * np.uint64(self.bits)
        word = (pos >> np.uint64(5)).astype(np.int64)
        shift = pos & np.uint64(31)
        w = self._words64
        pair = w[word] | (w[word + 1] << np.uint64(32))
        return ((pair >> shift) & np.uint64((1 << self.bits) - 1)).astype(np.int64)

    def stored_block(self, col_start: int, col_stop: int, transposed: bool = False) -> np.ndarray:
        """Decode stored columns ``[col_start, col_stop)`` directly from the words.

        With ``transposed`` the block comes out as ``[cols, rows]`` without first
        materializing the row-major block.
        """
        rows = np.arange(self.out_features, dtype=np.int64)
        cols = np.arange(col_start, col_stop, dtype=np.int64)
        if transposed:
            idx = cols[:, None] + rows[None, :] * self.in_features
        else:
            idx = rows[:, None] * self.in_features + cols[None, :]
        return self.decode(idx)


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Per-(row, group) scales and integer zero-points.

    ``group_size == PER_ROW`` means one group spanning the whole row.
    """
    group_size: int
    scales: np.ndarray
    zeros: np.ndarray

    def __post_init__(self):
        scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        zeros = np.ascontiguousarray(self.zeros, dtype=np.uint32)
        if scales.ndim != 2 or scales.shape != zeros.shape:
            raise PackingError(f"scales {scales.shape} and zeros {zeros.shape} must be matching 2-D arrays")
        if not np.all(scales > 0):
            raise PackingError("scales must be strictly positive")
        if self.group_size != PER_ROW and self.group_size <= 0:
            raise PackingError(f"group size must be positive or PER_ROW, got {self.group_size}")
        scales.setflags(write=False)
        zeros.setflags(write=False)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zeros", zeros)

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    @property
    def nbytes(self) -> int:
        return self.scales.nbytes + self.zeros.nbytes

    def effective_group_size(self, in_features: int) -> int:
        return in_features if self.group_size == PER_ROW else self.group_size


def n_groups_for(in_features: int, group_size: int) -> int:
    return 1 if group_size == PER_ROW else math.ceil(in_features / group_size)


def check_compatible(pm: PackedMatrix, qp: QuantParams) -> None:
    expected = (pm.out_features, n_groups_for(pm.in_features, qp.group_size))
    if qp.scales.shape != expected:
        raise DimensionError(f"quant params shaped {qp.scales.shape}, expected {expected} for {pm.shape}")
    if np.any(qp.zeros >= (1 << pm.bits)):
        raise PackingError(f"zero-points must lie in [0, {1 << pm.bits})")


def group_index(pm: PackedMatrix, qp: QuantParams) -> np.ndarray:
    """Group id of every logical column."""
    gs = qp.effective_group_size(pm.in_features)
    stored_pos = np.arange(pm.in_features) if pm.perm is None else pm.inv_perm
    return stored_pos // gs


# ---------------------------------------------------------------------------
# packing


def pack(values, bits: int, perm: Optional[np.ndarray] = None) -> PackedMatrix:
    """Pack a logical integer matrix into 32-bit words.

    When ``perm`` is given, columns are stored in the order ``values[:, perm]``.
    """
    v = np.asarray(values)
    if v.ndim != 2:
        raise PackingError(f"expected a 2-D matrix, got shape {v.shape}")
    if bits not in SUPPORTED_BITS:
        raise PackingError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")
    bad = (v < 0) | (v >= (1 << bits))
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise PackingError(f"value {v[r, c]} at ({r}, {c}) outside [0, {1 << bits})")
    out_f, in_f = v.shape
    stored = v if perm is None else v[:, np.asarray(perm)]
    flat = stored.reshape(-1).astype(np.uint32)
    bit_stream = ((flat[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8).reshape(-1)
    n_words = _n_words(flat.size, bits)
    padded = np.zeros(n_words * 32, dtype=np.uint8)
    padded[: bit_stream.size] = bit_stream
    words = np.packbits(padded, bitorder="little").view("<u4")
    return PackedMatrix(out_f, in_f, bits, words, None if perm is None else np.asarray(perm))


def unpack_stored(pm: PackedMatrix) -> np.ndarray:
    """Unpack to stored column order (no permutation undone)."""
    n = pm.out_features * pm.in_features
    stream = np.unpackbits(pm.words.view(np.uint8), bitorder="little")[: n * pm.bits]
    weights = (1 << np.arange(pm.bits, dtype=np.int64))
    return (stream.reshape(n, pm.bits).astype(np.int64) @ weights).reshape(pm.out_features, pm.in_features)


def unpack(pm: PackedMatrix) -> np.ndarray:
    """Exact inverse of :func:`pack`, in logical column order."""
    stored = unpack_stored(pm)
    return stored if pm.perm is None else stored[:, pm.inv_perm]


def unpack_transposed(pm: PackedMatrix) -> np.ndarray:
    """``unpack(pm).T`` decoded directly in transposed order."""
    rows = np.arange(pm.out_features, dtype=np.int64)
    stored_pos = np.arange(pm.in_features, dtype=np.int64) if pm.perm is None else pm.inv_perm
    idx = stored_pos[:, None] + rows[None, :] * pm.in_features
    return pm.decode(idx)


def dequantize(pm: PackedMatrix, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    """Naive reference path: full unpack, then dequantize."""
    check_compatible(pm, qp)
    q = unpack(pm).astype(dtype)
    g = group_index(pm, qp)
    return (q - qp.zeros[:, g].astype(dtype)) * qp.scales[:, g].astype(dtype)


# ---------------------------------------------------------------------------
# fused kernels


def _group_bounds(pm: PackedMatrix, qp: QuantParams):
    gs = qp.effective_group_size(pm.in_features)
    for g in range(qp.n_groups):
        yield g, g * gs, min((g + 1) * gs, pm.in_features)


def fused_forward(x: np.ndarray, pm: PackedMatrix, qp: QuantParams,
                  bias: Optional[np.ndarray] = None) -> np.ndarray:
    """``x @ W.T + bias`` decoding one column group at a time."""
    check_compatible(pm, qp)
    if x.shape[-1] != pm.in_features:
        raise DimensionError(f"fused_forward: input {x.shape} vs packed {pm.shape}")
    dtype = x.dtype
    cols = pm.logical_columns
    out = np.zeros((x.shape[0], pm.out_features), dtype=dtype)
    for g, c0, c1 in _group_bounds(pm, qp):
        q = pm.stored_block(c0, c1).astype(dtype)
        w = (q - qp.zeros[:, g:g + 1].astype(dtype)) * qp.scales[:, g:g + 1].astype(dtype)
        xs = x[:, c0:c1] if pm.perm is None else x[:, cols[c0:c1]]
        out += xs @ w.T
    if bias is not None:
        out += bias
    return out


def fused_backward_input(grad_out: np.ndarray, pm: PackedMatrix, qp: QuantParams) -> np.ndarray:
    """``grad_out @ W``, decoding each group from the words in transposed order."""
    check_compatible(pm, qp)
    if grad_out.shape[-1] != pm.out_features:
        raise DimensionError(f"fused_backward_input: grad {grad_out.shape} vs packed {pm.shape}")
    dtype = grad_out.dtype
    cols = pm.logical_columns
    gin = np.empty((grad_out.shape[0], pm.in_features), dtype=dtype)
    for g, c0, c1 in _group_bounds(pm, qp):
        qt = pm.stored_block(c0, c1, transposed=True).astype(dtype)
        wt = (qt - qp.zeros[:, g].astype(dtype)) * qp.scales[:, g].astype(dtype)
        block = grad_out @ wt.T
        if pm.perm is None:
            gin[:, c0:c1] = block
        else:
            gin[:, cols[c0:c1]] = block
    return gin


def quant_linear(x: Tensor, pm: PackedMatrix, qp: QuantParams, bias: Optional[Tensor] = None) -> Tensor:
    """Differentiable linear layer over frozen packed weights.

    Gradients flow to ``x`` (and ``bias``); the packed weights never get one.
    """
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = fused_forward(x2, pm, qp, None if bias is None else bias.data)
    parents = (x,) if bias is None else (x, bias)

    def bw(g):
        g2 = g.reshape(-1, pm.out_features)
        gx = fused_backward_input(g2, pm, qp).reshape(x.shape)
        if bias is None:
            return (gx,)
        return gx, g2.sum(axis=0)

    return _record(out.reshape(*lead, pm.out_features), parents, bw, "quant_linear")
