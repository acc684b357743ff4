"""Round-to-nearest and GPTQ weight quantization.

GPTQ quantizes one column at a time and pushes the rounding error of each
column onto the columns not yet quantized, weighted by the Cholesky factor of
the inverse Hessian of the layer inputs. Group scales are recomputed from the
already-compensated weights whenever a new group starts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DimensionError, no_grad
from .bitpack import PER_ROW, SUPPORTED_BITS, PackedMatrix, QuantParams, dequantize, pack

logger = logging.getLogger(__name__)

# projection groups quantized in order inside a block when true_sequential is on
SEQUENTIAL_STAGES = (("q", "k", "v"), ("o",), ("mlp_gate", "mlp_up"), ("mlp_down",))


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass
class QuantizeConfig:
    bits: int = 4
    group_size: int = 16
    act_order: bool = True
    true_sequential: bool = True
    percdamp: float = 0.01
    calib_samples: int = 128
    seed: int = 0
    method: str = "gptq"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size != PER_ROW and self.group_size <= 0:
            raise ValueError(f"group_size must be positive or PER_ROW ({PER_ROW}), got {self.group_size}")
        if not 0.0 < self.percdamp < 1.0:
            raise ValueError(f"percdamp must be in (0, 1), got {self.percdamp}")
        if self.calib_samples < 1:
            raise ValueError("calib_samples must be >= 1")
        if self.method not in ("gptq", "rtn"):
            raise ValueError(f"method must be 'gptq' or 'rtn', got {self.method!r}")


@dataclass
class Hessian:
    """Running ``(2/n) * sum(x x^T)`` over calibration rows."""
    matrix: np.ndarray
    n: int = 0

    @classmethod
    def zeros(cls, width: int) -> "Hessian":
        return cls(np.zeros((width, width), dtype=np.float64), 0)

    @property
    def width(self) -> int:
        return self.matrix.shape[0]


def accumulate_hessian(h: Hessian, x_batch) -> Hessian:
    """Fold a batch of input rows ``[m, in]`` into the running mean, in place."""
    x = np.asarray(getattr(x_batch, "data", x_batch), dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if x.shape[1] != h.width:
        raise DimensionError(f"hessian of width {h.width} cannot take rows of width {x.shape[1]}")
    m = x.shape[0]
    if m == 0:
        return h
    total = h.n + m
    h.matrix *= h.n / total
    h.matrix += (2.0 / total) * (x.T @ x)
    h.n = total
    return h


def _group_params(w: np.ndarray, maxq: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row scale and zero-point over the columns of ``w``.

    The range is widened to include 0 so the zero-point is always
    representable; scales are rounded to float32 because that is what gets
    stored.
    """
    lo = np.minimum(w.min(axis=1), 0.0)
    hi = np.maximum(w.max(axis=1), 0.0)
    scale = (hi - lo) / maxq
    scale = np.where(hi == lo, 1.0, scale).astype(np.float32).astype(np.float64)
    zero = np.clip(np.round(-lo / scale), 0, maxq)
    return scale, zero


def _quantize(w: np.ndarray, scale: np.ndarray, zero: np.ndarray, maxq: int) -> np.ndarray:
    return np.clip(np.round(w / scale + zero), 0, maxq)


def layer_error(w: np.ndarray, w_hat: np.ndarray, h) -> float:
    """``trace((W - W_hat) H (W - W_hat)^T)``."""
    hm = h.matrix if isinstance(h, Hessian) else np.asarray(h, dtype=np.float64)
    d = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    return float(np.einsum("ij,jk,ik->", d, hm, d))


def _finish(q: np.ndarray, scales: List[np.ndarray], zeros: List[np.ndarray], cfg: QuantizeConfig,
            perm: Optional[np.ndarray]) -> Tuple[PackedMatrix, QuantParams]:
    # q is in stored (permuted) order; pack wants logical order
    q = q if perm is None else q[:, np.argsort(perm)]
    pm = pack(q.astype(np.int64), cfg.bits, perm=perm)
    qp = QuantParams(cfg.group_size, np.stack(scales, axis=1), np.stack(zeros, axis=1).astype(np.uint32))
    return pm, qp


def _check_weight(w) -> np.ndarray:
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"expected a 2-D weight, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight matrix contains non-finite values")
    return w


def rtn_quantize(w, cfg: QuantizeConfig) -> Tuple[PackedMatrix, QuantParams]:
    """Round every weight to the nearest point of its group's grid."""
    w = _check_weight(w)
    maxq = (1 << cfg.bits) - 1
    n_in = w.shape[1]
    gs = n_in if cfg.group_size == PER_ROW else cfg.group_size
    q = np.empty_like(w)
    scales, zeros = [], []
    for c0 in range(0, n_in, gs):
        blk = w[:, c0:c0 + gs]
        s, z = _group_params(blk, maxq)
        q[:, c0:c0 + gs] = _quantize(blk, s[:, None], z[:, None], maxq)
        scales.append(s)
        zeros.append(z)
    return _finish(q, scales, zeros, cfg, None)


def gptq_quantize(w, h: Hessian, cfg: QuantizeConfig) -> Tuple[PackedMatrix, QuantParams, float]:
    """Quantize ``w[out, in]`` with Hessian-guided error compensation.

    Returns the packed weights, their quantization parameters and the layer
    error ``trace(dW H dW^T)`` measured with the undamped Hessian.
    """
    w0 = _check_weight(w)
    hm = h.matrix if isinstance(h, Hessian) else np.asarray(h, dtype=np.float64)
    n_out, n_in = w0.shape
    if hm.shape != (n_in, n_in):
        raise DimensionError(f"hessian {hm.shape} does not match weight {w0.shape}")
    maxq = (1 << cfg.bits) - 1
    gs = n_in if cfg.group_size == PER_ROW else cfg.group_size

    W = w0.copy()
    H = hm.copy()
    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    W[:, dead] = 0.0

    perm = None
    if cfg.act_order:
        order = np.argsort(-np.diag(H), kind="stable")
        if not np.array_equal(order, np.arange(n_in)):
            perm = order
            W = W[:, perm]
            H = H[np.ix_(perm, perm)]

    H[np.diag_indices(n_in)] += cfg.percdamp * np.mean(np.diag(H))
    try:
        L = np.linalg.cholesky(H)
        Linv = np.linalg.inv(L)
        U = np.linalg.cholesky(Linv.T @ Linv).T
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(
            f"Cholesky factorization failed after damping with percdamp={cfg.percdamp}; "
            "try a larger percdamp") from exc

    q = np.empty_like(W)
    scales, zeros = [], []
    s = z = None
    for i in range(n_in):
        if i % gs == 0:
            s, z = _group_params(W[:, i:i + gs], maxq)
            scales.append(s)
            zeros.append(z)
        col = W[:, i]
        qi = _quantize(col, s, z, maxq)
        q[:, i] = qi
        err = (col - (qi - z) * s) / U[i, i]
        if i + 1 < n_in:
            W[:, i + 1:] -= np.outer(err, U[i, i + 1:])

    pm, qp = _finish(q, scales, zeros, cfg, perm)
    err_total = layer_error(w0, dequantize(pm, qp, dtype=np.float64), hm)
    return pm, qp, err_total


def quantize_layer(w, h: Optional[Hessian], cfg: QuantizeConfig) -> Tuple[PackedMatrix, QuantParams, float]:
    if cfg.method == "rtn" or h is None:
        pm, qp = rtn_quantize(w, cfg)
        if h is None:
            return pm, qp, float("nan")
        return pm, qp, layer_error(w, dequantize(pm, qp, dtype=np.float64), h)
    return gptq_quantize(w, h, cfg)


def _batches(tokens: np.ndarray, batch_size: int) -> Iterable[np.ndarray]:
    for i in range(0, tokens.shape[0], batch_size):
        yield tokens[i:i + batch_size]


def quantize_model(model, calib: np.ndarray, cfg: QuantizeConfig, batch_size: int = 16):
    """Replace every block projection of a copy of ``model`` with packed weights.

    ``calib`` is an int array ``[n, T]`` of calibration sequences. Blocks are
    processed in order and each block sees inputs produced by the already
    quantized blocks before it. With ``true_sequential`` the projections of a
    block are quantized in stages so that later projections collect their
    Hessians from the outputs of already-quantized earlier ones.

    Returns ``(quantized_model, layer_errors)``.
    """
    calib = np.asarray(calib)
    if calib.ndim != 2 or calib.shape[0] == 0:
        raise ValueError("calibration set must be a non-empty [n, T] token array")
    qmodel = model.copy()
    errors: Dict[str, float] = {}
    for bi, block in enumerate(qmodel.blocks):
        slots = block.slots()
        if cfg.true_sequential:
            stages: Sequence[Sequence[str]] = SEQUENTIAL_STAGES
        else:
            stages = (tuple(slots),)
        for stage in stages:
            hessians = {}
            if cfg.method == "gptq":
                hessians = {name: Hessian.zeros(slots[name].in_features) for name in stage}
                for name in stage:
                    slots[name].observer = (lambda x, hh=hessians[name]: accumulate_hessian(hh, x))
                try:
                    with no_grad():
                        for batch in _batches(calib, batch_size):
                            qmodel.forward(batch, upto_block=bi + 1)
                finally:
                    for name in stage:
                        slots[name].observer = None
            for name in stage:
                slot = slots[name]
                pm, qp, err = quantize_layer(slot.weight.data, hessians.get(name), cfg)
                slot.set_quantized(pm, qp)
                key = f"blocks.{bi}.{name}"
                errors[key] = err
                logger.info("quantized %s: layer_error=%.6g", key, err)
    return qmodel, errors
