"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the toy transformer, the adapters and the
distillation losses are provided. Every op records a node holding its parents
and a closure mapping the output gradient to input gradients; ``backward``
orders the recorded nodes topologically (a :class:`Tape`) and replays them in
reverse.

Broadcasting is deliberately limited to scalar operands and bias-style
addition along the last axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (non-scalar loss, reuse, ...)."""


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    FP64 exists for gradient checks; everything else runs in FP32.
    """
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A dense floating point array that can take part in a recorded graph.

    ``grad`` is a plain ndarray of the same shape, populated by
    :func:`backward` on leaves with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _raise_item(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward_fn)
    return out


class Tape:
    """Operations reachable from an output, in topological order.

    Every node appears after all of its inputs, so iterating the tape in
    reverse is a valid backward schedule.
    """

    def __init__(self, tensors: list):
        self.tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is released afterwards; calling backward twice on the same
    recording raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if loss._node is not None and loss._node.consumed:
        raise GraphError("graph already backpropagated; run the forward pass again")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g
            continue
        if node.consumed:
            raise GraphError("graph already backpropagated; run the forward pass again")
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in tape.tensors:
        if t._node is not None:
            t._node.consumed = True
            t._node.backward_fn = _consumed


def _consumed(g):
    raise GraphError("graph already backpropagated; run the forward pass again")


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    """Elementwise sum. ``b`` may be a scalar or a bias over the last axis."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return _record(a.data + b.data, (a, b), bw, "add_bias")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not compatible")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return _record(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _record(out, (x,), bw, "silu")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator] = None,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout. Pass either an explicit keep-``mask`` or an ``rng``."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mask is None:
        if rng is None:
            raise ValueError("dropout needs an rng or a mask")
        mask = rng.random(x.shape) >= p
    keep = mask.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(x.dtype, copy=True),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, k]`` and ``b[..., k, n]``.

    Leading batch dimensions, if any, must match exactly.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x[..., in]`` and ``weight[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[0])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, bw, "linear")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ids may have any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")
    flat = ids.reshape(-1)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, flat, g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# normalization and attention helpers


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """RMS normalization over the last axis followed by a learned gain."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise DimensionError(f"rmsnorm: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    n = xd.shape[-1]

    def bw(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0) if weight.requires_grad else None
        gxhat = g * wd
        gx = inv * (gxhat - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _record(xhat * wd, (x, weight), bw, "rmsnorm")


def causal_mask(scores: Tensor) -> Tensor:
    """Set entries above the diagonal of the last two axes to -inf."""
    t1, t2 = scores.shape[-2:]
    if t1 != t2:
        raise DimensionError(f"causal_mask: needs square trailing axes, got {scores.shape}")
    future = np.triu(np.ones((t1, t2), dtype=bool), k=1)
    out = np.where(future, -np.inf, scores.data).astype(scores.dtype, copy=False)
    return _record(out, (scores,), lambda g: (np.where(future, 0.0, g).astype(g.dtype, copy=False),),
                   "causal_mask")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax. NaN inputs propagate to NaN outputs."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), bw, "softmax")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    lp = _log_softmax_np(x.data)
    p = np.exp(lp)
    return _record(lp, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None,
                  reduction: str = "mean") -> Tensor:
    """Next-token cross entropy ``-log softmax(logits)[t, target_t]``.

    ``logits`` is ``[..., V]`` and ``targets`` has the leading shape. Positions
    where ``mask`` is False are ignored. ``reduction`` is ``"mean"`` (over
    counted positions) or ``"sum"``.
    """
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    if t.size and (t.min() < 0 or t.max() >= v):
        bad = int(np.flatnonzero((t < 0) | (t >= v))[0])
        pos = tuple(int(i) for i in np.unravel_index(bad, np.shape(targets)))
        raise IndexError(f"cross_entropy: target {int(t[bad])} at position {pos} outside [0, {v})")
    w = np.ones(t.shape[0], dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype).reshape(-1)
    count = float(w.sum())
    lp = _log_softmax_np(z)
    rows = np.arange(t.shape[0])
    nll = -lp[rows, t]
    total = float((nll * w).sum(dtype=np.float64))
    if reduction == "mean":
        denom = max(count, 1.0)
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        gz = np.exp(lp)
        gz[rows, t] -= 1.0
        gz *= (w * (g / denom))[:, None]
        return (gz.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _record(np.asarray(total / denom, dtype=z.dtype), (logits,), bw, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits, mask: Optional[np.ndarray] = None,
                  reduction: str = "mean") -> Tensor:
    """``KL(p || q) = sum_i p_i (log p_i - log q_i)`` per position.

    Both arguments are logits over the last axis. ``q_logits`` may be a plain
    array (frozen teacher or cached targets), in which case no gradient flows
    to it. Reduced by mean or sum over positions.
    """
    qd = q_logits.data if isinstance(q_logits, Tensor) else np.asarray(q_logits)
    if p_logits.shape != qd.shape:
        raise DimensionError(f"kl_divergence: shapes {p_logits.shape} and {qd.shape} differ")
    v = p_logits.shape[-1]
    lp = _log_softmax_np(p_logits.data.reshape(-1, v))
    lq = _log_softmax_np(qd.reshape(-1, v).astype(lp.dtype, copy=False))
    p = np.exp(lp)
    diff = lp - lq
    row = (p * diff).sum(axis=-1)
    w = np.ones(row.shape[0], dtype=lp.dtype) if mask is None else np.asarray(mask, dtype=lp.dtype).reshape(-1)
    if reduction == "mean":
        denom = max(float(w.sum()), 1.0)
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = float((row * w).sum(dtype=np.float64)) / denom
    parents = (p_logits, q_logits) if isinstance(q_logits, Tensor) else (p_logits,)

    def bw(g):
        scale = (w * (g / denom))[:, None]
        gp = (p * (diff - row[:, None]) * scale).reshape(p_logits.shape).astype(p_logits.dtype, copy=False)
        if len(parents) == 1:
            return (gp,)
        gq = ((np.exp(lq) - p) * scale).reshape(p_logits.shape).astype(qd.dtype, copy=False)
        return gp, gq

    return _record(np.asarray(total, dtype=lp.dtype), parents, bw, "kl_divergence")


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-3,
                   indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``t``.

    Only the flat ``indices`` are perturbed (all by default); other entries of
    the returned array are zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps near-zero gradients from dominating through round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor), initial=0.0))


def normwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / ||n||`` over the checked entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), floor))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: Optional[float] = None,
              max_checks: int = 24, seed: int = 0, metric: str = "normwise",
              reference_dtype=None) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    A non-scalar output is reduced with a fixed random projection ``sum(R * out)``;
    the finite-difference side evaluates that reduction in float64 so FP32
    rounding of the sum does not swamp the difference quotient. Up to
    ``max_checks`` randomly chosen entries of every input that requires a
    gradient are checked. An input whose analytic and numeric gradients are
    both below the stencil's rounding resolution (about ``eps * |f| / h`` per
    entry, e.g. every sampled entry sits behind a mask) counts as agreeing;
    a ratio of two rounding residues carries no information.
    ``metric`` is ``"normwise"`` (per input tensor) or
    ``"elementwise"`` (see :func:`relative_error`); in FP32 the forward pass
    itself rounds at ~1e-7, which only the norm-wise measure tolerates on
    near-zero entries.

    With ``reference_dtype`` set, the finite differences are taken on the same
    function with every input upcast to that dtype. Deep FP32 graphs accumulate
    enough forward rounding that differencing them at FP32 says more about the
    rounding than about the gradient; the upcast evaluation is an exact widening
    of the same parameters, so it is the sharper oracle for FP32 analytic
    gradients.
    """
    if metric not in ("normwise", "elementwise"):
        raise ValueError(f"unknown metric {metric!r}")
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.ndim else np.array(1.0)
    loss = sum_all(mul(out, Tensor(proj.astype(out.dtype)))) if out.ndim else out
    for t in inputs:
        t.grad = None
    backward(loss)
    grads = [None if t.grad is None else t.grad.reshape(-1).astype(np.float64) for t in inputs]

    saved = [t.data for t in inputs]
    if reference_dtype is not None:
        for t in inputs:
            t.data = t.data.astype(reference_dtype)
    ctx = default_dtype(reference_dtype) if reference_dtype is not None else contextlib.nullcontext()

    def value() -> float:
        return float((fn(*inputs).data.astype(np.float64) * proj).sum())

    worst = 0.0
    try:
        with ctx, no_grad():
            base = fn(*inputs).data
            eps = float(np.finfo(base.dtype).eps)
            scale = float(np.abs(base.astype(np.float64) * proj).sum())
            for t, g in zip(inputs, grads):
                if not t.requires_grad:
                    continue
                step = h if h is not None else (1e-4 if t.dtype == np.float64 else 1e-2)
                flat = t.data.reshape(-1)
                idx = rng.choice(flat.size, size=min(max_checks, flat.size), replace=False)
                analytic = np.zeros(flat.size) if g is None else g
                numeric = np.zeros(idx.size)
                for k, i in enumerate(idx):
                    orig = flat[i]
                    f = []
                    for off in (2, 1, -1, -2):
                        flat[i] = orig + off * step
                        f.append(value())
                    flat[i] = orig
                    # fourth-order stencil: truncation O(h^4)
                    numeric[k] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12.0 * step)
                resolution = 16 * eps * scale / step * np.sqrt(idx.size)
                if np.linalg.norm(analytic[idx]) <= resolution and np.linalg.norm(numeric) <= resolution:
                    continue
                err = normwise_error if metric == "normwise" else relative_error
                worst = max(worst, err(analytic[idx], numeric))
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
    return worst
