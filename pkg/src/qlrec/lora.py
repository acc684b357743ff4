"""Low-rank adapters attached to linear projections.

An adapter adds ``(alpha / r) * B @ A @ dropout(x)`` to the output of its base
layer, with ``A[r, in]`` Gaussian and ``B[out, r]`` zero at initialization so a
freshly injected model computes exactly what the base model computes. Several
adapters may be stacked on one layer; their deltas add up. A frozen adapter
still contributes to the forward pass but receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, dropout, get_default_dtype, linear, mul

PROJECTIONS = ("q", "k", "v", "o", "mlp_gate", "mlp_up", "mlp_down")
ALL_TARGETS = frozenset(PROJECTIONS)


class InjectionError(ValueError):
    pass


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float = 16.0
    dropout_p: float = 0.05
    frozen: bool = False

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise InjectionError(f"adapter factors A{self.A.shape} and B{self.B.shape} do not chain")
        if self.r < 1:
            raise InjectionError("adapter rank must be >= 1")
        self.A.requires_grad = not self.frozen
        self.B.requires_grad = not self.frozen

    @classmethod
    def init(cls, in_features: int, out_features: int, r: int, alpha: float, dropout_p: float,
             rng: np.random.Generator) -> "LoraAdapter":
        dt = get_default_dtype()
        a = rng.normal(0.0, 0.02, size=(r, in_features)).astype(dt)
        b = np.zeros((out_features, r), dtype=dt)
        return cls(Tensor(a), Tensor(b), alpha=alpha, dropout_p=dropout_p)

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    @property
    def nbytes(self) -> int:
        return self.A.data.nbytes + self.B.data.nbytes

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]

    def freeze(self) -> None:
        self.frozen = True
        for t in (self.A, self.B):
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.A.requires_grad = True
        self.B.requires_grad = True

    def delta(self, x: Tensor, keep_mask: Optional[np.ndarray] = None) -> Tensor:
        """Adapter contribution for input ``x``; ``keep_mask`` enables dropout."""
        if keep_mask is not None and self.dropout_p > 0:
            x = dropout(x, self.dropout_p, mask=keep_mask)
        return mul(linear(linear(x, self.A), self.B), self.scaling)

    def astype(self, dtype) -> "LoraAdapter":
        return LoraAdapter(Tensor(self.A.data.astype(dtype)), Tensor(self.B.data.astype(dtype)),
                           self.alpha, self.dropout_p, self.frozen)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(Tensor(self.A.data.copy()), Tensor(self.B.data.copy()),
                           self.alpha, self.dropout_p, self.frozen)


@dataclass
class InjectionSpec:
    targets: Tuple[str, ...] = ("q", "v")
    r: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.05

    def __post_init__(self):
        if isinstance(self.targets, str):
            self.targets = tuple(t.strip() for t in self.targets.split(",") if t.strip())
        self.targets = tuple(self.targets)
        if not self.targets:
            raise InjectionError("injection needs at least one target")
        unknown = sorted(set(self.targets) - ALL_TARGETS)
        if unknown:
            raise InjectionError(f"unknown target(s) {unknown}; valid targets are {list(PROJECTIONS)}")
        if self.r < 1:
            raise InjectionError(f"rank must be >= 1, got {self.r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InjectionError(f"dropout must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def all_projections(cls, r: int = 32, alpha: float = 16.0, dropout_p: float = 0.05) -> "InjectionSpec":
        return cls(PROJECTIONS, r, alpha, dropout_p)

    def to_dict(self) -> dict:
        return {"targets": list(self.targets), "r": self.r, "alpha": self.alpha, "dropout_p": self.dropout_p}


@dataclass
class AdapterHandles:
    """The adapters created by one :func:`inject` call, keyed by slot path."""
    spec: InjectionSpec
    adapters: Dict[str, LoraAdapter] = field(default_factory=dict)

    def __iter__(self) -> Iterator[LoraAdapter]:
        return iter(self.adapters.values())

    def __len__(self) -> int:
        return len(self.adapters)

    def parameters(self) -> List[Tensor]:
        return [p for a in self.adapters.values() if not a.frozen for p in a.parameters()]

    @property
    def n_params(self) -> int:
        return sum(a.n_params for a in self.adapters.values())


def _projection_shapes(dims) -> Dict[str, Tuple[int, int]]:
    d, f = dims.d_model, dims.d_ff
    return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
            "mlp_gate": (f, d), "mlp_up": (f, d), "mlp_down": (d, f)}


def inject(model, spec: InjectionSpec, seed: int = 0) -> AdapterHandles:
    """Attach one new adapter to every targeted projection of every block."""
    shapes = _projection_shapes(model.config)
    for t in spec.targets:
        out_f, in_f = shapes[t]
        if spec.r > min(out_f, in_f):
            raise InjectionError(f"rank {spec.r} exceeds min(out, in) = {min(out_f, in_f)} for target {t!r}")
    rng = np.random.default_rng(seed)
    handles = AdapterHandles(spec)
    for bi, block in enumerate(model.blocks):
        slots = block.slots()
        for t in PROJECTIONS:
            if t not in spec.targets:
                continue
            slot = slots[t]
            ad = LoraAdapter.init(slot.in_features, slot.out_features, spec.r, spec.alpha, spec.dropout_p, rng)
            if model.dtype != ad.A.dtype:
                ad = ad.astype(model.dtype)
            slot.adapters.append(ad)
            handles.adapters[f"blocks.{bi}.{t}.adapters.{len(slot.adapters) - 1}"] = ad
    return handles


def param_count(spec: InjectionSpec, dims) -> int:
    """Trainable parameters added by ``spec`` on a model with dimensions ``dims``.

    ``dims`` needs ``n_layers``, ``d_model`` and ``d_ff``. When every target is
    a square ``d_model x d_model`` projection this is ``2 * L * d_model * r``
    with ``L`` the number of injected projections; otherwise the exact sum of
    ``r * (in + out)`` over targets.
    """
    shapes = _projection_shapes(dims)
    n_proj = dims.n_layers * len(spec.targets)
    if all(shapes[t] == (dims.d_model, dims.d_model) for t in spec.targets):
        return 2 * n_proj * dims.d_model * spec.r
    return dims.n_layers * sum(spec.r * (shapes[t][0] + shapes[t][1]) for t in spec.targets)


def freeze_adapters(handles: Iterable[LoraAdapter]) -> None:
    for ad in handles:
        ad.freeze()


def iter_adapters(model) -> Iterator[Tuple[str, LoraAdapter]]:
    for bi, block in enumerate(model.blocks):
        for name, slot in block.slots().items():
            for ai, ad in enumerate(slot.adapters):
                yield f"blocks.{bi}.{name}.adapters.{ai}", ad


def merge_report(model) -> Dict[str, float]:
    """Storage accounting of the block projections, in bytes.

    Embeddings, norms and the output head are not included.
    """
    packed = qparams = fp = adapters = 0
    n_weights = 0
    for block in model.blocks:
        for slot in block.slots().values():
            n_weights += slot.in_features * slot.out_features
            if slot.packed is not None:
                packed += slot.packed.nbytes
                qparams += slot.qparams.nbytes
                if slot.packed.perm is not None:
                    qparams += slot.packed.perm.size * 4
            else:
                fp += slot.weight.data.nbytes
            adapters += sum(a.nbytes for a in slot.adapters)
    base = packed + qparams + fp
    return {
        "bytes_packed": packed,
        "bytes_quant_params": qparams,
        "bytes_fp_weights": fp,
        "bytes_adapters": adapters,
        "n_weights": n_weights,
        "adapter_overhead": adapters / base if base else 0.0,
    }
