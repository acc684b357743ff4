"""A small byte-level decoder-only transformer.

Pre-norm blocks with RMS normalization, causal multi-head attention and a
SiLU-gated MLP, so each block owns seven injectable projections
(q, k, v, o, mlp_gate, mlp_up, mlp_down). Positions use a learned absolute
embedding. Every block projection lives in a :class:`Linear` slot that holds
either FP weights or packed quantized weights, plus a stack of adapters.
Embeddings, norms and the output head always stay in floating point.
"""

from __future__ import annotations

import copy as _copy
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .bitpack import PackedMatrix, QuantParams, quant_linear
from .lora import PROJECTIONS, LoraAdapter

VOCAB_SIZE = 256


class ContextOverflowError(ValueError):
    pass


@dataclass
class TransformerConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 176
    vocab_size: int = VOCAB_SIZE
    ctx_len: int = 128
    norm_type: str = "rmsnorm"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.ctx_len < 2:
            raise ValueError("ctx_len must be >= 2")
        if self.norm_type != "rmsnorm":
            raise ValueError(f"only 'rmsnorm' is implemented, got {self.norm_type!r}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class _DropoutContext:
    """Per-sample dropout masks that do not depend on how a batch is split."""

    def __init__(self, training: bool, keys: Optional[np.ndarray]):
        self.training = training and keys is not None
        self.keys = None if keys is None else np.asarray(keys, dtype=np.int64)

    def mask(self, slot_uid: int, adapter_idx: int, shape: tuple, p: float) -> Optional[np.ndarray]:
        if not self.training or p <= 0:
            return None
        per_sample = shape[1:]
        masks = [np.random.default_rng((int(k), slot_uid, adapter_idx)).random(per_sample) >= p
                 for k in self.keys]
        return np.stack(masks)


_EVAL = _DropoutContext(False, None)


class Linear:
    """One projection slot: FP or packed base weights plus stacked adapters."""

    def __init__(self, weight: Tensor, uid: int = 0):
        self.weight: Optional[Tensor] = weight
        self.packed: Optional[PackedMatrix] = None
        self.qparams: Optional[QuantParams] = None
        self.adapters: List[LoraAdapter] = []
        self.uid = uid
        self.observer: Optional[Callable[[np.ndarray], None]] = None
        self._shape = weight.shape

    @property
    def out_features(self) -> int:
        return self._shape[0]

    @property
    def in_features(self) -> int:
        return self._shape[1]

    @property
    def kind(self) -> str:
        base = "fp" if self.packed is None else "quantized"
        return base + "+adapters" if self.adapters else base

    @property
    def is_quantized(self) -> bool:
        return self.packed is not None

    def set_quantized(self, pm: PackedMatrix, qp: QuantParams) -> None:
        if pm.shape != self._shape:
            raise ValueError(f"packed shape {pm.shape} does not match slot shape {self._shape}")
        self.packed, self.qparams, self.weight = pm, qp, None

    def __call__(self, x: Tensor, ctx: _DropoutContext = _EVAL) -> Tensor:
        if self.observer is not None:
            self.observer(x.data.reshape(-1, self.in_features))
        if self.packed is None:
            y = ad.linear(x, self.weight)
        else:
            y = quant_linear(x, self.packed, self.qparams)
        for ai, adapter in enumerate(self.adapters):
            mask = ctx.mask(self.uid, ai, x.shape, adapter.dropout_p)
            y = ad.add(y, adapter.delta(x, mask))
        return y

    def copy(self) -> "Linear":
        new = Linear.__new__(Linear)
        new.weight = None if self.weight is None else Tensor(self.weight.data.copy(), self.weight.requires_grad)
        new.packed, new.qparams = self.packed, self.qparams
        new.adapters = [a.copy() for a in self.adapters]
        new.uid, new.observer, new._shape = self.uid, None, self._shape
        return new


class Block:
    def __init__(self, cfg: TransformerConfig, index: int, rng: np.random.Generator, dtype):
        d, f = cfg.d_model, cfg.d_ff
        std = 0.02
        resid_std = std / math.sqrt(2 * max(cfg.n_layers, 1))

        def w(out_f, in_f, s):
            return Tensor(rng.normal(0.0, s, size=(out_f, in_f)).astype(dtype), requires_grad=True)

        self.n_heads = cfg.n_heads
        self.attn_norm = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.mlp_norm = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        shapes = {"q": (d, d, std), "k": (d, d, std), "v": (d, d, std), "o": (d, d, resid_std),
                  "mlp_gate": (f, d, std), "mlp_up": (f, d, std), "mlp_down": (d, f, resid_std)}
        self._slots: Dict[str, Linear] = {}
        for pi, name in enumerate(PROJECTIONS):
            out_f, in_f, s = shapes[name]
            self._slots[name] = Linear(w(out_f, in_f, s), uid=index * 16 + pi)

    def slots(self) -> Dict[str, Linear]:
        return self._slots

    def __getattr__(self, name):
        slots = self.__dict__.get("_slots")
        if slots is not None and name in slots:
            return slots[name]
        raise AttributeError(name)

    def __call__(self, x: Tensor, ctx: _DropoutContext) -> Tensor:
        b, t, d = x.shape
        nh = self.n_heads
        hd = d // nh
        s = self._slots
        h = ad.rmsnorm(x, self.attn_norm)

        def heads(z):
            return ad.transpose(ad.reshape(z, (b, t, nh, hd)), (0, 2, 1, 3))

        q, k, v = heads(s["q"](h, ctx)), heads(s["k"](h, ctx)), heads(s["v"](h, ctx))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        att = ad.softmax(ad.causal_mask(scores), axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, s["o"](o, ctx))
        h = ad.rmsnorm(x, self.mlp_norm)
        gated = ad.mul(ad.silu(s["mlp_gate"](h, ctx)), s["mlp_up"](h, ctx))
        return ad.add(x, s["mlp_down"](gated, ctx))

    def norm_tensors(self) -> Dict[str, Tensor]:
        return {"attn_norm": self.attn_norm, "mlp_norm": self.mlp_norm}


class TransformerModel:
    """Causal byte-level language model.

    ``forward`` takes int tokens ``[B, T]`` (or ``[T]``) and returns logits
    ``[B, T, V]`` (or ``[T, V]``) as a recorded :class:`Tensor`.
    """

    def __init__(self, config: TransformerConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, v = config.d_model, config.vocab_size
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, size=(v, d)).astype(dtype), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(config.ctx_len, d)).astype(dtype), requires_grad=True)
        self.blocks = [Block(config, i, rng, dtype) for i in range(config.n_layers)]
        self.final_norm = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.head = Linear(Tensor(rng.normal(0.0, 0.02, size=(v, d)).astype(dtype), requires_grad=True), uid=-1)
        self.frozen = False

    @property
    def dtype(self):
        return self.tok_emb.dtype

    # -- forward -----------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise TypeError("tokens must be integers")
        if tokens.shape[-1] > self.config.ctx_len:
            raise ContextOverflowError(f"sequence length {tokens.shape[-1]} exceeds ctx_len {self.config.ctx_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise IndexError(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens

    def forward(self, tokens, training: bool = False, dropout_keys=None,
                upto_block: Optional[int] = None) -> Tensor:
        tokens = self._check_tokens(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        b, t = tokens.shape
        ctx = _DropoutContext(training, dropout_keys)
        pos = np.broadcast_to(np.arange(t), (b, t))
        x = ad.add(ad.embedding(self.tok_emb, tokens), ad.embedding(self.pos_emb, pos))
        blocks = self.blocks if upto_block is None else self.blocks[:upto_block]
        for block in blocks:
            x = block(x, ctx)
        if upto_block is not None:
            return x
        x = ad.rmsnorm(x, self.final_norm)
        logits = self.head(x)
        return ad.reshape(logits, (t, self.config.vocab_size)) if single else logits

    __call__ = forward

    def logits(self, tokens) -> np.ndarray:
        """Evaluation-mode logits as a plain array."""
        with no_grad():
            return self.forward(tokens).data

    # -- parameters ----------------------------------------------------------

    def named_base_tensors(self) -> Dict[str, Tensor]:
        """All FP tensors of the base model (no adapters, no packed weights)."""
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for bi, block in enumerate(self.blocks):
            for name, t in block.norm_tensors().items():
                out[f"blocks.{bi}.{name}"] = t
            for name, slot in block.slots().items():
                if slot.weight is not None:
                    out[f"blocks.{bi}.{name}.weight"] = slot.weight
        out["final_norm"] = self.final_norm
        out["head.weight"] = self.head.weight
        return out

    def adapters(self) -> List[LoraAdapter]:
        return [a for block in self.blocks for slot in block.slots().values() for a in slot.adapters]

    def all_tensors(self) -> List[Tensor]:
        ts = list(self.named_base_tensors().values())
        for a in self.adapters():
            ts.extend(a.parameters())
        return ts

    def trainable_parameters(self) -> List[Tensor]:
        return [t for t in self.all_tensors() if t.requires_grad]

    def freeze_base(self) -> None:
        for t in self.named_base_tensors().values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.all_tensors():
            t.grad = None

    def slot(self, path: str) -> Linear:
        """Look up ``blocks.<i>.<name>``."""
        _, bi, name = path.split(".")
        return self.blocks[int(bi)].slots()[name]

    @property
    def is_quantized(self) -> bool:
        return any(s.is_quantized for b in self.blocks for s in b.slots().values())

    # -- copies --------------------------------------------------------------

    def copy(self) -> "TransformerModel":
        new = TransformerModel.__new__(TransformerModel)
        new.config = _copy.deepcopy(self.config)
        new.tok_emb = Tensor(self.tok_emb.data.copy(), self.tok_emb.requires_grad)
        new.pos_emb = Tensor(self.pos_emb.data.copy(), self.pos_emb.requires_grad)
        new.final_norm = Tensor(self.final_norm.data.copy(), self.final_norm.requires_grad)
        new.head = self.head.copy()
        new.blocks = []
        for block in self.blocks:
            nb = Block.__new__(Block)
            nb.n_heads = block.n_heads
            nb.attn_norm = Tensor(block.attn_norm.data.copy(), block.attn_norm.requires_grad)
            nb.mlp_norm = Tensor(block.mlp_norm.data.copy(), block.mlp_norm.requires_grad)
            nb._slots = {k: s.copy() for k, s in block.slots().items()}
            new.blocks.append(nb)
        new.frozen = self.frozen
        return new

    def astype(self, dtype) -> "TransformerModel":
        """Copy with every FP tensor cast to ``dtype`` (packed weights untouched)."""
        new = self.copy()
        for t in new.all_tensors():
            t.data = t.data.astype(dtype)
        return new


def clone_as_teacher(model: TransformerModel) -> TransformerModel:
    """Frozen, forward-only FP copy of ``model``."""
    if model.is_quantized:
        raise ValueError("a teacher must be a full-precision model")
    teacher = model.copy()
    for t in teacher.all_tensors():
        t.requires_grad = False
        t.grad = None
    teacher.frozen = True
    return teacher


def generate(model: TransformerModel, prompt, max_new: int, temperature: float = 0.0,
             seed: int = 0) -> np.ndarray:
    """Extend ``prompt`` by ``max_new`` tokens; greedy when ``temperature == 0``."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    toks = [int(t) for t in np.asarray(prompt).reshape(-1)]
    if len(toks) + max_new > model.config.ctx_len:
        raise ContextOverflowError(
            f"prompt ({len(toks)}) + max_new ({max_new}) exceeds ctx_len {model.config.ctx_len}")
    rng = np.random.default_rng(seed)
    for _ in range(max_new):
        logits = model.logits(np.asarray(toks, dtype=np.int64)[None])[0, -1].astype(np.float64)
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            p = np.exp(z - z.max())
            nxt = int(rng.choice(p.size, p=p / p.sum()))
        toks.append(nxt)
    return np.asarray(toks, dtype=np.int64)


def fingerprint(model: TransformerModel) -> str:
    """SHA-256 over config, base tensors, packed weights and adapters."""
    import hashlib
    import json

    h = hashlib.sha256(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name, t in sorted(model.named_base_tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    for bi, block in enumerate(model.blocks):
        for name, slot in block.slots().items():
            if slot.packed is not None:
                h.update(f"blocks.{bi}.{name}.packed".encode())
                h.update(slot.packed.words.tobytes())
                h.update(slot.qparams.scales.tobytes())
                h.update(slot.qparams.zeros.tobytes())
                if slot.packed.perm is not None:
                    h.update(np.asarray(slot.packed.perm, dtype=np.uint32).tobytes())
            for ai, a in enumerate(slot.adapters):
                h.update(f"blocks.{bi}.{name}.adapters.{ai}".encode())
                h.update(np.ascontiguousarray(a.A.data).tobytes())
                h.update(np.ascontiguousarray(a.B.data).tobytes())
    return h.hexdigest()
