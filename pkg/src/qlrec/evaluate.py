"""Perplexity, inter-model KL divergence and compression accounting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import _log_softmax_np


@dataclass
class EvalReport:
    dataset: str
    perplexity: float
    tokens: int
    stride: int
    model_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _windows(n_tokens: int, ctx_len: int, stride: int):
    """Yield ``(begin, end, first_target)`` for strided sliding windows.

    Token ``j`` is scored in the first window that covers it with some
    context, so every token after the first is counted exactly once.
    """
    prev_end = 0
    begin = 0
    while True:
        end = min(begin + ctx_len, n_tokens)
        yield begin, end, max(prev_end, begin + 1)
        prev_end = end
        if end == n_tokens:
            return
        begin += stride


def _window_nll(logits: np.ndarray, tokens: np.ndarray, begin: int, end: int, first: int) -> float:
    lp = _log_softmax_np(logits[first - 1 - begin:end - 1 - begin].astype(np.float64))
    tgt = tokens[first:end]
    return float(-lp[np.arange(tgt.size), tgt].sum())


def nll_sum(model, tokens, stride: Optional[int] = None, batch_size: int = 32):
    """Total negative log-likelihood and number of scored tokens."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise ValueError("perplexity needs at least two tokens")
    ctx = model.config.ctx_len
    stride = ctx // 2 if stride is None else stride
    if not 1 <= stride <= ctx:
        raise ValueError(f"stride must be in [1, {ctx}], got {stride}")
    wins = list(_windows(tokens.size, ctx, stride))
    total = 0.0
    count = 0
    full = [w for w in wins if w[1] - w[0] == ctx]
    rest = [w for w in wins if w[1] - w[0] != ctx]
    for i in range(0, len(full), batch_size):
        chunk = full[i:i + batch_size]
        batch = np.stack([tokens[b:e] for b, e, _ in chunk])
        logits = model.logits(batch)
        for row, (b, e, f) in zip(logits, chunk):
            total += _window_nll(row, tokens, b, e, f)
            count += e - f
    for b, e, f in rest:
        logits = model.logits(tokens[b:e][None])[0]
        total += _window_nll(logits, tokens, b, e, f)
        count += e - f
    return total, count


def perplexity(model, tokens, stride: Optional[int] = None, batch_size: int = 32) -> float:
    """Strided sliding-window perplexity (default stride ``ctx_len // 2``).

    Windows of ``ctx_len`` tokens advance by ``stride``; only tokens not
    scored by an earlier window contribute.
    """
    total, count = nll_sum(model, tokens, stride, batch_size)
    return math.exp(total / count)


def evaluate(model, tokens, dataset: str = "test", stride: Optional[int] = None, model_id: str = "") -> EvalReport:
    stride = model.config.ctx_len // 2 if stride is None else stride
    total, count = nll_sum(model, tokens, stride)
    return EvalReport(dataset, math.exp(total / count), count, stride, model_id)


def sequences_ppl(model, seqs: np.ndarray, batch_size: int = 32) -> float:
    """Perplexity over independent sequences ``[n, T]`` (each scored from position 1)."""
    total = 0.0
    count = 0
    for i in range(0, seqs.shape[0], batch_size):
        batch = seqs[i:i + batch_size]
        lp = _log_softmax_np(model.logits(batch[:, :-1]).astype(np.float64))
        tgt = batch[:, 1:]
        total -= float(np.take_along_axis(lp, tgt[..., None], axis=-1).sum())
        count += tgt.size
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# KL between models


@dataclass
class KLReport:
    mean_per_position: float
    mean_sum_per_prompt: float
    n_prompts: int


def _kl_rows(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def kl_between_models(a, b, prompts: Sequence) -> KLReport:
    """Average ``KL(a || b)`` of next-token distributions over prompts.

    Reports both the per-position mean and the per-prompt sum over positions,
    each averaged across prompts. Note the divergence is not symmetric.
    """
    if a.config.vocab_size != b.config.vocab_size:
        raise ValueError("models have different vocabularies")
    means, sums = [], []
    for p in prompts:
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        la = _log_softmax_np(a.logits(p[None])[0].astype(np.float64))
        lb = _log_softmax_np(b.logits(p[None])[0].astype(np.float64))
        if la.shape != lb.shape:
            raise ValueError(f"logit shapes {la.shape} and {lb.shape} differ")
        rows = _kl_rows(la, lb)
        means.append(rows.mean())
        sums.append(rows.sum())
    if not means:
        raise ValueError("no prompts given")
    return KLReport(float(np.mean(means)), float(np.mean(sums)), len(means))


# ---------------------------------------------------------------------------
# compression accounting


def effective_precision(p_gptq: float, r_gptq: float, r_ours: float) -> float:
    """Nominal precision adjusted for adapter overhead: ``P * R_gptq / R_ours``."""
    return p_gptq * r_gptq / r_ours


@dataclass
class CompressionReport:
    bytes_quant: int
    bytes_scales: int
    bytes_adapters: int
    bytes_fp: int
    n_weights: int
    nominal_bits: float
    rate_gptq: float
    rate: float
    effective_precision: float
    adapter_overhead: float

    @property
    def total_bytes(self) -> int:
        return self.bytes_quant + self.bytes_scales + self.bytes_adapters + self.bytes_fp

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_bytes"] = self.total_bytes
        return d


def compression_report(model, fp_baseline_bits: int = 16) -> CompressionReport:
    """Storage of ``model`` against an FP baseline of the block projections.

    Rates cover the block projections only; embeddings, norms and the head are
    tallied in ``bytes_fp`` so that all byte fields add up to the serialized
    payload. Scales, zero-points and permutations count as quantization
    overhead. FP projection slots count at the baseline width for the rates.
    """
    packed = scales = adapters = 0
    fp_slot_bytes_baseline = 0
    n_weights = 0
    bits = set()
    for block in model.blocks:
        for slot in block.slots().values():
            n = slot.in_features * slot.out_features
            n_weights += n
            if slot.is_quantized:
                bits.add(slot.packed.bits)
                packed += slot.packed.nbytes
                scales += slot.qparams.nbytes
                if slot.packed.perm is not None:
                    scales += slot.packed.perm.size * 4
            else:
                fp_slot_bytes_baseline += n * fp_baseline_bits // 8
            adapters += sum(a.nbytes for a in slot.adapters)
    fp_bytes = sum(t.data.nbytes for t in model.named_base_tensors().values())
    baseline = n_weights * fp_baseline_bits / 8
    if len(bits) > 1:
        raise ValueError(f"mixed bit widths {sorted(bits)} are not supported")
    nominal = float(bits.pop()) if bits else float(fp_baseline_bits)
    base = packed + scales + fp_slot_bytes_baseline
    if baseline == 0:
        rate_gptq = rate = 1.0
    else:
        rate_gptq = baseline / base
        rate = baseline / (base + adapters)
    return CompressionReport(
        bytes_quant=packed, bytes_scales=scales, bytes_adapters=adapters, bytes_fp=fp_bytes,
        n_weights=n_weights, nominal_bits=nominal, rate_gptq=rate_gptq, rate=rate,
        effective_precision=effective_precision(nominal, rate_gptq, rate),
        adapter_overhead=adapters / base if base else 0.0)


def format_table(columns: Dict[str, Dict[str, float]], rows: Sequence[str]) -> str:
    """Aligned text table: one column per model variant, one row per metric."""
    names = list(columns)
    cells = [["metric"] + names]
    for r in rows:
        line = [r]
        for n in names:
            v = columns[n].get(r)
            if v is None:
                line.append("-")
            elif isinstance(v, str):
                line.append(v)
            elif r.lower().startswith("compression"):
                line.append(f"{v:.2f}x")
            else:
                line.append(f"{v:.4g}")
        cells.append(line)
    widths = [max(len(c[i]) for c in cells) for i in range(len(cells[0]))]
    out = []
    for k, c in enumerate(cells):
        out.append("  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(c, widths))))
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)
