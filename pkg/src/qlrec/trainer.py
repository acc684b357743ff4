"""Training loops.

* :func:`train_fp` pretrains the full-precision teacher on raw text.
* :func:`lrec_train` fits adapters on a quantized student so that its
  next-token distribution matches the teacher (KL) and the data (CE).
* :func:`emef_finetune` trains fresh adapters on instruction data with a
  CE loss restricted to completion tokens, leaving everything else frozen.
* :func:`ablation_run` reruns the error-correction loop with one knob changed.

All loops use decoupled-weight-decay Adam with a constant learning rate and
support gradient accumulation over micro-batches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .evaluate import format_table, perplexity, sequences_ppl
from .io.data import DEFAULT_TEMPLATE, InstructionSample, PromptTemplate, render_prompt
from .lora import AdapterHandles, InjectionSpec, freeze_adapters, inject
from .model import TransformerModel, fingerprint
from .quantizer import QuantizeConfig, quantize_model

logger = logging.getLogger(__name__)

# lambda_CE presets per bit width with lambda_KL = 1. The PAPER values assume a
# KL summed over long sequences; TOY values rebalance the two terms for the
# position-averaged KL used here: each is KL / CE measured on 512 calibration
# rows of a 4-layer byte model right after quantization, so the two weighted
# terms start at the same size.
PAPER_LAMBDA_CE = {4: 10.0, 3: 40.0, 2: 120.0}
TOY_LAMBDA_CE = {8: 1e-5, 4: 0.002, 3: 0.01, 2: 0.07}


class DivergenceError(RuntimeError):
    pass


class CacheMismatchError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_kl: float = 1.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_ce < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_kl == 0 and self.lambda_ce == 0:
            raise ValueError("lambda_kl and lambda_ce cannot both be zero")

    @classmethod
    def preset(cls, bits: int, scale: str = "toy") -> "LossConfig":
        table = {"paper": PAPER_LAMBDA_CE, "toy": TOY_LAMBDA_CE}[scale]
        if bits not in table:
            raise KeyError(f"no {scale} preset for {bits}-bit models; have {sorted(table)}")
        return cls(lambda_kl=1.0, lambda_ce=table[bits])


@dataclass
class OptimConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    micro_batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.micro_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.batch_size % self.micro_batch_size:
            raise ValueError(f"micro_batch_size={self.micro_batch_size} does not divide batch_size={self.batch_size}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params, oc: OptimConfig) -> "AdamW":
        return cls(params, oc.learning_rate, oc.betas, oc.eps, oc.weight_decay)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / (norm + 1e-12)
    return norm


# ---------------------------------------------------------------------------
# loss


def next_token_targets(tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Shifted targets and a mask that drops the last position of each row."""
    tokens = np.asarray(tokens)
    targets = np.zeros_like(tokens)
    targets[..., :-1] = tokens[..., 1:]
    mask = np.ones(tokens.shape, dtype=bool)
    mask[..., -1] = False
    return targets, mask


def _hybrid(student_logits: Tensor, teacher_logits, targets, lc: LossConfig,
            ce_mask=None, kl_mask=None) -> Tuple[Tensor, float, float]:
    """Loss tensor plus the CE and KL values (an inactive term is still measured)."""
    if lc.lambda_kl == 0 and lc.lambda_ce == 0:
        raise ValueError("lambda_kl and lambda_ce cannot both be zero")
    terms = []
    kl_val = ce_val = float("nan")
    if teacher_logits is not None:
        if lc.lambda_kl > 0:
            kl = ad.kl_divergence(student_logits, teacher_logits, kl_mask)
            terms.append(ad.mul(kl, lc.lambda_kl))
            kl_val = kl.item()
        else:
            with no_grad():
                kl_val = ad.kl_divergence(student_logits, teacher_logits, kl_mask).item()
    elif lc.lambda_kl > 0:
        raise ValueError("lambda_kl > 0 needs teacher logits")
    if lc.lambda_ce > 0:
        ce = ad.cross_entropy(student_logits, targets, ce_mask)
        terms.append(ad.mul(ce, lc.lambda_ce))
        ce_val = ce.item()
    else:
        with no_grad():
            ce_val = ad.cross_entropy(student_logits, targets, ce_mask).item()
    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, ce_val, kl_val


def hybrid_loss(student_logits: Tensor, teacher_logits, targets, lc: LossConfig, mask=None) -> Tensor:
    """``lambda_kl * KL(student || teacher) + lambda_ce * CE(student, targets)``.

    Both terms are averaged over the positions selected by ``mask`` (all
    positions by default). ``teacher_logits`` is a plain array or a frozen
    tensor and may be ``None`` when ``lambda_kl == 0``.
    """
    return _hybrid(student_logits, teacher_logits, targets, lc, mask, mask)[0]


# ---------------------------------------------------------------------------
# teacher logit cache


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_hash(tokens: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(tokens, dtype=np.int64))
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class TeacherLogitCache:
    """Full FP32 teacher logits ``[n, T, V]`` stored on disk, row ``i`` for sample ``i``."""
    path: Path
    manifest: dict
    logits: np.ndarray

    MANIFEST = "manifest.json"
    LOGITS = "logits.npy"

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.logits.shape)) * 4

    @property
    def teacher_hash(self) -> str:
        return self.manifest["teacher_hash"]

    def get(self, idx) -> np.ndarray:
        return np.array(self.logits[idx])

    def check(self, teacher: Optional[TransformerModel] = None, dataset: Optional[np.ndarray] = None) -> None:
        if teacher is not None and fingerprint(teacher) != self.teacher_hash:
            raise CacheMismatchError(f"teacher hash does not match the cache at {self.path}; rebuild the cache")
        if dataset is not None and dataset_hash(dataset) != self.manifest["dataset_hash"]:
            raise CacheMismatchError(f"dataset does not match the cache at {self.path}")

    @classmethod
    def load(cls, path: Union[str, Path], teacher: Optional[TransformerModel] = None,
             dataset: Optional[np.ndarray] = None) -> "TeacherLogitCache":
        path = Path(path)
        manifest = json.loads((path / cls.MANIFEST).read_text())
        logits = np.load(path / manifest["file"], mmap_mode="r")
        if list(logits.shape) != manifest["shape"] or logits.dtype != np.float32:
            raise CacheMismatchError(f"logit file at {path} does not match its manifest")
        cache = cls(path, manifest, logits)
        cache.check(teacher, dataset)
        return cache


def cache_teacher_logits(teacher: TransformerModel, dataset: np.ndarray, path: Union[str, Path],
                         batch_size: int = 1) -> TeacherLogitCache:
    """Run the frozen teacher over ``dataset [n, T]`` and store its logits.

    With the default ``batch_size=1`` each row equals ``teacher.logits(row)``
    bit for bit.
    """
    if teacher.trainable_parameters():
        raise ValueError("teacher must be frozen (see clone_as_teacher)")
    dataset = np.asarray(dataset, dtype=np.int64)
    if dataset.ndim != 2:
        raise ValueError("dataset must be [n, T]")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, t = dataset.shape
    shape = (n, t, teacher.config.vocab_size)
    fd, tmp = tempfile.mkstemp(dir=path, prefix="logits.", suffix=".npy")
    os.close(fd)
    try:
        out = np.lib.format.open_memmap(tmp, mode="w+", dtype=np.float32, shape=shape)
        for i in range(0, n, batch_size):
            out[i:i + batch_size] = teacher.logits(dataset[i:i + batch_size]).astype(np.float32)
        out.flush()
        del out
        os.replace(tmp, path / TeacherLogitCache.LOGITS)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    manifest = {"format": "qlrec-teacher-logits", "version": 1, "teacher_hash": fingerprint(teacher),
                "dataset_hash": dataset_hash(dataset), "shape": list(shape), "dtype": "float32",
                "file": TeacherLogitCache.LOGITS}
    _atomic_write_bytes(path / TeacherLogitCache.MANIFEST, json.dumps(manifest, indent=2).encode())
    logger.info("cached teacher logits %s (%.1f MB) at %s", shape, np.prod(shape) * 4 / 1e6, path)
    return TeacherLogitCache.load(path)


# ---------------------------------------------------------------------------
# shared loop pieces


@dataclass
class TrainResult:
    history: List[dict] = field(default_factory=list)
    handles: Optional[AdapterHandles] = None
    final_val_ppl: Optional[float] = None

    def write_csv(self, path: Union[str, Path], columns: Sequence[str] = ("step", "ce", "kl", "total", "val_ppl")) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
            w.writeheader()
            for row in self.history:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


class DivergenceMonitor:
    """Flags a run whose running mean loss stays above ``factor`` times its minimum.

    The running mean is an exponential average; the run is declared diverged
    once the condition has held for ``patience`` consecutive steps.
    """

    def __init__(self, factor: float = 3.0, patience: int = 200, decay: float = 0.95):
        self.factor, self.patience, self.decay = factor, patience, decay
        self.running: Optional[float] = None
        self.best = math.inf
        self.streak = 0

    def update(self, loss: float, step: int) -> None:
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")
        self.running = loss if self.running is None else self.decay * self.running + (1 - self.decay) * loss
        self.best = min(self.best, self.running)
        if self.running > self.factor * self.best:
            self.streak += 1
            if self.streak >= self.patience:
                raise DivergenceError(
                    f"running mean loss {self.running:.4g} has exceeded {self.factor}x its minimum "
                    f"{self.best:.4g} for {self.streak} consecutive steps (step {step})")
        else:
            self.streak = 0


def _dropout_keys(seed: int, epoch: int, idx: np.ndarray) -> np.ndarray:
    return (np.int64(seed) * 1_000_003 + epoch) * 10_000_019 + np.asarray(idx, dtype=np.int64)


def _batches(order: np.ndarray, oc: OptimConfig):
    for i in range(0, order.size, oc.batch_size):
        batch = order[i:i + oc.batch_size]
        yield batch, [batch[j:j + oc.micro_batch_size] for j in range(0, batch.size, oc.micro_batch_size)]


def _apply_step(opt: AdamW, params, oc: OptimConfig) -> Optional[float]:
    norm = clip_grad_norm(params, oc.grad_clip) if oc.grad_clip is not None else None
    opt.step()
    opt.zero_grad()
    return norm


# ---------------------------------------------------------------------------
# FP teacher


def train_fp(model: TransformerModel, tokens: np.ndarray, oc: OptimConfig, steps: int,
             val_tokens: Optional[np.ndarray] = None, val_every: int = 0, warmup: int = 100,
             min_lr_frac: float = 0.1, log_every: int = 100) -> TrainResult:
    """Next-token pretraining on random windows of a 1-D token stream.

    The learning rate warms up linearly and then follows a cosine decay to
    ``min_lr_frac`` of its peak.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t = model.config.ctx_len
    if tokens.size < t + 1:
        raise ValueError("token stream is shorter than one context window")
    rng = np.random.default_rng(oc.seed)
    params = model.trainable_parameters()
    opt = AdamW.from_config(params, oc)
    result = TrainResult()
    for step in range(1, steps + 1):
        if step <= warmup:
            lr = oc.learning_rate * step / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            lr = oc.learning_rate * (min_lr_frac + (1 - min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.lr = lr
        starts = rng.integers(0, tokens.size - t, size=oc.batch_size)
        total = 0.0
        for j in range(0, oc.batch_size, oc.micro_batch_size):
            s = starts[j:j + oc.micro_batch_size]
            x = np.stack([tokens[a:a + t] for a in s])
            y = np.stack([tokens[a + 1:a + t + 1] for a in s])
            loss = ad.mul(ad.cross_entropy(model.forward(x), y), s.size / oc.batch_size)
            ad.backward(loss)
            total += loss.item()
        _apply_step(opt, params, oc)
        row = {"step": step, "ce": total, "lr": lr, "val_ppl": None}
        if val_tokens is not None and val_every and (step % val_every == 0 or step == steps):
            row["val_ppl"] = perplexity(model, val_tokens)
            result.final_val_ppl = row["val_ppl"]
        if step % log_every == 0 or step == steps:
            logger.info("train_fp step %d ce %.4f%s", step, total,
                        "" if row["val_ppl"] is None else f" val_ppl {row['val_ppl']:.3f}")
        result.history.append(row)
    return result


# ---------------------------------------------------------------------------
# LREC


def lrec_train(student: TransformerModel, teacher: Union[TransformerModel, TeacherLogitCache],
               calib: np.ndarray, lc: LossConfig, oc: OptimConfig, val_fraction: float = 0.05,
               val_every: int = 50, history_path: Optional[Union[str, Path]] = None,
               patience: int = 200, on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit the student's unfrozen adapters to the teacher on calibration text.

    ``calib`` is ``[n, T]``; its last ``val_fraction`` (at least one row) is
    held out for the validation perplexity logged every ``val_every`` steps.
    Targets are the next tokens of each row. The student's base tensors are
    frozen before training so only adapters move.
    """
    calib = np.asarray(calib, dtype=np.int64)
    if calib.ndim != 2 or calib.shape[0] < 2:
        raise ValueError("calibration set must be [n >= 2, T]")
    student.freeze_base()
    params = student.trainable_parameters()
    if not params:
        raise ValueError("student has no unfrozen adapters to train")
    cache = teacher if isinstance(teacher, TeacherLogitCache) else None
    if cache is None:
        if teacher.trainable_parameters():
            raise ValueError("teacher must be frozen (see clone_as_teacher)")
        if teacher.is_quantized:
            raise ValueError("teacher must be a full-precision model")
    else:
        cache.check(dataset=calib)

    n_val = max(1, int(round(calib.shape[0] * val_fraction)))
    n_train = calib.shape[0] - n_val
    val = calib[n_train:]
    opt = AdamW.from_config(params, oc)
    monitor = DivergenceMonitor(patience=patience)
    result = TrainResult(handles=None)
    step = 0
    for epoch in range(oc.epochs):
        order = np.random.default_rng((oc.seed, epoch)).permutation(n_train)
        for batch, micros in _batches(order, oc):
            ce_sum = kl_sum = tot = 0.0
            for mb in micros:
                x = calib[mb]
                targets, mask = next_token_targets(x)
                t_logits = cache.get(mb) if cache is not None else teacher.logits(x)
                s_logits = student.forward(x, training=True, dropout_keys=_dropout_keys(oc.seed, epoch, mb))
                loss, ce, kl = _hybrid(s_logits, t_logits, targets, lc, mask, None)
                w = mb.size / batch.size
                loss = ad.mul(loss, w)
                ad.backward(loss)
                tot += loss.item()
                ce_sum += w * ce
                kl_sum += w * kl
            _apply_step(opt, params, oc)
            step += 1
            row = {"step": step, "epoch": epoch, "ce": ce_sum, "kl": kl_sum, "total": tot, "val_ppl": None}
            if val_every and step % val_every == 0:
                row["val_ppl"] = sequences_ppl(student, val)
                logger.info("lrec step %d total %.4f ce %.4f kl %.4f val_ppl %.3f",
                            step, tot, ce_sum, kl_sum, row["val_ppl"])
            result.history.append(row)
            if on_step is not None:
                on_step(row)
            monitor.update(tot, step)
    if result.history and result.history[-1]["val_ppl"] is None:
        result.history[-1]["val_ppl"] = sequences_ppl(student, val)
    result.final_val_ppl = result.history[-1]["val_ppl"] if result.history else sequences_ppl(student, val)
    if history_path is not None:
        result.write_csv(history_path)
    return result


# ---------------------------------------------------------------------------
# EMEF


@dataclass
class RenderedSample:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def render_samples(samples: Sequence[InstructionSample], ctx_len: int, mask_prompt: bool = True,
                   template: PromptTemplate = DEFAULT_TEMPLATE) -> List[RenderedSample]:
    """Input/target/mask triples; samples with nothing to score are skipped."""
    out = []
    for i, s in enumerate(samples):
        try:
            tokens, cmask = render_prompt(s, template, ctx_len + 1)
        except ValueError as exc:
            logger.warning("skipping instruction sample %d: %s", i, exc)
            continue
        mask = cmask[1:] if mask_prompt else np.ones(tokens.size - 1, dtype=bool)
        if not mask.any():
            logger.warning("skipping instruction sample %d: empty completion after masking", i)
            continue
        out.append(RenderedSample(tokens[:-1], tokens[1:], mask))
    return out


def _pad(rows: Sequence[RenderedSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = max(r.inputs.size for r in rows)
    x = np.zeros((len(rows), t), dtype=np.int64)
    y = np.zeros((len(rows), t), dtype=np.int64)
    m = np.zeros((len(rows), t), dtype=bool)
    for i, r in enumerate(rows):
        n = r.inputs.size
        x[i, :n], y[i, :n], m[i, :n] = r.inputs, r.targets, r.mask
    return x, y, m


def instruction_ce(model: TransformerModel, samples: Sequence[InstructionSample], mask_prompt: bool = True,
                   template: PromptTemplate = DEFAULT_TEMPLATE, batch_size: int = 32) -> float:
    """Mean CE per scored token over ``samples`` (completion tokens when masking)."""
    rows = render_samples(samples, model.config.ctx_len, mask_prompt, template)
    if not rows:
        raise ValueError("no scorable instruction samples")
    total = 0.0
    count = 0
    with no_grad():
        for i in range(0, len(rows), batch_size):
            x, y, m = _pad(rows[i:i + batch_size])
            total += ad.cross_entropy(model.forward(x), y, m, reduction="sum").item()
            count += int(m.sum())
    return total / count


def emef_finetune(model: TransformerModel, samples: Sequence[InstructionSample], oc: OptimConfig,
                  mask_prompt: bool = True, spec: Optional[InjectionSpec] = None,
                  template: PromptTemplate = DEFAULT_TEMPLATE,
                  val_samples: Optional[Sequence[InstructionSample]] = None, val_every: int = 0,
                  history_path: Optional[Union[str, Path]] = None, patience: int = 200) -> TrainResult:
    """Instruction fine-tuning of freshly injected adapters with a CE loss.

    Base tensors and any adapters already on the model are frozen first (they
    keep contributing to the forward pass). The loss of a batch is the summed
    CE over scored tokens divided by the batch's scored-token count, so any
    micro-batch split produces the same update.
    """
    spec = InjectionSpec() if spec is None else spec
    model.freeze_base()
    freeze_adapters(model.adapters())
    handles = inject(model, spec, seed=oc.seed)
    params = handles.parameters()
    rows = render_samples(samples, model.config.ctx_len, mask_prompt, template)
    if not rows:
        raise ValueError("no scorable instruction samples")
    opt = AdamW.from_config(params, oc)
    monitor = DivergenceMonitor(patience=patience)
    result = TrainResult(handles=handles)
    step = 0
    for epoch in range(oc.epochs):
        order = np.random.default_rng((oc.seed, epoch)).permutation(len(rows))
        for batch, micros in _batches(order, oc):
            n_tok = sum(int(rows[i].mask.sum()) for i in batch)
            tot = 0.0
            for mb in micros:
                x, y, m = _pad([rows[i] for i in mb])
                logits = model.forward(x, training=True, dropout_keys=_dropout_keys(oc.seed, epoch, mb))
                loss = ad.mul(ad.cross_entropy(logits, y, m, reduction="sum"), 1.0 / n_tok)
                ad.backward(loss)
                tot += loss.item()
            _apply_step(opt, params, oc)
            step += 1
            row = {"step": step, "epoch": epoch, "ce": tot, "kl": None, "total": tot, "val_ce": None}
            if val_samples is not None and val_every and step % val_every == 0:
                row["val_ce"] = instruction_ce(model, val_samples, mask_prompt, template)
            result.history.append(row)
            monitor.update(tot, step)
    if history_path is not None:
        result.write_csv(history_path, ("step", "ce", "kl", "total", "val_ce"))
    return result


# ---------------------------------------------------------------------------
# ablations

SCENARIOS = ("CE_ZERO", "KL_ZERO", "COMBINED", "R_SWEEP", "RESTRICTED_TARGETS", "PER_ROW")
R_SWEEP_RANKS = (8, 16, 24, 32)


@dataclass
class AblationBase:
    """Everything an ablation needs; ``quantized`` caches the grouped student."""
    teacher: TransformerModel
    calib: np.ndarray
    eval_tokens: np.ndarray
    quant: QuantizeConfig
    spec: InjectionSpec
    lc: LossConfig
    oc: OptimConfig
    val_every: int = 50
    quantized: Optional[TransformerModel] = None
    cache: Optional[TeacherLogitCache] = None

    def grouped_student(self) -> TransformerModel:
        if self.quantized is None:
            self.quantized, _ = quantize_model(self.teacher, self.calib[:self.quant.calib_samples], self.quant)
        return self.quantized


@dataclass
class AblationReport:
    scenario: str
    rows: List[dict]

    def ppl(self, label: str) -> float:
        for r in self.rows:
            if r["label"] == label:
                return r["ppl"]
        raise KeyError(label)

    def table(self) -> str:
        cols = {r["label"]: {"PPL": r["ppl"], "val PPL": r.get("val_ppl")} for r in self.rows}
        return format_table(cols, ["PPL", "val PPL"])

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "rows": self.rows}


def _corrected(base: AblationBase, student: TransformerModel, label: str, spec: InjectionSpec,
               lc: LossConfig) -> dict:
    student = student.copy()
    inject(student, spec, seed=base.oc.seed)
    teacher = base.cache if base.cache is not None else base.teacher
    res = lrec_train(student, teacher, base.calib, lc, base.oc, val_every=base.val_every)
    return {"label": label, "ppl": perplexity(student, base.eval_tokens), "val_ppl": res.final_val_ppl,
            "curve": [(r["step"], r["val_ppl"]) for r in res.history if r["val_ppl"] is not None],
            "spec": spec.to_dict(), "loss": asdict(lc)}


def ablation_run(scenario: str, base: AblationBase) -> AblationReport:
    """Rerun error correction with one change and tabulate held-out PPL."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {list(SCENARIOS)}")
    grouped = base.grouped_student()
    rows = []
    if scenario == "CE_ZERO":
        rows.append(_corrected(base, grouped, "CE_ZERO", base.spec, LossConfig(base.lc.lambda_kl or 1.0, 0.0)))
    elif scenario == "KL_ZERO":
        rows.append(_corrected(base, grouped, "KL_ZERO", base.spec, LossConfig(0.0, base.lc.lambda_ce or 1.0)))
    elif scenario == "COMBINED":
        rows.append(_corrected(base, grouped, "COMBINED", base.spec, base.lc))
    elif scenario == "R_SWEEP":
        for r in R_SWEEP_RANKS:
            rows.append(_corrected(base, grouped, f"r={r}", replace(base.spec, r=r), base.lc))
    elif scenario == "RESTRICTED_TARGETS":
        rows.append(_corrected(base, grouped, "targets=q,k", replace(base.spec, targets=("q", "k")), base.lc))
    elif scenario == "PER_ROW":
        per_row, _ = quantize_model(base.teacher, base.calib[:base.quant.calib_samples],
                                    replace(base.quant, group_size=-1))
        rows.append({"label": "per_row_uncorrected", "ppl": perplexity(per_row, base.eval_tokens)})
        rows.append(_corrected(base, per_row, "per_row_corrected", base.spec, base.lc))
    return AblationReport(scenario, rows)
