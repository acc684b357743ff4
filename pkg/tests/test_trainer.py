import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlrec import autodiff as ad
from qlrec.autodiff import Tensor
from qlrec.io.data import InstructionSample
from qlrec.lora import InjectionSpec, inject
from qlrec.model import TransformerConfig, TransformerModel, clone_as_teacher
from qlrec.quantizer import QuantizeConfig, quantize_model
from qlrec.trainer import (PAPER_LAMBDA_CE, AblationBase, AdamW, CacheMismatchError, DivergenceError,
                           DivergenceMonitor, LossConfig, OptimConfig, TeacherLogitCache, ablation_run,
                           cache_teacher_logits, emef_finetune, hybrid_loss, instruction_ce, lrec_train,
                           next_token_targets, render_samples)

CFG = TransformerConfig(n_layers=1, d_model=16, n_heads=2, d_ff=24, ctx_len=16)


def log_softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def oracle_terms(s, t, y, mask=None):
    """Mean KL(student || teacher) and mean CE, written out in float64."""
    ls, lt = log_softmax64(s), log_softmax64(t)
    kl = (np.exp(ls) * (ls - lt)).sum(-1)
    ce = -np.take_along_axis(ls, y[..., None], -1)[..., 0]
    m = np.ones(y.shape, bool) if mask is None else mask
    return kl[m].mean(), ce[m].mean()


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    fp = TransformerModel(CFG)
    calib = rng.integers(0, 256, size=(24, 16))
    q, _ = quantize_model(fp, calib[:8], QuantizeConfig(bits=2, group_size=8))
    return fp, clone_as_teacher(fp), q, calib


def student_of(q, spec=InjectionSpec(("q", "v"), r=2, dropout_p=0.0), seed=0):
    s = q.copy()
    inject(s, spec, seed=seed)
    return s


# --- loss ---------------------------------------------------------------------


def test_loss_config_validation_and_presets():
    with pytest.raises(ValueError):
        LossConfig(0.0, 0.0)
    with pytest.raises(ValueError):
        LossConfig(-1.0, 1.0)
    assert LossConfig.preset(2, scale="paper") == LossConfig(1.0, 120.0)
    assert PAPER_LAMBDA_CE == {4: 10.0, 3: 40.0, 2: 120.0}


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(batch_size=16, micro_batch_size=5)
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0.0)


def test_paper_int2_weights_match_hand_summed_terms():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(3, 7, 11)), rng.normal(size=(3, 7, 11))
    y = rng.integers(0, 11, size=(3, 7))
    kl, ce = oracle_terms(s, t, y)
    got = hybrid_loss(Tensor(s.astype(np.float32)), t.astype(np.float32), y, LossConfig(1.0, 120.0)).item()
    assert got == pytest.approx(kl + 120.0 * ce, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(0.1, 200))
def test_term_isolation(seed, lam_kl, lam_ce):
    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        s = Tensor(rng.normal(size=(2, 5, 9)))
    t = rng.normal(size=(2, 5, 9))
    y = rng.integers(0, 9, size=(2, 5))
    both = hybrid_loss(s, t, y, LossConfig(lam_kl, lam_ce)).item()
    kl_only = hybrid_loss(s, t, y, LossConfig(lam_kl, 0.0)).item()
    ce_only = hybrid_loss(s, t, y, LossConfig(0.0, lam_ce)).item()
    assert both == pytest.approx(kl_only + ce_only, rel=1e-7, abs=1e-7)
    kl, ce = oracle_terms(s.data, t, y)
    assert ce_only == pytest.approx(lam_ce * ce, rel=1e-7)
    assert kl_only == pytest.approx(lam_kl * kl, rel=1e-7, abs=1e-12)
    assert both >= 0


def test_kl_zero_equals_plain_ce_and_needs_no_teacher():
    rng = np.random.default_rng(2)
    s = Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    y = rng.integers(0, 6, size=4)
    assert hybrid_loss(s, None, y, LossConfig(0.0, 1.0)).item() == ad.cross_entropy(s, y).item()
    with pytest.raises(ValueError):
        hybrid_loss(s, None, y, LossConfig(1.0, 1.0))


def test_identical_student_and_teacher_give_zero_loss():
    z = np.random.default_rng(3).normal(size=(2, 4, 8)).astype(np.float32)
    loss = hybrid_loss(Tensor(z), z, np.zeros((2, 4), np.int64), LossConfig(1.0, 0.0)).item()
    assert abs(loss) < 1e-7


def test_next_token_targets():
    y, m = next_token_targets(np.array([[1, 2, 3]]))
    assert y.tolist() == [[2, 3, 0]] and m.tolist() == [[True, True, False]]


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 0.0], dtype=np.float64), requires_grad=True)
    p.grad = np.array([0.3, -5.0, 0.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.0], atol=1e-6)


def test_adamw_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


# --- teacher cache ------------------------------------------------------------


def test_cache_round_trip_and_bit_identity(setup, tmp_path):
    _, teacher, _, calib = setup
    cache = cache_teacher_logits(teacher, calib, tmp_path / "c")
    again = TeacherLogitCache.load(tmp_path / "c", teacher, calib)
    for i in (0, 5, 23):
        row = teacher.logits(calib[i:i + 1])
        np.testing.assert_array_equal(cache.get([i]), row)
        np.testing.assert_array_equal(again.get([i]), row)
    assert cache.nbytes == 24 * 16 * 256 * 4 == (tmp_path / "c" / "logits.npy").stat().st_size - 128


def test_cache_rejects_modified_teacher_and_dataset(setup, tmp_path):
    fp, teacher, _, calib = setup
    cache_teacher_logits(teacher, calib, tmp_path / "c")
    other = fp.copy()
    other.head.weight.data[0, 0] += 1e-3
    with pytest.raises(CacheMismatchError, match="teacher"):
        TeacherLogitCache.load(tmp_path / "c", clone_as_teacher(other))
    with pytest.raises(CacheMismatchError, match="dataset"):
        TeacherLogitCache.load(tmp_path / "c", dataset=calib[:-1])


def test_cache_size_arithmetic():
    assert 1000 * 128 * 256 * 4 == 131_072_000


def test_cache_needs_frozen_teacher(setup, tmp_path):
    fp, _, _, calib = setup
    with pytest.raises(ValueError, match="frozen"):
        cache_teacher_logits(fp, calib, tmp_path / "c")


# --- LREC ---------------------------------------------------------------------


def snapshot(model):
    out = {n: t.data.copy() for n, t in model.named_base_tensors().items()}
    for i, b in enumerate(model.blocks):
        for name, slot in b.slots().items():
            if slot.is_quantized:
                out[f"{i}.{name}.words"] = slot.packed.words.copy()
                out[f"{i}.{name}.scales"] = slot.qparams.scales.copy()
                out[f"{i}.{name}.zeros"] = slot.qparams.zeros.copy()
    return out


def assert_same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_lrec_moves_only_adapters(setup, tmp_path):
    _, teacher, q, calib = setup
    student = student_of(q)
    before, t_before = snapshot(student), snapshot(teacher)
    adapters = [p.data.copy() for p in student.trainable_parameters()]
    res = lrec_train(student, teacher, calib, LossConfig(1.0, 0.5), OptimConfig(batch_size=4, micro_batch_size=2),
                     val_every=2, history_path=tmp_path / "h.csv")
    assert_same(before, snapshot(student))
    assert_same(t_before, snapshot(teacher))
    assert any(not np.array_equal(a, p.data) for a, p in zip(adapters, student.trainable_parameters()))
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == ["step", "ce", "kl", "total", "val_ppl"]
    assert len(rows) == len(res.history) == 6
    assert math.isfinite(res.final_val_ppl)


def test_lrec_cache_matches_live_teacher(setup, tmp_path):
    _, teacher, q, calib = setup
    lc, oc = LossConfig(1.0, 0.5), OptimConfig(batch_size=4, micro_batch_size=4, epochs=2)
    spec = InjectionSpec(("q", "v"), r=2, dropout_p=0.05)
    live = lrec_train(student_of(q, spec), teacher, calib, lc, oc, val_every=0)
    cache = cache_teacher_logits(teacher, calib, tmp_path / "c")
    cached = lrec_train(student_of(q, spec), cache, calib, lc, oc, val_every=0)
    a = np.array([r["total"] for r in live.history])
    b = np.array([r["total"] for r in cached.history])
    assert a.size == b.size == 2 * 6
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


def test_lrec_cache_for_other_dataset_rejected(setup, tmp_path):
    _, teacher, q, calib = setup
    cache = cache_teacher_logits(teacher, calib[:10], tmp_path / "c")
    with pytest.raises(CacheMismatchError):
        lrec_train(student_of(q), cache, calib, LossConfig(), OptimConfig(batch_size=4, micro_batch_size=4))


def test_lrec_gradient_accumulation_equivalence(setup):
    _, teacher, q, calib = setup
    spec = InjectionSpec(("q", "v"), r=2, dropout_p=0.05)
    finals = []
    for mb in (1, 4):
        s = student_of(q, spec)
        for a in s.adapters():
            a.B.data[:] = 0.01
        lrec_train(s, teacher, calib, LossConfig(1.0, 0.5),
                   OptimConfig(batch_size=4, micro_batch_size=mb, learning_rate=1e-3), val_every=0)
        finals.append(np.concatenate([p.data.ravel() for p in s.trainable_parameters()]))
    np.testing.assert_allclose(finals[0], finals[1], atol=1e-6)


def test_fp_student_equal_to_teacher_does_not_move(setup):
    fp, teacher, _, calib = setup
    student = fp.copy()
    handles = inject(student, InjectionSpec(("q", "v"), r=2, dropout_p=0.0))
    params = [p.data.copy() for p in handles.parameters()]
    res = lrec_train(student, teacher, calib, LossConfig(1.0, 0.0), OptimConfig(batch_size=4, micro_batch_size=4),
                     val_every=0)
    assert all(abs(r["total"]) < 1e-6 for r in res.history)
    for before, p in zip(params, handles.parameters()):
        np.testing.assert_allclose(p.data, before, atol=1e-6)


def test_lrec_preconditions(setup):
    fp, teacher, q, calib = setup
    with pytest.raises(ValueError, match="adapters"):
        lrec_train(q.copy(), teacher, calib, LossConfig(), OptimConfig())
    with pytest.raises(ValueError, match="frozen"):
        lrec_train(student_of(q), fp, calib, LossConfig(), OptimConfig())


def test_divergence_monitor():
    mon = DivergenceMonitor(patience=5, decay=0.0)
    mon.update(1.0, 1)
    for step in range(2, 6):
        mon.update(10.0, step)
    mon.update(1.0, 6)
    assert mon.streak == 0
    with pytest.raises(DivergenceError, match="consecutive"):
        for step in range(7, 13):
            mon.update(10.0, step)
    with pytest.raises(DivergenceError, match="non-finite"):
        DivergenceMonitor().update(float("nan"), 1)


def test_lrec_aborts_on_non_finite_teacher(setup, tmp_path):
    _, teacher, q, calib = setup
    cache = cache_teacher_logits(teacher, calib, tmp_path / "c")
    poisoned = np.array(cache.logits)
    poisoned[3] = np.nan
    bad = TeacherLogitCache(cache.path, cache.manifest, poisoned)
    with pytest.raises(DivergenceError, match="non-finite"):
        lrec_train(student_of(q), bad, calib, LossConfig(1.0, 1.0), OptimConfig(batch_size=1, micro_batch_size=1),
                   val_every=0)


# --- EMEF ---------------------------------------------------------------------

SAMPLES = [InstructionSample("Capital of France?", "Paris."), InstructionSample("2+2", "4"),
           InstructionSample("Say hi", "hi"), InstructionSample("Echo", "ok", input="x")]
SMALL = TransformerConfig(n_layers=1, d_model=16, n_heads=2, d_ff=24, ctx_len=48)


def test_render_masks_prompt():
    rows = render_samples(SAMPLES[:1], ctx_len=48)
    r = rows[0]
    assert r.mask.sum() == len("Paris.") + 1
    assert r.mask[-(len("Paris.") + 1):].all()
    assert render_samples(SAMPLES[:1], 48, mask_prompt=False)[0].mask.all()


def test_masked_loss_ignores_prompt_logits():
    rows = render_samples(SAMPLES[:1], ctx_len=48)
    r = rows[0]
    rng = np.random.default_rng(4)
    z = rng.normal(size=(r.inputs.size, 256)).astype(np.float32)
    base = ad.cross_entropy(Tensor(z), r.targets, r.mask).item()
    z[~r.mask] = 0.0
    assert ad.cross_entropy(Tensor(z), r.targets, r.mask).item() == base


def test_completion_too_long_is_skipped(caplog):
    rows = render_samples([InstructionSample("q", "x" * 60), SAMPLES[1]], ctx_len=48)
    assert len(rows) == 1
    assert "skipping instruction sample 0" in caplog.text


def test_emef_accumulation_and_scope():
    finals = []
    for mb in (1, 4):
        model = TransformerModel(SMALL)
        frozen = inject(model, InjectionSpec(("q",), r=1, dropout_p=0.0), seed=9)
        for a in frozen:
            a.B.data[:] = 0.1
        before = snapshot(model)
        frozen_before = [p.data.copy() for a in frozen for p in a.parameters()]
        res = emef_finetune(model, SAMPLES, OptimConfig(batch_size=4, micro_batch_size=mb, learning_rate=1e-2,
                                                         epochs=3), spec=InjectionSpec(("q", "v"), r=2))
        assert_same(before, snapshot(model))
        for b, p in zip(frozen_before, [p for a in frozen for p in a.parameters()]):
            np.testing.assert_array_equal(b, p.data)
        assert len(res.history) == 3
        finals.append(np.concatenate([p.data.ravel() for p in res.handles.parameters()]))
    np.testing.assert_allclose(finals[0], finals[1], atol=1e-6)


def test_emef_lowers_instruction_ce():
    model = TransformerModel(SMALL)
    before = instruction_ce(model, SAMPLES)
    emef_finetune(model, SAMPLES, OptimConfig(batch_size=4, micro_batch_size=4, learning_rate=3e-2, epochs=60),
                  spec=InjectionSpec(("q", "v", "mlp_down"), r=4, dropout_p=0.0))
    assert instruction_ce(model, SAMPLES) < before - 0.15


# --- ablations ----------------------------------------------------------------


def test_ablation_shapes():
    # the rank sweep goes up to 32, so the model must be at least that wide
    cfg = TransformerConfig(n_layers=1, d_model=32, n_heads=2, d_ff=32, ctx_len=16)
    teacher = clone_as_teacher(TransformerModel(cfg))
    calib = np.random.default_rng(6).integers(0, 256, size=(16, 16))
    base = AblationBase(teacher, calib, calib[:4].reshape(-1), QuantizeConfig(bits=2, group_size=8, calib_samples=8),
                        InjectionSpec(("q", "v"), r=2), LossConfig(1.0, 0.5),
                        OptimConfig(batch_size=8, micro_batch_size=8), val_every=0)
    with pytest.raises(ValueError, match="scenario"):
        ablation_run("NOPE", base)
    rep = ablation_run("R_SWEEP", base)
    assert [r["label"] for r in rep.rows] == ["r=8", "r=16", "r=24", "r=32"]
    rep = ablation_run("PER_ROW", base)
    assert [r["label"] for r in rep.rows] == ["per_row_uncorrected", "per_row_corrected"]
    assert "per_row_corrected" in rep.table()
    assert ablation_run("RESTRICTED_TARGETS", base).rows[0]["spec"]["targets"] == ["q", "k"]
