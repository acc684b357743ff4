"""End-to-end acceptance criteria 1-9.

Every criterion records one PASS/FAIL line, printed in the terminal summary.
Expensive artifacts (teacher, quantized students, corrected students, run
metrics) are cached under ``.acceptance_cache/<key>`` where the key hashes the
configuration below together with the package source, so any code change
recomputes them. The runtimes reported are those of the run that built the
artifact. Set ``QLREC_ACCEPTANCE_CACHE`` to relocate the cache.
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from qlrec.autodiff import gradcheck
from qlrec.bitpack import PER_ROW, QuantParams, fused_backward_input, fused_forward, pack, unpack, unpack_transposed
from qlrec.evaluate import compression_report, effective_precision, perplexity
from qlrec.io import checkpoint
from qlrec.io.cli import main as cli_main
from qlrec.io.data import load_corpus, load_instructions, sample_calibration, split_instructions
from qlrec.lora import InjectionSpec, inject, param_count
from qlrec.model import TransformerConfig, TransformerModel, clone_as_teacher
from qlrec.quantizer import (Hessian, QuantizeConfig, accumulate_hessian, gptq_quantize, layer_error,
                             quantize_model, rtn_quantize)
from qlrec.bitpack import dequantize
from qlrec.trainer import (AblationBase, DivergenceError, LossConfig, OptimConfig, ablation_run, emef_finetune,
                           instruction_ce, lrec_train, train_fp)

from oracles import exhaustive_best_pair, naive_dequant
from test_autodiff import op_cases
from test_model import _model_loss_gradcheck

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("QLREC_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
RESULTS = {}

CONFIG = {
    "model": {"n_layers": 4, "d_model": 128, "n_heads": 4, "d_ff": 344, "ctx_len": 128, "seed": 0},
    "teacher": {"steps": 3000, "learning_rate": 3e-3, "weight_decay": 0.01, "batch_size": 16, "warmup": 100},
    "quant": {"group_size": 16, "act_order": True, "true_sequential": True, "percdamp": 0.01, "calib_samples": 128},
    "eval_tokens": 32768,
    "lrec": {"r": 32, "alpha": 64.0, "dropout_p": 0.05, "calib_n": 2000, "epochs": 2, "learning_rate": 1e-3,
             "batch_size": 16},
    "ablation": {"bits": 2, "calib_n": 1000, "epochs": 2, "seeds": [0, 1, 2, 3, 4]},
    "emef": {"targets": ["q", "v"], "r": 8, "alpha": 16.0, "learning_rate": 1e-3, "epochs": 3, "batch_size": 16},
}


def _source_hash():
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "qlrec").rglob("*.py")):
        h.update(p.relative_to(ROOT).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


KEY = hashlib.sha256((json.dumps(CONFIG, sort_keys=True) + _source_hash()).encode()).hexdigest()[:16]


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    return ok


def cached(name, build):
    """``build() -> dict`` of JSON metrics, memoized on disk with its runtime."""
    path = CACHE / KEY / f"{name}.json"
    if path.exists():
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    out = build()
    out["seconds"] = time.perf_counter() - t0
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2, sort_keys=True))
    return out


def cached_model(name, build):
    """``build() -> (model, metrics)``; the model is kept as a checkpoint."""
    path = CACHE / KEY / f"{name}.qlr"
    holder = {}

    def run():
        model, metrics = build()
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(model, path)
        holder["model"] = model
        return metrics

    metrics = cached(name, run)
    model = holder.get("model") or checkpoint.load(path)[0]
    return model, metrics, path


# ---------------------------------------------------------------------------
# shared data and models


@pytest.fixture(scope="module")
def corpus():
    return load_corpus()


@pytest.fixture(scope="module")
def eval_tokens(corpus):
    return corpus.split("test")[:CONFIG["eval_tokens"]]


@pytest.fixture(scope="module")
def teacher(corpus, eval_tokens):
    def build():
        t = CONFIG["teacher"]
        model = TransformerModel(TransformerConfig(**CONFIG["model"]))
        oc = OptimConfig(learning_rate=t["learning_rate"], weight_decay=t["weight_decay"],
                         batch_size=t["batch_size"], micro_batch_size=t["batch_size"])
        train_fp(model, corpus.split("train"), oc, t["steps"], warmup=t["warmup"])
        return model, {"ppl": perplexity(model, eval_tokens)}

    model, metrics, path = cached_model("teacher", build)
    return {"frozen": clone_as_teacher(model), "fp": model, "metrics": metrics, "path": path}


@pytest.fixture(scope="module")
def hessian_calib(corpus):
    return sample_calibration(corpus, CONFIG["quant"]["calib_samples"], CONFIG["model"]["ctx_len"], seed=0)


def quantized(teacher, hessian_calib, eval_tokens, bits, group_size=None):
    q = dict(CONFIG["quant"])
    if group_size is not None:
        q["group_size"] = group_size
    tag = f"int{bits}_g{q['group_size']}"

    def build():
        model, errors = quantize_model(teacher["frozen"], hessian_calib, QuantizeConfig(bits=bits, **q))
        return model, {"ppl": perplexity(model, eval_tokens), "layer_error": float(sum(errors.values()))}

    return cached_model(tag, build)


@pytest.fixture(scope="module")
def lrec_calib(corpus):
    return sample_calibration(corpus, CONFIG["lrec"]["calib_n"], CONFIG["model"]["ctx_len"], seed=1)


def lrec_spec():
    c = CONFIG["lrec"]
    return InjectionSpec.all_projections(r=c["r"], alpha=c["alpha"], dropout_p=c["dropout_p"])


def lrec_oc(seed=0, epochs=None):
    c = CONFIG["lrec"]
    return OptimConfig(learning_rate=c["learning_rate"], batch_size=c["batch_size"],
                       micro_batch_size=c["batch_size"], epochs=epochs or c["epochs"], seed=seed)


def corrected(teacher, student, calib, eval_tokens, bits, name):
    def build():
        s = student.copy()
        inject(s, lrec_spec(), seed=0)
        res = lrec_train(s, teacher["frozen"], calib, LossConfig.preset(bits), lrec_oc())
        return s, {"ppl": perplexity(s, eval_tokens), "val_ppl": res.final_val_ppl, "steps": len(res.history)}

    return cached_model(name, build)


# ---------------------------------------------------------------------------
# 1. kernels


def test_criterion_1_kernel_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    bad_rt = 0
    worst = 0.0
    for bits in (2, 3, 4, 8):
        for _ in range(1000):
            out_f, in_f = rng.integers(1, 24), rng.integers(1, 48)
            v = rng.integers(0, 1 << bits, size=(out_f, in_f))
            perm = rng.permutation(in_f) if rng.random() < 0.5 else None
            pm = pack(v, bits, perm)
            bad_rt += not (np.array_equal(unpack(pm), v) and np.array_equal(unpack_transposed(pm), v.T))
        for _ in range(200):
            out_f, in_f, m = rng.integers(1, 32), rng.integers(1, 64), rng.integers(1, 8)
            v = rng.integers(0, 1 << bits, size=(out_f, in_f))
            perm = rng.permutation(in_f) if rng.random() < 0.5 else None
            gs = int(rng.choice([4, 8, 16, PER_ROW]))
            ng = 1 if gs == PER_ROW else -(-in_f // gs)
            qp = QuantParams(gs, rng.uniform(0.01, 0.5, size=(out_f, ng)).astype(np.float32),
                             rng.integers(0, 1 << bits, size=(out_f, ng)).astype(np.uint32))
            pm = pack(v, bits, perm)
            w = naive_dequant(v, qp.zeros, qp.scales, gs, perm)
            x = rng.normal(size=(m, in_f)).astype(np.float32)
            g = rng.normal(size=(m, out_f)).astype(np.float32)
            for got, ref in ((fused_forward(x, pm, qp), x.astype(np.float64) @ w.T),
                             (fused_backward_input(g, pm, qp), g.astype(np.float64) @ w)):
                worst = max(worst, float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-30)))
    secs = time.perf_counter() - t0
    ok = bad_rt == 0 and worst < 1e-5 and secs < 60
    assert record(1, ok, f"round-trip failures {bad_rt}/4000, fused vs naive max rel err {worst:.2e} "
                         f"(< 1e-5), {secs:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. autodiff


def test_criterion_2_autodiff_soundness():
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for dtype in worst:
        names = [c[0] for c in op_cases(np.random.default_rng(0), dtype)]
        for k, name in enumerate(names):
            for inst in range(100):
                rng = np.random.default_rng(1000 * k + inst)
                _, fn, inputs = op_cases(rng, dtype)[k]
                worst[dtype] = max(worst[dtype], gradcheck(fn, inputs, max_checks=8, seed=inst))
    m64, _ = _model_loss_gradcheck(np.float64)
    m32, q = _model_loss_gradcheck(np.float32)
    frozen_clean = all(t.grad is None for t in q.named_base_tensors().values())
    secs = time.perf_counter() - t0
    ok = (worst[np.float32] < 1e-3 and m32 < 1e-3 and worst[np.float64] < 1e-7 and m64 < 1e-7
          and frozen_clean and secs < 120)
    assert record(2, ok, f"ops x100: FP32 {worst[np.float32]:.1e}, FP64 {worst[np.float64]:.1e}; full model: "
                         f"FP32 {m32:.1e}, FP64 {m64:.1e}; frozen grads none={frozen_clean}; {secs:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 3. GPTQ


def test_criterion_3_gptq_correctness():
    t0 = time.perf_counter()
    mismatches = 0
    for bits in (2, 3, 4, 8):
        rng = np.random.default_rng(bits)
        for _ in range(100):
            w = rng.normal(size=(rng.integers(1, 12), rng.integers(1, 40)))
            cfg = QuantizeConfig(bits=bits, group_size=int(rng.choice([4, 8, PER_ROW])))
            h = Hessian(rng.uniform(0.1, 10) * np.eye(w.shape[1]), 1)
            pm, qp, _ = gptq_quantize(w, h, cfg)
            pr, qr = rtn_quantize(w, cfg)
            mismatches += not (np.array_equal(pm.words, pr.words) and np.array_equal(qp.scales, qr.scales)
                               and np.array_equal(qp.zeros, qr.zeros))
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(16, 16))
        x = rng.normal(size=(64, 16)) @ rng.normal(size=(16, 16))
        h = accumulate_hessian(Hessian.zeros(16), x)
        cfg = QuantizeConfig(bits=3, group_size=PER_ROW)
        _, _, e_g = gptq_quantize(w, h, cfg)
        pr, qr = rtn_quantize(w, cfg)
        wins += e_g <= layer_error(w, dequantize(pr, qr, np.float64), h)
    exhaustive_ok = True
    rng = np.random.default_rng(11)
    for _ in range(50):
        w = rng.normal(size=(1, 2))
        h = accumulate_hessian(Hessian.zeros(2), rng.normal(size=(32, 2)) @ np.array([[1.0, 0.9], [0.0, 0.4]]))
        cfg = QuantizeConfig(bits=2, group_size=PER_ROW, act_order=False)
        _, _, e_g = gptq_quantize(w, h, cfg)
        pr, qr = rtn_quantize(w, cfg)
        e_r = layer_error(w, dequantize(pr, qr, np.float64), h)
        best = exhaustive_best_pair(w[0], h.matrix, float(qr.scales[0, 0]), float(qr.zeros[0, 0]), 3)
        exhaustive_ok &= best <= e_g + 1e-12 and e_g <= e_r + 1e-12
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and wins >= 95 and exhaustive_ok and secs < 120
    assert record(3, ok, f"identity-H mismatches {mismatches}/400, GPTQ <= RTN on {wins}/100 seeds (>= 95), "
                         f"exhaustive 1x2 oracle ok={exhaustive_ok}; {secs:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 4. degradation


@pytest.fixture(scope="module")
def ladder(teacher, hessian_calib, eval_tokens):
    return {b: quantized(teacher, hessian_calib, eval_tokens, b) for b in (8, 4, 3, 2)}


def test_criterion_4_degradation_monotonicity(teacher, ladder):
    fp = teacher["metrics"]["ppl"]
    ppl = {b: ladder[b][1]["ppl"] for b in ladder}
    chain = [fp, ppl[8], ppl[4], ppl[3], ppl[2]]
    mono = all(a <= b for a, b in zip(chain, chain[1:]))
    int8_close = ppl[8] <= 1.02 * fp
    collapse = ppl[2] >= 3 * fp
    qsecs = max(ladder[b][1]["seconds"] for b in ladder)
    tsecs = teacher["metrics"]["seconds"]
    ok = mono and int8_close and collapse and tsecs <= 1200 and qsecs <= 120
    assert record(4, ok, f"PPL FP {fp:.4f} <= INT8 {ppl[8]:.4f} <= INT4 {ppl[4]:.4f} <= INT3 {ppl[3]:.4f} <= "
                         f"INT2 {ppl[2]:.4f}: {mono}; INT8 within 2%: {int8_close}; INT2 >= 3x FP: {collapse} "
                         f"({ppl[2] / fp:.2f}x); teacher {tsecs:.0f}s (<= 1200s), quantize + eval {qsecs:.0f}s (<= 120s)")


# ---------------------------------------------------------------------------
# 5. LREC


def test_criterion_5_lrec_recovery(teacher, ladder, lrec_calib, eval_tokens):
    fp = teacher["metrics"]["ppl"]
    c2 = corrected(teacher, ladder[2][0], lrec_calib, eval_tokens, 2, "lrec_int2")[1]
    c4 = corrected(teacher, ladder[4][0], lrec_calib, eval_tokens, 4, "lrec_int4")[1]
    int2_ok = c2["ppl"] <= 2.0 * fp
    int4_ok = c4["ppl"] < ladder[4][1]["ppl"]
    secs = c2["seconds"] + c4["seconds"]
    ok = int2_ok and int4_ok and secs <= 1800
    assert record(5, ok, f"INT2 {ladder[2][1]['ppl']:.4f} -> LREC {c2['ppl']:.4f} (<= 2x FP = {2 * fp:.4f}): "
                         f"{int2_ok}; INT4 {ladder[4][1]['ppl']:.4f} -> LREC {c4['ppl']:.4f} (strictly lower): "
                         f"{int4_ok}; {CONFIG['lrec']['epochs']} epochs x {CONFIG['lrec']['calib_n']} sequences; "
                         f"{secs:.0f}s (<= 1800s)")


# ---------------------------------------------------------------------------
# 6. ablations


def test_criterion_6_ablation_directions(teacher, ladder, corpus, eval_tokens, hessian_calib):
    a = CONFIG["ablation"]
    extra = sample_calibration(corpus, a["calib_n"] - len(hessian_calib), CONFIG["model"]["ctx_len"], seed=2)
    # leading rows are the Hessian rows of the ladder, so the per-row student
    # is quantized from the same data as the grouped one
    calib = np.concatenate([hessian_calib, extra])

    def base(seed):
        return AblationBase(teacher["frozen"], calib, eval_tokens,
                            QuantizeConfig(bits=a["bits"], **CONFIG["quant"]), lrec_spec(),
                            LossConfig.preset(a["bits"]), lrec_oc(seed, a["epochs"]), val_every=0,
                            quantized=ladder[a["bits"]][0])

    def build():
        out = {"seeds": {}}
        for seed in a["seeds"]:
            out["seeds"][str(seed)] = {s: ablation_run(s, base(seed)).rows[0]["ppl"]
                                       for s in ("COMBINED", "CE_ZERO", "KL_ZERO")}
        out["restricted"] = ablation_run("RESTRICTED_TARGETS", base(0)).rows[0]["ppl"]
        rows = ablation_run("PER_ROW", base(0)).rows
        out["per_row_uncorrected"], out["per_row_corrected"] = rows[0]["ppl"], rows[1]["ppl"]
        return out

    r = cached("ablations", build)
    ordered = sum(v["COMBINED"] <= v["CE_ZERO"] <= v["KL_ZERO"] for v in r["seeds"].values())
    all_targets = r["seeds"]["0"]["COMBINED"]
    restricted_ok = r["restricted"] >= all_targets
    offset_ok = all_targets < r["per_row_corrected"] < r["per_row_uncorrected"]
    ok = ordered >= 4 and restricted_ok and offset_ok and r["seconds"] <= 2700
    seeds = "; ".join(f"s{k}: {v['COMBINED']:.4f}/{v['CE_ZERO']:.4f}/{v['KL_ZERO']:.4f}" for k, v in r["seeds"].items())
    assert record(6, ok, f"COMBINED <= CE_ZERO <= KL_ZERO in {ordered}/5 seeds (>= 4) [{seeds}]; "
                         f"targets q,k {r['restricted']:.4f} >= all {all_targets:.4f}: {restricted_ok}; "
                         f"per-row corrected {r['per_row_corrected']:.4f} strictly between grouped corrected "
                         f"{all_targets:.4f} and per-row uncorrected {r['per_row_uncorrected']:.4f}: {offset_ok}; "
                         f"{r['seconds']:.0f}s (<= 2700s)")


# ---------------------------------------------------------------------------
# 7. EMEF


def test_criterion_7_emef_parity(teacher, ladder, lrec_calib, eval_tokens):
    e = CONFIG["emef"]
    train, test = split_instructions(load_instructions())
    oc = OptimConfig(learning_rate=e["learning_rate"], batch_size=e["batch_size"], micro_batch_size=e["batch_size"],
                     epochs=e["epochs"], seed=0)
    spec = InjectionSpec(tuple(e["targets"]), r=e["r"], alpha=e["alpha"])

    def build():
        out = {}
        for name, model in (("fp", teacher["fp"]), ("int4", ladder[4][0])):
            m = model.copy()
            emef_finetune(m, train, oc, spec=spec)
            out[name] = instruction_ce(m, test)
        stacked = corrected(teacher, ladder[2][0], lrec_calib, eval_tokens, 2, "lrec_int2")[0].copy()
        out["stacked_before"] = instruction_ce(stacked, test)
        try:
            emef_finetune(stacked, train, oc, spec=spec)
            out["stacked_after"] = instruction_ce(stacked, test)
            out["diverged"] = False
        except DivergenceError as exc:
            out["diverged"] = str(exc)
        return out

    r = cached("emef", build)
    parity = abs(r["int4"] - r["fp"]) <= 0.10 * r["fp"]
    stacked_ok = not r["diverged"] and r.get("stacked_after", math.inf) < r["stacked_before"]
    ok = parity and stacked_ok and r["seconds"] <= 1200
    assert record(7, ok, f"instruction CE INT4+adapters {r['int4']:.4f} vs FP+adapters {r['fp']:.4f} "
                         f"(within 10%): {parity}; LREC INT2 + stacked adapters {r['stacked_before']:.4f} -> "
                         f"{r.get('stacked_after', float('nan')):.4f}, diverged={r['diverged']}; "
                         f"{r['seconds']:.0f}s (<= 1200s)")


# ---------------------------------------------------------------------------
# 8. accounting


def test_criterion_8_accounting(ladder, teacher, lrec_calib, eval_tokens, tmp_path):
    class Dims:
        n_layers, d_model, d_ff = 32, 4096, 11008

    pc = param_count(InjectionSpec(("q", "v"), r=8), Dims)
    p2 = effective_precision(2, 6.17, 5.87)
    p4 = effective_precision(4, 3.58, 3.42)
    model = corrected(teacher, ladder[2][0], lrec_calib, eval_tokens, 2, "lrec_int2")[0]
    payload = checkpoint.save(model, tmp_path / "m.qlr")
    rep = compression_report(model)
    ok = pc == 4_194_304 and abs(p2 - 2.102) <= 0.01 and abs(p4 - 4.19) <= 0.01 and rep.total_bytes == payload
    assert record(8, ok, f"param_count {pc} (4,194,304); INT2.1 row {p2:.4f}; INT4.2 row {p4:.4f}; "
                         f"LREC INT2 report bytes {rep.total_bytes} == payload {payload}; "
                         f"rate {rep.rate:.2f}x, effective precision {rep.effective_precision:.2f}")


# ---------------------------------------------------------------------------
# 9. reproducibility


def test_criterion_9_reproducibility(teacher, tmp_path):
    t_path = str(teacher["path"])
    q_flags = ["--bits", "2", "--group-size", "16", "--calib-samples", "16", "--max-tokens", "4096", "--seed", "7"]
    l_flags = ["--targets", "q,v,o", "--r", "4", "--calib-n", "64", "--epochs", "1", "--batch-size", "8",
               "--micro-batch", "8", "--max-tokens", "4096", "--val-every", "4", "--seed", "7"]

    def chain(root, q_extra, l_extra):
        assert cli_main(["quantize", "--model", t_path, "--out", str(root / "q")] + q_extra) == 0
        assert cli_main(["lrec", "--model", str(root / "q" / "model.qlr"), "--teacher", t_path,
                         "--out", str(root / "l")] + l_extra) == 0
        return {k: json.loads((root / k / "metrics.json").read_text()) for k in ("q", "l")}

    a, b = tmp_path / "a", tmp_path / "b"
    first = chain(a, q_flags, l_flags)
    second = chain(b, ["--config", str(a / "q" / "config.json")], ["--config", str(a / "l" / "config.json")])
    diffs = [abs(first[k][m] - second[k][m]) for k in first for m in first[k] if first[k][m] is not None]
    worst = max(diffs)
    ok = worst <= 1e-6 and len(diffs) >= 3
    assert record(9, ok, f"quantize + lrec rerun from resolved-config snapshots: {len(diffs)} metrics, "
                         f"max |diff| {worst:.1e} (<= 1e-6)")
