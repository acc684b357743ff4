"""``qlrec`` command-line interface.

Every subcommand resolves its configuration as defaults < ``--config`` file <
explicit flags, writes the resolved values to ``<out>/config.json`` and puts
its artifacts in the same directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import evaluate as ev
from ..lora import inject
from ..model import ContextOverflowError, TransformerModel, clone_as_teacher, fingerprint, generate
from ..quantizer import quantize_model
from ..trainer import (SCENARIOS, AblationBase, LossConfig, TeacherLogitCache, ablation_run,
                       cache_teacher_logits, emef_finetune, instruction_ce, lrec_train, train_fp)
from . import checkpoint
from .config import ConfigError, RunConfig
from .data import decode, encode, load_corpus, load_instructions, sample_calibration, split_instructions

logger = logging.getLogger("qlrec")

# flag dest -> dotted config key
FLAG_KEYS: Dict[str, str] = {
    "n_layers": "model.n_layers", "d_model": "model.d_model", "n_heads": "model.n_heads",
    "d_ff": "model.d_ff", "ctx_len": "model.ctx_len",
    "bits": "quant.bits", "group_size": "quant.group_size", "act_order": "quant.act_order",
    "true_sequential": "quant.true_sequential", "percdamp": "quant.percdamp",
    "calib_samples": "quant.calib_samples", "method": "quant.method",
    "targets": "lora.targets", "r": "lora.r", "alpha": "lora.alpha", "dropout": "lora.dropout_p",
    "lr": "train.learning_rate", "weight_decay": "train.weight_decay", "batch_size": "train.batch_size",
    "micro_batch": "train.micro_batch_size", "epochs": "train.epochs", "grad_clip": "train.grad_clip",
    "steps": "train.steps", "lambda_kl": "train.lambda_kl", "lambda_ce": "train.lambda_ce",
    "calib_n": "train.calib_n", "val_every": "train.val_every", "mask_prompt": "train.mask_prompt",
    "cache_teacher": "train.cache_teacher",
    "stride": "eval.stride", "dataset": "eval.dataset", "max_tokens": "eval.max_tokens",
    "n_prompts": "eval.n_prompts",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML file with dotted keys (model.*, quant.*, lora.*, train.*, eval.*)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    p.add_argument("--corpus", default=None, help="text file for LM data (default: bundled corpus)")


def _model_flags(p):
    g = p.add_argument_group("model")
    for name in ("n-layers", "d-model", "n-heads", "d-ff", "ctx-len"):
        g.add_argument(f"--{name}", type=int, default=None)


def _quant_flags(p):
    g = p.add_argument_group("quantization")
    g.add_argument("--bits", type=int, choices=(2, 3, 4, 8), default=None)
    grp = g.add_mutually_exclusive_group()
    grp.add_argument("--group-size", type=int, default=None)
    grp.add_argument("--per-row", action="store_true", help="one group per output row")
    g.add_argument("--act-order", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--true-sequential", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--percdamp", type=float, default=None)
    g.add_argument("--calib-samples", type=int, default=None, help="calibration sequences used for Hessians")
    g.add_argument("--method", choices=("gptq", "rtn"), default=None)


def _lora_flags(p):
    g = p.add_argument_group("adapters")
    g.add_argument("--targets", default=None, help="comma-separated projections, e.g. q,v")
    g.add_argument("--r", type=int, default=None)
    g.add_argument("--alpha", type=float, default=None)
    g.add_argument("--dropout", type=float, default=None)


def _train_flags(p, lrec: bool = False):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--weight-decay", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--micro-batch", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--grad-clip", type=float, default=None)
    g.add_argument("--val-every", type=int, default=None)
    if lrec:
        g.add_argument("--lambda-kl", type=float, default=None)
        g.add_argument("--lambda-ce", type=float, default=None)
        g.add_argument("--calib-n", type=int, default=None)
        g.add_argument("--cache-teacher", action=argparse.BooleanOptionalAction, default=None)


def _eval_flags(p):
    g = p.add_argument_group("evaluation")
    g.add_argument("--stride", type=int, default=None)
    g.add_argument("--dataset", choices=("train", "val", "test"), default=None)
    g.add_argument("--max-tokens", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qlrec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-fp", help="train the full-precision teacher")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--steps", type=int, default=None)
    _eval_flags(p)

    p = sub.add_parser("quantize", help="quantize a checkpoint's block projections")
    _common(p)
    p.add_argument("--model", required=True)
    _quant_flags(p)
    p.add_argument("--calib-n", type=int, default=None, dest="calib_samples",
                   help="calibration sequences drawn for Hessians (alias of --calib-samples)")
    _eval_flags(p)

    p = sub.add_parser("lrec", help="train error-correcting adapters against the teacher")
    _common(p)
    p.add_argument("--model", required=True, help="quantized student checkpoint")
    p.add_argument("--teacher", required=True, help="full-precision teacher checkpoint")
    _lora_flags(p)
    _train_flags(p, lrec=True)
    _eval_flags(p)

    p = sub.add_parser("finetune", help="instruction fine-tuning of fresh adapters")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--instructions", default=None, help="JSON-lines file (default: bundled set)")
    _lora_flags(p)
    _train_flags(p)
    p.add_argument("--mask-prompt", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("eval-ppl", help="strided perplexity on a corpus split")
    _common(p)
    p.add_argument("--model", required=True)
    _eval_flags(p)

    p = sub.add_parser("eval-kl", help="KL divergence between two models' next-token distributions")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--n-prompts", type=int, default=None)
    _eval_flags(p)

    p = sub.add_parser("report", help="compression table for one or more checkpoints")
    _common(p)
    p.add_argument("--model", required=True, nargs="+")

    p = sub.add_parser("generate", help="sample a continuation")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)

    p = sub.add_parser("ablate", help="error-correction ablations")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--scenario", required=True, choices=SCENARIOS)
    _quant_flags(p)
    _lora_flags(p)
    _train_flags(p, lrec=True)
    _eval_flags(p)
    return ap


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "per_row", False):
        overrides["quant.group_size"] = -1
    cfg = RunConfig.resolve(args.config, overrides, args.seed)
    gs = cfg["quant.group_size"]
    if gs != -1 and gs <= 0:
        raise UsageError(f"--group-size must be positive (or use --per-row), got {gs}")
    return cfg


def _eval_tokens(corpus, cfg: RunConfig) -> np.ndarray:
    toks = corpus.split(cfg["eval.dataset"])
    return toks[:cfg["eval.max_tokens"]] if cfg["eval.max_tokens"] else toks


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def _calib(corpus, cfg: RunConfig, n: int) -> np.ndarray:
    return sample_calibration(corpus, n, cfg["model.ctx_len"], cfg.seed)


def _load(path) -> TransformerModel:
    return checkpoint.load(path)[0]


def _adopt_model_config(cfg: RunConfig, model: TransformerModel) -> None:
    for k, v in model.config.to_dict().items():
        if f"model.{k}" in FLAG_KEYS.values() or k == "seed":
            cfg[f"model.{k}"] = v


# ---------------------------------------------------------------------------
# commands


def cmd_train_fp(args, cfg, out, corpus):
    model = TransformerModel(cfg.model_config())
    res = train_fp(model, corpus.split("train"), cfg.optim_config(), cfg["train.steps"],
                   val_tokens=corpus.split("val")[:cfg["eval.max_tokens"]], val_every=cfg["train.val_every"] * 10)
    res.write_csv(out / "history.csv", ("step", "ce", "lr", "val_ppl"))
    checkpoint.save(model, out / "model.qlr", extra={"kind": "fp"})
    rep = ev.evaluate(model, _eval_tokens(corpus, cfg), cfg["eval.dataset"], cfg["eval.stride"], fingerprint(model))
    _write_json(out / "eval.json", json.loads(rep.to_json()))
    return {"perplexity": rep.perplexity}


def cmd_quantize(args, cfg, out, corpus):
    model = _load(args.model)
    _adopt_model_config(cfg, model)
    qcfg = cfg.quant_config()
    calib = _calib(corpus, cfg, qcfg.calib_samples)
    qmodel, errors = quantize_model(model, calib, qcfg)
    for k, v in errors.items():
        logger.info("layer_error %s %.6g", k, v)
    _write_json(out / "layer_errors.json", errors)
    checkpoint.save(qmodel, out / "model.qlr", extra={"kind": "quantized", "source": fingerprint(model)})
    ppl = ev.perplexity(qmodel, _eval_tokens(corpus, cfg), cfg["eval.stride"])
    _write_json(out / "eval.json", {"perplexity": ppl, "dataset": cfg["eval.dataset"]})
    return {"perplexity": ppl, "layer_error_total": float(sum(errors.values()))}


def cmd_lrec(args, cfg, out, corpus):
    student = _load(args.model)
    teacher = clone_as_teacher(_load(args.teacher))
    _adopt_model_config(cfg, student)
    bits = {s.packed.bits for b in student.blocks for s in b.slots().values() if s.is_quantized}
    if len(bits) == 1:
        cfg["quant.bits"] = bits.pop()
    student.freeze_base()
    for a in student.adapters():
        a.freeze()
    inject(student, cfg.injection_spec(), seed=cfg.seed)
    calib = _calib(corpus, cfg, cfg["train.calib_n"])
    source = teacher
    if cfg["train.cache_teacher"]:
        source = cache_teacher_logits(teacher, calib, out / "teacher_cache")
    res = lrec_train(student, source, calib, cfg.loss_config(), cfg.optim_config(),
                     val_every=cfg["train.val_every"], history_path=out / "history.csv")
    checkpoint.save(student, out / "model.qlr", extra={"kind": "lrec"})
    ppl = ev.perplexity(student, _eval_tokens(corpus, cfg), cfg["eval.stride"])
    _write_json(out / "eval.json", {"perplexity": ppl, "val_ppl": res.final_val_ppl})
    return {"perplexity": ppl, "val_ppl": res.final_val_ppl}


def cmd_finetune(args, cfg, out, corpus):
    model = _load(args.model)
    _adopt_model_config(cfg, model)
    samples = load_instructions(args.instructions)
    train, test = split_instructions(samples)
    mask = cfg["train.mask_prompt"]
    before = instruction_ce(model, test, mask)
    res = emef_finetune(model, train, cfg.optim_config(), mask_prompt=mask, spec=cfg.injection_spec(),
                        history_path=out / "history.csv")
    after = instruction_ce(model, test, mask)
    checkpoint.save(model, out / "model.qlr", extra={"kind": "finetuned"})
    metrics = {"instruction_ce_before": before, "instruction_ce_after": after, "steps": len(res.history)}
    _write_json(out / "eval.json", metrics)
    return metrics


def cmd_eval_ppl(args, cfg, out, corpus):
    model = _load(args.model)
    _adopt_model_config(cfg, model)
    rep = ev.evaluate(model, _eval_tokens(corpus, cfg), cfg["eval.dataset"], cfg["eval.stride"], fingerprint(model))
    _write_json(out / "eval.json", json.loads(rep.to_json()))
    return {"perplexity": rep.perplexity, "tokens": rep.tokens}


def cmd_eval_kl(args, cfg, out, corpus):
    a, b = _load(args.model), _load(args.reference)
    _adopt_model_config(cfg, a)
    prompts = sample_calibration(corpus, cfg["eval.n_prompts"], a.config.ctx_len, cfg.seed, split=cfg["eval.dataset"])
    fwd = ev.kl_between_models(a, b, prompts)
    rev = ev.kl_between_models(b, a, prompts)
    metrics = {"kl_model_reference_mean": fwd.mean_per_position, "kl_model_reference_sum": fwd.mean_sum_per_prompt,
               "kl_reference_model_mean": rev.mean_per_position, "kl_reference_model_sum": rev.mean_sum_per_prompt,
               "n_prompts": fwd.n_prompts}
    _write_json(out / "kl.json", metrics)
    return metrics


def cmd_report(args, cfg, out, corpus):
    cols, rows = {}, {}
    for path in args.model:
        model = _load(path)
        rep = ev.compression_report(model)
        payload = checkpoint.read_manifest(path)["payload_len"]
        d = rep.to_dict()
        d["payload_bytes"] = payload
        rows[path] = d
        cols[Path(path).parent.name or path] = {"Compression Rate": rep.rate, "Effective Precision": rep.effective_precision,
                                                "Adapter overhead": rep.adapter_overhead, "Bytes": float(rep.total_bytes)}
    table = ev.format_table(cols, ["Compression Rate", "Effective Precision", "Adapter overhead", "Bytes"])
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "report.json", rows)
    print(table)
    return {p: {"rate": r["rate"], "effective_precision": r["effective_precision"]} for p, r in rows.items()}


def cmd_generate(args, cfg, out, corpus):
    model = _load(args.model)
    prompt = encode(args.prompt)
    toks = generate(model, prompt, args.max_new, args.temperature, seed=cfg.seed)
    text = decode(toks[prompt.size:])
    _write_json(out / "generation.json", {"prompt": args.prompt, "completion": text})
    print(args.prompt + text)
    return {"completion": text}


def cmd_ablate(args, cfg, out, corpus):
    teacher = clone_as_teacher(_load(args.teacher))
    _adopt_model_config(cfg, teacher)
    calib = _calib(corpus, cfg, cfg["train.calib_n"])
    base = AblationBase(teacher, calib, _eval_tokens(corpus, cfg), cfg.quant_config(), cfg.injection_spec(),
                        cfg.loss_config(), cfg.optim_config(), val_every=cfg["train.val_every"])
    rep = ablation_run(args.scenario, base)
    _write_json(out / "ablation.json", rep.to_dict())
    (out / "ablation.txt").write_text(rep.table() + "\n", encoding="utf-8")
    print(rep.table())
    return {r["label"]: r["ppl"] for r in rep.rows}


COMMANDS = {"train-fp": cmd_train_fp, "quantize": cmd_quantize, "lrec": cmd_lrec, "finetune": cmd_finetune,
            "eval-ppl": cmd_eval_ppl, "eval-kl": cmd_eval_kl, "report": cmd_report, "generate": cmd_generate,
            "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
    except (UsageError, ConfigError, ValueError) as exc:
        parser.error(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.corpus)
    try:
        metrics = COMMANDS[args.command](args, cfg, out, corpus)
    except (ConfigError, ContextOverflowError, checkpoint.CheckpointError, ValueError) as exc:
        print(f"qlrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    cfg.write_snapshot(out / "config.json")
    _write_json(out / "metrics.json", metrics)
    logger.info("metrics %s", metrics)
    return 0


if __name__ == "__main__":
    sys.exit(main())
