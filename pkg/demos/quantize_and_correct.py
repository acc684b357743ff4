"""Train a small byte-level teacher, squeeze it to 2 bits, then win some of it back.

Run with ``python3 demos/quantize_and_correct.py``. Takes about a minute and a half on one
core. Pass ``--steps`` to trade time for a better teacher.
"""

import argparse
import time

from qlrec.evaluate import compression_report, format_table, perplexity
from qlrec.io.data import decode, encode, load_corpus, sample_calibration
from qlrec.lora import InjectionSpec, inject
from qlrec.model import TransformerConfig, TransformerModel, clone_as_teacher, generate
from qlrec.quantizer import QuantizeConfig, quantize_model
from qlrec.trainer import LossConfig, OptimConfig, lrec_train, train_fp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--bits", type=int, default=2, choices=(2, 3, 4, 8))
    args = ap.parse_args()

    corpus = load_corpus()
    test = corpus.split("test")[:8192]
    cfg = TransformerConfig(n_layers=2, d_model=64, n_heads=4, d_ff=172, ctx_len=64)

    t0 = time.time()
    fp = TransformerModel(cfg)
    train_fp(fp, corpus.split("train"), OptimConfig(learning_rate=3e-3, weight_decay=0.01), args.steps)
    teacher = clone_as_teacher(fp)
    print(f"teacher trained in {time.time() - t0:.0f}s")

    # Hessians from 64 random windows; group size 16 with act-order
    calib = sample_calibration(corpus, 64, cfg.ctx_len, seed=0)
    student, _ = quantize_model(teacher, calib, QuantizeConfig(bits=args.bits, group_size=16))

    corrected = student.copy()
    inject(corrected, InjectionSpec.all_projections(r=4, alpha=8.0), seed=0)
    lrec_calib = sample_calibration(corpus, 400, cfg.ctx_len, seed=1)
    lrec_train(corrected, teacher, lrec_calib, LossConfig.preset(args.bits),
               OptimConfig(learning_rate=1e-3, epochs=2), val_every=0)

    cols = {}
    for name, m in (("FP", teacher), (f"INT{args.bits}", student), (f"INT{args.bits}+LREC", corrected)):
        rep = compression_report(m)
        cols[name] = {"PPL": perplexity(m, test), "Compression": rep.rate,
                      "Effective bits": rep.effective_precision}
    print(format_table(cols, ["PPL", "Compression", "Effective bits"]))

    prompt = encode("KING HENRY:\n")
    for name, m in (("teacher", teacher), ("corrected", corrected)):
        print(f"--- {name}")
        print(decode(generate(m, prompt, cfg.ctx_len - prompt.size)))


if __name__ == "__main__":
    main()
