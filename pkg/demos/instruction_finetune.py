"""Memory-efficient instruction tuning: adapters on top of frozen packed weights.

The base model here is random-init so the demo stays fast; what it shows is
the mechanics. The packed weights never change, only the adapters train, and
the prompt part of each sample is masked out of the loss.

    python3 demos/instruction_finetune.py
"""

import numpy as np

from qlrec.evaluate import compression_report
from qlrec.io.data import EOT, decode, load_instructions, render_prompt, sample_calibration, split_instructions
from qlrec.lora import InjectionSpec
from qlrec.model import TransformerConfig, TransformerModel, generate
from qlrec.quantizer import QuantizeConfig, quantize_model
from qlrec.trainer import OptimConfig, emef_finetune, instruction_ce


def main():
    cfg = TransformerConfig(n_layers=2, d_model=64, n_heads=4, d_ff=172, ctx_len=128)
    calib = sample_calibration(np.random.default_rng(0).integers(32, 127, size=20000), 16, cfg.ctx_len, seed=0)
    model, _ = quantize_model(TransformerModel(cfg), calib, QuantizeConfig(bits=4, group_size=16))
    packed_before = [s.packed.words.copy() for b in model.blocks for s in b.slots().values()]

    train, test = split_instructions(load_instructions())
    tokens, mask = render_prompt(test[0], ctx_len=cfg.ctx_len)
    print("one rendered sample, scored part in brackets:")
    print(decode(tokens[~mask]) + "[" + decode(tokens[mask]) + "]")

    before = instruction_ce(model, test)
    res = emef_finetune(model, train, OptimConfig(learning_rate=3e-3, epochs=3),
                        spec=InjectionSpec(("q", "v", "mlp_down"), r=8, alpha=16.0))
    after = instruction_ce(model, test)
    print(f"held-out completion CE {before:.3f} -> {after:.3f} over {len(res.history)} steps")

    packed_after = [s.packed.words for b in model.blocks for s in b.slots().values()]
    print("packed weights untouched:", all(np.array_equal(a, b) for a, b in zip(packed_before, packed_after)))
    rep = compression_report(model)
    print(f"adapters add {rep.bytes_adapters} bytes; rate vs FP16 {rep.rate:.2f}x "
          f"(without adapters {rep.rate_gptq:.2f}x)")

    prompt = tokens[~mask]
    out = generate(model, prompt, min(24, cfg.ctx_len - prompt.size))
    new = out[prompt.size:]
    stop = np.flatnonzero(new == EOT)
    print("greedy completion:", repr(decode(new[:stop[0]] if stop.size else new)))


if __name__ == "__main__":
    main()
