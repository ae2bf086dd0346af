"""Overfit a toy two-backbone model on 32 synthetic samples.

This is the smallest end-to-end demonstration that the whole stack learns:
synthetic corpus -> two separable-conv backbones -> 1x1 reduction -> channel
concatenation -> transformer encoder -> weighted multi-label loss -> Adam.
Expected finish: training loss well under 0.05 with every label at 100%
accuracy, in well under a minute on one core.
"""

import tempfile
import time
from pathlib import Path

from scopeformer.config import build_model, load_config
from scopeformer.data import read_manifest, synth_generate
from scopeformer.trainer import evaluate, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy_overfit.json"


def main():
    cfg = load_config(CONFIG)
    print(f"config: {CONFIG.name} ({cfg.ensemble.n} backbones, "
          f"reduce to {cfg.ensemble.reduce_channels} channels, "
          f"ViT depth {cfg.vit.depth}, dim {cfg.vit.latent_dim})")

    workdir = Path(tempfile.mkdtemp(prefix="overfit_toy_"))
    manifest = synth_generate(cfg.synth.count, cfg.synth.size, cfg.synth.seed,
                              out_dir=workdir / "corpus")
    records = read_manifest(manifest)
    print(f"corpus: {len(records)} samples of size {cfg.synth.size} "
          f"-> {manifest}")

    model = build_model(cfg)
    print(f"model: {model.param_count():,} parameters, "
          f"{model.num_tokens} tokens per image")

    t0 = time.time()
    hist = train(model, records, cfg.train, cfg.weights, root=manifest.parent)
    losses = hist.train_losses
    print(f"trained {cfg.train.steps} steps in {time.time() - t0:.1f}s")
    for step in (0, 24, 49, 99, 199, 299):
        print(f"  step {step + 1:3d}: loss {losses[step]:.5f}")

    report = evaluate(model, records, cfg.weights, root=manifest.parent)
    print(f"final: loss {report.loss:.5f}, "
          f"mean accuracy {report.accuracy:.4f}, "
          f"worst label accuracy {report.per_label_accuracy.min():.4f}")


if __name__ == "__main__":
    main()
