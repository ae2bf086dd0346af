"""Compare one backbone, two diverse-seed backbones, and two cloned backbones.

Three model variants train under an identical budget on the synthetic task,
three seeds each, and report final validation loss. The diverse pair feeds
the encoder the same channel width as the single net (two maps reduced to
4 channels each versus one 8-channel map), so any gap comes from feature
diversity rather than capacity. At this tiny scale the differences sit
inside the seed noise; the point of the table is the apparatus, not a
headline number.
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from scopeformer.backbone import BackboneConfig, EnsembleConfig, StageSpec
from scopeformer.data import read_manifest, synth_generate
from scopeformer.loss import LabelWeights
from scopeformer.model import ScopeformerModel
from scopeformer.trainer import OptimConfig, TrainConfig, evaluate, train
from scopeformer.vit import ViTConfig

STAGES = (StageSpec(4, 2), StageSpec(8, 2))
VIT = ViTConfig(depth=2, latent_dim=16, heads=2, mlp_ratio=2.0)
SEEDS = (0, 1, 2)
STEPS, BATCH, LR = 120, 16, 3e-3


def make_model(kind: str, seed: int) -> ScopeformerModel:
    if kind == "n1":
        ens = EnsembleConfig(backbones=(
            BackboneConfig(stages=STAGES, seed=seed),))
    else:
        second = seed if kind == "n2_cloned" else seed + 1000
        ens = EnsembleConfig(backbones=(
            BackboneConfig(stages=STAGES, seed=seed),
            BackboneConfig(stages=STAGES, seed=second)),
            reduce_channels=4)
    return ScopeformerModel(VIT, (32, 32), ensemble_cfg=ens, seed=seed)


def main():
    workdir = Path(tempfile.mkdtemp(prefix="ensemble_trend_"))
    train_recs = read_manifest(synth_generate(48, 32, seed=101,
                                              out_dir=workdir / "train"))
    val_recs = read_manifest(synth_generate(32, 32, seed=202,
                                            out_dir=workdir / "val"))
    weights = LabelWeights.default()
    print(f"budget: {STEPS} steps, batch {BATCH}, lr {LR}, "
          f"{len(train_recs)} train / {len(val_recs)} val samples")

    results = {}
    for kind in ("n1", "n2_diverse", "n2_cloned"):
        finals = []
        for seed in SEEDS:
            t0 = time.time()
            model = make_model(kind, seed)
            cfg = TrainConfig(steps=STEPS, batch_size=BATCH, seed=seed,
                              optimizer=OptimConfig(lr=LR))
            train(model, train_recs, cfg, weights, root=workdir / "train")
            rep = evaluate(model, val_recs, weights, root=workdir / "val")
            finals.append(rep.loss)
            print(f"  {kind} seed {seed}: val loss {rep.loss:.4f} "
                  f"({time.time() - t0:.1f}s)")
        results[kind] = np.asarray(finals)

    print(f"\n{'variant':12s} {'mean':>8s} {'sd':>8s}")
    for kind, vals in results.items():
        print(f"{kind:12s} {vals.mean():8.4f} {vals.std(ddof=1):8.4f}")

    def pooled_sd(a, b):
        return float(np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0))

    diverse = results["n2_diverse"]
    for other_kind in ("n1", "n2_cloned"):
        other = results[other_kind]
        margin = other.mean() + pooled_sd(diverse, other) - diverse.mean()
        verdict = "within" if margin >= 0 else "OUTSIDE"
        print(f"diverse vs {other_kind}: {verdict} one pooled sd "
              f"(margin {margin:+.4f})")


if __name__ == "__main__":
    main()
