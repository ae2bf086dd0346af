"""The assembled classifier: backbones (or raw patches) to per-label logits.

Two modes. "n_cnn_vit" runs the backbone ensemble and feeds the fused
feature map to the encoder one token per spatial position; "raw_vit" skips
convolutions entirely and tokenizes non-overlapping image patches. Both
share the tokenizer weights (projection, positional table, class token)
owned here.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .backbone import Ensemble, EnsembleConfig, ensemble_output_shape
from .tensor import Tensor, sigmoid
from .vit import ViTConfig, ViTEncoder, patchify, tokenize_project

MODES = ("n_cnn_vit", "raw_vit")


class ScopeformerModel:
    def __init__(self, vit_cfg: ViTConfig, input_hw: Tuple[int, int],
                 ensemble_cfg: Optional[EnsembleConfig] = None,
                 mode: str = "n_cnn_vit", patch_size: int = 16,
                 input_channels: int = 3, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "n_cnn_vit" and ensemble_cfg is None:
            raise ValueError("n_cnn_vit mode needs an ensemble config")
        if mode == "raw_vit" and ensemble_cfg is not None:
            raise ValueError("raw_vit mode must not carry an ensemble config")
        self.vit_cfg = vit_cfg
        self.mode = mode
        self.input_hw = tuple(input_hw)
        self.patch_size = patch_size
        self.input_channels = input_channels

        H, W = self.input_hw
        if mode == "n_cnn_vit":
            self.ensemble: Optional[Ensemble] = Ensemble(ensemble_cfg)
            h, w, cf = ensemble_output_shape(ensemble_cfg, H, W)
        else:
            self.ensemble = None
            if patch_size < 1 or H % patch_size or W % patch_size:
                raise ValueError(
                    f"input {H} x {W} not divisible by patch size {patch_size}")
            h, w = H // patch_size, W // patch_size
            cf = patch_size * patch_size * input_channels
        self.grid_hw = (h, w)
        self.token_channels = cf
        self.num_tokens = h * w + (1 if vit_cfg.use_class_token else 0)

        D = vit_cfg.latent_dim
        seq = np.random.SeedSequence(seed)
        s_proj, s_pos, s_cls, s_enc = seq.spawn(4)
        rng = np.random.default_rng(s_proj)
        a = float(np.sqrt(1.0 / cf))
        self.proj = Tensor(rng.uniform(-a, a, (cf, D)), requires_grad=True)
        rng = np.random.default_rng(s_pos)
        self.pos = Tensor(rng.normal(0.0, 0.02, (self.num_tokens, D)),
                          requires_grad=True)
        if vit_cfg.use_class_token:
            rng = np.random.default_rng(s_cls)
            self.cls: Optional[Tensor] = Tensor(rng.normal(0.0, 0.02, D),
                                                requires_grad=True)
        else:
            self.cls = None
        self.encoder = ViTEncoder(vit_cfg, seed=s_enc)

    def tokens(self, x: Tensor, threads: Optional[int] = None) -> Tensor:
        if self.mode == "n_cnn_vit":
            fmap = self.ensemble.forward(x, threads=threads)
        else:
            fmap = patchify(x, self.patch_size)
        return tokenize_project(fmap, self.proj, self.pos, self.cls)

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                threads: Optional[int] = None, attn_sink=None) -> Tensor:
        toks = self.tokens(x, threads=threads)
        return self.encoder.forward(toks, training=training, rng=rng,
                                    attn_sink=attn_sink)

    def probabilities(self, x: Tensor, **kw) -> Tensor:
        return sigmoid(self.forward(x, **kw))

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        if self.ensemble is not None:
            for name, t in self.ensemble.parameters().items():
                out[f"ens.{name}"] = t
        out["tok.proj"] = self.proj
        out["tok.pos"] = self.pos
        if self.cls is not None:
            out["tok.cls"] = self.cls
        for name, t in self.encoder.params.items():
            out[f"vit.{name}"] = t
        return out

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())
