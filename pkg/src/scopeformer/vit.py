"""Token encoder: fused feature maps (or raw image patches) in, logits out.

Each spatial position of the fused map becomes one token via a linear
projection; a learned class token is prepended and learned positional
embeddings added. The encoder is a stack of pre-norm blocks
(x + MHSA(LN(x)), then + MLP(LN(.)) with GELU), and the head layer-norms
the class token and maps it linearly to one logit per label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax,
    tile,
    transpose,
)


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 12
    latent_dim: int = 1456
    heads: int = 8
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    num_labels: int = 6
    use_class_token: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.num_labels < 1:
            raise ValueError(f"num_labels must be >= 1, got {self.num_labels}")
        if self.latent_dim < 1 or self.latent_dim % self.heads != 0:
            raise ValueError(
                f"latent_dim {self.latent_dim} must be a positive multiple of "
                f"heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.latent_dim)))


def dense(x: Tensor, w: Tensor) -> Tensor:
    """x is B x T x Din, w is Din x Dout; one flat matrix product."""
    B, T, Din = x.shape
    flat = matmul(reshape(x, (B * T, Din)), w)
    return reshape(flat, (B, T, w.shape[1]))


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """Cut B x H x W x C into a grid of flattened P x P patches.

    Output is B x (H/P) x (W/P) x (P*P*C), each cell in row-major pixel
    order, so the result plugs into tokenize_project like a feature map.
    """
    if images.ndim != 4:
        raise ShapeError(f"patchify input must be B x H x W x C, got {images.shape}")
    B, H, W, C = images.shape
    P = patch_size
    if P < 1 or H % P != 0 or W % P != 0:
        raise ShapeError(f"image extents {H} x {W} not divisible by patch size {P}")
    x = reshape(images, (B, H // P, P, W // P, P, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, H // P, W // P, P * P * C))


def tokenize_project(fmap: Tensor, proj: Tensor, pos: Tensor,
                     cls: Optional[Tensor]) -> Tensor:
    """Project each spatial position to a token and add positional vectors.

    With a class token, pos has h*w + 1 rows and row 0 belongs to the class
    token (prepended at index 0); without one, pos has h*w rows.
    """
    if fmap.ndim != 4:
        raise ShapeError(f"tokenize_project needs B x h x w x C, got {fmap.shape}")
    B, h, w, Cf = fmap.shape
    if proj.ndim != 2 or proj.shape[0] != Cf:
        raise ShapeError(f"projection {proj.shape} does not accept {Cf} channels")
    D = proj.shape[1]
    T = h * w + (1 if cls is not None else 0)
    if pos.shape != (T, D):
        raise ShapeError(f"positional table {pos.shape} != expected ({T}, {D})")
    tokens = dense(reshape(fmap, (B, h * w, Cf)), proj)
    if cls is not None:
        if cls.shape != (D,):
            raise ShapeError(f"class token shape {cls.shape} != ({D},)")
        lead = tile(reshape(cls, (1, 1, D)), (B, 1, 1))
        tokens = concat([lead, tokens], axis=1)
    return add_bias(tokens, pos)


def mhsa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
         heads: int, attn_sink: Optional[List[Tensor]] = None) -> Tensor:
    """Multi-head self-attention over B x T x D tokens, shape preserving."""
    B, T, D = x.shape
    if D % heads != 0:
        raise ShapeError(f"latent dim {D} not divisible by {heads} heads")
    d = D // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, T, heads, d)), (0, 2, 1, 3))

    q = split(dense(x, wq))
    k = split(dense(x, wk))
    v = split(dense(x, wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn)
    mixed = matmul(attn, v)
    joined = reshape(transpose(mixed, (0, 2, 1, 3)), (B, T, D))
    return dense(joined, wo)


def encoder_block(x: Tensor, params: Dict[str, Tensor], heads: int,
                  drop_rate: float = 0.0, rng: Optional[np.random.Generator] = None,
                  attn_sink: Optional[List[Tensor]] = None) -> Tensor:
    """Pre-norm transformer block; dropout fires only when an rng is given."""
    t = layer_norm(x, params["ln1.g"], params["ln1.b"])
    a = mhsa(t, params["wq"], params["wk"], params["wv"], params["wo"],
             heads, attn_sink=attn_sink)
    if drop_rate > 0.0 and rng is not None:
        a = dropout(a, drop_rate, rng)
    x = add(x, a)
    t = layer_norm(x, params["ln2.g"], params["ln2.b"])
    m = add_bias(dense(t, params["w1"]), params["b1"])
    m = add_bias(dense(gelu(m), params["w2"]), params["b2"])
    if drop_rate > 0.0 and rng is not None:
        m = dropout(m, drop_rate, rng)
    return add(x, m)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-a, a, size=shape)


class ViTEncoder:
    """Owns the encoder-block and head parameters for a ViTConfig."""

    def __init__(self, cfg: ViTConfig, seed: int = 0):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        D, H = cfg.latent_dim, cfg.mlp_hidden
        arrays: Dict[str, np.ndarray] = {}
        for l in range(cfg.depth):
            p = f"blk{l}"
            arrays[f"{p}.ln1.g"] = np.ones(D)
            arrays[f"{p}.ln1.b"] = np.zeros(D)
            for name in ("wq", "wk", "wv", "wo"):
                arrays[f"{p}.{name}"] = _uniform(rng, (D, D), D)
            arrays[f"{p}.ln2.g"] = np.ones(D)
            arrays[f"{p}.ln2.b"] = np.zeros(D)
            arrays[f"{p}.w1"] = _uniform(rng, (D, H), D)
            arrays[f"{p}.b1"] = np.zeros(H)
            arrays[f"{p}.w2"] = _uniform(rng, (H, D), H)
            arrays[f"{p}.b2"] = np.zeros(D)
        arrays["head.ln.g"] = np.ones(D)
        arrays["head.ln.b"] = np.zeros(D)
        arrays["head.w"] = _uniform(rng, (D, cfg.num_labels), D)
        arrays["head.b"] = np.zeros(cfg.num_labels)
        for name, arr in arrays.items():
            self.params[name] = Tensor(arr, requires_grad=True)

    def _block_params(self, l: int) -> Dict[str, Tensor]:
        prefix = f"blk{l}."
        return {k[len(prefix):]: v for k, v in self.params.items()
                if k.startswith(prefix)}

    def forward(self, tokens: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                attn_sink: Optional[List[Tensor]] = None) -> Tensor:
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[2] != cfg.latent_dim:
            raise ShapeError(
                f"encoder expects B x T x {cfg.latent_dim} tokens, got {tokens.shape}")
        drop = cfg.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("training forward with dropout > 0 needs an rng")
        x = tokens
        for l in range(cfg.depth):
            x = encoder_block(x, self._block_params(l), cfg.heads,
                              drop_rate=drop, rng=rng, attn_sink=attn_sink)
        if cfg.use_class_token:
            pooled = reshape(slice_axis(x, 1, 0, 1), (x.shape[0], cfg.latent_dim))
        else:
            pooled = x.mean(axis=1)
        pooled = layer_norm(pooled, self.params["head.ln.g"], self.params["head.ln.b"])
        return add_bias(matmul(pooled, self.params["head.w"]), self.params["head.b"])


def vit_param_count(cfg: ViTConfig) -> int:
    """Encoder + head parameter total, computed without allocation."""
    D, H = cfg.latent_dim, cfg.mlp_hidden
    per_block = 4 * D + 4 * D * D + D * H + H + H * D + D
    return cfg.depth * per_block + 2 * D + D * cfg.num_labels + cfg.num_labels


def vit_forward(cfg: ViTConfig, tokens: Tensor,
                encoder: Optional[ViTEncoder] = None,
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run already-projected tokens through an encoder built from cfg.

    Without an explicit encoder, weights come deterministically from seed 0,
    so repeated calls agree bit for bit.
    """
    if encoder is None:
        encoder = ViTEncoder(cfg, seed=0)
    return encoder.forward(tokens, training=training, rng=rng)
