"""Separable-convolution backbones and the n-way ensemble fusion stage.

Each backbone is a light Xception-style stack: a regular 3x3 stem carrying
stage 0's width and stride, then stages of depthwise-separable residual
blocks. Every block ends in an elementwise add (the residual join), and the
feature tap is the final add output, before any pooling. An ensemble runs n
backbones over the same input and concatenates their maps on the channel
axis, optionally squeezing each through a 1x1 reduction first.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    conv2d,
    depthwise_conv2d,
    mul_bias,
    relu,
)

KERNEL = 3


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    stride: int
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"stage out_channels must be >= 1, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ValueError(f"stage stride must be 1 or 2, got {self.stride}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")


@dataclass(frozen=True)
class BackboneConfig:
    stages: Tuple[StageSpec, ...]
    input_channels: int = 3
    seed: int = 0
    pretraining_tag: str = "scratch"
    trainable: bool = True

    def __post_init__(self):
        if len(self.stages) == 0:
            raise ValueError("backbone needs at least one stage")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def cumulative_stride(self) -> int:
        prod = 1
        for s in self.stages:
            prod *= s.stride
        return prod

    @property
    def feature_width(self) -> int:
        return self.stages[-1].out_channels


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-a, a, size=shape)


def _block_layout(cfg: BackboneConfig):
    """Yield (prefix, kind, in_c, out_c, stride) for every layer, in build order."""
    c_in = cfg.input_channels
    for i, stage in enumerate(cfg.stages):
        for j in range(stage.blocks_per_stage):
            stride = stage.stride if j == 0 else 1
            kind = "stem" if (i == 0 and j == 0) else "sep"
            prefix = f"s{i}.b{j}"
            yield prefix, kind, c_in, stage.out_channels, stride
            c_in = stage.out_channels


class Backbone:
    """One feature extractor: owns its parameters, maps B x H x W x Cin to
    B x h x w x C with h = H / (product of stage strides)."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed)
        k = KERNEL
        for prefix, kind, c_in, c_out, stride in _block_layout(cfg):
            new = {}
            if kind == "stem":
                new[f"{prefix}.w"] = _uniform(rng, (k, k, c_in, c_out), k * k * c_in)
                new[f"{prefix}.g"] = np.ones(c_out)
                new[f"{prefix}.b"] = np.zeros(c_out)
            else:
                new[f"{prefix}.dw"] = _uniform(rng, (k, k, c_in), k * k)
                new[f"{prefix}.g1"] = np.ones(c_in)
                new[f"{prefix}.b1"] = np.zeros(c_in)
                new[f"{prefix}.pw"] = _uniform(rng, (1, 1, c_in, c_out), c_in)
                new[f"{prefix}.g2"] = np.ones(c_out)
                new[f"{prefix}.b2"] = np.zeros(c_out)
                if c_in != c_out or stride != 1:
                    new[f"{prefix}.proj"] = _uniform(rng, (1, 1, c_in, c_out), c_in)
            for name, arr in new.items():
                self.params[name] = Tensor(arr, requires_grad=cfg.trainable)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"backbone input must be B x H x W x C, got {x.shape}")
        if x.shape[3] != self.cfg.input_channels:
            raise ShapeError(
                f"backbone expects {self.cfg.input_channels} input channels, got {x.shape[3]}")
        cum = self.cfg.cumulative_stride
        for extent in (x.shape[1], x.shape[2]):
            if extent % cum != 0:
                raise ShapeError(
                    f"spatial extent {extent} is not divisible by cumulative stride {cum}")
        p = self.params
        h = x
        for prefix, kind, c_in, c_out, stride in _block_layout(self.cfg):
            if kind == "stem":
                h = conv2d(h, p[f"{prefix}.w"], stride=stride)
                h = add_bias(mul_bias(h, p[f"{prefix}.g"]), p[f"{prefix}.b"])
                h = relu(h)
            else:
                z = depthwise_conv2d(h, p[f"{prefix}.dw"], stride=stride)
                z = add_bias(mul_bias(z, p[f"{prefix}.g1"]), p[f"{prefix}.b1"])
                z = relu(z)
                z = conv2d(z, p[f"{prefix}.pw"])
                z = add_bias(mul_bias(z, p[f"{prefix}.g2"]), p[f"{prefix}.b2"])
                if f"{prefix}.proj" in p:
                    res = conv2d(h, p[f"{prefix}.proj"], stride=stride)
                else:
                    res = h
                h = add(res, z)
        return h


def backbone_forward(cfg: BackboneConfig, x: Tensor) -> Tensor:
    """Build a backbone from cfg (weights fixed by cfg.seed) and run it."""
    return Backbone(cfg).forward(x)


def backbone_output_shape(cfg: BackboneConfig, height: int, width: int) -> Tuple[int, int, int]:
    """Output geometry without allocating anything."""
    cum = cfg.cumulative_stride
    for extent in (height, width):
        if extent % cum != 0:
            raise ShapeError(
                f"spatial extent {extent} is not divisible by cumulative stride {cum}")
    return height // cum, width // cum, cfg.feature_width


def backbone_param_count(cfg: BackboneConfig) -> int:
    k = KERNEL
    total = 0
    for _, kind, c_in, c_out, stride in _block_layout(cfg):
        if kind == "stem":
            total += k * k * c_in * c_out + 2 * c_out
        else:
            total += k * k * c_in + 2 * c_in + c_in * c_out + 2 * c_out
            if c_in != c_out or stride != 1:
                total += c_in * c_out
    return total


@dataclass(frozen=True)
class EnsembleConfig:
    backbones: Tuple[BackboneConfig, ...]
    reduce_channels: int = 0

    def __post_init__(self):
        if len(self.backbones) == 0:
            raise ValueError("ensemble needs at least one backbone")
        if self.reduce_channels < 0:
            raise ValueError(f"reduce_channels must be >= 0, got {self.reduce_channels}")
        object.__setattr__(self, "backbones", tuple(self.backbones))
        strides = [tuple(s.stride for s in b.stages) for b in self.backbones]
        if any(s != strides[0] for s in strides):
            raise ShapeError(f"backbone geometry mismatch: stage strides {strides}")
        if self.reduce_channels:
            for b in self.backbones:
                if self.reduce_channels > b.feature_width:
                    raise ValueError(
                        f"reduce_channels {self.reduce_channels} exceeds backbone "
                        f"feature width {b.feature_width}")

    @property
    def n(self) -> int:
        return len(self.backbones)

    @property
    def fused_channels(self) -> int:
        if self.reduce_channels:
            return self.n * self.reduce_channels
        return sum(b.feature_width for b in self.backbones)


def reduce_1x1(fmap: Tensor, w: Tensor) -> Tensor:
    """Project channels with a 1x1 convolution, spatial extents unchanged."""
    if w.ndim != 4 or w.shape[0] != 1 or w.shape[1] != 1:
        raise ShapeError(f"reduce_1x1 weights must be 1 x 1 x C x Cr, got {w.shape}")
    if fmap.ndim != 4 or fmap.shape[3] != w.shape[2]:
        raise ShapeError(
            f"reduce_1x1: feature map channels {fmap.shape} do not match weights {w.shape}")
    return conv2d(fmap, w, stride=1)


def _env_threads() -> int:
    raw = os.environ.get("SCOPEFORMER_THREADS", "")
    if not raw:
        return 1
    try:
        val = int(raw)
    except ValueError:
        raise ValueError(f"SCOPEFORMER_THREADS must be an integer, got {raw!r}")
    if val < 1:
        raise ValueError(f"SCOPEFORMER_THREADS must be >= 1, got {val}")
    return val


class Ensemble:
    """n backbones over a shared input, channel-concatenated in config order."""

    def __init__(self, cfg: EnsembleConfig):
        self.cfg = cfg
        self.nets = [Backbone(b) for b in cfg.backbones]
        self.reduce_w: list = []
        if cfg.reduce_channels:
            for b in cfg.backbones:
                rng = np.random.default_rng([b.seed, 101])
                w = _uniform(rng, (1, 1, b.feature_width, cfg.reduce_channels),
                             b.feature_width)
                self.reduce_w.append(Tensor(w, requires_grad=True))

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, net in enumerate(self.nets):
            for name, t in net.params.items():
                out[f"bb{i}.{name}"] = t
        for i, w in enumerate(self.reduce_w):
            out[f"bb{i}.reduce.w"] = w
        return out

    def forward(self, x: Tensor, threads: Optional[int] = None) -> Tensor:
        if threads is None:
            threads = _env_threads()

        def run(i: int) -> Tensor:
            fmap = self.nets[i].forward(x)
            if self.reduce_w:
                fmap = reduce_1x1(fmap, self.reduce_w[i])
            return fmap

        n = len(self.nets)
        if threads > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=min(threads, n)) as pool:
                maps = list(pool.map(run, range(n)))
        else:
            maps = [run(i) for i in range(n)]
        spatial = {m.shape[:3] for m in maps}
        if len(spatial) != 1:
            raise ShapeError(f"backbone geometry mismatch at fusion: {sorted(spatial)}")
        if n == 1:
            return maps[0]
        return concat(maps, axis=3)


def ensemble_forward(cfg: EnsembleConfig, x: Tensor,
                     threads: Optional[int] = None) -> Tensor:
    return Ensemble(cfg).forward(x, threads=threads)


def ensemble_output_shape(cfg: EnsembleConfig, height: int, width: int) -> Tuple[int, int, int]:
    h, w, _ = backbone_output_shape(cfg.backbones[0], height, width)
    return h, w, cfg.fused_channels


def ensemble_param_count(cfg: EnsembleConfig) -> int:
    total = sum(backbone_param_count(b) for b in cfg.backbones)
    if cfg.reduce_channels:
        total += sum(b.feature_width * cfg.reduce_channels for b in cfg.backbones)
    return total


def paper_scale_backbone(seed: int = 0, pretraining_tag: str = "scratch") -> BackboneConfig:
    """The canonical five stride-2 stages: 224 x 224 in, 7 x 7 x 1024 out."""
    widths = (64, 128, 256, 512, 1024)
    return BackboneConfig(
        stages=tuple(StageSpec(c, 2) for c in widths),
        seed=seed,
        pretraining_tag=pretraining_tag,
    )
