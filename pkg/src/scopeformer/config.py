"""Run configuration: one JSON document covering model, training, data, loss.

The document has four sections. `model` describes the architecture (a
backbone ensemble feeding the transformer encoder, or raw patch tokens),
`train` the optimization loop, `data` the corpus (a manifest on disk or a
synthetic recipe), and `loss` the label weighting. Omitted fields take the
defaults below; `canonical_document` materializes every default so that two
documents meaning the same run serialize to the same bytes and hash to the
same digest. `dry_run_plan` reports the full shape and parameter arithmetic
of a config without allocating any weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from hashlib import blake2b
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

from .backbone import (BackboneConfig, EnsembleConfig, StageSpec,
                       backbone_output_shape, backbone_param_count,
                       ensemble_output_shape)
from .loss import LabelWeights
from .model import MODES, ScopeformerModel
from .trainer import OPTIM_KINDS, OptimConfig, TrainConfig
from .vit import ViTConfig, vit_param_count


class ConfigError(ValueError):
    """Invalid run configuration; `field` is the dotted path at fault."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


_MISSING = object()

_TOP_KEYS = ("model", "train", "data", "loss")
_MODEL_KEYS = ("mode", "input_size", "input_channels", "seed", "n_backbones",
               "backbone", "reduce_channels", "patch_size", "vit")
_BACKBONE_KEYS = ("stages", "seeds", "pretraining_tags", "trainable")
_STAGE_KEYS = ("out_channels", "stride", "blocks_per_stage")
_VIT_KEYS = ("depth", "dim", "heads", "mlp_ratio", "dropout", "num_labels",
             "class_token")
_TRAIN_KEYS = ("optimizer", "batch_size", "steps", "seed", "eval_every",
               "ckpt_every", "threads")
_OPT_KEYS = ("kind", "lr", "momentum", "beta1", "beta2", "eps", "clip_norm")
_DATA_KEYS = ("manifest", "val_manifest", "synth")
_SYNTH_KEYS = ("count", "size", "seed")
_LOSS_KEYS = ("weights", "eps")


class _Section:
    """A JSON object plus its dotted path, with typed field accessors."""

    def __init__(self, data: Mapping[str, Any], path: str,
                 keys: Sequence[str]):
        if not isinstance(data, dict):
            raise ConfigError(path or "config",
                              f"expected an object, got {type(data).__name__}")
        for key in data:
            if key not in keys:
                raise ConfigError(self.join(path, str(key)), "unknown key")
        self.data = data
        self.path = path

    @staticmethod
    def join(path: str, key: str) -> str:
        return f"{path}.{key}" if path else key

    def at(self, key: str) -> str:
        return self.join(self.path, key)

    def has(self, key: str) -> bool:
        return key in self.data and self.data[key] is not None

    def child(self, key: str, keys: Sequence[str],
              required: bool = False) -> Optional["_Section"]:
        if not self.has(key):
            if required:
                raise ConfigError(self.at(key), "section is required")
            return None
        return _Section(self.data[key], self.at(key), keys)

    def _raw(self, key: str, default):
        if not self.has(key):
            if default is _MISSING:
                raise ConfigError(self.at(key), "field is required")
            return _MISSING, default
        return self.data[key], _MISSING

    def get_int(self, key: str, default=_MISSING,
                minimum: Optional[int] = None) -> int:
        v, d = self._raw(key, default)
        if v is _MISSING:
            return d
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(self.at(key), f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(self.at(key), f"must be >= {minimum}, got {v}")
        return v

    def get_float(self, key: str, default=_MISSING) -> float:
        v, d = self._raw(key, default)
        if v is _MISSING:
            return d
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(self.at(key), f"expected a number, got {v!r}")
        return float(v)

    def get_str(self, key: str, default=_MISSING,
                choices: Optional[Sequence[str]] = None) -> str:
        v, d = self._raw(key, default)
        if v is _MISSING:
            return d
        if not isinstance(v, str):
            raise ConfigError(self.at(key), f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(self.at(key),
                              f"must be one of {list(choices)}, got {v!r}")
        return v

    def get_bool(self, key: str, default=_MISSING) -> bool:
        v, d = self._raw(key, default)
        if v is _MISSING:
            return d
        if not isinstance(v, bool):
            raise ConfigError(self.at(key), f"expected true or false, got {v!r}")
        return v

    def get_list(self, key: str, default=_MISSING) -> list:
        v, d = self._raw(key, default)
        if v is _MISSING:
            return d
        if not isinstance(v, list):
            raise ConfigError(self.at(key), f"expected a list, got {v!r}")
        return v


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for generating a synthetic corpus at training time."""
    count: int
    size: int
    seed: int


@dataclass(frozen=True)
class RunConfig:
    mode: str
    input_hw: Tuple[int, int]
    input_channels: int
    model_seed: int
    vit: ViTConfig
    ensemble: Optional[EnsembleConfig]
    patch_size: int
    train: TrainConfig
    weights: LabelWeights
    loss_weights_raw: Tuple[float, ...]
    loss_eps: float
    manifest: Optional[str]
    val_manifest: Optional[str]
    synth: Optional[SynthSpec]


def _parse_input_size(model: _Section) -> Tuple[int, int]:
    path = model.at("input_size")
    if not model.has("input_size"):
        return (224, 224)
    v = model.data["input_size"]
    if isinstance(v, int) and not isinstance(v, bool):
        if v < 1:
            raise ConfigError(path, f"must be >= 1, got {v}")
        return (v, v)
    if (isinstance(v, list) and len(v) == 2
            and all(isinstance(x, int) and not isinstance(x, bool) and x >= 1
                    for x in v)):
        return (v[0], v[1])
    raise ConfigError(path, f"expected a size or [height, width], got {v!r}")


def _parse_stages(bk: _Section) -> Tuple[StageSpec, ...]:
    path = bk.at("stages")
    raw = bk.get_list("stages")
    if not raw:
        raise ConfigError(path, "needs at least one stage")
    stages = []
    for i, item in enumerate(raw):
        sp = _Section(item, f"{path}[{i}]", _STAGE_KEYS)
        out_c = sp.get_int("out_channels", minimum=1)
        stride = sp.get_int("stride")
        blocks = sp.get_int("blocks_per_stage", default=1, minimum=1)
        try:
            stages.append(StageSpec(out_c, stride, blocks))
        except ValueError as err:
            raise ConfigError(f"{path}[{i}]", str(err)) from None
    return tuple(stages)


def _per_backbone_list(bk: _Section, key: str, n: int, default_for, check):
    """An optional per-backbone list (or scalar broadcast to all backbones)."""
    if not bk.has(key):
        return [default_for(i) for i in range(n)]
    v = bk.data[key]
    if not isinstance(v, list):
        v = [v] * n
    if len(v) != n:
        raise ConfigError(bk.at(key),
                          f"expected {n} entries (one per backbone), got {len(v)}")
    for x in v:
        if not check(x):
            raise ConfigError(bk.at(key), f"bad entry {x!r}")
    return v


def _parse_model(model: _Section):
    mode = model.get_str("mode", default="n_cnn_vit", choices=MODES)
    input_hw = _parse_input_size(model)
    input_channels = model.get_int("input_channels", default=3, minimum=1)
    model_seed = model.get_int("seed", default=0)

    vs = model.child("vit", _VIT_KEYS) or _Section({}, model.at("vit"), _VIT_KEYS)
    depth = vs.get_int("depth", default=12, minimum=1)
    dim = vs.get_int("dim", default=1456, minimum=1)
    heads = vs.get_int("heads", default=8, minimum=1)
    if dim % heads:
        raise ConfigError(vs.at("dim"),
                          f"must be a multiple of heads ({heads}), got {dim}")
    mlp_ratio = vs.get_float("mlp_ratio", default=4.0)
    dropout = vs.get_float("dropout", default=0.0)
    num_labels = vs.get_int("num_labels", default=6, minimum=1)
    class_token = vs.get_bool("class_token", default=True)
    try:
        vit = ViTConfig(depth=depth, latent_dim=dim, heads=heads,
                        mlp_ratio=mlp_ratio, dropout=dropout,
                        num_labels=num_labels, use_class_token=class_token)
    except ValueError as err:
        raise ConfigError(vs.path, str(err)) from None

    H, W = input_hw
    if mode == "raw_vit":
        for key in ("backbone", "n_backbones", "reduce_channels"):
            if model.has(key):
                raise ConfigError(model.at(key), "not allowed in raw_vit mode")
        patch = model.get_int("patch_size", default=16, minimum=1)
        if H % patch or W % patch:
            raise ConfigError(model.at("input_size"),
                              f"{H} x {W} is not divisible by patch size {patch}")
        return mode, input_hw, input_channels, model_seed, vit, None, patch

    if model.has("patch_size"):
        raise ConfigError(model.at("patch_size"), "only used in raw_vit mode")
    bk = model.child("backbone", _BACKBONE_KEYS, required=True)
    n = model.get_int("n_backbones", default=1, minimum=1)
    stages = _parse_stages(bk)
    seeds = _per_backbone_list(
        bk, "seeds", n, default_for=lambda i: i,
        check=lambda x: isinstance(x, int) and not isinstance(x, bool))
    tags = _per_backbone_list(
        bk, "pretraining_tags", n, default_for=lambda i: "scratch",
        check=lambda x: isinstance(x, str))
    trainable = _per_backbone_list(
        bk, "trainable", n, default_for=lambda i: True,
        check=lambda x: isinstance(x, bool))
    reduce_channels = model.get_int("reduce_channels", default=0, minimum=0)

    backbones = tuple(
        BackboneConfig(stages=stages, input_channels=input_channels,
                       seed=seeds[i], pretraining_tag=tags[i],
                       trainable=trainable[i])
        for i in range(n))
    try:
        ensemble = EnsembleConfig(backbones=backbones,
                                  reduce_channels=reduce_channels)
    except ValueError as err:
        raise ConfigError(model.at("reduce_channels"), str(err)) from None
    cum = backbones[0].cumulative_stride
    if H % cum or W % cum:
        raise ConfigError(
            model.at("input_size"),
            f"{H} x {W} is not divisible by the cumulative stride {cum}")
    return mode, input_hw, input_channels, model_seed, vit, ensemble, 16


def _parse_train(top: _Section) -> TrainConfig:
    ts = top.child("train", _TRAIN_KEYS) or _Section({}, "train", _TRAIN_KEYS)
    os_ = ts.child("optimizer", _OPT_KEYS) or _Section({}, ts.at("optimizer"),
                                                       _OPT_KEYS)
    fields = dict(
        kind=os_.get_str("kind", default="adam", choices=OPTIM_KINDS),
        lr=os_.get_float("lr", default=3e-4),
        momentum=os_.get_float("momentum", default=0.9),
        beta1=os_.get_float("beta1", default=0.9),
        beta2=os_.get_float("beta2", default=0.999),
        eps=os_.get_float("eps", default=1e-8),
        clip_norm=os_.get_float("clip_norm", default=0.0))
    try:
        optim = OptimConfig(**fields)
    except ValueError as err:
        raise ConfigError(os_.path, str(err)) from None
    threads = ts.get_int("threads", minimum=1) if ts.has("threads") else None
    fields = dict(
        steps=ts.get_int("steps", default=300, minimum=1),
        batch_size=ts.get_int("batch_size", default=8, minimum=1),
        seed=ts.get_int("seed", default=0),
        eval_every=ts.get_int("eval_every", default=0, minimum=0),
        ckpt_every=ts.get_int("ckpt_every", default=0, minimum=0))
    try:
        return TrainConfig(optimizer=optim, threads=threads, **fields)
    except ValueError as err:
        raise ConfigError(ts.path, str(err)) from None


def _parse_data(top: _Section):
    ds = top.child("data", _DATA_KEYS)
    if ds is None:
        return None, None, None
    if ds.has("manifest") == ds.has("synth"):
        raise ConfigError(ds.path,
                          "needs exactly one of 'manifest' or 'synth'")
    manifest = ds.get_str("manifest", default=None)
    val_manifest = ds.get_str("val_manifest", default=None)
    synth = None
    ss = ds.child("synth", _SYNTH_KEYS)
    if ss is not None:
        synth = SynthSpec(count=ss.get_int("count", default=64, minimum=1),
                          size=ss.get_int("size", default=64, minimum=16),
                          seed=ss.get_int("seed", default=0))
    return manifest, val_manifest, synth


def _parse_loss(top: _Section, num_labels: int):
    ls = top.child("loss", _LOSS_KEYS) or _Section({}, "loss", _LOSS_KEYS)
    if ls.has("weights"):
        raw = ls.get_list("weights")
        if len(raw) != num_labels:
            raise ConfigError(ls.at("weights"),
                              f"expected {num_labels} weights, got {len(raw)}")
        for x in raw:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ConfigError(ls.at("weights"), f"bad weight {x!r}")
        raw = [float(x) for x in raw]
    else:
        raw = [1.0] * num_labels
        if num_labels == 6:
            raw[0] = 2.0
    try:
        weights = LabelWeights(raw)
    except ValueError as err:
        raise ConfigError(ls.at("weights"), str(err)) from None
    eps = ls.get_float("eps", default=1e-7)
    if not 0.0 < eps < 0.5:
        raise ConfigError(ls.at("eps"), f"must be in (0, 0.5), got {eps}")
    return weights, tuple(raw), eps


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    """Validate a JSON document and build the typed run configuration.

    Raises ConfigError with the dotted field path of the first problem.
    """
    top = _Section(doc, "", _TOP_KEYS)
    model = top.child("model", _MODEL_KEYS, required=True)
    (mode, input_hw, input_channels, model_seed, vit, ensemble,
     patch_size) = _parse_model(model)
    train_cfg = _parse_train(top)
    manifest, val_manifest, synth = _parse_data(top)
    weights, weights_raw, eps = _parse_loss(top, vit.num_labels)
    return RunConfig(mode=mode, input_hw=input_hw,
                     input_channels=input_channels, model_seed=model_seed,
                     vit=vit, ensemble=ensemble, patch_size=patch_size,
                     train=train_cfg, weights=weights,
                     loss_weights_raw=weights_raw, loss_eps=eps,
                     manifest=manifest, val_manifest=val_manifest, synth=synth)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file {path} is missing")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"{path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return parse_config(doc)


def canonical_document(cfg: RunConfig) -> Dict[str, Any]:
    """The fully defaulted document; equal configs canonicalize identically."""
    model: Dict[str, Any] = {
        "mode": cfg.mode,
        "input_size": [cfg.input_hw[0], cfg.input_hw[1]],
        "input_channels": cfg.input_channels,
        "seed": cfg.model_seed,
        "vit": {
            "depth": cfg.vit.depth,
            "dim": cfg.vit.latent_dim,
            "heads": cfg.vit.heads,
            "mlp_ratio": float(cfg.vit.mlp_ratio),
            "dropout": float(cfg.vit.dropout),
            "num_labels": cfg.vit.num_labels,
            "class_token": cfg.vit.use_class_token,
        },
    }
    if cfg.mode == "n_cnn_vit":
        ens = cfg.ensemble
        model["n_backbones"] = ens.n
        model["reduce_channels"] = ens.reduce_channels
        model["backbone"] = {
            "stages": [{"out_channels": s.out_channels, "stride": s.stride,
                        "blocks_per_stage": s.blocks_per_stage}
                       for s in ens.backbones[0].stages],
            "seeds": [b.seed for b in ens.backbones],
            "pretraining_tags": [b.pretraining_tag for b in ens.backbones],
            "trainable": [b.trainable for b in ens.backbones],
        }
    else:
        model["patch_size"] = cfg.patch_size

    tr = cfg.train
    doc: Dict[str, Any] = {
        "model": model,
        "train": {
            "optimizer": {
                "kind": tr.optimizer.kind,
                "lr": float(tr.optimizer.lr),
                "momentum": float(tr.optimizer.momentum),
                "beta1": float(tr.optimizer.beta1),
                "beta2": float(tr.optimizer.beta2),
                "eps": float(tr.optimizer.eps),
                "clip_norm": float(tr.optimizer.clip_norm),
            },
            "batch_size": tr.batch_size,
            "steps": tr.steps,
            "seed": tr.seed,
            "eval_every": tr.eval_every,
            "ckpt_every": tr.ckpt_every,
            "threads": tr.threads,
        },
        "loss": {
            "weights": list(cfg.loss_weights_raw),
            "eps": cfg.loss_eps,
        },
    }
    if cfg.manifest is not None or cfg.synth is not None:
        data: Dict[str, Any] = {}
        if cfg.manifest is not None:
            data["manifest"] = cfg.manifest
        if cfg.synth is not None:
            data["synth"] = {"count": cfg.synth.count, "size": cfg.synth.size,
                             "seed": cfg.synth.seed}
        if cfg.val_manifest is not None:
            data["val_manifest"] = cfg.val_manifest
        doc["data"] = data
    return doc


def config_json(cfg: RunConfig) -> str:
    """Canonical serialized form, stable across key order and defaults."""
    return json.dumps(canonical_document(cfg), sort_keys=True,
                      separators=(",", ":"))


def config_digest(cfg: RunConfig) -> int:
    """u64 fingerprint of the canonical form; stored in checkpoints."""
    digest = blake2b(config_json(cfg).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def build_model(cfg: RunConfig) -> ScopeformerModel:
    return ScopeformerModel(cfg.vit, cfg.input_hw, ensemble_cfg=cfg.ensemble,
                            mode=cfg.mode, patch_size=cfg.patch_size,
                            input_channels=cfg.input_channels,
                            seed=cfg.model_seed)


def dry_run_plan(cfg: RunConfig) -> Dict[str, Any]:
    """Shape and parameter arithmetic for a config, without any allocation."""
    H, W = cfg.input_hw
    D = cfg.vit.latent_dim
    if cfg.mode == "n_cnn_vit":
        ens = cfg.ensemble
        per_map = backbone_output_shape(ens.backbones[0], H, W)
        h, w, cf = ensemble_output_shape(ens, H, W)
        backbone_params = sum(backbone_param_count(b) for b in ens.backbones)
        reduce_params = ens.n * per_map[2] * ens.reduce_channels
    else:
        p = cfg.patch_size
        per_map = None
        h, w = H // p, W // p
        cf = p * p * cfg.input_channels
        backbone_params = reduce_params = 0
    tokens = h * w + (1 if cfg.vit.use_class_token else 0)
    tokenizer_params = (cf * D + tokens * D
                        + (D if cfg.vit.use_class_token else 0))
    encoder_params = vit_param_count(cfg.vit)
    return {
        "mode": cfg.mode,
        "input": (H, W, cfg.input_channels),
        "backbone_map": per_map,
        "fused_map": (h, w, cf),
        "tokens": tokens,
        "latent_dim": D,
        "params": {
            "backbones": backbone_params,
            "reduction": reduce_params,
            "tokenizer": tokenizer_params,
            "encoder": encoder_params,
            "total": (backbone_params + reduce_params + tokenizer_params
                      + encoder_params),
        },
    }


def dry_run_text(cfg: RunConfig) -> str:
    plan = dry_run_plan(cfg)
    H, W, C = plan["input"]
    h, w, cf = plan["fused_map"]
    lines = [f"mode          {plan['mode']}",
             f"input         {H} x {W} x {C}"]
    if plan["mode"] == "n_cnn_vit":
        bh, bw, bc = plan["backbone_map"]
        ens = cfg.ensemble
        lines.append(f"backbone map  {bh} x {bw} x {bc}")
        lines.append(f"fused map     {h} x {w} x {cf}  "
                     f"(n={ens.n}, reduce_channels={ens.reduce_channels})")
    else:
        lines.append(f"patch map     {h} x {w} x {cf}  "
                     f"(patch {cfg.patch_size})")
    suffix = " (grid + class token)" if cfg.vit.use_class_token else " (grid)"
    lines.append(f"tokens        {plan['tokens']} x {plan['latent_dim']}"
                 + suffix)
    p = plan["params"]
    lines.append(f"parameters    backbones {p['backbones']:,} | "
                 f"reduction {p['reduction']:,} | "
                 f"tokenizer {p['tokenizer']:,} | "
                 f"encoder {p['encoder']:,} | total {p['total']:,}")
    lines.append(f"config digest 0x{config_digest(cfg):016x}")
    return "\n".join(lines)
