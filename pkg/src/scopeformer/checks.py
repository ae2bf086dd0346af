"""Finite-difference verification cases for every differentiable op.

Each registry entry builds deterministic inputs and runs grad_check over
every differentiable argument slot, reducing op outputs to a scalar through
a fixed random projection so the whole Jacobian is exercised. The final
`scopeformer` entry wires a tiny two-backbone model end to end, including
the weighted loss, and checks both an input and a deep parameter.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from .backbone import BackboneConfig, EnsembleConfig, StageSpec
from .loss import LabelWeights, weighted_log_loss
from .model import ScopeformerModel
from .tensor import (GradCheckReport, Tensor, add, add_bias, clip, concat,
                     conv2d, depthwise_conv2d, dropout, gelu, grad_check,
                     layer_norm, log, matmul, mul, mul_bias, reduce_mean,
                     reduce_sum, relu, reshape, scale, sigmoid, slice_axis,
                     softmax, sub, tile, transpose)
from .vit import ViTConfig, encoder_block, mhsa

Slots = List[Tuple[str, GradCheckReport]]
_CASES: Dict[str, Callable[[np.random.Generator, float], Slots]] = {}


def _case(name):
    def register(fn):
        _CASES[name] = fn
        return fn
    return register


def _proj(rng, shape) -> Tensor:
    """Fixed random cotangent; sum(out * proj) makes any op scalar-valued."""
    return Tensor(rng.normal(size=shape))


def _away_from(x: np.ndarray, points, margin: float = 0.05) -> np.ndarray:
    """Nudge samples off the given kink locations so h=1e-5 stays one-sided."""
    for p in points:
        x = np.where(np.abs(x - p) < margin, x + 4 * margin, x)
    return x


@_case("add")
def _add(rng, tol):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (3, 4))
    return [("a", grad_check(lambda t: reduce_sum(mul(add(t, b), r)), a, tol=tol)),
            ("b", grad_check(lambda t: reduce_sum(mul(add(a, t), r)), b, tol=tol))]


@_case("sub")
def _sub(rng, tol):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (3, 4))
    return [("a", grad_check(lambda t: reduce_sum(mul(sub(t, b), r)), a, tol=tol)),
            ("b", grad_check(lambda t: reduce_sum(mul(sub(a, t), r)), b, tol=tol))]


@_case("mul")
def _mul(rng, tol):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (3, 4))
    return [("a", grad_check(lambda t: reduce_sum(mul(mul(t, b), r)), a, tol=tol)),
            ("b", grad_check(lambda t: reduce_sum(mul(mul(a, t), r)), b, tol=tol))]


@_case("scale")
def _scale(rng, tol):
    a = Tensor(rng.normal(size=(2, 5)))
    r = _proj(rng, (2, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(scale(t, -1.7), r)), a, tol=tol))]


@_case("relu")
def _relu(rng, tol):
    a = Tensor(_away_from(rng.normal(size=(4, 5)), (0.0,)))
    r = _proj(rng, (4, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(relu(t), r)), a, tol=tol))]


@_case("gelu")
def _gelu(rng, tol):
    a = Tensor(rng.normal(size=(4, 5)))
    r = _proj(rng, (4, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(gelu(t), r)), a, tol=tol))]


@_case("sigmoid")
def _sigmoid(rng, tol):
    a = Tensor(rng.normal(size=(4, 5)))
    r = _proj(rng, (4, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(sigmoid(t), r)), a, tol=tol))]


@_case("log")
def _log(rng, tol):
    a = Tensor(rng.uniform(0.2, 2.0, size=(4, 5)))
    r = _proj(rng, (4, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(log(t), r)), a, tol=tol))]


@_case("clip")
def _clip(rng, tol):
    a = Tensor(_away_from(rng.uniform(-2.0, 2.0, size=(4, 5)), (-0.5, 0.5)))
    r = _proj(rng, (4, 5))
    return [("a", grad_check(lambda t: reduce_sum(mul(clip(t, -0.5, 0.5), r)),
                             a, tol=tol))]


@_case("dropout")
def _dropout(rng, tol):
    a = Tensor(rng.normal(size=(4, 6)))
    r = _proj(rng, (4, 6))

    def f(t):
        return reduce_sum(mul(dropout(t, 0.4, np.random.default_rng(12345)), r))

    return [("a", grad_check(f, a, tol=tol))]


@_case("matmul")
def _matmul(rng, tol):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    r = _proj(rng, (3, 2))
    out = [("a", grad_check(lambda t: reduce_sum(mul(matmul(t, b), r)), a, tol=tol)),
           ("b", grad_check(lambda t: reduce_sum(mul(matmul(a, t), r)), b, tol=tol))]
    a3, b3 = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 2)))
    r3 = _proj(rng, (2, 3, 2))
    out += [("a stacked", grad_check(lambda t: reduce_sum(mul(matmul(t, b3), r3)), a3, tol=tol)),
            ("b stacked", grad_check(lambda t: reduce_sum(mul(matmul(a3, t), r3)), b3, tol=tol))]
    return out


@_case("conv2d")
def _conv2d(rng, tol):
    x = Tensor(rng.normal(size=(2, 5, 5, 3)))
    w = Tensor(rng.normal(size=(3, 3, 3, 4)))
    out = []
    for stride in (1, 2):
        h = (5 + 2 - 3) // stride + 1
        r = _proj(rng, (2, h, h, 4))
        out.append((f"x stride {stride}",
                    grad_check(lambda t: reduce_sum(mul(conv2d(t, w, stride=stride), r)),
                               x, tol=tol)))
        out.append((f"w stride {stride}",
                    grad_check(lambda t: reduce_sum(mul(conv2d(x, t, stride=stride), r)),
                               w, tol=tol)))
    return out


@_case("depthwise_conv2d")
def _depthwise(rng, tol):
    x = Tensor(rng.normal(size=(2, 5, 5, 3)))
    w = Tensor(rng.normal(size=(3, 3, 3)))
    out = []
    for stride in (1, 2):
        h = (5 + 2 - 3) // stride + 1
        r = _proj(rng, (2, h, h, 3))
        out.append((f"x stride {stride}",
                    grad_check(lambda t: reduce_sum(mul(depthwise_conv2d(t, w, stride=stride), r)),
                               x, tol=tol)))
        out.append((f"w stride {stride}",
                    grad_check(lambda t: reduce_sum(mul(depthwise_conv2d(x, t, stride=stride), r)),
                               w, tol=tol)))
    return out


@_case("softmax")
def _softmax(rng, tol):
    x = Tensor(rng.normal(size=(2, 3, 5)))
    r = _proj(rng, (2, 3, 5))
    return [("x", grad_check(lambda t: reduce_sum(mul(softmax(t, axis=-1), r)),
                             x, tol=tol))]


@_case("layer_norm")
def _layer_norm(rng, tol):
    x = Tensor(rng.normal(size=(2, 4, 8)))
    g, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
    r = _proj(rng, (2, 4, 8))
    return [("x", grad_check(lambda t: reduce_sum(mul(layer_norm(t, g, b), r)), x, tol=tol)),
            ("gamma", grad_check(lambda t: reduce_sum(mul(layer_norm(x, t, b), r)), g, tol=tol)),
            ("beta", grad_check(lambda t: reduce_sum(mul(layer_norm(x, g, t), r)), b, tol=tol))]


@_case("concat")
def _concat(rng, tol):
    parts = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    r = _proj(rng, (2, 9))
    out = []
    for i in range(3):
        def f(t, i=i):
            pieces = [t if j == i else parts[j] for j in range(3)]
            return reduce_sum(mul(concat(pieces, axis=1), r))
        out.append((f"part {i}", grad_check(f, parts[i], tol=tol)))
    return out


@_case("reshape")
def _reshape(rng, tol):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    r = _proj(rng, (4, 6))
    return [("x", grad_check(lambda t: reduce_sum(mul(reshape(t, (4, 6)), r)),
                             x, tol=tol))]


@_case("transpose")
def _transpose(rng, tol):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    r = _proj(rng, (4, 2, 3))
    return [("x", grad_check(lambda t: reduce_sum(mul(transpose(t, (2, 0, 1)), r)),
                             x, tol=tol))]


@_case("slice_axis")
def _slice_axis(rng, tol):
    x = Tensor(rng.normal(size=(3, 5, 4)))
    r = _proj(rng, (3, 3, 4))
    return [("x", grad_check(lambda t: reduce_sum(mul(slice_axis(t, 1, 1, 4), r)),
                             x, tol=tol))]


@_case("reduce_sum")
def _reduce_sum(rng, tol):
    x = Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (4,))
    return [("all", grad_check(lambda t: reduce_sum(t), x, tol=tol)),
            ("axis 0", grad_check(lambda t: reduce_sum(mul(reduce_sum(t, axis=0), r)),
                                  x, tol=tol))]


@_case("reduce_mean")
def _reduce_mean(rng, tol):
    x = Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (3,))
    return [("all", grad_check(lambda t: reduce_mean(t), x, tol=tol)),
            ("axis 1", grad_check(lambda t: reduce_sum(mul(reduce_mean(t, axis=1), r)),
                                  x, tol=tol))]


@_case("tile")
def _tile(rng, tol):
    x = Tensor(rng.normal(size=(1, 3, 1)))
    r = _proj(rng, (2, 3, 4))
    return [("x", grad_check(lambda t: reduce_sum(mul(tile(t, (2, 1, 4)), r)),
                             x, tol=tol))]


@_case("add_bias")
def _add_bias(rng, tol):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    b1, b2 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (2, 3, 4))
    return [("x", grad_check(lambda t: reduce_sum(mul(add_bias(t, b1), r)), x, tol=tol)),
            ("b rank 1", grad_check(lambda t: reduce_sum(mul(add_bias(x, t), r)), b1, tol=tol)),
            ("b rank 2", grad_check(lambda t: reduce_sum(mul(add_bias(x, t), r)), b2, tol=tol))]


@_case("mul_bias")
def _mul_bias(rng, tol):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    m1, m2 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4)))
    r = _proj(rng, (2, 3, 4))
    return [("x", grad_check(lambda t: reduce_sum(mul(mul_bias(t, m1), r)), x, tol=tol)),
            ("m rank 1", grad_check(lambda t: reduce_sum(mul(mul_bias(x, t), r)), m1, tol=tol)),
            ("m rank 2", grad_check(lambda t: reduce_sum(mul(mul_bias(x, t), r)), m2, tol=tol))]


@_case("weighted_log_loss")
def _loss(rng, tol):
    probs = Tensor(rng.uniform(0.05, 0.95, size=(4, 6)))
    labels = (rng.uniform(size=(4, 6)) < 0.5).astype(np.float64)
    weights = LabelWeights.default()
    return [("probs", grad_check(lambda t: weighted_log_loss(t, labels, weights),
                                 probs, tol=tol))]


@_case("mhsa")
def _mhsa(rng, tol):
    x = Tensor(rng.normal(size=(2, 5, 8)))
    ws = {k: Tensor(rng.normal(size=(8, 8)) * 0.4) for k in ("wq", "wk", "wv", "wo")}
    r = _proj(rng, (2, 5, 8))

    def run(t, slot):
        parts = dict(ws)
        if slot != "x":
            parts[slot] = t
        xx = t if slot == "x" else x
        return reduce_sum(mul(mhsa(xx, parts["wq"], parts["wk"], parts["wv"],
                                   parts["wo"], heads=2), r))

    out = [("x", grad_check(lambda t: run(t, "x"), x, tol=tol))]
    for slot in ("wq", "wk", "wv", "wo"):
        out.append((slot, grad_check(lambda t, s=slot: run(t, s), ws[slot], tol=tol)))
    return out


@_case("encoder_block")
def _encoder_block(rng, tol):
    dim, hidden = 8, 16
    x = Tensor(rng.normal(size=(2, 4, dim)))
    params = {
        "ln1.g": Tensor(rng.uniform(0.5, 1.5, size=dim)),
        "ln1.b": Tensor(rng.normal(size=dim) * 0.1),
        "wq": Tensor(rng.normal(size=(dim, dim)) * 0.4),
        "wk": Tensor(rng.normal(size=(dim, dim)) * 0.4),
        "wv": Tensor(rng.normal(size=(dim, dim)) * 0.4),
        "wo": Tensor(rng.normal(size=(dim, dim)) * 0.4),
        "ln2.g": Tensor(rng.uniform(0.5, 1.5, size=dim)),
        "ln2.b": Tensor(rng.normal(size=dim) * 0.1),
        "w1": Tensor(rng.normal(size=(dim, hidden)) * 0.4),
        "b1": Tensor(rng.normal(size=hidden) * 0.1),
        "w2": Tensor(rng.normal(size=(hidden, dim)) * 0.4),
        "b2": Tensor(rng.normal(size=dim) * 0.1),
    }
    r = _proj(rng, (2, 4, dim))

    def run(t, slot):
        p = dict(params)
        if slot != "x":
            p[slot] = t
        return reduce_sum(mul(encoder_block(t if slot == "x" else x, p, heads=2), r))

    out = [("x", grad_check(lambda t: run(t, "x"), x, tol=tol))]
    for slot in ("wq", "w1", "w2", "ln1.g", "b2"):
        out.append((slot, grad_check(lambda t, s=slot: run(t, s),
                                     params[slot], tol=tol)))
    return out


@_case("scopeformer")
def _scopeformer(rng, tol):
    ens = EnsembleConfig(backbones=(
        BackboneConfig(stages=(StageSpec(3, 2),), seed=0),
        BackboneConfig(stages=(StageSpec(3, 2),), seed=1)),
        reduce_channels=2)
    vit_cfg = ViTConfig(depth=1, latent_dim=8, heads=2, mlp_ratio=2.0,
                        num_labels=6)
    model = ScopeformerModel(vit_cfg, (4, 4), ensemble_cfg=ens, seed=7)
    x = Tensor(rng.normal(size=(1, 4, 4, 3)))
    labels = (rng.uniform(size=(1, 6)) < 0.5).astype(np.float64)
    weights = LabelWeights.default()

    def loss_from_input(t):
        return weighted_log_loss(sigmoid(model.forward(t)), labels, weights)

    def loss_with_swap(store, key):
        def f(t):
            saved = store[key]
            store[key] = t
            try:
                return weighted_log_loss(sigmoid(model.forward(x)), labels, weights)
            finally:
                store[key] = saved
        return f

    stem = model.ensemble.nets[0].params
    blk = model.encoder.params
    out = [("input", grad_check(loss_from_input, x, tol=tol)),
           ("backbone stem", grad_check(loss_with_swap(stem, "s0.b0.w"),
                                        stem["s0.b0.w"], tol=tol)),
           ("encoder wq", grad_check(loss_with_swap(blk, "blk0.wq"),
                                     blk["blk0.wq"], tol=tol))]

    def loss_with_proj(t):
        saved = model.proj
        model.proj = t
        try:
            return weighted_log_loss(sigmoid(model.forward(x)), labels, weights)
        finally:
            model.proj = saved

    out.append(("token projection", grad_check(loss_with_proj, model.proj, tol=tol)))
    return out


def gradcheck_names() -> List[str]:
    return sorted(_CASES)


def run_gradcheck(op: str = "all", tol: float = 1e-4,
                  seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    """Run one registry case (or all) and flatten the per-slot reports.

    Result rows are ("op: slot", report), ordered by op name.
    """
    if op == "all":
        names = gradcheck_names()
    elif op in _CASES:
        names = [op]
    else:
        raise KeyError(f"unknown gradcheck op {op!r}; "
                       f"choose from {', '.join(gradcheck_names())} or all")
    all_names = gradcheck_names()
    rows: List[Tuple[str, GradCheckReport]] = []
    for name in names:
        rng = np.random.default_rng([seed, 977, all_names.index(name)])
        for slot, report in _CASES[name](rng, tol):
            rows.append((f"{name}: {slot}", report))
    return rows
