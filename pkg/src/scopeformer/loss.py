"""Multi-label weighted mean log loss and the evaluation metrics built on it.

Labels are 6 binary columns: index 0 is "any bleed" (the OR of the rest),
indices 1..5 are the hemorrhage subtypes. The default weight vector puts
double mass on "any" and normalizes to sum 1, mirroring the usual
competition metric for this task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .tensor import ShapeError, Tensor, _result

ArrayLike = Union[Tensor, np.ndarray, Sequence]


class LabelWeights:
    """Non-negative per-label weights, normalized to sum 1 at construction."""

    def __init__(self, values: Sequence[float]):
        w = np.asarray(values, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError(f"weights must be a 1-D sequence, got shape {w.shape}")
        if (w < 0).any():
            raise ValueError(f"weights must be non-negative, got {w.tolist()}")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights must not all be zero")
        self.w = w / total

    @classmethod
    def default(cls, num_labels: int = 6) -> "LabelWeights":
        """Double weight on label 0 ("any"), uniform on the subtypes."""
        raw = np.ones(num_labels)
        raw[0] = 2.0
        return cls(raw)

    def __len__(self) -> int:
        return self.w.size

    def __repr__(self) -> str:
        return f"LabelWeights({self.w.tolist()})"


def _as_label_array(labels: ArrayLike) -> np.ndarray:
    arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if not np.isin(arr, (0.0, 1.0)).all():
        bad = arr[~np.isin(arr, (0.0, 1.0))]
        raise ValueError(f"labels must be 0 or 1, found {bad.reshape(-1)[:4].tolist()}")
    return arr


def _as_prob_array(probs: ArrayLike) -> np.ndarray:
    return probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)


def weighted_log_loss(probs: Tensor, labels: ArrayLike, weights: LabelWeights,
                      eps: float = 1e-7) -> Tensor:
    """Mean over the batch of the weighted per-label binary cross entropy.

    probs is B x L in [0, 1] (clipped to [eps, 1-eps] before the log) and
    the result is a differentiable scalar tensor: gradients flow to probs.
    """
    if not isinstance(probs, Tensor):
        probs = Tensor(probs)
    y = _as_label_array(labels)
    if probs.ndim != 2:
        raise ShapeError(f"weighted_log_loss: probs must be B x L, got {probs.shape}")
    if y.shape != probs.shape:
        raise ShapeError(f"weighted_log_loss: labels shape {y.shape} != probs {probs.shape}")
    B, L = probs.shape
    if L != len(weights):
        raise ShapeError(f"weighted_log_loss: {L} label columns but {len(weights)} weights")

    w = weights.w
    p = probs.data
    pc = np.clip(p, eps, 1.0 - eps)
    per_elem = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    value = np.array([(per_elem * w).sum(axis=1).mean()])

    interior = (p > eps) & (p < 1.0 - eps)

    def back(g):
        dpc = (w / B) * ((1.0 - y) / (1.0 - pc) - y / pc)
        return (g[0] * dpc * interior,)

    return _result(value, (probs,), "weighted_log_loss", back)


def binary_accuracy(probs: ArrayLike, labels: ArrayLike, threshold: float = 0.5,
                    mode: str = "per_label_mean") -> float:
    """Thresholded multi-label accuracy.

    Modes (the right definition for reported "validation accuracy" is a
    judgment call, so all three are available):
      per_label_mean  mean over all B*L cells of [(p >= thr) == y]
      exact_match     fraction of samples with every label correct
      any_label       accuracy of the "any" column (index 0) alone
    """
    p = _as_prob_array(probs)
    y = _as_label_array(labels)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"binary_accuracy: need matching B x L arrays, got {p.shape} and {y.shape}")
    correct = (p >= threshold) == (y == 1.0)
    if mode == "per_label_mean":
        return float(correct.mean())
    if mode == "exact_match":
        return float(correct.all(axis=1).mean())
    if mode == "any_label":
        return float(correct[:, 0].mean())
    raise ValueError(f"unknown accuracy mode {mode!r}")


@dataclass
class MetricsReport:
    loss: float
    accuracy: float
    per_label_accuracy: np.ndarray
    positives: np.ndarray

    def text_block(self) -> str:
        lines = [f"loss {self.loss:.6f}", f"accuracy {self.accuracy:.6f}"]
        for i, (acc, pos) in enumerate(zip(self.per_label_accuracy, self.positives)):
            lines.append(f"acc_l{i} {acc:.6f}")
            lines.append(f"positives_l{i} {int(pos)}")
        return "\n".join(lines)

    def csv_row(self, step: int) -> str:
        cells = [str(step), f"{self.loss:.10g}", f"{self.accuracy:.10g}"]
        cells += [f"{a:.10g}" for a in self.per_label_accuracy]
        return ",".join(cells)


def metrics_csv_header(num_labels: int = 6) -> str:
    return "step,loss,accuracy," + ",".join(f"acc_l{i}" for i in range(num_labels))


def metrics_report(probs: ArrayLike, labels: ArrayLike, weights: LabelWeights,
                   eps: float = 1e-7, threshold: float = 0.5) -> MetricsReport:
    """Loss plus overall and per-label accuracy breakdowns."""
    p = _as_prob_array(probs)
    y = _as_label_array(labels)
    loss = weighted_log_loss(Tensor(p), y, weights, eps=eps).item()
    acc = binary_accuracy(p, y, threshold=threshold)
    correct = (p >= threshold) == (y == 1.0)
    return MetricsReport(
        loss=loss,
        accuracy=acc,
        per_label_accuracy=correct.mean(axis=0),
        positives=y.sum(axis=0).astype(np.int64),
    )
