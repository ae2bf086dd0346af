"""Optimization loop, evaluation, and binary checkpointing.

Training is deterministic for a fixed (seed, config, corpus) at thread
count 1: the batch permutation depends only on (seed, epoch), the dropout
stream only on (seed, step), so a run resumed from a checkpoint replays
the uninterrupted run's losses bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .data import epoch_order, load_batch
from .loss import LabelWeights, MetricsReport, metrics_report, weighted_log_loss
from .model import ScopeformerModel
from .tensor import ShapeError, Tensor, backward, no_grad, sigmoid

# -- optimizers ----------------------------------------------------------------

OPTIM_KINDS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9          # sgd_momentum only
    beta1: float = 0.9             # adam only
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0         # 0 disables gradient clipping

    def __post_init__(self):
        if self.kind not in OPTIM_KINDS:
            raise ValueError(f"optimizer kind must be one of {OPTIM_KINDS}, got {self.kind!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")


class OptimState:
    """Per-parameter moment buffers plus the step counter."""

    def __init__(self, cfg: OptimConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = ({k: np.zeros_like(t.data) for k, t in params.items()}
                  if cfg.kind == "adam" else {})


def optim_step(state: OptimState, params: Dict[str, Tensor],
               grads: Dict[str, np.ndarray]) -> None:
    cfg = state.cfg
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
        if cfg.kind == "adam":
            m, v = state.m[name], state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            buf = state.m[name]
            buf *= cfg.momentum
            buf += g
            p.data -= cfg.lr * buf


def global_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.square(g).sum())
    return math.sqrt(total)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm; returns
    the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm and np.isfinite(norm):
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# -- checkpoint format ---------------------------------------------------------

CKPT_MAGIC = b"SCPF"
CKPT_VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8"}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointCorruptionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_digest: int
    arrays: Dict[str, np.ndarray]
    version: int = CKPT_VERSION


def _payload_checksum(chunks: List[bytes]) -> int:
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return int.from_bytes(h.digest(), "little")


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    out = [CKPT_MAGIC,
           struct.pack("<I", ckpt.version),
           struct.pack("<Q", ckpt.config_digest & 0xFFFFFFFFFFFFFFFF),
           struct.pack("<I", len(ckpt.arrays))]
    payloads: List[bytes] = []
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        if arr.dtype == np.float32:
            code, dt = 0, "<f4"
        else:
            code, dt = 1, "<f8"
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.astype(dt).tobytes()
        out.append(payload)
        payloads.append(payload)
    out.append(struct.pack("<Q", _payload_checksum(payloads)))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[int] = None,
                    force: bool = False) -> Checkpoint:
    blob = Path(path).read_bytes()

    def need(off: int, count: int, what: str) -> int:
        if off + count > len(blob):
            raise CheckpointCorruptionError(
                f"{path}: {what} needs bytes [{off}, {off + count}) but file "
                f"ends at {len(blob)}")
        return off + count

    need(0, 20, "header")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is newer than supported {CKPT_VERSION}")
    (digest,) = struct.unpack_from("<Q", blob, 8)
    (count,) = struct.unpack_from("<I", blob, 16)

    off = 20
    arrays: Dict[str, np.ndarray] = {}
    payloads: List[bytes] = []
    for _ in range(count):
        end = need(off, 2, "array name length")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off = end
        off_end = need(off, name_len + 2, "array header")
        name = blob[off:off + name_len].decode("utf-8")
        code, ndim = struct.unpack_from("<BB", blob, off + name_len)
        off = off_end
        if code not in _DTYPE_CODES:
            raise CheckpointCorruptionError(f"{path}: unknown dtype code {code} for {name!r}")
        off_dims = need(off, 8 * ndim, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{ndim}Q", blob, off)
        off = off_dims
        n_bytes = int(np.prod(dims, dtype=np.int64)) * (4 if code == 0 else 8)
        off_payload = need(off, n_bytes, f"payload of {name!r}")
        payload = blob[off:off_payload]
        payloads.append(payload)
        arrays[name] = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(dims).copy()
        off = off_payload

    end = need(off, 8, "trailing checksum")
    (stored,) = struct.unpack_from("<Q", blob, off)
    if end != len(blob):
        raise CheckpointCorruptionError(
            f"{path}: {len(blob) - end} unexpected trailing bytes")
    actual = _payload_checksum(payloads)
    if stored != actual:
        raise CheckpointCorruptionError(
            f"{path}: payload checksum mismatch (stored {stored:#x}, computed {actual:#x})")

    if expected_digest is not None and digest != expected_digest and not force:
        raise CheckpointDigestError(
            f"{path}: config digest {digest:#x} does not match expected "
            f"{expected_digest:#x}; pass force to load anyway")
    return Checkpoint(config_digest=digest, arrays=arrays, version=version)


# -- training state <-> checkpoint ----------------------------------------------

def training_state_arrays(model: ScopeformerModel, opt: OptimState,
                          step_count: int, seed: int) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for name, t in model.parameters().items():
        arrays[f"param.{name}"] = t.data
    for name, buf in opt.m.items():
        arrays[f"opt.m.{name}"] = buf
    for name, buf in opt.v.items():
        arrays[f"opt.v.{name}"] = buf
    arrays["meta.step_count"] = np.array([float(step_count)])
    arrays["meta.opt_step_count"] = np.array([float(opt.step_count)])
    arrays["meta.seed"] = np.array([float(seed)])
    return arrays


def restore_training_state(model: ScopeformerModel, opt: OptimState,
                           ckpt: Checkpoint) -> int:
    """Load parameters and optimizer buffers in place; returns the step count
    to resume from."""
    params = model.parameters()
    for name, t in params.items():
        key = f"param.{name}"
        if key not in ckpt.arrays:
            raise CheckpointError(f"checkpoint is missing array {key!r}")
        arr = ckpt.arrays[key]
        if arr.shape != t.data.shape:
            raise ShapeError(
                f"checkpoint array {key!r} has shape {arr.shape}, model needs "
                f"{t.data.shape}")
        t.data[...] = arr
    for buf_map, prefix in ((opt.m, "opt.m."), (opt.v, "opt.v.")):
        for name, buf in buf_map.items():
            key = prefix + name
            if key not in ckpt.arrays:
                raise CheckpointError(f"checkpoint is missing array {key!r}")
            buf[...] = ckpt.arrays[key]
    opt.step_count = int(ckpt.arrays["meta.opt_step_count"][0])
    return int(ckpt.arrays["meta.step_count"][0])


def load_model_params(model: ScopeformerModel, ckpt: Checkpoint) -> int:
    """Copy the param.* arrays into the model (no optimizer state needed).

    Returns the number of parameters restored. For inference and evaluation;
    resuming training goes through restore_training_state.
    """
    count = 0
    for name, t in model.parameters().items():
        key = f"param.{name}"
        if key not in ckpt.arrays:
            raise CheckpointError(f"checkpoint is missing array {key!r}")
        arr = ckpt.arrays[key]
        if arr.shape != t.data.shape:
            raise ShapeError(
                f"checkpoint array {key!r} has shape {arr.shape}, model needs "
                f"{t.data.shape}")
        t.data[...] = arr
        count += 1
    return count


# -- training loop -------------------------------------------------------------

class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0            # 0 disables periodic evaluation
    ckpt_every: int = 0            # 0 keeps only the final checkpoint
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    threads: Optional[int] = None  # backbone fan-out threads

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0 or self.ckpt_every < 0:
            raise ValueError("eval_every and ckpt_every must be >= 0")


@dataclass
class History:
    records: List[dict]

    @property
    def train_losses(self) -> List[float]:
        return [r["train_loss"] for r in self.records]

    def csv(self) -> str:
        has_val = any("val_loss" in r for r in self.records)
        header = "step,train_loss" + (",val_loss,val_acc" if has_val else "")
        lines = [header]
        for r in self.records:
            row = f"{r['step']},{r['train_loss']:.12g}"
            if has_val:
                if "val_loss" in r:
                    row += f",{r['val_loss']:.12g},{r['val_acc']:.12g}"
                else:
                    row += ",,"
            lines.append(row)
        return "\n".join(lines) + "\n"


def evaluate(model: ScopeformerModel, records: Sequence[dict],
             weights: LabelWeights, batch_size: int = 16,
             root: Optional[Union[str, Path]] = None,
             threads: Optional[int] = None,
             loss_eps: float = 1e-7) -> MetricsReport:
    """Metrics over a dataset in manifest order, gradients off."""
    probs, labels = [], []
    with no_grad():
        for lo in range(0, len(records), batch_size):
            batch = load_batch(records, range(lo, min(lo + batch_size, len(records))),
                               root)
            out = model.probabilities(Tensor(batch.images), threads=threads)
            probs.append(out.numpy())
            labels.append(batch.labels)
    return metrics_report(np.concatenate(probs), np.concatenate(labels), weights,
                          eps=loss_eps)


def _dropout_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, step])


def train(model: ScopeformerModel, records: Sequence[dict], cfg: TrainConfig,
          weights: LabelWeights,
          root: Optional[Union[str, Path]] = None,
          val_records: Optional[Sequence[dict]] = None,
          out_dir: Optional[Union[str, Path]] = None,
          config_digest: int = 0,
          resume_from: Optional[Union[str, Path]] = None,
          loss_eps: float = 1e-7) -> History:
    """Run the optimization loop; returns per-step history.

    With out_dir set, writes history.csv, periodic checkpoints (ckpt_every),
    and checkpoint_final.scpf. resume_from restores parameters, optimizer
    buffers, and the step counter, then continues to cfg.steps.
    """
    records = list(records)
    if not records:
        raise ValueError("training needs at least one sample")
    n = len(records)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    params = model.trainable_parameters()
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = OptimState(cfg.optimizer, params)

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_digest=config_digest)
        start_step = restore_training_state(model, opt, ckpt)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: List[dict] = []
    order_epoch, order = -1, None
    for step in range(start_step, cfg.steps):
        epoch, bidx = divmod(step, batches_per_epoch)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(n, cfg.seed, epoch), epoch
        batch = load_batch(records, order[bidx * cfg.batch_size:
                                          (bidx + 1) * cfg.batch_size], root)

        for t in params.values():
            t.zero_grad()
        logits = model.forward(Tensor(batch.images), training=True,
                               rng=_dropout_rng(cfg.seed, step),
                               threads=cfg.threads)
        loss = weighted_log_loss(sigmoid(logits), batch.labels, weights,
                                 eps=loss_eps)
        backward(loss)

        grads = {k: t.grad for k, t in params.items()}
        loss_val = loss.item()
        pre_clip_norm = clip_gradients(grads, cfg.optimizer.clip_norm)
        if not np.isfinite(loss_val) or not np.isfinite(pre_clip_norm):
            raise TrainingDivergedError(
                f"non-finite training state at step {step}: loss {loss_val}, "
                f"lr {cfg.optimizer.lr}, gradient norm {pre_clip_norm}")
        optim_step(opt, params, grads)

        rec = {"step": step, "train_loss": loss_val, "grad_norm": pre_clip_norm}
        if (val_records is not None and cfg.eval_every
                and (step + 1) % cfg.eval_every == 0):
            rep = evaluate(model, val_records, weights,
                           batch_size=cfg.batch_size, root=root,
                           threads=cfg.threads, loss_eps=loss_eps)
            rec["val_loss"] = rep.loss
            rec["val_acc"] = rep.accuracy
        history.append(rec)

        if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save_checkpoint(out / f"checkpoint_{step + 1:06d}.scpf", Checkpoint(
                config_digest=config_digest,
                arrays=training_state_arrays(model, opt, step + 1, cfg.seed)))

    hist = History(records=history)
    if out is not None:
        save_checkpoint(out / "checkpoint_final.scpf", Checkpoint(
            config_digest=config_digest,
            arrays=training_state_arrays(model, opt, cfg.steps, cfg.seed)))
        (out / "history.csv").write_text(hist.csv())
    return hist
