"""SGD training loop, plateau learning-rate schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from res3d import ops
from res3d.blocks import ArchitectureSpec
from res3d.datapipe import AugmentConfig, FrameSource, eval_clip, eval_clips, training_batch
from res3d.errors import (
    CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
    ConfigurationError, DataError, NumericError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 0.1
    lr_divisor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 16
    max_epochs: int = 200
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-4
    lr_floor: float = 1e-5
    seed: int = 0
    decay_norm_and_bias: bool = True
    val_fraction: float = 0.0
    eval_batch_size: int = 8
    stop_at_floor: bool = True

    def __post_init__(self):
        if self.lr_initial < 0 or self.lr_divisor <= 1 or self.lr_floor < 0:
            raise ConfigurationError("need lr_initial >= 0, lr_divisor > 1, lr_floor >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and weight_decay be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.plateau_patience < 1:
            raise ConfigurationError("batch_size, max_epochs and plateau_patience must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")


@dataclass
class OptimizerState:
    """Momentum buffers plus plateau bookkeeping.

    The learning rate is kept as a count of reductions so that it only ever
    takes the values ``lr_initial / lr_divisor**k``.
    """

    velocity: dict = field(default_factory=dict)
    lr_initial: float = 0.1
    lr_divisor: float = 10.0
    reductions: int = 0
    epochs_since_improvement: int = 0
    best_val_loss: float = math.inf
    floor_reached: bool = False

    @classmethod
    def fresh(cls, params, cfg):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, cfg.lr_initial, cfg.lr_divisor)

    @property
    def current_lr(self):
        return self.lr_initial / self.lr_divisor ** self.reductions


def _no_decay(name):
    return name.endswith((".gamma", ".beta", ".bias"))


def sgd_step(params, grads, state, cfg):
    """Heavy-ball SGD with L2 weight decay, in place.

    g' = g + weight_decay * p;  v = momentum * v + g';  p = p - lr * v
    """
    lr = state.current_lr
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise NumericError(f"parameter {name!r} has no gradient")
        if g.shape != p.data.shape:
            raise ConfigurationError(f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        decay = cfg.weight_decay if (cfg.decay_norm_and_bias or not _no_decay(name)) else 0.0
        if decay:
            g = g + decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        v *= cfg.momentum
        v += g
        p.data -= lr * v


def plateau_update(state, val_loss, cfg):
    """Divide the learning rate after ``plateau_patience`` epochs without improvement."""
    if val_loss < state.best_val_loss - cfg.plateau_min_delta:
        state.best_val_loss = float(val_loss)
        state.epochs_since_improvement = 0
        return state.current_lr
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= cfg.plateau_patience:
        state.epochs_since_improvement = 0
        if state.lr_initial / state.lr_divisor ** (state.reductions + 1) >= cfg.lr_floor * (1 - 1e-12):
            state.reductions += 1
            log.info("validation loss plateaued; lr -> %g", state.current_lr)
        else:
            state.floor_reached = True
    return state.current_lr


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_seconds: float


METRIC_COLUMNS = [f.name for f in dataclasses.fields(EpochRecord)]


def split_train_val(manifest, cfg):
    """Training videos and validation videos (test split unless a fraction is carved out)."""
    train = manifest.split("train")
    if not train:
        raise DataError("manifest has no training videos")
    if cfg.val_fraction <= 0:
        return train, manifest.split("test")
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    order = rng.permutation(len(train))
    n_val = max(1, int(round(cfg.val_fraction * len(train))))
    val_idx = set(order[:n_val].tolist())
    return ([v for i, v in enumerate(train) if i not in val_idx],
            [v for i, v in enumerate(train) if i in val_idx])


def _batches(order, batch_size):
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch-norm needs two samples when the deepest stage is 1x1x1
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def epoch_order(n, seed, epoch):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, 0xFFFFFFFF]))).permutation(n)


def train_epoch(net, manifest, videos, cfg, aug, state, epoch, source=None):
    """One pass over ``videos`` (one random clip each). Returns (mean loss, clip accuracy)."""
    source = source or FrameSource(manifest)
    params = net.parameters()
    order = epoch_order(len(videos), cfg.seed, epoch)
    total_loss, correct, seen = 0.0, 0, 0
    for chunk in _batches(order, cfg.batch_size):
        entries = [videos[i] for i in chunk]
        batch = training_batch(manifest, source, entries, aug, cfg.seed, epoch, seen)
        logits = net.forward(batch.data, training=True)
        loss, grad = ops.softmax_cross_entropy(logits, batch.labels)
        if not math.isfinite(loss):
            net.clear_caches()
            ids = [p.video_id for p in batch.provenance]
            raise NumericError(f"non-finite loss in epoch {epoch + 1} on clips from {ids}")
        grads = net.backward(grad.astype(logits.dtype))
        sgd_step(params, grads, state, cfg)
        n = len(entries)
        total_loss += loss * n
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
        seen += n
    return total_loss / seen, correct / seen


def iter_eval_batches(manifest, videos, aug, source, batch_size):
    """Yield (clips, labels, video indices) over every evaluation window of ``videos``."""
    mean = manifest.channel_mean
    if mean is None:
        raise DataError("manifest has no channel_mean")
    pending = []
    for vi, v in enumerate(videos):
        for window in eval_clips(v, aug.clip_len):
            pending.append((eval_clip(v, window, source, aug, mean)[0], v.label, vi))
            if len(pending) == batch_size:
                yield _stack(pending)
                pending = []
    if pending:
        yield _stack(pending)


def _stack(items):
    return (np.stack([c for c, _, _ in items]), np.array([l for _, l, _ in items]),
            np.array([i for _, _, i in items]))


def validate(net, manifest, videos, aug, source=None, batch_size=8):
    """Mean clip loss and clip accuracy over every evaluation window, in inference mode."""
    if not videos:
        raise DataError("validation split is empty")
    source = source or FrameSource(manifest)
    total, correct, n = 0.0, 0, 0
    for clips, labels, _ in iter_eval_batches(manifest, videos, aug, source, batch_size):
        logits = net.forward(clips, training=False)
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        total += loss * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
        n += len(labels)
    return total / n, correct / n


def fit(net, manifest, cfg, aug, state=None, start_epoch=0, history=None, source=None,
        on_epoch=None):
    """Train from ``start_epoch`` up to ``cfg.max_epochs``.

    ``on_epoch(record, state)`` runs after each epoch's schedule update,
    which is where the CLI writes metrics and checkpoints.
    """
    source = source or FrameSource(manifest)
    state = state or OptimizerState.fresh(net.parameters(), cfg)
    history = list(history or [])
    train, val = split_train_val(manifest, cfg)
    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        lr = state.current_lr
        train_loss, train_acc = train_epoch(net, manifest, train, cfg, aug, state, epoch, source)
        if val:
            val_loss, val_acc = validate(net, manifest, val, aug, source, cfg.eval_batch_size)
        else:
            val_loss, val_acc = train_loss, float("nan")
        plateau_update(state, val_loss, cfg)
        record = EpochRecord(epoch + 1, lr, train_loss, train_acc, val_loss, val_acc,
                             time.perf_counter() - t0)
        history.append(record)
        log.info("epoch %d lr %g train %.4f/%.3f val %.4f/%.3f", record.epoch, lr,
                 train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(record, state)
        if cfg.stop_at_floor and state.floor_reached:
            log.info("plateau at the lr floor; stopping after epoch %d", record.epoch)
            break
    return history, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"R3DC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ32s")


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: dict
    buffers: dict
    optimizer: OptimizerState
    epoch: int
    seed: int
    history: list
    train_config: dict | None = None
    augment: dict | None = None

    def restore(self, net):
        """Copy parameters and running statistics into ``net``."""
        if net.spec is not None and net.spec != self.spec:
            raise ConfigurationError(
                f"checkpoint architecture {self.spec.name!r} does not match network {net.spec.name!r}"
            )
        params = net.parameters()
        if set(params) != set(self.params):
            raise ConfigurationError("checkpoint parameters do not match the network")
        for k, p in params.items():
            if p.data.shape != self.params[k].shape:
                raise ConfigurationError(f"shape mismatch for {k}")
            p.data = self.params[k].astype(p.data.dtype, copy=True)
        for k, v in self.buffers.items():
            net.set_buffer(k, v)
        return net


def _tensor_blob(entries, prefix, arrays, chunks, offset):
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": f"{prefix}/{name}", "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return offset


def save_checkpoint(path, net, state, epoch, seed, history=(), train_config=None, augment=None):
    """Write a versioned, checksummed checkpoint atomically."""
    entries, chunks = [], []
    offset = 0
    offset = _tensor_blob(entries, "param", {k: p.data for k, p in net.parameters().items()}, chunks, offset)
    offset = _tensor_blob(entries, "buffer", net.buffers(), chunks, offset)
    offset = _tensor_blob(entries, "velocity", state.velocity, chunks, offset)
    meta = {
        "spec": net.spec.to_dict() if net.spec is not None else None,
        "epoch": int(epoch),
        "rng": {"seed": int(seed), "bit_generator": "PCG64", "streams": "seed/epoch/clip"},
        "optimizer": {
            "lr_initial": state.lr_initial,
            "lr_divisor": state.lr_divisor,
            "reductions": state.reductions,
            "floor_reached": state.floor_reached,
            "epochs_since_improvement": state.epochs_since_improvement,
            "best_val_loss": state.best_val_loss,
        },
        "history": [dataclasses.asdict(r) for r in history],
        "train_config": dataclasses.asdict(train_config) if train_config is not None else None,
        "augment": dataclasses.asdict(augment) if augment is not None else None,
        "tensors": entries,
    }
    meta_bytes = json.dumps(meta).encode()
    payload = struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(chunks)
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(payload),
                               hashlib.sha256(payload).digest())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than checkpoint header")
    magic, version, length, digest = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    payload = raw[_CKPT_HEADER.size:]
    if len(payload) < length:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise CheckpointError(f"{path}: {len(payload) - length} trailing bytes after payload")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch, file is corrupt")

    (meta_len,) = struct.unpack_from("<Q", payload)
    meta = json.loads(payload[8:8 + meta_len])
    base = 8 + meta_len
    groups = {"param": {}, "buffer": {}, "velocity": {}}
    for t in meta["tensors"]:
        kind, name = t["name"].split("/", 1)
        start = base + t["offset"]
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=math.prod(t["shape"]),
                            offset=start).reshape(t["shape"])
        groups[kind][name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    opt = meta["optimizer"]
    state = OptimizerState(groups["velocity"], opt["lr_initial"], opt["lr_divisor"], opt["reductions"],
                           opt["epochs_since_improvement"], opt["best_val_loss"], opt["floor_reached"])
    spec = ArchitectureSpec.from_dict(meta["spec"]) if meta["spec"] is not None else None
    return Checkpoint(
        spec=spec,
        params=groups["param"],
        buffers=groups["buffer"],
        optimizer=state,
        epoch=meta["epoch"],
        seed=meta["rng"]["seed"],
        history=[EpochRecord(**r) for r in meta["history"]],
        train_config=meta["train_config"],
        augment=meta["augment"],
    )
