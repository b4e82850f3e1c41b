"""Loss, Adam optimization, the training loop, and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .model import ModelConfig, ModelParams, build_model, forward_scores
from .tensor import Tape, Tensor, backward, zero_grads

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    # fresh Gaussian noise of this scale is added to every feature token at
    # each presentation; 0 disables.  Makes per-video noise fingerprints
    # useless for fitting, which small planted-signal datasets need.
    feature_noise: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.feature_noise < 0:
            raise ConfigError("feature noise must be >= 0")

    def as_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "feature_noise": self.feature_noise,
        }


def multi_head_mse(pred: Tensor, target: np.ndarray):
    """Sum over heads of per-head MSE across the batch.

    Returns (scalar loss tensor, detached per-head MSE vector).  With N
    rows and K heads the loss is sum_k (1/N) sum_i (P_ik - T_ik)^2, which
    equals the plain sum of squared errors divided by N.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.ndim == 1:
        target = target.reshape(1, -1)
    if target.shape != pred.data.shape:
        raise ShapeError(
            f"prediction batch {pred.data.shape} vs target batch {target.shape}"
        )
    n = pred.data.shape[0]
    diff = ops.sub(pred, Tensor(target))
    loss = ops.scale(ops.sum_all(ops.mul(diff, diff)), 1.0 / n)
    sq = (pred.data - target).astype(np.float64) ** 2
    return loss, sq.mean(axis=0)


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        state = cls()
        for p in params:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        return state


def adam_step(state: AdamState, params, config: TrainConfig) -> None:
    """One classic Adam update with bias correction; weight decay is folded
    into the gradient as an L2 term before the moment updates."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lr, wd, eps = config.learning_rate, config.weight_decay, config.eps
    for p in params:
        g = p.grad.data
        if not math.isfinite(float(g.sum())) or not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
        if wd:
            g = g + wd * p.value.data
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class LossReport:
    """Per-epoch training loss; ``total`` is the sum of per-head values."""

    epoch: int
    per_head: np.ndarray
    total: float
    wall_time: float

    def as_dict(self, labels=None) -> dict:
        heads = {f"head{i + 1}" if labels is None else labels[i]: float(v)
                 for i, v in enumerate(self.per_head)}
        return {"epoch": self.epoch, "total": self.total,
                "per_head": heads, "wall_time": round(self.wall_time, 4)}


def _maybe_jitter(clips, noise_rng, scale: float):
    if noise_rng is None:
        return clips
    from .mru import ClipFeatures  # local import avoids a cycle at module load
    jittered = []
    for clip in clips:
        a = clip.audio.data + scale * noise_rng.standard_normal(clip.audio.data.shape)
        v = clip.video.data + scale * noise_rng.standard_normal(clip.video.data.shape)
        jittered.append(ClipFeatures.from_arrays(a, v))
    return jittered


def train_loop(
    params: ModelParams,
    dataset,
    config: TrainConfig,
    zero_bottlenecks: bool = False,
    on_epoch=None,
    max_steps: int | None = None,
) -> list:
    """Seeded-shuffle minibatch training; deterministic for a fixed
    (seed, dataset, config).  Gradients accumulate across each batch and
    one Adam step runs per batch.  Returns (per-epoch loss reports, state)."""
    if not dataset:
        raise DataError("training dataset is empty")
    plist = list(params.parameters())
    state = AdamState.for_params(plist)
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(config.seed + 0x5EED) \
        if config.feature_noise > 0 else None
    n = len(dataset)
    heads = params.config.heads
    reports = []
    steps = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        sq_sums = np.zeros(heads, dtype=np.float64)
        seen = 0
        for lo in range(0, n, config.batch_size):
            batch = [dataset[int(i)] for i in order[lo:lo + config.batch_size]]
            zero_grads(plist)
            with Tape() as tape:
                preds = [forward_scores(params,
                                        _maybe_jitter(s.clips, noise_rng,
                                                      config.feature_noise),
                                        zero_bottlenecks=zero_bottlenecks)
                         for s in batch]
                pred = ops.concat(preds, axis=0) if len(preds) > 1 else preds[0]
                targets = np.stack([s.targets for s in batch])
                loss, per_head = multi_head_mse(pred, targets)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}"
                )
            backward(tape, loss)
            adam_step(state, plist, config)
            sq_sums += per_head * len(batch)
            seen += len(batch)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        epoch_mse = sq_sums / seen
        report = LossReport(epoch=epoch, per_head=epoch_mse,
                            total=float(epoch_mse.sum()),
                            wall_time=time.perf_counter() - started)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
        if max_steps is not None and steps >= max_steps:
            break
    return reports, state


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise DataError(f"unsupported parameter dtype {arr.dtype}")


def save_checkpoint(path, params: ModelParams, adam_state: AdamState | None = None) -> None:
    """Versioned binary container of all named parameters (+ Adam moments);
    byte-exact across round trips."""
    plist = list(params.parameters())
    dtype = _dtype_code(plist[0].value.data)
    header = {
        "format": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": params.config.as_dict(),
        "dtype": dtype,
        "params": [{"name": p.name, "shape": list(p.value.data.shape)} for p in plist],
        "adam": None if adam_state is None else {"step": adam_state.step},
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    le = "<" + dtype
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in plist:
            fh.write(np.ascontiguousarray(p.value.data, dtype=le).tobytes())
        if adam_state is not None:
            for p in plist:
                fh.write(np.ascontiguousarray(adam_state.m[p.name], dtype=le).tobytes())
            for p in plist:
                fh.write(np.ascontiguousarray(adam_state.v[p.name], dtype=le).tobytes())


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (params, adam_state).

    Weights are cast to the active precision mode if it differs from the
    stored one.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    ofs = 10
    try:
        header = json.loads(raw[ofs:ofs + blob_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    ofs += blob_len
    dtype = np.dtype("<" + header["dtype"])
    config = ModelConfig.from_dict(header["model"])
    params = build_model(config, seed=0)
    plist = list(params.parameters())
    names = [e["name"] for e in header["params"]]
    if names != [p.name for p in plist]:
        raise DataError(f"{path}: checkpoint parameters do not match the model layout")

    def take(shape):
        nonlocal ofs
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if ofs + nbytes > len(raw):
            raise DataError(f"{path}: checkpoint truncated")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=ofs).reshape(shape)
        ofs += nbytes
        return arr

    for p, entry in zip(plist, header["params"]):
        arr = take(tuple(entry["shape"]))
        p.value.data[...] = arr.astype(p.value.data.dtype)
    adam_state = None
    if header["adam"] is not None:
        adam_state = AdamState(step=int(header["adam"]["step"]))
        for p in plist:
            adam_state.m[p.name] = take(p.value.data.shape).astype(p.value.data.dtype).copy()
        for p in plist:
            adam_state.v[p.name] = take(p.value.data.shape).astype(p.value.data.dtype).copy()
    if ofs != len(raw):
        raise DataError(f"{path}: {len(raw) - ofs} trailing bytes after payload")
    return params, adam_state
