"""Denoising score matching training and checkpoint files.

Checkpoint layout (``TPDMCKPT1``)::

    9-byte magic  b"TPDMCKPT1"
    uint32 LE     header length
    JSON header   {"architecture": {...}, "schedule": {...}, "training": {...},
                   "param_shapes": [...], "optimizer_state": bool}
    payload       parameters as LE float32, concatenated in model order
                  (w0, b0, w1, b1, ...); if optimizer_state is true the
                  first and second Adam moments follow in the same order.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .sde import TRAIN_T_MIN, NoiseSchedule
from .score import NeuralScore

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TPDMCKPT1"


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 1000
    lr: float = 2e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or not self.lr > 0 or self.seed < 0:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class TrainState:
    """Optimizer bookkeeping carried across ``train`` calls."""

    iteration: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    losses: list[float] = field(default_factory=list)


def _check_dataset(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        data = dataset
    else:
        items = [np.asarray(s) for s in dataset]
        if not items:
            raise ValueError("empty dataset")
        if any(s.shape != items[0].shape for s in items):
            raise ValueError("dataset slices do not share one shape")
        data = np.stack(items)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError(f"dataset must be a non-empty stack of 2D slices, got shape {data.shape}")
    return data


def train(model: NeuralScore, dataset, cfg: TrainConfig, state: TrainState | None = None):
    """Run ``cfg.iterations`` Adam steps on the DSM loss.

    Returns ``(model, state)``; the input model and state are not modified.  Batch
    draws for global iteration ``k`` come from the counter-based stream
    ``(cfg.seed, TRAIN, k)``, so resuming from a saved state continues the
    exact same trajectory.
    """
    data = _check_dataset(dataset)
    state = copy.deepcopy(state) if state is not None else TrainState()
    params = [p.copy() for p in model.params]
    model = NeuralScore(model.layers, model.channels, model.schedule, dtype=model.dtype, params=params)
    params = model.params
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    n, h, w = data.shape
    B = cfg.batch_size
    for _ in range(cfg.iterations):
        k = state.iteration
        g = rng.generator(cfg.seed, rng.TAG_TRAIN, k)
        idx = g.integers(0, n, size=B)
        t = g.uniform(TRAIN_T_MIN, 1.0, size=B)
        z = g.standard_normal((B, h, w))
        x0 = data[idx].astype(model.dtype)
        loss, grads = model.loss_and_grad(x0, t, z.astype(model.dtype))
        state.iteration += 1
        step = state.iteration
        bc1 = 1.0 - cfg.beta1**step
        bc2 = 1.0 - cfg.beta2**step
        for p, gr, m, v in zip(params, grads, state.m, state.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * gr
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * gr * gr
            p -= (cfg.lr / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)
        state.losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            recent = state.losses[-cfg.log_every :]
            log.info("iter %d loss %.5f", step, float(np.mean(recent)))
    return model, state


def smoothed(losses, window: int = 100) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    window = max(1, min(window, len(losses)))
    return np.convolve(losses, np.ones(window) / window, mode="valid")


def save_checkpoint(path, model: NeuralScore, state: TrainState | None = None, meta: dict | None = None) -> None:
    with_opt = state is not None and state.m is not None
    header = {
        "architecture": {"type": "conv", **model.config()},
        "schedule": model.schedule.to_dict(),
        "training": {"iteration": state.iteration if state else 0, **(meta or {})},
        "param_shapes": [list(s) for s in model.param_shapes()],
        "optimizer_state": with_opt,
    }
    blobs = list(model.params)
    if with_opt:
        blobs += list(state.m) + list(state.v)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[NeuralScore, TrainState, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a TPDMCKPT1 checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off : off + 4])
    header = json.loads(raw[off + 4 : off + 4 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[off + 4 + hlen :], dtype="<f4")
    shapes = [tuple(s) for s in header["param_shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    n_blobs = 3 if header["optimizer_state"] else 1
    if payload.size != n_blobs * sum(sizes):
        raise ValueError(f"{path}: payload size does not match header")
    arrays, pos = [], 0
    for _ in range(n_blobs):
        for s, n in zip(shapes, sizes):
            arrays.append(payload[pos : pos + n].reshape(s).astype(np.float64))
            pos += n
    k = len(shapes)
    arch = header["architecture"]
    model = NeuralScore(arch["layers"], arch["channels"], NoiseSchedule(**header["schedule"]), dtype=dtype, params=arrays[:k])
    state = TrainState(iteration=header["training"]["iteration"])
    if header["optimizer_state"]:
        state.m = [a.astype(model.dtype) for a in arrays[k : 2 * k]]
        state.v = [a.astype(model.dtype) for a in arrays[2 * k :]]
    return model, state, header


def write_loss_csv(path, losses, start: int = 1) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(losses, start=start):
            w.writerow([i, repr(float(loss))])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
