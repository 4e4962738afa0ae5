"""Deterministic training loop: adaptive moment optimizer with poly lr decay.

Given one seed, batch order, parameter init and every update are reproducible
bit for bit in single-threaded mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError
from .losses import W_POS_DEFAULT, total_loss
from .model import Model, ModelConfig
from .tensor import ParamStore, Tensor


@dataclass
class OptimConfig:
    total_steps: int = 200
    base_lr: float = 1e-4
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractViolation(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_steps < 1:
            raise ContractViolation(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.log_every < 1 or self.poly_power <= 0 or self.eps <= 0:
            raise ContractViolation("invalid optimizer configuration")


def poly_lr(step: int, cfg: OptimConfig) -> float:
    """base_lr * (1 - step/total_steps) ** poly_power for 0 <= step <= total_steps."""
    if not (0 <= step <= cfg.total_steps):
        raise ContractViolation(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.base_lr * (1.0 - step / cfg.total_steps) ** cfg.poly_power


class Adam:
    """Adaptive moment estimation with bias correction; lr supplied per step."""

    def __init__(self, store: ParamStore, cfg: OptimConfig):
        self.store = store
        self.cfg = cfg
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.store:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)


def stack_batch(samples: Sequence, indices: np.ndarray):
    """Assemble images and per-task target rasters for the given sample indices."""
    chosen = [samples[i] for i in indices]
    images = Tensor(np.stack([s.image for s in chosen]).astype(np.float64))
    targets = {
        "seg": np.stack([s.seg for s in chosen]).astype(np.int64),
        "depth": np.stack([s.depth for s in chosen]).astype(np.float64)[:, None],
        "edge": np.stack([s.edge for s in chosen]).astype(np.float64),
        "normals": np.stack([s.normals for s in chosen]).astype(np.float64),
    }
    return images, targets


def log_header(cfg: ModelConfig) -> list[str]:
    cols = ["step", "lr", "total_loss"]
    for t in cfg.target_tasks:
        cols.append(f"{t.name}_final")
    for t in cfg.tasks:
        for d in sorted(cfg.scales):
            cols.append(f"{t.name}_s{d}")
    return cols


def train(
    samples: Sequence,
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    w_pos: float = W_POS_DEFAULT,
    log_cb: Callable[[dict], None] | None = None,
) -> tuple[Model, list[dict]]:
    """Run the full optimization; returns the trained model and the log rows.

    Rows are emitted at step 0, every ``log_every`` steps and at the final
    step; ``log_cb`` (when given) sees each row as soon as it exists, so
    callers can flush logs before a potential numeric abort.
    """
    if not samples:
        raise ContractViolation("train: dataset is empty")
    model = Model(model_cfg, seed=optim_cfg.seed)
    adam = Adam(model.store, optim_cfg)
    order_rng = np.random.Generator(
        np.random.Philox(key=np.array([optim_cfg.seed, 0xB_A7C4], dtype=np.uint64))
    )
    rows: list[dict] = []
    perm: list[int] = []

    def next_indices(size):
        nonlocal perm
        while len(perm) < size:
            perm.extend(order_rng.permutation(len(samples)).tolist())
        out, perm = perm[:size], perm[size:]
        return np.asarray(out)

    for step in range(optim_cfg.total_steps):
        lr = poly_lr(step, optim_cfg)
        images, targets = stack_batch(samples, next_indices(optim_cfg.batch_size))
        targets = {t.name: targets[t.name] for t in model_cfg.tasks}
        model.store.zero_grad()
        outputs = model.forward(images)
        loss, breakdown = total_loss(outputs, targets, model_cfg, w_pos=w_pos)
        value = loss.item()
        if step % optim_cfg.log_every == 0 or step == optim_cfg.total_steps - 1:
            row = {"step": step, "lr": lr, "total_loss": value}
            for t in model_cfg.target_tasks:
                row[f"{t.name}_final"] = breakdown[(t.name, "final")]
            for t in model_cfg.tasks:
                for d in sorted(model_cfg.scales):
                    row[f"{t.name}_s{d}"] = breakdown[(t.name, d)]
            rows.append(row)
            if log_cb is not None:
                log_cb(row)
        if not np.isfinite(value):
            raise NumericError(f"train: non-finite total loss {value} at step {step}")
        loss.backward()
        adam.step(lr)
    return model, rows
