"""Task losses, ground-truth downscaling and the deep-supervised total loss.

Predictions are tape tensors; targets are plain numpy rasters.  Every loss
returns a (1,1,1,1) scalar tensor whose backward pass is hand-derived and
certified by grad_check.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractViolation, DataError
from .model import ModelConfig, ModelOutputs, TaskSpec
from .tensor import Tensor

IGNORE_INDEX = 255
W_POS_DEFAULT = 0.95  # positive-class weight for the binary task loss


def _scalar(value: float, parents=(), vjp=None) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value), parents=parents, vjp=vjp)


def _lift_target(target, pred_shape, name) -> np.ndarray:
    t = np.asarray(target)
    if t.shape == pred_shape:
        return t
    if t.ndim == 3 and (t.shape[0], 1, t.shape[1], t.shape[2]) == pred_shape:
        return t[:, None]
    raise ContractViolation(f"{name}: target shape {t.shape} does not match prediction {pred_shape}")


def ce_loss(logits: Tensor, target, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean cross-entropy over non-ignored pixels of an integer label raster."""
    n, k, h, w = logits.shape
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise ContractViolation(f"ce_loss: target shape {t.shape} != {(n, h, w)}")
    if not np.issubdtype(t.dtype, np.integer):
        t = t.astype(np.int64)
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= k))
    if np.any(bad):
        raise DataError(f"ce_loss: target labels out of range [0, {k}) at {int(bad.sum())} pixels")
    count = int(valid.sum())
    if count == 0:
        return _scalar(0.0, parents=(logits,), vjp=lambda g: (np.zeros(logits.shape),))

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    tc = np.where(valid, t, 0)
    picked = np.take_along_axis(logp, tc[:, None], axis=1)[:, 0]
    loss = -(picked[valid]).sum() / count

    def vjp(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, tc[:, None], 1.0, axis=1)
        d = (soft - onehot) * valid[:, None] / count
        return (g.reshape(()) * d,)

    return _scalar(loss, parents=(logits,), vjp=vjp)


def l1_loss(pred: Tensor, target, valid_mask=None) -> Tensor:
    """Mean absolute error over valid pixels (all pixels when mask is None)."""
    t = _lift_target(target, pred.shape, "l1_loss")
    if valid_mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = _lift_target(valid_mask, pred.shape, "l1_loss mask").astype(bool)
    count = int(mask.sum())
    if count == 0:
        return _scalar(0.0, parents=(pred,), vjp=lambda g: (np.zeros(pred.shape),))
    diff = pred.data - t
    loss = np.abs(diff[mask]).sum() / count

    def vjp(g):
        return (g.reshape(()) * np.sign(diff) * mask / count,)

    return _scalar(loss, parents=(pred,), vjp=vjp)


def weighted_bce(logits: Tensor, target, w_pos: float = W_POS_DEFAULT) -> Tensor:
    """Positively weighted binary cross-entropy, stabilized in logit space.

    mean of -[w_pos*y*log(p) + (1-w_pos)*(1-y)*log(1-p)] with p = sigmoid(z),
    computed via softplus to stay finite for any logit magnitude.
    """
    if not (0.0 < w_pos < 1.0):
        raise ContractViolation(f"weighted_bce: w_pos must lie in (0,1), got {w_pos}")
    y = _lift_target(target, logits.shape, "weighted_bce").astype(np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("weighted_bce: target must be binary (0/1)")
    z = logits.data
    softplus_pos = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))  # log(1+e^z)
    softplus_neg = softplus_pos - z  # log(1+e^-z)
    per_elem = w_pos * y * softplus_neg + (1.0 - w_pos) * (1.0 - y) * softplus_pos
    count = y.size
    loss = per_elem.sum() / count

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        d = (w_pos * y * (sig - 1.0) + (1.0 - w_pos) * (1.0 - y) * sig) / count
        return (g.reshape(()) * d,)

    return _scalar(loss, parents=(logits,), vjp=vjp)


NORMALIZE_GUARD = 1e-8


def normal_loss(pred: Tensor, target) -> Tensor:
    """Mean L1 between the L2-normalized prediction and unit target vectors.

    Predictions with norm below the guard are compared unnormalized, keeping
    the loss finite at the zero vector.
    """
    n, c, h, w = pred.shape
    if c != 3:
        raise ContractViolation(f"normal_loss: prediction must have 3 channels, got {c}")
    t = _lift_target(target, pred.shape, "normal_loss")
    v = pred.data
    r = np.sqrt((v * v).sum(axis=1, keepdims=True))
    safe = r >= NORMALIZE_GUARD
    u = np.where(safe, v / np.where(safe, r, 1.0), v)
    diff = u - t
    count = v.size
    loss = np.abs(diff).sum() / count

    def vjp(g):
        du = np.sign(diff) / count
        vdot = (v * du).sum(axis=1, keepdims=True)
        dv_norm = du / np.where(safe, r, 1.0) - v * vdot / np.where(safe, r**3, 1.0)
        dv = np.where(safe, dv_norm, du)
        return (g.reshape(()) * dv,)

    return _scalar(loss, parents=(pred,), vjp=vjp)


# -- ground-truth downscaling ----------------------------------------------------


def downsample_nearest(raster: np.ndarray, factor: int) -> np.ndarray:
    """Top-left nearest-neighbor subsampling of the trailing two dims."""
    if factor == 1:
        return raster
    return raster[..., ::factor, ::factor]


def downsample_average(raster: np.ndarray, factor: int) -> np.ndarray:
    """Per-block area average over factor x factor blocks."""
    if factor == 1:
        return raster
    h, w = raster.shape[-2:]
    shaped = raster.reshape(*raster.shape[:-2], h // factor, factor, w // factor, factor)
    return shaped.mean(axis=(-3, -1))


def downsample_unit_vectors(raster: np.ndarray, factor: int) -> np.ndarray:
    """Area average of a (..., 3, H, W) vector field, renormalized to unit length."""
    avg = downsample_average(raster, factor)
    r = np.sqrt((avg * avg).sum(axis=-3, keepdims=True))
    return np.where(r >= NORMALIZE_GUARD, avg / np.where(r >= NORMALIZE_GUARD, r, 1.0), avg)


def downsample_target(kind: str, raster: np.ndarray, factor: int) -> np.ndarray:
    if kind in ("categorical", "binary"):
        return downsample_nearest(raster, factor)
    if kind == "regression":
        return downsample_average(raster, factor)
    if kind == "vector_field":
        return downsample_unit_vectors(raster, factor)
    raise ContractViolation(f"unknown task kind {kind!r}")


# -- total loss --------------------------------------------------------------------


def task_loss(task: TaskSpec, pred: Tensor, target: np.ndarray, w_pos: float = W_POS_DEFAULT) -> Tensor:
    if task.kind == "categorical":
        return ce_loss(pred, target)
    if task.kind == "regression":
        return l1_loss(pred, target)
    if task.kind == "binary":
        return weighted_bce(pred, target, w_pos=w_pos)
    return normal_loss(pred, target)


def total_loss(
    outputs: ModelOutputs,
    targets: dict[str, np.ndarray],
    cfg: ModelConfig,
    w_pos: float = W_POS_DEFAULT,
) -> tuple[Tensor, dict]:
    """Weighted sum of final-task losses and per-scale initial-prediction losses.

    Ground truth is downscaled per kind: nearest for categorical/binary,
    area average for regression, area average + renormalize for vector fields.
    Returns the scalar loss tensor and an unweighted per-term breakdown keyed
    by (task, "final") and (task, scale divisor).
    """
    for t in cfg.tasks:
        if t.name not in targets:
            raise ContractViolation(f"total_loss: missing target raster for task {t.name!r}")
    terms: list[Tensor] = []
    breakdown: dict = {}
    for t in cfg.target_tasks:
        loss = task_loss(t, outputs.final_predictions[t.name], targets[t.name], w_pos)
        breakdown[(t.name, "final")] = loss.item()
        terms.append(ops.scale(loss, t.loss_weight))
    for t in cfg.tasks:
        for d in cfg.coarse_to_fine:
            small = downsample_target(t.kind, targets[t.name], d)
            loss = task_loss(t, outputs.initial_predictions[(t.name, d)], small, w_pos)
            breakdown[(t.name, d)] = loss.item()
            terms.append(ops.scale(loss, t.loss_weight))
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total, breakdown
