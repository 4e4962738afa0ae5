"""Multi-scale multi-task network assembly.

The model runs four stages:

1. a pyramid backbone producing shared features at every configured scale,
2. per-scale task heads (optionally fed by the feature propagation module,
   which harmonizes, gates and upsamples the coarser scale's task features),
3. per-scale cross-task distillation: every task's features are refined by a
   residual sum of spatially-attended transforms of all other tasks' features,
4. aggregation of the distilled features from all scales into one final
   full-resolution prediction per target task.

Scales are named by their downsampling divisor: 4 is the finest (1/4 of input
resolution), 32 the coarsest.  Configurations are ordered coarse to fine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import ops
from .blocks import NORM_GROUPS, AttentionTransform, ConvUnit, NormUnit, ResidualBlock, SEGate, TaskHead
from .errors import ContractViolation, DataError
from .tensor import ParamStore, Tensor, read_tensor, write_tensor

SCALE_DIVISORS = (4, 8, 16, 32)
DEFAULT_CHANNELS = {4: 16, 8: 24, 16: 32, 32: 48}
SE_REDUCTION = 4

TASK_KINDS = ("categorical", "regression", "binary", "vector_field")
_KIND_CHANNELS = {"regression": 1, "binary": 1, "vector_field": 3}

CHECKPOINT_MAGIC = b"MTIC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    """One prediction task: output kind, channel count, metric direction, role."""

    name: str
    kind: str
    channels: int
    lower_better: bool  # metric direction flag: True when a lower value is better
    loss_weight: float = 1.0
    role: str = "target"  # "target" or "auxiliary"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractViolation(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if self.channels < 2:
                raise ContractViolation(f"task {self.name!r}: categorical needs >= 2 classes")
        elif self.channels != _KIND_CHANNELS[self.kind]:
            raise ContractViolation(
                f"task {self.name!r}: kind {self.kind} requires "
                f"{_KIND_CHANNELS[self.kind]} channels, got {self.channels}"
            )
        if self.role not in ("target", "auxiliary"):
            raise ContractViolation(f"task {self.name!r}: bad role {self.role!r}")
        if self.loss_weight < 0:
            raise ContractViolation(f"task {self.name!r}: loss_weight must be >= 0")

    @property
    def direction(self) -> int:
        """Eq.-style direction flag: 1 if lower is better, else 0."""
        return 1 if self.lower_better else 0


@dataclass
class ModelConfig:
    """Architecture configuration; also indexes the scale-ablation grid."""

    tasks: list[TaskSpec]
    scales: tuple[int, ...] = SCALE_DIVISORS
    channels: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    fpm_enabled: bool = True
    distill_enabled: bool = True
    input_channels: int = 3

    def __post_init__(self):
        divisors = tuple(sorted(set(int(s) for s in self.scales)))
        expected = tuple(4 * 2**i for i in range(len(divisors)))
        if not divisors or divisors != expected:
            raise ContractViolation(
                f"scales must be dyadic-contiguous from 1/4 (subsets like (4, 8, 16)); got {self.scales}"
            )
        self.scales = divisors
        for d in divisors:
            c = self.channels.get(d)
            if c is None:
                raise ContractViolation(f"no channel width configured for scale 1/{d}")
            if c < 8 or c % NORM_GROUPS != 0 or c % SE_REDUCTION != 0:
                raise ContractViolation(
                    f"channel width {c} at scale 1/{d} must be >= 8 and divisible by "
                    f"{NORM_GROUPS} (norm groups) and {SE_REDUCTION} (SE reduction)"
                )
        if not self.tasks:
            raise ContractViolation("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ContractViolation(f"duplicate task names in {names}")
        if not any(t.role == "target" for t in self.tasks):
            raise ContractViolation("at least one task must have role 'target'")
        if self.input_channels < 1:
            raise ContractViolation("input_channels must be >= 1")

    @property
    def coarse_to_fine(self) -> tuple[int, ...]:
        return tuple(sorted(self.scales, reverse=True))

    @property
    def finest(self) -> int:
        return min(self.scales)

    @property
    def coarsest(self) -> int:
        return max(self.scales)

    @property
    def target_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.role == "target"]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ContractViolation(f"unknown task {name!r}")

    def head_in_channels(self, divisor: int) -> int:
        """Head input width at a scale: backbone width, plus the coarser
        scale's width when the propagation module feeds this scale."""
        c = self.channels[divisor]
        if self.fpm_enabled and divisor != self.coarsest:
            c += self.channels[divisor * 2]
        return c


@dataclass
class ModelOutputs:
    """Everything a forward pass produces, keyed by task name and scale divisor."""

    initial_predictions: dict[tuple[str, int], Tensor]
    final_predictions: dict[str, Tensor]
    distilled_features: dict[tuple[str, int], Tensor]
    task_features: dict[tuple[str, int], Tensor]


class Backbone:
    """Stride-4 stem followed by stride-2 residual stages, one per extra scale."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c0 = cfg.channels[cfg.finest]
        self.stem_conv1 = ConvUnit(store, "backbone.stem.conv1", cfg.input_channels, c0,
                                   stride=2, bias=False)
        self.stem_norm = NormUnit(store, "backbone.stem.norm", c0)
        self.stem_conv2 = ConvUnit(store, "backbone.stem.conv2", c0, c0, stride=2, bias=False)
        self.stem_block = ResidualBlock(store, "backbone.stem.block", c0, c0)
        self.stages = {}
        prev = c0
        for d in [d for d in sorted(cfg.scales) if d != cfg.finest]:
            c = cfg.channels[d]
            self.stages[d] = (
                ConvUnit(store, f"backbone.s{d}.down", prev, c, stride=2, bias=False),
                ResidualBlock(store, f"backbone.s{d}.block", c, c),
            )
            prev = c
        self.cfg = cfg

    def __call__(self, image: Tensor) -> dict[int, Tensor]:
        d_max = self.cfg.coarsest
        if image.shape[2] % d_max or image.shape[3] % d_max:
            raise ContractViolation(
                f"input spatial dims {image.shape[2:]!r} must be divisible by {d_max}"
            )
        x = self.stem_conv2(ops.relu(self.stem_norm(self.stem_conv1(image))))
        x = self.stem_block(x)
        pyramid = {self.cfg.finest: x}
        for d in sorted(self.stages):
            down, block = self.stages[d]
            x = block(down(x))
            pyramid[d] = x
        return pyramid


class FeatureHarmonizer:
    """Fuse N same-shape task features into one shared representation.

    concat -> nonlinear f (two channel-reducing residual blocks, then a 1x1
    conv back to N*C) -> softmax across the task dimension -> per-task masks
    multiply the original features -> concat -> 1x1 conv down to C.
    """

    def __init__(self, store: ParamStore, name: str, n_tasks: int, channels: int):
        self.n = n_tasks
        self.c = channels
        nc = n_tasks * channels
        # norm groups aligned with the task chunks keep the block
        # permutation-equivariant w.r.t. task order
        self.f_block1 = ResidualBlock(store, f"{name}.f.block1", nc, channels,
                                      in_groups=n_tasks * NORM_GROUPS)
        self.f_block2 = ResidualBlock(store, f"{name}.f.block2", channels, channels)
        self.f_out = ConvUnit(store, f"{name}.f.out", channels, nc, kernel=1)
        self.reduce = ConvUnit(store, f"{name}.reduce", nc, channels, kernel=1)

    def masks(self, feats: list[Tensor]) -> Tensor:
        logits = self.f_out(self.f_block2(self.f_block1(ops.concat_channels(feats))))
        return ops.softmax_over_groups(logits, self.n)

    def attended(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != self.n:
            raise ContractViolation(f"harmonizer built for {self.n} tasks, got {len(feats)}")
        m = self.masks(feats)
        return [
            ops.mul(ops.slice_channels(m, k * self.c, (k + 1) * self.c), feats[k])
            for k in range(self.n)
        ]

    def __call__(self, feats: list[Tensor]) -> Tensor:
        return self.reduce(ops.concat_channels(self.attended(feats)))


class FeaturePropagation:
    """Pass task features from a coarser scale to the next finer one.

    Each task's features are refined by adding a squeeze-and-excitation
    selection from the harmonized shared representation, then upsampled x2.
    """

    def __init__(self, store: ParamStore, name: str, task_names: list[str], channels: int):
        self.task_names = list(task_names)
        self.harmonizer = FeatureHarmonizer(store, f"{name}.harmonize", len(task_names), channels)
        self.se = {t: SEGate(store, f"{name}.se.{t}", channels, SE_REDUCTION) for t in task_names}

    def __call__(self, feats: dict[str, Tensor]) -> dict[str, Tensor]:
        shared = self.harmonizer([feats[t] for t in self.task_names])
        out = {}
        for t in self.task_names:
            refined = ops.add(feats[t], self.se[t](shared))
            out[t] = ops.bilinear_upsample(refined, 2)
        return out


class ScaleDistiller:
    """Cross-task spatial-attention distillation at one scale.

    out_k = in_k + sum over l != k of sigmoid(W_kl in_l) * (W'_kl in_l);
    a single task degenerates to the exact identity.
    """

    def __init__(self, store: ParamStore, name: str, task_names: list[str], channels: int):
        self.task_names = list(task_names)
        self.attn = {}
        for k in task_names:
            for l in task_names:
                if l != k:
                    self.attn[(k, l)] = AttentionTransform(store, f"{name}.{k}.from.{l}", channels)

    def __call__(self, feats: dict[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for k in self.task_names:
            acc = feats[k]
            for l in self.task_names:
                if l != k:
                    acc = ops.add(acc, self.attn[(k, l)](feats[l]))
            out[k] = acc
        return out


class Model:
    """The assembled architecture; single-scale + no-FPM reduces to the
    classic distill-at-one-scale baseline."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(rng_seed=seed)
        task_names = [t.name for t in cfg.tasks]
        self.backbone = Backbone(self.store, cfg)

        self.heads: dict[tuple[str, int], TaskHead] = {}
        for d in cfg.coarse_to_fine:
            for t in cfg.tasks:
                self.heads[(t.name, d)] = TaskHead(
                    self.store, f"head.s{d}.{t.name}",
                    in_c=cfg.head_in_channels(d), width=cfg.channels[d], out_c=t.channels,
                )

        self.fpm: dict[int, FeaturePropagation] = {}
        if cfg.fpm_enabled:
            for d in cfg.coarse_to_fine[:-1]:  # transition from d down to d//2
                self.fpm[d] = FeaturePropagation(
                    self.store, f"fpm.s{d}", task_names, cfg.channels[d]
                )

        self.distillers: dict[int, ScaleDistiller] = {}
        if cfg.distill_enabled:
            for d in cfg.coarse_to_fine:
                self.distillers[d] = ScaleDistiller(
                    self.store, f"distill.s{d}", task_names, cfg.channels[d]
                )

        agg_in = sum(cfg.channels[d] for d in cfg.scales)
        self.agg_heads = {
            t.name: TaskHead(self.store, f"aggregate.{t.name}", in_c=agg_in,
                             width=cfg.channels[cfg.finest], out_c=t.channels)
            for t in cfg.target_tasks
        }

    # -- stages ------------------------------------------------------------

    def backbone_forward(self, image: Tensor) -> dict[int, Tensor]:
        return self.backbone(image)

    def front_end(self, pyramid: dict[int, Tensor]):
        """Run heads coarse to fine, threading task features through the FPM."""
        feats: dict[tuple[str, int], Tensor] = {}
        preds: dict[tuple[str, int], Tensor] = {}
        prev: dict[str, Tensor] | None = None
        prev_divisor = None
        for d in self.cfg.coarse_to_fine:
            if self.cfg.fpm_enabled and prev is not None:
                propagated = self.fpm[prev_divisor](prev)
                inputs = {
                    t.name: ops.concat_channels([pyramid[d], propagated[t.name]])
                    for t in self.cfg.tasks
                }
            else:
                inputs = {t.name: pyramid[d] for t in self.cfg.tasks}
            current: dict[str, Tensor] = {}
            for t in self.cfg.tasks:
                f, p = self.heads[(t.name, d)](inputs[t.name])
                feats[(t.name, d)] = f
                preds[(t.name, d)] = p
                current[t.name] = f
            prev, prev_divisor = current, d
        return feats, preds

    def distill(self, divisor: int, feats: dict[str, Tensor]) -> dict[str, Tensor]:
        if not self.cfg.distill_enabled:
            return dict(feats)
        return self.distillers[divisor](feats)

    def aggregate(self, distilled: dict[tuple[str, int], Tensor]) -> dict[str, Tensor]:
        """Upsample every scale's distilled features to the finest scale,
        concatenate, decode with a fresh head, and upsample to input size."""
        finals = {}
        for t in self.cfg.target_tasks:
            stacked = []
            for d in self.cfg.coarse_to_fine:
                if (t.name, d) not in distilled:
                    raise ContractViolation(f"missing distilled features for {(t.name, d)}")
                f = distilled[(t.name, d)]
                factor = d // self.cfg.finest
                stacked.append(ops.bilinear_upsample(f, factor) if factor > 1 else f)
            _, pred = self.agg_heads[t.name](ops.concat_channels(stacked))
            finals[t.name] = ops.bilinear_upsample(pred, self.cfg.finest)
        return finals

    def forward(self, image: Tensor) -> ModelOutputs:
        pyramid = self.backbone_forward(image)
        feats, preds = self.front_end(pyramid)
        distilled: dict[tuple[str, int], Tensor] = {}
        for d in self.cfg.coarse_to_fine:
            per_task = {t.name: feats[(t.name, d)] for t in self.cfg.tasks}
            out = self.distill(d, per_task)
            for name, tens in out.items():
                distilled[(name, d)] = tens
        finals = self.aggregate(distilled)
        return ModelOutputs(
            initial_predictions=preds,
            final_predictions=finals,
            distilled_features=distilled,
            task_features=feats,
        )


# -- checkpoints ---------------------------------------------------------------
#
# Checkpoint file: magic "MTIC", u32 version=1, then one
# (u32 name length, utf-8 name, tensor record) per parameter in store order.

_CKPT_HEADER = struct.Struct("<4sI")
_NAME_LEN = struct.Struct("<I")


def write_checkpoint(store: ParamStore, fh: BinaryIO) -> None:
    fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    for p in store:
        raw = p.name.encode("utf-8")
        fh.write(_NAME_LEN.pack(len(raw)))
        fh.write(raw)
        write_tensor(p, fh)


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(store, fh)


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(_CKPT_HEADER.size)
    if len(head) < _CKPT_HEADER.size:
        raise DataError("checkpoint: truncated header at byte offset 0")
    magic, version = _CKPT_HEADER.unpack(head)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    while True:
        at = fh.tell()
        raw = fh.read(_NAME_LEN.size)
        if not raw:
            return out
        if len(raw) < _NAME_LEN.size:
            raise DataError(f"checkpoint: truncated record length at byte offset {at}")
        (nlen,) = _NAME_LEN.unpack(raw)
        name = fh.read(nlen)
        if len(name) < nlen:
            raise DataError(f"checkpoint: truncated name at byte offset {at}")
        key = name.decode("utf-8")
        out[key] = read_tensor(fh, context=f"checkpoint[{key}]").data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def restore_checkpoint(store: ParamStore, path) -> None:
    """Load parameter values into an already-built store; shapes must match."""
    values = load_checkpoint(path)
    missing = [n for n in store.names() if n not in values]
    extra = [n for n in values if n not in store]
    if missing or extra:
        raise ContractViolation(
            f"checkpoint does not match model: missing={missing[:3]}..., extra={extra[:3]}..."
            if len(missing) + len(extra) > 6
            else f"checkpoint does not match model: missing={missing}, extra={extra}"
        )
    for p in store:
        v = values[p.name]
        if v.shape != p.shape:
            raise ContractViolation(
                f"checkpoint shape mismatch for {p.name!r}: file has {v.shape}, model has {p.shape}"
            )
        p.data[...] = v
