"""Cross-task pixel-affinity analysis.

For every center pixel and every offset of a dilated local neighborhood we
record whether the two pixels are "similar" on a task's label raster:
equality for categorical/binary labels, a relative-difference threshold for
positive regression values.  The correspondence statistic between two tasks
is the fraction of jointly valid (center, offset) pairs whose similarity bits
agree; sweeping the kernel dilation traces how task affinity varies with
receptive-field size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError

REL_EPS = 1e-8  # guard for the relative-difference denominator


@dataclass
class AffinityConfig:
    kernel_radius: int = 1
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    depth_rel_threshold: float = 0.10
    stride: int = 1

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.kernel_radius < 1:
            raise ContractViolation("kernel_radius must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations) or any(
            b <= a for a, b in zip(self.dilations, self.dilations[1:])
        ):
            raise ContractViolation(f"dilations must be strictly increasing and >= 1, got {self.dilations}")
        if self.depth_rel_threshold <= 0:
            raise ContractViolation("depth_rel_threshold must be > 0")
        if self.stride < 1:
            raise ContractViolation("stride must be >= 1")


def neighbor_offsets(radius: int) -> list[tuple[int, int]]:
    """The (2r+1)^2 - 1 neighbor offsets in row-major order, center excluded."""
    return [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy, dx) != (0, 0)
    ]


@dataclass
class AffinityBits:
    """Per-center similarity bits, one plane per neighbor offset.

    ``bits[i, j, p]`` compares the center at raster position
    (i*stride, j*stride) with its p-th dilated neighbor; out-of-bounds
    neighbors are marked invalid and never counted.
    """

    bits: np.ndarray  # (Hc, Wc, P) bool
    valid: np.ndarray  # (Hc, Wc, P) bool
    offsets: list[tuple[int, int]] = field(repr=False)
    dilation: int = 1


def _similar(a: np.ndarray, b: np.ndarray, kind: str, rel_threshold: float) -> np.ndarray:
    if kind in ("categorical", "binary"):
        return a == b
    rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_EPS)
    return rel < rel_threshold


def affinity_bits(raster, kind: str, cfg: AffinityConfig, dilation: int) -> AffinityBits:
    """Similarity bit planes of one task raster under one kernel dilation."""
    r = np.asarray(raster)
    if r.ndim != 2:
        raise ContractViolation(f"affinity_bits: raster must be 2-D, got shape {r.shape}")
    if kind not in ("categorical", "binary", "regression"):
        raise ContractViolation(f"affinity_bits: unsupported kind {kind!r}")
    if kind == "regression" and np.any(r <= 0):
        raise DataError("affinity_bits: regression raster must be strictly positive")
    if dilation < 1:
        raise ContractViolation(f"affinity_bits: dilation must be >= 1, got {dilation}")
    h, w = r.shape
    offsets = neighbor_offsets(cfg.kernel_radius)
    bits = np.zeros((h, w, len(offsets)), dtype=bool)
    valid = np.zeros((h, w, len(offsets)), dtype=bool)
    for p, (dy, dx) in enumerate(offsets):
        sy, sx = dy * dilation, dx * dilation
        y0, y1 = max(0, -sy), min(h, h - sy)
        x0, x1 = max(0, -sx), min(w, w - sx)
        if y0 >= y1 or x0 >= x1:
            continue
        centers = r[y0:y1, x0:x1]
        neighbors = r[y0 + sy : y1 + sy, x0 + sx : x1 + sx]
        bits[y0:y1, x0:x1, p] = _similar(centers, neighbors, kind, cfg.depth_rel_threshold)
        valid[y0:y1, x0:x1, p] = True
    s = cfg.stride
    return AffinityBits(bits[::s, ::s], valid[::s, ::s], offsets, dilation)


def correspondence(a: AffinityBits, b: AffinityBits) -> float:
    """Fraction of jointly valid pairs whose similarity bits agree."""
    value, _ = correspondence_with_count(a, b)
    return value


def correspondence_with_count(a: AffinityBits, b: AffinityBits) -> tuple[float, int]:
    if a.bits.shape != b.bits.shape:
        raise ContractViolation(f"correspondence: shape mismatch {a.bits.shape} vs {b.bits.shape}")
    joint = a.valid & b.valid
    count = int(joint.sum())
    if count == 0:
        raise DataError("correspondence: no jointly valid pixel pairs")
    agree = int(((a.bits == b.bits) & joint).sum())
    return agree / count, count


@dataclass
class CurveRow:
    task_a: str
    task_b: str
    dilation: int
    correspondence: float
    valid_pairs: int


def affinity_curve(rasters: dict[str, tuple[np.ndarray, str]], cfg: AffinityConfig) -> list[CurveRow]:
    """Correspondence for every unordered task pair at every dilation.

    ``rasters`` maps task name to (label raster, kind).  Rows are ordered
    pairs-lexicographic, dilations ascending.
    """
    if len(rasters) < 2:
        raise ContractViolation("affinity_curve: need at least two tasks")
    names = sorted(rasters)
    rows: list[CurveRow] = []
    for i, ta in enumerate(names):
        for tb in names[i + 1 :]:
            for d in cfg.dilations:
                ba = affinity_bits(rasters[ta][0], rasters[ta][1], cfg, d)
                bb = affinity_bits(rasters[tb][0], rasters[tb][1], cfg, d)
                value, count = correspondence_with_count(ba, bb)
                rows.append(CurveRow(ta, tb, d, value, count))
    return rows


def average_curves(per_sample: list[list[CurveRow]]) -> list[CurveRow]:
    """Average correspondence over samples per (pair, dilation); pair counts sum."""
    if not per_sample:
        raise ContractViolation("average_curves: no rows")
    keys = [(r.task_a, r.task_b, r.dilation) for r in per_sample[0]]
    acc = {k: (0.0, 0) for k in keys}
    for rows in per_sample:
        if [(r.task_a, r.task_b, r.dilation) for r in rows] != keys:
            raise ContractViolation("average_curves: inconsistent row sets across samples")
        for r in rows:
            v, c = acc[(r.task_a, r.task_b, r.dilation)]
            acc[(r.task_a, r.task_b, r.dilation)] = (v + r.correspondence, c + r.valid_pairs)
    n = len(per_sample)
    return [CurveRow(a, b, d, acc[(a, b, d)][0] / n, acc[(a, b, d)][1]) for (a, b, d) in keys]


CURVE_HEADER = ["task_a", "task_b", "dilation", "correspondence", "valid_pairs"]


def write_curve_csv(rows: list[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r.task_a, r.task_b, r.dilation, repr(r.correspondence), r.valid_pairs])
