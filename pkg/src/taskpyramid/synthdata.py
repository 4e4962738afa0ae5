"""Procedural multi-task scenes with geometrically consistent labels.

Each sample is a painter's-algorithm composition: a far slanted background
plane plus a number of nearer rectangles and circles, each carrying its own
affine depth plane.  Front-most surface wins per pixel.  From the winning
surface we derive the segmentation class, the depth value, the plane's unit
normal, boundary edges, and a Lambertian-shaded image.

Generation is a pure function of (seed, index): all randomness comes from a
Philox counter-based generator keyed by exactly that pair, so datasets are
reproducible bit for bit across platforms.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataError

SAMPLE_MAGIC = b"MTIS"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4sIIII")  # magic, version, H, W, K

LIGHT_DIRECTION = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
AMBIENT = 0.3

# background plane depth spans [4, 7]; shapes stay strictly nearer in [0.6, 3.9]
_BG_BASE = (5.0, 6.0)
_BG_TILT = 1.0
_SHAPE_BASE = (1.0, 3.5)
_SHAPE_TILT = 0.4


@dataclass
class GenConfig:
    H: int = 64
    W: int = 64
    num_shapes: int = 4
    num_classes: int = 5
    seed: int = 0
    noise_std: float = 0.02

    def __post_init__(self):
        if self.H % 32 or self.W % 32 or self.H < 32 or self.W < 32:
            raise ContractViolation(f"H and W must be positive multiples of 32, got {self.H}x{self.W}")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2 (background + shapes)")
        if self.num_classes > 256:
            raise ContractViolation("num_classes must fit the u8 label raster (<= 256)")
        if self.num_shapes < 0:
            raise ContractViolation("num_shapes must be >= 0")
        if self.noise_std < 0:
            raise ContractViolation("noise_std must be >= 0")


@dataclass
class SceneSample:
    """One example: image plus segmentation/depth/edge/normal rasters."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    seg: np.ndarray  # (H, W) uint8 in [0, K)
    depth: np.ndarray  # (H, W) float32 > 0
    edge: np.ndarray  # (H, W) uint8 in {0, 1}
    normals: np.ndarray  # (3, H, W) float32, unit length
    num_classes: int

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SceneSample)
            and self.num_classes == other.num_classes
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.seg, other.seg)
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.edge, other.edge)
            and np.array_equal(self.normals, other.normals)
        )


def _plane(rng, h, w, base_range, tilt):
    """Affine depth plane over pixel coordinates plus its unit normal."""
    base = rng.uniform(*base_range)
    extent = max(h, w)
    gx = rng.uniform(-tilt, tilt) / extent
    gy = rng.uniform(-tilt, tilt) / extent
    ys, xs = np.mgrid[0:h, 0:w]
    depth = base + gx * (xs - w / 2.0) + gy * (ys - h / 2.0)
    normal = np.array([-gx, -gy, 1.0])
    normal /= np.linalg.norm(normal)
    return depth, normal


def _shape_mask(rng, h, w):
    if rng.uniform() < 0.5:  # axis-aligned rectangle
        y0 = rng.integers(0, h - h // 4)
        x0 = rng.integers(0, w - w // 4)
        hh = rng.integers(h // 8, h // 2)
        ww = rng.integers(w // 8, w // 2)
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : min(h, y0 + hh), x0 : min(w, x0 + ww)] = True
        return mask
    cy = rng.integers(h // 8, h - h // 8)
    cx = rng.integers(w // 8, w - w // 8)
    radius = rng.integers(min(h, w) // 10, min(h, w) // 3)
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2


def edges_from_labels(seg: np.ndarray) -> np.ndarray:
    """Mark pixels whose 4-neighborhood contains a different label."""
    edge = np.zeros(seg.shape, dtype=bool)
    edge[:-1, :] |= seg[:-1, :] != seg[1:, :]
    edge[1:, :] |= seg[1:, :] != seg[:-1, :]
    edge[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    edge[:, 1:] |= seg[:, 1:] != seg[:, :-1]
    return edge.astype(np.uint8)


def generate_sample(cfg: GenConfig, index: int) -> SceneSample:
    """Deterministically generate sample ``index`` of the dataset ``cfg`` describes."""
    rng = np.random.Generator(np.random.Philox(key=np.array([cfg.seed, index], dtype=np.uint64)))
    h, w, k = cfg.H, cfg.W, cfg.num_classes

    depth, bg_normal = _plane(rng, h, w, _BG_BASE, _BG_TILT)
    seg = np.zeros((h, w), dtype=np.int64)
    normals = np.broadcast_to(bg_normal[:, None, None], (3, h, w)).copy()

    albedo = rng.uniform(0.2, 0.9, size=(k, 3))
    for _ in range(cfg.num_shapes):
        mask = _shape_mask(rng, h, w)
        cls = int(rng.integers(1, k))
        plane, normal = _plane(rng, h, w, _SHAPE_BASE, _SHAPE_TILT)
        wins = mask & (plane < depth)
        depth = np.where(wins, plane, depth)
        seg = np.where(wins, cls, seg)
        normals = np.where(wins[None], normal[:, None, None], normals)

    edge = edges_from_labels(seg)
    shading = AMBIENT + (1.0 - AMBIENT) * np.clip(
        np.einsum("i,ihw->hw", LIGHT_DIRECTION, normals), 0.0, None
    )
    image = albedo[seg].transpose(2, 0, 1) * shading[None]
    image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    return SceneSample(
        image=image.astype(np.float32),
        seg=seg.astype(np.uint8),
        depth=depth.astype(np.float32),
        edge=edge,
        normals=normals.astype(np.float32),
        num_classes=k,
    )


# -- on-disk format -----------------------------------------------------------------
#
# Sample file: magic "MTIS", u32 version=1, u32 H, u32 W, u32 K, then the
# payload with no padding: image f32 x 3HW, seg u8 x HW, depth f32 x HW,
# edge u8 x HW, normals f32 x 3HW.  Everything little-endian.


def write_sample(sample: SceneSample, path) -> None:
    h, w = sample.seg.shape
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, h, w, sample.num_classes))
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.seg, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(sample.depth, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.edge, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(sample.normals, dtype="<f4").tobytes())


def read_sample(path) -> SceneSample:
    raw = Path(path).read_bytes()
    if len(raw) < _SAMPLE_HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, version, h, w, k = _SAMPLE_HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0, expected {SAMPLE_MAGIC!r}")
    if version != SAMPLE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    hw = h * w
    sizes = [4 * 3 * hw, hw, 4 * hw, hw, 4 * 3 * hw]
    expected = _SAMPLE_HEADER.size + sum(sizes)
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload has {len(raw)} bytes, expected {expected}; "
            f"truncation at byte offset {min(len(raw), expected)}"
        )
    at = _SAMPLE_HEADER.size
    image = np.frombuffer(raw, dtype="<f4", count=3 * hw, offset=at).reshape(3, h, w)
    at += sizes[0]
    seg = np.frombuffer(raw, dtype=np.uint8, count=hw, offset=at).reshape(h, w)
    at += sizes[1]
    depth = np.frombuffer(raw, dtype="<f4", count=hw, offset=at).reshape(h, w)
    at += sizes[2]
    edge = np.frombuffer(raw, dtype=np.uint8, count=hw, offset=at).reshape(h, w)
    at += sizes[3]
    normals = np.frombuffer(raw, dtype="<f4", count=3 * hw, offset=at).reshape(3, h, w)
    return SceneSample(
        image=image.copy(), seg=seg.copy(), depth=depth.copy(), edge=edge.copy(),
        normals=normals.copy(), num_classes=k,
    )


# -- dataset directories ---------------------------------------------------------


def sample_filename(index: int) -> str:
    return f"sample_{index:06d}.mtis"


def write_meta(cfg: GenConfig, path) -> None:
    lines = [
        f"H={cfg.H}",
        f"W={cfg.W}",
        f"num_shapes={cfg.num_shapes}",
        f"num_classes={cfg.num_classes}",
        f"seed={cfg.seed}",
        f"noise_std={cfg.noise_std!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> GenConfig:
    text = Path(path).read_text()
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        m = re.fullmatch(r"\s*(\w+)\s*=\s*(\S+)\s*", line)
        if not m:
            raise DataError(f"{path}:{lineno}: malformed meta line {line!r}")
        values[m.group(1)] = m.group(2)
    try:
        return GenConfig(
            H=int(values["H"]),
            W=int(values["W"]),
            num_shapes=int(values["num_shapes"]),
            num_classes=int(values["num_classes"]),
            seed=int(values["seed"]),
            noise_std=float(values["noise_std"]),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing meta key {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: bad meta value: {exc}") from exc


def write_dataset(cfg: GenConfig, out_dir, count: int, progress=None, threads: int = 1) -> None:
    """Write ``count`` samples plus meta.txt.

    Generation is pure per index, so with ``threads`` > 1 samples are
    generated on a thread pool and written in index order; the resulting
    files are byte-identical to a single-threaded run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_meta(cfg, out / "meta.txt")

    def emit(i, sample):
        write_sample(sample, out / sample_filename(i))
        if progress is not None and (i + 1) % 1000 == 0:
            progress(i + 1)

    if threads > 1 and count > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, sample in enumerate(pool.map(lambda j: generate_sample(cfg, j), range(count))):
                emit(i, sample)
    else:
        for i in range(count):
            emit(i, generate_sample(cfg, i))


def load_dataset(data_dir) -> tuple[GenConfig, list[SceneSample]]:
    root = Path(data_dir)
    meta = root / "meta.txt"
    if not root.is_dir() or not meta.is_file():
        raise DataError(f"{data_dir}: not a dataset directory (missing meta.txt)")
    cfg = read_meta(meta)
    samples = [read_sample(p) for p in sorted(root.glob("sample_*.mtis"))]
    return cfg, samples
