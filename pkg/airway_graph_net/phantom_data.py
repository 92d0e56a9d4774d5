# phantom_data.py
"""
Synthetic chest-slice phantoms with airway labels, HU window/level
preprocessing, empty-slice filtering and the binary volume file format.

Each slice is soft tissue with two dark lung ellipses, an elliptical tracheal
ring (bright wall, dark lumen) drifting smoothly along the volume, and for
``with_bronchi`` 1-4 small walled lumen dots near the ring. The label is the
union of the painted lumen interiors.
"""
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .diagnostics import require_valid
from .errors import ConfigError, DataError, FormatError

DIFFICULTIES = ("tube_only", "with_bronchi")
HU_RANGE = (-1024.0, 400.0)
MIN_SLICE_SIZE = 32

VOLUME_MAGIC = b"AGNV"
VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sB3xIHH")  # 16 bytes
_MAX_VOXELS = 2 ** 31 // 5


@dataclass
class PreprocessConfig:
    window: float = 1000.0
    level: float = -600.0

    def problems(self) -> List[str]:
        return [] if self.window > 0 else [f"window must be positive, got {self.window}"]


@dataclass
class PhantomPalette:
    lung: float = -800.0
    tissue: float = 40.0
    wall: float = 0.0
    lumen: float = -1000.0
    noise: float = 20.0


@dataclass
class PhantomVolume:
    hu: np.ndarray      # n x h x w float32
    mask: np.ndarray    # n x h x w uint8 in {0, 1}
    seed: Optional[int] = None

    @property
    def n_slices(self) -> int:
        return int(self.hu.shape[0])

    def problems(self) -> List[str]:
        errors = []
        if self.hu.shape != self.mask.shape or self.hu.ndim != 3:
            errors.append(f"hu shape {self.hu.shape} and mask shape {self.mask.shape} must be equal n x h x w")
        if not np.all(np.isfinite(self.hu)):
            errors.append("hu contains non-finite values")
        elif self.hu.size and (self.hu.min() < HU_RANGE[0] or self.hu.max() > HU_RANGE[1]):
            errors.append(f"hu outside {HU_RANGE}: [{self.hu.min()}, {self.hu.max()}]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            errors.append("mask is not binary")
        return errors


# =========================
# GENERATION
# =========================


def _ellipse(yy, xx, cy, cx, ay, ax) -> np.ndarray:
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _disk(yy, xx, cy, cx, r) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _place_bronchi(rng, h, w, cy, cx, ring_outer, wall) -> List[Tuple[float, float, float]]:
    """Non-overlapping (cy, cx, r) dots below the ring, each separated from it by at least 2 px."""
    count = int(rng.integers(1, 5))
    dots = []
    for _ in range(50 * count):
        if len(dots) == count:
            break
        r = rng.uniform(1.0, 3.0)
        angle = rng.uniform(0.15 * math.pi, 0.85 * math.pi)
        dist = ring_outer + r + wall + 2.0 + rng.uniform(0.0, 0.1 * min(h, w))
        dy, dx = cy + dist * math.sin(angle), cx + dist * math.cos(angle)
        if not (r + wall + 1 <= dy <= h - r - wall - 2 and r + wall + 1 <= dx <= w - r - wall - 2):
            continue
        if any(math.hypot(dy - oy, dx - ox) < r + orr + 2 * wall + 2.0 for oy, ox, orr in dots):
            continue
        dots.append((dy, dx, r))
    if not dots:
        dots.append((cy + ring_outer + wall + 3.0, cx, 1.0))
    return dots


def generate_phantom(n_slices: int, h: int, w: int, seed: int, difficulty: str = "tube_only",
                     palette: PhantomPalette = None, empty_slices: int = 0) -> PhantomVolume:
    problems = []
    if n_slices < 1:
        problems.append(f"n_slices must be >= 1, got {n_slices}")
    if difficulty not in DIFFICULTIES:
        problems.append(f"difficulty must be one of {DIFFICULTIES}, got '{difficulty}'")
    if min(h, w) < MIN_SLICE_SIZE:
        problems.append(f"slice {h}x{w} too small to fit the tracheal ring (minimum {MIN_SLICE_SIZE})")
    if not 0 <= empty_slices <= n_slices:
        problems.append(f"empty_slices must lie in [0, {n_slices}], got {empty_slices}")
    require_valid("generate_phantom DIAGNOSTICS:", problems)

    palette = palette or PhantomPalette()
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = min(h, w)
    wall = max(1.0, 0.03 * size)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=4)

    hu = np.empty((n_slices, h, w), dtype=np.float32)
    mask = np.zeros((n_slices, h, w), dtype=np.uint8)
    for z in range(n_slices):
        t = 2.0 * math.pi * z / max(n_slices, 8)
        img = np.full((h, w), palette.tissue)
        for side in (-1.0, 1.0):
            lung = _ellipse(yy, xx, 0.6 * h, 0.5 * w + side * 0.26 * w, 0.3 * h, 0.17 * w)
            img[lung] = palette.lung

        if z >= empty_slices:
            cy = 0.35 * h + 0.04 * h * math.sin(t + phase[0])
            cx = 0.5 * w + 0.05 * w * math.sin(t + phase[1])
            ay = 0.085 * size * (1.0 + 0.15 * math.sin(t + phase[2]))
            ax = 0.1 * size * (1.0 + 0.15 * math.sin(t + phase[3]))
            img[_ellipse(yy, xx, cy, cx, ay + wall, ax + wall)] = palette.wall
            lumen = _ellipse(yy, xx, cy, cx, ay, ax)
            img[lumen] = palette.lumen
            label = lumen.copy()

            if difficulty == "with_bronchi":
                for dy, dx, r in _place_bronchi(rng, h, w, cy, cx, max(ay, ax) + wall, wall):
                    img[_disk(yy, xx, dy, dx, r + wall)] = palette.wall
                    dot = _disk(yy, xx, dy, dx, r)
                    img[dot] = palette.lumen
                    label |= dot
            mask[z] = label

        if palette.noise > 0:
            img = img + rng.normal(0.0, palette.noise, size=(h, w))
        hu[z] = np.clip(img, *HU_RANGE)

    return PhantomVolume(hu=hu, mask=mask, seed=seed)


def airway_components(mask_slice: np.ndarray) -> int:
    """Number of 4-connected labelled regions in one slice."""
    _, count = ndimage.label(np.asarray(mask_slice) > 0)
    return int(count)


# =========================
# PREPROCESSING
# =========================


def window_hu(hu: np.ndarray, cfg: PreprocessConfig = None) -> np.ndarray:
    """Clamp to [level - window/2, level + window/2] and rescale to [0, 1]."""
    cfg = cfg or PreprocessConfig()
    require_valid("PreprocessConfig DIAGNOSTICS:", cfg.problems())
    lo = cfg.level - cfg.window / 2.0
    hi = cfg.level + cfg.window / 2.0
    return (np.clip(np.asarray(hu, dtype=np.float64), lo, hi) - lo) / cfg.window


def filter_empty_slices(vol: PhantomVolume) -> PhantomVolume:
    keep = vol.mask.reshape(vol.n_slices, -1).any(axis=1)
    if not keep.any():
        raise DataError(f"all {vol.n_slices} slices have an empty airway mask; nothing left to train on")
    return PhantomVolume(hu=vol.hu[keep].copy(), mask=vol.mask[keep].copy(), seed=vol.seed)


def split_volume(vol: PhantomVolume, train_fraction: float = 0.75) -> Tuple[PhantomVolume, PhantomVolume]:
    """Sequential split: the first train_fraction of slices train, the rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = vol.n_slices
    if n < 2:
        raise DataError(f"need at least 2 slices to split, got {n}")
    n_train = min(max(int(math.floor(n * train_fraction)), 1), n - 1)
    return (
        PhantomVolume(hu=vol.hu[:n_train], mask=vol.mask[:n_train], seed=vol.seed),
        PhantomVolume(hu=vol.hu[n_train:], mask=vol.mask[n_train:], seed=vol.seed),
    )


# =========================
# VOLUME FILE
# =========================


def save_volume(vol: PhantomVolume, path: str):
    """'AGNV', version, 3 pad bytes, n (u32), h, w (u16) | float32 LE HU | u8 mask."""
    require_valid("PhantomVolume DIAGNOSTICS:", vol.problems(), DataError)
    n, h, w = vol.hu.shape
    if h > 0xFFFF or w > 0xFFFF or n > 0xFFFFFFFF:
        raise FormatError(f"shape overflow: volume {n}x{h}x{w} does not fit the header fields")
    with open(path, "wb") as f:
        f.write(_VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, n, h, w))
        f.write(np.ascontiguousarray(vol.hu, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(vol.mask, dtype=np.uint8).tobytes())


def load_volume(path: str) -> PhantomVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _VOLUME_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {_VOLUME_HEADER.size} bytes)")
    magic, version, n, h, w = _VOLUME_HEADER.unpack_from(raw, 0)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    voxels = n * h * w
    if voxels == 0 or voxels > _MAX_VOXELS:
        raise FormatError(f"{path}: shape overflow, header declares {n}x{h}x{w}")
    expected = _VOLUME_HEADER.size + 5 * voxels
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    start = _VOLUME_HEADER.size
    hu = np.frombuffer(raw, dtype="<f4", count=voxels, offset=start).astype(np.float32).reshape(n, h, w)
    mask = np.frombuffer(raw, dtype=np.uint8, count=voxels, offset=start + 4 * voxels).reshape(n, h, w).copy()
    return PhantomVolume(hu=hu, mask=mask)
