"""Procedural Ki-67-like tiles with exact ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .labels import CLASSES, CellAnnotation


class PackingError(ValueError):
    """The requested cells do not fit in the tile."""


@dataclass(frozen=True)
class SynthConfig:
    size: int = 256
    counts: tuple[tuple[int, int], ...] = ((5, 20), (10, 35), (0, 5))
    radius_range: tuple[float, float] = (4.0, 9.0)
    lymphocyte_radius_range: tuple[float, float] = (4.0, 5.0)
    colors: tuple[tuple[int, int, int], ...] = (
        (140, 85, 45),    # immunopositive: brown
        (95, 115, 185),   # immunonegative: blue
        (45, 50, 125),    # lymphocyte: small dark blue
    )
    background: tuple[int, int, int] = (226, 214, 222)
    color_jitter: float = 12.0
    noise: float = 6.0
    overlap_probability: float = 0.0
    max_attempts: int = 2000
    seed: int = 0

    def __post_init__(self):
        if len(self.counts) != len(CLASSES) or len(self.colors) != len(CLASSES):
            raise ValueError("need one count range and one color per class")
        for lo, hi in self.counts:
            if lo < 0 or hi < lo:
                raise ValueError(f"bad count range ({lo}, {hi})")
        for lo, hi in (self.radius_range, self.lymphocyte_radius_range):
            if lo < 2 or hi < lo:
                raise ValueError(f"radius range ({lo}, {hi}) must satisfy 2 <= lo <= hi")
        for col in (*self.colors, self.background):
            if len(col) != 3 or any(not 0 <= v <= 255 for v in col):
                raise ValueError(f"invalid 8-bit RGB color {col}")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError("overlap_probability must lie in [0, 1]")
        if self.size < 16:
            raise ValueError("tile size must be at least 16")


def counts_for_size(size: int, counts=SynthConfig.counts, reference: int = 256) -> tuple:
    """Scale per-class count ranges by tile area relative to a ``reference`` tile."""
    k = (size / reference) ** 2
    return tuple((int(math.floor(lo * k)), max(int(math.floor(lo * k)), int(round(hi * k)))) for lo, hi in counts)


@dataclass
class _Cell:
    x: int
    y: int
    cls: int
    radius: float
    minor: float
    angle: float
    color: np.ndarray = field(repr=False)


def _place(rng, cfg: SynthConfig, cls: int, placed: list[_Cell]) -> _Cell:
    lo, hi = cfg.lymphocyte_radius_range if CLASSES[cls] == "lymphocyte" else cfg.radius_range
    r = rng.uniform(lo, hi)
    margin = int(math.ceil(r))
    want_overlap = placed and rng.random() < cfg.overlap_probability
    for _ in range(cfg.max_attempts):
        if want_overlap:
            partner = placed[rng.integers(len(placed))]
            d = rng.uniform(0.7, 0.95) * (r + partner.radius)
            theta = rng.uniform(0, 2 * math.pi)
            x = int(round(partner.x + d * math.cos(theta)))
            y = int(round(partner.y + d * math.sin(theta)))
            min_gap = 0.7
        else:
            x, y = (int(v) for v in rng.integers(margin, cfg.size - margin, size=2))
            min_gap = 1.0
        if not (margin <= x < cfg.size - margin and margin <= y < cfg.size - margin):
            continue
        ok = True
        for other in placed:
            d = math.hypot(x - other.x, y - other.y)
            limit = min_gap * (r + other.radius) + (1.0 if min_gap == 1.0 else 0.0)
            if d < limit:
                ok = False
                break
        if ok:
            color = np.clip(np.asarray(cfg.colors[cls], float) + rng.normal(0, cfg.color_jitter, 3), 0, 255)
            return _Cell(x, y, cls, r, r * rng.uniform(0.7, 1.0), rng.uniform(0, math.pi), color)
    raise PackingError(f"could not place a {CLASSES[cls]} cell after {cfg.max_attempts} attempts "
                       f"({len(placed)} cells already in a {cfg.size}px tile)")


def cell_window(cell: _Cell, size: int) -> tuple[tuple[slice, slice], np.ndarray]:
    """Bounding window of a cell and the ellipse mask inside it."""
    r = int(math.ceil(cell.radius))
    y0, y1 = max(cell.y - r, 0), min(cell.y + r + 1, size)
    x0, x1 = max(cell.x - r, 0), min(cell.x + r + 1, size)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cell.x, yy - cell.y
    c, s = math.cos(cell.angle), math.sin(cell.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (slice(y0, y1), slice(x0, x1)), (u / cell.radius) ** 2 + (v / cell.minor) ** 2 <= 1.0


def cell_mask(cell: _Cell, size: int) -> np.ndarray:
    window, inside = cell_window(cell, size)
    mask = np.zeros((size, size), dtype=bool)
    mask[window] = inside
    return mask


def generate_cells(cfg: SynthConfig, index: int = 0) -> list[_Cell]:
    rng = np.random.default_rng([cfg.seed, index])
    classes = [c for c, (lo, hi) in enumerate(cfg.counts) for _ in range(int(rng.integers(lo, hi + 1)))]
    rng.shuffle(classes)
    placed: list[_Cell] = []
    for cls in classes:
        placed.append(_place(rng, cfg, int(cls), placed))
    return placed


def generate_tile(cfg: SynthConfig | None = None, index: int = 0) -> tuple[np.ndarray, list[CellAnnotation]]:
    """Render one tile; returns an H x W x 3 uint8 image and its exact cell centers.

    ``index`` selects a tile within the stream defined by ``cfg.seed``.
    """
    cfg = cfg or SynthConfig()
    cells = generate_cells(cfg, index)
    rng = np.random.default_rng([cfg.seed, index, 1])
    n = cfg.size
    blotch = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), 12)
    blotch *= 4.0 * cfg.noise / (blotch.std() + 1e-12)
    img = np.asarray(cfg.background, float)[None, None, :] + blotch[..., None]
    for cell in cells:
        window, inside = cell_window(cell, n)
        yy, xx = np.mgrid[window]
        rho2 = ((xx - cell.x) ** 2 + (yy - cell.y) ** 2) / cell.radius ** 2
        shade = 0.85 + 0.15 * (1 - np.clip(rho2, 0, 1))
        patch = img[window]
        patch[inside] = cell.color[None, :] * shade[inside][:, None]
    img += rng.normal(0, cfg.noise, img.shape)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return image, [CellAnnotation(c.x, c.y, CLASSES[c.cls]) for c in cells]
