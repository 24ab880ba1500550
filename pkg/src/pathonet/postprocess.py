"""Density map -> cell centers: threshold, distance transform, watershed."""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .labels import CLASSES, CellAnnotation

BOUNDARY = 0

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_N8 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)
_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


class EmptySeedsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PostprocessConfig:
    thresholds: tuple[float, float, float] = (120.0, 180.0, 40.0)
    min_separation: int = 5
    seed_source: str = "distance"  # or "density"

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", thresholds)
        if len(thresholds) != len(CLASSES):
            raise ValueError(f"need one threshold per class, got {thresholds}")
        if any(not 0 <= t <= 255 for t in thresholds):
            raise ValueError(f"thresholds must lie in [0, 255], got {thresholds}")
        if self.min_separation < 1:
            raise ValueError("min_separation must be at least 1")
        if self.seed_source not in ("distance", "density"):
            raise ValueError(f"seed_source must be 'distance' or 'density', got {self.seed_source!r}")


@dataclass
class Topography:
    heights: np.ndarray
    labels: np.ndarray  # 0 marks boundary / unlabeled pixels

    @property
    def n_regions(self) -> int:
        return len(np.unique(self.labels[self.labels != BOUNDARY]))


def binarize(channel: np.ndarray, threshold: float) -> np.ndarray:
    """255 where ``channel >= threshold``, else 0 (uint8)."""
    return np.where(np.asarray(channel) >= threshold, 255, 0).astype(np.uint8)


def distance_transform(binary: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest
    background pixel (background pixels get 0).

    Separable: a row pass gives squared horizontal distances g^2, then the
    column pass takes min over row offsets k of k^2 + g^2, stopping once k^2
    exceeds every current estimate.  Only in-image background counts; with no
    background at all every foreground pixel is ``inf``.
    """
    fg = np.asarray(binary) != 0
    h, w = fg.shape
    if fg.all():
        return np.full((h, w), np.inf)
    if not fg.any():
        return np.zeros((h, w))
    cols = np.arange(w, dtype=np.float64)
    last_left = np.maximum.accumulate(np.where(fg, -np.inf, cols), axis=1)
    next_right = np.minimum.accumulate(np.where(fg, np.inf, cols)[:, ::-1], axis=1)[:, ::-1]
    g = np.minimum(cols - last_left, next_right - cols)
    g2 = g * g
    best = g2.copy()
    k = 1
    while k < h and k * k < best.max():
        kk = float(k * k)
        np.minimum(best[k:], g2[:-k] + kk, out=best[k:])
        np.minimum(best[:-k], g2[k:] + kk, out=best[:-k])
        k += 1
    out = np.sqrt(best)
    out[~fg] = 0.0
    return out


def _shift(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """out[y, x] = arr[y + dy, x + dx], ``fill`` outside."""
    h, w = arr.shape
    out = np.full_like(arr, fill)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = arr[ys, xs]
    return out


def regional_maxima(grid: np.ndarray) -> np.ndarray:
    """Mask of 8-connected plateaus whose outer neighbours are all strictly lower.

    A plateau with no lower neighbour (a constant grid) is not a maximum.
    """
    grid = np.asarray(grid, dtype=np.float64)
    cand = grid >= ndimage.maximum_filter(grid, footprint=_SQUARE, mode="constant", cval=-np.inf)
    labels, n = ndimage.label(cand, structure=_SQUARE)
    if n == 0:
        return cand
    has_lower = np.zeros(grid.shape, dtype=bool)
    leaks = np.zeros(grid.shape, dtype=bool)
    for dy, dx in _N8:
        nb = _shift(grid, dy, dx, np.nan)
        nb_cand = _shift(cand, dy, dx, False)
        has_lower |= nb < grid
        leaks |= (nb == grid) & ~nb_cand
    good = np.bincount(labels[has_lower & cand], minlength=n + 1) > 0
    bad = np.bincount(labels[leaks & cand], minlength=n + 1) > 0
    keep = good & ~bad
    keep[0] = False
    return keep[labels]


def local_maxima(grid: np.ndarray, min_separation: int = 5) -> list[tuple[int, int]]:
    """Regional-maximum pixels thinned so survivors are >= ``min_separation`` apart.

    Candidates are visited by height (descending), then row, then column; a
    candidate closer than ``min_separation`` (Euclidean) to an accepted one
    is dropped.  Returns (x, y) pairs in acceptance order.
    """
    if min_separation < 1:
        raise ValueError("min_separation must be at least 1")
    grid = np.asarray(grid, dtype=np.float64)
    ys, xs = np.nonzero(regional_maxima(grid))
    order = np.lexsort((xs, ys, -grid[ys, xs]))
    sep2 = float(min_separation) ** 2
    kept_y: list[int] = []
    kept_x: list[int] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if kept_y:
            d2 = (np.asarray(kept_y) - y) ** 2 + (np.asarray(kept_x) - x) ** 2
            if d2.min() < sep2:
                continue
        kept_y.append(y)
        kept_x.append(x)
    return list(zip(kept_x, kept_y))


def watershed_basic(gray: np.ndarray) -> Topography:
    """Level-by-level watershed on integer heights (4-connectivity).

    Pixels are flooded from the lowest level up.  Each connected group of
    pixels at the current level joins the single region it touches, becomes
    boundary if it touches several, or starts a new region otherwise.
    """
    heights = np.asarray(gray)
    if not np.issubdtype(heights.dtype, np.integer):
        if not np.array_equal(heights, np.round(heights)):
            raise ValueError("watershed_basic needs integer-valued heights")
        heights = heights.astype(np.int64)
    labels = np.zeros(heights.shape, dtype=np.int32)
    processed = np.zeros(heights.shape, dtype=bool)
    next_label = 1
    for level in np.unique(heights):
        groups, n = ndimage.label(heights == level, structure=_CROSS)
        for idx, box in enumerate(ndimage.find_objects(groups), start=1):
            # grow the bounding box by one pixel to see the neighbours
            sl = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in box)
            member = groups[sl] == idx
            ring = ndimage.binary_dilation(member, structure=_CROSS) & ~member
            touching = set(np.unique(labels[sl][ring & processed[sl] & (labels[sl] != BOUNDARY)]).tolist())
            if len(touching) == 1:
                labels[sl][member] = touching.pop()
            elif len(touching) > 1:
                labels[sl][member] = BOUNDARY
            else:
                labels[sl][member] = next_label
                next_label += 1
            processed[sl] |= member
    return Topography(heights, labels)


def watershed_seeded(heights: np.ndarray, seeds: Sequence[tuple[int, int]],
                     mask: np.ndarray | None = None) -> Topography:
    """Priority flood from (x, y) seeds; region i+1 grows from ``seeds[i]``.

    Pixels are claimed lowest-first (FIFO among equal heights), 4-connected,
    restricted to ``mask``.  Pixels unreachable from any seed stay 0.
    """
    heights = np.asarray(heights, dtype=np.float64)
    h, w = heights.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not len(seeds):
        warnings.warn("watershed_seeded called without seeds; returning an empty labeling",
                      EmptySeedsWarning, stacklevel=2)
        return Topography(heights, labels)
    allowed = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for i, (x, y) in enumerate(seeds):
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"seed ({x}, {y}) outside {w}x{h} grid")
        if labels[y, x]:
            raise ValueError(f"duplicate seed ({x}, {y})")
        labels[y, x] = i + 1
        heap.append((heights[y, x], counter, y, x))
        counter += 1
    heapq.heapify(heap)
    while heap:
        _, _, y, x = heapq.heappop(heap)
        lab = labels[y, x]
        for dy, dx in _N4:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not labels[ny, nx] and allowed[ny, nx]:
                labels[ny, nx] = lab
                heapq.heappush(heap, (heights[ny, nx], counter, ny, nx))
                counter += 1
    return Topography(heights, labels)


def region_centers(labels: np.ndarray, score: np.ndarray) -> list[tuple[int, int]]:
    """Per region, the (x, y) with the highest ``score``; ties go to the smallest (y, x)."""
    ys, xs = np.nonzero(labels)
    if not len(ys):
        return []
    lab = labels[ys, xs]
    order = np.lexsort((xs, ys, -score[ys, xs], lab))
    _, first = np.unique(lab[order], return_index=True)
    pick = order[first]
    return [(int(xs[i]), int(ys[i])) for i in pick]


def extract_channel(channel: np.ndarray, threshold: float, min_separation: int = 5,
                    seed_source: str = "distance") -> list[tuple[int, int, float]]:
    """Cell centers (x, y, density) in a single class channel."""
    channel = np.asarray(channel, dtype=np.float64)
    fg = binarize(channel, threshold) > 0
    if not fg.any():
        return []
    dist = distance_transform(fg)
    if seed_source == "distance":
        seed_map = dist
    else:
        seed_map = np.where(fg, channel, -np.inf)
    seeds = [(x, y) for x, y in local_maxima(seed_map, min_separation) if fg[y, x]]
    if not seeds:
        return []
    topo = watershed_seeded(-dist, seeds, mask=fg)
    return [(x, y, float(channel[y, x])) for x, y in region_centers(topo.labels, dist)]


def extract_cells(density: np.ndarray, cfg: PostprocessConfig | None = None) -> list[CellAnnotation]:
    """Run threshold -> distance transform -> seeded watershed on each class channel."""
    cfg = cfg or PostprocessConfig()
    density = np.asarray(density)
    if density.ndim != 3 or density.shape[0] != len(CLASSES):
        raise ValueError(f"density map must be {len(CLASSES)} x H x W, got {density.shape}")
    cells = []
    for c, cls in enumerate(CLASSES):
        for x, y, s in extract_channel(density[c], cfg.thresholds[c], cfg.min_separation, cfg.seed_source):
            cells.append(CellAnnotation(x, y, cls, s))
    return cells
