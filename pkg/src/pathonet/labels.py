"""Point annotations, Gaussian density-map labels, tiling and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Sequence

import numpy as np

CLASSES = ("immunopositive", "immunonegative", "lymphocyte")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}


@dataclass(frozen=True)
class CellAnnotation:
    """A cell center (x = column, y = row, origin top-left) and its class.

    ``score`` is only set on detections and carries the density value at
    the center.
    """

    x: int
    y: int
    cls: str
    score: float | None = None

    def __post_init__(self):
        if self.cls not in CLASS_INDEX:
            raise ValueError(f"unknown cell class {self.cls!r}; expected one of {CLASSES}")

    @property
    def channel(self) -> int:
        return CLASS_INDEX[self.cls]


def class_counts(cells: Iterable[CellAnnotation]) -> dict[str, int]:
    counts = dict.fromkeys(CLASSES, 0)
    for c in cells:
        counts[c.cls] += 1
    return counts


@dataclass(frozen=True)
class LabelRenderConfig:
    variance: float = 9.0
    peak: float = 255.0
    center_value: float = 2250.0
    cutoff: float = 1.0  # amplitudes below this are dropped

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.center_value < self.peak:
            raise ValueError("center_value must be >= peak")
        if not 0 < self.cutoff <= self.peak:
            raise ValueError("cutoff must lie in (0, peak]")

    @property
    def radius(self) -> float:
        """Distance at which the Gaussian amplitude falls to ``cutoff``."""
        return math.sqrt(2.0 * self.variance * math.log(self.peak / self.cutoff))


def _check_bounds(cells: Sequence[CellAnnotation], height: int, width: int) -> None:
    for c in cells:
        if not (0 <= c.x < width and 0 <= c.y < height):
            raise ValueError(f"annotation ({c.x}, {c.y}) outside {width}x{height} image")


def render_density_map(cells: Sequence[CellAnnotation], size: tuple[int, int],
                       cfg: LabelRenderConfig | None = None) -> np.ndarray:
    """Render a 3 x H x W float32 density map from point annotations.

    Each cell adds ``peak * exp(-d^2 / (2 variance))`` to its class channel;
    overlapping bumps combine by per-pixel maximum and values under
    ``cfg.cutoff`` are zeroed.  Every annotated center pixel is then set to
    ``center_value``.
    """
    cfg = cfg or LabelRenderConfig()
    height, width = size
    _check_bounds(cells, height, width)
    out = np.zeros((len(CLASSES), height, width), dtype=np.float64)
    r = int(math.ceil(cfg.radius))
    offsets = np.arange(-r, r + 1)
    d2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    bump = cfg.peak * np.exp(-d2 / (2.0 * cfg.variance))
    bump[bump < cfg.cutoff] = 0.0
    for c in cells:
        y0, y1 = max(c.y - r, 0), min(c.y + r + 1, height)
        x0, x1 = max(c.x - r, 0), min(c.x + r + 1, width)
        patch = bump[y0 - (c.y - r):y1 - (c.y - r), x0 - (c.x - r):x1 - (c.x - r)]
        view = out[c.channel, y0:y1, x0:x1]
        np.maximum(view, patch, out=view)
    for c in cells:
        out[c.channel, c.y, c.x] = cfg.center_value
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# tiling and splits

@dataclass
class Tile:
    source: Hashable
    row: int
    col: int
    image: np.ndarray
    cells: list[CellAnnotation]
    split: str | None = None

    @property
    def name(self) -> str:
        return f"{self.source}_r{self.row}_c{self.col}"


def tile_image(image: np.ndarray, cells: Sequence[CellAnnotation], tile: int = 256,
               source: Hashable = "image") -> list[Tile]:
    """Cut an H x W (x C) image into non-overlapping ``tile``-sized squares.

    The grid starts at the top-left corner; partial tiles on the right and
    bottom margins are dropped together with their cells.
    """
    height, width = image.shape[:2]
    if height < tile or width < tile:
        raise ValueError(f"image {width}x{height} is smaller than one {tile}x{tile} tile")
    _check_bounds(cells, height, width)
    rows, cols = height // tile, width // tile
    buckets: dict[tuple[int, int], list[CellAnnotation]] = {}
    for c in cells:
        key = (c.y // tile, c.x // tile)
        if key[0] < rows and key[1] < cols:
            buckets.setdefault(key, []).append(replace(c, x=c.x - key[1] * tile, y=c.y - key[0] * tile))
    return [
        Tile(source, r, q, image[r * tile:(r + 1) * tile, q * tile:(q + 1) * tile].copy(),
             buckets.get((r, q), []))
        for r in range(rows) for q in range(cols)
    ]


@dataclass
class DatasetSplit:
    train_fraction: float = 0.7
    seed: int = 0
    assignment: dict[Hashable, str] = field(default_factory=dict)

    def assign(self, sources: Sequence[Hashable]) -> dict[Hashable, str]:
        """Assign whole source images to "train"/"test"; stable for a given seed."""
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")
        ordered = sorted(set(sources), key=str)
        perm = np.random.default_rng(self.seed).permutation(len(ordered))
        n_train = int(round(self.train_fraction * len(ordered)))
        self.assignment = {ordered[j]: ("train" if rank < n_train else "test") for rank, j in enumerate(perm)}
        return self.assignment


def tile_and_split(sources: Iterable[tuple[Hashable, np.ndarray, Sequence[CellAnnotation]]],
                   tile: int = 256, split: DatasetSplit | None = None) -> list[Tile]:
    split = split or DatasetSplit()
    tiles = []
    for source, image, cells in sources:
        tiles.extend(tile_image(image, cells, tile, source))
    assignment = split.assign([t.source for t in tiles])
    for t in tiles:
        t.split = assignment[t.source]
    return tiles


# ---------------------------------------------------------------------------
# augmentation

AUGMENTATIONS = ("identity", "flip_x", "flip_y", "rot90", "rot180", "rot270")


def _spatial(arr: np.ndarray, name: str, channels_first: bool) -> np.ndarray:
    ax = (-2, -1) if channels_first else (0, 1)
    if name == "identity":
        out = arr
    elif name == "flip_x":
        out = np.flip(arr, axis=ax[1])
    elif name == "flip_y":
        out = np.flip(arr, axis=ax[0])
    elif name.startswith("rot"):
        out = np.rot90(arr, k=int(name[3:]) // 90, axes=ax)
    else:
        raise ValueError(f"unknown augmentation {name!r}")
    return np.ascontiguousarray(out)


def apply_augmentation(image: np.ndarray, label: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """``image`` is H x W x C, ``label`` is C x H x W."""
    return _spatial(image, name, False), _spatial(label, name, True)


def augment(image: np.ndarray, label: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Identity, x/y flips and 90/180/270 degree rotations of a square tile."""
    if image.shape[0] != image.shape[1] or label.shape[-2:] != image.shape[:2]:
        raise ValueError(f"augment needs square, aligned tiles; got {image.shape} and {label.shape}")
    return [apply_augmentation(image, label, name) for name in AUGMENTATIONS]
