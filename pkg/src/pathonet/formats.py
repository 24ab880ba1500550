"""On-disk formats: annotation lists, raw density-map dumps and PNG images."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .labels import CLASSES, CellAnnotation

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1


class FormatError(ValueError):
    pass


def cells_to_records(cells: Iterable[CellAnnotation]) -> list[dict]:
    records = []
    for c in cells:
        rec = {"x": int(c.x), "y": int(c.y), "class": c.cls}
        if c.score is not None:
            rec["score"] = round(float(c.score), 6)
        records.append(rec)
    return records


def records_to_cells(records) -> list[CellAnnotation]:
    if not isinstance(records, list):
        raise FormatError("annotation document must be a list of {x, y, class} records")
    cells = []
    for i, rec in enumerate(records):
        try:
            x, y, cls = rec["x"], rec["y"], rec["class"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"record {i} is missing x, y or class") from exc
        if cls not in CLASSES:
            raise FormatError(f"record {i} has unknown class {cls!r}")
        if int(x) != x or int(y) != y:
            raise FormatError(f"record {i} has non-integer coordinates")
        score = rec.get("score")
        cells.append(CellAnnotation(int(x), int(y), cls, None if score is None else float(score)))
    return cells


def write_annotations(path: str | os.PathLike, cells: Iterable[CellAnnotation]) -> None:
    Path(path).write_text(json.dumps(cells_to_records(cells), indent=1) + "\n")


def read_annotations(path: str | os.PathLike) -> list[CellAnnotation]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid annotation document ({exc})") from exc
    return records_to_cells(doc)


def write_dmap(path: str | os.PathLike, density: np.ndarray) -> None:
    """Header (magic, u32 version, u32 C, u32 H, u32 W) then C*H*W little-endian float32."""
    arr = np.asarray(density)
    if arr.ndim != 3:
        raise FormatError(f"density map must be C x H x W, got shape {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC + struct.pack("<IIII", DMAP_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dmap(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != DMAP_MAGIC:
        raise FormatError(f"{path}: not a DMAP file")
    version, c, h, w = struct.unpack_from("<IIII", raw, 4)
    if version != DMAP_VERSION:
        raise FormatError(f"{path}: unsupported DMAP version {version}")
    body = raw[20:]
    if len(body) != 4 * c * h * w:
        raise FormatError(f"{path}: expected {4 * c * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def read_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"PNG writer expects H x W x 3 uint8, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def annotation_path_for(image_path: str | os.PathLike) -> Path:
    """Annotation file sharing the image's basename."""
    return Path(image_path).with_suffix(".json")


def list_images(directory: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def write_counts(path: str | os.PathLike, counts: dict[str, int]) -> None:
    Path(path).write_text(json.dumps({k: int(counts.get(k, 0)) for k in CLASSES}, indent=1) + "\n")


def read_cells_or_counts(path: str | os.PathLike) -> dict[str, int]:
    """Per-class counts from an annotation list or a ``{class: count}`` object."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = _parse_count_lines(text, path)
    if isinstance(doc, dict):
        unknown = set(doc) - set(CLASSES)
        if unknown:
            raise FormatError(f"{path}: unknown classes {sorted(unknown)}")
        counts = {k: doc.get(k, 0) for k in CLASSES}
        if any(not isinstance(v, int) or v < 0 for v in counts.values()):
            raise FormatError(f"{path}: counts must be non-negative integers")
        return counts
    counts = dict.fromkeys(CLASSES, 0)
    for c in records_to_cells(doc):
        counts[c.cls] += 1
    return counts



def _parse_count_lines(text: str, path) -> dict[str, int]:
    """``class count`` or ``class=count`` per line; '#' starts a comment."""
    counts: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").replace(":", " ").split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'class count', got {line!r}")
        try:
            counts[parts[0]] = int(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{n}: count {parts[1]!r} is not an integer") from None
    if not counts:
        raise FormatError(f"{path}: neither JSON nor 'class count' lines")
    return counts
