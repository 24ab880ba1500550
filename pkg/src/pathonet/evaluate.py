"""Detection matching, precision/recall/F1, Ki-67 and TIL scoring, threshold tuning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .labels import CLASSES, CellAnnotation, class_counts
from .postprocess import extract_channel

THRESHOLD_GRID = tuple(range(0, 256, 5))


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 6.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("match radius must be positive")


@dataclass
class ClassMatch:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (gt index, pred index, distance)

    def __iadd__(self, other: "ClassMatch") -> "ClassMatch":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.pairs.extend(other.pairs)
        return self


@dataclass
class MatchReport:
    per_class: dict[str, ClassMatch] = field(default_factory=lambda: {c: ClassMatch() for c in CLASSES})

    def __getitem__(self, cls: str) -> ClassMatch:
        return self.per_class[cls]

    def merge(self, other: "MatchReport") -> "MatchReport":
        for c in CLASSES:
            self.per_class[c] += other.per_class[c]
        return self


def match_points(gt: Sequence[tuple[float, float]], pred: Sequence[tuple[float, float]],
                 radius: float) -> ClassMatch:
    """Greedy closest-first matching of single-class point sets.

    Pairs closer than ``radius`` are accepted in order of distance (ties by
    gt index, then pred index) while both endpoints are still free.
    """
    result = ClassMatch()
    if len(gt) and len(pred):
        g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
        dist = np.sqrt(((g[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1))
        gi, pi = np.nonzero(dist < radius)
        d = dist[gi, pi]
        used_g, used_p = set(), set()
        for k in np.lexsort((pi, gi, d)):
            a, b = int(gi[k]), int(pi[k])
            if a in used_g or b in used_p:
                continue
            used_g.add(a)
            used_p.add(b)
            result.pairs.append((a, b, float(d[k])))
    result.tp = len(result.pairs)
    result.fp = len(pred) - result.tp
    result.fn = len(gt) - result.tp
    return result


def match_detections(gt: Sequence[CellAnnotation], pred: Sequence[CellAnnotation],
                     cfg: MatchConfig | None = None) -> MatchReport:
    """Per-class matching; a prediction never matches a cell of another class.

    Indices in ``pairs`` refer to positions inside the per-class sublists.
    """
    cfg = cfg or MatchConfig()
    report = MatchReport()
    for cls in CLASSES:
        g = [(c.x, c.y) for c in gt if c.cls == cls]
        p = [(c.x, c.y) for c in pred if c.cls == cls]
        report.per_class[cls] = match_points(g, p, cfg.radius)
    return report


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf_from_counts(tp: int, fp: int, fn: int) -> PRF:
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return PRF(p, r, f1_score(p, r), degenerate or p + r == 0)


def compute_prf(report: MatchReport) -> dict[str, PRF]:
    """Per-class metrics plus a "micro" entry pooling TP/FP/FN over classes."""
    out = {c: prf_from_counts(m.tp, m.fp, m.fn) for c, m in report.per_class.items()}
    tp = sum(m.tp for m in report.per_class.values())
    fp = sum(m.fp for m in report.per_class.values())
    fn = sum(m.fn for m in report.per_class.values())
    out["micro"] = prf_from_counts(tp, fp, fn)
    return out


# ---------------------------------------------------------------------------
# scores

def ki67_score(positive: int, negative: int) -> float:
    """Immunopositive fraction of tumor cells; 0 when there are none."""
    total = positive + negative
    return positive / total if total else 0.0


def til_score(lymphocyte: int, positive: int, negative: int) -> float:
    total = lymphocyte + positive + negative
    return lymphocyte / total if total else 0.0


def ki67_band(score: float) -> str:
    if score < 0.16:
        return "low"
    if score <= 0.30:
        return "average"
    return "high"


def til_band(score: float) -> str:
    if score <= 0.10:
        return "low"
    if score < 0.40:
        return "mid"
    return "high"


def classify_cutoffs(ki67: float, til: float) -> tuple[str, str]:
    return ki67_band(ki67), til_band(til)


@dataclass(frozen=True)
class ScoreReport:
    ki67: float
    til: float
    ki67_band: str
    til_band: str
    ki67_degenerate: bool = False
    til_degenerate: bool = False

    @classmethod
    def from_counts(cls, counts: Mapping[str, int]) -> "ScoreReport":
        pos = counts.get("immunopositive", 0)
        neg = counts.get("immunonegative", 0)
        lym = counts.get("lymphocyte", 0)
        if min(pos, neg, lym) < 0:
            raise ValueError("cell counts must be non-negative")
        k, t = ki67_score(pos, neg), til_score(lym, pos, neg)
        return cls(k, t, ki67_band(k), til_band(t), pos + neg == 0, lym + pos + neg == 0)

    @classmethod
    def from_cells(cls, cells: Sequence[CellAnnotation]) -> "ScoreReport":
        return cls.from_counts(class_counts(cells))


def rmse_scores(predicted: Sequence[float], truth: Sequence[float]) -> float:
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(truth)} targets")
    if not len(truth):
        raise ValueError("rmse of an empty list is undefined")
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


@dataclass
class PatientSummary:
    predicted: dict[Hashable, ScoreReport]
    truth: dict[Hashable, ScoreReport]
    ki67_accuracy: float
    til_accuracy: float


def sum_counts(per_image: Mapping[Hashable, Mapping[str, int]], image_to_patient: Mapping[Hashable, Hashable]
               ) -> dict[Hashable, dict[str, int]]:
    totals: dict[Hashable, dict[str, int]] = {}
    for image, counts in per_image.items():
        if image not in image_to_patient:
            raise KeyError(f"image {image!r} is not mapped to a patient")
        acc = totals.setdefault(image_to_patient[image], dict.fromkeys(CLASSES, 0))
        for c in CLASSES:
            acc[c] += counts.get(c, 0)
    return totals


def aggregate_patient(image_to_patient: Mapping[Hashable, Hashable],
                      predicted_counts: Mapping[Hashable, Mapping[str, int]],
                      true_counts: Mapping[Hashable, Mapping[str, int]]) -> PatientSummary:
    """Pool per-image counts by patient, score each patient, and report the
    fraction of patients whose predicted cut-off band matches the truth."""
    pred = {p: ScoreReport.from_counts(c) for p, c in sum_counts(predicted_counts, image_to_patient).items()}
    true = {p: ScoreReport.from_counts(c) for p, c in sum_counts(true_counts, image_to_patient).items()}
    patients = sorted(set(pred) | set(true), key=str)
    if not patients:
        raise ValueError("no patients to aggregate")
    empty = ScoreReport.from_counts({})
    ki = sum(pred.get(p, empty).ki67_band == true.get(p, empty).ki67_band for p in patients)
    ti = sum(pred.get(p, empty).til_band == true.get(p, empty).til_band for p in patients)
    return PatientSummary(pred, true, ki / len(patients), ti / len(patients))


# ---------------------------------------------------------------------------
# threshold tuning

def best_threshold(f1_by_threshold: Mapping[float, float]) -> float:
    """Threshold with the highest F1; the lowest one wins ties."""
    if not f1_by_threshold:
        raise ValueError("no thresholds evaluated")
    best = max(f1_by_threshold.values())
    return min(t for t, f in f1_by_threshold.items() if f == best)


def threshold_sweep(density_maps: Sequence[np.ndarray], ground_truth: Sequence[Sequence[CellAnnotation]],
                    match_cfg: MatchConfig | None = None, min_separation: int = 5,
                    seed_source: str = "distance", grid: Sequence[float] = THRESHOLD_GRID
                    ) -> dict[str, dict[float, float]]:
    """Pooled F1 for every class and every threshold in ``grid``."""
    if not density_maps:
        raise ValueError("threshold tuning needs a non-empty validation set")
    if len(density_maps) != len(ground_truth):
        raise ValueError("one ground-truth list is needed per density map")
    match_cfg = match_cfg or MatchConfig()
    table: dict[str, dict[float, float]] = {}
    for c, cls in enumerate(CLASSES):
        gts = [[(a.x, a.y) for a in cells if a.cls == cls] for cells in ground_truth]
        row = {}
        for t in grid:
            total = ClassMatch()
            for dmap, gt in zip(density_maps, gts):
                found = extract_channel(dmap[c], t, min_separation, seed_source)
                total += match_points(gt, [(x, y) for x, y, _ in found], match_cfg.radius)
            row[t] = prf_from_counts(total.tp, total.fp, total.fn).f1
        table[cls] = row
    return table


def tune_thresholds(density_maps: Sequence[np.ndarray] | Callable, ground_truth: Sequence[Sequence[CellAnnotation]],
                    match_cfg: MatchConfig | None = None, images: Sequence[np.ndarray] | None = None,
                    **kw) -> tuple[float, float, float]:
    """Per-class thresholds from {0, 5, ..., 255} maximising pooled F1.

    ``density_maps`` is a list of 3 x H x W maps, or a callable (e.g. a
    trained model's predict) applied to ``images``.
    """
    if callable(density_maps):
        if images is None:
            raise ValueError("images are required when tuning against a model")
        density_maps = [density_maps(im) for im in images]
    table = threshold_sweep(density_maps, ground_truth, match_cfg, **kw)
    return tuple(float(best_threshold(table[cls])) for cls in CLASSES)


def format_report(prf: Mapping[str, PRF], scores: ScoreReport | None = None,
                  rmse: Mapping[str, float] | None = None) -> str:
    lines = [f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}"]
    for name, m in prf.items():
        flag = "  (degenerate)" if m.degenerate else ""
        lines.append(f"{name:<16}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}{flag}")
    if scores is not None:
        lines.append(f"ki67 {scores.ki67:.4f} ({scores.ki67_band})  til {scores.til:.4f} ({scores.til_band})")
    for key, value in (rmse or {}).items():
        lines.append(f"rmse_{key} {value:.4f}")
    return "\n".join(lines)


def report_dict(prf: Mapping[str, PRF], scores: ScoreReport | None = None,
                rmse: Mapping[str, float] | None = None) -> dict:
    doc: dict = {}
    for name, m in prf.items():
        doc[f"{name}.precision"] = m.precision
        doc[f"{name}.recall"] = m.recall
        doc[f"{name}.f1"] = m.f1
        doc[f"{name}.degenerate"] = m.degenerate
    if scores is not None:
        doc.update({"ki67": scores.ki67, "ki67_band": scores.ki67_band,
                    "til": scores.til, "til_band": scores.til_band})
    for key, value in (rmse or {}).items():
        doc[f"rmse.{key}"] = value
    return doc
