"""Depth error metrics, correct-rate AUC and segmentation IoU.

Depth metrics follow the relative-error definitions with the *prediction*
in the denominator by default; ``eigen_denominator=True`` divides by the
ground truth instead. Aggregation: per-image mean over valid pixels
(gt > 0), then mean over images; RMSE values take the square root of that
image-averaged mean square. Segmentation IoU uses global pixel counts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-6
TAU_GRID = np.arange(31) / 100.0
EXCLUDE_BELOW = 0.01

DEPTH_AGGREGATION = "per-image mean over gt>0 pixels, then mean over images; rmse = sqrt(mean of per-image MSE)"
SEG_AGGREGATION = "global confusion counts over all images; classes with IoU < 1% under every method excluded"


class MetricInputError(ValueError):
    pass


@dataclass
class DepthMetricReport:
    abs_rel: float
    sqr_rel: float
    rmse_lin: float
    rmse_log: float
    auc_crr: float
    n_images: int
    denominator: str = "prediction"
    aggregation: str = DEPTH_AGGREGATION

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegMetricReport:
    per_class_iou: dict[int, float | None]
    miou: float
    included_classes: list[int]
    excluded_classes: list[int] = field(default_factory=list)
    aggregation: str = SEG_AGGREGATION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return d


def _pairs(preds, gts) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    preds, gts = list(preds), list(gts)
    if not preds:
        raise MetricInputError("no images to evaluate")
    if len(preds) != len(gts):
        raise MetricInputError(f"{len(preds)} predictions but {len(gts)} ground truths")
    out = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise MetricInputError(f"image {i}: prediction {p.shape} vs ground truth {g.shape}")
        out.append((p, g))
    return out


def _valid(pred: np.ndarray, gt: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    mask = gt > 0
    if not mask.any():
        raise MetricInputError(f"image {i} has no valid (gt > 0) pixels")
    return pred[mask], gt[mask]


def crr(pred: np.ndarray, gt: np.ndarray, tau: float) -> float:
    """Fraction of valid pixels with |y - y_hat| / y strictly below ``tau``."""
    if tau < 0:
        raise MetricInputError("tau must be >= 0")
    (p, g), = _pairs([pred], [gt])
    p, g = _valid(p, g, 0)
    return float(np.mean(np.abs(g - p) / g < tau))


def crr_curve(preds, gts, taus: Sequence[float] = TAU_GRID) -> np.ndarray:
    """Crr at every threshold, averaged over images."""
    pairs = _pairs(preds, gts)
    taus = np.asarray(taus, dtype=np.float64)
    acc = np.zeros(len(taus))
    for i, (p, g) in enumerate(pairs):
        p, g = _valid(p, g, i)
        rel = np.abs(g - p) / g
        acc += (rel[None, :] < taus[:, None]).mean(axis=1)
    return acc / len(pairs)


def auc_crr(preds, gts) -> float:
    """Left Riemann sum of the Crr curve over tau = 0, 0.01, ..., 0.30."""
    curve = crr_curve(preds, gts, TAU_GRID)
    return float(np.sum(curve[:-1] * np.diff(TAU_GRID)))


def depth_metrics(preds, gts, eigen_denominator: bool = False) -> DepthMetricReport:
    pairs = _pairs(preds, gts)
    abs_rel = sqr_rel = mse_lin = mse_log = 0.0
    for i, (p, g) in enumerate(pairs):
        p, g = _valid(p, g, i)
        denom = g if eigen_denominator else np.maximum(p, LOG_FLOOR)
        diff = g - p
        abs_rel += np.mean(np.abs(diff) / denom)
        sqr_rel += np.mean(diff ** 2 / denom)
        mse_lin += np.mean(diff ** 2)
        mse_log += np.mean((np.log(np.maximum(g, LOG_FLOOR)) - np.log(np.maximum(p, LOG_FLOOR))) ** 2)
    n = len(pairs)
    return DepthMetricReport(
        abs_rel=float(abs_rel / n),
        sqr_rel=float(sqr_rel / n),
        rmse_lin=float(np.sqrt(mse_lin / n)),
        rmse_log=float(np.sqrt(mse_log / n)),
        auc_crr=auc_crr([p for p, _ in pairs], [g for _, g in pairs]),
        n_images=n,
        denominator="ground-truth" if eigen_denominator else "prediction",
    )


def iou(pred_seg: np.ndarray, gt_seg: np.ndarray, class_id: int) -> float | None:
    """IoU of one class; ``None`` when the class is absent from both maps."""
    pred_seg, gt_seg = np.asarray(pred_seg), np.asarray(gt_seg)
    if pred_seg.shape != gt_seg.shape:
        raise MetricInputError(f"prediction {pred_seg.shape} vs ground truth {gt_seg.shape}")
    p, g = pred_seg == class_id, gt_seg == class_id
    union = np.count_nonzero(p | g)
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


def confusion_counts(preds, gts, class_set: Iterable[int]) -> dict[int, tuple[int, int]]:
    """Global (intersection, union) pixel counts per class."""
    classes = list(class_set)
    counts = {c: [0, 0] for c in classes}
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise MetricInputError(f"{len(preds)} predictions but {len(gts)} ground truths")
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise MetricInputError(f"image {i}: prediction {p.shape} vs ground truth {g.shape}")
        for c in classes:
            pm, gm = p == c, g == c
            counts[c][0] += int(np.count_nonzero(pm & gm))
            counts[c][1] += int(np.count_nonzero(pm | gm))
    return {c: (a, b) for c, (a, b) in counts.items()}


def per_class_iou(preds, gts, class_set: Iterable[int]) -> dict[int, float | None]:
    return {c: (inter / union if union else None)
            for c, (inter, union) in confusion_counts(preds, gts, class_set).items()}


def miou(
    preds,
    gts,
    class_set: Iterable[int],
    exclusion: Mapping[str, Mapping[int, float | None]] | None = None,
) -> SegMetricReport:
    """Mean IoU after dropping classes scoring below 1% for every compared method.

    ``exclusion`` maps other method names to their per-class IoU tables; a
    class survives if this run or any of those methods reaches 1%.
    """
    table = per_class_iou(preds, gts, class_set)
    included, excluded = [], []
    for c, value in table.items():
        scores = [value] + [m.get(c) for m in (exclusion or {}).values()]
        if value is not None and any(s is not None and s >= EXCLUDE_BELOW for s in scores):
            included.append(c)
        else:
            excluded.append(c)
    if not included:
        raise MetricInputError("no classes left after the <1% exclusion")
    return SegMetricReport(
        per_class_iou=table,
        miou=float(np.mean([table[c] for c in included])),
        included_classes=included,
        excluded_classes=excluded,
    )


def resize_nearest(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (pixel-centre convention)."""
    if target_h <= 0 or target_w <= 0:
        raise MetricInputError(f"target size must be positive, got {target_h}x{target_w}")
    image = np.asarray(image)
    h, w = image.shape[-2:]
    rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(int), w - 1)
    return image[..., rows[:, None], cols[None, :]]
