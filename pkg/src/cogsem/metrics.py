"""
CoSOD evaluation metrics.

Key features:
- MAE, S-measure, max E-measure and max F-measure per image
- 256-level threshold sweep on 8-bit predictions (positive = value >= threshold)
- explicit conventions for all-zero ground truths, which open-world sets are full of
- dataset evaluation: per-image CSV, summary JSON, per-threshold curves and pooled ROC
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .datamodel import DatasetManifest, load_mask, make_item_id, resolve_path
from .errors import LoadError, ShapeError
from .smart_logger import SmartLogger

LOG_CATEGORY = "METRICS"

LEVELS = 256
EPS = np.spacing(1)


def _as_array(values) -> np.ndarray:
    if hasattr(values, "detach"):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def _prepare(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} must be aligned 2-D maps")
    return np.clip(pred, 0.0, 1.0), gt >= 0.5


def quantize_u8(pred: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pred * 255.0), 0, 255).astype(np.int64)


@dataclass(frozen=True)
class ThresholdCounts:
    """Confusion counts at every threshold t = 0..255 (positive = 8-bit value >= t)."""

    tp: np.ndarray
    fp: np.ndarray
    num_fg: int
    num_bg: int

    @property
    def size(self) -> int:
        return self.num_fg + self.num_bg

    @property
    def fn(self) -> np.ndarray:
        return self.num_fg - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.num_bg - self.fp


def threshold_counts(pred: np.ndarray, gt: np.ndarray) -> ThresholdCounts:
    values = quantize_u8(pred)
    fg_hist = np.bincount(values[gt], minlength=LEVELS)
    bg_hist = np.bincount(values[~gt], minlength=LEVELS)
    # reversed cumulative sums: count of values >= t
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    return ThresholdCounts(tp=tp, fp=fp, num_fg=int(gt.sum()), num_bg=int((~gt).sum()))


def precision_recall(counts: ThresholdCounts) -> Tuple[np.ndarray, np.ndarray]:
    positives = counts.tp + counts.fp
    if counts.num_fg == 0:
        empty = positives == 0
        return empty.astype(np.float64), np.ones(LEVELS)
    precision = np.divide(counts.tp, positives, out=np.zeros(LEVELS), where=positives > 0)
    recall = counts.tp / counts.num_fg
    return precision, recall


def f_measure_curve(precision: np.ndarray, recall: np.ndarray, beta_sq: float = 0.3) -> np.ndarray:
    numerator = (1 + beta_sq) * precision * recall
    denominator = beta_sq * precision + recall
    return np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def f_measure_max(pred, gt, beta_sq: float = 0.3) -> Tuple[float, np.ndarray]:
    """
    Max F over 256 thresholds, and the F curve.

    Empty gt scores 1 where the thresholded prediction is empty and 0 elsewhere; a non-empty gt
    with an empty prediction scores 0.
    """
    pred, gt = _prepare(pred, gt)
    precision, recall = precision_recall(threshold_counts(pred, gt))
    curve = f_measure_curve(precision, recall, beta_sq)
    return float(curve.max()), curve


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(np.mean(values))
    sigma = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = float(np.mean(gt))
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return u * fg + (1.0 - u) * bg


def centroid(gt: np.ndarray) -> Tuple[int, int]:
    """(x, y) split point: rounded foreground centroid, +1 (one-based column/row count)."""
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    gt = gt.astype(np.float64)
    x, y = pred.mean(), gt.mean()
    sigma_x = np.sum((pred - x) ** 2) / (n - 1 + EPS)
    sigma_y = np.sum((gt - y) ** 2) / (n - 1 + EPS)
    sigma_xy = np.sum((pred - x) * (gt - y)) / (n - 1 + EPS)
    alpha = 4 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = centroid(gt)
    area = h * w
    weights = (
        x * y / area,
        y * (w - x) / area,
        (h - y) * x / area,
    )
    weights = weights + (1.0 - sum(weights),)
    quadrants = (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    )
    return float(sum(wt * ssim(pred[q], gt[q]) for wt, q in zip(weights, quadrants)))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    fg_fraction = float(np.mean(gt))
    if fg_fraction == 0:
        return 1.0 - float(np.mean(pred))
    if fg_fraction == 1:
        return float(np.mean(pred))
    score = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt)
    return max(0.0, float(score))


# ---------------------------------------------------------------------------
# E-measure
# ---------------------------------------------------------------------------


def e_measure_curve(counts: ThresholdCounts) -> np.ndarray:
    """
    Enhanced alignment at every threshold from confusion counts.

    Every pixel falls in one of four (prediction, gt) cells, and inside a cell the
    mean-centred alignment value is constant.
    """
    size = counts.size
    positives = (counts.tp + counts.fp).astype(np.float64)
    if counts.num_fg == 0:
        return 1.0 - positives / size
    if counts.num_bg == 0:
        return positives / size
    mean_pred = positives / size
    mean_gt = counts.num_fg / size
    cells = (
        (counts.tp, 1.0 - mean_pred, 1.0 - mean_gt),
        (counts.fp, 1.0 - mean_pred, -mean_gt),
        (counts.fn, -mean_pred, 1.0 - mean_gt),
        (counts.tn, -mean_pred, -mean_gt),
    )
    total = np.zeros(LEVELS)
    for numel, phi_pred, phi_gt in cells:
        align = 2.0 * phi_pred * phi_gt / (phi_pred**2 + phi_gt**2)
        total += numel * (align + 1.0) ** 2 / 4.0
    return total / size


def e_measure_max(pred, gt) -> Tuple[float, np.ndarray]:
    pred, gt = _prepare(pred, gt)
    curve = e_measure_curve(threshold_counts(pred, gt))
    return float(curve.max()), curve


# ---------------------------------------------------------------------------
# Per-image and dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class ImageScores:
    id: str
    mae: float
    s: float
    e_max: float
    f_max: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    f_curve: np.ndarray = field(repr=False)
    e_curve: np.ndarray = field(repr=False)
    counts: ThresholdCounts = field(repr=False)


@dataclass
class EvalResult:
    mae: float
    s_measure: float
    e_measure_max: float
    f_measure_max: float
    pr_curve: List[Tuple[float, float]]
    roc_curve: List[Tuple[float, float]]
    f_curve: List[float] = field(default_factory=list)
    e_curve: List[float] = field(default_factory=list)
    count: int = 0

    def summary(self) -> Dict[str, float]:
        return {
            "mae": self.mae,
            "s_measure": self.s_measure,
            "e_measure_max": self.e_measure_max,
            "f_measure_max": self.f_measure_max,
            "count": self.count,
        }


def evaluate_image(item_id: str, pred, gt, beta_sq: float = 0.3, alpha: float = 0.5) -> ImageScores:
    pred, gt_bool = _prepare(pred, gt)
    counts = threshold_counts(pred, gt_bool)
    precision, recall = precision_recall(counts)
    f_curve = f_measure_curve(precision, recall, beta_sq)
    e_curve = e_measure_curve(counts)
    return ImageScores(
        id=item_id,
        mae=float(np.mean(np.abs(pred - gt_bool))),
        s=s_measure(pred, gt_bool, alpha),
        e_max=float(e_curve.max()),
        f_max=float(f_curve.max()),
        precision=precision,
        recall=recall,
        f_curve=f_curve,
        e_curve=e_curve,
        counts=counts,
    )


def aggregate(scores: Sequence[ImageScores]) -> EvalResult:
    """Means over images; curves averaged per threshold; ROC pooled over all pixels."""
    if not scores:
        raise ShapeError("cannot aggregate an empty evaluation")
    precision = np.mean([s.precision for s in scores], axis=0)
    recall = np.mean([s.recall for s in scores], axis=0)
    tp = np.sum([s.counts.tp for s in scores], axis=0)
    fp = np.sum([s.counts.fp for s in scores], axis=0)
    num_fg = sum(s.counts.num_fg for s in scores)
    num_bg = sum(s.counts.num_bg for s in scores)
    tpr = tp / num_fg if num_fg else np.zeros(LEVELS)
    fpr = fp / num_bg if num_bg else np.zeros(LEVELS)
    return EvalResult(
        mae=float(np.mean([s.mae for s in scores])),
        s_measure=float(np.mean([s.s for s in scores])),
        e_measure_max=float(np.mean([s.e_max for s in scores])),
        f_measure_max=float(np.mean([s.f_max for s in scores])),
        pr_curve=[(float(p), float(r)) for p, r in zip(precision, recall)],
        roc_curve=[(float(a), float(b)) for a, b in zip(fpr, tpr)],
        f_curve=np.mean([s.f_curve for s in scores], axis=0).tolist(),
        e_curve=np.mean([s.e_curve for s in scores], axis=0).tolist(),
        count=len(scores),
    )


def load_prediction(path: Path, shape: Tuple[int, int]) -> np.ndarray:
    """8-bit prediction PNG as [0, 1] floats, bilinear-resized to the ground truth when needed."""
    if not path.is_file():
        raise LoadError(f"prediction not found: {path}", path=str(path))
    image = Image.open(path).convert("L")
    if image.size != (shape[1], shape[0]):
        image = image.resize((shape[1], shape[0]), Image.BILINEAR)
    return np.asarray(image, dtype=np.float64) / 255.0


def evaluate_dataset(
    pred_dir: Union[str, Path],
    manifest: DatasetManifest,
    root: Path,
    beta_sq: float = 0.3,
    alpha: float = 0.5,
    workers: int = 0,
) -> Tuple[EvalResult, List[ImageScores]]:
    """Score ``{pred_dir}/{id}.png`` against every manifest image."""
    pred_dir = Path(pred_dir)
    jobs = []
    missing = []
    for group in manifest.groups:
        for item in group.items:
            item_id = make_item_id(group.category, item)
            pred_path = pred_dir / f"{item_id}.png"
            if not pred_path.is_file():
                missing.append(item_id)
            jobs.append((item_id, pred_path, resolve_path(root, item.mask_path)))
    if missing:
        raise LoadError(f"missing predictions for {len(missing)} ids: {missing}", path=str(pred_dir))

    def _score(job) -> ImageScores:
        item_id, pred_path, mask_path = job
        gt = load_mask(mask_path).numpy()
        pred = load_prediction(pred_path, gt.shape)
        return evaluate_image(item_id, pred, gt, beta_sq, alpha)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_score, jobs))
    else:
        scores = [_score(job) for job in jobs]
    result = aggregate(scores)
    SmartLogger.log(
        "INFO",
        "Dataset evaluated",
        category=LOG_CATEGORY,
        params={"pred_dir": str(pred_dir), **result.summary()},
    )
    return result, scores


def write_eval_outputs(result: EvalResult, scores: Sequence[ImageScores], out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "per_image": out_dir / "per_image.csv",
        "summary": out_dir / "summary.json",
        "curves": out_dir / "curves.csv",
    }
    with open(paths["per_image"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "mae", "s", "e_max", "f_max"])
        for s in scores:
            writer.writerow([s.id, repr(s.mae), repr(s.s), repr(s.e_max), repr(s.f_max)])
    paths["summary"].write_text(json.dumps(result.summary(), indent=2) + "\n", encoding="utf-8")
    with open(paths["curves"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall", "f", "e", "tpr", "fpr"])
        for t in range(LEVELS):
            precision, recall = result.pr_curve[t]
            fpr, tpr = result.roc_curve[t]
            writer.writerow(
                [t]
                + [repr(v) for v in (precision, recall, result.f_curve[t], result.e_curve[t], tpr, fpr)]
            )
    return paths
