"""Precision/recall/F1, IoU, instance matching and 11-point average precision.

Matching is greedy in confidence order (Pascal VOC style): each prediction
takes the still-unmatched ground truth with the highest IoU at or above the
threshold.  Dataset-level counts are accumulated over images before the
ratios are formed.
"""
import csv
import io
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import BoundingBox
from .errors import AnnotationWarning, ValidationError
from .masks import InstanceMask

TASKS = ("semantic", "boxes", "instances")
REPORT_SCHEMA = "grapetrack-eval/1"
AP_VARIANT = "voc11"
REPORT_COLUMNS = ("iou", "ap", "precision", "recall", "f1", "tp", "fp", "fn")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def harmonic_f1(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def prf1(counts):
    """Precision, recall and F1 from counts.

    An empty denominator gives 0 for that ratio, except that nothing
    predicted and nothing expected scores a perfect 1 everywhere.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp == 0 and tp + fn == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return PRF(p, r, harmonic_f1(p, r))


# ---------------------------------------------------------------------------
# IoU

def _as_xyxy(box):
    if isinstance(box, BoundingBox):
        # IoU is unchanged by per-axis scaling, so normalised units are fine
        x, y, w, h = box.to_xywh((1.0, 1.0))
    else:
        x, y, w, h = (float(v) for v in box)
    return x, y, x + w, y + h


def _as_bits(region):
    if isinstance(region, InstanceMask):
        return region.bits
    return np.asarray(region, dtype=bool)


def iou(a, b, kind):
    """Intersection over union of two boxes or two masks.

    Boxes are BoundingBox objects or absolute ``(x, y, w, h)`` tuples;
    masks are InstanceMask objects or 2-D arrays of equal shape.
    """
    if kind == "box":
        ax0, ay0, ax1, ay1 = _as_xyxy(a)
        bx0, by0, bx1, by1 = _as_xyxy(b)
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
        return inter / union if union > 0 else 0.0
    if kind == "mask":
        ma, mb = _as_bits(a), _as_bits(b)
        if ma.shape != mb.shape:
            raise ValidationError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
        union = np.count_nonzero(ma | mb)
        return np.count_nonzero(ma & mb) / union if union else 0.0
    raise ValueError(f"unknown IoU kind {kind!r}")


def iou_matrix(preds, gts, kind):
    """Pairwise IoU, shape ``(len(preds), len(gts))``."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    if kind == "box":
        p = np.array([_as_xyxy(r) for r in preds])
        g = np.array([_as_xyxy(r) for r in gts])
        iw = np.clip(np.minimum(p[:, None, 2], g[None, :, 2])
                     - np.maximum(p[:, None, 0], g[None, :, 0]), 0, None)
        ih = np.clip(np.minimum(p[:, None, 3], g[None, :, 3])
                     - np.maximum(p[:, None, 1], g[None, :, 1]), 0, None)
        inter = iw * ih
        area_p = (p[:, 2] - p[:, 0]) * (p[:, 3] - p[:, 1])
        area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
        union = area_p[:, None] + area_g[None, :] - inter
    elif kind == "mask":
        shapes = {_as_bits(r).shape for r in (*preds, *gts)}
        if len(shapes) != 1:
            raise ValidationError(f"mask shapes differ: {sorted(shapes)}")
        p = np.stack([_as_bits(r).ravel() for r in preds]).astype(np.float64)
        g = np.stack([_as_bits(r).ravel() for r in gts]).astype(np.float64)
        inter = p @ g.T
        union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    else:
        raise ValueError(f"unknown IoU kind {kind!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


# ---------------------------------------------------------------------------
# counting

def confusion_semantic(pred, gt):
    """Pixel counts for a predicted vs. ground-truth grape/background map."""
    p, g = _as_bits(pred), _as_bits(gt)
    if p.shape != g.shape:
        raise ValidationError(f"raster shapes differ: {p.shape} vs {g.shape}")
    return ConfusionCounts(int(np.count_nonzero(p & g)), int(np.count_nonzero(p & ~g)),
                           int(np.count_nonzero(~p & g)))


def confidence_order(scores):
    """Indices by descending score; equal scores keep input order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_from_ious(ious, scores, iou_threshold):
    """Greedy one-to-one matching on a precomputed IoU matrix.

    Returns ``(matches, counts)`` with matches as ``(pred, gt, iou)``
    triples in processing order.
    """
    n_pred, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    matches = []
    for i in confidence_order(scores):
        best, best_iou = -1, -1.0
        for j in range(n_gt):
            v = ious[i, j]
            # strict > keeps the lower gt index on ties
            if not taken[j] and v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            matches.append((i, best, float(best_iou)))
    tp = len(matches)
    return matches, ConfusionCounts(tp, n_pred - tp, n_gt - tp)


def _scores(preds):
    return [float(p.confidence) for p in preds]


def match_instances(preds, gts, iou_threshold, kind):
    """One-to-one matching of predictions (carrying ``.confidence``) to ground truth."""
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    return match_from_ious(iou_matrix(list(preds), list(gts), kind), _scores(preds),
                           iou_threshold)


def ap_from_ranking(hits, n_gt):
    """11-point interpolated AP from a ranked list of hit flags.

    With no ground truth the result is 0 if anything was predicted and 1
    otherwise (a warning flags the latter).
    """
    hits = np.asarray(hits, dtype=bool)
    if n_gt == 0:
        if hits.size:
            return 0.0
        warnings.warn("AP of an empty ranking against no ground truth is defined as 1",
                      AnnotationWarning, stacklevel=2)
        return 1.0
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    precision = tp / ranks
    total = 0.0
    for level in range(11):
        # recall >= level/10, kept in integers to avoid round-off
        ok = tp * 10 >= level * n_gt
        total += precision[ok].max() if ok.any() else 0.0
    return total / 11


def average_precision(preds, gts, iou_threshold, kind):
    preds = list(preds)
    matches, _ = match_instances(preds, gts, iou_threshold, kind)
    matched = {m[0] for m in matches}
    order = confidence_order(_scores(preds))
    return ap_from_ranking([i in matched for i in order], len(gts))


# ---------------------------------------------------------------------------
# dataset evaluation

@dataclass(frozen=True)
class EvalRow:
    iou: float
    ap: float
    prf: PRF
    counts: ConfusionCounts


@dataclass(frozen=True)
class EvalReport:
    task: str
    rows: tuple
    confidence_threshold: float = None
    per_image: dict = field(default=None, compare=False)
    aggregation: str = "accumulated"

    def to_json(self):
        return report_json(self)

    def to_csv(self):
        return report_csv(self)


def _image_counts(task, preds, gts, thresholds, conf):
    """Per-image counts at each threshold plus the scored ranking for AP."""
    if task == "semantic":
        shape = _raster_shape(preds, gts)
        p = np.zeros(shape, dtype=bool)
        for m in preds:
            if m.confidence >= conf:
                p |= m.bits
        g = np.zeros(shape, dtype=bool)
        for m in gts:
            g |= m.bits
        return [confusion_semantic(p, g)], None
    kind = "box" if task == "boxes" else "mask"
    ious = iou_matrix(preds, gts, kind)
    scores = _scores(preds)
    kept = [i for i, s in enumerate(scores) if s >= conf]
    counts, ranked = [], []
    for thr in thresholds:
        _, c = match_from_ious(ious[kept], [scores[i] for i in kept], thr)
        counts.append(c)
        matches, _ = match_from_ious(ious, scores, thr)
        matched = {m[0] for m in matches}
        ranked.append([(scores[i], i in matched) for i in range(len(preds))])
    return counts, ranked


def _raster_shape(preds, gts):
    shapes = {(m.height, m.width) for m in (*preds, *gts)}
    if len(shapes) != 1:
        raise ValidationError(f"masks of one image disagree on dimensions: {sorted(shapes)}")
    return shapes.pop()


def evaluate_dataset(pred_set, gt_set, task, thresholds=(0.5,), confidence_threshold=0.9,
                     per_image=False, workers=1):
    """Evaluate predictions against ground truth over a whole image set.

    ``pred_set`` and ``gt_set`` map image ids to lists of InstanceMask (or
    BoundingBox for the boxes task).  The confidence threshold filters
    predictions before counting; AP always uses the full ranking.  Images
    without predictions count as empty (a warning is issued).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    thresholds = [float(t) for t in thresholds]
    if task == "semantic":
        thresholds = [None]
    elif any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("IoU thresholds must be strictly increasing")
    extra = sorted(set(pred_set) - set(gt_set))
    if extra:
        raise ValidationError(f"predictions for images without ground truth: {extra}")
    missing = sorted(set(gt_set) - set(pred_set))
    if missing:
        warnings.warn(f"no predictions for {len(missing)} images, treated as empty: {missing}",
                      AnnotationWarning, stacklevel=2)
    image_ids = list(gt_set)

    def work(image_id):
        return _image_counts(task, list(pred_set.get(image_id, [])), list(gt_set[image_id]),
                             thresholds, confidence_threshold)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, image_ids))
    else:
        results = [work(i) for i in image_ids]

    rows = []
    n_gt = sum(len(gt_set[i]) for i in image_ids)
    for k, thr in enumerate(thresholds):
        total = ConfusionCounts()
        for counts, _ in results:
            total = total + counts[k]
        ap = None
        if task != "semantic":
            ranked = []
            for img_pos, (_, per_thr) in enumerate(results):
                for idx, (score, hit) in enumerate(per_thr[k]):
                    ranked.append((-score, img_pos, idx, hit))
            ranked.sort()
            ap = ap_from_ranking([r[3] for r in ranked], n_gt)
        rows.append(EvalRow(thr, ap, prf1(total), total))
    breakdown = None
    if per_image:
        breakdown = {i: [(thr, c, prf1(c)) for thr, c in zip(thresholds, res[0])]
                     for i, res in zip(image_ids, results)}
    return EvalReport(task, tuple(rows), confidence_threshold, breakdown)


# ---------------------------------------------------------------------------
# report emission

def _fmt(v):
    return "null" if v is None else f"{v:.6f}"


def _row_values(row):
    return {"iou": row.iou, "ap": row.ap, "precision": row.prf.precision,
            "recall": row.prf.recall, "f1": row.prf.f1,
            "tp": row.counts.tp, "fp": row.counts.fp, "fn": row.counts.fn}


def report_json(report):
    """JSON text with every real number written to six decimal places."""
    rows = []
    for row in report.rows:
        vals = _row_values(row)
        parts = [f'"{k}": {vals[k] if k in ("tp", "fp", "fn") else _fmt(vals[k])}'
                 for k in REPORT_COLUMNS]
        rows.append("    {" + ", ".join(parts) + "}")
    head = {
        "schema": REPORT_SCHEMA,
        "task": report.task,
        "ap_variant": AP_VARIANT,
        "aggregation": report.aggregation,
    }
    lines = ["{"]
    lines += [f"  {json.dumps(k)}: {json.dumps(v)}," for k, v in head.items()]
    lines.append(f'  "confidence_threshold": {_fmt(report.confidence_threshold)},')
    lines.append('  "rows": [')
    lines.append(",\n".join(rows))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        vals = _row_values(row)
        writer.writerow([vals[k] if k in ("tp", "fp", "fn") else
                         ("" if vals[k] is None else f"{vals[k]:.6f}") for k in REPORT_COLUMNS])
    return buf.getvalue()
