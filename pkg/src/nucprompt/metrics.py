"""Instance segmentation and point detection metrics.

All segmentation metrics take integer label maps (0 = background) or
:class:`InstanceMap` objects; instance ids need not be contiguous.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .matching import distance_matrix, hungarian
from .segmenter import InstanceMap

BASE_COLUMNS = ("dice", "aji", "dq", "sq", "pq", "bpq", "mpq",
                "det_p", "det_r", "det_f", "cls_p", "cls_r", "cls_f")


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, InstanceMap) else np.asarray(m)


def _overlap(pred, gt):
    """Instance ids and the ``G x P`` intersection matrix plus per-instance areas."""
    pred, gt = _labels(pred), _labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    joint = np.bincount(g_inv.ravel() * len(p_ids) + p_inv.ravel(), minlength=len(g_ids) * len(p_ids))
    joint = joint.reshape(len(g_ids), len(p_ids))
    # drop the background row/column
    g_keep = g_ids != 0
    p_keep = p_ids != 0
    inter = joint[np.ix_(g_keep, p_keep)].astype(np.float64)
    g_area = joint.sum(1)[g_keep].astype(np.float64)
    p_area = joint.sum(0)[p_keep].astype(np.float64)
    return p_ids[p_keep], g_ids[g_keep], inter, p_area, g_area


@dataclass
class IoUMatches:
    pairs: list[tuple[int, int]]  # (pred id, gt id)
    ious: list[float]
    unmatched_pred: list[int]
    unmatched_gt: list[int]


def match_instances_iou(pred, gt, threshold: float = 0.5) -> IoUMatches:
    """Pairs with IoU strictly above ``threshold`` (unique when threshold >= 0.5)."""
    p_ids, g_ids, inter, p_area, g_area = _overlap(pred, gt)
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    gi, pi = np.nonzero(iou > threshold)
    order = np.argsort(gi, kind="stable")
    gi, pi = gi[order], pi[order]
    return IoUMatches(
        pairs=[(int(p_ids[p]), int(g_ids[g])) for g, p in zip(gi, pi)],
        ious=[float(iou[g, p]) for g, p in zip(gi, pi)],
        unmatched_pred=[int(x) for x in np.setdiff1d(p_ids, p_ids[pi])],
        unmatched_gt=[int(x) for x in np.setdiff1d(g_ids, g_ids[gi])],
    )


@dataclass
class PanopticResult:
    dq: float
    sq: float
    pq: float
    tp: int
    fp: int
    fn: int
    ious: list[float] = field(default_factory=list)


def panoptic_quality(pred, gt) -> PanopticResult:
    """PQ = DQ * SQ over IoU > 0.5 matches. Two empty maps score 1 (perfect agreement)."""
    m = match_instances_iou(pred, gt)
    tp, fp, fn = len(m.pairs), len(m.unmatched_pred), len(m.unmatched_gt)
    if tp + fp + fn == 0:
        return PanopticResult(1.0, 1.0, 1.0, 0, 0, 0, [])
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(np.mean(m.ious)) if tp else 0.0
    return PanopticResult(dq, sq, dq * sq, tp, fp, fn, m.ious)


def binary_pq(pred, gt) -> PanopticResult:
    return panoptic_quality(_labels(pred), _labels(gt))


def _restrict(m: InstanceMap, cls: int) -> np.ndarray:
    keep = [i for i, c in m.class_of.items() if c == cls]
    return np.where(np.isin(m.labels, keep), m.labels, 0)


def multi_class_pq(pred: InstanceMap, gt: InstanceMap, n_classes: int | None = None):
    """Per-class PQ and their mean over the classes present in ``gt``.

    Returns ``(per_class, mpq)``; ``mpq`` is NaN when ``gt`` has no instances.
    """
    if n_classes is None:
        n_classes = 1 + max(list(pred.class_of.values()) + list(gt.class_of.values()) + [-1])
    gt_present = set(gt.class_of.values())
    per_class = {}
    for k in range(n_classes):
        per_class[k] = panoptic_quality(_restrict(pred, k), _restrict(gt, k))
    present = [per_class[k].pq for k in sorted(gt_present)]
    mpq = float(np.mean(present)) if present else float("nan")
    return per_class, mpq


def aji(pred, gt) -> float:
    """Aggregated Jaccard Index with greedy max-IoU pairing per gt instance."""
    p_ids, g_ids, inter, p_area, g_area = _overlap(pred, gt)
    if len(p_ids) == 0 and len(g_ids) == 0:
        return 1.0
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    used = np.zeros(len(p_ids), dtype=bool)
    num = 0.0
    den = 0.0
    for g in range(len(g_ids)):
        if len(p_ids) and iou[g].max() > 0:
            p = int(np.argmax(iou[g]))
            num += inter[g, p]
            den += union[g, p]
            used[p] = True
        else:
            den += g_area[g]
    den += p_area[~used].sum()
    return float(num / den) if den > 0 else 0.0


def dice(pred, gt) -> float:
    p = _labels(pred) > 0
    g = _labels(gt) > 0
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def _prf(tp, n_pred, n_gt):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class DetectionResult:
    radius: float
    det_p: float
    det_r: float
    det_f: float
    cls_p: float
    cls_r: float
    cls_f: float
    per_class: dict[int, tuple[float, float, float]]
    # raw counts, kept so results can be pooled across scenes
    n_pred: int = 0
    n_gt: int = 0
    tp: int = 0
    correct: int = 0
    class_counts: dict[int, tuple[int, int, int]] = field(default_factory=dict)  # (tp, n_pred, n_gt)


def _detection_from_counts(radius, n_pred, n_gt, tp, correct, class_counts) -> DetectionResult:
    det = _prf(tp, n_pred, n_gt)
    cls = _prf(correct, n_pred, n_gt)
    per_class = {k: _prf(*v) for k, v in class_counts.items()}
    return DetectionResult(radius, *det, *cls, per_class, n_pred, n_gt, tp, correct, class_counts)


def detection_scores(pred_points, pred_classes, gt_points, gt_classes, radius: float = 12.0,
                     n_classes: int | None = None) -> DetectionResult:
    """Point detection and classification P/R/F1 within ``radius`` pixels.

    Points are paired by minimum total distance (Hungarian) and a pair counts
    only when its distance is at most ``radius``. A detected point with the
    wrong class is a detection hit but a classification miss (it is a false
    positive of its predicted class and a false negative of the true one).
    Overall classification scores pool all classes.
    """
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    pred_classes = np.asarray(pred_classes, dtype=np.int64).reshape(-1)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if n_classes is None:
        n_classes = 1 + int(max(pred_classes.max(initial=-1), gt_classes.max(initial=-1)))

    d = distance_matrix(pred_points, gt_points)
    a = hungarian(d)
    valid = [(int(p), int(g)) for p, g in a.pairs if d[p, g] <= radius]
    correct = [(p, g) for p, g in valid if pred_classes[p] == gt_classes[g]]
    class_counts = {}
    for k in range(n_classes):
        tp_k = sum(1 for p, _ in correct if pred_classes[p] == k)
        class_counts[k] = (tp_k, int((pred_classes == k).sum()), int((gt_classes == k).sum()))
    return _detection_from_counts(radius, len(pred_points), len(gt_points), len(valid), len(correct),
                                  class_counts)


def pool_detection(results) -> DetectionResult:
    """Combine per-scene results by summing their counts."""
    results = list(results)
    if not results:
        raise ConfigError("nothing to pool")
    counts = {}
    for r in results:
        for k, (tp, npred, ngt) in r.class_counts.items():
            a, b, c = counts.get(k, (0, 0, 0))
            counts[k] = (a + tp, b + npred, c + ngt)
    return _detection_from_counts(
        results[0].radius,
        sum(r.n_pred for r in results), sum(r.n_gt for r in results),
        sum(r.tp for r in results), sum(r.correct for r in results), counts,
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class SceneEvaluation:
    row: dict
    detection: DetectionResult


def evaluate_scene(pred_map: InstanceMap, gt_map: InstanceMap, pred_points, pred_classes,
                   gt_points, gt_classes, n_classes: int, radius: float = 12.0) -> SceneEvaluation:
    b = binary_pq(pred_map, gt_map)
    per_class, mpq = multi_class_pq(pred_map, gt_map, n_classes)
    det = detection_scores(pred_points, pred_classes, gt_points, gt_classes, radius, n_classes)
    gt_present = set(gt_map.class_of.values())
    row = {
        "dice": dice(pred_map, gt_map),
        "aji": aji(pred_map, gt_map),
        "dq": b.dq, "sq": b.sq, "pq": b.pq, "bpq": b.pq, "mpq": mpq,
        "det_p": det.det_p, "det_r": det.det_r, "det_f": det.det_f,
        "cls_p": det.cls_p, "cls_r": det.cls_r, "cls_f": det.cls_f,
    }
    for k in range(n_classes):
        row[f"pq_class_{k}"] = per_class[k].pq if k in gt_present else float("nan")
    return SceneEvaluation(row, det)


def summarize(evaluations) -> dict:
    """Dataset-level metrics: mean of per-scene segmentation scores, pooled detection counts."""
    evaluations = list(evaluations)
    if not evaluations:
        return {}
    keys = list(evaluations[0].row)
    out = {}
    for k in keys:
        vals = np.array([e.row[k] for e in evaluations], dtype=np.float64)
        out[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    det = pool_detection(e.detection for e in evaluations)
    out.update(det_p=det.det_p, det_r=det.det_r, det_f=det.det_f,
               cls_p=det.cls_p, cls_r=det.cls_r, cls_f=det.cls_f)
    return out


def write_report(evaluations, out_dir, scene_ids=None, name="metrics") -> dict:
    """Write ``{name}.csv`` (one row per scene plus ``mean``) and ``{name}.json``."""
    evaluations = list(evaluations)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if scene_ids is None:
        scene_ids = [f"{i:04d}" for i in range(len(evaluations))]
    summary = summarize(evaluations)
    columns = list(evaluations[0].row) if evaluations else list(BASE_COLUMNS)
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", *columns])
        for sid, e in zip(scene_ids, evaluations):
            writer.writerow([sid, *(_fmt(e.row[c]) for c in columns)])
        if evaluations:
            writer.writerow(["mean", *(_fmt(summary[c]) for c in columns)])
    payload = {
        "scenes": [{"scene": sid, **e.row} for sid, e in zip(scene_ids, evaluations)],
        "summary": summary,
    }
    (out_dir / f"{name}.json").write_text(json.dumps(payload, indent=1, allow_nan=True))
    return summary


def _fmt(x) -> str:
    return "nan" if x != x else f"{x:.6f}"
