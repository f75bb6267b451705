"""
COCO-style detection evaluation.

Matching is greedy in descending confidence: each detection claims the
highest-IoU unmatched ground truth of its own class whose IoU reaches the
threshold (ties go to the lower gt index). AP is the exact area under the
precision envelope, p_interp(r) = max over r' >= r of p(r'), summed over the
recall steps (all-point interpolation, no 11/101-point sampling).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, ClassTaxonomy

IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.50 + 0.05 * j, 2) for j in range(10))

COCO_VEHICLES = ClassTaxonomy(("Car", "Bus", "Truck"))

# UVH class name -> COCO class name; anything absent is excluded
_TO_COCO = {
    "Hatchback": "Car",
    "Sedan": "Car",
    "SUV": "Car",
    "MUV": "Car",
    "Van": "Car",
    "Bus": "Bus",
    "M. Bus": "Bus",
    "Truck": "Truck",
}


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push identical boxes a hair above 1
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))


def iou_matrix(boxes_a: Sequence[BBox], boxes_b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([[b.x, b.y, b.x + b.w, b.y + b.h] for b in boxes_a])
    b = np.array([[b.x, b.y, b.x + b.w, b.y + b.h] for b in boxes_b])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return np.minimum(1.0, inter / (area_a[:, None] + area_b[None, :] - inter))


@dataclass
class MatchResult:
    det_tp: List[bool]  # aligned with the input detection order
    gt_matched: List[bool]
    det_gt: List[Optional[int]]


def match_detections(dets, gts, t: float) -> MatchResult:
    """Match one image's detections to its ground truth at IoU threshold ``t``.

    ``dets`` items are (BBox, label, confidence); ``gts`` items are (BBox, label).
    """
    order = sorted(range(len(dets)), key=lambda n: -dets[n][2])
    ious = iou_matrix([d[0] for d in dets], [g[0] for g in gts])
    gt_matched = [False] * len(gts)
    det_tp = [False] * len(dets)
    det_gt: List[Optional[int]] = [None] * len(dets)
    for n in order:
        _, label, _ = dets[n]
        best = None
        for g, (_, glabel) in enumerate(gts):
            if gt_matched[g] or glabel != label or ious[n, g] < t:
                continue
            if best is None or ious[n, g] > ious[n, best]:
                best = g
        if best is not None:
            gt_matched[best] = True
            det_tp[n] = True
            det_gt[n] = best
    return MatchResult(det_tp, gt_matched, det_gt)


def average_precision(confidences: Sequence[float], tp: Sequence[bool], n_gt: int) -> float:
    """Area under the interpolated precision-recall curve of one class.

    ``confidences``/``tp`` list every detection of the class across the
    dataset; equal confidences keep their input order.
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined for a class without ground truth")
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=float), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * envelope))


def _group_by_image(items):
    out = defaultdict(list)
    for it in items:
        out[it.image_id].append(it)
    return out


def class_ap_table(dets, gts, num_classes: int, thresholds=IOU_THRESHOLDS) -> Dict[int, Dict[float, float]]:
    """AP per class (only classes with ground truth) per threshold.

    ``dets`` are objects with image_id/bbox/label/score; ``gts`` with image_id/bbox/label.
    """
    det_by_img = _group_by_image(dets)
    gt_by_img = _group_by_image(gts)
    n_gt = np.zeros(num_classes, dtype=int)
    for g in gts:
        n_gt[g.label] += 1
    images = sorted(set(det_by_img) | set(gt_by_img), key=lambda i: (str(type(i)), i))
    table: Dict[int, Dict[float, float]] = {c: {} for c in range(num_classes) if n_gt[c] > 0}
    for t in thresholds:
        conf = defaultdict(list)
        hits = defaultdict(list)
        for img in images:
            d = det_by_img.get(img, [])
            g = gt_by_img.get(img, [])
            scores = [1.0 if x.score is None else x.score for x in d]
            res = match_detections(
                [(x.bbox, x.label, s) for x, s in zip(d, scores)], [(x.bbox, x.label) for x in g], t
            )
            for x, s, ok in zip(d, scores, res.det_tp):
                conf[x.label].append(s)
                hits[x.label].append(ok)
        for c in table:
            table[c][t] = average_precision(conf[c], hits[c], int(n_gt[c]))
    return table


@dataclass
class MapReport:
    map50: float
    map75: float
    map5095: float
    per_class: Dict[str, Dict[str, float]]
    gt_counts: Dict[str, int]

    CSV_FIELDS = ("class", "n_gt", "AP50", "AP75", "AP50_95")

    def rows(self) -> List[dict]:
        rows = [
            {
                "class": name,
                "n_gt": self.gt_counts[name],
                "AP50": v["AP50"],
                "AP75": v["AP75"],
                "AP50_95": v["AP50_95"],
            }
            for name, v in self.per_class.items()
        ]
        rows.append(
            {
                "class": "all",
                "n_gt": sum(self.gt_counts.values()),
                "AP50": self.map50,
                "AP75": self.map75,
                "AP50_95": self.map5095,
            }
        )
        return rows


def map_metrics(dets, gts, taxonomy: ClassTaxonomy) -> MapReport:
    """mAP(50), mAP(75) and mAP(50:95), averaged over classes that have ground truth."""
    if not gts:
        raise ValueError("no ground-truth instances to evaluate against")
    c = len(taxonomy)
    for x in list(dets) + list(gts):
        if not 0 <= x.label < c:
            raise ValueError(f"label {x.label} outside taxonomy")
    table = class_ap_table(dets, gts, c)
    counts = defaultdict(int)
    for g in gts:
        counts[g.label] += 1
    per_class = {}
    for k in sorted(table):
        aps = table[k]
        per_class[taxonomy.name(k)] = {
            "AP50": aps[0.5],
            "AP75": aps[0.75],
            "AP50_95": float(np.mean([aps[t] for t in IOU_THRESHOLDS])),
        }
    map_at = {t: float(np.mean([table[k][t] for k in table])) for t in IOU_THRESHOLDS}
    return MapReport(
        map50=map_at[0.5],
        map75=map_at[0.75],
        map5095=float(np.mean([map_at[t] for t in IOU_THRESHOLDS])),
        per_class=per_class,
        gt_counts={taxonomy.name(k): counts[k] for k in sorted(table)},
    )


def consolidate_to_coco(label: int, taxonomy: Optional[ClassTaxonomy] = None) -> Optional[int]:
    """Map a UVH class index to a COCO vehicle index (Car/Bus/Truck), or None if excluded."""
    taxonomy = taxonomy or ClassTaxonomy()
    name = taxonomy.name(label)
    target = _TO_COCO.get(name)
    return None if target is None else COCO_VEHICLES.index(target)


def consolidate_boxes(boxes, taxonomy: Optional[ClassTaxonomy] = None) -> list:
    out = []
    for b in boxes:
        k = consolidate_to_coco(b.label, taxonomy)
        if k is not None:
            out.append(replace(b, label=k))
    return out


def write_map_report(report: MapReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MapReport.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in report.rows():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
