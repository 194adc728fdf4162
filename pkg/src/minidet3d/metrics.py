"""Detection matching and the evaluation metric suite.

Matching is greedy one-to-one in descending IoU order among same-category
pairs whose IoU clears the threshold; matched pairs are true positives,
leftover predictions false positives, leftover ground truths false
negatives. Detection has no countable true negatives, so TN is fixed at 0
and accuracy degenerates to TP / (TP + FP + FN).

Mean IoU comes in two conventions, both provided: the mean over samples and
the unweighted mean over per-category means.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .errors import EmptyBatch, EmptyCounts, EmptyTable, NoPositives
from .geom import Box7
from .iou import iou_3d

DEFAULT_IOU_THRESHOLD = 0.25


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def match_predictions(
    preds: list[tuple[Box7, str]],
    gts: list[tuple[Box7, str]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> tuple[ConfusionCounts, list[float]]:
    """Greedy same-category matching; returns counts and matched IoUs.

    Only pairs at or above the threshold are eligible. Ties in IoU break
    deterministically by input index, so results are reproducible but
    permutation-invariant in the counts.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    candidates = []
    for i, (pbox, pcat) in enumerate(preds):
        for j, (gbox, gcat) in enumerate(gts):
            if pcat != gcat:
                continue
            iou = iou_3d(pbox, gbox).iou
            if iou >= iou_threshold:
                candidates.append((iou, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    used_p, used_g = set(), set()
    matched = []
    for iou, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matched.append(iou)
    tp = len(matched)
    return ConfusionCounts(tp=tp, tn=0, fp=len(preds) - tp, fn=len(gts) - tp), matched


def match_optimal_bruteforce(
    preds: list[tuple[Box7, str]],
    gts: list[tuple[Box7, str]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> tuple[ConfusionCounts, list[float]]:
    """Exhaustive one-to-one matching oracle for small instances.

    Enumerates every injective assignment of predictions to ground truths
    over eligible pairs and keeps the one maximizing (match count, IoU sum).
    Exponential; only sensible for a handful of boxes per side.
    """
    eligible: dict[int, list[tuple[int, float]]] = {}
    for i, (pbox, pcat) in enumerate(preds):
        for j, (gbox, gcat) in enumerate(gts):
            if pcat != gcat:
                continue
            iou = iou_3d(pbox, gbox).iou
            if iou >= iou_threshold:
                eligible.setdefault(i, []).append((j, iou))

    best: tuple[int, float, list[float]] = (0, 0.0, [])

    def extend(pred_ids: list[int], k: int, used: set[int], ious: list[float]):
        nonlocal best
        if k == len(pred_ids):
            score = (len(ious), sum(ious))
            if score > (best[0], best[1]):
                best = (len(ious), sum(ious), list(ious))
            return
        extend(pred_ids, k + 1, used, ious)  # leave this prediction unmatched
        for j, iou in eligible.get(pred_ids[k], []):
            if j in used:
                continue
            used.add(j)
            ious.append(iou)
            extend(pred_ids, k + 1, used, ious)
            ious.pop()
            used.remove(j)

    extend(sorted(eligible), 0, set(), [])
    tp = best[0]
    counts = ConfusionCounts(tp=tp, tn=0, fp=len(preds) - tp, fn=len(gts) - tp)
    return counts, sorted(best[2], reverse=True)


def accuracy(c: ConfusionCounts) -> float:
    """(TP + TN) / total; with TN = 0 this is TP / (TP + FP + FN)."""
    if c.total == 0:
        raise EmptyCounts("accuracy undefined for all-zero counts")
    return (c.tp + c.tn) / c.total


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise NoPositives("recall undefined without positive ground truth")
    return c.tp / (c.tp + c.fn)


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP); 0 when there are no predictions at all."""
    if c.tp + c.fp == 0:
        return 0.0
    return c.tp / (c.tp + c.fp)


def f1(precision_value: float, recall_value: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision_value + recall_value == 0:
        return 0.0
    return 2.0 * precision_value * recall_value / (precision_value + recall_value)


def miou_samples(ious) -> float:
    """Mean IoU across samples."""
    ious = list(ious)
    if not ious:
        raise EmptyBatch("miou_samples requires at least one IoU")
    return sum(ious) / len(ious)


@dataclass(frozen=True)
class CategoryIoUTable:
    rows: tuple[tuple[str, float, int], ...]  # (category, mean IoU, instance count)
    miou: float  # unweighted mean over categories


def aggregate_by_category(instances) -> list[tuple[str, float, int]]:
    """Collapse per-instance (category, iou) pairs into per-category rows."""
    sums: dict[str, list[float]] = {}
    for category, iou in instances:
        sums.setdefault(category, []).append(iou)
    return [(cat, sum(v) / len(v), len(v)) for cat, v in sorted(sums.items())]


def miou_categories(rows) -> CategoryIoUTable:
    """Unweighted per-category mean IoU table.

    `rows` are (category, mean IoU, instance count) triples; the overall
    value averages category means with equal weight regardless of counts.
    """
    rows = [(str(c), float(v), int(n)) for c, v, n in rows]
    if not rows:
        raise EmptyTable("miou_categories requires at least one category")
    for c, v, n in rows:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"category {c!r} IoU {v} outside [0, 1]")
    overall = sum(v for _, v, _ in rows) / len(rows)
    return CategoryIoUTable(tuple(rows), overall)


# ---- report rendering --------------------------------------------------------


def report_dict(
    table: CategoryIoUTable,
    sample_miou: float,
    counts: ConfusionCounts,
    iou_threshold: float,
) -> dict:
    p = precision(counts)
    try:
        r = recall(counts)
    except NoPositives:
        r = 0.0
    try:
        acc = accuracy(counts)
    except EmptyCounts:
        acc = 0.0
    return {
        "iou_threshold": iou_threshold,
        "counts": {"tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn},
        "accuracy": acc,
        "precision": p,
        "recall": r,
        "f1": f1(p, r),
        "miou_samples": sample_miou,
        "miou_categories": table.miou,
        "categories": [
            {"category": c, "iou": v, "count": n} for c, v, n in table.rows
        ],
    }


def report_csv(report: dict) -> str:
    """CSV rendering: per-category rows, then summary rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "iou", "count"])
    for row in report["categories"]:
        writer.writerow([row["category"], f"{row['iou']:.6f}", row["count"]])
    writer.writerow(["mIoU_categories", f"{report['miou_categories']:.6f}", ""])
    writer.writerow(["mIoU_samples", f"{report['miou_samples']:.6f}", ""])
    for key in ("accuracy", "precision", "recall", "f1"):
        writer.writerow([key, f"{report[key]:.6f}", ""])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
