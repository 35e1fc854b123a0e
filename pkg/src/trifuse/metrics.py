"""COCO-style detection metrics: IoU, greedy matching, 101-point interpolated
average precision, and the mAP report family (50:95 mean, 50, 75, and the
size strata small < 32^2, medium in [32^2, 96^2], large > 96^2 by ground-truth
area).

Matching is greedy in descending score order (ties by insertion order): each
detection takes the unmatched ground truth with the highest IoU at or above
the threshold, and each ground truth matches at most once.  In a size
stratum, matching still runs against every ground truth; detections matched
to out-of-stratum ground truths count as neither TP nor FP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

SMALL_MAX_AREA = 32.0 ** 2
MEDIUM_MAX_AREA = 96.0 ** 2
STRATA = ("all", "small", "medium", "large")
DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: top-left corner plus positive extents, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    category: int
    image: str

    def __post_init__(self):
        import math

        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    category: int
    image: str


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(0.0, ix) * max(0.0, iy)
    return inter / (a.area + b.area - inter)


def _stratum_of(box: Box) -> str:
    if box.area < SMALL_MAX_AREA:
        return "small"
    if box.area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def _greedy_match(ordered, gt_boxes, counted, threshold):
    """Labels per ordered detection: True (TP), False (FP), or None (matched
    to a ground truth outside the evaluated stratum)."""
    taken = [False] * len(gt_boxes)
    labels = []
    for det in ordered:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(det.box, g)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best < 0:
            labels.append(False)
        else:
            taken[best] = True
            labels.append(True if counted[best] else None)
    return labels


def match_detections(dets, gts, iou_threshold: float):
    """TP/FP labels for one image and category.

    Returns ``(ordered_detections, labels)`` where detections are sorted by
    descending score with ties broken by insertion order.
    """
    records = list(dets)
    gt_list = list(gts)
    ids = {(d.image, d.category) for d in records} | {(g.image, g.category) for g in gt_list}
    if len(ids) > 1:
        raise ValueError(f"mixed image/category ids: {sorted(ids)}")
    order = sorted(range(len(records)), key=lambda i: (-records[i].score, i))
    ordered = [records[i] for i in order]
    labels = _greedy_match(ordered, [g.box for g in gt_list], [True] * len(gt_list), iou_threshold)
    return ordered, labels


def average_precision(labels, n_gt: int) -> float | None:
    """101-point interpolated AP from a ranking of (score, is_tp) pairs.

    The precision envelope p(r) is the maximum precision at recall >= r,
    averaged over r in {0.00, 0.01, ..., 1.00}.  With no ground truth the
    result is 0.0 for an empty ranking and None (excluded from averaging)
    otherwise.
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    ranking = list(labels)
    for (s_prev, _), (s_next, _) in zip(ranking, ranking[1:]):
        if s_next > s_prev:
            raise ValueError("labels must be ordered by non-increasing score")
    if n_gt == 0:
        return 0.0 if not ranking else None
    tp_cum = 0
    precisions = []
    recalls = []
    for rank, (_, is_tp) in enumerate(ranking, start=1):
        tp_cum += int(is_tp)
        precisions.append(tp_cum / rank)
        recalls.append(tp_cum / n_gt)
    # envelope from the right: max precision at or beyond each rank
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    total = 0.0
    j = 0
    for k in range(RECALL_POINTS):
        r = k / (RECALL_POINTS - 1)
        while j < len(recalls) and recalls[j] < r:
            j += 1
        if j < len(envelope):
            total += envelope[j]
    return total / RECALL_POINTS


@dataclass(frozen=True)
class MetricsReport:
    """AP family per category and overall, plus per-stratum counts."""

    thresholds: tuple[float, ...]
    overall: dict[str, float | None]
    per_category: dict[int, dict[str, float | None]]
    gt_counts: dict[str, int]
    detection_counts: dict[str, int]

    def to_json_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "overall": self.overall,
            "per_category": {str(c): m for c, m in sorted(self.per_category.items())},
            "counts": {
                "ground_truth": self.gt_counts,
                "detections": self.detection_counts,
            },
        }

    def format_table(self) -> str:
        columns = ("mAP", "mAP50", "mAP75", "mAPs", "mAPm", "mAPL")
        keys = ("map", "map50", "map75", "map_small", "map_medium", "map_large")

        def fmt(v):
            return "     -" if v is None else f"{v:6.4f}"

        rows = [("category", *columns)]
        rows.append(("overall", *(fmt(self.overall[k]) for k in keys)))
        for cat in sorted(self.per_category):
            rows.append((str(cat), *(fmt(self.per_category[cat][k]) for k in keys)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths))) for r in rows]
        lines.append("")
        lines.append("ground truth: " + "  ".join(f"{s}={self.gt_counts[s]}" for s in STRATA))
        lines.append("detections:   " + "  ".join(f"{s}={self.detection_counts[s]}" for s in STRATA))
        return "\n".join(lines)


def _mean_or_none(values) -> float | None:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


def map_suite(dets, gts, thresholds=None) -> MetricsReport:
    """Full AP report over IoU thresholds (default 0.50:0.05:0.95)."""
    thresholds = tuple(thresholds) if thresholds is not None else DEFAULT_THRESHOLDS
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")
    dets = list(dets)
    gts = list(gts)

    categories = sorted({d.category for d in dets} | {g.category for g in gts})
    images = sorted({d.image for d in dets} | {g.image for g in gts})

    # ap[(category, stratum, threshold_index)] -> float | None
    ap: dict[tuple[int, str, int], float | None] = {}
    for cat in categories:
        cat_dets = [(i, d) for i, d in enumerate(dets) if d.category == cat]
        cat_gts = [g for g in gts if g.category == cat]
        per_image = {}
        for img in images:
            ordered = sorted(
                ((i, d) for i, d in cat_dets if d.image == img),
                key=lambda item: (-item[1].score, item[0]),
            )
            per_image[img] = (ordered, [g for g in cat_gts if g.image == img])
        for stratum in STRATA:
            n_gt = sum(1 for g in cat_gts if stratum == "all" or _stratum_of(g.box) == stratum)
            for ti, thr in enumerate(thresholds):
                pooled = []
                for img in images:
                    ordered, img_gts = per_image[img]
                    counted = [stratum == "all" or _stratum_of(g.box) == stratum for g in img_gts]
                    labels = _greedy_match([d for _, d in ordered], [g.box for g in img_gts], counted, thr)
                    for (idx, det), label in zip(ordered, labels):
                        if label is not None:  # ignored detections leave the ranking
                            pooled.append((det.score, idx, label))
                pooled.sort(key=lambda r: (-r[0], r[1]))
                # zero-GT categories never enter a mean, whether their
                # detections were ignored or would count as FPs
                if n_gt == 0:
                    ap[(cat, stratum, ti)] = None
                else:
                    ap[(cat, stratum, ti)] = average_precision([(s, tp) for s, _, tp in pooled], n_gt)

    def threshold_index(value: float) -> int | None:
        for i, t in enumerate(thresholds):
            if abs(t - value) < 1e-9:
                return i
        return None

    i50 = threshold_index(0.50)
    i75 = threshold_index(0.75)
    stratum_key = {"all": "map", "small": "map_small", "medium": "map_medium", "large": "map_large"}

    per_category: dict[int, dict[str, float | None]] = {}
    for cat in categories:
        entry: dict[str, float | None] = {}
        for stratum in STRATA:
            entry[stratum_key[stratum]] = _mean_or_none([ap[(cat, stratum, ti)] for ti in range(len(thresholds))])
        entry["map50"] = ap[(cat, "all", i50)] if i50 is not None else None
        entry["map75"] = ap[(cat, "all", i75)] if i75 is not None else None
        per_category[cat] = entry

    overall: dict[str, float | None] = {}
    for key in ("map", "map50", "map75", "map_small", "map_medium", "map_large"):
        if key in ("map50", "map75") and (i50 if key == "map50" else i75) is None:
            overall[key] = None
            continue
        value = _mean_or_none([per_category[cat][key] for cat in categories])
        overall[key] = value if value is not None else 0.0

    gt_counts = {s: 0 for s in STRATA}
    for g in gts:
        gt_counts["all"] += 1
        gt_counts[_stratum_of(g.box)] += 1
    det_counts = {s: 0 for s in STRATA}
    for d in dets:
        det_counts["all"] += 1
        det_counts[_stratum_of(d.box)] += 1

    return MetricsReport(
        thresholds=thresholds,
        overall=overall,
        per_category=per_category,
        gt_counts=gt_counts,
        detection_counts=det_counts,
    )


# ---------------------------------------------------------------------------
# annotations JSON
# ---------------------------------------------------------------------------


def _bbox_from_json(raw, where: str) -> Box:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ValueError(f"{where}: bbox must be [x, y, w, h]")
    try:
        return Box(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{where}: {exc}") from None


def parse_annotations(doc: dict) -> tuple[list[Detection], list[GroundTruth]]:
    """Validate the annotations document shape and build typed records."""
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise ValueError("annotations document must be {\"images\": [...]}")
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    for i, entry in enumerate(doc["images"]):
        where = f"images[{i}]"
        if not isinstance(entry, dict) or not isinstance(entry.get("id"), str):
            raise ValueError(f"{where}: every image needs a string \"id\"")
        image = entry["id"]
        for j, d in enumerate(entry.get("detections", [])):
            loc = f"{where}.detections[{j}]"
            if not isinstance(d, dict):
                raise ValueError(f"{loc}: expected an object")
            try:
                dets.append(
                    Detection(
                        box=_bbox_from_json(d.get("bbox"), loc),
                        score=float(d["score"]),
                        category=int(d["category"]),
                        image=image,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{loc}: {exc}") from None
        for j, g in enumerate(entry.get("ground_truth", [])):
            loc = f"{where}.ground_truth[{j}]"
            if not isinstance(g, dict):
                raise ValueError(f"{loc}: expected an object")
            try:
                gts.append(
                    GroundTruth(
                        box=_bbox_from_json(g.get("bbox"), loc),
                        category=int(g["category"]),
                        image=image,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{loc}: {exc}") from None
    return dets, gts


def load_annotations(path: str | Path) -> tuple[list[Detection], list[GroundTruth]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return parse_annotations(doc)
