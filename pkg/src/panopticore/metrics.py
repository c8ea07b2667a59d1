"""Evaluation: panoptic quality, semantic mIoU, and instance-mask AP.

Multi-image aggregation works on raw tallies: sum the per-image counts
(tp / fp / fn / IoU sums, confusion matrices, pooled detections) first and
derive ratios once at the end. The report dataclasses keep those tallies
around so callers can combine them.

Conventions shared with the rest of the package: VOID pixels carry
ignore_label * label_divisor; a thing-category id with instance part 0 marks
a crowd region, which is excluded from PQ matching like VOID and can absorb
predictions in AP without counting as a miss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import DatasetSpec

__all__ = [
    "PqCategory",
    "PqAggregate",
    "PqReport",
    "IoUReport",
    "ApReport",
    "match_segments",
    "panoptic_quality",
    "pq_report_from_counts",
    "combine_pq",
    "mean_iou",
    "combine_miou",
    "mask_ap",
    "DEFAULT_AP_THRESHOLDS",
]

DEFAULT_AP_THRESHOLDS = tuple(np.arange(0.5, 1.0, 0.05).round(2))


# ---------------------------------------------------------------------------
# Panoptic quality


@dataclass(frozen=True)
class PqCategory:
    tp: int
    fp: int
    fn: int
    iou_sum: float
    pq: float
    sq: float
    rq: float


@dataclass(frozen=True)
class PqAggregate:
    pq: float
    sq: float
    rq: float
    num_categories: int


@dataclass(frozen=True)
class PqReport:
    per_category: dict[int, PqCategory]
    all: PqAggregate
    things: PqAggregate
    stuff: PqAggregate


def _segment_tables(panoptic: np.ndarray, spec: DatasetSpec):
    """Unique segment ids, areas, and the crowd/VOID exclusion mask."""
    flat = panoptic.reshape(-1).astype(np.int64)
    ids, counts = np.unique(flat, return_counts=True)
    categories = ids // spec.label_divisor
    instances = ids % spec.label_divisor
    if categories.size and (
        categories.max() > spec.max_known_label or categories.min() < 0
    ):
        raise ValueError("panoptic map contains ids unknown to the dataset spec")
    thing_lut = np.zeros(spec.max_known_label + 1, dtype=bool)
    thing_lut[list(spec.thing_ids)] = True
    is_void = categories == spec.ignore_label
    is_crowd = thing_lut[categories] & (instances == 0)
    return ids, counts, categories, is_void | is_crowd


def _intersections(pred: np.ndarray, gt: np.ndarray):
    """Pairwise overlap areas between pred and gt segments."""
    pred_flat = pred.reshape(-1).astype(np.int64)
    gt_flat = gt.reshape(-1).astype(np.int64)
    scale = int(gt_flat.max()) + 1
    if int(pred_flat.max()) >= (2**63 - 1) // scale:
        # Ids too large to pack into one int64 code; pair rows instead.
        stacked = np.stack([pred_flat, gt_flat], axis=1)
        pairs, counts = np.unique(stacked, axis=0, return_counts=True)
        return pairs[:, 0], pairs[:, 1], counts
    code = pred_flat * scale + gt_flat
    pairs, counts = np.unique(code, return_counts=True)
    return pairs // scale, pairs % scale, counts


def _matching_tables(pred: np.ndarray, gt: np.ndarray, spec: DatasetSpec):
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    pred_ids, pred_areas, pred_cats, pred_excl = _segment_tables(pred, spec)
    gt_ids, gt_areas, gt_cats, gt_excl = _segment_tables(gt, spec)

    pred_index = {int(i): k for k, i in enumerate(pred_ids)}
    gt_index = {int(i): k for k, i in enumerate(gt_ids)}

    inter_pred, inter_gt, inter_area = _intersections(pred, gt)

    # Per-pred overlap with the excluded (VOID + crowd) part of the gt.
    void_overlap = np.zeros(pred_ids.size, dtype=np.int64)
    gt_excluded_ids = set(int(g) for g, e in zip(gt_ids, gt_excl) if e)
    for p, g, a in zip(inter_pred, inter_gt, inter_area):
        if int(g) in gt_excluded_ids:
            void_overlap[pred_index[int(p)]] += a

    # Predictions mostly over excluded gt leave the evaluation entirely.
    pred_dropped = (2 * void_overlap > pred_areas) | pred_excl

    matches = []
    for p, g, a in zip(inter_pred, inter_gt, inter_area):
        pk, gk = pred_index[int(p)], gt_index[int(g)]
        if gt_excl[gk] or pred_dropped[pk]:
            continue
        if pred_cats[pk] != gt_cats[gk]:
            continue
        union = int(pred_areas[pk]) + int(gt_areas[gk]) - int(a) - int(void_overlap[pk])
        iou = int(a) / union
        if iou > 0.5:
            matches.append((int(p), int(g), float(iou)))

    matched_preds = [m[0] for m in matches]
    matched_gts = [m[1] for m in matches]
    assert len(set(matched_preds)) == len(matched_preds) and len(set(matched_gts)) == len(
        matched_gts
    ), "IoU > 0.5 matching produced a duplicate segment; implementation bug"

    return (
        matches,
        (pred_ids, pred_cats, pred_dropped, pred_index),
        (gt_ids, gt_cats, gt_excl, gt_index),
    )


def match_segments(
    pred: np.ndarray, gt: np.ndarray, spec: DatasetSpec
) -> list[tuple[int, int, float]]:
    """All same-category (pred id, gt id, IoU) pairs with IoU > 0.5.

    The > 0.5 rule makes the pairing unique; uniqueness is asserted on
    every call.
    """
    matches, _, _ = _matching_tables(pred, gt, spec)
    return matches


def panoptic_quality(
    pred: np.ndarray, gt: np.ndarray, spec: DatasetSpec
) -> PqReport:
    """PQ / SQ / RQ per category with overall, things, and stuff means.

    Segments match iff same category and IoU > 0.5, computed with gt VOID
    and crowd pixels excluded; predictions with more than half their area
    over excluded gt are neither matched nor false positives.
    """
    matches, pred_tab, gt_tab = _matching_tables(pred, gt, spec)
    pred_ids, pred_cats, pred_dropped, pred_index = pred_tab
    gt_ids, gt_cats, gt_excl, gt_index = gt_tab

    counts: dict[int, list] = {}  # category -> [tp, fp, fn, iou_sum]

    def bucket(category: int) -> list:
        return counts.setdefault(category, [0, 0, 0, 0.0])

    matched_pred = set(m[0] for m in matches)
    matched_gt = set(m[1] for m in matches)
    for p, g, iou in matches:
        b = bucket(int(pred_cats[pred_index[p]]))
        b[0] += 1
        b[3] += iou
    for k, pid in enumerate(pred_ids):
        if pred_dropped[k] or int(pid) in matched_pred:
            continue
        if pred_cats[k] == spec.ignore_label:
            continue
        bucket(int(pred_cats[k]))[1] += 1
    for k, gid in enumerate(gt_ids):
        if gt_excl[k] or int(gid) in matched_gt:
            continue
        bucket(int(gt_cats[k]))[2] += 1

    return pq_report_from_counts(
        {c: (v[0], v[1], v[2], v[3]) for c, v in counts.items()}, spec
    )


def pq_report_from_counts(
    counts: dict[int, tuple[int, int, int, float]], spec: DatasetSpec
) -> PqReport:
    """Derive a report from per-category (tp, fp, fn, iou_sum) tallies."""
    per_category = {}
    for category, (tp, fp, fn, iou_sum) in sorted(counts.items()):
        if tp + fp + fn == 0:
            continue
        denom = tp + 0.5 * fp + 0.5 * fn
        sq = iou_sum / tp if tp > 0 else 0.0
        rq = tp / denom
        pq = sq * rq  # exact sq * rq identity by construction
        per_category[category] = PqCategory(
            tp=tp, fp=fp, fn=fn, iou_sum=iou_sum, pq=pq, sq=sq, rq=rq
        )

    def aggregate(ids: Iterable[int]) -> PqAggregate:
        rows = [per_category[c] for c in ids if c in per_category]
        if not rows:
            return PqAggregate(pq=0.0, sq=0.0, rq=0.0, num_categories=0)
        n = len(rows)
        return PqAggregate(
            pq=sum(r.pq for r in rows) / n,
            sq=sum(r.sq for r in rows) / n,
            rq=sum(r.rq for r in rows) / n,
            num_categories=n,
        )

    return PqReport(
        per_category=per_category,
        all=aggregate(per_category.keys()),
        things=aggregate(sorted(spec.thing_ids)),
        stuff=aggregate(sorted(spec.stuff_ids)),
    )


def combine_pq(reports: Sequence[PqReport], spec: DatasetSpec) -> PqReport:
    """Aggregate per-image reports by summing tallies, then re-deriving."""
    counts: dict[int, list] = {}
    for report in reports:
        for category, row in report.per_category.items():
            b = counts.setdefault(category, [0, 0, 0, 0.0])
            b[0] += row.tp
            b[1] += row.fp
            b[2] += row.fn
            b[3] += row.iou_sum
    return pq_report_from_counts(
        {c: (v[0], v[1], v[2], v[3]) for c, v in counts.items()}, spec
    )


# ---------------------------------------------------------------------------
# Mean IoU


@dataclass(frozen=True)
class IoUReport:
    per_category: dict[int, float]
    mean: float
    confusion: np.ndarray = field(repr=False, compare=False, default=None)


def mean_iou(
    pred: np.ndarray,
    gt: np.ndarray,
    spec: DatasetSpec,
    average_over: str = "present",
) -> IoUReport:
    """Confusion-matrix IoU per category over semantic label maps.

    Pixels whose gt is the ignore label are excluded. The mean runs over
    categories present in the gt by default, or over every spec category
    with ``average_over="all"``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if average_over not in ("present", "all"):
        raise ValueError(f"average_over must be 'present' or 'all', got {average_over!r}")
    num = spec.num_categories
    channel_lut = np.full(spec.max_known_label + 1, num, dtype=np.int64)
    channel_lut[np.asarray(spec.category_ids, dtype=np.int64)] = np.arange(num)

    gt_flat = gt.reshape(-1).astype(np.int64)
    pred_flat = pred.reshape(-1).astype(np.int64)
    if gt_flat.min() < 0 or gt_flat.max() > spec.max_known_label:
        raise ValueError("gt map contains ids unknown to the dataset spec")
    if pred_flat.min() < 0 or pred_flat.max() > spec.max_known_label:
        raise ValueError("pred map contains ids unknown to the dataset spec")
    valid = gt_flat != spec.ignore_label
    gt_chan = channel_lut[gt_flat[valid]]
    pred_chan = channel_lut[pred_flat[valid]]
    # Sink channel `num` absorbs pred pixels carrying the ignore label.
    confusion = np.bincount(
        gt_chan * (num + 1) + pred_chan, minlength=num * (num + 1)
    ).reshape(num, num + 1)
    return _iou_report_from_confusion(confusion, spec, average_over)


def _iou_report_from_confusion(
    confusion: np.ndarray, spec: DatasetSpec, average_over: str = "present"
) -> IoUReport:
    num = spec.num_categories
    diag = np.diag(confusion[:, :num]).astype(np.float64)
    gt_area = confusion.sum(axis=1).astype(np.float64)
    pred_area = confusion[:, :num].sum(axis=0).astype(np.float64)
    union = gt_area + pred_area - diag
    per_category = {}
    present = []
    for i, cid in enumerate(spec.category_ids):
        if union[i] > 0:
            per_category[cid] = float(diag[i] / union[i])
        if gt_area[i] > 0:
            present.append(cid)
    if average_over == "present":
        mean = (
            sum(per_category[c] for c in present) / len(present) if present else 0.0
        )
    else:
        mean = sum(per_category.get(c.id, 0.0) for c in spec.categories) / num
    return IoUReport(per_category=per_category, mean=float(mean), confusion=confusion)


def combine_miou(
    reports: Sequence[IoUReport], spec: DatasetSpec, average_over: str = "present"
) -> IoUReport:
    """Aggregate by summing confusion matrices, then re-deriving IoU."""
    total = np.zeros_like(reports[0].confusion)
    for r in reports:
        total = total + r.confusion
    return _iou_report_from_confusion(total, spec, average_over)


# ---------------------------------------------------------------------------
# Instance-mask average precision


@dataclass(frozen=True)
class ApReport:
    thresholds: tuple[float, ...]
    mean_ap: float
    per_threshold: dict[float, float]
    per_category: dict[int, float]


def _mask_iou_matrix(
    dt_masks: list[np.ndarray], gt_masks: list[np.ndarray], gt_crowd: list[bool]
) -> np.ndarray:
    ious = np.zeros((len(dt_masks), len(gt_masks)))
    dt_areas = [int(m.sum()) for m in dt_masks]
    gt_areas = [int(m.sum()) for m in gt_masks]
    for j, gm in enumerate(gt_masks):
        for i, dm in enumerate(dt_masks):
            inter = int((dm & gm).sum())
            if inter == 0:
                ious[i, j] = 0.0
            elif gt_crowd[j]:
                # Crowd regions score against the detection area alone.
                ious[i, j] = inter / dt_areas[i]
            else:
                union = dt_areas[i] + gt_areas[j] - inter
                ious[i, j] = inter / union
    return ious


def match_detections(
    preds: Sequence[tuple[np.ndarray, int, float]],
    gts: Sequence[tuple[np.ndarray, int, bool]],
    thresholds: Sequence[float] = DEFAULT_AP_THRESHOLDS,
    max_dets: int = 200,
) -> dict[int, dict]:
    """Greedy per-category matching for one image.

    Returns, per category: detection scores in rank order, per-threshold tp
    flags and ignore flags (crowd absorptions), and the non-crowd gt count.
    The output is poolable across images before computing AP.
    """
    categories = sorted(
        set(int(c) for _, c, _ in preds) | set(int(c) for _, c, _ in gts)
    )
    out: dict[int, dict] = {}
    for category in categories:
        dts = [(m, float(s)) for m, c, s in preds if int(c) == category]
        order = sorted(range(len(dts)), key=lambda i: -dts[i][1])[:max_dets]
        dts = [dts[i] for i in order]
        cat_gts = [(m, bool(crowd)) for m, c, crowd in gts if int(c) == category]
        # Regular gts take priority; crowds go last and only absorb.
        cat_gts.sort(key=lambda g: g[1])
        n_positive = sum(1 for _, crowd in cat_gts if not crowd)

        ious = _mask_iou_matrix(
            [m for m, _ in dts], [m for m, _ in cat_gts], [c for _, c in cat_gts]
        )
        n_thr = len(thresholds)
        tp = np.zeros((n_thr, len(dts)), dtype=bool)
        ignored = np.zeros((n_thr, len(dts)), dtype=bool)
        for ti, t in enumerate(thresholds):
            gt_taken = [False] * len(cat_gts)
            for di in range(len(dts)):
                best_iou = float(t)
                best_gt = -1
                for gi, (_, crowd) in enumerate(cat_gts):
                    if gt_taken[gi] and not crowd:
                        continue
                    if best_gt >= 0 and not cat_gts[best_gt][1] and crowd:
                        break  # already holding a regular match; crowds cannot displace it
                    if ious[di, gi] < best_iou:
                        continue
                    if ious[di, gi] == best_iou and best_gt >= 0:
                        continue  # ties keep the earliest gt
                    best_iou = ious[di, gi]
                    best_gt = gi
                if best_gt >= 0:
                    if cat_gts[best_gt][1]:
                        ignored[ti, di] = True
                    else:
                        tp[ti, di] = True
                        gt_taken[best_gt] = True
        out[category] = {
            "scores": np.array([s for _, s in dts], dtype=np.float64),
            "tp": tp,
            "ignored": ignored,
            "n_positive": n_positive,
        }
    return out


def _average_precision(scores, tp, ignored, n_positive) -> float:
    """101-point interpolated AP for one category at one threshold."""
    if n_positive == 0:
        return -1.0
    keep = ~ignored
    scores = scores[keep]
    tp = tp[keep]
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum)
    # Precision envelope: best precision at any recall >= r.
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    recall_points = np.linspace(0.0, 1.0, 101)
    indices = np.searchsorted(recall, recall_points, side="left")
    sampled = np.zeros(101)
    valid = indices < precision.size
    sampled[valid] = precision[indices[valid]]
    return float(sampled.mean())


def ap_report_from_matches(
    matches: Sequence[dict[int, dict]],
    thresholds: Sequence[float] = DEFAULT_AP_THRESHOLDS,
) -> ApReport:
    """Pool per-image match tables and derive the AP report."""
    pooled: dict[int, dict] = {}
    for table in matches:
        for category, row in table.items():
            slot = pooled.setdefault(
                category,
                {"scores": [], "tp": [], "ignored": [], "n_positive": 0},
            )
            slot["scores"].append(row["scores"])
            slot["tp"].append(row["tp"])
            slot["ignored"].append(row["ignored"])
            slot["n_positive"] += row["n_positive"]

    n_thr = len(thresholds)
    per_category: dict[int, float] = {}
    per_threshold_lists: dict[float, list[float]] = {float(t): [] for t in thresholds}
    for category, slot in sorted(pooled.items()):
        scores = np.concatenate(slot["scores"]) if slot["scores"] else np.zeros(0)
        tp = (
            np.concatenate(slot["tp"], axis=1)
            if slot["tp"]
            else np.zeros((n_thr, 0), dtype=bool)
        )
        ignored = (
            np.concatenate(slot["ignored"], axis=1)
            if slot["ignored"]
            else np.zeros((n_thr, 0), dtype=bool)
        )
        aps = [
            _average_precision(scores, tp[ti], ignored[ti], slot["n_positive"])
            for ti in range(n_thr)
        ]
        defined = [a for a in aps if a >= 0]
        if defined:
            per_category[category] = float(np.mean(defined))
            for ti, t in enumerate(thresholds):
                if aps[ti] >= 0:
                    per_threshold_lists[float(t)].append(aps[ti])

    per_threshold = {
        t: (float(np.mean(v)) if v else 0.0) for t, v in per_threshold_lists.items()
    }
    mean_ap = (
        float(np.mean(list(per_category.values()))) if per_category else 0.0
    )
    return ApReport(
        thresholds=tuple(float(t) for t in thresholds),
        mean_ap=mean_ap,
        per_threshold=per_threshold,
        per_category=per_category,
    )


def mask_ap(
    preds: Sequence[tuple[np.ndarray, int, float]],
    gts: Sequence[tuple[np.ndarray, int, bool]],
    thresholds: Sequence[float] = DEFAULT_AP_THRESHOLDS,
    max_dets: int = 200,
) -> ApReport:
    """Instance-mask average precision for one image.

    ``preds`` are (mask, category, score) with ties in score resolved by
    insertion order; ``gts`` are (mask, category, crowd_flag). AP uses
    greedy highest-IoU matching at each threshold and 101-point interpolated
    precision-recall area, averaged over thresholds and categories.
    """
    for mask, _, score in preds:
        if not np.isfinite(score):
            raise ValueError("prediction scores must be finite")
    return ap_report_from_matches(
        [match_detections(preds, gts, thresholds, max_dets)], thresholds
    )
