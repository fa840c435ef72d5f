"""Detection matching, average precision, and the noise-robustness metric.

AP uses all-point interpolation: precision is accumulated in confidence
order and the area under the monotone precision envelope is integrated
over recall. The robustness number for a model is the mean absolute gap
between a fixed no-noise reference performance and the model's performance
at each evaluated noise level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from statistics import median

from .dataset import Dataset
from .exceptions import (
    CorrespondenceError,
    EmptyLevels,
    IoError,
    NoEvaluableClasses,
    ParseError,
    SchemaError,
)
from .geometry import Box, iou


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    box: Box
    confidence: float


@dataclass(frozen=True)
class PrCurve:
    recalls: tuple[float, ...]
    precisions: tuple[float, ...]
    ap: float


@dataclass(frozen=True)
class RobustnessProfile:
    base_perf: float
    levels: tuple[tuple[float, float], ...]
    mae: float

    def to_json_dict(self) -> dict:
        return {
            "base_perf": self.base_perf,
            "levels": [{"level": l, "perf": p} for l, p in self.levels],
            "mae": self.mae,
        }


@dataclass(frozen=True)
class MatchResult:
    """Detection indices in evaluation order plus their TP flags.

    ``order[i]`` is the index into the input detections of the i-th ranked
    detection (confidence descending, ties by insertion order);
    ``tp[i]`` says whether it matched a ground-truth box.
    """

    order: tuple[int, ...]
    tp: tuple[bool, ...]
    gt_matched: tuple[bool, ...]


def match_detections(
    dets: list[Detection], gts, iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy VOC-style matching within (image, category) groups.

    Each detection, in confidence order, claims the unmatched ground truth
    of its class and image with the highest IoU at or above the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    matched = [False] * len(gts)
    by_group: dict[tuple[int, int], list[int]] = {}
    for g_idx, gt in enumerate(gts):
        by_group.setdefault((gt.image_id, gt.category_id), []).append(g_idx)

    tp = []
    for det_idx in order:
        det = dets[det_idx]
        best_gt, best_iou = None, 0.0
        for g_idx in by_group.get((det.image_id, det.category_id), []):
            if matched[g_idx]:
                continue
            v = iou(det.box, gts[g_idx].box)
            if v >= iou_threshold and v > best_iou:
                best_gt, best_iou = g_idx, v
        if best_gt is None:
            tp.append(False)
        else:
            matched[best_gt] = True
            tp.append(True)
    return MatchResult(order=tuple(order), tp=tuple(tp), gt_matched=tuple(matched))


def average_precision(flags, num_gt: int) -> PrCurve:
    """All-point-interpolated AP from confidence-ordered TP/FP flags.

    With num_gt == 0 the AP is undefined; the curve comes back empty with
    ap = nan and the class is skipped by mean_ap.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return PrCurve(recalls=(), precisions=(), ap=float("nan"))
    flags = list(flags)
    if not flags:
        return PrCurve(recalls=(), precisions=(), ap=0.0)
    recalls, precisions = [], []
    tp_cum = 0
    for i, flag in enumerate(flags, start=1):
        tp_cum += bool(flag)
        recalls.append(tp_cum / num_gt)
        precisions.append(tp_cum / i)
    envelope = precisions.copy()
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    # Every TP advances recall by exactly 1/num_gt, so the area under the
    # envelope is the mean envelope precision at the TP positions.
    ap = sum(p for flag, p in zip(flags, envelope) if flag) / num_gt
    return PrCurve(recalls=tuple(recalls), precisions=tuple(precisions), ap=ap)


def mean_ap(per_class_aps) -> float:
    """Unweighted mean over evaluable classes (those with ground truth)."""
    values = list(per_class_aps)
    if not values:
        raise NoEvaluableClasses("no class has ground-truth instances")
    return sum(values) / len(values)


def evaluate_detections(
    dets: list[Detection], gts, iou_threshold: float = 0.5
) -> dict:
    """Per-class PR curves and mAP. Classes without ground truth are skipped."""
    class_ids = sorted({gt.category_id for gt in gts})
    per_class: dict[int, PrCurve] = {}
    for cid in class_ids:
        class_dets = [d for d in dets if d.category_id == cid]
        class_gts = [g for g in gts if g.category_id == cid]
        result = match_detections(class_dets, class_gts, iou_threshold)
        per_class[cid] = average_precision(result.tp, num_gt=len(class_gts))
    return {
        "per_class": per_class,
        "map": mean_ap([c.ap for c in per_class.values()]),
        "iou_threshold": iou_threshold,
    }


def robustness_mae(base_perf: float, levels) -> RobustnessProfile:
    """Mean absolute gap to the no-noise reference across noise levels."""
    pairs = [(float(l), float(p)) for l, p in levels]
    if not pairs:
        raise EmptyLevels("need at least one (level, perf) pair")
    mae = sum(abs(base_perf - p) for _, p in pairs) / len(pairs)
    return RobustnessProfile(base_perf=float(base_perf), levels=tuple(pairs), mae=mae)


@dataclass(frozen=True)
class CorrectionReport:
    mean_iou_noisy: float
    mean_iou_corrected: float
    median_iou_noisy: float
    median_iou_corrected: float
    acceptance_rate: float
    reject_reasons: dict
    per_class: dict

    def to_json_dict(self) -> dict:
        return {
            "mean_iou_noisy": self.mean_iou_noisy,
            "mean_iou_corrected": self.mean_iou_corrected,
            "median_iou_noisy": self.median_iou_noisy,
            "median_iou_corrected": self.median_iou_corrected,
            "acceptance_rate": self.acceptance_rate,
            "reject_reasons": dict(self.reject_reasons),
            "per_class": {str(k): dict(v) for k, v in self.per_class.items()},
        }

    def to_csv_rows(self) -> list[list]:
        rows = [["class", "count", "mean_iou_noisy", "mean_iou_corrected"]]
        for name, stats in self.per_class.items():
            rows.append(
                [name, stats["count"], stats["mean_iou_noisy"], stats["mean_iou_corrected"]]
            )
        rows.append(
            ["__all__", sum(s["count"] for s in self.per_class.values()),
             self.mean_iou_noisy, self.mean_iou_corrected]
        )
        return rows


def correction_report(
    noisy: Dataset, corrected: Dataset, truth: Dataset, records
) -> CorrectionReport:
    """Quantify a correction run against ground truth."""
    noisy_by_id = {a.id: a for a in noisy.annotations}
    corr_by_id = {a.id: a for a in corrected.annotations}
    truth_by_id = {a.id: a for a in truth.annotations}
    if not (set(noisy_by_id) == set(corr_by_id) == set(truth_by_id)):
        raise CorrespondenceError("noisy, corrected and truth annotation ids differ")

    names = {c.id: c.name for c in truth.categories}
    noisy_ious, corrected_ious = [], []
    per_class: dict[str, dict] = {}
    for ann_id, truth_ann in truth_by_id.items():
        i_noisy = iou(noisy_by_id[ann_id].box, truth_ann.box)
        i_corr = iou(corr_by_id[ann_id].box, truth_ann.box)
        noisy_ious.append(i_noisy)
        corrected_ious.append(i_corr)
        cls = names.get(truth_ann.category_id, str(truth_ann.category_id))
        stats = per_class.setdefault(
            cls, {"count": 0, "sum_noisy": 0.0, "sum_corrected": 0.0}
        )
        stats["count"] += 1
        stats["sum_noisy"] += i_noisy
        stats["sum_corrected"] += i_corr

    for stats in per_class.values():
        stats["mean_iou_noisy"] = stats.pop("sum_noisy") / stats["count"]
        stats["mean_iou_corrected"] = stats.pop("sum_corrected") / stats["count"]

    reasons: dict[str, int] = {}
    accepted = 0
    for r in records:
        if r.accepted:
            accepted += 1
        else:
            reasons[r.reject_reason or "unknown"] = reasons.get(r.reject_reason or "unknown", 0) + 1

    n = len(truth_by_id)
    return CorrectionReport(
        mean_iou_noisy=sum(noisy_ious) / n,
        mean_iou_corrected=sum(corrected_ious) / n,
        median_iou_noisy=median(noisy_ious),
        median_iou_corrected=median(corrected_ious),
        acceptance_rate=accepted / len(records) if records else 0.0,
        reject_reasons=reasons,
        per_class=dict(sorted(per_class.items())),
    )


def dataset_as_detections(d: Dataset, confidence: float = 1.0) -> list[Detection]:
    """Treat annotations as detections, e.g. to score corrections with mAP."""
    return [
        Detection(image_id=a.image_id, category_id=a.category_id, box=a.box, confidence=confidence)
        for a in d.annotations
    ]


def load_detections(path) -> list[Detection]:
    """Read COCO-results-style detections: bbox is top-left [x, y, w, h]."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(raw, list):
        raise SchemaError("detections file must be a JSON list")
    dets = []
    for entry in raw:
        if not isinstance(entry, dict) or not {"image_id", "category_id", "bbox", "score"} <= set(entry):
            raise SchemaError(f"bad detection entry: {entry!r}")
        x, y, w, h = entry["bbox"]
        dets.append(
            Detection(
                image_id=entry["image_id"],
                category_id=entry["category_id"],
                box=Box(cx=x + w / 2, cy=y + h / 2, w=w, h=h),
                confidence=float(entry["score"]),
            )
        )
    return dets
