"""Foundation-model correction pipeline.

For each image: noisy boxes become box prompts plus centerpoint prompts,
two segment calls collect candidate masks, a label scorer rates each
candidate against the annotation's class name, scores are fused as
alpha*label + (1-alpha)*segmenter, the winning mask becomes the corrected
box, and corrections that drift below an IoU threshold against the noisy
box are discarded in favor of the original annotation.
"""
from __future__ import annotations

import itertools
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import Annotation, Dataset
from .exceptions import (
    ArityMismatch,
    EmptyCandidateSet,
    EmptyMask,
    ProtocolError,
    ProviderError,
)
from .geometry import Box, ImageDims, Mask, box_center, clip_box, iou, mask_to_box, rle_decode, rle_encode
from .protocol import Prompt, ScoreRequest, SegmentRequest, call_provider

REJECT_LOW_IOU = "low-iou"
REJECT_EMPTY_MASK = "empty-mask"
REJECT_PROVIDER_ERROR = "provider-error"

_SOURCE_ORDER = {"box": 0, "point": 1}


@dataclass(frozen=True)
class FmcConfig:
    alpha: float = 0.5
    lambda_iou: float = 0.05
    candidates_per_prompt: int = 3

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.lambda_iou <= 1.0):
            raise ValueError(f"lambda_iou must be in [0, 1], got {self.lambda_iou}")
        if self.candidates_per_prompt < 1:
            raise ValueError("candidates_per_prompt must be >= 1")


@dataclass
class Candidate:
    mask: Mask
    sam_score: float
    clip_score: float | None
    source: str  # "box" | "point"
    index: int


@dataclass
class CandidateSet:
    object_index: int
    candidates: list[Candidate] = field(default_factory=list)
    dropped_empty: int = 0


@dataclass(frozen=True)
class CorrectionRecord:
    annotation_id: int
    accepted: bool
    corrected_box: Box
    fused_score: float | None = None
    iou_noisy_corrected: float | None = None
    chosen_source: str | None = None
    chosen_index: int | None = None
    reject_reason: str | None = None


class IdSource:
    """Thread-safe request-id allocator, unique within one run."""

    def __init__(self, start: int = 1):
        self._counter = itertools.count(start)
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            return next(self._counter)


def build_prompts(boxes: list[Box]) -> tuple[list[Prompt], list[Prompt]]:
    """Corner-form box prompts and centerpoint prompts, in input order."""
    box_prompts = [Prompt.from_box(b) for b in boxes]
    point_prompts = [Prompt.from_point(box_center(b)) for b in boxes]
    return box_prompts, point_prompts


def gather_candidates(
    provider, image_ref: str, boxes: list[Box], cfg: FmcConfig, ids: IdSource | None = None
) -> list[CandidateSet]:
    """Collect candidates with exactly two segment calls (boxes, then points).

    Per object, box-prompt candidates precede point-prompt candidates.
    All-zero masks are dropped from the set but counted.
    """
    ids = ids or IdSource()
    box_prompts, point_prompts = build_prompts(boxes)
    k = cfg.candidates_per_prompt
    try:
        box_resp = call_provider(
            provider,
            SegmentRequest(
                id=ids.next(), image_ref=image_ref, prompts=tuple(box_prompts), candidates_per_prompt=k
            ),
        )
        point_resp = call_provider(
            provider,
            SegmentRequest(
                id=ids.next(), image_ref=image_ref, prompts=tuple(point_prompts), candidates_per_prompt=k
            ),
        )
    except (ProviderError, ProtocolError) as e:
        raise type(e)(f"segmenting {image_ref}: {e}") from e
    sets = []
    for j in range(len(boxes)):
        cs = CandidateSet(object_index=j)
        for source, resp in (("box", box_resp), ("point", point_resp)):
            for idx, result in enumerate(resp.results[j]):
                mask = rle_decode(result.mask)
                if mask.count() == 0:
                    cs.dropped_empty += 1
                    continue
                cs.candidates.append(
                    Candidate(
                        mask=mask,
                        sam_score=result.score,
                        clip_score=None,
                        source=source,
                        index=idx,
                    )
                )
        sets.append(cs)
    return sets


def score_candidates(
    provider, image_ref: str, cs: CandidateSet, class_name: str, ids: IdSource | None = None
) -> CandidateSet:
    """Attach label scores for every candidate of one object, in order."""
    if not cs.candidates:
        return cs
    ids = ids or IdSource()
    req = ScoreRequest(
        id=ids.next(),
        image_ref=image_ref,
        masks=tuple(rle_encode(c.mask) for c in cs.candidates),
        class_name=class_name,
    )
    resp = call_provider(provider, req)
    if len(resp.scores) != len(cs.candidates):
        raise ArityMismatch(
            f"{len(resp.scores)} label scores for {len(cs.candidates)} candidates"
        )
    for cand, score in zip(cs.candidates, resp.scores):
        cand.clip_score = score
    return cs


def fuse_and_select(cs: CandidateSet, alpha: float) -> tuple[Mask, float, str, int]:
    """Pick the argmax of alpha*clip + (1-alpha)*sam.

    Ties go to the lowest (source, index) with box prompts before point
    prompts, so selection is deterministic.
    """
    if not cs.candidates:
        raise EmptyCandidateSet(f"object {cs.object_index} has no candidates")
    ordered = sorted(
        cs.candidates, key=lambda c: (_SOURCE_ORDER[c.source], c.index)
    )
    best, best_fused = None, -float("inf")
    for cand in ordered:
        if cand.clip_score is None:
            raise ValueError("candidates must be scored before selection")
        fused = alpha * cand.clip_score + (1.0 - alpha) * cand.sam_score
        if fused > best_fused:
            best, best_fused = cand, fused
    return best.mask, best_fused, best.source, best.index


def filter_correction(
    noisy: Box,
    best_mask: Mask | None,
    cfg: FmcConfig,
    dims: ImageDims,
    *,
    annotation_id: int = 0,
    fused_score: float | None = None,
    chosen_source: str | None = None,
    chosen_index: int | None = None,
) -> CorrectionRecord:
    """Accept the mask-derived box only if it stayed near the noisy box."""
    try:
        if best_mask is None:
            raise EmptyMask("no mask selected")
        corrected = clip_box(mask_to_box(best_mask), dims)
    except EmptyMask:
        return CorrectionRecord(
            annotation_id=annotation_id,
            accepted=False,
            corrected_box=noisy,
            fused_score=fused_score,
            reject_reason=REJECT_EMPTY_MASK,
        )
    overlap = iou(noisy, corrected)
    if overlap >= cfg.lambda_iou:
        return CorrectionRecord(
            annotation_id=annotation_id,
            accepted=True,
            corrected_box=corrected,
            fused_score=fused_score,
            iou_noisy_corrected=overlap,
            chosen_source=chosen_source,
            chosen_index=chosen_index,
        )
    return CorrectionRecord(
        annotation_id=annotation_id,
        accepted=False,
        corrected_box=noisy,
        fused_score=fused_score,
        iou_noisy_corrected=overlap,
        chosen_source=chosen_source,
        chosen_index=chosen_index,
        reject_reason=REJECT_LOW_IOU,
    )


def _correct_image(
    provider,
    image_ref: str,
    dims: ImageDims,
    annotations: list[Annotation],
    class_names: dict[int, str],
    cfg: FmcConfig,
    ids: IdSource,
) -> list[CorrectionRecord]:
    boxes = [a.box for a in annotations]
    sets = gather_candidates(provider, image_ref, boxes, cfg, ids)
    records = []
    for ann, cs in zip(annotations, sets):
        if not cs.candidates:
            records.append(
                CorrectionRecord(
                    annotation_id=ann.id,
                    accepted=False,
                    corrected_box=ann.box,
                    reject_reason=REJECT_EMPTY_MASK,
                )
            )
            continue
        cs = score_candidates(provider, image_ref, cs, class_names[ann.category_id], ids)
        mask, fused, source, index = fuse_and_select(cs, cfg.alpha)
        records.append(
            filter_correction(
                ann.box,
                mask,
                cfg,
                dims,
                annotation_id=ann.id,
                fused_score=fused,
                chosen_source=source,
                chosen_index=index,
            )
        )
    return records


def correct_dataset(
    d: Dataset,
    provider,
    cfg: FmcConfig = FmcConfig(),
    *,
    image_root: str | None = None,
    jobs: int = 1,
    on_failure=None,
) -> tuple[Dataset, list[CorrectionRecord]]:
    """Run the correction pipeline over every annotated image.

    A provider failure marks that whole image's annotations as
    provider-error rejects (noisy boxes kept) and the run continues;
    ``on_failure(image_id, exception)`` is invoked for diagnostics.
    Output order and records are deterministic regardless of completion
    order; records cover every annotation.
    """
    class_names = {c.id: c.name for c in d.categories}
    by_image: dict[int, list[Annotation]] = {}
    for ann in d.annotations:
        by_image.setdefault(ann.image_id, []).append(ann)
    ids = IdSource()

    def task(img) -> dict[int, CorrectionRecord]:
        anns = by_image.get(img.id, [])
        if not anns:
            return {}
        ref = str(Path(image_root) / img.file_path) if image_root else img.file_path
        try:
            recs = _correct_image(provider, ref, img.dims, anns, class_names, cfg, ids)
        except (ProviderError, ProtocolError) as e:
            if on_failure is not None:
                on_failure(img.id, e)
            recs = [
                CorrectionRecord(
                    annotation_id=a.id,
                    accepted=False,
                    corrected_box=a.box,
                    reject_reason=REJECT_PROVIDER_ERROR,
                )
                for a in anns
            ]
        return {r.annotation_id: r for r in recs}

    record_by_id: dict[int, CorrectionRecord] = {}
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(task, d.images):
                record_by_id.update(result)
    else:
        for img in d.images:
            record_by_id.update(task(img))

    records = [record_by_id[a.id] for a in d.annotations]
    corrected = tuple(
        replace(a, box=record_by_id[a.id].corrected_box, mask=None) for a in d.annotations
    )
    provenance = dict(d.provenance)
    provenance.update(
        {"stage": "corrected", "alpha": cfg.alpha, "lambda_iou": cfg.lambda_iou}
    )
    out = Dataset(
        images=d.images,
        categories=d.categories,
        annotations=corrected,
        provenance=provenance,
    )
    return out, records


def provider_failures(records: list[CorrectionRecord]) -> int:
    return sum(1 for r in records if r.reject_reason == REJECT_PROVIDER_ERROR)


def records_to_json(records: list[CorrectionRecord]) -> list[dict]:
    return [
        {
            "annotation_id": r.annotation_id,
            "accepted": r.accepted,
            "corrected_box": [r.corrected_box.cx, r.corrected_box.cy, r.corrected_box.w, r.corrected_box.h],
            "fused_score": r.fused_score,
            "iou_noisy_corrected": r.iou_noisy_corrected,
            "chosen_source": r.chosen_source,
            "chosen_index": r.chosen_index,
            "reject_reason": r.reject_reason,
        }
        for r in records
    ]


def records_from_json(data: list[dict]) -> list[CorrectionRecord]:
    records = []
    for obj in data:
        cx, cy, w, h = obj["corrected_box"]
        records.append(
            CorrectionRecord(
                annotation_id=obj["annotation_id"],
                accepted=obj["accepted"],
                corrected_box=Box(cx, cy, w, h),
                fused_score=obj.get("fused_score"),
                iou_noisy_corrected=obj.get("iou_noisy_corrected"),
                chosen_source=obj.get("chosen_source"),
                chosen_index=obj.get("chosen_index"),
                reject_reason=obj.get("reject_reason"),
            )
        )
    return records


def save_records(records: list[CorrectionRecord], path) -> None:
    Path(path).write_text(json.dumps(records_to_json(records), separators=(",", ":")))


def load_records(path) -> list[CorrectionRecord]:
    return records_from_json(json.loads(Path(path).read_text()))
