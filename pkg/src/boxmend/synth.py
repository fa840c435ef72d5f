"""Deterministic synthetic scenes and oracle providers.

Scenes are flat-colored geometric shapes (circle, rectangle, triangle) with
exact instance masks, so the full correction pipeline is testable without
neural models. The segmentation oracle works off the instance map, never
the rendered pixels; its score for a candidate is the candidate's IoU
against the true instance mask, and the label oracle scores masks by the
fraction of their pixels lying on instances of the queried class.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Annotation, Category, Dataset, ImageRecord
from .exceptions import PlacementFailure, ProviderError, UnknownClass
from .geometry import ImageDims, Mask, iou, mask_iou, mask_to_box, rle_decode, rle_encode
from .protocol import (
    MaskResult,
    Prompt,
    Provider,
    ScoreRequest,
    ScoreResponse,
    SegmentRequest,
    SegmentResponse,
)

SHAPE_KINDS = ("circle", "rectangle", "triangle")

_MIN_PIXELS = 4
_MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SceneSpec:
    dims: ImageDims
    num_objects: int
    shape_classes: tuple[Category, ...]
    min_size: float
    max_size: float
    allow_overlap: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape_classes", tuple(self.shape_classes))
        if self.num_objects < 1:
            raise ValueError("num_objects must be >= 1")
        if not self.shape_classes:
            raise ValueError("need at least one shape class")
        for c in self.shape_classes:
            if c.name not in SHAPE_KINDS:
                raise ValueError(f"unsupported shape class {c.name!r}, pick from {SHAPE_KINDS}")
        if not (0 < self.min_size <= self.max_size <= min(self.dims.width, self.dims.height)):
            raise ValueError("need 0 < min_size <= max_size <= min(dims)")


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    record: ImageRecord
    categories: tuple[Category, ...]
    annotations: tuple[Annotation, ...]
    instance_map: np.ndarray  # (H, W) int32; 0 = background, i = annotations[i-1]


@dataclass(frozen=True)
class OracleFidelity:
    """Controls how closely the oracle imitates a flawless segmenter.

    boundary_jitter > 0 dilates/erodes candidates by up to that many pixels;
    part_mask_prob / background_leak_prob mix in the classic failure modes of
    cutting an object in half or bleeding into the background.
    """

    boundary_jitter: float = 0.0
    part_mask_prob: float = 0.0
    background_leak_prob: float = 0.0
    candidates_per_prompt: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.part_mask_prob <= 1 and 0 <= self.background_leak_prob <= 1):
            raise ValueError("probabilities must be in [0, 1]")
        if self.boundary_jitter < 0 or self.candidates_per_prompt < 1:
            raise ValueError("jitter must be >= 0 and candidates_per_prompt >= 1")


def _pixel_grid(dims: ImageDims):
    ys = np.arange(dims.height) + 0.5
    xs = np.arange(dims.width) + 0.5
    return np.meshgrid(xs, ys)


def _raster_circle(gx, gy, cx, cy, radius):
    return (gx - cx) ** 2 + (gy - cy) ** 2 <= radius**2


def _raster_rectangle(gx, gy, cx, cy, w, h):
    return (np.abs(gx - cx) <= w / 2) & (np.abs(gy - cy) <= h / 2)


def _raster_triangle(gx, gy, verts):
    (x0, y0), (x1, y1), (x2, y2) = verts
    d0 = (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0)
    d1 = (x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)
    d2 = (x0 - x2) * (gy - y2) - (y0 - y2) * (gx - x2)
    neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(neg & pos)


def _instance_color(index: int) -> tuple[int, int, int]:
    # Golden-angle hue stepping keeps neighboring instances far apart.
    hue = (index * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def generate_scene(spec: SceneSpec, image_id: int = 1, file_name: str | None = None) -> Scene:
    """Place shapes one by one; deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    gx, gy = _pixel_grid(dims)
    instance_map = np.zeros((dims.height, dims.width), dtype=np.int32)
    chosen: list[Category] = []

    for obj_index in range(spec.num_objects):
        placed = False
        for _ in range(_MAX_PLACEMENT_TRIES):
            category = spec.shape_classes[int(rng.integers(len(spec.shape_classes)))]
            size = float(rng.uniform(spec.min_size, spec.max_size))
            margin = size / 2
            cx = float(rng.uniform(margin, dims.width - margin))
            cy = float(rng.uniform(margin, dims.height - margin))
            if category.name == "circle":
                raster = _raster_circle(gx, gy, cx, cy, size / 2)
            elif category.name == "rectangle":
                w = size
                h = float(rng.uniform(spec.min_size, spec.max_size))
                h = min(h, dims.height)
                cy = float(rng.uniform(h / 2, dims.height - h / 2))
                raster = _raster_rectangle(gx, gy, cx, cy, w, h)
            else:
                # Vertices on the bounding circle with well-separated angles,
                # so triangles stay fat enough to survive boundary jitter.
                half = size / 2
                gaps = rng.uniform(0.8, 1.4, size=3)
                angles = rng.uniform(0, 2 * np.pi) + np.cumsum(gaps / gaps.sum()) * 2 * np.pi
                verts = [
                    (cx + half * np.cos(a), cy + half * np.sin(a)) for a in angles
                ]
                raster = _raster_triangle(gx, gy, verts)
            if int(raster.sum()) < _MIN_PIXELS:
                continue
            if not spec.allow_overlap and (raster & (instance_map > 0)).any():
                continue
            if spec.allow_overlap:
                covered = np.unique(instance_map[raster])
                hidden = [
                    i
                    for i in covered
                    if i > 0 and not ((instance_map == i) & ~raster).any()
                ]
                if hidden:
                    continue
            instance_map[raster] = obj_index + 1
            chosen.append(category)
            placed = True
            break
        if not placed:
            raise PlacementFailure(
                f"could not place object {obj_index + 1}/{spec.num_objects} "
                f"in {dims.width}x{dims.height} after {_MAX_PLACEMENT_TRIES} tries"
            )

    image = np.full((dims.height, dims.width, 3), 40, dtype=np.uint8)
    annotations = []
    for i, category in enumerate(chosen, start=1):
        pixels = instance_map == i
        image[pixels] = _instance_color(i)
        mask = Mask(pixels)
        annotations.append(
            Annotation(
                id=i,
                image_id=image_id,
                category_id=category.id,
                box=mask_to_box(mask),
                mask=mask,
            )
        )

    record = ImageRecord(
        id=image_id,
        file_path=file_name if file_name is not None else f"{image_id:06d}.png",
        dims=dims,
    )
    return Scene(
        image=image,
        record=record,
        categories=spec.shape_classes,
        annotations=tuple(annotations),
        instance_map=instance_map,
    )


def generate_scenes(spec: SceneSpec, count: int) -> list[Scene]:
    """Generate ``count`` scenes with per-scene seeds derived from spec.seed."""
    scenes = []
    for i in range(count):
        child_seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        scenes.append(
            generate_scene(replace(spec, seed=child_seed), image_id=i + 1, file_name=f"{i:06d}.png")
        )
    return scenes


def scenes_to_dataset(scenes: list[Scene], provenance: dict | None = None) -> Dataset:
    """Merge scenes into one dataset with globally unique annotation ids."""
    categories = scenes[0].categories if scenes else ()
    images, annotations = [], []
    next_id = 1
    for scene in scenes:
        if scene.categories != categories:
            raise ValueError("all scenes must share one taxonomy")
        images.append(scene.record)
        for ann in scene.annotations:
            annotations.append(replace(ann, id=next_id, image_id=scene.record.id))
            next_id += 1
    prov = dict(provenance or {})
    prov.setdefault("stage", "synthetic")
    return Dataset(
        images=tuple(images),
        categories=tuple(categories),
        annotations=tuple(annotations),
        provenance=prov,
    )


def scene_from_annotations(
    record: ImageRecord, categories, annotations
) -> Scene:
    """Rebuild a Scene from ground-truth annotations that carry masks."""
    anns = sorted(annotations, key=lambda a: a.id)
    instance_map = np.zeros((record.dims.height, record.dims.width), dtype=np.int32)
    for i, a in enumerate(anns, start=1):
        if a.mask is None:
            raise ValueError(f"annotation {a.id} has no mask; oracle needs ground truth masks")
        instance_map[a.mask.data] = i
    image = np.zeros((record.dims.height, record.dims.width, 3), dtype=np.uint8)
    return Scene(
        image=image,
        record=record,
        categories=tuple(categories),
        annotations=tuple(anns),
        instance_map=instance_map,
    )


def scenes_from_dataset(d: Dataset) -> list[Scene]:
    by_image = {img.id: [] for img in d.images}
    for a in d.annotations:
        by_image[a.image_id].append(a)
    return [
        scene_from_annotations(img, d.categories, by_image[img.id]) for img in d.images
    ]


def _shift(mask: np.ndarray, di: int, dj: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src_i = slice(max(0, -di), min(h, h - di))
    dst_i = slice(max(0, di), min(h, h + di))
    src_j = slice(max(0, -dj), min(w, w - dj))
    dst_j = slice(max(0, dj), min(w, w + dj))
    out[dst_i, dst_j] = mask[src_i, src_j]
    return out


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask
    for _ in range(steps):
        out = (
            out
            | _shift(out, 1, 0)
            | _shift(out, -1, 0)
            | _shift(out, 0, 1)
            | _shift(out, 0, -1)
        )
    return out


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    """Erode but never to emptiness; backs off one step if needed."""
    out = mask
    for _ in range(steps):
        nxt = (
            out
            & _shift(out, 1, 0)
            & _shift(out, -1, 0)
            & _shift(out, 0, 1)
            & _shift(out, 0, -1)
        )
        if not nxt.any():
            break
        out = nxt
    return out


def _target_instance(scene: Scene, prompt: Prompt) -> int:
    """Instance id hit by a prompt; 0 means background."""
    if prompt.kind == "point":
        j = min(max(int(np.floor(prompt.point.x)), 0), scene.record.dims.width - 1)
        i = min(max(int(np.floor(prompt.point.y)), 0), scene.record.dims.height - 1)
        return int(scene.instance_map[i, j])
    best, best_iou = 0, 0.0
    for idx, ann in enumerate(scene.annotations, start=1):
        v = iou(prompt.box, ann.box)
        if v > best_iou:
            best, best_iou = idx, v
    return best


def _background_blob(scene: Scene, prompt: Prompt, rng, k: int) -> np.ndarray:
    dims = scene.record.dims
    if prompt.kind == "point":
        ax, ay = prompt.point.x, prompt.point.y
        base = 3.0
    else:
        ax, ay = prompt.box.cx, prompt.box.cy
        base = max(2.0, min(prompt.box.w, prompt.box.h) / 4)
    ax = min(max(ax, 0.5), dims.width - 0.5)
    ay = min(max(ay, 0.5), dims.height - 0.5)
    gx, gy = _pixel_grid(dims)
    radius = base * (1.0 + 0.35 * k) + float(rng.uniform(0, 1))
    disk = _raster_circle(gx, gy, ax, ay, radius)
    blob = disk & (scene.instance_map == 0)
    return blob if blob.any() else disk


def _part_mask(truth: np.ndarray, rng) -> np.ndarray:
    rows = np.flatnonzero(truth.any(axis=1))
    cols = np.flatnonzero(truth.any(axis=0))
    out = truth.copy()
    if rng.random() < 0.5:
        mid = (rows[0] + rows[-1] + 1) // 2
        if rng.random() < 0.5:
            out[mid:, :] = False
        else:
            out[:mid, :] = False
    else:
        mid = (cols[0] + cols[-1] + 1) // 2
        if rng.random() < 0.5:
            out[:, mid:] = False
        else:
            out[:, :mid] = False
    return out if out.any() else truth


def oracle_segment(
    scene: Scene, prompts: list[Prompt], fidelity: OracleFidelity
) -> list[list[tuple[Mask, float]]]:
    """Answer prompts from ground truth, degraded according to fidelity.

    Every prompt yields exactly fidelity.candidates_per_prompt candidates.
    Scores are each candidate's IoU against the true instance mask, so at
    perfect fidelity the first candidate is exact with score 1.0. Prompts
    that hit only background yield background blobs scored 0.
    """
    jitter_steps = int(round(fidelity.boundary_jitter))
    results = []
    for p_idx, prompt in enumerate(prompts):
        rng = np.random.default_rng(
            [fidelity.seed & 0xFFFFFFFF, scene.record.id & 0xFFFFFFFF, p_idx]
        )
        target = _target_instance(scene, prompt)
        candidates: list[tuple[Mask, float]] = []
        if target == 0:
            for k in range(fidelity.candidates_per_prompt):
                candidates.append((Mask(_background_blob(scene, prompt, rng, k)), 0.0))
            results.append(candidates)
            continue
        truth = scene.instance_map == target
        truth_mask = Mask(truth)
        for k in range(fidelity.candidates_per_prompt):
            if k == 0:
                kind = "jitter"
            else:
                u = rng.random()
                if u < fidelity.part_mask_prob:
                    kind = "part"
                elif u < fidelity.part_mask_prob + fidelity.background_leak_prob:
                    kind = "leak"
                else:
                    kind = "jitter"
            if kind == "part":
                cand = _part_mask(truth, rng)
            elif kind == "leak":
                spill = _dilate(truth, max(2, 2 * jitter_steps))
                cand = truth | (spill & (scene.instance_map == 0))
            else:
                if jitter_steps == 0:
                    cand = truth
                else:
                    amount = int(rng.integers(1, jitter_steps + 1))
                    if rng.random() < 0.5:
                        cand = _dilate(truth, amount)
                    else:
                        cand = _erode(truth, amount)
            mask = Mask(cand)
            candidates.append((mask, mask_iou(mask, truth_mask)))
        results.append(candidates)
    return results


def oracle_label_score(
    scene: Scene, candidate_masks: list[Mask], class_name: str, temperature: float = 0.1
) -> list[float]:
    """Softmax-normalized class affinity of each candidate mask.

    Raw affinity is the fraction of a mask's set pixels that lie on an
    instance of the queried class; the softmax over affinity/temperature
    mirrors how a vision-language scorer sharpens cosine similarities.
    """
    if class_name not in {c.name for c in scene.categories}:
        raise UnknownClass(f"class {class_name!r} not in scene taxonomy")
    class_cat_ids = {c.id for c in scene.categories if c.name == class_name}
    ids = [
        i
        for i, ann in enumerate(scene.annotations, start=1)
        if ann.category_id in class_cat_ids
    ]
    class_pixels = np.isin(scene.instance_map, ids) if ids else np.zeros_like(
        scene.instance_map, dtype=bool
    )
    affinities = []
    for m in candidate_masks:
        total = m.count()
        if total == 0:
            affinities.append(0.0)
        else:
            affinities.append(int((m.data & class_pixels).sum()) / total)
    logits = np.asarray(affinities) / temperature
    logits -= logits.max()
    weights = np.exp(logits)
    return list(weights / weights.sum())


class OracleProvider(Provider):
    """In-process provider backed by scene ground truth."""

    def __init__(self, scenes, fidelity: OracleFidelity = OracleFidelity()):
        if isinstance(scenes, dict):
            self._scenes = dict(scenes)
        else:
            self._scenes = {s.record.file_path: s for s in scenes}
        self._by_basename = {
            ref.replace("\\", "/").rsplit("/", 1)[-1]: s for ref, s in self._scenes.items()
        }
        self.fidelity = fidelity

    def _scene(self, image_ref: str) -> Scene:
        scene = self._scenes.get(image_ref)
        if scene is None:
            scene = self._by_basename.get(image_ref.replace("\\", "/").rsplit("/", 1)[-1])
        if scene is None:
            raise ProviderError(f"unknown image_ref {image_ref!r}")
        return scene

    def segment(self, req: SegmentRequest) -> SegmentResponse:
        scene = self._scene(req.image_ref)
        fidelity = replace(self.fidelity, candidates_per_prompt=req.candidates_per_prompt)
        raw = oracle_segment(scene, list(req.prompts), fidelity)
        results = tuple(
            tuple(MaskResult(mask=rle_encode(m), score=float(s)) for m, s in group)
            for group in raw
        )
        return SegmentResponse(id=req.id, results=results)

    def score(self, req: ScoreRequest) -> ScoreResponse:
        scene = self._scene(req.image_ref)
        masks = [rle_decode(r) for r in req.masks]
        scores = oracle_label_score(scene, masks, req.class_name)
        return ScoreResponse(id=req.id, scores=tuple(scores))
