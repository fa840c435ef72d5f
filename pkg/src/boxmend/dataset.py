"""Internal dataset model plus COCO JSON loading, saving and validation.

COCO bbox entries are top-left [x, y, w, h]; internally every box lives in
center convention. Saving is deterministic: fixed key order, records sorted
by id, so equal datasets produce byte-identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import (
    DanglingReference,
    InvalidBox,
    IoError,
    ParseError,
    SchemaError,
)
from .geometry import Box, ImageDims, Mask, Rle, rle_decode, rle_encode


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_path: str
    dims: ImageDims


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    box: Box
    mask: Mask | None = None


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    categories: tuple[Category, ...] = ()
    annotations: tuple[Annotation, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def image_index(self) -> dict[int, ImageRecord]:
        return {img.id: img for img in self.images}

    def category_index(self) -> dict[int, Category]:
        return {cat.id: cat for cat in self.categories}

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]


def _require(cond: bool, message: str):
    if not cond:
        raise SchemaError(message)


def _as_number(value, message) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), message)
    return float(value)


def coco_from_dict(obj: dict) -> Dataset:
    """Build a Dataset from an already-parsed COCO dictionary."""
    _require(isinstance(obj, dict), "top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        _require(isinstance(obj.get(key), list), f"missing or non-list {key!r} key")

    categories = []
    for c in obj["categories"]:
        _require(isinstance(c, dict), "category entries must be objects")
        _require(isinstance(c.get("id"), int), "category id must be an int")
        _require(
            isinstance(c.get("name"), str) and c["name"], "category name must be a non-empty string"
        )
        categories.append(Category(id=c["id"], name=c["name"]))

    images = []
    for im in obj["images"]:
        _require(isinstance(im, dict), "image entries must be objects")
        _require(isinstance(im.get("id"), int), "image id must be an int")
        _require(isinstance(im.get("file_name"), str), "image file_name must be a string")
        _require(
            isinstance(im.get("width"), int) and isinstance(im.get("height"), int),
            "image width/height must be ints",
        )
        try:
            dims = ImageDims(im["width"], im["height"])
        except ValueError as e:
            raise SchemaError(str(e)) from e
        images.append(ImageRecord(id=im["id"], file_path=im["file_name"], dims=dims))

    image_ids = {im.id for im in images}
    category_ids = {c.id for c in categories}

    annotations = []
    for a in obj["annotations"]:
        _require(isinstance(a, dict), "annotation entries must be objects")
        _require(isinstance(a.get("id"), int), "annotation id must be an int")
        _require(isinstance(a.get("image_id"), int), "annotation image_id must be an int")
        _require(isinstance(a.get("category_id"), int), "annotation category_id must be an int")
        bbox = a.get("bbox")
        _require(
            isinstance(bbox, list) and len(bbox) == 4,
            f"annotation {a['id']}: bbox must be [x, y, w, h]",
        )
        x, y, w, h = (_as_number(v, f"annotation {a['id']}: bbox values must be numbers") for v in bbox)
        if w <= 0 or h <= 0:
            raise InvalidBox(f"annotation {a['id']}: bbox has w={w}, h={h}")
        if a["image_id"] not in image_ids:
            raise DanglingReference(f"annotation {a['id']}: unknown image_id {a['image_id']}")
        if a["category_id"] not in category_ids:
            raise DanglingReference(
                f"annotation {a['id']}: unknown category_id {a['category_id']}"
            )
        mask = None
        seg = a.get("segmentation")
        if seg is not None:
            _require(
                isinstance(seg, dict) and "counts" in seg and "size" in seg,
                f"annotation {a['id']}: segmentation must be uncompressed RLE",
            )
            mask = rle_decode(Rle.from_json(seg))
        annotations.append(
            Annotation(
                id=a["id"],
                image_id=a["image_id"],
                category_id=a["category_id"],
                box=Box(cx=x + w / 2, cy=y + h / 2, w=w, h=h),
                mask=mask,
            )
        )

    info = obj.get("info", {})
    provenance = {}
    if isinstance(info, dict) and isinstance(info.get("boxmend"), dict):
        provenance = info["boxmend"]

    return Dataset(
        images=tuple(images),
        categories=tuple(categories),
        annotations=tuple(annotations),
        provenance=provenance,
    )


def load_coco(path) -> Dataset:
    """Load a COCO JSON file into the internal model."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    return coco_from_dict(obj)


def coco_to_dict(d: Dataset) -> dict:
    """Render a Dataset as a COCO dictionary with deterministic ordering."""
    out = {
        "info": {"boxmend": d.provenance},
        "images": [
            {
                "id": im.id,
                "file_name": im.file_path,
                "width": im.dims.width,
                "height": im.dims.height,
            }
            for im in sorted(d.images, key=lambda im: im.id)
        ],
        "categories": [
            {"id": c.id, "name": c.name} for c in sorted(d.categories, key=lambda c: c.id)
        ],
        "annotations": [],
    }
    for a in sorted(d.annotations, key=lambda a: a.id):
        entry = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": [a.box.x1, a.box.y1, a.box.w, a.box.h],
            "area": a.box.w * a.box.h,
            "iscrowd": 0,
        }
        if a.mask is not None:
            entry["segmentation"] = rle_encode(a.mask).to_json()
        out["annotations"].append(entry)
    return out


def dumps_coco(d: Dataset) -> str:
    return json.dumps(coco_to_dict(d), separators=(",", ":"))


def save_coco(d: Dataset, path) -> None:
    """Write COCO JSON; equal datasets produce byte-identical files."""
    try:
        Path(path).write_text(dumps_coco(d), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


@dataclass(frozen=True)
class Violation:
    severity: str  # "error" | "warning"
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def errors(self) -> list[Violation]:
        return [v for v in self.violations if v.severity == "error"]

    @property
    def warnings(self) -> list[Violation]:
        return [v for v in self.violations if v.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json_dict(self) -> dict:
        return {
            "ok": self.ok,
            "errors": len(self.errors),
            "warnings": len(self.warnings),
            "violations": [
                {"severity": v.severity, "code": v.code, "message": v.message}
                for v in self.violations
            ],
        }


def _find_duplicates(ids) -> list[int]:
    seen, dups = set(), []
    for i in ids:
        if i in seen and i not in dups:
            dups.append(i)
        seen.add(i)
    return dups


def validate(d: Dataset) -> ValidationReport:
    """Report dangling references, duplicate ids and out-of-frame boxes.

    An empty report means the dataset is admissible for every pipeline.
    Out-of-frame boxes are warnings only: noise injection can legitimately
    produce them before clipping.
    """
    violations: list[Violation] = []

    for kind, ids in (
        ("image", [im.id for im in d.images]),
        ("category", [c.id for c in d.categories]),
        ("annotation", [a.id for a in d.annotations]),
    ):
        for dup in _find_duplicates(ids):
            violations.append(
                Violation("error", f"duplicate-{kind}-id", f"duplicate {kind} id {dup}")
            )

    image_index = d.image_index()
    category_ids = {c.id for c in d.categories}
    for c in d.categories:
        if not c.name:
            violations.append(
                Violation("error", "empty-category-name", f"category {c.id} has empty name")
            )
    for a in d.annotations:
        img = image_index.get(a.image_id)
        if img is None:
            violations.append(
                Violation(
                    "error",
                    "dangling-image-ref",
                    f"annotation {a.id} references missing image {a.image_id}",
                )
            )
        if a.category_id not in category_ids:
            violations.append(
                Violation(
                    "error",
                    "dangling-category-ref",
                    f"annotation {a.id} references missing category {a.category_id}",
                )
            )
        if img is not None:
            b = a.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > img.dims.width or b.y2 > img.dims.height:
                violations.append(
                    Violation(
                        "warning",
                        "out-of-frame-box",
                        f"annotation {a.id} box extends past image {img.id} bounds",
                    )
                )
        if a.mask is not None and img is not None:
            if (a.mask.height, a.mask.width) != (img.dims.height, img.dims.width):
                violations.append(
                    Violation(
                        "error",
                        "mask-dims-mismatch",
                        f"annotation {a.id} mask is {a.mask.width}x{a.mask.height}, "
                        f"image is {img.dims.width}x{img.dims.height}",
                    )
                )
    return ValidationReport(tuple(violations))
