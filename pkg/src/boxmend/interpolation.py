"""Instance interpolation: mix corrected and noisy boxes by a value gamma.

The interpolated box is gamma*corrected + (1-gamma)*noisy, coordinate-wise.
Gamma comes from a mixing policy: a constant, a heuristic reusing the fused
correction score, or a small trained network. Without a detector backbone
the network sees 12 geometric features of the box pair instead of ROI
features, and is supervised by a grid-search oracle for the IoU-optimal
mixing value.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .exceptions import (
    CorrespondenceError,
    GammaOutOfRange,
    InsufficientData,
    NonFiniteInput,
)
from .fmc import CorrectionRecord
from .geometry import Box, ImageDims, interpolate_boxes, iou

FEATURE_DIM = 12
HIDDEN = 32
GAMMA_GRID = [i / 100 for i in range(101)]


def box_pair_features(b_hat: Box, b: Box, dims: ImageDims) -> np.ndarray:
    """12 geometric features of a (corrected, noisy) box pair.

    Corner coordinates of both boxes normalized by the frame, their IoU,
    center distance over the image diagonal, and log width/height ratios.
    """
    w, h = float(dims.width), float(dims.height)
    diag = math.hypot(w, h)
    dist = math.hypot(b_hat.cx - b.cx, b_hat.cy - b.cy)
    feats = np.array(
        [
            b_hat.x1 / w,
            b_hat.y1 / h,
            b_hat.x2 / w,
            b_hat.y2 / h,
            b.x1 / w,
            b.y1 / h,
            b.x2 / w,
            b.y2 / h,
            iou(b_hat, b),
            dist / diag,
            math.log(b_hat.w / b.w),
            math.log(b_hat.h / b.h),
        ],
        dtype=np.float64,
    )
    return feats


@dataclass
class MlpParams:
    """Weights for the 12 -> 32 -> 32 -> 1 predictor (ReLU, sigmoid head)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    SHAPES = {
        "w1": (HIDDEN, FEATURE_DIM),
        "b1": (HIDDEN,),
        "w2": (HIDDEN, HIDDEN),
        "b2": (HIDDEN,),
        "w3": (1, HIDDEN),
        "b3": (1,),
    }

    def __post_init__(self):
        for name, shape in self.SHAPES.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in self.SHAPES
        )

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in self.SHAPES}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "MlpParams":
        return cls(**{name: np.array(obj[name]) for name in cls.SHAPES})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def init_params(seed: int) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(
        **{
            name: rng.uniform(-0.1, 0.1, size=shape)
            for name, shape in MlpParams.SHAPES.items()
        }
    )


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _forward_batch(params: MlpParams, feats: np.ndarray):
    # feats: (n, 12). Returns activations needed for backprop.
    z1 = feats @ params.w1.T + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.w2.T + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = (a2 @ params.w3.T + params.b3).ravel()
    y = _sigmoid(z3)
    return feats, z1, a1, z2, a2, y


def mlp_forward(params: MlpParams, features) -> float:
    """Deterministic forward pass; sigmoid keeps the output in (0, 1)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape != (FEATURE_DIM,):
        raise ValueError(f"expected {FEATURE_DIM} features, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise NonFiniteInput("feature vector contains NaN or infinity")
    *_, y = _forward_batch(params, feats[None, :])
    return float(y[0])


def mlp_loss(params: MlpParams, feats: np.ndarray, targets: np.ndarray) -> float:
    *_, y = _forward_batch(params, feats)
    return float(np.mean((y - targets) ** 2))


def mlp_grad(params: MlpParams, feats, targets) -> MlpParams:
    """Analytic gradient of mean squared error over the batch."""
    feats = np.asarray(feats, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, 12) array")
    n = feats.shape[0]
    x, z1, a1, z2, a2, y = _forward_batch(params, feats)
    dy = 2.0 * (y - targets) / n
    dz3 = dy * y * (1.0 - y)  # (n,)
    dw3 = dz3[None, :] @ a2  # (1, 32)
    db3 = np.array([dz3.sum()])
    da2 = np.outer(dz3, params.w3.ravel())
    dz2 = da2 * (z2 > 0)
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ params.w2
    dz1 = da1 * (z1 > 0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return MlpParams(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3)


def mlp_train(
    pairs,
    seed: int,
    *,
    learning_rate: float = 0.1,
    epochs: int = 500,
    min_pairs: int = 100,
) -> tuple[MlpParams, float]:
    """Full-batch gradient descent on (features, gamma*) pairs.

    Deterministic in seed; returns the trained parameters and final loss.
    The default step of 0.1 is the smallest round value at which 500
    full-batch epochs actually converge through the sigmoid head.
    """
    pairs = list(pairs)
    if len(pairs) < min_pairs:
        raise InsufficientData(f"need >= {min_pairs} training pairs, got {len(pairs)}")
    feats = np.asarray([p[0] for p in pairs], dtype=np.float64)
    targets = np.asarray([p[1] for p in pairs], dtype=np.float64)
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(targets))):
        raise NonFiniteInput("training pairs contain NaN or infinity")
    params = init_params(seed)
    for _ in range(epochs):
        grad = mlp_grad(params, feats, targets)
        for name in MlpParams.SHAPES:
            setattr(
                params, name, getattr(params, name) - learning_rate * getattr(grad, name)
            )
    return params, mlp_loss(params, feats, targets)


def gamma_oracle(b_hat: Box, b: Box, b_true: Box) -> float:
    """Grid-search the mixing value that maximizes IoU against the true box.

    Grid step 0.01; ties resolve to the smallest gamma.
    """
    best_gamma, best_iou = 0.0, -1.0
    for g in GAMMA_GRID:
        v = iou(interpolate_boxes(b_hat, b, g), b_true)
        if v > best_iou:
            best_gamma, best_iou = g, v
    return best_gamma


class MixingPolicy:
    """Maps a (corrected, noisy) box pair to a mixing value in [0, 1]."""

    name = "mixing"

    def gamma(
        self,
        b_hat: Box,
        b: Box,
        dims: ImageDims,
        record: CorrectionRecord | None = None,
    ) -> float:
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


class ConstantPolicy(MixingPolicy):
    def __init__(self, value: float):
        if not (0.0 <= value <= 1.0):
            raise GammaOutOfRange(f"constant gamma must be in [0, 1], got {value}")
        self.value = float(value)

    def gamma(self, b_hat, b, dims, record=None) -> float:
        return self.value

    def describe(self) -> str:
        return f"constant:{self.value}"


class HeuristicPolicy(MixingPolicy):
    """Trust the correction as much as its fused score says to."""

    def gamma(self, b_hat, b, dims, record=None) -> float:
        if record is None or record.fused_score is None:
            return 0.0
        return min(max(record.fused_score, 0.0), 1.0)

    def describe(self) -> str:
        return "heuristic"


class LearnedPolicy(MixingPolicy):
    def __init__(self, params: MlpParams):
        self.params = params

    def gamma(self, b_hat, b, dims, record=None) -> float:
        return mlp_forward(self.params, box_pair_features(b_hat, b, dims))

    def describe(self) -> str:
        return "learned"


def parse_policy(spec: str) -> MixingPolicy:
    """Parse 'constant:0.5', 'heuristic' or 'learned:params.json'."""
    if spec == "heuristic":
        return HeuristicPolicy()
    if spec.startswith("constant:"):
        return ConstantPolicy(float(spec.split(":", 1)[1]))
    if spec.startswith("learned:"):
        return LearnedPolicy(MlpParams.load(spec.split(":", 1)[1]))
    raise ValueError(f"unknown policy {spec!r}")


def apply_interpolation(
    corrected: Dataset,
    noisy: Dataset,
    records: list[CorrectionRecord],
    policy: MixingPolicy,
) -> Dataset:
    """Interpolate every (corrected, noisy) annotation pair by id.

    Rejected records have corrected == noisy, so any gamma leaves those
    boxes untouched. Per-annotation gamma values land in the provenance.
    """
    corr_by_id = {a.id: a for a in corrected.annotations}
    noisy_ids = [a.id for a in noisy.annotations]
    if set(corr_by_id) != set(noisy_ids) or len(corr_by_id) != len(noisy.annotations):
        raise CorrespondenceError("corrected and noisy annotation ids differ")
    record_by_id = {r.annotation_id: r for r in records}
    dims_by_image = {img.id: img.dims for img in noisy.images}

    gammas: dict[str, float] = {}
    out = []
    for ann in noisy.annotations:
        b_hat = corr_by_id[ann.id].box
        g = policy.gamma(b_hat, ann.box, dims_by_image[ann.image_id], record_by_id.get(ann.id))
        gammas[str(ann.id)] = g
        out.append(replace(ann, box=interpolate_boxes(b_hat, ann.box, g), mask=None))

    provenance = dict(noisy.provenance)
    provenance.update({"stage": "interpolated", "policy": policy.describe(), "gammas": gammas})
    return Dataset(
        images=noisy.images,
        categories=noisy.categories,
        annotations=tuple(out),
        provenance=provenance,
    )
