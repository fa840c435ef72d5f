"""Segmentation/scoring backends behind the wire protocol.

SamClipBackend is the production path: Segment Anything answers the
segment op, CLIP rates masked crops for the score op. RegionBackend is a
deterministic color-region heuristic with no model dependencies; it exists
so the protocol surface can be exercised and smoke-tested on machines
without checkpoints. Its label scores are structurally valid (softmaxed,
deterministic) but carry no real class semantics.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .images import masked_crop, softmax

TOLERANCES = (25.0, 45.0, 70.0)


class Backend:
    """Answers decoded segment/score requests with numpy masks."""

    def load(self) -> None:
        """Acquire models/resources; called once before the handshake."""

    def segment(self, image: np.ndarray, prompts: list[dict], k: int):
        """Per prompt, exactly k (mask, score) pairs with scores in [0, 1]."""
        raise NotImplementedError

    def score(self, image: np.ndarray, masks: list[np.ndarray], class_name: str):
        """Softmax-normalized affinity of each mask for the class name."""
        raise NotImplementedError


def _connected_component(candidate: np.ndarray, seed_mask: np.ndarray) -> np.ndarray:
    """Grow seed pixels through the candidate mask, 4-connected."""
    region = candidate & seed_mask
    if not region.any():
        return region
    while True:
        grown = region.copy()
        grown[1:, :] |= region[:-1, :]
        grown[:-1, :] |= region[1:, :]
        grown[:, 1:] |= region[:, :-1]
        grown[:, :-1] |= region[:, 1:]
        grown &= candidate
        if np.array_equal(grown, region):
            return region
        region = grown


class RegionBackend(Backend):
    """Color-similarity region growing; deterministic, dependency-free."""

    def segment(self, image: np.ndarray, prompts: list[dict], k: int):
        h, w = image.shape[:2]
        rgb = image.astype(np.float64)
        results = []
        for prompt in prompts:
            if prompt["kind"] == "box":
                x1, y1, x2, y2 = prompt["box"]
                c0, c1 = max(0, int(x1)), min(w, max(int(x2), int(x1) + 1))
                r0, r1 = max(0, int(y1)), min(h, max(int(y2), int(y1) + 1))
                c0, r0 = min(c0, w - 1), min(r0, h - 1)
                patch = rgb[r0:max(r1, r0 + 1), c0:max(c1, c0 + 1)]
                reference = np.median(patch.reshape(-1, 3), axis=0)
                seed = np.zeros((h, w), dtype=bool)
                seed[r0:max(r1, r0 + 1), c0:max(c1, c0 + 1)] = True
                anchor = (min(h - 1, (r0 + r1) // 2), min(w - 1, (c0 + c1) // 2))
            else:
                x, y = prompt["point"]
                j = min(max(int(x), 0), w - 1)
                i = min(max(int(y), 0), h - 1)
                reference = rgb[i, j]
                seed = np.zeros((h, w), dtype=bool)
                seed[i, j] = True
                anchor = (i, j)
            distance = np.linalg.norm(rgb - reference, axis=2)
            candidates = []
            for idx in range(k):
                tol = TOLERANCES[idx % len(TOLERANCES)] * (1.0 + idx // len(TOLERANCES))
                mask = _connected_component(distance <= tol, seed)
                if not mask.any():
                    mask = np.zeros((h, w), dtype=bool)
                    mask[
                        max(0, anchor[0] - 1) : anchor[0] + 2,
                        max(0, anchor[1] - 1) : anchor[1] + 2,
                    ] = True
                tightness = float(np.exp(-distance[mask].mean() / 64.0))
                candidates.append((mask, min(max(tightness, 0.0), 1.0)))
            results.append(candidates)
        return results

    def score(self, image: np.ndarray, masks: list[np.ndarray], class_name: str):
        # Hash the class name into a fixed color direction so scores are
        # deterministic and distinct per class; real semantics need CLIP.
        digest = hashlib.sha256(class_name.encode("utf-8")).digest()
        direction = np.frombuffer(digest[:3], dtype=np.uint8).astype(np.float64)
        direction = direction / (np.linalg.norm(direction) + 1e-9)
        affinities = []
        for mask in masks:
            crop = masked_crop(image, mask).reshape(-1, 3).astype(np.float64)
            mean = crop.mean(axis=0)
            mean = mean / (np.linalg.norm(mean) + 1e-9)
            affinities.append(float(mean @ direction))
        return softmax(affinities, temperature=0.2)


class SamClipBackend(Backend):
    """Real models: SAM for masks, CLIP for class affinity.

    Heavy imports happen in load() so machines without the model stack can
    still run the region backend. Determinism is not guaranteed here.
    """

    def __init__(
        self,
        sam_variant: str = "vit_b",
        sam_checkpoint: str | None = None,
        clip_model: str = "ViT-B-32",
        clip_pretrained: str = "openai",
        device: str = "cpu",
    ):
        self.sam_variant = sam_variant
        self.sam_checkpoint = sam_checkpoint
        self.clip_model_name = clip_model
        self.clip_pretrained = clip_pretrained
        self.device = device
        self._predictor = None
        self._clip = None
        self._preprocess = None
        self._tokenizer = None
        self._image_key = None

    def load(self) -> None:
        try:
            import torch  # noqa: F401
            from segment_anything import SamPredictor, sam_model_registry
            import open_clip
        except ImportError as e:
            raise RuntimeError(
                f"model stack unavailable ({e}); install boxmend-sidecar[models]"
            ) from e
        if not self.sam_checkpoint:
            raise RuntimeError("--sam-checkpoint is required for the sam-clip backend")
        sam = sam_model_registry[self.sam_variant](checkpoint=self.sam_checkpoint)
        sam.to(self.device)
        self._predictor = SamPredictor(sam)
        model, _, preprocess = open_clip.create_model_and_transforms(
            self.clip_model_name, pretrained=self.clip_pretrained, device=self.device
        )
        self._clip = model.eval()
        self._preprocess = preprocess
        self._tokenizer = open_clip.get_tokenizer(self.clip_model_name)

    def _set_image(self, image: np.ndarray):
        key = (image.shape, int(image[:: max(1, image.shape[0] // 8)].sum()))
        if key != self._image_key:
            self._predictor.set_image(image)
            self._image_key = key

    def segment(self, image: np.ndarray, prompts: list[dict], k: int):
        import numpy as np  # local alias keeps torch-free module import cheap

        self._set_image(image)
        results = []
        for prompt in prompts:
            if prompt["kind"] == "box":
                masks, scores, _ = self._predictor.predict(
                    box=np.asarray(prompt["box"], dtype=np.float32),
                    multimask_output=True,
                )
            else:
                masks, scores, _ = self._predictor.predict(
                    point_coords=np.asarray([prompt["point"]], dtype=np.float32),
                    point_labels=np.ones(1, dtype=np.int64),
                    multimask_output=True,
                )
            order = np.argsort(-scores)
            picked = [(masks[i].astype(bool), float(np.clip(scores[i], 0.0, 1.0))) for i in order]
            while len(picked) < k:
                picked.append(picked[0])
            results.append(picked[:k])
        return results

    def score(self, image: np.ndarray, masks: list[np.ndarray], class_name: str):
        import torch
        from PIL import Image

        crops = [
            self._preprocess(Image.fromarray(masked_crop(image, m))) for m in masks
        ]
        with torch.no_grad():
            image_features = self._clip.encode_image(
                torch.stack(crops).to(self.device)
            )
            text_features = self._clip.encode_text(
                self._tokenizer([class_name]).to(self.device)
            )
            image_features = image_features / image_features.norm(dim=-1, keepdim=True)
            text_features = text_features / text_features.norm(dim=-1, keepdim=True)
            sims = (image_features @ text_features.T).squeeze(1)
        return softmax([float(s) for s in sims])


def make_backend(name: str, **kwargs) -> Backend:
    if name == "region":
        return RegionBackend()
    if name == "sam-clip":
        return SamClipBackend(**kwargs)
    raise ValueError(f"unknown backend {name!r}")
