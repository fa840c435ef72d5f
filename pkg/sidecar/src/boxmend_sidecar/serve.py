"""Request loop: stdin lines in, one response line per request out.

The handshake {"protocol": "boxmend/1"} is emitted only after the backend
finished loading, so a spawner that sees it can start sending immediately.
Every failure after that becomes an error line; only model-load failure
exits the process (nonzero).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import PROTOCOL_ID
from .backends import make_backend
from .images import load_image
from .rle import decode as rle_decode
from .rle import encode as rle_encode

_IMAGE_CACHE_LIMIT = 8


def _validate_prompts(raw) -> list[dict]:
    if not isinstance(raw, list):
        raise ValueError("prompts must be a list")
    prompts = []
    for p in raw:
        kind = p.get("kind") if isinstance(p, dict) else None
        if kind == "box":
            box = p.get("box")
            if "point" in p or not isinstance(box, list) or len(box) != 4:
                raise ValueError(f"bad box prompt: {p!r}")
            prompts.append({"kind": "box", "box": [float(v) for v in box]})
        elif kind == "point":
            point = p.get("point")
            if "box" in p or not isinstance(point, list) or len(point) != 2:
                raise ValueError(f"bad point prompt: {p!r}")
            prompts.append({"kind": "point", "point": [float(v) for v in point]})
        else:
            raise ValueError(f"unknown prompt kind in {p!r}")
    return prompts


class Server:
    def __init__(self, backend):
        self.backend = backend
        self._images: dict[str, object] = {}

    def _image(self, ref: str):
        if ref not in self._images:
            if len(self._images) >= _IMAGE_CACHE_LIMIT:
                self._images.pop(next(iter(self._images)))
            self._images[ref] = load_image(ref)
        return self._images[ref]

    def handle(self, obj: dict) -> dict:
        op = obj.get("op")
        if op == "segment":
            prompts = _validate_prompts(obj.get("prompts"))
            k = obj.get("candidates_per_prompt")
            if not isinstance(k, int) or k < 1:
                raise ValueError("candidates_per_prompt must be a positive int")
            image = self._image(str(obj.get("image_ref", "")))
            raw = self.backend.segment(image, prompts, k)
            if len(raw) != len(prompts) or any(len(group) != k for group in raw):
                raise ValueError("backend returned wrong candidate arity")
            return {
                "id": obj["id"],
                "results": [
                    [
                        {"mask": rle_encode(mask), "score": float(min(max(score, 0.0), 1.0))}
                        for mask, score in group
                    ]
                    for group in raw
                ],
            }
        if op == "score":
            masks_raw = obj.get("masks")
            class_name = obj.get("class_name")
            if not isinstance(masks_raw, list) or not isinstance(class_name, str):
                raise ValueError("score request needs masks list and class_name")
            image = self._image(str(obj.get("image_ref", "")))
            masks = [rle_decode(m) for m in masks_raw]
            scores = self.backend.score(image, masks, class_name)
            if len(scores) != len(masks):
                raise ValueError("backend returned wrong score arity")
            return {"id": obj["id"], "scores": [float(s) for s in scores]}
        raise ValueError(f"unknown op {op!r}")


def serve(backend, stdin, stdout) -> None:
    server = Server(backend)
    stdout.write((json.dumps({"protocol": PROTOCOL_ID}) + "\n").encode("utf-8"))
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        req_id = None
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), int):
                raise ValueError("request must be an object with an int id")
            req_id = obj["id"]
            payload = server.handle(obj)
        except Exception as e:  # noqa: BLE001 - any failure becomes an error line
            payload = {"id": req_id, "error": f"{type(e).__name__}: {e}"}
        stdout.write((json.dumps(payload, separators=(",", ":")) + "\n").encode("utf-8"))
        stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxmend-sidecar", description=__doc__)
    parser.add_argument(
        "--backend", default="sam-clip", choices=["sam-clip", "region"],
        help="sam-clip needs the [models] extra and a checkpoint; region is a no-model stub",
    )
    parser.add_argument("--sam-variant", default="vit_b")
    parser.add_argument("--sam-checkpoint")
    parser.add_argument("--clip-model", default="ViT-B-32")
    parser.add_argument("--clip-pretrained", default="openai")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.backend == "region":
        backend = make_backend("region")
    else:
        backend = make_backend(
            "sam-clip",
            sam_variant=args.sam_variant,
            sam_checkpoint=args.sam_checkpoint,
            clip_model=args.clip_model,
            clip_pretrained=args.clip_pretrained,
            device=args.device,
        )
    try:
        backend.load()
    except Exception as e:  # noqa: BLE001
        print(f"model load failed: {e}", file=sys.stderr)
        return 2
    serve(backend, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
