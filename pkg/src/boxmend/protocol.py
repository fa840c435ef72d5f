"""Mask-provider and label-scorer interfaces plus the NDJSON wire protocol.

Transport is one JSON object per line over the stdio of a spawned worker.
A worker announces itself with a handshake line {"protocol": "boxmend/1"}
after its models are loaded, then answers each request line with exactly
one response line carrying the same id. Masks always cross the wire as
uncompressed COCO RLE so any language can implement the other side.
"""
from __future__ import annotations

import base64
import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass

from .exceptions import (
    ArityMismatch,
    ChannelClosed,
    ProtocolError,
    ProviderError,
    ProviderTimeout,
)
from .geometry import Box, Point, Rle

PROTOCOL_ID = "boxmend/1"
DEFAULT_TIMEOUT = 120.0

# image_ref is a local file path, or an inline PNG when no shared
# filesystem exists between pipeline and worker.
INLINE_REF_PREFIX = "data:image/png;base64,"


def inline_image_ref(png_bytes: bytes) -> str:
    return INLINE_REF_PREFIX + base64.b64encode(png_bytes).decode("ascii")


def is_inline_ref(image_ref: str) -> bool:
    return image_ref.startswith(INLINE_REF_PREFIX)


def decode_inline_ref(image_ref: str) -> bytes:
    if not is_inline_ref(image_ref):
        raise ProtocolError("not an inline image reference")
    return base64.b64decode(image_ref[len(INLINE_REF_PREFIX):])


@dataclass(frozen=True)
class Prompt:
    kind: str  # "box" | "point"
    box: Box | None = None
    point: Point | None = None

    def __post_init__(self):
        if self.kind == "box":
            if self.box is None or self.point is not None:
                raise ValueError("box prompt must carry exactly a box")
        elif self.kind == "point":
            if self.point is None or self.box is not None:
                raise ValueError("point prompt must carry exactly a point")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")

    @classmethod
    def from_box(cls, box: Box) -> "Prompt":
        return cls(kind="box", box=box)

    @classmethod
    def from_point(cls, point: Point) -> "Prompt":
        return cls(kind="point", point=point)


@dataclass(frozen=True)
class SegmentRequest:
    id: int
    image_ref: str
    prompts: tuple[Prompt, ...]
    candidates_per_prompt: int


@dataclass(frozen=True)
class MaskResult:
    mask: Rle
    score: float


@dataclass(frozen=True)
class SegmentResponse:
    id: int
    results: tuple[tuple[MaskResult, ...], ...]


@dataclass(frozen=True)
class ScoreRequest:
    id: int
    image_ref: str
    masks: tuple[Rle, ...]
    class_name: str


@dataclass(frozen=True)
class ScoreResponse:
    id: int
    scores: tuple[float, ...]


Request = SegmentRequest | ScoreRequest
Response = SegmentResponse | ScoreResponse


def _prompt_to_json(p: Prompt) -> dict:
    if p.kind == "box":
        x1, y1, x2, y2 = p.box.corners()
        return {"kind": "box", "box": [x1, y1, x2, y2]}
    return {"kind": "point", "point": [p.point.x, p.point.y]}


def encode_request(req: Request) -> bytes:
    """Serialize a request to one compact NDJSON line."""
    if isinstance(req, SegmentRequest):
        obj = {
            "id": req.id,
            "op": "segment",
            "image_ref": req.image_ref,
            "prompts": [_prompt_to_json(p) for p in req.prompts],
            "candidates_per_prompt": req.candidates_per_prompt,
        }
    elif isinstance(req, ScoreRequest):
        obj = {
            "id": req.id,
            "op": "score",
            "image_ref": req.image_ref,
            "masks": [m.to_json() for m in req.masks],
            "class_name": req.class_name,
        }
    else:
        raise TypeError(f"not a request: {req!r}")
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def _parse_line(data: bytes | str) -> dict:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON line: {e}") from e
    if not isinstance(obj, dict):
        raise ProtocolError("wire message must be a JSON object")
    return obj


def decode_request(data: bytes | str) -> Request:
    """Parse a request line; rejects unknown op values."""
    obj = _parse_line(data)
    op = obj.get("op")
    if not isinstance(obj.get("id"), int):
        raise ProtocolError("request must carry an int id")
    if op == "segment":
        prompts = []
        raw = obj.get("prompts")
        if not isinstance(raw, list):
            raise ProtocolError("segment request needs a prompts list")
        for p in raw:
            kind = p.get("kind") if isinstance(p, dict) else None
            if kind == "box":
                vals = p.get("box")
                if "point" in p or not isinstance(vals, list) or len(vals) != 4:
                    raise ProtocolError(f"bad box prompt: {p!r}")
                prompts.append(Prompt.from_box(Box.from_corners(*map(float, vals))))
            elif kind == "point":
                vals = p.get("point")
                if "box" in p or not isinstance(vals, list) or len(vals) != 2:
                    raise ProtocolError(f"bad point prompt: {p!r}")
                prompts.append(Prompt.from_point(Point(float(vals[0]), float(vals[1]))))
            else:
                raise ProtocolError(f"unknown prompt kind in {p!r}")
        k = obj.get("candidates_per_prompt")
        if not isinstance(k, int) or k < 1:
            raise ProtocolError("candidates_per_prompt must be a positive int")
        return SegmentRequest(
            id=obj["id"],
            image_ref=str(obj.get("image_ref", "")),
            prompts=tuple(prompts),
            candidates_per_prompt=k,
        )
    if op == "score":
        raw = obj.get("masks")
        if not isinstance(raw, list) or not isinstance(obj.get("class_name"), str):
            raise ProtocolError("score request needs masks list and class_name")
        try:
            masks = tuple(Rle.from_json(m) for m in raw)
        except Exception as e:
            raise ProtocolError(f"bad RLE in score request: {e}") from e
        return ScoreRequest(
            id=obj["id"],
            image_ref=str(obj.get("image_ref", "")),
            masks=masks,
            class_name=obj["class_name"],
        )
    raise ProtocolError(f"unknown op {op!r}")


def encode_response(resp: Response) -> bytes:
    if isinstance(resp, SegmentResponse):
        obj = {
            "id": resp.id,
            "results": [
                [{"mask": r.mask.to_json(), "score": r.score} for r in group]
                for group in resp.results
            ],
        }
    elif isinstance(resp, ScoreResponse):
        obj = {"id": resp.id, "scores": list(resp.scores)}
    else:
        raise TypeError(f"not a response: {resp!r}")
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def encode_error(request_id, message: str) -> bytes:
    return (
        json.dumps({"id": request_id, "error": str(message)}, separators=(",", ":")) + "\n"
    ).encode("utf-8")


def decode_response(data: bytes | str, request: Request) -> Response:
    """Parse a response line, validating id echo and list arity."""
    obj = _parse_line(data)
    if "error" in obj:
        raise ProviderError(str(obj["error"]))
    if obj.get("id") != request.id:
        raise ProtocolError(f"response id {obj.get('id')!r} != request id {request.id}")
    if isinstance(request, SegmentRequest):
        raw = obj.get("results")
        if not isinstance(raw, list):
            raise ProtocolError("segment response needs a results list")
        if len(raw) != len(request.prompts):
            raise ArityMismatch(
                f"{len(raw)} result groups for {len(request.prompts)} prompts"
            )
        results = []
        for group in raw:
            if not isinstance(group, list):
                raise ProtocolError("each result group must be a list")
            if len(group) != request.candidates_per_prompt:
                raise ArityMismatch(
                    f"{len(group)} candidates, expected {request.candidates_per_prompt}"
                )
            parsed = []
            for item in group:
                if not isinstance(item, dict) or "mask" not in item or "score" not in item:
                    raise ProtocolError(f"bad candidate entry: {item!r}")
                score = item["score"]
                if not isinstance(score, (int, float)) or not (0.0 <= score <= 1.0):
                    raise ProtocolError(f"candidate score out of [0,1]: {score!r}")
                try:
                    rle = Rle.from_json(item["mask"])
                except Exception as e:
                    raise ProtocolError(f"bad RLE in response: {e}") from e
                parsed.append(MaskResult(mask=rle, score=float(score)))
            results.append(tuple(parsed))
        return SegmentResponse(id=request.id, results=tuple(results))
    raw = obj.get("scores")
    if not isinstance(raw, list) or not all(isinstance(s, (int, float)) for s in raw):
        raise ProtocolError("score response needs a numeric scores list")
    if len(raw) != len(request.masks):
        raise ArityMismatch(f"{len(raw)} scores for {len(request.masks)} masks")
    return ScoreResponse(id=request.id, scores=tuple(float(s) for s in raw))


class Provider:
    """In-process provider interface: segment and score."""

    def segment(self, req: SegmentRequest) -> SegmentResponse:
        raise NotImplementedError

    def score(self, req: ScoreRequest) -> ScoreResponse:
        raise NotImplementedError

    def close(self) -> None:
        pass


class WorkerChannel:
    """One worker subprocess speaking the NDJSON protocol over stdio.

    A single request may be in flight at a time; a pool of channels provides
    parallelism. The reader runs on a thread so per-request timeouts work on
    every platform.
    """

    def __init__(self, cmd, timeout: float = DEFAULT_TIMEOUT, handshake_timeout: float | None = None):
        argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._lines: queue.Queue = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as e:
            raise ChannelClosed(f"cannot spawn worker {argv!r}: {e}") from e
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        line = self._next_line(handshake_timeout or timeout)
        obj = _parse_line(line)
        if obj.get("protocol") != PROTOCOL_ID:
            self.close()
            raise ProtocolError(f"bad handshake: {obj!r}")

    def _read_loop(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _next_line(self, timeout: float) -> bytes:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            self.close()
            raise ProviderTimeout(f"no response within {timeout}s") from None
        if line is None:
            raise ChannelClosed("worker closed its output")
        return line

    def call(self, req: Request) -> Response:
        with self._lock:
            try:
                self._proc.stdin.write(encode_request(req))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise ChannelClosed(f"worker stdin closed: {e}") from e
            return decode_response(self._next_line(self.timeout), req)

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.kill()
            except OSError:
                pass
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        self._proc.wait()


class WorkerPool(Provider):
    """Fixed-size pool of worker channels, safe to call concurrently.

    Channels that die are replaced lazily so one crashed worker does not
    poison the rest of a run.
    """

    def __init__(self, cmd, size: int = 1, timeout: float = DEFAULT_TIMEOUT):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._cmd = cmd
        self._timeout = timeout
        self._idle: queue.Queue = queue.Queue()
        for _ in range(size):
            self._idle.put(None)  # lazily spawned slots

    def _checkout(self) -> WorkerChannel:
        slot = self._idle.get()
        if slot is None or not slot.alive:
            try:
                slot = WorkerChannel(self._cmd, timeout=self._timeout)
            except Exception:
                self._idle.put(None)  # never leak the pool slot
                raise
        return slot

    def _call(self, req: Request) -> Response:
        chan = self._checkout()
        try:
            resp = chan.call(req)
        except Exception:
            chan.close()
            self._idle.put(None)
            raise
        self._idle.put(chan)
        return resp

    def segment(self, req: SegmentRequest) -> SegmentResponse:
        return self._call(req)

    def score(self, req: ScoreRequest) -> ScoreResponse:
        return self._call(req)

    def close(self):
        while True:
            try:
                slot = self._idle.get_nowait()
            except queue.Empty:
                return
            if slot is not None:
                slot.close()


def call_provider(channel, req: Request) -> Response:
    """Issue one request against a worker channel or an in-process provider."""
    if isinstance(channel, WorkerChannel):
        return channel.call(req)
    if isinstance(req, SegmentRequest):
        return channel.segment(req)
    if isinstance(req, ScoreRequest):
        return channel.score(req)
    raise TypeError(f"not a request: {req!r}")


def serve_provider(provider: Provider, stdin, stdout) -> None:
    """Run a provider as a worker: handshake, then one response per line.

    Decode or handler failures become error lines tied to the request id
    when it can be recovered; the loop keeps serving until EOF.
    """
    stdout.write((json.dumps({"protocol": PROTOCOL_ID}) + "\n").encode("utf-8"))
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        req_id = None
        try:
            try:
                req_id = _parse_line(line).get("id")
            except ProtocolError:
                pass
            req = decode_request(line)
            resp = call_provider(provider, req)
            stdout.write(encode_response(resp))
        except Exception as e:  # noqa: BLE001 - every failure becomes an error line
            stdout.write(encode_error(req_id, f"{type(e).__name__}: {e}"))
        stdout.flush()
