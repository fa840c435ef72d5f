"""Single executable exposing every pipeline stage as a subcommand.

Every run emits a manifest (tool version, flags, seeds, SHA-256 digests of
inputs and outputs, duration) so sweeps over noise levels stay reproducible.
Flags can come from a JSON config file via --config; explicit flags win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 provider failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .dataset import load_coco, save_coco, validate
from .evaluation import (
    correction_report,
    dataset_as_detections,
    evaluate_detections,
    load_detections,
    robustness_mae,
)
from .exceptions import (
    BoxmendError,
    ChannelClosed,
    ProtocolError,
    ProviderError,
    ProviderTimeout,
)
from .fmc import FmcConfig, correct_dataset, load_records, provider_failures, save_records
from .geometry import ImageDims
from .interpolation import (
    LearnedPolicy,
    apply_interpolation,
    box_pair_features,
    gamma_oracle,
    mlp_train,
    parse_policy,
)
from .noise import NoiseConfig, inject
from .protocol import WorkerPool, serve_provider
from .synth import (
    OracleFidelity,
    OracleProvider,
    SceneSpec,
    generate_scenes,
    scenes_from_dataset,
    scenes_to_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3

WORKER_ENV = "BOXMEND_WORKER"

_SEED_FLAGS = ("seed", "oracle_seed", "train_seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ManifestWriter:
    """Collects inputs/outputs for one run and writes the manifest."""

    def __init__(self, subcommand: str, flags: dict, manifest_path):
        self.subcommand = subcommand
        self.flags = {k: v for k, v in flags.items() if k not in ("config", "manifest")}
        self.manifest_path = manifest_path
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.started = time.monotonic()

    def read(self, path):
        self.inputs.append(str(path))
        return path

    def wrote(self, path):
        self.outputs.append(str(path))
        return path

    def finish(self):
        if self.manifest_path is None:
            return
        manifest = {
            "tool_version": __version__,
            "subcommand": self.subcommand,
            "flags": self.flags,
            "seeds": {k: self.flags[k] for k in _SEED_FLAGS if self.flags.get(k) is not None},
            "inputs": {p: _sha256(p) for p in self.inputs if Path(p).is_file()},
            "outputs": {p: _sha256(p) for p in self.outputs if Path(p).is_file()},
            "duration_s": round(time.monotonic() - self.started, 6),
        }
        Path(self.manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object of flag values")
    return obj


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Resolve each flag: explicit CLI value, then config file, then default."""
    config = _load_config(getattr(args, "config", None))
    merged = {}
    for key, value in vars(args).items():
        if key in ("func", "config"):
            continue
        if value is not None:
            merged[key] = value
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = defaults.get(key)
    return merged


def _default_manifest(flags: dict, primary_out) -> str | None:
    if flags.get("manifest"):
        return flags["manifest"]
    if primary_out:
        return str(primary_out) + ".manifest.json"
    return None


def _fidelity(flags: dict) -> OracleFidelity:
    return OracleFidelity(
        boundary_jitter=flags.get("oracle_jitter") or 0.0,
        part_mask_prob=flags.get("oracle_part_prob") or 0.0,
        background_leak_prob=flags.get("oracle_leak_prob") or 0.0,
        seed=flags.get("oracle_seed") or 0,
    )


def _make_provider(flags: dict, truth=None):
    spec = flags["provider"]
    if spec == "oracle":
        if truth is None:
            truth_path = flags.get("truth")
            if not truth_path:
                raise UsageError("--provider oracle needs --truth (ground truth with masks)")
            truth = load_coco(truth_path)
        return OracleProvider(scenes_from_dataset(truth), _fidelity(flags))
    if spec == "worker" or spec.startswith("worker:"):
        cmd = spec.split(":", 1)[1] if ":" in spec else os.environ.get(WORKER_ENV)
        if not cmd:
            raise UsageError(
                f"--provider worker needs a command (worker:<cmd> or ${WORKER_ENV})"
            )
        return WorkerPool(cmd, size=flags.get("jobs") or 1, timeout=flags.get("timeout") or 120.0)
    raise UsageError(f"unknown provider {spec!r}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- subcommands --------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    flags = _merge_config(args, {"count": 10})
    spec_obj = json.loads(Path(flags["spec"]).read_text())
    from .dataset import Category

    spec = SceneSpec(
        dims=ImageDims(spec_obj["width"], spec_obj["height"]),
        num_objects=spec_obj["num_objects"],
        shape_classes=tuple(
            Category(i + 1, name) for i, name in enumerate(spec_obj["shape_classes"])
        ),
        min_size=spec_obj["min_size"],
        max_size=spec_obj["max_size"],
        allow_overlap=spec_obj.get("allow_overlap", False),
        seed=spec_obj.get("seed", 0),
    )
    out_dir = Path(flags["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = out_dir / "dataset.json"
    writer = ManifestWriter("gen-synth", flags, _default_manifest(flags, dataset_path))
    writer.read(flags["spec"])

    from PIL import Image

    scenes = generate_scenes(spec, flags["count"])
    for scene in scenes:
        png_path = out_dir / scene.record.file_path
        Image.fromarray(scene.image).save(png_path)
        writer.wrote(png_path)
    truth = scenes_to_dataset(scenes, {"seed": spec.seed, "stage": "synthetic"})
    save_coco(truth, dataset_path)
    writer.wrote(dataset_path)
    writer.finish()
    print(f"wrote {len(scenes)} scenes and {dataset_path}")
    return EXIT_OK


def cmd_inject_noise(args) -> int:
    flags = _merge_config(args, {"level": 0.4, "seed": 0})
    writer = ManifestWriter("inject-noise", flags, _default_manifest(flags, flags["out"]))
    d = load_coco(writer.read(flags["in_path"]))
    noisy = inject(d, NoiseConfig(level=flags["level"], seed=flags["seed"]))
    save_coco(noisy, writer.wrote(flags["out"]))
    writer.finish()
    print(f"injected level={flags['level']} seed={flags['seed']} into {len(noisy.annotations)} boxes")
    return EXIT_OK


def cmd_correct(args) -> int:
    flags = _merge_config(
        args,
        {
            "alpha": 0.5,
            "lambda_iou": 0.05,
            "candidates": 3,
            "provider": "oracle",
            "jobs": os.cpu_count() or 1,
            "timeout": 120.0,
        },
    )
    writer = ManifestWriter("correct", flags, _default_manifest(flags, flags["out"]))
    noisy = load_coco(writer.read(flags["in_path"]))
    if flags.get("truth"):
        writer.read(flags["truth"])
    provider = _make_provider(flags)
    cfg = FmcConfig(
        alpha=flags["alpha"],
        lambda_iou=flags["lambda_iou"],
        candidates_per_prompt=flags["candidates"],
    )
    failures = []

    def on_failure(image_id, error):
        failures.append(image_id)
        print(f"image {image_id}: provider failure: {error}", file=sys.stderr)

    try:
        corrected, records = correct_dataset(
            noisy,
            provider,
            cfg,
            image_root=flags.get("images"),
            jobs=flags["jobs"],
            on_failure=on_failure,
        )
    finally:
        provider.close()
    save_coco(corrected, writer.wrote(flags["out"]))
    if flags.get("records"):
        save_records(records, writer.wrote(flags["records"]))
    writer.finish()
    accepted = sum(r.accepted for r in records)
    print(f"corrected {accepted}/{len(records)} annotations "
          f"({provider_failures(records)} provider failures)")
    return EXIT_PROVIDER if failures else EXIT_OK


def cmd_interpolate(args) -> int:
    flags = _merge_config(args, {"policy": "heuristic"})
    writer = ManifestWriter("interpolate", flags, _default_manifest(flags, flags["out"]))
    corrected = load_coco(writer.read(flags["corrected"]))
    noisy = load_coco(writer.read(flags["noisy"]))
    records = load_records(writer.read(flags["records"]))
    policy = parse_policy(flags["policy"])
    out = apply_interpolation(corrected, noisy, records, policy)
    save_coco(out, writer.wrote(flags["out"]))
    writer.finish()
    print(f"interpolated {len(out.annotations)} boxes with policy {policy.describe()}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    flags = _merge_config(args, {"iou": 0.5})
    writer = ManifestWriter("evaluate", flags, _default_manifest(flags, flags["out"]))
    dets = load_detections(writer.read(flags["dets"]))
    gts = load_coco(writer.read(flags["gts"]))
    result = evaluate_detections(dets, gts.annotations, iou_threshold=flags["iou"])
    payload = {
        "map": result["map"],
        "iou_threshold": result["iou_threshold"],
        "per_class": {
            str(cid): {"ap": curve.ap, "num_points": len(curve.recalls)}
            for cid, curve in result["per_class"].items()
        },
    }
    _write_json(writer.wrote(flags["out"]), payload)
    writer.finish()
    print(f"mAP@{flags['iou']}: {result['map']:.4f}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    import csv

    flags = _merge_config(args, {})
    writer = ManifestWriter("robustness", flags, _default_manifest(flags, flags["out"]))
    levels = []
    with open(writer.read(flags["perfs"]), newline="") as fh:
        for row in csv.DictReader(fh):
            levels.append((float(row["level"]), float(row["perf"])))
    profile = robustness_mae(flags["base"], levels)
    _write_json(writer.wrote(flags["out"]), profile.to_json_dict())
    if flags.get("plot_csv"):
        with open(writer.wrote(flags["plot_csv"]), "w", newline="") as fh:
            plot = csv.writer(fh)
            plot.writerow(["level", "perf", "abs_err"])
            for level, perf in profile.levels:
                plot.writerow([level, perf, abs(profile.base_perf - perf)])
    writer.finish()
    print(f"MAE vs base {profile.base_perf}: {profile.mae:.4f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    flags = _merge_config(args, {})
    writer = ManifestWriter("validate", flags, _default_manifest(flags, flags.get("out")))
    d = load_coco(writer.read(flags["in_path"]))
    report = validate(d)
    payload = report.to_json_dict()
    if flags.get("out"):
        _write_json(writer.wrote(flags["out"]), payload)
    else:
        print(json.dumps(payload, indent=2))
    writer.finish()
    if report.errors:
        print(f"{len(report.errors)} errors, {len(report.warnings)} warnings", file=sys.stderr)
        return EXIT_DATA
    print(f"ok ({len(report.warnings)} warnings)")
    return EXIT_OK


def _pipeline_policy(flags, truth, noisy, corrected, records):
    spec = flags["policy"]
    if spec != "fit":
        return parse_policy(spec)
    dims_by_image = {img.id: img.dims for img in noisy.images}
    truth_boxes = {a.id: a.box for a in truth.annotations}
    corr_by_id = {a.id: a.box for a in corrected.annotations}
    pairs = []
    for ann in noisy.annotations:
        b_hat = corr_by_id[ann.id]
        g_star = gamma_oracle(b_hat, ann.box, truth_boxes[ann.id])
        pairs.append((box_pair_features(b_hat, ann.box, dims_by_image[ann.image_id]), g_star))
    params, _ = mlp_train(pairs, seed=flags.get("train_seed") or 0)
    return LearnedPolicy(params)


def cmd_pipeline(args) -> int:
    flags = _merge_config(
        args,
        {
            "level": 0.4,
            "seed": 0,
            "alpha": 0.5,
            "lambda_iou": 0.05,
            "candidates": 3,
            "provider": "oracle",
            "variant": "fmc",
            "policy": "heuristic",
            "jobs": os.cpu_count() or 1,
            "timeout": 120.0,
            "iou": 0.5,
            "train_seed": 0,
        },
    )
    out_dir = Path(flags["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.json"
    writer = ManifestWriter("pipeline", flags, _default_manifest(flags, summary_path))

    truth = load_coco(writer.read(flags["gt"]))
    noisy = inject(truth, NoiseConfig(level=flags["level"], seed=flags["seed"]))
    save_coco(noisy, writer.wrote(out_dir / "noisy.json"))

    provider = _make_provider(flags, truth=truth)
    failures = []

    def on_failure(image_id, error):
        failures.append(image_id)
        print(f"image {image_id}: provider failure: {error}", file=sys.stderr)

    cfg = FmcConfig(
        alpha=flags["alpha"],
        lambda_iou=flags["lambda_iou"],
        candidates_per_prompt=flags["candidates"],
    )
    try:
        corrected, records = correct_dataset(
            noisy,
            provider,
            cfg,
            image_root=flags.get("images"),
            jobs=flags["jobs"],
            on_failure=on_failure,
        )
    finally:
        provider.close()
    save_coco(corrected, writer.wrote(out_dir / "corrected.json"))
    save_records(records, writer.wrote(out_dir / "records.json"))

    final = corrected
    if flags["variant"] == "fmc-interp":
        policy = _pipeline_policy(flags, truth, noisy, corrected, records)
        final = apply_interpolation(corrected, noisy, records, policy)
        save_coco(final, writer.wrote(out_dir / "interpolated.json"))
    elif flags["variant"] != "fmc":
        raise UsageError(f"unknown variant {flags['variant']!r} (fmc or fmc-interp)")

    report = correction_report(noisy, final, truth, records)
    iou_thr = flags["iou"]
    maps = {
        stage: evaluate_detections(
            dataset_as_detections(ds), truth.annotations, iou_threshold=iou_thr
        )["map"]
        for stage, ds in (("noisy", noisy), ("corrected", corrected), ("final", final))
    }
    summary = {
        "level": flags["level"],
        "seed": flags["seed"],
        "variant": flags["variant"],
        "map": maps,
        "report": report.to_json_dict(),
        "provider_failures": len(failures),
    }
    _write_json(writer.wrote(summary_path), summary)
    writer.finish()
    print(
        f"level={flags['level']} variant={flags['variant']} "
        f"mAP noisy={maps['noisy']:.4f} corrected={maps['corrected']:.4f} final={maps['final']:.4f}"
    )
    return EXIT_PROVIDER if failures else EXIT_OK


def cmd_oracle_worker(args) -> int:
    flags = _merge_config(args, {})
    truth = load_coco(flags["truth"])
    provider = OracleProvider(scenes_from_dataset(truth), _fidelity(flags))
    serve_provider(provider, sys.stdin.buffer, sys.stdout.buffer)
    return EXIT_OK


# -- parser wiring -------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--manifest", help="run manifest path (default: <out>.manifest.json)")


def _add_fidelity(p):
    p.add_argument("--oracle-jitter", type=float, dest="oracle_jitter")
    p.add_argument("--oracle-part-prob", type=float, dest="oracle_part_prob")
    p.add_argument("--oracle-leak-prob", type=float, dest="oracle_leak_prob")
    p.add_argument("--oracle-seed", type=int, dest="oracle_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="boxmend", description=__doc__)
    parser.add_argument("--version", action="version", version=f"boxmend {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic scenes + ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--count", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("inject-noise", help="perturb every annotation box")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("correct", help="run foundation-model correction")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--images")
    p.add_argument("--out", required=True)
    p.add_argument("--records")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lambda_iou", type=float)
    p.add_argument("--candidates", type=int)
    p.add_argument("--provider", help="oracle | worker:<cmd>")
    p.add_argument("--truth", help="ground truth with masks, for the oracle provider")
    p.add_argument("--jobs", type=int)
    p.add_argument("--timeout", type=float)
    _add_fidelity(p)
    _add_common(p)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("interpolate", help="mix corrected and noisy boxes")
    p.add_argument("--corrected", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--policy", help="constant:<g> | heuristic | learned:<params.json>")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="mAP of detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("robustness", help="noise-robustness MAE profile")
    p.add_argument("--base", type=float, required=True)
    p.add_argument("--perfs", required=True, help="CSV with columns level,perf")
    p.add_argument("--out", required=True)
    p.add_argument("--plot-csv", dest="plot_csv")
    _add_common(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("validate", help="check a dataset for integrity problems")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pipeline", help="inject -> correct [-> interpolate] -> evaluate")
    p.add_argument("--gt", required=True)
    p.add_argument("--images")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lambda_iou", type=float)
    p.add_argument("--candidates", type=int)
    p.add_argument("--provider")
    p.add_argument("--variant", help="fmc | fmc-interp")
    p.add_argument("--policy", help="constant:<g> | heuristic | learned:<path> | fit")
    p.add_argument("--train-seed", dest="train_seed", type=int)
    p.add_argument("--iou", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--timeout", type=float)
    _add_fidelity(p)
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("oracle-worker", help="serve the synthetic oracle over stdio")
    p.add_argument("--truth", required=True)
    _add_fidelity(p)
    _add_common(p)
    p.set_defaults(func=cmd_oracle_worker)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ProviderError, ProviderTimeout, ChannelClosed, ProtocolError) as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER
    except BoxmendError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
