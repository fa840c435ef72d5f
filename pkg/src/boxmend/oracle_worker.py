"""Stdio worker serving the synthetic oracle over the wire protocol.

Lets the worker-channel machinery be exercised end to end without any
neural sidecar: spawn `python -m boxmend.oracle_worker --truth gt.json`
and talk NDJSON to it.
"""
from __future__ import annotations

import argparse
import sys

from .dataset import load_coco
from .protocol import serve_provider
from .synth import OracleFidelity, OracleProvider, scenes_from_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxmend-oracle-worker", description=__doc__
    )
    parser.add_argument("--truth", required=True, help="ground-truth COCO JSON with masks")
    parser.add_argument("--jitter", type=float, default=0.0)
    parser.add_argument("--part-prob", type=float, default=0.0)
    parser.add_argument("--leak-prob", type=float, default=0.0)
    parser.add_argument("--oracle-seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    truth = load_coco(args.truth)
    fidelity = OracleFidelity(
        boundary_jitter=args.jitter,
        part_mask_prob=args.part_prob,
        background_leak_prob=args.leak_prob,
        seed=args.oracle_seed,
    )
    provider = OracleProvider(scenes_from_dataset(truth), fidelity)
    serve_provider(provider, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
