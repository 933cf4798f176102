"""Command-line entry point for batch encoding."""

from __future__ import annotations

import argparse
import sys

from embed_bridge.job import BridgeJob, encode_batch


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-bridge",
        description="Encode ROI patches with a pretrained tile encoder into an EMB1 file.",
    )
    parser.add_argument("--patches", required=True, help="directory of patch images")
    parser.add_argument(
        "--encoder",
        required=True,
        help="torchscript:<path>, module:<pkg.mod:factory>, or test-projection",
    )
    parser.add_argument("--out", required=True, help="output EMB1 file")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    job = BridgeJob(
        patch_dir=args.patches,
        encoder=args.encoder,
        output=args.out,
        batch_size=args.batch_size,
        device=args.device,
    )
    try:
        out = encode_batch(job)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
