"""Command line: export model features over a corpus into .fbn bundles."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .bundles import read_corpus_manifest, write_bundle
from .extract import FAMILIES, AlignmentFailure, ExtractionSpec, extract, next_word_embedding

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repspace-extract",
        description="Export token-aligned features from a pretrained model "
                    "into .fbn bundles.",
    )
    parser.add_argument("--model", required=True,
                        help="model path or hub id (vectors file for word-embedding)")
    parser.add_argument("--family", required=True, choices=FAMILIES)
    parser.add_argument("--layers", default=None,
                        help="comma-separated 1-based layer list (default: all)")
    parser.add_argument("--window", type=int, default=64,
                        help="context window in words (default 64)")
    parser.add_argument("--corpus", required=True, help="corpus manifest JSON")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--nwe", action="store_true",
                        help="also write each bundle shifted one word into the future")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    layers = None
    if args.layers:
        layers = tuple(int(x) for x in args.layers.split(","))
    try:
        spec = ExtractionSpec(family=args.family, model=args.model, layers=layers,
                              window=args.window, batch_size=args.batch_size)
        stories = read_corpus_manifest(args.corpus)
        bundles = extract(spec, stories)
        if args.nwe:
            bundles += [next_word_embedding(b, stories) for b in list(bundles)]
    except AlignmentFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    for bundle in bundles:
        path = os.path.join(args.out, f"{bundle.id}.fbn")
        write_bundle(bundle, path)
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
