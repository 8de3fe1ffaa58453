"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline, transfer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repspace",
        description="Map relationships among feature spaces via pairwise "
                    "linear transfer, and relate them to response data.",
    )
    parser.add_argument("stage",
                        choices=sorted(pipeline.STAGES) + ["all", "hpsearch"],
                        help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--force", action="store_true",
                        help="re-run even if outputs are up to date or config changed")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker pool size for the decoder grid")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--max-jobs", type=int, default=None,
                        help="run at most N pending decoder jobs, then stop (exit 3)")
    parser.add_argument("--print-effective-config", action="store_true",
                        help="print the config with all defaults filled in and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _hpsearch(config: dict) -> int:
    pipeline.run_stage(pipeline.source_stage(config), config)
    paths = pipeline.RunPaths(config["out_dir"])
    dataset, _ = pipeline.load_dataset(paths)
    target = config.get("hpsearch_target") or dataset.rep_ids[0]
    best = transfer.coordinate_descent_search(dataset, target,
                                              pipeline.train_config(config))
    print(json.dumps({
        "latent_dim": best.latent_dim,
        "batch_size": best.batch_size,
        "lr_encoder": best.lr_encoder,
        "lr_decoder": best.lr_decoder,
    }, indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = pipeline.load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        config["seed"] = args.seed
    if args.print_effective_config:
        print(json.dumps(config, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        if args.stage == "hpsearch":
            return _hpsearch(config)
        if args.stage == "all":
            pipeline.run_all(config, force=args.force, workers=args.workers)
        else:
            pipeline.run_stage(args.stage, config, force=args.force,
                               workers=args.workers, max_jobs=args.max_jobs)
    except pipeline.StageIncomplete as exc:
        print(f"partial: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (pipeline.DependencyError, pipeline.ConfigMismatch, pipeline.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        logger.exception("stage %s failed", args.stage)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
