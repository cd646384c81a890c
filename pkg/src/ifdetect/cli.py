"""Command-line entry point: ``ifdetect <stage> --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from ifdetect import config, pipeline
from ifdetect.errors import IfdetectError

log = logging.getLogger("ifdetect")

EXIT_OK = 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifdetect", description="Influence-based label-error detection.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--run-dir", type=Path, help="artifact directory (default: runs/<config hash prefix>)")
    common.add_argument("--workers", type=int, default=None, help="parallelism cap (default: available cores)")
    common.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE", help="dotted-path config override, repeatable"
    )
    common.add_argument("--force", action="store_true", help="recompute even when artifacts are current")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "prepare": "materialize clean and flipped datasets",
        "train": "train baseline and flipped models, check sensitivity",
        "value": "build curvature and score misclassified test points",
        "detect": "threshold sweep, detection report, top-k manifests",
        "oracle": "leave-one-out retraining against influence (small data only)",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    p_all = sub.add_parser("all", parents=[common], help="prepare, train, value and detect in order")
    p_all.add_argument("--check", action="store_true", help="exit 5 unless the configured targets are met")
    p_cfg = sub.add_parser("config", parents=[common], help="print the resolved configuration and its hash")
    p_cfg.set_defaults(show_config=True)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = config.load(args.config, args.override)
        if args.command == "config":
            sys.stdout.write(config.dumps(cfg))
            sys.stdout.write(f"# hash: {cfg.content_hash()}\n")
            return EXIT_OK
        if args.workers is not None and args.workers < 1:
            raise config.ConfigError("--workers: must be >= 1")
        workers = args.workers or config.default_workers()
        root = args.run_dir or pipeline.default_run_dir(cfg)
        root.mkdir(parents=True, exist_ok=True)
        config.save(cfg, root / "config.yaml")
        r = pipeline.Run(cfg, root, workers=workers, force=args.force)
        start = time.perf_counter()
        if args.command == "all":
            pipeline.cmd_all(r, check=args.check)
        else:
            pipeline.COMMANDS[args.command](r)
        log.info("%s finished in %.1fs; artifacts in %s", args.command, time.perf_counter() - start, root)
        return EXIT_OK
    except IfdetectError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
