"""Command-line entry point: ``prunemia {pipeline,matrix,report,synth}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataError, synth_generate, write_csv
from .harness import (
    ConfigError,
    ExperimentConfig,
    emit_matrix,
    emit_report,
    expand_grid,
    read_records,
    run_many,
    run_matrix,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("prunemia")


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    run = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        run["seed"] = args.seed
    if args.out is not None:
        run["out"] = args.out
    if getattr(args, "parallel", None) is not None:
        run["parallel"] = args.parallel
    return config.replace(run=run) if run else config


def cmd_pipeline(args) -> int:
    config = _config(args)
    records = run_many(expand_grid(config), config.run.parallel)
    paths = emit_report(records, config.run.out)
    failed = [r for r in records if r.error]
    for r in failed:
        logger.error("run failed in stage %s: %s", r.error["stage"], r.error["message"])
    print(f"{len(records) - len(failed)}/{len(records)} runs ok; wrote {paths['records']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_matrix(args) -> int:
    config = _config(args)
    matrix = run_matrix(config)
    paths = emit_matrix(matrix, config.run.out)
    failed = [c for c in matrix.cells if c["error"]]
    loss = "n/a" if matrix.mean_loss is None else f"{matrix.mean_loss:.4f}"
    print(f"{len(matrix.cells)} cells, mean attack accuracy loss {loss}; wrote {paths['matrix']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    config = _config(args)
    source = Path(args.records) if args.records else Path(config.run.out) / "records.jsonl"
    try:
        records = read_records(source)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read records from {source}: {exc}") from exc
    paths = emit_report(records, config.run.out, formats=("csv",))
    print(f"{len(records)} records -> {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = _config(args)
    seed = config.data.synthetic_seed if args.seed is None else args.seed
    data = synth_generate(config.data.synthetic_spec(), seed)
    out = Path(config.run.out)
    path = out if out.suffix == ".csv" else out / "synthetic.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, path)
    print(f"wrote {len(data)} rows to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunemia", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, parallel=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
        p.add_argument("--out", help="output directory (overrides run.out)")
        if parallel:
            p.add_argument("--parallel", type=int, help="worker processes for grid cells")

    p = sub.add_parser("pipeline", help="run the pipeline over the configured grid")
    common(p)
    p.set_defaults(func=cmd_pipeline)
    p = sub.add_parser("matrix", help="unknown-configuration matrix")
    common(p)
    p.set_defaults(func=cmd_matrix)
    p = sub.add_parser("report", help="rebuild CSV/plot files from records.jsonl")
    common(p, parallel=False)
    p.add_argument("--records", help="records.jsonl to read (default: <out>/records.jsonl)")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("synth", help="write the synthetic benchmark as CSV")
    common(p, parallel=False)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
