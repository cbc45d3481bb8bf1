"""Command-line entry point: ``fscil-prompts {run,grid,ablation,report}``.

Exit codes: 0 success, 2 invalid configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .exceptions import ConfigurationError
from .reporting import (
    ABLATION_VARIANTS,
    Experiment,
    ablation_csv,
    atomic_write,
    find_records,
    grid_argmax,
    grid_csv,
    plot_curves,
    render_grid,
    render_report,
    write_run_outputs,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("fscil_prompts")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seed expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigurationError("--seed needs at least one integer")
    return seeds


def _resolve(args) -> tuple[RunConfig, Path]:
    config = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed:
        config = config.with_overrides(seeds=_seed_list(args.seed))
    if args.output:
        config = config.with_overrides(output_dir=args.output)
    return config.validate(), Path(config.output_dir)


def cmd_run(args) -> int:
    config, out = _resolve(args)
    experiment = Experiment(config)
    record = experiment.run(log_dir=out)
    write_run_outputs(record, config, out)
    m = record.mean_metrics()
    print(f"{len(record.per_seed)} seed(s): " + ", ".join(f"{a:.2f}" for a in m.session_accuracies)
          + f" | Avg {m.avg:.2f} PD {m.pd:.2f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    config, out = _resolve(args)
    config.validate_grid()
    experiment = Experiment(config)
    cells = {}
    for L, D in config.grid.cells():
        record = experiment.run(L=L, D=D, log_dir=out / f"L{L}_D{D}")
        write_run_outputs(record, config.with_overrides(L=L, D=D), out / f"L{L}_D{D}")
        cells[(L, D)] = (record.aggregate["avg"]["mean"], record.aggregate["avg"]["se"])
        logger.info("cell L=%d D=%d avg %.2f", L, D, cells[(L, D)][0])
    best = grid_argmax({k: v[0] for k, v in cells.items()})
    atomic_write(out / "grid.csv", grid_csv(cells, best))
    print(render_grid(cells, best), end="")
    print(f"best: L={best[0]} D={best[1]}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    config, out = _resolve(args)
    experiment = Experiment(config)
    curves = {}
    for variant in ABLATION_VARIANTS:
        record = experiment.run(ablation=variant, log_dir=out / variant)
        write_run_outputs(record, config.with_overrides(ablation=variant), out / variant)
        curves[variant] = record.mean_metrics()
    atomic_write(out / "ablation.csv", ablation_csv(curves))
    plot_curves(curves, out / "ablation.png")
    for variant, m in curves.items():
        print(f"{variant:<18}" + " ".join(f"{a:6.2f}" for a in m.session_accuracies))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.records)
    records = find_records(root)
    if not records:
        print(f"no record.json found under {root}", file=sys.stderr)
        return EXIT_RUNTIME
    text, table = render_report(records)
    atomic_write(Path(args.output or root) / "report.csv", table)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscil-prompts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("run", cmd_run, "run one configuration over its seeds"),
        ("grid", cmd_grid, "sweep prompt length L and depth D"),
        ("ablation", cmd_ablation, "run the full model and three ablations"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        p.add_argument("--output", help="output directory (overrides output_dir)")
        p.add_argument("--seed", help="comma-separated seeds (overrides seeds)")
        p.set_defaults(func=fn)
    p = sub.add_parser("report", help="tabulate saved run records")
    p.add_argument("--records", required=True, help="directory searched for record.json files")
    p.add_argument("--output", help="where report.csv goes (defaults to --records)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI contract maps all other failures to 1
        logger.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
