"""Command-line entry point: ``eecmdp <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 infeasible constraints,
4 multiplier iteration did not converge.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, EecmdpError, InfeasibleError
from .harness import (SweepSpec, csv_header, dump_scenario, export_lookup_table, load_scenario,
                      outcome_rows, parse_scenario, parse_sweep, run_solve, run_sweep,
                      write_csv)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4
MODES = {"representative": "representative", "monte-carlo": "monte_carlo"}

log = logging.getLogger("eecmdp")


def _scenario(args):
    overrides = dict(seed=args.seed, reward_mode=MODES.get(args.mode) if args.mode else None,
                     mc_samples=args.mc_samples)
    if args.config:
        return load_scenario(args.config, **overrides)
    return parse_scenario("", "<defaults>", **overrides)


def _sweep_spec(args) -> SweepSpec:
    spec = None
    if args.config:
        spec = parse_sweep(Path(args.config).read_text(), args.config)
    axis = args.axis or (spec.axis if spec else None)
    if args.values:
        try:
            values = tuple(float(v) for v in args.values.split(","))
        except ValueError:
            raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    else:
        values = spec.values if spec else None
    if axis is None or values is None:
        raise ConfigError("sweep needs an axis and values (--axis/--values or a [sweep] section)")
    return SweepSpec(axis, values)


def cmd_validate(args) -> int:
    sc = _scenario(args)
    sys.stdout.write(dump_scenario(sc))
    print(f"# states = {sc.num_states}, actions = {sc.num_actions}")
    return EXIT_OK


def cmd_solve(args) -> int:
    sc = _scenario(args)
    out = Path(args.out)
    outcome = run_solve(sc, cache_dir=out / "cache", workers=args.threads)
    report = outcome.report
    out.mkdir(parents=True, exist_ok=True)
    (out / "solve_report.txt").write_text(report.as_text())
    write_csv(out / "solve.csv", csv_header(sc), outcome_rows(outcome, timing=args.timing))
    if args.table or args.command == "export-table":
        export_lookup_table(outcome.result.policy, outcome.system.codec, outcome.system.grid,
                            out / "lookup_table.txt")
    sys.stdout.write(report.as_text())
    print(f"ergodic_value = {outcome.comparison.value_b:.12g}")
    print(f"action_agreement = {outcome.comparison.agreement:.6f}")
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    spec = _sweep_spec(args)
    out = Path(args.out)
    result = run_sweep(sc, spec, workers=args.threads, cache_dir=out / "cache",
                       table_dir=out / "tables", timing=args.timing)
    path = out / f"sweep_{spec.axis}.csv"
    write_csv(path, result.header, result.rows)
    print(f"wrote {len(result.rows)} rows to {path}")
    statuses = {row[-1] for row in result.rows}
    if statuses - {"ok", "nonconverged"}:
        log.warning("some sweep points failed: %s", sorted(statuses))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    return EXIT_OK if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config file (INI-style sections)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--mode", choices=sorted(MODES), help="reward table mode")
    common.add_argument("--mc-samples", type=int, help="Monte-Carlo samples per state")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--timing", action="store_true", help="fill the wall_ms CSV column")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eecmdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", parents=[common], help="solve one scenario")
    solve.add_argument("--table", action="store_true", help="also export the lookup table")
    solve.set_defaults(func=cmd_solve)
    sweep = sub.add_parser("sweep", parents=[common], help="sweep one scenario parameter")
    sweep.add_argument("--axis", help="discount | max_snr | bins_qs | actions_qa | antennas_m")
    sweep.add_argument("--values", help="comma-separated axis values")
    sweep.set_defaults(func=cmd_sweep)
    export = sub.add_parser("export-table", parents=[common], help="solve and write the lookup table")
    export.set_defaults(func=cmd_solve, table=True)
    validate = sub.add_parser("validate-config", parents=[common], help="print the effective scenario")
    validate.set_defaults(func=cmd_validate)
    selftest = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    selftest.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EecmdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
