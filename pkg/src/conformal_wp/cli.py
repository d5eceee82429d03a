"""Command-line front end.

Verbs::

    conformal-wp run <config> [--out ROOT]
    conformal-wp suite <dir-or-configs...> [--out ROOT] [--threads N] [--csv PATH]
    conformal-wp export-slice <field> --axis A [--index I ...] --out PATH
    conformal-wp check <field> --against <config>

The default output root is ``$CONFORMAL_WP_OUT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .fieldfile import FieldFileError, read_field
from .fields import ScalarField
from .scenario import (
    EXIT_CHECK,
    EXIT_OK,
    EXIT_USAGE,
    RunResult,
    ScenarioError,
    background_field,
    export_slice,
    parse_scenario,
    run_checks,
    run_scenario,
    scalar_source,
)
from .verify import PreconditionError

# worst first: usage errors, then failed checks, then non-convergence
_SEVERITY = {EXIT_OK: 0, 2: 1, EXIT_CHECK: 2, EXIT_USAGE: 3}


def worst_exit(codes) -> int:
    codes = list(codes)
    if not codes:
        return EXIT_USAGE
    return max(codes, key=lambda c: _SEVERITY[c])


def _run_one(path: str, out_root: str | None) -> RunResult:
    try:
        cfg = parse_scenario(path)
    except ScenarioError as exc:
        return RunResult(Path(path).stem, EXIT_USAGE, None, message=str(exc))
    return run_scenario(cfg, out_root)


def collect_configs(targets) -> list[str]:
    paths: list[str] = []
    for t in targets:
        p = Path(t)
        if p.is_dir():
            paths.extend(str(q) for q in sorted(p.glob("*.json")))
        else:
            paths.append(str(p))
    return paths


def _status(res: RunResult) -> str:
    return "PASS" if res.exit_code == EXIT_OK else "FAIL"


def format_table(results: list[RunResult]) -> str:
    rows = [("scenario", "classification", "checks", "exit", "status")]
    for r in results:
        n_ok = sum(1 for c in r.checks if c["pass"])
        rows.append((r.name, r.classification or "-", f"{n_ok}/{len(r.checks)}", str(r.exit_code), _status(r)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)


def constants_csv(results: list[RunResult]) -> str:
    lines = ["scenario,check,measured,bound,pass"]
    for r in results:
        for c in r.checks:
            lines.append(f"{r.name},{c['name']},{c['measured']!r},{c['bound_or_reference']!r},{int(c['pass'])}")
    return "\n".join(lines) + "\n"


def suite(targets, out_root: str | None = None, threads: int = 1) -> tuple[int, list[RunResult]]:
    """Run every config (directories contribute their ``*.json`` files, sorted by name)."""
    paths = collect_configs(targets)
    if not paths:
        return EXIT_USAGE, []
    if threads > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, paths, [out_root] * len(paths)))
    else:
        results = [_run_one(p, out_root) for p in paths]
    return worst_exit(r.exit_code for r in results), results


def _cmd_run(args) -> int:
    res = _run_one(args.config, args.out)
    if res.exit_code == EXIT_USAGE:
        print(f"error: {res.message}", file=sys.stderr)
        return res.exit_code
    print(format_table([res]))
    if res.message:
        print(res.message)
    print(f"artifacts: {res.directory}")
    return res.exit_code


def _cmd_suite(args) -> int:
    code, results = suite(args.targets, args.out, args.threads)
    if not results:
        print("error: no scenario configs found", file=sys.stderr)
        return code
    print(format_table(results))
    for r in results:
        if r.exit_code == EXIT_USAGE:
            print(f"{r.name}: {r.message}", file=sys.stderr)
    csv = constants_csv(results)
    print()
    print(csv, end="")
    if args.csv:
        Path(args.csv).write_text(csv)
    return code


def _cmd_export(args) -> int:
    try:
        fld = read_field(args.field)
        if not isinstance(fld, ScalarField):
            raise ValueError("export-slice needs a scalar field")
        others = fld.grid.dim - 1
        index = args.index if args.index else [s // 2 for i, s in enumerate(fld.grid.shape) if i != args.axis]
        if len(index) == 1 and others > 1:
            index = index * others
        export_slice(fld, args.axis, index, args.out)
    except (OSError, FieldFileError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _cmd_check(args) -> int:
    try:
        cfg = parse_scenario(args.against)
        u = read_field(args.field)
        if not isinstance(u, ScalarField) or not u.grid.same_as(cfg.grid):
            raise ValueError("field must be a scalar field on the config's grid")
        S0, w = background_field(cfg)
        f = cfg.rhs if isinstance(cfg.rhs, (int, float)) else scalar_source(cfg, cfg.rhs, "rhs")
        reports = run_checks(cfg, u, f, S0, w)
    except (OSError, FieldFileError, ScenarioError, PreconditionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  measured={r.measured!r}  bound={r.bound_or_reference!r}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conformal-wp", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="solve one scenario and write its artifacts")
    p.add_argument("config")
    p.add_argument("--out", help="output root (default $CONFORMAL_WP_OUT or ./runs)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("suite", help="run every scenario in a directory")
    p.add_argument("targets", nargs="+")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", help="also write the measured-constant CSV here")
    p.set_defaults(func=_cmd_suite)

    p = sub.add_parser("export-slice", help="write a 1-D slice of a scalar field as CSV")
    p.add_argument("field")
    p.add_argument("--axis", type=int, required=True)
    p.add_argument("--index", type=int, nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("check", help="run a scenario's checks on an existing field")
    p.add_argument("field")
    p.add_argument("--against", required=True)
    p.set_defaults(func=_cmd_check)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
