"""Scenario configs: parsing, validation and execution with on-disk artifacts.

A scenario is a JSON document::

    {
      "name": "negative_constant",
      "grid": {"dim": 3, "shape": 12, "extent": 1.0, "topology": "periodic"},
      "background": {"type": "constant", "scalar": -1.0},
      "operator": {"kind": "gp_exact", "p": 1},
      "rhs": -1.0,
      "solver": "continuity_negative",
      "checks": [{"name": "c0_bounds"}]
    }

Relative file paths are resolved against the config's directory.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import verify
from .expr import ExpressionError, evaluate_expression, parse_expression
from .fieldfile import FieldFileError, atomic_write_bytes, encode_field, read_field
from .fields import BOX, PERIODIC, GridSpec, ScalarField, SymMatrixField, background_from_factor, make_grid
from .operators import GP_EXACT, GP_KINDS, OperatorSpec, OperatorSpecError, op_value
from .solvers import (
    CONVERGED,
    DirichletProblem,
    SolveConfig,
    continuity_solve_negative,
    dirichlet_solve,
    flow_solve,
    newton_solve,
    positive_case_drive,
    residual,
)

SOLVERS = ("newton", "flow", "continuity_negative", "dirichlet", "positive_drive")
CHECKS = ("c0_bounds", "reference", "gradient_estimate", "harnack", "bishop_volume", "conformal_invariance")
BACKGROUNDS = ("constant", "isotropic", "factor", "file")
FORMATS = ("field", "csv")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3

OUT_ENV = "CONFORMAL_WP_OUT"


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


# --------------------------------------------------------------------------
# parsing


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    grid: GridSpec
    background: dict
    operator: OperatorSpec
    rhs: Any
    solver: str
    solve: SolveConfig
    initial: Any = 0.0
    boundary: Any = None
    checks: tuple = ()
    outputs: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_TOP_KEYS = {"name", "grid", "background", "operator", "rhs", "solver", "solve", "initial", "boundary",
             "checks", "outputs"}


def _require_keys(obj, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(where, "expected an object")
    for key in sorted(set(obj) - allowed):
        raise ScenarioError(f"{where}.{key}" if where else key, "unknown key")


def _parse_grid(obj) -> GridSpec:
    _require_keys(obj, {"dim", "shape", "extent", "topology"}, "grid")
    if "dim" not in obj:
        raise ScenarioError("grid.dim", "missing")
    dim = obj["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool):
        raise ScenarioError("grid.dim", "must be an integer")
    shape = obj.get("shape", 16)
    shape = [shape] * dim if isinstance(shape, int) else shape
    extent = obj.get("extent", 1.0)
    topology = obj.get("topology", PERIODIC)
    try:
        return make_grid(dim, shape, extent, topology)
    except (ValueError, TypeError) as exc:
        raise ScenarioError("grid", str(exc)) from None


def _check_source(obj, where: str, dim: int, scalar_ok: bool = True) -> None:
    """A field source: number, {"expr": ...} or {"file": ...}."""
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        if not scalar_ok or not math.isfinite(obj):
            raise ScenarioError(where, "expected a finite number")
        return
    if not isinstance(obj, dict) or len(obj) != 1 or not ({"expr", "file"} & set(obj)):
        raise ScenarioError(where, "expected a number, {\"expr\": ...} or {\"file\": ...}")
    if "expr" in obj:
        try:
            parse_expression(str(obj["expr"]), dim)
        except ExpressionError as exc:
            raise ScenarioError(f"{where}.expr", str(exc)) from None


def _parse_background(obj, dim: int) -> dict:
    if obj is None:
        return {"type": "constant", "scalar": 0.0}
    if not isinstance(obj, dict):
        raise ScenarioError("background", "expected an object")
    kind = obj.get("type")
    if kind not in BACKGROUNDS:
        raise ScenarioError("background.type", f"must be one of {', '.join(BACKGROUNDS)}")
    if kind == "constant":
        _require_keys(obj, {"type", "scalar", "matrix"}, "background")
        if ("scalar" in obj) == ("matrix" in obj):
            raise ScenarioError("background", "give exactly one of scalar or matrix")
        if "matrix" in obj:
            m = np.asarray(obj["matrix"], dtype=float)
            if m.shape != (dim, dim) or not np.allclose(m, m.T, rtol=0, atol=0):
                raise ScenarioError("background.matrix", f"expected a symmetric {dim}x{dim} matrix")
        else:
            _check_source(obj["scalar"], "background.scalar", dim)
    elif kind in ("isotropic", "factor"):
        _require_keys(obj, {"type", "expr", "file"}, "background")
        _check_source({k: v for k, v in obj.items() if k != "type"}, "background", dim, scalar_ok=False)
    else:
        _require_keys(obj, {"type", "file"}, "background")
        if "file" not in obj:
            raise ScenarioError("background.file", "missing")
    return dict(obj)


def _parse_checks(obj) -> tuple:
    if obj is None:
        return ()
    if not isinstance(obj, list):
        raise ScenarioError("checks", "expected a list")
    out = []
    for i, item in enumerate(obj):
        where = f"checks[{i}]"
        if isinstance(item, str):
            item = {"name": item}
        if not isinstance(item, dict):
            raise ScenarioError(where, "expected a name or an object")
        name = item.get("name")
        if name not in CHECKS:
            raise ScenarioError(f"{where}.name", f"must be one of {', '.join(CHECKS)}")
        allowed = {"name", "budget", "center", "radius", "R", "expr", "tol", "slack"}
        _require_keys(item, allowed, where)
        if name == "reference" and "expr" not in item:
            raise ScenarioError(f"{where}.expr", "missing")
        out.append(dict(item))
    return tuple(out)


def _parse_outputs(obj) -> dict:
    if obj is None:
        return {"directory": None, "formats": ["field"]}
    _require_keys(obj, {"directory", "formats"}, "outputs")
    formats = obj.get("formats", ["field"])
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        raise ScenarioError("outputs.formats", f"entries must be among {', '.join(FORMATS)}")
    return {"directory": obj.get("directory"), "formats": list(formats)}


def _parse_solve(obj) -> SolveConfig:
    if obj is None:
        return SolveConfig()
    names = {f.name for f in dataclasses.fields(SolveConfig)}
    _require_keys(obj, names, "solve")
    kw = {}
    for k, v in obj.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        cfg = SolveConfig(**kw)
        cfg.t_schedule()
    except (ValueError, TypeError) as exc:
        raise ScenarioError("solve", str(exc)) from None
    return cfg


def config_from_dict(doc: dict, base_dir: str = ".", default_name: str = "scenario") -> ScenarioConfig:
    _require_keys(doc, _TOP_KEYS, "")
    for key in ("grid", "operator", "solver"):
        if key not in doc:
            raise ScenarioError(key, "missing")
    grid = _parse_grid(doc["grid"])
    dim = grid.dim
    if not isinstance(doc["operator"], dict):
        raise ScenarioError("operator", "expected an object")
    try:
        op = OperatorSpec.from_record(doc["operator"], dim)
    except OperatorSpecError as exc:
        raise ScenarioError(f"operator.{exc.field}", str(exc)) from None
    solver = doc["solver"]
    if solver not in SOLVERS:
        raise ScenarioError("solver", f"must be one of {', '.join(SOLVERS)}")
    if solver == "dirichlet" and grid.topology != BOX:
        raise ScenarioError("solver", "dirichlet needs a box grid")
    if solver == "positive_drive" and grid.topology != PERIODIC:
        raise ScenarioError("solver", "positive_drive needs a periodic grid")
    rhs = doc.get("rhs", -1.0)
    _check_source(rhs, "rhs", dim)
    if solver == "continuity_negative" and not (isinstance(rhs, (int, float)) and rhs < 0):
        raise ScenarioError("rhs", "continuity_negative needs a negative constant level")
    initial = doc.get("initial", 0.0)
    _check_source(initial, "initial", dim)
    boundary = doc.get("boundary")
    if boundary is not None:
        _check_source(boundary, "boundary", dim)
    name = doc.get("name", default_name)
    if not isinstance(name, str) or not name or any(c in name for c in "/\\") or name.startswith("."):
        raise ScenarioError("name", "must be a plain, non-empty file name")
    return ScenarioConfig(
        name=name,
        grid=grid,
        background=_parse_background(doc.get("background"), dim),
        operator=op,
        rhs=rhs,
        solver=solver,
        solve=_parse_solve(doc.get("solve")),
        initial=initial,
        boundary=boundary,
        checks=_parse_checks(doc.get("checks")),
        outputs=_parse_outputs(doc.get("outputs")),
        base_dir=str(base_dir),
    )


def parse_scenario(path: str | os.PathLike) -> ScenarioConfig:
    """Read and validate a scenario file; defaults are filled in."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc, base_dir=str(path.parent), default_name=path.stem)


# --------------------------------------------------------------------------
# materializing fields


def _read_grid_field(cfg: ScenarioConfig, path: str, kind, where: str):
    try:
        fld = read_field(cfg.resolve(path))
    except (OSError, FieldFileError) as exc:
        raise ScenarioError(where, f"cannot load {path}: {exc}") from None
    if not isinstance(fld, kind):
        raise ScenarioError(where, f"{path} holds a {type(fld).__name__}, expected {kind.__name__}")
    if not fld.grid.same_as(cfg.grid):
        raise ScenarioError(where, f"{path} lives on a different grid")
    return fld


def scalar_source(cfg: ScenarioConfig, src, where: str) -> ScalarField:
    grid = cfg.grid
    if isinstance(src, (int, float)):
        return ScalarField.constant(grid, float(src))
    if "file" in src:
        return _read_grid_field(cfg, src["file"], ScalarField, where)
    try:
        return ScalarField(grid, evaluate_expression(src["expr"], grid.coords()))
    except ExpressionError as exc:
        raise ScenarioError(where, str(exc)) from None


def background_field(cfg: ScenarioConfig) -> tuple[SymMatrixField, ScalarField | None]:
    """Background Schouten field and, for factor backgrounds, the factor w."""
    bg, grid, n = cfg.background, cfg.grid, cfg.grid.dim
    kind = bg["type"]
    if kind == "constant":
        if "matrix" in bg:
            return SymMatrixField.constant(grid, np.asarray(bg["matrix"], dtype=float)), None
        return SymMatrixField.constant(grid, float(bg["scalar"]) * np.eye(n)), None
    if kind == "file":
        return _read_grid_field(cfg, bg["file"], SymMatrixField, "background.file"), None
    src = {k: v for k, v in bg.items() if k != "type"}
    s = scalar_source(cfg, src, "background")
    if kind == "isotropic":
        return SymMatrixField.from_full(grid, s.values[..., None, None] * np.eye(n)), None
    return background_from_factor(s), s


# --------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    name: str
    exit_code: int
    directory: str | None
    classification: str | None = None
    checks: list = field(default_factory=list)
    message: str = ""


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def output_directory(cfg: ScenarioConfig, out_root: str | None = None) -> Path:
    if cfg.outputs.get("directory"):
        return cfg.resolve(cfg.outputs["directory"])
    root = out_root or os.environ.get(OUT_ENV) or "runs"
    return Path(root) / cfg.name


def _solve(cfg: ScenarioConfig, S0: SymMatrixField, sink):
    """Run the configured solver; returns (u, report, rhs used for the residual)."""
    spec, sc, grid = cfg.operator, cfg.solve, cfg.grid
    if cfg.solver == "continuity_negative":
        u, rep = continuity_solve_negative(spec, S0, sc, sink, level=float(cfg.rhs))
        return u, rep, float(cfg.rhs)
    if cfg.solver == "positive_drive":
        u, rep = positive_case_drive(spec, S0, sc, sink)
        return u, rep, float(op_value(spec, 0.5 * np.eye(grid.dim)))
    f = scalar_source(cfg, cfg.rhs, "rhs")
    if cfg.solver == "dirichlet":
        bsrc = cfg.boundary if cfg.boundary is not None else cfg.initial
        problem = DirichletProblem(scalar_source(cfg, bsrc, "boundary"), f, S0, spec)
        u, rep = dirichlet_solve(problem, sc, sink)
        return u, rep, f
    u0 = scalar_source(cfg, cfg.initial, "initial")
    solve = newton_solve if cfg.solver == "newton" else flow_solve
    u, rep = solve(u0, f, spec, S0, sc, sink)
    return u, rep, f


def run_checks(cfg: ScenarioConfig, u: ScalarField, f, S0: SymMatrixField,
               w: ScalarField | None) -> list[verify.EstimateReport]:
    """Evaluate the configured checks on a solution field."""
    grid, spec = cfg.grid, cfg.operator
    exact = spec.with_kind(GP_EXACT) if spec.kind in GP_KINDS else spec
    fa = f if isinstance(f, ScalarField) else ScalarField.constant(grid, float(f))
    out = []
    for item in cfg.checks:
        name = item["name"]
        ctx = cfg.name
        center = item.get("center")
        if name == "c0_bounds":
            level = float(cfg.rhs) if isinstance(cfg.rhs, (int, float)) else -1.0
            rep = verify.check_c0_bounds(u, exact, S0, level=level, slack=item.get("slack", 1e-6), context=ctx)
        elif name == "reference":
            ref = evaluate_expression(item["expr"], grid.coords())
            err = float(np.max(np.abs(u.values - ref)))
            tol = float(item.get("tol", 1e-8))
            rep = verify.EstimateReport("reference", err, tol, err <= tol, ctx, extras={"expr": item["expr"]})
        elif name == "gradient_estimate":
            b = item.get("budget", verify.REGRESSION_FACTOR * verify.budget("gradient_estimate_sphere_family"))
            rep = verify.gradient_estimate_ratio(u, fa, center, item.get("radius", 1.0), spec=exact, S0=S0,
                                                 budget_value=b, context=ctx)
        elif name == "harnack":
            b = item.get("budget", verify.REGRESSION_FACTOR * verify.budget("harnack_sphere_family"))
            rep = verify.harnack_defect(u, item.get("R", 1.0), center, budget_value=b, context=ctx)
        elif name == "bishop_volume":
            rep = verify.bishop_volume_diagnostic(u, w, slack=item.get("slack", 1e-2), context=ctx)
        else:
            if w is None:
                raise ScenarioError("checks", "conformal_invariance needs a factor background")
            rep = verify.conformal_invariance_check(u, w, context=ctx)
            tol = item.get("tol")
            if tol is not None:
                rep = dataclasses.replace(rep, bound_or_reference=tol, passed=rep.measured <= tol)
        out.append(rep)
    return out


def export_slice(fld: ScalarField, axis: int, index, path: str | os.PathLike | None = None) -> str:
    """CSV of the values along ``axis``; the other axes are fixed at ``index``.

    ``index`` is one integer used for every other axis, or a sequence with one
    entry per other axis (in axis order).  Returns the CSV text; writes it
    atomically when ``path`` is given.
    """
    grid = fld.grid
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis must lie in 0..{grid.dim - 1}")
    others = [a for a in range(grid.dim) if a != axis]
    idx = [int(index)] * len(others) if np.ndim(index) == 0 else [int(i) for i in index]
    if len(idx) != len(others):
        raise ValueError(f"need {len(others)} indices for the fixed axes")
    sel: list = [None] * grid.dim
    sel[axis] = slice(None)
    for a, i in zip(others, idx):
        if not 0 <= i < grid.shape[a]:
            raise ValueError(f"index {i} out of range for axis {a}")
        sel[a] = i
    values = np.asarray(fld.values)[tuple(sel)]
    fixed = {a: float(grid.axis_coords(a)[i]) for a, i in zip(others, idx)}
    header = ",".join(f"x{a + 1}" for a in range(grid.dim)) + ",value"
    lines = [header]
    for k, x in enumerate(grid.axis_coords(axis)):
        row = [fixed.get(a, float(x)) for a in range(grid.dim)]
        lines.append(",".join(repr(v) for v in row) + "," + repr(float(values[k])))
    text = "\n".join(lines) + "\n"
    if path is not None:
        atomic_write_bytes(path, text.encode())
    return text


def run_scenario(cfg: ScenarioConfig, out_root: str | None = None) -> RunResult:
    """Solve, check and persist one scenario.

    Artifacts are assembled in a scratch directory and moved into place at the
    end, so readers never see a torn run.  Exit codes: 0 converged and all
    checks pass, 2 solver did not converge, 3 a check failed, 1 usage or IO
    error (nothing is left behind).
    """
    target = output_directory(cfg, out_root)
    log_lines: list[str] = []

    def sink(rec):
        log_lines.append(json.dumps(_jsonable(rec), sort_keys=True))

    try:
        S0, w = background_field(cfg)
        u, rep, f = _solve(cfg, S0, sink)
        R = residual(u, f, cfg.operator, S0)
        checks = run_checks(cfg, u, f, S0, w) if rep.classification == CONVERGED else []
    except (ScenarioError, verify.PreconditionError, ValueError) as exc:
        return RunResult(cfg.name, EXIT_USAGE, None, message=str(exc))

    if rep.classification != CONVERGED:
        code = EXIT_SOLVER
    elif all(c.passed for c in checks):
        code = EXIT_OK
    else:
        code = EXIT_CHECK
    report = rep.to_dict()
    report.pop("wall_time", None)
    report.update(name=cfg.name, solver=cfg.solver, operator=cfg.operator.to_record(),
                  solve=cfg.solve.to_record(), exit_code=code)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        scratch = Path(tempfile.mkdtemp(prefix=f".{cfg.name}.", dir=target.parent))
        scratch.chmod(0o755)
        try:
            if "field" in cfg.outputs["formats"]:
                atomic_write_bytes(scratch / "solution.field", encode_field(u))
                atomic_write_bytes(scratch / "residual.field", encode_field(R))
            if "csv" in cfg.outputs["formats"]:
                mid = [s // 2 for s in cfg.grid.shape[1:]]
                export_slice(u, 0, mid, scratch / "solution_x1.csv")
            atomic_write_bytes(scratch / "report.json", dumps(report).encode())
            atomic_write_bytes(scratch / "checks.json", dumps([c.to_dict() for c in checks]).encode())
            atomic_write_bytes(scratch / "log.jsonl", "".join(line + "\n" for line in log_lines).encode())
            if target.exists():
                shutil.rmtree(target)
            os.replace(scratch, target)
        except BaseException:
            shutil.rmtree(scratch, ignore_errors=True)
            raise
    except OSError as exc:
        return RunResult(cfg.name, EXIT_USAGE, None, message=f"cannot write artifacts: {exc}")
    return RunResult(cfg.name, code, str(target), rep.classification, [c.to_dict() for c in checks], rep.message)
