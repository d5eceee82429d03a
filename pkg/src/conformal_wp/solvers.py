"""Nonlinear solvers for ``F(W(u)) = e^{-2u} f`` on torus and box grids.

The discrete unknown is the conformal factor sampled at grid points.  On box
grids the boundary layer is pinned to the initial (or prescribed) values and
only interior points are solved for; interior points only ever see central
stencils.

Three equation forms share one residual/Jacobian implementation:

* scaled:  ``F(W(u)) - c0 - a e^{-2u}``
* metric:  ``F(e^{2u} W(u)) - c0 - a e^{-2u}``  (continuation in t)
* drive:   scaled form plus a nonlocal volume term (positive case)
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .fields import (
    ScalarField,
    SymMatrixField,
    _check_same_grid,
    d2,
    grad_array,
    hessian_array,
    schouten_array,
)
from .operators import (
    BLEND,
    GP_EXACT,
    GP_KINDS,
    GP_SOFT,
    MAX_RICCI,
    MIN_RICCI,
    SIGMA1,
    OperatorSpec,
    blend,
    ellipticity_constants,
    op_value,
    op_value_and_derivative,
)
from .verify import PreconditionError, check_c0_bounds

CONVERGED = "converged"
STALLED = "stalled"
BLOWUP_LOW = "blowup_low"
BLOWUP_HIGH = "blowup_high"
LINEAR_FAILURE = "linear_failure"
CLASSIFICATIONS = (CONVERGED, STALLED, BLOWUP_LOW, BLOWUP_HIGH, LINEAR_FAILURE)


@dataclass(frozen=True)
class SolveConfig:
    residual_tol: float = 1e-8
    max_iters: int = 60
    newton_damping: float = 0.5
    min_step: float = 1.0 / 1024
    flow_dt0: float = 1e-3
    flow_safety: float = 0.5
    flow_growth: float = 1.2
    flow_cfl: float = 0.4
    flow_growth_slack: float = 0.05
    flow_max_steps: int = 200_000
    continuation_steps: int | tuple[float, ...] = 4
    max_bisections: int = 6
    continuation_iters: int = 15
    tau_schedule: tuple[float, ...] = (0.1, 0.02, 0.004)
    exact_polish: bool = True
    linear_tol: float = 1e-10
    linear_max_iters: int = 600
    linear_restart: int = 60
    guard_low: float = -20.0
    guard_high: float = 20.0
    resolution_cells: float = 2.0

    def __post_init__(self):
        for name in ("residual_tol", "linear_tol", "flow_dt0", "min_step", "flow_cfl"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("newton_damping", "flow_safety"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.max_iters < 0 or self.linear_max_iters < 1 or self.flow_max_steps < 0:
            raise ValueError("iteration limits must be nonnegative")
        if not self.guard_low < 0 < self.guard_high:
            raise ValueError("guards must straddle zero")
        if any(not tau > 0 for tau in self.tau_schedule):
            raise ValueError("tau_schedule entries must be positive")

    def t_schedule(self) -> list[float]:
        """Continuation parameters after t = 0, ending at 1."""
        steps = self.continuation_steps
        if isinstance(steps, int):
            if steps < 1:
                raise ValueError("continuation_steps must be >= 1")
            return [k / steps for k in range(1, steps + 1)]
        ts = [float(t) for t in steps if t > 0]
        if any(b <= a for a, b in zip(ts, ts[1:])) or not ts or ts[-1] != 1.0:
            raise ValueError("continuation_steps must increase strictly and end at 1")
        return ts

    def to_record(self) -> dict[str, Any]:
        rec = asdict(self)
        for k, v in rec.items():
            if isinstance(v, tuple):
                rec[k] = list(v)
        return rec


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    residual_history: tuple[float, ...]
    classification: str
    bounds: tuple = ()
    wall_time: float = 0.0
    log: tuple[dict, ...] = field(default=(), repr=False)
    message: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.residual_history:
            raise ValueError("residual_history must be nonempty")
        if self.classification not in CLASSIFICATIONS:
            raise ValueError(f"unknown classification {self.classification!r}")
        if self.converged != (self.classification == CONVERGED):
            raise ValueError("converged flag disagrees with classification")

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "converged": self.converged,
            "classification": self.classification,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "residual_history": list(self.residual_history),
            "bounds": [b.to_dict() if hasattr(b, "to_dict") else b for b in self.bounds],
            "wall_time": self.wall_time,
            "message": self.message,
            "extra": self.extra,
        }


@dataclass(frozen=True)
class DirichletProblem:
    """Interior equation data plus boundary values on a box grid.

    Only the boundary layer of ``boundary_values`` is read.
    """

    boundary_values: ScalarField
    f: ScalarField
    S0: SymMatrixField
    spec: OperatorSpec

    def __post_init__(self):
        grid = self.boundary_values.grid
        if grid.periodic:
            raise ValueError("Dirichlet problems need a box grid")
        _check_same_grid(grid, self.f.grid)
        _check_same_grid(grid, self.S0.grid)
        if self.spec.n != grid.dim:
            raise ValueError("operator dimension does not match the grid")


class _Recorder:
    """Accumulates the per-iteration history shared by every driver."""

    def __init__(self, sink: Callable[[dict], None] | None = None):
        self.history: list[float] = []
        self.log: list[dict] = []
        self.sink = sink
        self.iterations = 0
        self.t0 = time.perf_counter()

    def record(self, r: float, u: np.ndarray, step: float, count: bool = True, **extra) -> None:
        if count:
            self.iterations += 1
        rec = {
            "iter": len(self.log),
            "residual": float(r),
            "min_u": float(np.min(u)),
            "max_u": float(np.max(u)),
            "dt_or_step": float(step),
        }
        rec.update(extra)
        self.history.append(float(r))
        self.log.append(rec)
        if self.sink is not None:
            self.sink(rec)

    def report(self, classification: str, bounds=(), message: str = "", **extra) -> SolveReport:
        return SolveReport(
            converged=classification == CONVERGED,
            iterations=self.iterations,
            residual_history=tuple(self.history) if self.history else (math.inf,),
            classification=classification,
            bounds=tuple(bounds),
            wall_time=time.perf_counter() - self.t0,
            log=tuple(self.log),
            message=message,
            extra=extra,
        )


# --------------------------------------------------------------------------
# equation assembly


class _State:
    __slots__ = ("R", "A", "b", "c", "nonlocal_coef", "nonlocal_weight")


class _Equation:
    """Residual, matrix-free Jacobian and Jacobi diagonal of one discrete equation."""

    def __init__(self, grid, spec: OperatorSpec, S0_full: np.ndarray, *, form: str = "scaled",
                 c0=0.0, a=0.0, volume_coef: float = 0.0):
        if spec.n != grid.dim:
            raise ValueError(f"operator is {spec.n}-dimensional but the grid is {grid.dim}-dimensional")
        if form not in ("scaled", "metric"):
            raise ValueError(form)
        if volume_coef and not grid.periodic:
            raise ValueError("the nonlocal volume term needs a periodic grid")
        self.grid = grid
        self.spec = spec
        self.S0 = S0_full
        self.form = form
        self.c0 = c0
        self.a = a
        self.volume_coef = float(volume_coef)
        self.mask = grid.interior_mask()
        self.h = grid.spacing

    def evaluate(self, u: np.ndarray, need_jacobian: bool = True):
        grid, n = self.grid, self.grid.dim
        g = grad_array(u, grid)
        W = schouten_array(u, grid, self.S0, grad_u=g)
        em2u = np.exp(-2.0 * u)
        st = _State()
        if self.form == "metric":
            e2u = np.exp(2.0 * u)
            M = e2u[..., None, None] * W
            if need_jacobian:
                val, D = op_value_and_derivative(self.spec, M)
            else:
                val, D = op_value(self.spec, M), None
        else:
            if need_jacobian:
                val, D = op_value_and_derivative(self.spec, W)
            else:
                val, D = op_value(self.spec, W), None
        R = val - self.c0 - self.a * em2u
        if self.volume_coef:
            q = 2.0 / (n + 1)
            dens = np.exp(-(n + 1) * u)
            V = math.fsum(np.sum(dens, axis=-1).ravel()) / u.size
            R = R - self.volume_coef * V**q
            st.nonlocal_coef = self.volume_coef * 2.0 * V ** (q - 1.0) / u.size
            st.nonlocal_weight = dens
        else:
            st.nonlocal_coef = 0.0
            st.nonlocal_weight = None
        st.R = R
        if need_jacobian:
            trD = np.trace(D, axis1=-2, axis2=-1)
            b = 2.0 * np.einsum("...ij,...j->...i", D, g) - trD[..., None] * g
            c = 2.0 * self.a * em2u
            if self.form == "metric":
                c = c + 2.0 * np.einsum("...ij,...ij->...", D, M)
                D = e2u[..., None, None] * D
                b = e2u[..., None] * b
            st.A, st.b, st.c = D, b, np.broadcast_to(c, u.shape)
        return st

    def apply(self, st: _State, phi: np.ndarray) -> np.ndarray:
        H = hessian_array(phi, self.grid)
        gp = grad_array(phi, self.grid)
        out = np.einsum("...ij,...ij->...", st.A, H) + np.einsum("...i,...i->...", st.b, gp) + st.c * phi
        if st.nonlocal_coef:
            out = out + st.nonlocal_coef * math.fsum(np.sum(st.nonlocal_weight * phi, axis=-1).ravel())
        return out

    def diagonal(self, st: _State) -> np.ndarray:
        d = np.array(st.c, dtype=float, copy=True)
        for i in range(self.grid.dim):
            d += st.A[..., i, i] * (-2.0 / self.h[i] ** 2)
        tiny = 1e-12 * (1.0 + np.max(np.abs(d)))
        return np.where(np.abs(d) > tiny, d, -1.0)

    def sup(self, st: _State) -> float:
        return float(np.max(np.abs(st.R[self.mask])))


def _as_array(f, grid, name: str) -> np.ndarray:
    if isinstance(f, ScalarField):
        _check_same_grid(grid, f.grid)
        return np.asarray(f.values)
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.shape, float(arr))
    if arr.shape != grid.shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {grid.shape}")
    return arr


def _s0_full(S0: SymMatrixField | None, grid) -> np.ndarray:
    if S0 is None:
        return np.zeros(grid.shape + (grid.dim, grid.dim))
    _check_same_grid(grid, S0.grid)
    return S0.full()


def residual(u: ScalarField, f, spec: OperatorSpec, S0: SymMatrixField) -> ScalarField:
    """Pointwise ``op_value(spec, W(u)) - e^{-2u} f``.

    Box boundary points use one-sided stencils; solvers only drive the interior.
    """
    grid = u.grid
    eq = _Equation(grid, spec, _s0_full(S0, grid), a=_as_array(f, grid, "f"))
    return ScalarField(grid, eq.evaluate(u.values, need_jacobian=False).R)


def linearized_apply(u: ScalarField, phi: ScalarField, spec: OperatorSpec, S0: SymMatrixField, f) -> ScalarField:
    """Directional derivative of :func:`residual` at ``u`` along ``phi`` (matrix-free)."""
    grid = u.grid
    _check_same_grid(grid, phi.grid)
    eq = _Equation(grid, spec, _s0_full(S0, grid), a=_as_array(f, grid, "f"))
    st = eq.evaluate(u.values)
    return ScalarField(grid, eq.apply(st, phi.values))


def v_form_residual(u: ScalarField, f, spec: OperatorSpec, S0: SymMatrixField) -> ScalarField:
    """Residual of the equation rewritten for ``v = e^u``.

    ``F(D^2 v + S0 v) - (F(I)/2) |Dv|^2 / v - f / v``; equals ``e^u`` times the
    scaled residual up to O(h^2) for operators that commute with adding
    multiples of the identity (Gp exact, sigma1, Ricci extremes and their blends).
    """
    base = spec.base if spec.kind == BLEND else spec
    if base.kind not in (GP_EXACT, SIGMA1, MIN_RICCI, MAX_RICCI):
        raise ValueError(f"the v-form needs a translation-equivariant operator, not {spec.kind}")
    grid = u.grid
    v = np.exp(u.values)
    gv = grad_array(v, grid)
    M = hessian_array(v, grid) + _s0_full(S0, grid) * v[..., None, None]
    coef = 0.5 * float(op_value(spec, np.eye(grid.dim)))
    out = op_value(spec, M) - coef * np.einsum("...k,...k->...", gv, gv) / v - _as_array(f, grid, "f") / v
    return ScalarField(grid, out)


# --------------------------------------------------------------------------
# Newton


def _classify_state(u: np.ndarray, cfg: SolveConfig, default: str) -> str:
    if not np.all(np.isfinite(u)) or np.min(u) <= cfg.guard_low:
        return BLOWUP_LOW
    if np.max(u) >= cfg.guard_high:
        return BLOWUP_HIGH
    return default


def _newton_core(eq: _Equation, u: np.ndarray, cfg: SolveConfig, rec: _Recorder, max_iters: int | None = None,
                 label: str | None = None) -> tuple[np.ndarray, str, str]:
    """Damped inexact Newton; returns (u, classification, message)."""
    mask = eq.mask
    u = np.array(u, dtype=float, copy=True)
    st = eq.evaluate(u)
    r = eq.sup(st)
    extra = {"stage": label} if label else {}
    rec.record(r, u, 0.0, count=False, **extra)
    max_iters = cfg.max_iters if max_iters is None else max_iters
    nunk = int(mask.sum())
    restart = min(cfg.linear_restart, nunk)
    for _ in range(max_iters):
        if r <= cfg.residual_tol:
            return u, CONVERGED, ""
        diag = eq.diagonal(st)[mask]

        def matvec(x, st=st):
            phi = np.zeros(u.shape)
            phi[mask] = x
            return eq.apply(st, phi)[mask]

        J = LinearOperator((nunk, nunk), matvec=matvec, dtype=float)
        P = LinearOperator((nunk, nunk), matvec=lambda x, d=diag: x / d, dtype=float)
        rhs = -st.R[mask]
        eta = max(cfg.linear_tol, min(1e-2, 1e-2 * r))
        delta, info = gmres(J, rhs, rtol=eta, atol=0.0, restart=restart,
                            maxiter=max(1, math.ceil(cfg.linear_max_iters / restart)), M=P)
        lin_rel = float(np.linalg.norm(J.matvec(delta) - rhs) / max(np.linalg.norm(rhs), 1e-300))
        if not np.all(np.isfinite(delta)) or (info != 0 and lin_rel > 0.5):
            return u, _classify_state(u, cfg, LINEAR_FAILURE), f"inner solve stagnated (relative residual {lin_rel:.3g})"
        alpha = 1.0
        while True:
            trial = u.copy()
            trial[mask] += alpha * delta
            ok = np.all(np.isfinite(trial)) and cfg.guard_low < np.min(trial) and np.max(trial) < cfg.guard_high
            if ok:
                with np.errstate(over="ignore", invalid="ignore"):
                    st_trial = eq.evaluate(trial)
                r_trial = eq.sup(st_trial) if np.all(np.isfinite(st_trial.R)) else math.inf
                if r_trial < (1.0 - 1e-4 * alpha) * r:
                    break
            alpha *= cfg.newton_damping
            if alpha < cfg.min_step:
                return u, _classify_state(u, cfg, STALLED), "line search could not reduce the residual"
        u, st, r = trial, st_trial, r_trial
        rec.record(r, u, alpha, linear_residual=lin_rel, **extra)
    if r <= cfg.residual_tol:
        return u, CONVERGED, ""
    return u, _classify_state(u, cfg, STALLED), "iteration limit reached"


def _spec_stages(spec: OperatorSpec, cfg: SolveConfig) -> list[OperatorSpec]:
    """Smoothing schedule: Gp problems march tau down, then polish with the exact operator."""
    base = spec.base if spec.kind == BLEND else spec
    if base.kind not in GP_KINDS:
        return [spec]
    if base.kind == GP_SOFT:
        taus = [t for t in cfg.tau_schedule if t > base.tau] + [base.tau]
        stages = [base.with_kind(GP_SOFT, tau=t) for t in taus]
    else:
        stages = [base.with_kind(GP_SOFT, tau=t) for t in cfg.tau_schedule]
        if cfg.exact_polish:
            stages.append(base)
    if spec.kind == BLEND:
        stages = [blend(s, spec.t) for s in stages]
    return stages


def newton_solve(u0: ScalarField, f, spec: OperatorSpec, S0: SymMatrixField, cfg: SolveConfig | None = None,
                 log_sink: Callable[[dict], None] | None = None) -> tuple[ScalarField, SolveReport]:
    """Damped Newton-Krylov for ``F(W(u)) = e^{-2u} f``.

    The spec is used as given; a GpExact spec runs semismooth Newton with the
    symmetric tie subgradient.  Box boundary values are held at ``u0``.
    """
    cfg = cfg or SolveConfig()
    grid = u0.grid
    eq = _Equation(grid, spec, _s0_full(S0, grid), a=_as_array(f, grid, "f"))
    rec = _Recorder(log_sink)
    u, cls, msg = _newton_core(eq, u0.values, cfg, rec)
    return ScalarField(grid, u), rec.report(cls, message=msg)


# --------------------------------------------------------------------------
# forced flow


def flow_solve(u0: ScalarField, f, spec: OperatorSpec, S0: SymMatrixField, cfg: SolveConfig | None = None,
               log_sink: Callable[[dict], None] | None = None) -> tuple[ScalarField, SolveReport]:
    """Explicit forced flow ``u_t = e^{2u} F(W(u)) - f``.

    Stationary points solve the scaled equation.  The step is capped by the
    explicit stability limit of the principal part and of the zeroth-order
    term; it is halved (and the step rejected) when the residual grows by more
    than ``flow_growth_slack`` relative, and grown by ``flow_growth`` otherwise.
    """
    cfg = cfg or SolveConfig()
    grid = u0.grid
    n = grid.dim
    fa = _as_array(f, grid, "f")
    eq = _Equation(grid, spec, _s0_full(S0, grid), a=fa)
    mask = eq.mask
    _, Lam = ellipticity_constants(spec)
    hmin2 = min(grid.spacing) ** 2
    rec = _Recorder(log_sink)

    u = np.array(u0.values, dtype=float, copy=True)
    st = eq.evaluate(u, need_jacobian=False)
    r = eq.sup(st)
    rec.record(r, u, 0.0, count=False)
    dt = cfg.flow_dt0
    steps = 0
    while r > cfg.residual_tol:
        cls = _classify_state(u, cfg, "")
        if cls:
            return ScalarField(grid, u), rec.report(cls, message="guard crossed")
        if steps >= cfg.flow_max_steps:
            return ScalarField(grid, u), rec.report(STALLED, message="step limit reached")
        e2u = np.exp(2.0 * u[mask])
        emax = float(np.max(e2u))
        cap = cfg.flow_cfl * hmin2 / (n * Lam * emax)
        # zeroth-order coefficient d/du (e^{2u} F) ~ 2 e^{2u} F = 2 (f + e^{2u} R)
        zeroth = float(np.max(np.abs(2.0 * (fa[mask] + e2u * st.R[mask]))))
        if zeroth > 0:
            cap = min(cap, 1.0 / zeroth)
        dt = min(dt, cap)
        trial = u.copy()
        trial[mask] += dt * e2u * st.R[mask]
        with np.errstate(over="ignore", invalid="ignore"):
            st_trial = eq.evaluate(trial, need_jacobian=False)
            r_trial = eq.sup(st_trial) if np.all(np.isfinite(st_trial.R)) else math.inf
        steps += 1
        if r_trial > r * (1.0 + cfg.flow_growth_slack) and dt > 1e-6 * cap:
            dt *= cfg.flow_safety
            continue
        u, st, r = trial, st_trial, r_trial
        rec.record(r, u, dt)
        dt *= cfg.flow_growth
    return ScalarField(grid, u), rec.report(CONVERGED)


# --------------------------------------------------------------------------
# continuation drivers


@dataclass
class _Path:
    """Converged continuation points: (t, min u, max u)."""

    points: list = field(default_factory=list)

    def add(self, t: float, u: np.ndarray) -> None:
        self.points.append((float(t), float(np.min(u)), float(np.max(u))))

    def trend(self, window: int = 4, margin: float = 0.1) -> str:
        """Blow-up direction suggested by the last ``window`` converged points, or ''."""
        pts = self.points[-window:]
        if len(pts) < window:
            return ""
        lows = [p[1] for p in pts]
        highs = [p[2] for p in pts]
        if all(b < a for a, b in zip(lows, lows[1:])) and lows[0] - lows[-1] > margin:
            return BLOWUP_LOW
        if all(b > a for a, b in zip(highs, highs[1:])) and highs[-1] - highs[0] > margin:
            return BLOWUP_HIGH
        return ""


def _march(make_eq: Callable[[float, OperatorSpec], _Equation], u: np.ndarray, ts: Sequence[float],
           stage: OperatorSpec, cfg: SolveConfig, rec: _Recorder, path: _Path,
           after_step: Callable[[float, np.ndarray], str] | None = None):
    """Newton-corrected continuation through the scheduled ``ts``.

    A failed step is halved, down to ``base / 2**max_bisections``; after a
    success the step doubles again, never overshooting the next scheduled t.
    Returns (u, t_reached, classification, message).
    """
    t_prev = 0.0
    path.add(0.0, u)
    base = ts[0]
    step = base
    min_step = base / 2 ** cfg.max_bisections
    queue = list(ts)
    while queue:
        t = min(queue[0], t_prev + step)
        u_new, cls, msg = _newton_core(make_eq(t, stage), u, cfg, rec, max_iters=cfg.continuation_iters,
                                       label=f"t={t:.6g}")
        if cls != CONVERGED:
            step = 0.5 * (t - t_prev)
            if cls in (BLOWUP_LOW, BLOWUP_HIGH) or step < min_step * (1 - 1e-12):
                return u, t_prev, cls, f"continuation failed at t={t:.6g}: {msg}"
            continue
        u, t_prev = u_new, t
        path.add(t, u)
        if t >= queue[0]:
            queue.pop(0)
        step = min(2.0 * step, base)
        if after_step is not None:
            cls = after_step(t, u)
            if cls:
                return u, t, cls, f"stopped at t={t:.6g}"
    return u, t_prev, CONVERGED, ""


def _polish(make_eq, u, stages, cfg, rec):
    """Run the remaining smoothing stages at t = 1; returns (u, classification, message, stage)."""
    stage = stages[0]
    for stage in stages[1:]:
        u_new, cls, msg = _newton_core(make_eq(1.0, stage), u, cfg, rec, label=stage.kind + (
            f"(tau={stage.tau})" if stage.tau else ""))
        if cls != CONVERGED:
            return u, cls, f"stage {stage.to_record()} failed: {msg}", stage
        u = u_new
    return u, CONVERGED, "", stage


def continuity_solve_negative(spec: OperatorSpec, S0: SymMatrixField, cfg: SolveConfig | None = None,
                              log_sink: Callable[[dict], None] | None = None,
                              level: float = -1.0) -> tuple[ScalarField, SolveReport]:
    """Solve ``F(e^{2u} W(u)) = level`` (default -1) by continuation from ``u = 0``.

    The t-family is ``F(e^{2u} W(u)) - t level - (1 - t) F(S0) = 0``, which
    ``u = 0`` solves at t = 0.  Gp problems are marched with the smoothest
    operator of the tau schedule, refined down the schedule at t = 1 and
    finally polished with the exact operator.
    """
    if not level < 0:
        raise PreconditionError("the negative case needs a negative level")
    cfg = cfg or SolveConfig()
    grid = S0.grid
    S0f = S0.full()
    FS0 = op_value(spec, S0f)
    if not np.all(FS0 < 0):
        raise PreconditionError(f"operator value of S0 must be negative everywhere (max {float(np.max(FS0)):.6g})")
    stages = _spec_stages(spec, cfg)
    for stage in stages:
        if not np.all(op_value(stage, S0f) < 0):
            raise PreconditionError(f"smoothed operator {stage.to_record()} is not negative on S0")

    def make_eq(t, stage):
        c0 = t * level + (1.0 - t) * op_value(stage, S0f)
        return _Equation(grid, stage, S0f, form="metric", c0=c0)

    rec = _Recorder(log_sink)
    u0 = np.zeros(grid.shape)
    u, t, cls, msg = _march(make_eq, u0, cfg.t_schedule(), stages[0], cfg, rec, _Path())
    final_stage = stages[0]
    if cls == CONVERGED:
        u, cls, msg, final_stage = _polish(make_eq, u, stages, cfg, rec)
    uf = ScalarField(grid, u)
    extra: dict[str, Any] = {"t_reached": t, "final_stage": final_stage.to_record()}
    exact = spec.base if spec.kind == BLEND else spec
    if exact.kind in GP_KINDS:
        exact = exact.with_kind(GP_EXACT)
    r_exact = make_eq(1.0, exact).sup(make_eq(1.0, exact).evaluate(u, need_jacobian=False))
    extra["final_residual_exact"] = r_exact
    bounds = []
    if cls == CONVERGED:
        bounds.append(check_c0_bounds(uf, exact, S0, level=level))
        if r_exact > cfg.residual_tol and final_stage.kind != GP_SOFT:
            cls, msg = STALLED, f"residual against {exact.kind} is {r_exact:.3g}"
    return uf, rec.report(cls, bounds=bounds, message=msg, **extra)


def harmonic_extension(boundary: ScalarField, tol: float = 1e-13, maxiter: int = 20_000) -> ScalarField:
    """Discrete harmonic function with the boundary layer of ``boundary`` (box grids)."""
    grid = boundary.grid
    if grid.periodic:
        raise ValueError("harmonic extension needs a box grid")
    mask = grid.interior_mask()
    h = grid.spacing
    b_vals = np.where(mask, 0.0, boundary.values)

    def neg_lap(a):
        return -sum(d2(a, k, h[k], False) for k in range(grid.dim))

    nunk = int(mask.sum())

    def matvec(x):
        phi = np.zeros(grid.shape)
        phi[mask] = x
        return neg_lap(phi)[mask]

    A = LinearOperator((nunk, nunk), matvec=matvec, dtype=float)
    rhs = -neg_lap(b_vals)[mask]
    x, info = cg(A, rhs, rtol=tol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise RuntimeError("harmonic extension did not converge")
    out = b_vals.copy()
    out[mask] = x
    return ScalarField(grid, out)


def dirichlet_solve(problem: DirichletProblem, cfg: SolveConfig | None = None,
                    log_sink: Callable[[dict], None] | None = None) -> tuple[ScalarField, SolveReport]:
    """Boundary-value problem by continuation through ``F_t = t F + (1 - t) sigma_1``.

    The family is ``F_t(W(u)) = t e^{-2u} f + (1 - t) f_*`` with
    ``f_* = sigma_1(W(u_0))`` and ``u_0`` the harmonic extension of the boundary
    data, so ``u_0`` solves the t = 0 member exactly.
    """
    cfg = cfg or SolveConfig()
    grid = problem.boundary_values.grid
    if not np.all(np.isfinite(problem.boundary_values.values)):
        raise ValueError("boundary values must be finite")
    spec = problem.spec
    S0f = problem.S0.full()
    fa = np.asarray(problem.f.values)
    u0 = harmonic_extension(problem.boundary_values).values
    fstar = np.trace(schouten_array(u0, grid, S0f), axis1=-2, axis2=-1)
    stages = _spec_stages(spec.base if spec.kind == BLEND else spec, cfg)

    def make_eq(t, stage):
        op = blend(stage, t) if t < 1.0 else stage
        return _Equation(grid, op, S0f, c0=(1.0 - t) * fstar, a=t * fa)

    rec = _Recorder(log_sink)
    u, t, cls, msg = _march(make_eq, u0, cfg.t_schedule(), stages[0], cfg, rec, _Path())
    final_stage = stages[0]
    if cls == CONVERGED:
        u, cls, msg, final_stage = _polish(make_eq, u, stages, cfg, rec)
    return ScalarField(grid, u), rec.report(cls, message=msg, t_reached=t, final_stage=final_stage.to_record())


def drive_psi(t: float) -> float:
    """Cutoff with psi(0) = 0 and psi = 1 for t >= 1/2."""
    return min(max(2.0 * t, 0.0), 1.0)


def positive_case_drive(spec: OperatorSpec, S0: SymMatrixField, cfg: SolveConfig | None = None,
                        log_sink: Callable[[dict], None] | None = None) -> tuple[ScalarField, SolveReport]:
    """Deformation towards ``F(W(u)) = kappa e^{-2u}`` on a torus chart.

    At parameter t the equation is::

        F(W_flat(u) + psi S0 + (1 - psi) I/2)
            = kappa (1 - t) (mean e^{-(n+1) u})^{2/(n+1)} + kappa psi e^{-2u}

    with ``kappa = F(I/2)``, so ``u = 0`` solves t = 0 exactly.  The volume term
    is differentiated (a rank-one Jacobian update) rather than lagged.  A run
    ends in ``blowup_low`` once the concentration scale ``2 e^{min u}`` drops
    below ``resolution_cells`` grid cells, or a guard is crossed.
    """
    cfg = cfg or SolveConfig()
    grid = S0.grid
    if not grid.periodic:
        raise ValueError("positive_case_drive works on periodic grids")
    n = grid.dim
    S0f = S0.full()
    half = 0.5 * np.eye(n)
    stages = _spec_stages(spec, cfg)
    hmin = min(grid.spacing)

    def make_eq(t, stage):
        psi = drive_psi(t)
        kappa = float(op_value(stage, half))
        return _Equation(grid, stage, psi * S0f + (1.0 - psi) * half, a=kappa * psi, volume_coef=kappa * (1.0 - t))

    def resolved(t, u):
        if 2.0 * math.exp(float(np.min(u))) < cfg.resolution_cells * hmin:
            return BLOWUP_LOW
        return _classify_state(u, cfg, "")

    rec = _Recorder(log_sink)
    path = _Path()
    u, t, cls, msg = _march(make_eq, np.zeros(grid.shape), cfg.t_schedule(), stages[0], cfg, rec, path, resolved)
    final_stage = stages[0]
    if cls == CONVERGED:
        u, cls, msg, final_stage = _polish(make_eq, u, stages, cfg, rec)
        if cls == CONVERGED:
            cls = resolved(1.0, u) or CONVERGED
    if cls in (STALLED, LINEAR_FAILURE):
        trend = path.trend()
        if trend:
            cls = trend
            msg += f"; converged path shows {trend.replace('_', ' ')} as t approaches {t:.6g}"
    extra = {"t_reached": t, "final_stage": final_stage.to_record(),
             "concentration_scale": 2.0 * math.exp(float(np.min(u))),
             "path": [list(p) for p in path.points]}
    return ScalarField(grid, u), rec.report(cls, message=msg, **extra)
