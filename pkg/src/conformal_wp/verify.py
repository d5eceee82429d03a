"""Checks of the a-priori statements: model solutions, C0 bounds, gradient and
Harnack monitors, volume comparisons and conformal invariance.

Every check returns an :class:`EstimateReport`.  Bounds that the theory only
asserts to exist are monitored against recorded budgets (see :func:`budget`).
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from .fields import (
    GridSpec,
    ScalarField,
    SymMatrixField,
    _check_same_grid,
    background_from_factor,
    conformal_schouten,
    conformal_volume,
    grad_array,
    schouten_array,
)
from .operators import MIN_RICCI, OperatorSpec, g_p_exact, op_value


class PreconditionError(ValueError):
    """The data violate the hypothesis a check or driver relies on."""


@dataclass(frozen=True)
class EstimateReport:
    name: str
    measured: float
    bound_or_reference: float
    passed: bool
    context: str = ""
    applicable: bool = True
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "measured": self.measured,
            "bound_or_reference": self.bound_or_reference,
            "pass": self.passed,
            "applicable": self.applicable,
            "context": self.context,
            "extras": self.extras,
        }


def family_max(reports: Sequence[EstimateReport]) -> float:
    """Largest applicable measurement; adding reports never lowers it."""
    vals = [r.measured for r in reports if r.applicable]
    return max(vals) if vals else -math.inf


_BUDGETS: dict[str, float] | None = None


def budget(name: str) -> float:
    """Recorded reference value of a monitored constant (first-release measurement)."""
    global _BUDGETS
    if _BUDGETS is None:
        text = resources.files("conformal_wp").joinpath("budgets.json").read_text()
        _BUDGETS = json.loads(text)
    return float(_BUDGETS[name])


REGRESSION_FACTOR = 2.0


# --------------------------------------------------------------------------
# model solutions


@dataclass(frozen=True)
class ModelSolutionSpec:
    """``u(x) = log((lam^2 + |x - x0|^2) / (2 lam sqrt(p (n - p) / c)))``."""

    n: int
    p: int
    c: float
    lam: float = 1.0
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n < 2 or not 1 <= self.p <= self.n - 1:
            raise ValueError("need n >= 2 and 1 <= p <= n-1")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.center is not None and len(self.center) != self.n:
            raise ValueError("center must have n coordinates")

    @property
    def x0(self) -> tuple[float, ...]:
        return tuple(self.center) if self.center is not None else (0.0,) * self.n

    @property
    def k(self) -> float:
        return math.sqrt(self.p * (self.n - self.p) / self.c)

    def evaluate(self, *coords) -> np.ndarray:
        r2 = sum((x - a) ** 2 for x, a in zip(coords, self.x0))
        return np.log((self.lam**2 + r2) / (2.0 * self.lam * self.k))

    def gradient_sq(self, *coords) -> np.ndarray:
        r2 = sum((x - a) ** 2 for x, a in zip(coords, self.x0))
        return 4.0 * r2 / (self.lam**2 + r2) ** 2


def model_sphere_solution(spec: ModelSolutionSpec, grid: GridSpec) -> ScalarField:
    """Sample the spherical model solution on a box grid; ``u = 0`` when c <= 0."""
    if grid.periodic:
        raise ValueError("the model solution lives on R^n; use a box grid")
    if grid.dim != spec.n:
        raise ValueError("grid dimension does not match the model")
    if spec.c <= 0:
        warnings.warn("c <= 0: the model solution is the flat factor u = 0", stacklevel=2)
        return ScalarField.constant(grid, 0.0)
    return ScalarField.from_function(grid, spec.evaluate)


def model_residual(spec: ModelSolutionSpec, grid: GridSpec, op: OperatorSpec | None = None) -> ScalarField:
    """``F(W(u)) - c e^{-2u}`` with S0 = 0 for the sampled model (interior values meaningful)."""
    op = op or OperatorSpec("gp_exact", spec.n, p=spec.p)
    u = model_sphere_solution(spec, grid).values
    W = schouten_array(u, grid)
    return ScalarField(grid, op_value(op, W) - spec.c * np.exp(-2.0 * u))


def _stencil_schouten(fn, pts: np.ndarray, h: float) -> np.ndarray:
    """Discrete W(u) at points ``pts`` (m, n) using the grid stencils on a closed form."""
    m, n = pts.shape
    cols = [pts[:, k] for k in range(n)]
    u0 = fn(*cols)

    def at(shift):
        return fn(*[cols[k] + shift[k] * h for k in range(n)])

    plus = []
    minus = []
    e = np.eye(n)
    for i in range(n):
        plus.append(at(e[i]))
        minus.append(at(-e[i]))
    W = np.empty((m, n, n))
    g = np.stack([(plus[i] - minus[i]) / (2 * h) for i in range(n)], axis=-1)
    for i in range(n):
        W[:, i, i] = (plus[i] - 2 * u0 + minus[i]) / h**2
        for j in range(i):
            mix = (at(e[i] + e[j]) - at(e[i] - e[j]) - at(-e[i] + e[j]) + at(-e[i] - e[j])) / (4 * h * h)
            W[:, i, j] = mix
            W[:, j, i] = mix
    W += g[:, :, None] * g[:, None, :]
    half = 0.5 * np.einsum("mk,mk->m", g, g)
    W[:, np.arange(n), np.arange(n)] -= half[:, None]
    return W, u0


def model_residual_sup(spec: ModelSolutionSpec, grid: GridSpec, ps: Sequence[int] | None = None,
                       chunk: int = 200_000) -> dict[int, float]:
    """Interior sup-norm of ``G_p(W_h(u)) - c_p e^{-2u}`` for several p at once.

    Uses ``c_p = c p (n - p) / (spec.p (n - spec.p))`` so that the sampled u is the
    same for every p.  When the grid is a cube centred on the model's centre the
    sweep visits one point per orbit of the signed-permutation group, which
    leaves the discrete residual invariant.
    """
    n = spec.n
    ps = list(ps) if ps is not None else list(range(1, n))
    scale = spec.c / (spec.p * (n - spec.p))
    cs = {p: scale * p * (n - p) for p in ps}
    if grid.periodic or grid.dim != n:
        raise ValueError("need a box grid of matching dimension")
    out = {p: 0.0 for p in ps}
    h = grid.spacing[0]
    symmetric = (
        len(set(grid.shape)) == 1
        and len(set(grid.extent)) == 1
        and all(abs(a) == 0.0 for a in spec.x0)
    )

    def consume(pts):
        W, u0 = _stencil_schouten(spec.evaluate, pts, h)
        lam = np.linalg.eigvalsh(W)
        em = np.exp(-2.0 * u0)
        for p in ps:
            r = np.abs(g_p_exact(lam, p) - cs[p] * em)
            out[p] = max(out[p], float(np.max(r)))

    if symmetric:
        N = grid.shape[0]
        coords = grid.axis_coords(0)
        half = [k for k in range(1, N - 1) if coords[k] >= 0.0]
        xs = coords[half]
        m = len(half)
        rest = np.array(list(itertools.combinations_with_replacement(range(m), n - 1)), dtype=np.int64)
        buf = []
        count = 0
        for i1 in range(m):
            sel = rest[rest[:, 0] >= i1]
            if sel.size == 0:
                continue
            idx = np.concatenate([np.full((len(sel), 1), i1), sel], axis=1)
            buf.append(xs[idx])
            count += len(sel)
            if count >= chunk:
                consume(np.concatenate(buf))
                buf, count = [], 0
        if buf:
            consume(np.concatenate(buf))
    else:
        inner = [grid.axis_coords(a)[1:-1] for a in range(n)]
        for x1 in inner[0]:
            mesh = np.meshgrid(*([np.array([x1])] + inner[1:]), indexing="ij")
            consume(np.stack([m_.ravel() for m_ in mesh], axis=-1))
    return out


# --------------------------------------------------------------------------
# C0 bounds


def check_c0_bounds(u: ScalarField, spec: OperatorSpec, S0: SymMatrixField, level: float = -1.0,
                    slack: float = 1e-6, context: str = "") -> EstimateReport:
    """Maximum-principle sandwich for ``F(e^{2u} W(u)) = level < 0``.

    ``level / min F(S0) <= e^{2u} <= level / max F(S0)``; for ``level = -1`` this
    is ``1/(-min F(S0)) <= e^{2u} <= 1/(-max F(S0))``.
    """
    _check_same_grid(u.grid, S0.grid)
    if not level < 0:
        raise PreconditionError("the sandwich needs a negative right-hand side")
    FS0 = op_value(spec, S0.full())
    if not np.all(FS0 < 0):
        raise PreconditionError("operator value of S0 must be negative everywhere")
    lower = level / float(np.min(FS0))
    upper = level / float(np.max(FS0))
    e2u = np.exp(2.0 * u.values)
    emin, emax = float(np.min(e2u)), float(np.max(e2u))
    violation = max(lower - emin, emax - upper)
    return EstimateReport(
        name="c0_bounds",
        measured=violation,
        bound_or_reference=slack,
        passed=bool(violation <= slack),
        context=context,
        extras={"e2u_min": emin, "e2u_max": emax, "lower": lower, "upper": upper},
    )


# --------------------------------------------------------------------------
# local monitors


def _ball(grid: GridSpec, center: Sequence[float], radius: float) -> np.ndarray:
    center = tuple(float(c) for c in center)
    if len(center) != grid.dim:
        raise ValueError("center must have one coordinate per axis")
    tol = 1e-12 * max(grid.extent)
    for a in range(grid.dim):
        xs = grid.axis_coords(a)
        if grid.periodic:
            if 2 * radius > grid.extent[a]:
                raise ValueError("ball does not fit in the torus")
        elif center[a] - radius < xs[0] - tol or center[a] + radius > xs[-1] + tol:
            raise ValueError("ball is not contained in the grid")
    r2 = np.zeros(grid.shape)
    for a, x in enumerate(grid.coords()):
        d = x - center[a]
        if grid.periodic:
            L = grid.extent[a]
            d = (d + 0.5 * L) % L - 0.5 * L
        r2 = r2 + d * d
    return r2 <= radius * radius * (1 + 1e-12)


def gradient_estimate_ratio(u: ScalarField, f: ScalarField, center: Sequence[float] | None = None,
                            radius: float = 1.0, *, spec: OperatorSpec | None = None,
                            S0: SymMatrixField | None = None, residual_tol: float = 0.25,
                            budget_value: float = math.inf, context: str = "") -> EstimateReport:
    """``sup_{B/2} |du|^2 / (1 + |f|_{C^1(B)} e^{-2 inf_B u})`` on the ball ``B``.

    When ``spec`` is given, the field is first checked to solve the equation
    on ``B`` to relative accuracy ``residual_tol``; otherwise the report is
    flagged not applicable.
    """
    grid = u.grid
    _check_same_grid(grid, f.grid)
    center = center if center is not None else (0.0,) * grid.dim
    B = _ball(grid, center, radius)
    Bh = _ball(grid, center, 0.5 * radius)
    gu = grad_array(u.values, grid)
    gf = grad_array(f.values, grid)
    grad2 = np.einsum("...k,...k->...", gu, gu)
    fC1 = float(np.max(np.abs(f.values[B])) + np.max(np.sqrt(np.einsum("...k,...k->...", gf, gf))[B]))
    inf_u = float(np.min(u.values[B]))
    ratio = float(np.max(grad2[Bh])) / (1.0 + fC1 * math.exp(-2.0 * inf_u))
    applicable = True
    rel = None
    if spec is not None:
        S0f = S0.full() if S0 is not None else None
        W = schouten_array(u.values, grid, S0f)
        rhs = np.exp(-2.0 * u.values) * f.values
        res = op_value(spec, W) - rhs
        inner = B & grid.interior_mask()
        rel = float(np.max(np.abs(res[inner])) / (1.0 + np.max(np.abs(rhs[inner]))))
        applicable = rel <= residual_tol
    return EstimateReport(
        name="gradient_estimate",
        measured=ratio,
        bound_or_reference=budget_value,
        passed=bool(applicable and ratio <= budget_value),
        context=context,
        applicable=applicable,
        extras={"inf_u": inf_u, "f_C1": fC1, "sup_grad_sq": float(np.max(grad2[Bh])), "relative_residual": rel},
    )


def harnack_defect(u: ScalarField, R: float, center: Sequence[float] | None = None,
                   budget_value: float = math.inf, context: str = "") -> EstimateReport:
    """``C = exp(2 log R - min_{B_R} u - max_{B_2R} u)``."""
    grid = u.grid
    center = center if center is not None else (0.0,) * grid.dim
    BR = _ball(grid, center, R)
    B2R = _ball(grid, center, 2.0 * R)
    lo = float(np.min(u.values[BR]))
    hi = float(np.max(u.values[B2R]))
    C = math.exp(2.0 * math.log(R) - lo - hi)
    return EstimateReport(
        name="harnack",
        measured=C,
        bound_or_reference=budget_value,
        passed=bool(C <= budget_value),
        context=context,
        extras={"min_BR": lo, "max_B2R": hi, "R": R},
    )


# --------------------------------------------------------------------------
# global geometry


def _metric_min_ricci(v: np.ndarray, grid: GridSpec, S0f: np.ndarray | None, spec: OperatorSpec) -> np.ndarray:
    """Smallest Ricci-type eigenvalue of ``e^{-2v}`` times the chart metric."""
    W = schouten_array(v, grid, S0f)
    return np.exp(2.0 * v) * op_value(spec, W)


def volume_order_check(u1: ScalarField, u2: ScalarField, w: ScalarField | None = None,
                       spec_minricci: OperatorSpec | None = None, *, S0: SymMatrixField | None = None,
                       curvature_tol: float = 1e-9, volume_rtol: float = 1e-12,
                       context: str = "") -> EstimateReport:
    """Pointwise ordered negative curvature must give ordered volumes.

    The metrics are ``g_i = e^{-2 u_i} g_0``.  The background ``g_0`` is either
    ``e^{-2w}`` times the flat chart metric (``w`` given) or the chart metric
    with prescribed Schouten field ``S0``.  If ``R(g_1) <= R(g_2) < 0`` pointwise
    then ``vol(g_1) <= vol(g_2)`` is expected (and symmetrically).
    """
    grid = u1.grid
    _check_same_grid(grid, u2.grid)
    spec = spec_minricci or OperatorSpec(MIN_RICCI, grid.dim)
    if w is not None and S0 is not None:
        raise ValueError("give either w or S0")
    if w is not None:
        _check_same_grid(grid, w.grid)
        wv = w.values
        S0f = None
    else:
        wv = np.zeros(grid.shape)
        S0f = S0.full() if S0 is not None else None
    inner = grid.interior_mask()
    R1 = _metric_min_ricci(u1.values + wv, grid, S0f, spec)[inner]
    R2 = _metric_min_ricci(u2.values + wv, grid, S0f, spec)[inner]
    if np.max(R1) >= 0 or np.max(R2) >= 0:
        raise PreconditionError("both metrics need negative curvature at every point")
    vol1 = conformal_volume(ScalarField(grid, u1.values + wv))
    vol2 = conformal_volume(ScalarField(grid, u2.values + wv))
    tol = curvature_tol * (1.0 + max(np.max(np.abs(R1)), np.max(np.abs(R2))))
    one_le_two = bool(np.all(R1 <= R2 + tol))
    two_le_one = bool(np.all(R2 <= R1 + tol))
    vtol = volume_rtol * max(vol1, vol2)
    if one_le_two and two_le_one:
        expected, measured = "equal", abs(vol1 - vol2)
        ok = measured <= max(vtol, 1e-6 * max(vol1, vol2))
    elif one_le_two:
        expected, measured = "vol1<=vol2", vol1 - vol2
        ok = measured <= vtol
    elif two_le_one:
        expected, measured = "vol2<=vol1", vol2 - vol1
        ok = measured <= vtol
    else:
        expected, measured, ok = "unordered", math.nan, False
    # agreement with the direct comparison of conformal factors
    if np.all(u1.values <= u2.values):
        direct = "vol1>=vol2"
    elif np.all(u2.values <= u1.values):
        direct = "vol2>=vol1"
    else:
        direct = "unordered"
    return EstimateReport(
        name="volume_order",
        measured=float(measured),
        bound_or_reference=0.0,
        passed=bool(ok),
        context=context,
        extras={
            "vol1": vol1, "vol2": vol2, "expected": expected, "factor_order": direct,
            "curv1": [float(np.min(R1)), float(np.max(R1))],
            "curv2": [float(np.min(R2)), float(np.max(R2))],
        },
    )


def conformal_invariance_check(u: ScalarField, w: ScalarField, spec: OperatorSpec | None = None,
                               context: str = "") -> EstimateReport:
    """Defect between ``W_{g0}(u)`` with ``g0 = e^{-2w} flat`` and ``W_flat(u + w)``."""
    _check_same_grid(u.grid, w.grid)
    grid = u.grid
    spec = spec or OperatorSpec(MIN_RICCI, grid.dim)
    lhs = conformal_schouten(u, background_from_factor(w), factor=w)
    rhs = conformal_schouten(u + w, SymMatrixField.zeros(grid))
    defect = float(np.max(np.abs(op_value(spec, lhs.full()) - op_value(spec, rhs.full()))))
    return EstimateReport(
        name="conformal_invariance",
        measured=defect,
        bound_or_reference=0.0,
        passed=True,
        context=context,
        extras={"h": max(grid.spacing)},
    )


def sphere_volume(n: int) -> float:
    """Volume of the unit round n-sphere."""
    return 2.0 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)


def bishop_volume_diagnostic(u: ScalarField, w: ScalarField | None = None, spec: OperatorSpec | None = None,
                             ricci_rtol: float = 1e-3, slack: float = 1e-2, context: str = "") -> EstimateReport:
    """Volume of ``e^{-2(u+w)} flat`` against ``vol(S^n)`` when Ricci >= n - 1.

    The curvature hypothesis is checked at interior points.
    """
    grid = u.grid
    n = grid.dim
    spec = spec or OperatorSpec(MIN_RICCI, n)
    v = u.values if w is None else u.values + w.values
    R = _metric_min_ricci(v, grid, None, spec)[grid.interior_mask()]
    rmin = float(np.min(R))
    if rmin < (n - 1) * (1.0 - ricci_rtol):
        raise PreconditionError(f"min Ricci {rmin:.6g} is below (n-1)(1-{ricci_rtol})")
    vol = conformal_volume(ScalarField(grid, v))
    ref = sphere_volume(n)
    return EstimateReport(
        name="bishop_volume",
        measured=vol,
        bound_or_reference=ref,
        passed=bool(vol <= ref * (1.0 + slack)),
        context=context,
        extras={"min_ricci": rmin, "ratio": vol / ref},
    )
