"""Eigenvalue-sorted curvature operators and their first derivatives.

All functions accept a single matrix / eigenvalue vector or a batch with the
matrix (or vector) axes last, so the same code serves pointwise probes and
whole grids.

Operators
---------
``gp_exact``     (n-p) * (sum of the p smallest eigenvalues) + p * (sum of the rest)
``gp_soft``      the same with the p-smallest sum replaced by a log-sum-exp softmin
``pucci_minus``  lambda0 * sum(e > 0) + Lambda0 * sum(e < 0)
``pucci_plus``   Lambda0 * sum(e > 0) + lambda0 * sum(e < 0)
``sigma1``       trace
``min_ricci``    (n-2) * smallest + trace   (smallest Ricci eigenvalue from Schouten)
``max_ricci``    (n-2) * largest + trace
``blend``        t * base + (1 - t) * trace
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

GP_EXACT = "gp_exact"
GP_SOFT = "gp_soft"
PUCCI_MINUS = "pucci_minus"
PUCCI_PLUS = "pucci_plus"
SIGMA1 = "sigma1"
MIN_RICCI = "min_ricci"
MAX_RICCI = "max_ricci"
BLEND = "blend"

KINDS = (GP_EXACT, GP_SOFT, PUCCI_MINUS, PUCCI_PLUS, SIGMA1, MIN_RICCI, MAX_RICCI, BLEND)
GP_KINDS = (GP_EXACT, GP_SOFT)
PUCCI_KINDS = (PUCCI_MINUS, PUCCI_PLUS)

# relative tolerance under which sorted eigenvalues count as tied
TIE_RTOL = 1e-9


class OperatorSpecError(ValueError):
    """Invalid operator parameters; ``field`` names the offending record key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    n: int
    p: int | None = None
    tau: float | None = None
    lambda0: float | None = None
    Lambda0: float | None = None
    t: float | None = None
    base: "OperatorSpec | None" = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OperatorSpecError("kind", f"unknown operator kind {self.kind!r}")
        if self.n < 2:
            raise OperatorSpecError("n", "dimension must be >= 2")
        if self.kind in GP_KINDS:
            if self.p is None:
                raise OperatorSpecError("p", "required for Gp operators")
            if not 1 <= self.p <= self.n - 1:
                raise OperatorSpecError("p", f"must lie in 1..{self.n - 1}, got {self.p}")
        if self.kind == GP_SOFT:
            if self.tau is None:
                raise OperatorSpecError("tau", "required for gp_soft")
            if not self.tau > 0:
                raise OperatorSpecError("tau", f"must be > 0, got {self.tau}")
        if self.kind in PUCCI_KINDS:
            for name in ("lambda0", "Lambda0"):
                if getattr(self, name) is None:
                    raise OperatorSpecError(name, "required for Pucci operators")
            if not 0 < self.lambda0 <= self.Lambda0:
                raise OperatorSpecError("lambda0", "need 0 < lambda0 <= Lambda0")
        if self.kind == BLEND:
            if self.t is None:
                raise OperatorSpecError("t", "required for blend")
            if not 0.0 <= self.t <= 1.0:
                raise OperatorSpecError("t", f"must lie in [0, 1], got {self.t}")
            if self.base is None:
                raise OperatorSpecError("base", "required for blend")
            if self.base.kind == BLEND:
                raise OperatorSpecError("base", "blend nesting depth is limited to 1")
            if self.base.n != self.n:
                raise OperatorSpecError("base", "dimension mismatch with base operator")

    @property
    def concave(self) -> bool:
        """True in the concave regime (p <= n/2 for Gp kinds)."""
        if self.kind in GP_KINDS:
            return 2 * self.p <= self.n
        if self.kind == BLEND:
            return self.base.concave
        return self.kind in (PUCCI_MINUS, SIGMA1, MIN_RICCI)

    @property
    def convex(self) -> bool:
        if self.kind in GP_KINDS:
            return 2 * self.p >= self.n
        if self.kind == BLEND:
            return self.base.convex
        return self.kind in (PUCCI_PLUS, SIGMA1, MAX_RICCI)

    def with_kind(self, kind: str, **changes) -> "OperatorSpec":
        params = dict(n=self.n, p=self.p, tau=self.tau, lambda0=self.lambda0, Lambda0=self.Lambda0)
        params.update(changes)
        return OperatorSpec(kind=kind, **params)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"kind": self.kind}
        for key in ("p", "tau", "lambda0", "Lambda0", "t"):
            val = getattr(self, key)
            if val is not None:
                rec[key] = val
        if self.base is not None:
            rec["base"] = self.base.to_record()
        return rec

    @classmethod
    def from_record(cls, record: dict[str, Any], n: int) -> "OperatorSpec":
        allowed = {"kind", "p", "tau", "lambda0", "Lambda0", "t", "base"}
        unknown = set(record) - allowed
        if unknown:
            raise OperatorSpecError(sorted(unknown)[0], "unknown operator key")
        if "kind" not in record:
            raise OperatorSpecError("kind", "missing")
        base = record.get("base")
        if base is not None:
            base = cls.from_record(base, n)
        return cls(
            kind=record["kind"],
            n=n,
            p=record.get("p"),
            tau=record.get("tau"),
            lambda0=record.get("lambda0"),
            Lambda0=record.get("Lambda0"),
            t=record.get("t"),
            base=base,
        )


def gp_exact(n: int, p: int) -> OperatorSpec:
    return OperatorSpec(GP_EXACT, n, p=p)


def gp_soft(n: int, p: int, tau: float) -> OperatorSpec:
    return OperatorSpec(GP_SOFT, n, p=p, tau=tau)


def pucci_minus(n: int, lambda0: float, Lambda0: float) -> OperatorSpec:
    return OperatorSpec(PUCCI_MINUS, n, lambda0=lambda0, Lambda0=Lambda0)


def pucci_plus(n: int, lambda0: float, Lambda0: float) -> OperatorSpec:
    return OperatorSpec(PUCCI_PLUS, n, lambda0=lambda0, Lambda0=Lambda0)


def sigma1(n: int) -> OperatorSpec:
    return OperatorSpec(SIGMA1, n)


def blend(base: OperatorSpec, t: float) -> OperatorSpec:
    return OperatorSpec(BLEND, base.n, t=t, base=base)


# --------------------------------------------------------------------------
# eigen-decomposition


@dataclass(frozen=True)
class EigenDecomp:
    lambdas: np.ndarray
    frame: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return np.einsum("...ik,...k,...jk->...ij", self.frame, self.lambdas, self.frame)


def eig_sym_ascending(A) -> EigenDecomp:
    """Ascending eigenvalues and an orthonormal frame (columns match ``lambdas``)."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError("matrix must be square")
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    lam, Q = np.linalg.eigh(A)
    return EigenDecomp(lam, Q)


# --------------------------------------------------------------------------
# eigenvalue functions


def _check_p(n: int, p: int) -> None:
    if not 1 <= p <= n - 1:
        raise ValueError(f"p must lie in 1..{n - 1}, got {p}")


def g_p_exact(lambdas, p: int):
    """p * sigma_1 + (n - 2p) * (sum of the p smallest entries)."""
    lam = np.sort(np.asarray(lambdas, dtype=float), axis=-1)
    n = lam.shape[-1]
    _check_p(n, p)
    return p * lam.sum(axis=-1) + (n - 2 * p) * lam[..., :p].sum(axis=-1)


# the Weitzenboeck action on p-forms of a locally conformally flat manifold
weitzenbock_curvature = g_p_exact


def _log_esp(a: np.ndarray, p: int, skip: int | None = None) -> np.ndarray:
    """log e_j(exp(a)) for j = 0..p, computed in the log domain.

    ``skip`` drops one index from the variable set.
    """
    n = a.shape[-1]
    E = np.full(a.shape[:-1] + (p + 1,), -np.inf)
    E[..., 0] = 0.0
    count = 0
    for i in range(n):
        if i == skip:
            continue
        count += 1
        ai = a[..., i]
        for j in range(min(count, p), 0, -1):
            E[..., j] = np.logaddexp(E[..., j], E[..., j - 1] + ai)
    return E


def softmin_p(lambdas, p: int, tau: float):
    """-tau log sum over p-subsets P of exp(-sum_P lambda / tau)."""
    lam = np.asarray(lambdas, dtype=float)
    return -tau * _log_esp(-lam / tau, p)[..., p]


def softmin_weights(lambdas, p: int, tau: float) -> np.ndarray:
    """Membership probability of each index in the Gibbs measure over p-subsets.

    Each weight lies in [0, 1] and they sum to p; this is the gradient of
    :func:`softmin_p`.
    """
    lam = np.asarray(lambdas, dtype=float)
    n = lam.shape[-1]
    a = -lam / tau
    logEp = _log_esp(a, p)[..., p]
    w = np.empty_like(lam)
    for i in range(n):
        if p == 1:
            rest = np.zeros(lam.shape[:-1])
        else:
            rest = _log_esp(a, p - 1, skip=i)[..., p - 1]
        w[..., i] = np.exp(a[..., i] + rest - logEp)
    return w


def g_p_soft(lambdas, p: int, tau: float):
    """Smooth approximation p * sigma_1 + (n - 2p) * softmin_p.

    Within |n - 2p| * tau * log C(n, p) of :func:`g_p_exact`; below it for
    p <= n/2 and above it for p >= n/2.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    lam = np.asarray(lambdas, dtype=float)
    n = lam.shape[-1]
    _check_p(n, p)
    if 2 * p == n:
        return p * lam.sum(axis=-1)
    return p * lam.sum(axis=-1) + (n - 2 * p) * softmin_p(lam, p, tau)


def g_p_soft_grad(lambdas, p: int, tau: float) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float)
    n = lam.shape[-1]
    if 2 * p == n:
        return np.full(lam.shape, float(p))
    return p + (n - 2 * p) * softmin_weights(lam, p, tau)


def soft_error_bound(n: int, p: int, tau: float) -> float:
    return abs(n - 2 * p) * tau * math.log(math.comb(n, p))


# --------------------------------------------------------------------------
# dispatch on eigenvalues


def _tie_average(lam: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Average ``weights`` over blocks of (numerically) equal sorted eigenvalues."""
    n = lam.shape[-1]
    scale = 1.0 + np.max(np.abs(lam), axis=-1, keepdims=True)
    breaks = np.diff(lam, axis=-1) > TIE_RTOL * scale
    block = np.concatenate([np.zeros(lam.shape[:-1] + (1,), dtype=int), np.cumsum(breaks, axis=-1)], axis=-1)
    out = np.empty_like(weights)
    for b in range(n):
        mask = block == b
        cnt = mask.sum(axis=-1, keepdims=True)
        tot = np.where(mask, weights, 0.0).sum(axis=-1, keepdims=True)
        mean = np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)
        out = np.where(mask, mean, out)
    return out


def _sorted_weights(n: int, hi_count: int, hi: float, lo: float) -> np.ndarray:
    w = np.full(n, lo)
    w[:hi_count] = hi
    return w


def value_from_eigs(spec: OperatorSpec, lam: np.ndarray):
    """Operator value from ascending eigenvalues ``lam`` (..., n)."""
    n = lam.shape[-1]
    if n != spec.n:
        raise ValueError(f"operator is {spec.n}-dimensional, got {n} eigenvalues")
    k = spec.kind
    if k == GP_EXACT:
        return g_p_exact(lam, spec.p)
    if k == GP_SOFT:
        return g_p_soft(lam, spec.p, spec.tau)
    if k in PUCCI_KINDS:
        pos = np.where(lam > 0, lam, 0.0).sum(axis=-1)
        neg = np.where(lam < 0, lam, 0.0).sum(axis=-1)
        if k == PUCCI_MINUS:
            return spec.lambda0 * pos + spec.Lambda0 * neg
        return spec.Lambda0 * pos + spec.lambda0 * neg
    if k == SIGMA1:
        return lam.sum(axis=-1)
    if k == MIN_RICCI:
        return (n - 2) * lam[..., 0] + lam.sum(axis=-1)
    if k == MAX_RICCI:
        return (n - 2) * lam[..., -1] + lam.sum(axis=-1)
    return spec.t * value_from_eigs(spec.base, lam) + (1.0 - spec.t) * lam.sum(axis=-1)


def eig_weights(spec: OperatorSpec, lam: np.ndarray) -> np.ndarray:
    """dF/dlambda_i at ascending ``lam``; ties resolved by the symmetric subgradient."""
    n = lam.shape[-1]
    k = spec.kind
    if k == GP_EXACT:
        w = _sorted_weights(n, spec.p, float(n - spec.p), float(spec.p))
        return _tie_average(lam, np.broadcast_to(w, lam.shape))
    if k == GP_SOFT:
        return g_p_soft_grad(lam, spec.p, spec.tau)
    if k in PUCCI_KINDS:
        lo, hi = spec.lambda0, spec.Lambda0
        on_pos, on_neg = (lo, hi) if k == PUCCI_MINUS else (hi, lo)
        scale = 1.0 + np.max(np.abs(lam), axis=-1, keepdims=True)
        w = np.where(lam > 0, on_pos, on_neg)
        return np.where(np.abs(lam) <= TIE_RTOL * scale, 0.5 * (lo + hi), w)
    if k == SIGMA1:
        return np.ones_like(lam)
    if k == MIN_RICCI:
        w = _sorted_weights(n, 1, float(n - 1), 1.0)
        return _tie_average(lam, np.broadcast_to(w, lam.shape))
    if k == MAX_RICCI:
        w = _sorted_weights(n, n - 1, 1.0, float(n - 1))
        return _tie_average(lam, np.broadcast_to(w, lam.shape))
    return spec.t * eig_weights(spec.base, lam) + (1.0 - spec.t)


# --------------------------------------------------------------------------
# matrix-level API


def _check_matrix(spec: OperatorSpec, W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.shape[-2:] != (spec.n, spec.n):
        raise ValueError(f"expected {spec.n}x{spec.n} matrices, got trailing shape {W.shape[-2:]}")
    return W


def op_value(spec: OperatorSpec, W):
    """Operator value on a symmetric matrix (or a batch of them)."""
    W = _check_matrix(spec, W)
    if spec.kind == SIGMA1:
        return np.trace(W, axis1=-2, axis2=-1)
    return value_from_eigs(spec, np.linalg.eigvalsh(W))


def op_value_and_derivative(spec: OperatorSpec, W):
    W = _check_matrix(spec, W)
    if spec.kind == SIGMA1:
        D = np.broadcast_to(np.eye(spec.n), W.shape).copy()
        return np.trace(W, axis1=-2, axis2=-1), D
    lam, Q = np.linalg.eigh(W)
    val = value_from_eigs(spec, lam)
    d = eig_weights(spec, lam)
    D = np.einsum("...ik,...k,...jk->...ij", Q, d, Q)
    return val, 0.5 * (D + np.swapaxes(D, -1, -2))


def op_derivative(spec: OperatorSpec, W) -> np.ndarray:
    """F^{ij} = dF/dw_ij, as Q diag(dF/dlambda) Q^T in the eigenframe of W."""
    return op_value_and_derivative(spec, W)[1]


def ellipticity_constants(spec: OperatorSpec) -> tuple[float, float]:
    k, n = spec.kind, spec.n
    if k in GP_KINDS:
        return float(min(spec.p, n - spec.p)), float(max(spec.p, n - spec.p))
    if k in PUCCI_KINDS:
        return float(spec.lambda0), float(spec.Lambda0)
    if k == SIGMA1:
        return 1.0, 1.0
    if k in (MIN_RICCI, MAX_RICCI):
        return 1.0, float(n - 1)
    lo, hi = ellipticity_constants(spec.base)
    return spec.t * lo + (1.0 - spec.t), spec.t * hi + (1.0 - spec.t)


def ricci_from_schouten(S, n: int) -> np.ndarray:
    """Ric = (n-2) S + tr(S) g, inverting the Schouten definition (n >= 3)."""
    if n < 3:
        raise ValueError("the Schouten tensor is only defined for n >= 3")
    S = np.asarray(S, dtype=float)
    tr = np.trace(S, axis1=-2, axis2=-1)
    return (n - 2) * S + tr[..., None, None] * np.eye(n)


def schouten_from_ricci(Ric, n: int) -> np.ndarray:
    if n < 3:
        raise ValueError("the Schouten tensor is only defined for n >= 3")
    Ric = np.asarray(Ric, dtype=float)
    R = np.trace(Ric, axis1=-2, axis2=-1)
    return (Ric - (R / (2 * (n - 1)))[..., None, None] * np.eye(n)) / (n - 2)
