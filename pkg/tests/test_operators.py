import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conformal_wp.operators import (
    BLEND,
    GP_EXACT,
    MAX_RICCI,
    MIN_RICCI,
    OperatorSpec,
    OperatorSpecError,
    blend,
    eig_sym_ascending,
    ellipticity_constants,
    g_p_exact,
    g_p_soft,
    gp_exact,
    gp_soft,
    op_derivative,
    op_value,
    pucci_minus,
    pucci_plus,
    ricci_from_schouten,
    schouten_from_ricci,
    sigma1,
    softmin_weights,
    weitzenbock_curvature,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def np_and_p():
    return st.integers(3, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1)))


@st.composite
def eigs(draw):
    n, p = draw(np_and_p())
    lam = draw(arrays(float, n, elements=finite))
    return n, p, lam


@st.composite
def sym(draw, n=None):
    n = n or draw(st.integers(2, 5))
    a = draw(arrays(float, (n, n), elements=st.floats(-3, 3)))
    return 0.5 * (a + a.T)


def brute_force(lam, p):
    n = len(lam)
    w = np.array([n - p] * p + [p] * (n - p), dtype=float)
    vals = [float(np.dot(w, np.asarray(lam)[list(perm)])) for perm in itertools.permutations(range(n))]
    return min(vals) if 2 * p <= n else max(vals)


# --- OperatorSpec -----------------------------------------------------------


def test_spec_validation_names_fields():
    with pytest.raises(OperatorSpecError) as e:
        OperatorSpec("gp_soft", 3, p=1)
    assert e.value.field == "tau"
    with pytest.raises(OperatorSpecError) as e:
        gp_exact(3, 3)
    assert e.value.field == "p"
    with pytest.raises(OperatorSpecError) as e:
        pucci_minus(3, 2.0, 1.0)
    assert e.value.field == "lambda0"
    with pytest.raises(OperatorSpecError) as e:
        blend(blend(sigma1(3), 0.5), 0.5)
    assert e.value.field == "base"
    with pytest.raises(OperatorSpecError) as e:
        OperatorSpec.from_record({"kind": "gp_exact", "p": 1, "q": 2}, 3)
    assert e.value.field == "q"


def test_spec_regimes_and_records():
    assert gp_exact(4, 1).concave and not gp_exact(4, 1).convex
    assert gp_exact(4, 2).concave and gp_exact(4, 2).convex
    assert gp_exact(4, 3).convex
    for spec in (gp_soft(4, 1, 0.05), pucci_plus(3, 1, 2), blend(gp_exact(3, 2), 0.25), sigma1(2)):
        assert OperatorSpec.from_record(spec.to_record(), spec.n) == spec
    assert gp_soft(3, 1, 0.05).to_record() == {"kind": "gp_soft", "p": 1, "tau": 0.05}


# --- eigen-decomposition ----------------------------------------------------


def test_eig_examples():
    assert np.array_equal(eig_sym_ascending(np.eye(3)).lambdas, [1, 1, 1])
    np.testing.assert_allclose(eig_sym_ascending(np.diag([3.0, 1.0, 2.0])).lambdas, [1, 2, 3])
    with pytest.raises(ValueError):
        eig_sym_ascending(np.array([[np.nan, 0], [0, 1]]))


@given(sym())
def test_eig_invariants(A):
    d = eig_sym_ascending(A)
    assert np.all(np.diff(d.lambdas) >= 0)
    Q = d.frame
    assert np.max(np.abs(Q.T @ Q - np.eye(len(A)))) <= 1e-12
    assert np.max(np.abs(d.reconstruct() - A)) <= 1e-10 * max(1.0, np.max(np.abs(A)))


# --- G_p ------------------------------------------------------------------


def test_g_p_exact_examples():
    assert g_p_exact([1, 2, 3], 1) == 7
    assert g_p_exact([-1, -1, -1], 1) == -4
    assert brute_force([-1, -1, -1], 1) == -4
    for n in range(3, 8):
        for p in range(1, n):
            assert g_p_exact([0.5] * n, p) == p * (n - p)
    assert g_p_exact([0.5] * 5, 1) == 4  # n - 1
    with pytest.raises(ValueError):
        g_p_exact([1, 2, 3], 0)
    assert weitzenbock_curvature is g_p_exact


@given(eigs())
def test_g_p_exact_matches_permutations(args):
    n, p, lam = args
    assert g_p_exact(lam, p) == pytest.approx(brute_force(lam, p), rel=1e-12, abs=1e-12)
    # the (n - p) sum_{i<=p} + p sum_{i>p} form on sorted input
    s = np.sort(lam)
    assert g_p_exact(lam, p) == pytest.approx((n - p) * s[:p].sum() + p * s[p:].sum(), rel=1e-12, abs=1e-11)


@given(eigs(), st.floats(0, 5))
def test_homogeneity(args, t):
    n, p, lam = args
    assert g_p_exact(t * lam, p) == pytest.approx(t * g_p_exact(lam, p), rel=1e-12, abs=1e-10)


@given(eigs(), arrays(float, 6, elements=finite))
def test_midpoint_concavity(args, other):
    n, p, a = args
    b = other[:n]
    mid = g_p_exact(0.5 * (a + b), p)
    avg = 0.5 * (g_p_exact(a, p) + g_p_exact(b, p))
    tol = 1e-10 * (1 + np.abs(a).sum() + np.abs(b).sum())
    if 2 * p <= n:
        assert mid >= avg - tol
    if 2 * p >= n:
        assert mid <= avg + tol


@given(eigs(), st.sampled_from([0.5, 0.1, 0.01]))
def test_soft_sandwich(args, tau):
    n, p, lam = args
    exact, soft = g_p_exact(lam, p), g_p_soft(lam, p, tau)
    bound = abs(n - 2 * p) * tau * math.log(math.comb(n, p))
    tol = 1e-9 * (1 + np.abs(lam).max())
    if 2 * p <= n:
        assert exact - bound - tol <= soft <= exact + tol
    else:
        assert exact - tol <= soft <= exact + bound + tol


def test_soft_error_example():
    lam = np.array([0.0, 1.0, 3.0])
    assert abs(g_p_soft(lam, 1, 0.1) - g_p_exact(lam, 1)) <= 0.1 * math.log(3)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
@pytest.mark.parametrize("c", [-1.5, 0.0, 0.5, 2.0])
def test_soft_on_constant_vectors(n, c):
    # every p-subset sum ties, so the log-sum-exp collapses to tau log C(n, p)
    tau = 0.1
    for p in range(1, n):
        shift = abs(n - 2 * p) * tau * math.log(math.comb(n, p))
        exact = 2 * p * (n - p) * c
        assert g_p_exact([c] * n, p) == pytest.approx(exact, abs=1e-12)
        expect = exact - shift if 2 * p <= n else exact + shift
        assert g_p_soft([c] * n, p, tau) == pytest.approx(expect, abs=1e-12)


def test_soft_rejects_bad_tau():
    with pytest.raises(ValueError):
        g_p_soft([1, 2, 3], 1, 0.0)


@given(eigs(), st.sampled_from([0.3, 0.05]))
def test_softmin_weights(args, tau):
    n, p, lam = args
    w = softmin_weights(lam, p, tau)
    assert np.all((w >= -1e-15) & (w <= 1 + 1e-12))
    assert w.sum() == pytest.approx(p, abs=1e-9)


def test_soft_partials_by_finite_difference(rng):
    for _ in range(50):
        n = int(rng.integers(3, 7))
        p = int(rng.integers(1, n))
        lam = rng.normal(size=n)
        tau = 0.2
        lo, hi = min(p, n - p), max(p, n - p)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1e-6
            d = (g_p_soft(lam + e, p, tau) - g_p_soft(lam - e, p, tau)) / 2e-6
            assert lo - 1e-6 <= d <= hi + 1e-6


# --- matrix dispatch ---------------------------------------------------------


def test_op_value_examples(rng):
    W = np.diag([1.0, -1.0])
    assert op_value(pucci_minus(2, 1, 2), W) == -1
    assert op_value(pucci_plus(2, 1, 2), W) == 1
    assert op_value(OperatorSpec(MIN_RICCI, 3), np.diag([0.0, 0.0, 1.0])) == 1
    assert np.linalg.eigvalsh(ricci_from_schouten(np.diag([0.0, 0.0, 1.0]), 3)).min() == 1
    assert op_value(OperatorSpec(MAX_RICCI, 3), np.diag([0.0, 0.0, 1.0])) == 2
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        A = A + A.T
        assert op_value(blend(gp_exact(4, 1), 0.0), A) == pytest.approx(np.trace(A), abs=1e-12)
        assert op_value(blend(gp_exact(4, 1), 0.3), A) == pytest.approx(
            0.3 * op_value(gp_exact(4, 1), A) + 0.7 * np.trace(A), abs=1e-12)
    with pytest.raises(ValueError):
        op_value(gp_exact(3, 1), np.eye(4))


def test_op_value_vectorized(rng):
    A = rng.normal(size=(5, 7, 3, 3))
    A = A + np.swapaxes(A, -1, -2)
    vals = op_value(gp_exact(3, 1), A)
    assert vals.shape == (5, 7)
    assert vals[2, 3] == op_value(gp_exact(3, 1), A[2, 3])


def test_two_dimensional_min_ricci_is_trace():
    assert op_value(OperatorSpec(MIN_RICCI, 2), np.diag([0.3, 0.9])) == pytest.approx(1.2)


@given(sym(3), st.floats(0.5, 3), st.floats(1, 4))
def test_pucci_duality(W, lo, extra):
    Lo = lo + extra
    m, M = pucci_minus(3, lo, Lo), pucci_plus(3, lo, Lo)
    assert op_value(m, -W) == pytest.approx(-op_value(M, W), abs=1e-12)
    assert op_value(m, W) <= op_value(M, W) + 1e-12
    same = pucci_minus(3, lo, lo)
    assert op_value(same, W) == pytest.approx(lo * np.trace(W), abs=1e-10)


def test_derivative_examples():
    D = op_derivative(gp_exact(3, 1), np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(D, np.diag([2.0, 1.0, 1.0]), atol=1e-14)
    for n in (3, 4, 5):
        for p in range(1, n):
            D = op_derivative(gp_soft(n, p, 0.1), np.eye(n))
            np.testing.assert_allclose(D, 2 * p * (n - p) / n * np.eye(n), atol=1e-12)


def test_derivative_tie_is_symmetric_average():
    # eigenvalues (1, 1, 3): the tied block shares weight (2 + 1)/2
    D = op_derivative(gp_exact(3, 1), np.diag([1.0, 1.0 + 1e-12, 3.0]))
    np.testing.assert_allclose(D, np.diag([1.5, 1.5, 1.0]), atol=1e-12)
    D0 = op_derivative(pucci_minus(2, 1.0, 3.0), np.diag([0.0, 1.0]))
    np.testing.assert_allclose(D0, np.diag([2.0, 1.0]), atol=1e-14)


@pytest.mark.parametrize("spec", [gp_exact(4, 1), gp_soft(4, 1, 0.1), gp_soft(5, 3, 0.1),
                                  pucci_minus(4, 1, 3), pucci_plus(4, 0.5, 2), sigma1(4),
                                  blend(gp_soft(4, 2, 0.2), 0.6)])
def test_derivative_matches_central_differences(spec, rng):
    n = spec.n
    for _ in range(20):
        A = rng.normal(size=(n, n))
        W = A + A.T
        E = rng.normal(size=(n, n))
        E = E + E.T
        eps = 1e-5
        fd = (op_value(spec, W + eps * E) - op_value(spec, W - eps * E)) / (2 * eps)
        assert np.sum(op_derivative(spec, W) * E) == pytest.approx(fd, rel=1e-6, abs=1e-7)


@given(sym(4), st.sampled_from([gp_exact(4, 1), gp_exact(4, 3), gp_soft(4, 1, 0.05), pucci_minus(4, 1, 2.5),
                                blend(gp_exact(4, 1), 0.4)]))
def test_derivative_spectrum_within_ellipticity(W, spec):
    lo, hi = ellipticity_constants(spec)
    D = op_derivative(spec, W)
    assert np.array_equal(D, D.T)
    ev = np.linalg.eigvalsh(D)
    assert ev.min() >= lo - 1e-9 and ev.max() <= hi + 1e-9


def test_ellipticity_constants():
    assert ellipticity_constants(gp_exact(3, 1)) == (1, 2)
    assert ellipticity_constants(gp_exact(4, 2)) == (2, 2)
    assert ellipticity_constants(sigma1(3)) == (1, 1)
    assert ellipticity_constants(pucci_plus(3, 0.5, 2.0)) == (0.5, 2.0)
    assert ellipticity_constants(blend(gp_exact(5, 1), 0.5)) == pytest.approx((1.0, 2.5))
    assert blend(gp_exact(5, 1), 0.5).kind == BLEND and gp_exact(5, 1).kind == GP_EXACT


def test_ricci_schouten_pair(rng):
    np.testing.assert_allclose(ricci_from_schouten(0.5 * np.eye(3), 3), 2 * np.eye(3))
    assert np.all(ricci_from_schouten(np.zeros((4, 4)), 4) == 0)
    for n in (3, 4, 6):
        A = rng.normal(size=(n, n))
        S = A + A.T
        np.testing.assert_allclose(schouten_from_ricci(ricci_from_schouten(S, n), n), S, atol=1e-12)
    with pytest.raises(ValueError):
        ricci_from_schouten(np.eye(2), 2)


def test_round_sphere_spot_values():
    for n in range(3, 7):
        S = 0.5 * np.eye(n)
        for p in range(1, n):
            assert op_value(gp_exact(n, p), S) == p * (n - p)
        assert op_value(OperatorSpec(MIN_RICCI, n), S) == n - 1
