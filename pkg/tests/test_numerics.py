import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcmhomog.errors import ConvergenceError, DomainError, UsageError
from rcmhomog.lattice import CLOSED_BOX, TORUS, DistributionSpec, LatticeSpec, constant_environment, environment_from_weights
from rcmhomog.numerics import (
    DIRICHLET,
    MIXED,
    PERIODIC,
    LinearOperatorSpec,
    apply_operator,
    cg_solve,
    coordinate_field,
    dense_oracle,
    dense_site_weights,
    dirichlet_form,
    domain_sites,
    smallest_eigenpair,
    torus_spectral_gap,
    weighted_inner,
    weighted_mean_zero,
)

from conftest import box_env, torus_env

BCS = [(PERIODIC, TORUS), (DIRICHLET, CLOSED_BOX), (MIXED, CLOSED_BOX)]
seeds = st.integers(0, 2**32)


def make_op(bc, d, N, seed, dist=None):
    env = torus_env(d, N, dist, seed) if bc == PERIODIC else box_env(d, N, dist, seed)
    return LinearOperatorSpec(env, bc)


def admissible(op, rng):
    """Random field in the operator's domain (zero off Q_N on a box)."""
    u = rng.standard_normal(op.lattice.shape)
    if not op.periodic:
        u = np.where(op.interior, u, 0.0)
    return u


def as_vector(op, u):
    return np.array([u[x] for x in domain_sites(op)])


def test_operator_domain_checks():
    with pytest.raises(DomainError):
        LinearOperatorSpec(torus_env(2, 3), DIRICHLET)
    with pytest.raises(DomainError):
        LinearOperatorSpec(box_env(2, 3), PERIODIC)
    op = make_op(DIRICHLET, 2, 3, 0)
    with pytest.raises(DomainError):
        apply_operator(op, np.ones(op.lattice.shape))
    with pytest.raises(DomainError):
        apply_operator(op, np.zeros((3, 3)))


def test_constants_are_harmonic_on_torus():
    op = make_op(PERIODIC, 3, 4, 2)
    assert np.max(np.abs(apply_operator(op, np.full(op.lattice.shape, 3.7)))) < 1e-14


def test_four_cycle_hand_value():
    op = LinearOperatorSpec(constant_environment(LatticeSpec(1, 4)), PERIODIC)
    u = np.array([0.0, 1.0, 0.0, -1.0])
    np.testing.assert_allclose(apply_operator(op, u), u, atol=1e-15)


@pytest.mark.parametrize("bc,closure", BCS)
def test_apply_matches_dense_oracle(bc, closure, rng):
    for seed in range(3):
        op = make_op(bc, 2, 3, seed)
        H = dense_oracle(op)
        u = admissible(op, rng)  # zero face data on the box
        Hu = apply_operator(op, u)
        np.testing.assert_allclose(as_vector(op, Hu), H @ as_vector(op, u), atol=1e-12)


def test_dense_oracle_circulant():
    op = LinearOperatorSpec(constant_environment(LatticeSpec(1, 4)), PERIODIC)
    H = dense_oracle(op)
    expected = np.eye(4) - 0.5 * (np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1))
    np.testing.assert_array_equal(H, expected)


@pytest.mark.parametrize("bc,closure", BCS)
def test_dense_oracle_reversible(bc, closure):
    op = make_op(bc, 2, 3, 5)
    H = dense_oracle(op)
    s = np.sqrt(dense_site_weights(op))
    S = s[:, None] * H / s[None, :]
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    np.testing.assert_allclose(dense_site_weights(op), as_vector(op, op.site_weight), rtol=1e-14)


def test_dense_oracle_size_cap():
    op = make_op(DIRICHLET, 3, 15, 0)
    with pytest.raises(UsageError):
        dense_oracle(op)


def test_weighted_inner_examples(rng):
    env = constant_environment(LatticeSpec(2, 4))
    one = np.ones((4, 4))
    assert weighted_inner(env, one, one) == 64.0
    env = torus_env(2, 4, seed=3)
    op = LinearOperatorSpec(env)
    u, v = rng.standard_normal((2, 4, 4))
    a = op.site_weight
    direct = sum(u[x] * v[x] * a[x] for x in np.ndindex(4, 4))
    assert weighted_inner(op, u, v) == pytest.approx(direct, rel=1e-13)
    assert weighted_inner(op, weighted_mean_zero(op, u), one) == pytest.approx(0, abs=1e-12)
    with pytest.raises(DomainError):
        weighted_inner(op, u, np.ones(3))


@pytest.mark.parametrize("d,N", [(1, 3), (2, 4), (3, 2)])
def test_coordinate_form_on_box(d, N):
    op = LinearOperatorSpec(constant_environment(LatticeSpec(d, N, CLOSED_BOX)), DIRICHLET)
    g1 = coordinate_field(op.lattice)[0]
    assert dirichlet_form(op, g1) == pytest.approx(2 * N**d, rel=1e-14)
    assert dirichlet_form(op, np.full(op.lattice.shape, 2.0)) == 0.0


@given(st.sampled_from(BCS), st.integers(1, 3), st.integers(2, 4), seeds)
def test_green_gauss(bcc, d, N, seed):
    bc, _ = bcc
    op = make_op(bc, d, N, seed)
    rng = np.random.default_rng(seed)
    u, v = admissible(op, rng), admissible(op, rng)
    if op.periodic:
        u, v = weighted_mean_zero(op, u), weighted_mean_zero(op, v)
    E = dirichlet_form(op, u, v, ordered=False)
    scale = math.sqrt(dirichlet_form(op, u, ordered=False) * dirichlet_form(op, v, ordered=False))
    assert abs(E - weighted_inner(op, apply_operator(op, u), v)) <= 1e-10 * scale
    assert abs(E - weighted_inner(op, u, apply_operator(op, v))) <= 1e-10 * scale


@given(st.sampled_from(BCS), st.integers(1, 3), st.integers(2, 4), seeds)
def test_self_adjoint(bcc, d, N, seed):
    op = make_op(bcc[0], d, N, seed)
    rng = np.random.default_rng(seed + 1)
    u, v = admissible(op, rng), admissible(op, rng)
    lhs = weighted_inner(op, apply_operator(op, u), v)
    rhs = weighted_inner(op, u, apply_operator(op, v))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


@given(st.sampled_from(BCS), st.integers(1, 3), st.integers(1, 4), seeds)
def test_form_nonnegative_and_kernel(bcc, d, N, seed):
    op = make_op(bcc[0], d, N, seed)
    rng = np.random.default_rng(seed)
    u = admissible(op, rng)
    assert dirichlet_form(op, u) >= 0
    if op.periodic:
        assert dirichlet_form(op, np.full(op.lattice.shape, 1.5)) == 0.0
    elif bcc[0] == DIRICHLET:
        assert dirichlet_form(op, u) > 0


def test_cg_zero_rhs():
    op = make_op(DIRICHLET, 2, 4, 0)
    sol = cg_solve(op, np.zeros(op.lattice.shape))
    assert sol.iterations == 0 and np.all(sol.u == 0)
    op = make_op(PERIODIC, 2, 4, 0)
    sol = cg_solve(op, np.zeros(op.lattice.shape))
    assert sol.iterations == 0 and np.all(sol.u == 0)


@pytest.mark.parametrize("seed", range(4))
def test_cg_dirichlet_matches_dense(seed, rng):
    op = make_op(DIRICHLET, 2, 3, seed)
    f = admissible(op, rng)
    sol = cg_solve(op, f, tol=1e-12)
    ref = np.linalg.solve(dense_oracle(op), as_vector(op, f))
    np.testing.assert_allclose(as_vector(op, sol.u), ref, atol=1e-8)
    assert sol.residual <= 1e-12


def test_cg_periodic_chain_closed_form():
    # H u = f on an 8-cycle: a(x,x+1)(u(x+1)-u(x)) is the flux, determined up to a constant
    N = 8
    rng = np.random.default_rng(7)
    w = rng.uniform(0.5, 2, N)
    env = environment_from_weights(LatticeSpec(1, N), w)
    op = LinearOperatorSpec(env)
    f = weighted_mean_zero(op, rng.standard_normal(N))
    sol = cg_solve(op, f, tol=1e-13)
    # flux J(x) = w_x (u(x+1) - u(x)) satisfies J(x-1) - J(x) = a(x) f(x)
    src = np.cumsum(op.site_weight * f)
    J = -src
    J = J - np.sum(J / w) / np.sum(1 / w)  # closes the loop: sum of increments is 0
    du = J / w
    u = np.concatenate([[0.0], np.cumsum(du)[:-1]])
    u = weighted_mean_zero(op, u)
    np.testing.assert_allclose(np.roll(sol.u, -1) - sol.u, du, atol=1e-10)
    np.testing.assert_allclose(sol.u, u, atol=1e-10)


def test_cg_periodic_mean_zero_and_errors(rng):
    op = make_op(PERIODIC, 2, 5, 9)
    f = weighted_mean_zero(op, rng.standard_normal(op.lattice.shape))
    sol = cg_solve(op, f)
    a1 = math.sqrt(float(op.site_weight.sum()))
    assert abs(weighted_inner(op, sol.u, np.ones_like(f))) <= 1e-10 * a1 * np.linalg.norm(sol.u)
    assert np.linalg.norm(apply_operator(op, sol.u) - f) <= 1e-10 * np.linalg.norm(f)
    with pytest.raises(DomainError):
        cg_solve(op, f + 1.0)
    with pytest.raises(ConvergenceError) as exc:
        cg_solve(op, f, max_iter=2)
    assert exc.value.residual > 0
    with pytest.raises(UsageError):
        cg_solve(op, f, tol=0)


@pytest.mark.parametrize("N,kappa", [(16, 4), (32, 2), (64, 4)])
def test_cg_iteration_guard(N, kappa):
    op = make_op(DIRICHLET, 2, N, 3, DistributionSpec.uniform_elliptic(kappa))
    f = np.where(op.interior, 1.0, 0.0)
    sol = cg_solve(op, f, tol=1e-10)
    assert sol.iterations <= 10 * N * kappa


@pytest.mark.parametrize("bc", [DIRICHLET, MIXED])
def test_maximum_principle(bc):
    op = make_op(bc, 2, 6, 4, DistributionSpec.uniform_elliptic(4))
    rng = np.random.default_rng(0)
    data = rng.uniform(-1, 3, op.lattice.shape)
    if bc == MIXED:
        data = op.boundary_data()
    sol = cg_solve(op, np.zeros(op.lattice.shape), tol=1e-12, boundary=data)
    bdry = data[~op.interior] if bc == DIRICHLET else np.array([0.0, op.lattice.N + 1.0])
    inner = sol.u[op.interior]
    assert inner.min() >= bdry.min() - 1e-9 and inner.max() <= bdry.max() + 1e-9


@pytest.mark.parametrize("d", [1, 2])
def test_eigenpair_constant_closed_form(d):
    op = LinearOperatorSpec(constant_environment(LatticeSpec(d, 3, CLOSED_BOX)), DIRICHLET)
    pair = smallest_eigenpair(op)
    assert pair.lam == pytest.approx(1 - math.cos(math.pi / 4), abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_eigenpair_matches_dense(seed):
    op = make_op(DIRICHLET, 2, 4, seed)
    pair = smallest_eigenpair(op)
    H = dense_oracle(op)
    s = np.sqrt(dense_site_weights(op))
    S = s[:, None] * H / s[None, :]
    assert pair.lam == pytest.approx(np.linalg.eigvalsh(0.5 * (S + S.T))[0], abs=1e-8)
    psi = pair.psi
    assert np.all(psi[op.interior] > 0)
    assert np.all(psi[~op.interior] == 0)
    assert weighted_inner(op, psi, psi) == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(apply_operator(op, psi) - pair.lam * psi) <= 1e-8


def test_eigenpair_needs_dirichlet():
    with pytest.raises(DomainError):
        smallest_eigenpair(make_op(MIXED, 2, 3, 0))


def test_torus_spectral_gap_scaling():
    dist = DistributionSpec.uniform_elliptic(2)
    scaled = {N: [N**2 * torus_spectral_gap(make_op(PERIODIC, 2, N, s, dist)) for s in range(50)] for N in (4, 6, 8)}
    C1 = 0.5 * min(scaled[4])
    assert C1 > 0
    for N, vals in scaled.items():
        assert min(vals) > C1, N
