import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from rcmhomog.errors import DomainError, UsageError
from rcmhomog.lattice import CLOSED_BOX, DistributionSpec, LatticeSpec, constant_environment, environment_from_weights
from rcmhomog.numerics import dirichlet_form, weighted_inner
from rcmhomog.spectral import (
    constant_eigenvalue,
    dirichlet_operator,
    dirichlet_spectral_statistic,
    eigen_perturbation_check,
    eigenfunction_sup_diagnostic,
)

from conftest import box_env, torus_env

seeds = st.integers(0, 2**32)


def const_box(d, N, c=1.0):
    return constant_environment(LatticeSpec(d, N, CLOSED_BOX), c)


@pytest.mark.parametrize("d", [1, 2])
def test_closed_form_examples(d):
    sol = dirichlet_spectral_statistic(const_box(d, 3))
    assert sol.lam == pytest.approx(1 - math.cos(math.pi / 4), abs=1e-10)
    assert sol.f == pytest.approx(9 * (1 - math.cos(math.pi / 4)), abs=1e-9)


@pytest.mark.parametrize("d,N", [(1, 4), (2, 8), (3, 5)])
def test_constant_eigenvalue_formula(d, N):
    assert dirichlet_spectral_statistic(const_box(d, N)).lam == pytest.approx(constant_eigenvalue(d, N), abs=1e-10)
    assert constant_eigenvalue(2, 3, (1, 3)) == pytest.approx(1.0)


def test_matches_dense_example():
    env = box_env(3, 4, DistributionSpec.uniform_elliptic(2), 5)
    lam, psi = oracles.dirichlet_eigen(env)
    sol = dirichlet_spectral_statistic(env)
    assert sol.lam == pytest.approx(lam, abs=1e-8)
    # both normalised in the weighted norm with positive sum
    np.testing.assert_allclose(sol.psi, psi, atol=1e-6)


@given(st.integers(1, 3), st.integers(1, 5), seeds)
def test_eigen_invariants(d, N, seed):
    env = box_env(d, N, DistributionSpec.two_point(0.3, 0.5, 3.0), seed)
    op = dirichlet_operator(env)
    sol = dirichlet_spectral_statistic(env)
    assert weighted_inner(op, sol.psi, sol.psi) == pytest.approx(1.0, abs=1e-10)
    assert np.all(sol.psi[op.interior] > 0)
    assert np.all(sol.psi[~op.interior] == 0)
    assert sol.energy == pytest.approx(sol.lam, abs=1e-8)
    assert sol.f == pytest.approx(N**2 * sol.lam, rel=1e-15)


def test_variational_characterisation():
    env = box_env(2, 5, seed=17)
    op = dirichlet_operator(env)
    lam = dirichlet_spectral_statistic(env).lam
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = np.where(op.interior, rng.standard_normal(op.lattice.shape), 0.0)
        rq = dirichlet_form(op, u, ordered=False) / weighted_inner(op, u, u)
        assert lam <= rq + 1e-10


def test_domain_monotonicity():
    lams = [dirichlet_spectral_statistic(const_box(2, N)).lam for N in range(3, 9)]
    assert all(b <= a for a, b in zip(lams, lams[1:]))


@given(seeds, st.floats(0.01, 100))
def test_global_scaling_invariance(seed, c):
    env = box_env(2, 4, seed=seed)
    scaled = environment_from_weights(env.lattice, c * env.weights)
    assert dirichlet_spectral_statistic(scaled).lam == pytest.approx(dirichlet_spectral_statistic(env).lam, rel=1e-9)


@pytest.mark.parametrize("kappa", [1.5, 3.0])
def test_elliptic_eigenvalue_bounds(kappa):
    ref = constant_eigenvalue(2, 5)
    for seed in range(5):
        lam = dirichlet_spectral_statistic(box_env(2, 5, DistributionSpec.uniform_elliptic(kappa), seed)).lam
        assert ref / kappa**2 <= lam <= ref * kappa**2


def test_needs_closed_box():
    with pytest.raises(DomainError):
        dirichlet_spectral_statistic(torus_env(2, 3))


def test_sup_diagnostic_closed_form():
    N = 6
    sol = dirichlet_spectral_statistic(const_box(2, N))
    s = np.sin(np.pi * np.arange(1, N + 1) / (N + 1))
    # sine product normalised with a(x) = 4: sum over the box of s_i^2 s_j^2 = ((N+1)/2)^2
    peak = s.max() ** 2 / (2 * (N + 1) / 2)
    assert eigenfunction_sup_diagnostic(sol) == pytest.approx(peak / sol.lam ** 0.5, rel=1e-8)


def test_sup_diagnostic_bounded_across_sizes():
    ratios = [eigenfunction_sup_diagnostic(dirichlet_spectral_statistic(const_box(2, N))) for N in (4, 8, 16)]
    assert max(ratios) <= 2 * min(ratios)
    r = eigenfunction_sup_diagnostic(dirichlet_spectral_statistic(box_env(3, 4, seed=2)))
    assert 0 < r < math.inf


def test_perturbation_examples():
    env = const_box(2, 4)
    eid = env.lattice.edge_id((2, 2), 0)
    same = eigen_perturbation_check(env, eid, 1.0)
    assert same.holds and same.up.lhs[0] == pytest.approx(0, abs=1e-12)
    chk = eigen_perturbation_check(env, eid, 2.0)
    assert chk.holds
    # a(x) grows with the edge, so the weighted norm grows too and lambda may move either way
    assert chk.up.slack[0] >= 0 and chk.down.slack[0] >= 0
    assert chk.f_change > 0
    with pytest.raises(UsageError):
        eigen_perturbation_check(env, eid, 0.5)


@given(seeds, st.data())
def test_random_one_sided_perturbations(seed, data):
    env = box_env(3, 4, seed=seed)
    eid = data.draw(st.integers(0, env.lattice.n_edges - 1))
    new = float(env.weights[eid]) * data.draw(st.floats(1.0, 4.0))
    assert eigen_perturbation_check(env, eid, new)
