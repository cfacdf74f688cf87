"""Bottom Dirichlet eigenpair on the closed box and the statistic ``N^2 lambda_N``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrector import PerturbationCheck, pair_kappa
from .errors import DomainError, UsageError
from .lattice import CLOSED_BOX
from .numerics import DIRICHLET, LinearOperatorSpec, dirichlet_form, smallest_eigenpair


@dataclass(frozen=True, eq=False)
class EigenSolution:
    lam: float
    psi: np.ndarray
    f: float
    residual: float
    energy: float  # E(psi, psi), each edge once
    iterations: int


def dirichlet_operator(env):
    if env.lattice.closure != CLOSED_BOX:
        raise DomainError("the Dirichlet eigenproblem needs a closed_box environment")
    return LinearOperatorSpec(env, DIRICHLET)


def weighted_norm_sq(op, u):
    return float((u * u * op.site_weight)[op.interior].sum())


def dirichlet_spectral_statistic(env, tol=1e-12):
    op = dirichlet_operator(env)
    pair = smallest_eigenpair(op, tol=tol)
    energy = dirichlet_form(op, pair.psi, ordered=False)
    return EigenSolution(pair.lam, pair.psi, env.N**2 * pair.lam, pair.residual, energy, pair.iterations)


def constant_eigenvalue(d, N, modes=None):
    """``1 - (1/d) sum_i cos(k_i pi / (N+1))`` for constant conductances (lowest mode by default)."""
    k = np.ones(d) if modes is None else np.asarray(modes, dtype=float)
    return float(1.0 - np.mean(np.cos(k * np.pi / (N + 1))))


def eigenfunction_sup_diagnostic(sol):
    """``max |psi| / lambda^{d/4}``; the constant in front is not known, so this is report-only."""
    d = sol.psi.ndim
    return float(np.max(np.abs(sol.psi)) / sol.lam ** (d / 4))


@dataclass(frozen=True)
class EigenPerturbation:
    up: PerturbationCheck  # lambda(omega) - lambda(sigma) <= kappa psi_sigma^2(e)
    down: PerturbationCheck  # lambda(sigma) - lambda(omega) <= (gbar - 1) E(psi_omega, psi_omega)_sigma
    f_change: float
    bound_terms: float  # N^2 psi_sigma^2(e) + psi_omega^2(x) + psi_omega^2(y)

    @property
    def holds(self):
        return self.up.holds and self.down.holds

    def __bool__(self):
        return self.holds


def eigen_perturbation_check(env, eid, new_weight_geq, tol=1e-12, kappa=None):
    """One-sided edge increase ``sigma -> omega`` and the two variational inequalities behind it.

    ``psi^2(e)`` is the squared increment of ``psi`` across ``e`` (each edge once,
    matching ``lambda = E(psi, psi)``).
    """
    x, i = env.lattice.edge_from_id(eid)
    old = float(env.weights[eid])
    if new_weight_geq < old:
        raise UsageError(f"new weight {new_weight_geq} must be >= current weight {old}")
    kappa = pair_kappa(env, new_weight_geq, kappa)
    y = list(x)
    y[i] += 1
    y = tuple(y)

    sigma = env
    omega = env.with_edge(eid, new_weight_geq)
    s_sol = dirichlet_spectral_statistic(sigma, tol)
    o_sol = dirichlet_spectral_statistic(omega, tol)
    op_s = dirichlet_operator(sigma)

    psi_s_e = (s_sol.psi[y] - s_sol.psi[x]) ** 2
    up_lhs = o_sol.lam - s_sol.lam
    up_rhs = kappa * psi_s_e

    gbar = 1.0 / weighted_norm_sq(op_s, o_sol.psi)
    e_sigma = dirichlet_form(op_s, o_sol.psi, ordered=False)
    down_lhs = s_sol.lam - o_sol.lam
    down_rhs = (gbar - 1.0) * e_sigma

    terms = env.N**2 * psi_s_e + o_sol.psi[x] ** 2 + o_sol.psi[y] ** 2
    return EigenPerturbation(
        PerturbationCheck(np.array([up_lhs]), np.array([up_rhs])),
        PerturbationCheck(np.array([down_lhs]), np.array([down_rhs])),
        abs(o_sol.f - s_sol.f),
        float(terms),
    )
