"""Periodic corrector and the finite-volume diffusion matrix.

The corrector ``chi`` solves ``H chi = -H g`` on the torus coordinate by
coordinate (``g(x) = x``), so that ``v = g + chi`` is harmonic for the
periodised walk.  The diffusion matrix is ``E(v, v) / a(Q_N)`` with the
ordered-pair Dirichlet form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UsageError
from .lattice import TORUS
from .numerics import (
    PERIODIC,
    LinearOperatorSpec,
    apply_operator,
    cg_solve,
    dirichlet_form,
    edge_increments,
    edge_multiplicity,
    weighted_inner,
)


@dataclass(frozen=True, eq=False)
class CorrectorField:
    chi: np.ndarray  # (d, *grid)
    residual: float
    energy: np.ndarray  # ordered-pair E(chi, chi), d x d
    iterations: tuple

    @property
    def d(self):
        return self.chi.shape[0]


def periodic_operator(env):
    if env.lattice.closure != TORUS:
        raise DomainError("the corrector lives on a torus environment")
    return LinearOperatorSpec(env, PERIODIC)


def drift(op):
    """``E_x(X_1) - x`` per coordinate, shape ``(d, *grid)``; equals ``-H g``."""
    w = op.weights
    return np.stack([(w[j] - np.roll(w[j], 1, axis=j)) / op.site_weight for j in range(op.d)])


def solve_corrector(env, tol=1e-10):
    op = periodic_operator(env)
    rhs = drift(op)
    chi = np.empty_like(rhs)
    res, its = 0.0, []
    for j in range(op.d):
        sol = cg_solve(op, rhs[j], tol=tol)
        chi[j] = sol.u
        res = max(res, sol.residual)
        its.append(sol.iterations)
    energy = dirichlet_form(op, chi)
    return CorrectorField(chi, res, energy, tuple(its))


def harmonic_coordinates_increments(op, corr):
    """Edge increments of ``v = g + chi``: shape ``(d, d, *grid)`` (component, direction, site)."""
    return edge_increments(op, corr.chi, slope=np.eye(op.d))


def diffusion_matrix(env, corr):
    op = periodic_operator(env)
    E = dirichlet_form(op, corr.chi, u_slope=np.eye(op.d))
    return E / float(op.site_weight.sum())


def diffusion_matrix_walk(env, corr):
    """Same matrix from the stationary average of the one-step martingale covariance.

    ``sum_x pi(x) h(x)`` with ``h(x) = E_x[(v(X_1) - v(x))(v(X_1) - v(x))']``.
    Kept separate from :func:`diffusion_matrix` as a cross-check.
    """
    op = periodic_operator(env)
    d = op.d
    w = op.weights
    a = op.site_weight
    inc = harmonic_coordinates_increments(op, corr)
    h = np.zeros((d, d) + op.lattice.shape)
    for i in range(d):
        fwd = inc[:, i]
        bwd = -np.roll(inc[:, i], 1, axis=1 + i)
        wb = np.roll(w[i], 1, axis=i)
        h += (w[i] / a) * fwd[:, None] * fwd[None, :]
        h += (wb / a) * bwd[:, None] * bwd[None, :]
    pi = a / a.sum()
    return np.einsum("x,pqx->pq", pi.ravel(), h.reshape(d, d, -1))


def coordinate_energy(op):
    """Ordered-pair ``E(g, g)`` on the torus (``g(x) = x``)."""
    return dirichlet_form(op, np.zeros((op.d,) + op.lattice.shape), u_slope=np.eye(op.d))


def corrector_diagnostics(env, corr):
    """Size diagnostics for the corrector.

    Reports ``||chi||_inf`` scaled by ``N^{d/2}`` (d >= 3), ``N sqrt(log N)``
    (d = 2) or ``N^2 log N`` (d = 1), the energy per site, and checks the
    variational bound ``tr E(chi, chi) <= 4 tr E(g, g)``.
    """
    op = periodic_operator(env)
    N, d = env.N, env.d
    sup = float(np.max(np.abs(corr.chi)))
    if d >= 3:
        scale = N ** (d / 2)
    elif d == 2:
        scale = N * math.sqrt(math.log(N)) if N > 1 else 1.0
    else:
        scale = N**2 * math.log(N) if N > 1 else 1.0
    e_chi = float(np.trace(corr.energy))
    e_g = float(np.trace(coordinate_energy(op)))
    bound = 4.0 * e_g
    ok = e_chi <= bound * (1 + 1e-10)
    if not ok:
        raise AssertionError(f"tr E(chi,chi) = {e_chi} exceeds 4 tr E(g,g) = {bound}")
    means = [abs(weighted_inner(op, corr.chi[j], np.ones(op.lattice.shape))) for j in range(d)]
    return {
        "sup_norm": sup,
        "sup_ratio": sup / scale,
        "energy_trace": e_chi,
        "energy_per_site": e_chi / N**d,
        "coordinate_energy_trace": e_g,
        "gap_to_bounds": {"energy": bound - e_chi},
        "energy_bound_holds": ok,
        "max_weighted_mean": max(means),
    }


def harmonicity_defect(env, corr):
    """``max |H (g + chi)|``; zero up to solver tolerance."""
    op = periodic_operator(env)
    h = apply_operator(op, corr.chi) - drift(op)
    return float(np.max(np.abs(h)))


@dataclass(frozen=True)
class PerturbationCheck:
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def holds(self):
        return bool(np.all(self.lhs <= self.rhs * (1 + 1e-9) + 1e-13))

    def __bool__(self):
        return self.holds


def pair_kappa(env, new_weight, kappa=None):
    """Ellipticity constant covering both the environment and the perturbed edge."""
    if not new_weight > 0:
        raise UsageError(f"conductances must be positive, got {new_weight}")
    if kappa is not None:
        return kappa
    k = env.dist.kappa
    if not math.isfinite(k):
        k = max(1.0, env.dist.upper)
    return max(k, float(env.weights.max()), new_weight)


def edge_energy(op, inc, eid):
    """Per-component ``v^2(e)``: ordered-pair multiplicity times squared increment on edge ``eid``."""
    x, i = op.lattice.edge_from_id(eid)
    m = edge_multiplicity(op, ordered=True)[(i,) + x]
    return m * inc[(slice(None), i) + x] ** 2


def single_edge_perturbation_check(env, eid, new_weight, tol=1e-10, kappa=None):
    """One-edge stability of ``f_i = N^{-d} E(v, v)_ii``.

    Checks ``|f_i(omega) - f_i(sigma)| <= kappa N^{-d} (v^2(e, omega) + v^2(e, sigma))``
    for every coordinate ``i`` with both correctors recomputed.
    """
    kappa = pair_kappa(env, new_weight, kappa)
    other = env.with_edge(eid, new_weight)
    N, d = env.N, env.d
    out = []
    for e in (env, other):
        op = periodic_operator(e)
        corr = solve_corrector(e, tol)
        E = dirichlet_form(op, corr.chi, u_slope=np.eye(d))
        inc = harmonic_coordinates_increments(op, corr)
        out.append((np.diag(E) / N**d, edge_energy(op, inc, eid)))
    (f0, v0), (f1, v1) = out
    lhs = np.abs(f1 - f0)
    rhs = kappa * N ** (-d) * (v0 + v1)
    return PerturbationCheck(lhs, rhs)
