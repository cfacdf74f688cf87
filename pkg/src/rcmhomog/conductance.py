"""Effective conductance of the closed box between the faces ``x(1) = 0`` and ``x(1) = N+1``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corrector import PerturbationCheck, pair_kappa
from .errors import DomainError, UsageError
from .lattice import CLOSED_BOX
from .numerics import MIXED, LinearOperatorSpec, cg_solve, dirichlet_form, edge_multiplicity


@dataclass(frozen=True, eq=False)
class PotentialSolution:
    v: np.ndarray  # over the closed box
    flux: float  # current through x(1) = 0
    flux_far: float  # current through x(1) = N+1
    f: float  # N^{-d} E(v, v), ordered pairs
    energy: float  # E(v, v), ordered pairs
    edge_energy: float  # each edge once
    residual: float
    iterations: int


def mixed_operator(env):
    if env.lattice.closure != CLOSED_BOX:
        raise DomainError("effective conductance needs a closed_box environment")
    return LinearOperatorSpec(env, MIXED)


def _fill_side_faces(v, N, d):
    """Copy interior values onto insulated faces; the two Dirichlet faces keep their data."""
    idx = np.indices(v.shape)
    src = [idx[0]] + [np.clip(idx[j], 1, N) for j in range(1, d)]
    out = v[tuple(src)]
    out[0] = 0.0
    out[N + 1] = N + 1
    return out


def face_currents(op, v):
    """Currents entering at ``x(1) = 0`` and leaving at ``x(1) = N+1``."""
    N = op.lattice.N
    w0 = op.weights[0]
    near = float((w0[0] * (v[1] - v[0])).sum())
    far = float((w0[N] * (v[N + 1] - v[N])).sum())
    return near, far


def solve_mixed_potential(env, tol=1e-10):
    """Harmonic ``v`` with ``v = 0`` / ``N+1`` on the ``x(1)`` faces and insulated side faces."""
    op = mixed_operator(env)
    N, d = env.N, env.d
    sol = cg_solve(op, np.zeros(op.lattice.shape), tol=tol, boundary=op.boundary_data())
    v = _fill_side_faces(sol.u, N, d)
    energy = dirichlet_form(op, v)
    edge_energy = dirichlet_form(op, v, ordered=False)
    near, far = face_currents(op, v)
    return PotentialSolution(v, near, far, energy / N**d, energy, edge_energy, sol.residual, sol.iterations)


def effective_conductance(env, tol=1e-10):
    """``f_N = N^{-d} E(v_N, v_N)``; also checks energy = (N+1) x current."""
    sol = solve_mixed_potential(env, tol)
    N = env.N
    for current in (sol.flux, sol.flux_far):
        if abs(sol.edge_energy - (N + 1) * current) > 1e-8 * sol.edge_energy:
            raise AssertionError(
                f"energy {sol.edge_energy} differs from (N+1) x current {(N + 1) * current}"
            )
    return sol.f


def edge_gradient_energy(op, v, eid):
    """``v^2(e)``: ordered-pair multiplicity times the squared potential drop on ``eid``."""
    x, i = op.lattice.edge_from_id(eid)
    y = list(x)
    y[i] += 1
    m = edge_multiplicity(op, ordered=True)[(i,) + x]
    return float(m * (v[tuple(y)] - v[x]) ** 2)


def conductance_perturbation_check(env, eid, new_weight, tol=1e-10, kappa=None):
    """``|f(omega) - f(sigma)| <= kappa N^{-d} (v^2(e, omega) + v^2(e, sigma))`` with both sides recomputed."""
    op = mixed_operator(env)
    x, i = env.lattice.edge_from_id(eid)
    if op.weights[(i,) + x] == 0:
        raise UsageError(f"edge {eid} is insulated or not attached to Q_N")
    kappa = pair_kappa(env, new_weight, kappa)
    other = env.with_edge(eid, new_weight)
    f, v2 = [], []
    for e in (env, other):
        o = mixed_operator(e)
        sol = solve_mixed_potential(e, tol)
        f.append(sol.f)
        v2.append(edge_gradient_energy(o, sol.v, eid))
    lhs = np.array([abs(f[1] - f[0])])
    rhs = np.array([kappa * env.N ** (-env.d) * (v2[0] + v2[1])])
    return PerturbationCheck(lhs, rhs)
