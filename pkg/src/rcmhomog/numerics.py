"""Weighted graph Laplacians on the torus and on the closed box.

Fields are plain numpy arrays over the lattice grid (``lattice.shape``);
vector fields carry one extra leading axis.  On a closed box only interior
values are unknowns, boundary values are data.

For an operator spec with active edge weights ``w`` and walk weights
``a(x) = sum of active incident edges`` we use

* ``L u(x) = sum_y w(x,y) (u(x) - u(y))``  (symmetric Laplacian),
* ``H u = L u / a``  (the walk generator ``u - E_x u(X_1)``).

``H`` is self-adjoint for ``(u, v)_N = sum_{x in Q_N} u v a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DomainError, UsageError
from .lattice import CLOSED_BOX, TORUS

PERIODIC = "periodic"
DIRICHLET = "dirichlet"
MIXED = "mixed_faces"

DENSE_CAP = 4096


@dataclass(frozen=True, eq=False)
class LinearOperatorSpec:
    """Matrix-free walk Laplacian for one environment and boundary condition.

    ``mixed_faces`` holds potential 0 on ``x(1) = 0`` and ``N+1`` on
    ``x(1) = N+1`` (axis 0 here) and insulates the other faces by deleting
    their edges.
    """

    env: object
    bc: str = PERIODIC

    def __post_init__(self):
        closure = self.env.lattice.closure
        if self.bc == PERIODIC and closure != TORUS:
            raise DomainError("periodic operator needs a torus environment")
        if self.bc in (DIRICHLET, MIXED) and closure != CLOSED_BOX:
            raise DomainError(f"{self.bc} operator needs a closed_box environment")
        if self.bc not in (PERIODIC, DIRICHLET, MIXED):
            raise DomainError(f"unknown boundary condition {self.bc!r}")

    @property
    def lattice(self):
        return self.env.lattice

    @property
    def d(self):
        return self.env.lattice.d

    @property
    def periodic(self):
        return self.bc == PERIODIC

    @cached_property
    def interior(self):
        return self.lattice.interior_mask()

    @cached_property
    def weights(self):
        """Active edge weights ``(d, *grid)``; inactive edges are 0."""
        w = np.array(self.env.edge_weights)
        if self.periodic:
            return w
        inside = self.interior
        for i in range(self.d):
            ahead = np.roll(inside, -1, axis=i)
            if self.bc == DIRICHLET or i == 0:
                keep = inside | ahead
            else:
                keep = inside & ahead
            w[i] = np.where(keep, w[i], 0.0)
        return w

    @cached_property
    def site_weight(self):
        """``a(x)`` over the grid (the walk's stationary weight)."""
        w = self.weights
        tot = w.sum(axis=0)
        for i in range(self.d):
            tot = tot + np.roll(w[i], 1, axis=i)
        return tot

    @cached_property
    def n_unknowns(self):
        return int(self.interior.sum())

    def boundary_data(self):
        """Boundary values imposed by the boundary condition (zero interior)."""
        u = np.zeros(self.lattice.shape)
        if self.bc == MIXED:
            N = self.lattice.N
            idx = [slice(None)] * self.d
            idx[0] = N + 1
            u[tuple(idx)] = N + 1
        return u


class SolveResult(NamedTuple):
    u: np.ndarray
    residual: float
    iterations: int


def laplacian(op, u):
    """``L u`` evaluated at every grid site (meaningful on the interior)."""
    w = op.weights
    d = op.d
    u = np.asarray(u, dtype=np.float64)
    lead = u.ndim - d
    out = op.site_weight * u
    for i in range(d):
        ax = lead + i
        out = out - w[i] * np.roll(u, -1, axis=ax)
        out = out - np.roll(w[i], 1, axis=i) * np.roll(u, 1, axis=ax)
    return out


def _check_field(op, u):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-op.d :] != op.lattice.shape:
        raise DomainError(f"field shape {u.shape} does not match lattice {op.lattice.shape}")
    return u


def apply_operator(op, u):
    """``H u = u - (1/a(x)) sum_y a(x,y) u(y)`` on the operator's domain (0 elsewhere)."""
    u = _check_field(op, u)
    if op.bc == DIRICHLET:
        bnd = ~op.interior
        if np.any(u[..., bnd] != 0):
            raise DomainError("dirichlet operator needs u = 0 on the boundary")
    h = laplacian(op, u) / op.site_weight if op.periodic else np.where(
        op.interior, laplacian(op, u) / np.where(op.interior, op.site_weight, 1.0), 0.0
    )
    return h


def weighted_inner(op_or_env, u, v):
    """``(u, v)_N = sum_{x in Q_N} u(x) v(x) a(x)``; vector fields give the summed coordinatewise product."""
    if isinstance(op_or_env, LinearOperatorSpec):
        a, inside = op_or_env.site_weight, op_or_env.interior
    else:
        from .lattice import site_weights

        a, inside = site_weights(op_or_env), op_or_env.lattice.interior_mask()
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(_pairwise_sum((u * v * a)[..., inside].ravel()))


def _pairwise_sum(x):
    """Deterministic tree reduction of a 1-d array."""
    x = np.asarray(x, dtype=np.float64)
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0]) if x.size else 0.0


def edge_increments(op, u, slope=None):
    """Differences ``u(x + e_i) - u(x)`` per direction: array ``(*lead, d, *grid)``.

    ``slope`` (shape ``(k, d)`` for a ``k``-vector field) adds the increment of a
    linear part ``slope @ x``; this is how the non-periodic coordinate field
    ``g(x) = x`` enters on the torus.
    """
    u = np.asarray(u, dtype=np.float64)
    d = op.d
    lead = u.ndim - d
    inc = np.stack([np.roll(u, -1, axis=lead + i) - u for i in range(d)], axis=lead)
    if slope is not None:
        slope = np.asarray(slope, dtype=np.float64)
        inc = inc + slope.reshape(slope.shape + (1,) * d)
    return inc


def edge_multiplicity(op, ordered=True):
    """How often each active edge slot enters the Dirichlet form: ``(d, *grid)``.

    Ordered pairs ``(x, y)`` with ``x`` in ``Q_N`` count interior-interior edges
    twice and interior-boundary edges once.  ``ordered=False`` counts every
    active edge once.
    """
    inside = op.interior.astype(np.float64)
    m = np.stack([inside + np.roll(inside, -1, axis=i) for i in range(op.d)])
    m = np.where(op.weights > 0, m, 0.0)
    return m if ordered else (m > 0).astype(np.float64)


def dirichlet_form(op, u, v=None, ordered=True, u_slope=None, v_slope=None):
    """Dirichlet form ``sum a(x,y)(u(x)-u(y))(v(x)-v(y))``.

    Scalar fields give a float, ``k``-vector fields the ``k x k`` matrix.
    ``ordered=True`` sums over ordered pairs with first point in ``Q_N``
    (interior edges twice); ``ordered=False`` counts each edge once, which is
    the form satisfying ``E(u, v) = (u, H v)_N``.
    """
    u = _check_field(op, u)
    if v is None:
        v, v_slope = u, u_slope
    v = _check_field(op, v)
    if u.ndim != v.ndim:
        raise DomainError("u and v must both be scalar or both vector fields")
    du = edge_increments(op, u, u_slope)
    dv = edge_increments(op, v, v_slope)
    wm = op.weights * edge_multiplicity(op, ordered)
    d = op.d
    if u.ndim == d:
        return _pairwise_sum((wm * du * dv).ravel())
    ku, kv = u.shape[0], v.shape[0]
    out = np.empty((ku, kv))
    for p in range(ku):
        for q in range(kv):
            out[p, q] = _pairwise_sum((wm * du[p] * dv[q]).ravel())
    return out


def coordinate_field(lattice):
    """``g(x) = x`` as a ``(d, *grid)`` array (grid coordinates)."""
    return np.stack(np.indices(lattice.shape).astype(np.float64))


def default_max_iter(op):
    """Iteration cap scaled by a crude condition estimate (tiny weights need more steps)."""
    w = op.weights[op.weights > 0]
    ratio = float(w.max() / w.min()) if w.size else 1.0
    n = max(op.n_unknowns, 1)
    est = 200 + 40 * op.lattice.N * math.sqrt(ratio)
    return int(min(est, 20 * n + 200))


def weighted_mean_zero(op, u):
    """Project onto ``{(u, 1)_N = 0}`` (periodic operators)."""
    a = op.site_weight
    lead = u.ndim - op.d
    axes = tuple(range(lead, u.ndim))
    c = (u * a).sum(axis=axes, keepdims=True) / a.sum()
    return u - c


def cg_solve(op, rhs, tol=1e-10, max_iter=None, x0=None, boundary=None):
    """Solve ``H u = rhs`` on the operator's domain by Jacobi-preconditioned CG.

    On the torus the iterate is projected onto the weighted-mean-zero
    subspace at every step, so the singular system is solved without pinning
    a node.  ``boundary`` supplies boundary values on a closed box (default
    :meth:`LinearOperatorSpec.boundary_data`).  Returns ``(u, residual,
    iterations)`` with ``residual = ||H u - rhs||_2 / ||rhs||_2`` (absolute if
    ``rhs`` vanishes).
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    f = _check_field(op, rhs)
    if f.ndim != op.d:
        raise DomainError("cg_solve takes a scalar right-hand side")
    a = op.site_weight
    inside = op.interior
    if max_iter is None:
        max_iter = default_max_iter(op)

    if op.periodic:
        mean = float((f * a).sum())
        scale = float((np.abs(f) * a).sum())
        if abs(mean) > 1e-8 * max(scale, 1e-300):
            raise DomainError(f"periodic right-hand side is not weighted-mean-zero (mean {mean:.3e})")
        ub = np.zeros(op.lattice.shape)
    else:
        ub = op.boundary_data() if boundary is None else np.where(inside, 0.0, boundary)
        f = np.where(inside, f, 0.0)

    fnorm = float(np.linalg.norm(f[inside]))
    b = np.where(inside, a * f, 0.0) - np.where(inside, laplacian(op, ub), 0.0)
    safe_a = np.where(inside, a, 1.0)

    def L(x):
        return np.where(inside, laplacian(op, x), 0.0)

    x = np.zeros(op.lattice.shape) if x0 is None else np.where(inside, np.asarray(x0, dtype=np.float64), 0.0)
    if op.periodic:
        x = weighted_mean_zero(op, x)
    r = b - L(x)
    z = r / safe_a
    ref = fnorm if fnorm > 0 else 1.0
    res = float(np.linalg.norm(z[inside])) / ref
    if res <= tol:
        return SolveResult(x + ub, res, 0)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, max_iter + 1):
        q = L(p)
        pq = float(np.vdot(p, q))
        if pq <= 0:
            raise ConvergenceError("CG breakdown: operator not positive on search direction", res, it)
        alpha = rz / pq
        x = x + alpha * p
        if op.periodic:
            x = weighted_mean_zero(op, x)
        r = r - alpha * q
        z = r / safe_a
        res = float(np.linalg.norm(z[inside])) / ref
        if res <= tol:
            # recompute the true residual to guard against drift
            r_true = b - L(x)
            res = float(np.linalg.norm((r_true / safe_a)[inside])) / ref
            if res <= tol:
                return SolveResult(x + ub, res, it)
            r = r_true
            z = r / safe_a
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"CG did not reach tol={tol:g} in {max_iter} iterations (residual {res:.3e})", res, max_iter)


def _sine_guess(op):
    """Positive trial vector: the constant-conductance Dirichlet ground state."""
    N = op.lattice.N
    s = np.sin(np.pi * np.arange(N + 2) / (N + 1))
    g = np.ones(op.lattice.shape)
    for i in range(op.d):
        shape = [1] * op.d
        shape[i] = N + 2
        g = g * s.reshape(shape)
    return np.where(op.interior, g, 0.0)


class EigenPair(NamedTuple):
    lam: float
    psi: np.ndarray
    residual: float
    iterations: int


def smallest_eigenpair(op, tol=1e-12, max_iter=500, inner_tol=1e-13):
    """Bottom Dirichlet eigenpair by inverse iteration with CG inner solves.

    ``psi`` is normalised in the weighted norm and sign-fixed so that
    ``sum psi > 0``.  Stops when ``||H psi - lam psi||_2 <= tol * lam * ||psi||_2``;
    ``residual`` reports the absolute ``||H psi - lam psi||_2``.
    """
    if op.bc != DIRICHLET:
        raise DomainError("smallest_eigenpair needs a dirichlet operator")
    a = op.site_weight
    inside = op.interior

    def normalise(v):
        return v / math.sqrt(float((v * v * a)[inside].sum()))

    psi = normalise(_sine_guess(op))
    lam = float((psi * laplacian(op, psi))[inside].sum())
    res = math.inf
    for it in range(1, max_iter + 1):
        sol = cg_solve(op, psi, tol=inner_tol, x0=psi / lam)
        psi = normalise(sol.u)
        Lpsi = np.where(inside, laplacian(op, psi), 0.0)
        lam = float((psi * Lpsi)[inside].sum())
        hres = Lpsi / np.where(inside, a, 1.0) - lam * psi
        res = float(np.linalg.norm(hres[inside]))
        if res <= tol * lam * float(np.linalg.norm(psi[inside])):
            break
    else:
        raise ConvergenceError(f"inverse iteration did not converge (residual {res:.3e})", res, max_iter)
    if psi.sum() < 0:
        psi = -psi
    return EigenPair(lam, psi, res, it)


def domain_sites(op):
    """Grid multi-indices of the unknowns, in C order (rows of the dense oracle)."""
    return [tuple(int(c) for c in x) for x in np.argwhere(op.interior)]


def dense_oracle(op):
    """Explicit matrix of ``H`` on the domain sites, assembled by direct neighbour loops.

    For testing only; refuses more than 4096 sites.
    """
    lat = op.lattice
    if lat.n_sites > DENSE_CAP:
        raise UsageError(f"dense oracle limited to {DENSE_CAP} sites, lattice has {lat.n_sites}")
    sites = domain_sites(op)
    pos = {x: k for k, x in enumerate(sites)}
    n = len(sites)
    W = op.env.edge_weights
    side = lat.side
    H = np.zeros((n, n))
    for x, k in pos.items():
        nbrs = []
        for i in range(lat.d):
            for step in (1, -1):
                y = list(x)
                y[i] += step
                if op.periodic:
                    y[i] %= side
                elif not 0 <= y[i] < side:
                    continue
                y = tuple(y)
                base = x if step == 1 else y
                w = W[(i,) + base]
                if op.bc == MIXED and y not in pos and i != 0:
                    continue  # insulated side face
                nbrs.append((y, w))
        ax = sum(w for _, w in nbrs)
        H[k, k] += 1.0
        for y, w in nbrs:
            if y in pos:
                H[k, pos[y]] -= w / ax
    return H


def dense_site_weights(op):
    """``a(x)`` on the domain sites in oracle order, recomputed by loops."""
    H_sites = domain_sites(op)
    lat = op.lattice
    W = op.env.edge_weights
    out = []
    for x in H_sites:
        tot = 0.0
        for i in range(lat.d):
            for step in (1, -1):
                y = list(x)
                y[i] += step
                if op.periodic:
                    y[i] %= lat.side
                elif not 0 <= y[i] < lat.side:
                    continue
                if op.bc == MIXED and i != 0 and not op.interior[tuple(y)]:
                    continue
                base = x if step == 1 else tuple(y)
                tot += W[(i,) + tuple(base)]
        out.append(tot)
    return np.array(out)


def torus_spectral_gap(op):
    """Smallest nonzero eigenvalue of the periodic ``H`` (dense; small lattices only)."""
    if not op.periodic:
        raise DomainError("torus spectral gap needs a periodic operator")
    H = dense_oracle(op)
    a = dense_site_weights(op)
    s = np.sqrt(a)
    S = (s[:, None] * H) / s[None, :]
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    return float(ev[1])
