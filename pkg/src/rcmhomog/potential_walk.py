"""Random walk killed by a random potential: Green function and the point-to-point statistic.

At ``x`` the walk dies with probability ``V(x)/(1+V(x))`` and otherwise steps
like the reversible walk, so the sub-stochastic kernel is
``B(x, z) = p(x, z) / (1 + V(x))``.  The Green function ``G = (I - B)^{-1}``
on Z^d is approximated on absorbing boxes of doubling side.

With ``D = diag(a(x)(1 + V(x)))`` and ``M = D - A`` (``A`` the conductance
matrix), ``G = M^{-1} D``.  ``M`` is a symmetric M-matrix, so one sparse
factorisation gives a whole row of ``G``.  Triangular solves with an
M-matrix factor and a nonnegative right-hand side add only nonnegative
terms, which keeps exponentially small entries accurate in plain float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate

from .errors import FormatError, ParameterError, UsageError
from .lattice import TORUS, DistributionSpec
from .seeding import counter_uniforms, point_counters

log = logging.getLogger(__name__)

# default truncation budget: a direct factorisation beyond this many sites is too slow in d >= 3
MAX_BOX_SITES = 2**16

POTENTIAL_FORMAT = "rcm-potential"


def box_coordinates(lower, side, d):
    """Integer coordinates ``(side^d, d)`` of the box ``lower + [0, side)^d`` in C order."""
    grids = np.indices((side,) * d).reshape(d, -1).T
    return grids + np.asarray(lower, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class PotentialField:
    """i.i.d. potential on Z^d, materialised on the box ``lower + [0, side)^d``.

    Values are a pure function of ``(dist, seed, point)``, so boxes of any size
    agree where they overlap.
    """

    dist: DistributionSpec
    seed: int
    lower: tuple
    side: int
    V: np.ndarray

    def __post_init__(self):
        if np.any(self.V < 0):
            raise ParameterError("potential must be nonnegative")
        th = self.theta
        if not np.allclose(np.exp(-th), 1.0 / (1.0 + self.V), rtol=4e-16, atol=0):
            raise ParameterError("theta inconsistent with V")

    @property
    def d(self):
        return len(self.lower)

    @property
    def theta(self):
        """Killing rate ``log(1 + V)``."""
        return np.log1p(self.V)

    def on_box(self, lower, side):
        return sample_potential(self.dist, self.seed, lower, side)

    def __eq__(self, other):
        if not isinstance(other, PotentialField):
            return NotImplemented
        return (
            self.dist == other.dist
            and self.seed == other.seed
            and tuple(self.lower) == tuple(other.lower)
            and self.side == other.side
            and self.V.tobytes() == other.V.tobytes()
        )

    __hash__ = None


def _check_potential_law(dist):
    if dist.lower < 0:
        raise ParameterError(f"potential law {dist} has negative support")


def potential_values(dist, seed, coords):
    """``V`` at arbitrary points of Z^d (array ``(..., d)``)."""
    _check_potential_law(dist)
    return dist.quantile(counter_uniforms(seed, point_counters(coords)))


def sample_potential(dist, seed, lower, side):
    lower = tuple(int(c) for c in lower)
    d = len(lower)
    if side < 1:
        raise UsageError("box side must be >= 1")
    V = potential_values(dist, seed, box_coordinates(lower, side, d)).reshape((side,) * d)
    V.setflags(write=False)
    return PotentialField(dist, int(seed), lower, int(side), V)


def save_potential(pot, path):
    payload = {
        "format": POTENTIAL_FORMAT,
        "version": 1,
        "dist": pot.dist.to_dict(),
        "seed": pot.seed,
        "lower": list(pot.lower),
        "side": pot.side,
        "V": [float(v) for v in pot.V.ravel()],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_potential(path):
    try:
        p = json.loads(Path(path).read_text())
        if p.get("format") != POTENTIAL_FORMAT or p.get("version") != 1:
            raise FormatError(f"{path} is not a version-1 potential file")
        lower = tuple(p["lower"])
        V = np.array(p["V"], dtype=np.float64).reshape((p["side"],) * len(lower))
        V.setflags(write=False)
        return PotentialField(DistributionSpec.from_dict(p["dist"]), int(p["seed"]), lower, int(p["side"]), V)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt potential file {path}: {exc}") from exc


def theta_moments(dist):
    """``(E theta, Var theta)`` for ``theta = log(1 + V)``, by quadrature over the quantile function."""
    _check_potential_law(dist)
    if dist.kind == "constant":
        return math.log1p(dist.params[0]), 0.0
    if dist.kind == "two_point":
        p, lo, hi = dist.params
        t0, t1 = math.log1p(lo), math.log1p(hi)
        m = p * t1 + (1 - p) * t0
        return m, p * (1 - p) * (t1 - t0) ** 2
    th = lambda u: float(np.log1p(dist.quantile(u)))  # noqa: E731
    m1 = integrate.quad(th, 0, 1, limit=200)[0]
    m2 = integrate.quad(lambda u: th(u) ** 2, 0, 1, limit=200)[0]
    return m1, max(m2 - m1 * m1, 0.0)


class Conductances:
    """Conductances on Z^d: a constant, or the periodic extension of a torus environment."""

    def __init__(self, env=None, d=None):
        if env is None or isinstance(env, (int, float)):
            if d is None:
                raise UsageError("dimension needed for constant conductances")
            self.c = 1.0 if env is None else float(env)
            self.env = None
            self.d = d
        else:
            if env.lattice.closure != TORUS:
                raise UsageError("general conductances must be given as a torus environment (periodically extended)")
            self.env = env
            self.c = None
            self.d = env.d

    def forward(self, coords, i):
        """Weight of the edge ``(x, x + e_i)`` for each row of ``coords``."""
        if self.env is None:
            return np.full(len(coords), self.c)
        base = np.mod(coords, self.env.N)
        return self.env.edge_weights[(i,) + tuple(base.T)]


@dataclass
class _Box:
    lower: np.ndarray
    side: int
    M: sp.csc_matrix
    Dv: np.ndarray  # a(x)(1 + V(x))
    A: sp.csr_matrix  # conductances inside the box
    lu: object = None

    def index(self, x):
        rel = np.asarray(x) - self.lower
        if np.any(rel < 0) or np.any(rel >= self.side):
            raise UsageError(f"point {tuple(x)} outside the box")
        return int(np.ravel_multi_index(tuple(rel), (self.side,) * len(rel)))

    def solve(self, rhs):
        if self.lu is None:
            # symmetric ordering without pivoting keeps the factors M-matrices
            self.lu = spla.splu(self.M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options={"SymmetricMode": True})
        return self.lu.solve(rhs)


def _assemble(cond, pot_dist, pot_seed, lower, side):
    d = cond.d
    lower = np.asarray(lower, dtype=np.int64)
    coords = box_coordinates(lower, side, d)
    n = len(coords)
    V = potential_values(pot_dist, pot_seed, coords)
    a = np.zeros(n)
    rows, cols, vals = [], [], []
    idx = np.arange(n).reshape((side,) * d)
    for i in range(d):
        step = np.zeros(d, dtype=np.int64)
        step[i] = 1
        w_fwd = cond.forward(coords, i)
        w_bwd = cond.forward(coords - step, i)
        a += w_fwd + w_bwd
        src = idx.take(range(side - 1), axis=i).ravel()
        dst = idx.take(range(1, side), axis=i).ravel()
        w = w_fwd[src]
        rows += [src, dst]
        cols += [dst, src]
        vals += [w, w]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    Dv = a * (1.0 + V)
    M = (sp.diags(Dv) - A).tocsc()
    return _Box(lower, side, M, Dv, A)


@dataclass(frozen=True, eq=False)
class GreenSolution:
    G_row: np.ndarray  # G(x, .) on the final box
    lower: tuple
    box_side: int
    value: float  # G(x, y)
    log_value: float
    truncation_gap: float
    converged: bool
    boxes: tuple  # (side, G(x, y)) for every box tried


def pair_box(x, y, side):
    """Lower corner of the side-``side`` box centred on the segment ``[x, y]``."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    centre = (x + y) // 2
    return centre - side // 2


def initial_side(x, y):
    return 2 * int(np.max(np.abs(np.asarray(x) - np.asarray(y)))) + 4


def _green_row(box, x):
    e = np.zeros(box.M.shape[0])
    e[box.index(x)] = 1.0
    u = box.solve(e)
    return u * box.Dv


def _budget_side(d):
    """Largest ``s`` with ``s^d <= MAX_BOX_SITES``."""
    s = int(round(MAX_BOX_SITES ** (1.0 / d)))
    while s**d > MAX_BOX_SITES:
        s -= 1
    while (s + 1) ** d <= MAX_BOX_SITES:
        s += 1
    return s


def green_function(cond, pot, x, y, tol=1e-10, max_side=None):
    """``G(x, y)`` for the killed walk, by box doubling.

    ``cond`` is a :class:`Conductances`, a torus environment, a number or
    ``None`` (unit conductances).  ``pot`` is a :class:`PotentialField` (only
    its law and seed are used; boxes are resampled consistently).
    Doubling stops at ``max_side`` (default: about ``MAX_BOX_SITES`` sites);
    an unconverged result carries its ``truncation_gap``.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if not isinstance(cond, Conductances):
        cond = Conductances(cond, d=len(x))
    side = initial_side(x, y)
    if max_side is None:
        max_side = max(_budget_side(len(x)), side)
    history = []
    prev = None
    gap = math.inf
    while True:
        lower = pair_box(x, y, side)
        box = _assemble(cond, pot.dist, pot.seed, lower, side)
        row = _green_row(box, x)
        val = float(row[box.index(y)])
        history.append((side, val))
        if prev is not None:
            gap = abs(val - prev) / val if val > 0 else math.inf
            if gap <= tol:
                break
        if 2 * side > max_side:
            break
        prev = val
        # nested boxes: keep the same centre
        side *= 2
    if gap > tol and len(history) > 1:
        log.warning("Green function truncated at box side %d with relative gap %.2e", side, gap)
    return GreenSolution(
        row.reshape((side,) * len(x)), tuple(int(c) for c in lower), side, val,
        math.log(val) if val > 0 else -math.inf, gap, gap <= tol, tuple(history),
    )


@dataclass(frozen=True)
class LastVisit:
    log_G_xy: float
    log_G_xx: float
    log_escape: float  # log P_x(tau_y < tau_x^+)
    log_G_yy_avoid: float  # log G(y, y) for the walk also killed at x
    log_G_yy: float

    @property
    def rhs(self):
        return self.log_G_xx + self.log_escape + self.log_G_yy_avoid

    @property
    def gap(self):
        return abs(self.log_G_xy - self.rhs)

    @property
    def full_diagonal_gap(self):
        """``log G(x,x) + log P + log G(y,y) - log G(x,y)`` (strictly positive when the walk can reach x from y)."""
        return self.log_G_xx + self.log_escape + self.log_G_yy - self.log_G_xy


def last_visit_decomposition(cond, pot, x, y, tol=1e-10, side=None):
    """Split ``G(x, y)`` at the last visit to ``x`` on one common absorbing box.

    ``G(x, y) = G(x, x) P_x(tau_y < tau_x^+) G^x(y, y)`` where ``G^x`` is the
    Green function of the walk additionally killed on hitting ``x``.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.array_equal(x, y):
        raise UsageError("last-visit decomposition needs x != y")
    if not isinstance(cond, Conductances):
        cond = Conductances(cond, d=len(x))
    if side is None:
        side = green_function(cond, pot, x, y, tol=tol).box_side
    box = _assemble(cond, pot.dist, pot.seed, pair_box(x, y, side), side)
    ix, iy = box.index(x), box.index(y)
    row_x = _green_row(box, x)
    row_y = _green_row(box, y)
    G_xy, G_xx, G_yy = row_x[iy], row_x[ix], row_y[iy]

    n = box.M.shape[0]
    keep = np.setdiff1d(np.arange(n), [ix, iy])
    M_k = box.M[keep][:, keep].tocsc()
    rhs = box.A[keep][:, [iy]].toarray().ravel()
    h = np.zeros(n)
    h[iy] = 1.0
    h[keep] = spla.spsolve(M_k, rhs)
    escape = float(box.A[[ix]].toarray().ravel() @ h) / box.Dv[ix]

    keep_x = np.setdiff1d(np.arange(n), [ix])
    M_x = box.M[keep_x][:, keep_x].tocsc()
    e = np.zeros(n - 1)
    pos_y = int(np.searchsorted(keep_x, iy))
    e[pos_y] = 1.0
    G_yy_avoid = spla.spsolve(M_x, e)[pos_y] * box.Dv[iy]
    return LastVisit(math.log(G_xy), math.log(G_xx), math.log(escape), math.log(G_yy_avoid), math.log(G_yy))


def point_statistic(cond, pot_dist, seed, direction, N, tol=1e-10):
    """``-N^{-1} log G(0, N x)`` for the potential law ``pot_dist`` seeded by ``seed``."""
    direction = np.asarray(direction, dtype=np.int64)
    if not np.any(direction):
        raise UsageError("direction must be nonzero")
    pot = sample_potential(pot_dist, seed, tuple(np.zeros(len(direction), dtype=int)), 1)
    sol = green_function(cond, pot, np.zeros_like(direction), N * direction, tol=tol)
    return -sol.log_value / N, sol
