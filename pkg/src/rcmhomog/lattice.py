"""Lattice geometry, i.i.d. conductance environments and their file format.

Conventions
-----------
A torus lattice has sites ``[0, N-1]^d`` with periodic identification.  A
closed box has sites ``[0, N+1]^d``; the interior ``Q_N`` is ``[1, N]^d`` and
the rest is the boundary.  Edge weights are held in an array of shape
``(d, *grid)`` where ``w[i][x]`` is the conductance of the edge from ``x`` to
``x + e_i`` (wrapped on the torus).  Box slots with ``x(i) = N+1`` have no
edge and hold 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, UsageError
from .seeding import counter_uniforms

FORMAT_NAME = "rcm-environment"
FORMAT_VERSION = 1

TORUS = "torus"
CLOSED_BOX = "closed_box"
MAX_DIM = 5


@dataclass(frozen=True)
class LatticeSpec:
    d: int
    N: int
    closure: str = TORUS

    def __post_init__(self):
        if not (isinstance(self.d, (int, np.integer)) and 1 <= self.d <= MAX_DIM):
            raise ParameterError(f"dimension must satisfy 1 <= d <= {MAX_DIM}, got {self.d!r}")
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise ParameterError(f"side length must be an integer >= 1, got {self.N!r}")
        if self.closure not in (TORUS, CLOSED_BOX):
            raise ParameterError(f"closure must be 'torus' or 'closed_box', got {self.closure!r}")

    @property
    def side(self):
        return self.N if self.closure == TORUS else self.N + 2

    @property
    def shape(self):
        return (self.side,) * self.d

    @property
    def n_sites(self):
        return self.side**self.d

    def index(self, x):
        """Linear (C-order) index of site ``x``."""
        x = tuple(int(c) for c in x)
        if len(x) != self.d or any(c < 0 or c >= self.side for c in x):
            raise UsageError(f"site {x} outside lattice {self.shape}")
        return int(np.ravel_multi_index(x, self.shape))

    def coords(self, index):
        if not 0 <= index < self.n_sites:
            raise UsageError(f"index {index} outside lattice of {self.n_sites} sites")
        return tuple(int(c) for c in np.unravel_index(index, self.shape))

    @cached_property
    def edge_mask(self):
        """Boolean ``(d, *grid)`` array marking which ``(x, x+e_i)`` slots are edges."""
        mask = np.ones((self.d,) + self.shape, dtype=bool)
        if self.closure == CLOSED_BOX:
            for i in range(self.d):
                sl = [i] + [slice(None)] * self.d
                sl[1 + i] = self.side - 1
                mask[tuple(sl)] = False
        return mask

    @property
    def n_edges(self):
        return int(self.edge_mask.sum())

    def interior_mask(self):
        """Sites of ``Q_N`` (everything on the torus)."""
        if self.closure == TORUS:
            return np.ones(self.shape, dtype=bool)
        m = np.zeros(self.shape, dtype=bool)
        m[(slice(1, self.N + 1),) * self.d] = True
        return m

    def to_canonical(self, edge_array):
        """Flatten a ``(d, *grid)`` edge array into canonical order (site, then direction)."""
        a = np.moveaxis(np.asarray(edge_array), 0, -1)
        m = np.moveaxis(self.edge_mask, 0, -1)
        return a[m]

    def from_canonical(self, flat):
        """Inverse of :meth:`to_canonical`; missing slots are filled with 0."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_edges,):
            raise FormatError(f"expected {self.n_edges} edge weights, got {flat.shape}")
        out = np.zeros(self.shape + (self.d,))
        out[np.moveaxis(self.edge_mask, 0, -1)] = flat
        return np.moveaxis(out, -1, 0)

    def edge_id(self, x, i):
        """Canonical id of the edge leaving site ``x`` in positive direction ``i``."""
        x = tuple(int(c) for c in x)
        if not self.edge_mask[(i,) + x]:
            raise UsageError(f"no edge from {x} in direction {i}")
        ids = np.cumsum(np.moveaxis(self.edge_mask, 0, -1).ravel()) - 1
        return int(ids[self.index(x) * self.d + i])

    def edge_from_id(self, eid):
        mask = np.moveaxis(self.edge_mask, 0, -1).ravel()
        slot = int(np.flatnonzero(mask)[eid])
        site, i = divmod(slot, self.d)
        return self.coords(site), i


CONSTANT = "constant"
UNIFORM_ELLIPTIC = "uniform_elliptic"
TWO_POINT = "two_point"
POWER_LOW_TAIL = "power_low_tail"
_ARITY = {CONSTANT: 1, UNIFORM_ELLIPTIC: 1, TWO_POINT: 3, POWER_LOW_TAIL: 2}


@dataclass(frozen=True)
class DistributionSpec:
    """Parametric law of one i.i.d. conductance (or potential) value.

    ``params`` are ``(c,)``, ``(kappa,)``, ``(p, lo, hi)`` or ``(gamma, kappa)``.
    Zero values are allowed here (``constant(0)``, ``two_point(p, 0, v)``) because
    potentials use the same family; :func:`sample_environment` insists on
    strictly positive conductances.
    """

    kind: str
    params: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise ParameterError(f"unknown distribution kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if len(params) != _ARITY[self.kind]:
            raise ParameterError(f"{self.kind} takes {_ARITY[self.kind]} parameter(s), got {len(params)}")
        if not all(math.isfinite(p) for p in params):
            raise ParameterError(f"non-finite parameter in {self}")
        if self.kind == CONSTANT and params[0] < 0:
            raise ParameterError("constant(c) needs c >= 0")
        elif self.kind == UNIFORM_ELLIPTIC and params[0] < 1:
            raise ParameterError("uniform_elliptic(kappa) needs kappa >= 1")
        elif self.kind == TWO_POINT:
            p, lo, hi = params
            if not 0 <= p <= 1:
                raise ParameterError("two_point(p, lo, hi) needs 0 <= p <= 1")
            if not 0 <= lo <= hi:
                raise ParameterError("two_point(p, lo, hi) needs 0 <= lo <= hi")
        elif self.kind == POWER_LOW_TAIL:
            g, k = params
            if not 0 < g < 2:
                raise ParameterError(f"power_low_tail needs 0 < gamma < 2, got gamma={g}")
            if k < 1:
                raise ParameterError("power_low_tail needs kappa >= 1")

    @classmethod
    def constant(cls, c):
        return cls(CONSTANT, (c,))

    @classmethod
    def uniform_elliptic(cls, kappa):
        return cls(UNIFORM_ELLIPTIC, (kappa,))

    @classmethod
    def two_point(cls, p, lo, hi):
        return cls(TWO_POINT, (p, lo, hi))

    @classmethod
    def power_low_tail(cls, gamma, kappa=1.0):
        return cls(POWER_LOW_TAIL, (gamma, kappa))

    @classmethod
    def parse(cls, text):
        """Parse ``'uniform-elliptic:2'``, ``'two-point:0.5,0.5,2'`` and friends."""
        kind, _, rest = text.partition(":")
        kind = kind.strip().replace("-", "_")
        try:
            params = tuple(float(v) for v in rest.split(",")) if rest.strip() else ()
        except ValueError as exc:
            raise ParameterError(f"cannot parse distribution {text!r}") from exc
        return cls(kind, params)

    def __str__(self):
        return self.kind.replace("_", "-") + ":" + ",".join(repr(p) for p in self.params)

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["params"]))

    @property
    def is_positive(self):
        """True when every draw is strictly positive."""
        if self.kind == CONSTANT:
            return self.params[0] > 0
        if self.kind == TWO_POINT:
            p, lo, _ = self.params
            return lo > 0 or p == 1
        return True

    @property
    def is_degenerate(self):
        """True for laws concentrated on a single value."""
        if self.kind == CONSTANT:
            return True
        if self.kind == UNIFORM_ELLIPTIC:
            return self.params[0] == 1
        if self.kind == TWO_POINT:
            p, lo, hi = self.params
            return p in (0.0, 1.0) or lo == hi
        return False

    @property
    def upper(self):
        """Supremum of the support."""
        k = self.kind
        if k == CONSTANT:
            return self.params[0]
        if k == UNIFORM_ELLIPTIC:
            return self.params[0]
        if k == TWO_POINT:
            p, lo, hi = self.params
            return hi if p > 0 else lo
        return self.params[1]

    @property
    def lower(self):
        """Infimum of the support (0 for the power-law family)."""
        k = self.kind
        if k == CONSTANT:
            return self.params[0]
        if k == UNIFORM_ELLIPTIC:
            return 1.0 / self.params[0]
        if k == TWO_POINT:
            p, lo, hi = self.params
            return lo if p < 1 else hi
        return 0.0

    @property
    def kappa(self):
        """Smallest kappa >= 1 with support in [1/kappa, kappa] (inf if unbounded below)."""
        lo, hi = self.lower, self.upper
        if lo <= 0:
            return math.inf
        return max(1.0, hi, 1.0 / lo)

    @property
    def tail_constant(self):
        """``D0`` with ``P(1/a >= s) = D0 s^(1-2/gamma)`` for the power-law family."""
        if self.kind != POWER_LOW_TAIL:
            raise ParameterError("tail constant is defined for power_low_tail only")
        g, k = self.params
        return k ** (-(2.0 - g) / g)

    def cdf(self, t):
        """Distribution function, used by tests and by the KS check."""
        t = np.asarray(t, dtype=np.float64)
        k = self.kind
        if k == CONSTANT:
            return (t >= self.params[0]).astype(float)
        if k == UNIFORM_ELLIPTIC:
            kap = self.params[0]
            if kap == 1:
                return (t >= 1).astype(float)
            return np.clip((t - 1 / kap) / (kap - 1 / kap), 0, 1)
        if k == TWO_POINT:
            p, lo, hi = self.params
            return np.where(t >= hi, 1.0, np.where(t >= lo, 1 - p, 0.0))
        g, kap = self.params
        return np.clip(t / kap, 0, 1) ** ((2 - g) / g)

    def quantile(self, u):
        """Map uniforms on (0, 1] to draws; this is the sampler."""
        u = np.asarray(u, dtype=np.float64)
        k = self.kind
        if k == CONSTANT:
            return np.full(u.shape, self.params[0])
        if k == UNIFORM_ELLIPTIC:
            kap = self.params[0]
            return 1.0 / kap + (kap - 1.0 / kap) * u
        if k == TWO_POINT:
            p, lo, hi = self.params
            return np.where(u <= p, hi, lo)
        g, kap = self.params
        # tail P(1/a >= s) = (kappa s)^{-(2-gamma)/gamma}; clip away underflow to 0
        return np.maximum(kap * u ** (g / (2.0 - g)), np.finfo(float).tiny)


@dataclass(frozen=True, eq=False)
class Environment:
    """Conductances on a finite lattice, one value per undirected edge.

    ``weights`` is the flat array in canonical edge order.
    """

    lattice: LatticeSpec
    dist: DistributionSpec
    seed: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.lattice.n_edges,):
            raise ParameterError(f"expected {self.lattice.n_edges} weights, got shape {w.shape}")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ParameterError("all conductances must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @cached_property
    def edge_weights(self):
        """Weights as a ``(d, *grid)`` array (0 where there is no edge)."""
        a = self.lattice.from_canonical(self.weights)
        a.setflags(write=False)
        return a

    @property
    def d(self):
        return self.lattice.d

    @property
    def N(self):
        return self.lattice.N

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.lattice == other.lattice
            and self.dist == other.dist
            and self.seed == other.seed
            and self.weights.tobytes() == other.weights.tobytes()
        )

    __hash__ = None

    def with_weights(self, edge_array):
        """Copy with a new ``(d, *grid)`` weight array (used for perturbations)."""
        return Environment(self.lattice, self.dist, self.seed, self.lattice.to_canonical(edge_array))

    def with_edge(self, eid, value):
        w = self.weights.copy()
        w[eid] = value
        return Environment(self.lattice, self.dist, self.seed, w)

    def permuted_axes(self, perm):
        """Environment with lattice axes relabelled: new axis ``k`` is old axis ``perm[k]``."""
        a = self.edge_weights
        b = np.stack([np.transpose(a[p], perm) for p in perm])
        return self.with_weights(b)

    def shifted(self, shift):
        """Cyclic translation of a torus environment by ``shift``."""
        if self.lattice.closure != TORUS:
            raise UsageError("translation is defined on the torus only")
        a = np.roll(self.edge_weights, tuple(shift), axis=tuple(range(1, self.d + 1)))
        return self.with_weights(a)


def sample_environment(lattice, dist, seed):
    """Draw one i.i.d. conductance per undirected edge.

    The draw for edge ``k`` (canonical order) is ``dist.quantile(U_k)`` with
    ``U_k`` a counter-based uniform keyed by ``seed``.
    """
    if not dist.is_positive:
        raise ParameterError(f"conductances must be strictly positive; {dist} can produce 0")
    ids = np.arange(lattice.n_edges, dtype=np.uint64)
    w = dist.quantile(counter_uniforms(seed, ids))
    return Environment(lattice, dist, int(seed), w)


def constant_environment(lattice, c=1.0):
    return sample_environment(lattice, DistributionSpec.constant(c), 0)


def environment_from_weights(lattice, weights, seed=0):
    """Environment from explicit canonical weights (e.g. a d=1 chain)."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = float(w.min()), float(w.max())
    kappa = max(1.0, hi, 1.0 / lo) if lo > 0 else 1.0
    return Environment(lattice, DistributionSpec.uniform_elliptic(kappa), int(seed), w)


def _edge_between(lattice, x, y):
    """(site, direction) of the edge joining neighbours x and y; coordinates reduced mod N on the torus."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    diff = y - x
    nz = np.flatnonzero(diff)
    if len(nz) != 1 or abs(int(diff[nz[0]])) != 1:
        raise UsageError(f"{tuple(x)} and {tuple(y)} are not nearest neighbours")
    i = int(nz[0])
    base = x if diff[i] == 1 else y
    if lattice.closure == TORUS:
        base = np.mod(base, lattice.N)
    return tuple(int(c) for c in base), i


def periodic_weight(env, x, y):
    """Conductance of the Z^d edge ``x ~ y`` in the N-periodic extension of a torus environment."""
    if env.lattice.closure != TORUS:
        raise UsageError("periodic extension needs a torus environment")
    base, i = _edge_between(env.lattice, x, y)
    return float(env.edge_weights[(i,) + base])


def site_weights(env):
    """``a(x) = sum_{y~x} a(x, y)`` for every site, as an array over the grid."""
    a = env.edge_weights
    tot = a.sum(axis=0)
    for i in range(env.d):
        tot = tot + np.roll(a[i], 1, axis=i)
    return tot


def site_weight(env, x):
    x = tuple(int(c) for c in x)
    lat = env.lattice
    if len(x) != lat.d or any(c < 0 or c >= lat.side for c in x):
        raise UsageError(f"site {x} outside lattice")
    return float(site_weights(env)[x])


def save_environment(env, path):
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d": env.d,
        "N": env.N,
        "closure": env.lattice.closure,
        "dist": env.dist.to_dict(),
        "seed": int(env.seed),
        "weights": [float(v) for v in env.weights],
    }
    text = json.dumps(payload, separators=(",", ":"))
    Path(path).write_text(text + "\n")
    return Path(path)


def load_environment(path):
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read environment file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise FormatError(f"{path} is not an environment file")
    if payload.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported environment format version {payload.get('version')!r}")
    try:
        lattice = LatticeSpec(int(payload["d"]), int(payload["N"]), payload["closure"])
        dist = DistributionSpec.from_dict(payload["dist"])
        return Environment(lattice, dist, int(payload["seed"]), np.array(payload["weights"], dtype=np.float64))
    except (KeyError, TypeError, ParameterError) as exc:
        raise FormatError(f"corrupt environment file {path}: {exc}") from exc
