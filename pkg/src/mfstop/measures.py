"""Atomic measures on S = R^d x {0, 1} and transport distances between them.

An atom is a pair ``(x, i)`` with ``x`` a point of R^d and ``i`` the survival
indicator (1 alive, 0 stopped).  Measures may carry leading batch dimensions
so that model coefficients can be evaluated on many configurations at once;
every public operation in this module works on a single (unbatched) measure.
"""
from __future__ import annotations

import io
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

WEIGHT_TOL = 1e-12


class MeasureError(ValueError):
    """Invalid atoms, weights or densities."""


class TransportUsageError(ValueError):
    """Distance requested on a pair the selected solver cannot handle."""


class EmpiricalMeasure:
    """Weighted atoms ``(x_k, i_k)`` with weights ``w_k``.

    Parameters
    ----------
    x : array_like, shape (..., n, d)
    i : array_like, shape (..., n), values in {0, 1}
    w : array_like, shape (..., n), nonnegative, summing to one over the atom axis
    """

    __slots__ = ("x", "i", "w")

    def __init__(self, x, i, w, *, validate: bool = True):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.i = np.asarray(i, dtype=np.int8)
        self.w = np.asarray(w, dtype=float)
        if validate:
            self._validate()

    @classmethod
    def uniform(cls, x, i=None) -> "EmpiricalMeasure":
        """The empirical measure ``(1/N) sum_k delta_{(x_k, i_k)}``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[-2]
        if i is None:
            i = np.ones(x.shape[:-1], dtype=np.int8)
        w = np.full(x.shape[:-1], 1.0 / n)
        return cls(x, i, w)

    @classmethod
    def _trusted(cls, x, i, w) -> "EmpiricalMeasure":
        obj = cls.__new__(cls)
        obj.x, obj.i, obj.w = x, i, w
        return obj

    def _validate(self) -> None:
        x, i, w = self.x, self.i, self.w
        if x.shape[:-1] != i.shape or i.shape != w.shape:
            raise MeasureError(f"shape mismatch: x{x.shape}, i{i.shape}, w{w.shape}")
        if not np.all(np.isfinite(x)):
            raise MeasureError("atom positions must be finite")
        if not np.all((i == 0) | (i == 1)):
            raise MeasureError("indicators must be exactly 0 or 1")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        if np.any(np.abs(w.sum(axis=-1) - 1.0) > WEIGHT_TOL):
            raise MeasureError("weights must sum to 1")

    @property
    def n_atoms(self) -> int:
        return self.x.shape[-2]

    @property
    def dim(self) -> int:
        return self.x.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.x.shape[:-2]

    def alive_mass(self) -> np.ndarray:
        return np.sum(self.w * self.i, axis=-1)

    def alive_integral(self, values: np.ndarray) -> np.ndarray:
        """``sum_k w_k i_k values_k`` over the atom axis; ``values`` has shape (..., n) or (..., n, d)."""
        wi = self.w * self.i
        if values.ndim == wi.ndim + 1:
            return np.einsum("...n,...nd->...d", wi, values)
        return np.sum(wi * values, axis=-1)

    def integral(self, values: np.ndarray) -> np.ndarray:
        if values.ndim == self.w.ndim + 1:
            return np.einsum("...n,...nd->...d", self.w, values)
        return np.sum(self.w * values, axis=-1)

    def alive_mean(self) -> np.ndarray:
        """Unnormalised first moment of the alive part, ``int x m(dx, 1)``."""
        return self.alive_integral(self.x)

    def points(self, indicator_scale: float = 1.0) -> np.ndarray:
        """Atoms as vectors of R^{d+1}, the indicator appended as last coordinate."""
        return np.concatenate([self.x, indicator_scale * self.i[..., None].astype(float)], axis=-1)

    def is_uniform(self) -> bool:
        return bool(np.ptp(self.w) <= 1e-15)

    def mixture(self, other: "EmpiricalMeasure", lam: float) -> "EmpiricalMeasure":
        """``lam * other + (1 - lam) * self`` as a concatenation of atoms."""
        return EmpiricalMeasure(
            np.concatenate([self.x, other.x], axis=-2),
            np.concatenate([self.i, other.i], axis=-1),
            np.concatenate([(1.0 - lam) * self.w, lam * other.w], axis=-1),
        )

    def pruned(self, tol: float = 0.0) -> "EmpiricalMeasure":
        keep = self.w > tol
        w = self.w[keep]
        return EmpiricalMeasure(self.x[keep], self.i[keep], w / w.sum())

    def to_text(self) -> str:
        """Columnar text: one atom per row ``weight x_1 .. x_d i``."""
        buf = io.StringIO()
        buf.write("# weight " + " ".join(f"x{j + 1}" for j in range(self.dim)) + " i\n")
        for k in range(self.n_atoms):
            row = [repr(float(self.w[k]))] + [repr(float(v)) for v in self.x[k]] + [str(int(self.i[k]))]
            buf.write(" ".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EmpiricalMeasure":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        arr = np.array([[float(v) for v in r] for r in rows])
        return cls(arr[:, 1:-1], arr[:, -1].astype(np.int8), arr[:, 0])

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n_atoms={self.n_atoms}, dim={self.dim}, batch={self.batch_shape})"


# -- the partial order --------------------------------------------------------

def _density_on_atoms(m: EmpiricalMeasure, p) -> np.ndarray:
    if callable(p):
        vals = np.asarray(p(m.x), dtype=float).reshape(m.n_atoms)
    else:
        vals = np.broadcast_to(np.asarray(p, dtype=float), (m.n_atoms,)).copy()
    alive = m.i == 1
    if np.any(~np.isfinite(vals[alive])) or np.any((vals[alive] < 0) | (vals[alive] > 1)):
        raise MeasureError("transition density must take values in [0, 1] on alive atoms")
    return vals


def stop_with_density(m: EmpiricalMeasure, p) -> EmpiricalMeasure:
    """Stop a fraction ``1 - p(x)`` of the alive mass sitting at each ``x``.

    ``p`` is either an array of per-atom values or a callable of the atom
    positions (shape ``(n, d)``).  Stopped atoms of ``m`` are left untouched and
    zero-weight atoms are dropped from the result.
    """
    pv = _density_on_atoms(m, p)
    alive = m.i == 1
    w_alive = m.w[alive] * pv[alive]
    w_split = m.w[alive] * (1.0 - pv[alive])
    x = np.concatenate([m.x[~alive], m.x[alive], m.x[alive]])
    i = np.concatenate([m.i[~alive], np.ones(alive.sum(), np.int8), np.zeros(alive.sum(), np.int8)])
    w = np.concatenate([m.w[~alive], w_alive, w_split])
    keep = w > 0
    return EmpiricalMeasure(x[keep], i[keep], w[keep])


def _group_by_position(ms: Sequence[EmpiricalMeasure]):
    allx = np.concatenate([m.x for m in ms])
    uniq, inv = np.unique(allx, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    out, start = [], 0
    for m in ms:
        idx = inv[start:start + m.n_atoms]
        start += m.n_atoms
        total = np.bincount(idx, weights=m.w, minlength=len(uniq))
        alive = np.bincount(idx, weights=m.w * m.i, minlength=len(uniq))
        out.append((idx, total, alive))
    return uniq, out


def recover_density(m_prime: EmpiricalMeasure, m: EmpiricalMeasure, tol: float = 1e-12):
    """Per-atom density ``p`` on ``m`` with ``m_prime = stop_with_density(m, p)``, or None.

    Positions are matched exactly.  The returned array is indexed by the atoms
    of ``m``; atoms that carry no alive mass get ``p = 1``.
    """
    if m_prime.dim != m.dim:
        return None
    _, ((_, tot_p, alive_p), (idx, tot, alive)) = _group_by_position([m_prime, m])
    if np.any(np.abs(tot_p - tot) > tol):
        return None
    if np.any(alive_p > alive + tol):
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        p_pos = np.where(alive > tol, alive_p / np.where(alive > tol, alive, 1.0), 1.0)
    if np.any(np.abs(p_pos * alive - alive_p) > tol):
        return None
    return np.clip(p_pos[idx], 0.0, 1.0)


def is_preceq(m_prime: EmpiricalMeasure, m: EmpiricalMeasure, tol: float = 1e-12) -> bool:
    """True iff ``m_prime`` arises from ``m`` by instantly stopping alive mass."""
    return recover_density(m_prime, m, tol) is not None


# -- transport ----------------------------------------------------------------

def _pot():
    for backend in ("TENSORFLOW", "JAX", "PYTORCH", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    return ot


def _ground_cost(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return sq if p == 2 else np.sqrt(sq) ** p


def transport_cost(
    m: EmpiricalMeasure,
    m_tilde: EmpiricalMeasure,
    p: int = 2,
    *,
    general: bool = False,
    indicator_scale: float = 1.0,
    shortcut: bool = True,
) -> float:
    """Optimal value of ``sum pi_{kl} |y_k - y~_l|^p`` (the p-th power of W_p).

    Equal-size uniform measures are solved as an assignment problem, with a
    sorting shortcut (disable with ``shortcut=False``) when ``d = 1`` and every
    atom lies on one indicator line.  Anything else requires ``general=True``
    and goes through the network simplex solver of POT.
    """
    if m.batch_shape or m_tilde.batch_shape:
        raise TransportUsageError("transport is defined for unbatched measures")
    if m.dim != m_tilde.dim:
        raise TransportUsageError("measures live in different dimensions")
    same_size = m.n_atoms == m_tilde.n_atoms and m.is_uniform() and m_tilde.is_uniform()
    if same_size:
        ind = np.concatenate([m.i, m_tilde.i])
        if shortcut and m.dim == 1 and np.all(ind == ind[0]):
            a, b = np.sort(m.x[:, 0]), np.sort(m_tilde.x[:, 0])
            return float(np.mean(np.abs(a - b) ** p))
        cost = _ground_cost(m.points(indicator_scale), m_tilde.points(indicator_scale), p)
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / m.n_atoms)
    if not general:
        raise TransportUsageError(
            "assignment path needs two uniform measures with equal atom counts; pass general=True"
        )
    pa, a = _merged(m.points(indicator_scale), m.w)
    pb, b = _merged(m_tilde.points(indicator_scale), m_tilde.w)
    cost = _ground_cost(pa, pb, p)
    ot = _pot()
    return float(max(ot.emd2(a / a.sum(), b / b.sum(), cost, numItermax=10_000_000), 0.0))


def _merged(points: np.ndarray, w: np.ndarray):
    """Coincident atoms merged (weights summed); the transport value is unchanged."""
    uniq, inv = np.unique(points, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=w, minlength=len(uniq))


def w2(m, m_tilde, *, general: bool = False, indicator_scale: float = 1.0, shortcut: bool = True) -> float:
    return float(np.sqrt(transport_cost(m, m_tilde, 2, general=general, indicator_scale=indicator_scale,
                                         shortcut=shortcut)))


def w1(m, m_tilde, *, general: bool = False, indicator_scale: float = 1.0, shortcut: bool = True) -> float:
    return transport_cost(m, m_tilde, 1, general=general, indicator_scale=indicator_scale, shortcut=shortcut)


def w2_bruteforce(m: EmpiricalMeasure, m_tilde: EmpiricalMeasure, indicator_scale: float = 1.0) -> float:
    """Minimum over all N! permutations; only for tiny uniform measures."""
    n = m.n_atoms
    if n != m_tilde.n_atoms or n > 8:
        raise TransportUsageError("brute force needs equal sizes N <= 8")
    cost = _ground_cost(m.points(indicator_scale), m_tilde.points(indicator_scale), 2)
    best = min(cost[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(np.sqrt(best / n))


# -- pure stopping approximation ---------------------------------------------

@dataclass
class PureApproximation:
    selected: np.ndarray  # indices of alive atoms of m kept alive
    cells: dict  # cell index tuple -> atom indices of m (alive) in that cell
    measure: EmpiricalMeasure
    target: EmpiricalMeasure
    error: float
    mass_mismatch: np.ndarray  # per nonempty cell, selected minus target alive mass
    lipschitz_budget: float

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def bound(self, n: int, indicator_scale: float = 1.0) -> float:
        w_max = float(self.measure.w.max()) if self.measure.n_atoms else 0.0
        return self.lipschitz_budget / n + indicator_scale * w_max * self.n_cells


def pure_approximation(
    m: EmpiricalMeasure, p, n: int, *, indicator_scale: float = 1.0
) -> PureApproximation:
    """Replace the mixed stop ``stop_with_density(m, p)`` by a pure one ``m^A``.

    Alive atoms are binned into axis-aligned cubes of side ``1/(n sqrt(d))``
    anchored at the origin.  Inside each cube, atoms are kept alive greedily in
    decreasing order of ``p`` while that moves the kept mass closer to the
    cube's target ``sum p w``.
    """
    if n < 1:
        raise ValueError("resolution n must be >= 1")
    pv = _density_on_atoms(m, p)
    target = stop_with_density(m, pv)
    alive_idx = np.flatnonzero(m.i == 1)
    side = 1.0 / (n * np.sqrt(m.dim))
    keys = np.floor(m.x[alive_idx] / side).astype(np.int64)
    cells: dict = {}
    for a, key in zip(alive_idx, map(tuple, keys)):
        cells.setdefault(key, []).append(a)
    selected, mismatch = [], []
    for key in sorted(cells):
        members = np.array(cells[key])
        cells[key] = members
        goal = float(np.sum(pv[members] * m.w[members]))
        order = members[np.argsort(-pv[members], kind="stable")]
        kept = 0.0
        for a in order:
            if kept + m.w[a] <= goal + 0.5 * m.w[a] + 1e-15:
                selected.append(a)
                kept += m.w[a]
        mismatch.append(kept - goal)
    selected = np.array(sorted(selected), dtype=int)
    ind = m.i.copy()
    ind[alive_idx] = 0
    ind[selected] = 1
    m_a = EmpiricalMeasure(m.x, ind, m.w)
    err = w1(m_a, target, general=True, indicator_scale=indicator_scale)
    budget = 2.0 * (float(m.w[selected].sum()) + float(target.alive_mass()))
    return PureApproximation(selected, cells, m_a, target, err, np.array(mismatch), budget)


# -- measure flows ------------------------------------------------------------

@dataclass
class MeasureFlow:
    times: np.ndarray
    measures: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures):
            raise MeasureError("one measure per grid node is required")
        if np.any(np.diff(self.times) <= 0):
            raise MeasureError("flow time grid must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, k: int) -> EmpiricalMeasure:
        return self.measures[k]


def flow_distance(
    a: MeasureFlow,
    b: MeasureFlow,
    *,
    general: bool = False,
    indicator_scale: float = 1.0,
    metric: Callable | None = None,
) -> float:
    """``max_s W2(a_s, b_s)`` over the shared grid."""
    if len(a) != len(b) or not np.allclose(a.times, b.times, rtol=0, atol=1e-12):
        raise MeasureError("flows are defined on different time grids")
    dist = metric or (lambda u, v: w2(u, v, general=general, indicator_scale=indicator_scale))
    return max(dist(u, v) for u, v in zip(a.measures, b.measures))
