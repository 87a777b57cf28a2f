"""Potential theory of the simple random walk killed outside a finite carrier box.

All quantities are exact for the walk killed on leaving the carrier (and on
entering the absorbing set); they approximate the Z^d quantities with a bias of
order R^(2-d) for carrier radius R.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import quad
from scipy.special import ive

from .errors import DomainError, NumericalError
from .lattice import Box, BoxGrid, as_point, as_points, frame_points, linf

SPLU_MAX = 12000      # free sites below which a direct factorisation is used
RTOL = 1e-14
RESIDUAL_MAX = 1e-12
MAXITER = 400
H_FLOOR = 1e-300


def lattice_green_constant(d: int = 3) -> float:
    """g(0,0) on Z^d as the integral of exp(-t) I_0(t/d)^d over t > 0."""
    val, _ = quad(lambda t: ive(0, t / d) ** d, 0, np.inf, limit=400, epsabs=1e-13, epsrel=1e-13)
    return val


class _Solver:
    """Solves (I - P) u = b on the free sites, u = 0 on the Dirichlet sites."""

    def __init__(self, grid: BoxGrid, dirichlet: np.ndarray):
        self.grid = grid
        self.free = np.flatnonzero(~dirichlet)
        if len(self.free) == 0:
            raise DomainError("no free sites in the domain")
        pos = np.full(grid.size + 1, -1, dtype=np.int64)
        pos[self.free] = np.arange(len(self.free))
        nbr = grid.neighbors[self.free]
        cols = pos[nbr]                       # -1 for outside or Dirichlet
        rows = np.repeat(np.arange(len(self.free)), nbr.shape[1]).reshape(nbr.shape)
        ok = cols >= 0
        n = len(self.free)
        adj = sp.csr_matrix((np.full(ok.sum(), 1.0 / (2 * grid.d)), (rows[ok], cols[ok])), shape=(n, n))
        self.matrix = (sp.identity(n, format="csr") - adj).tocsr()
        if n <= SPLU_MAX:
            self._lu = spla.splu(self.matrix.tocsc())
            self._amg = None
        else:
            self._lu = None
            self._amg = pyamg.smoothed_aggregation_solver(self.matrix, symmetry="symmetric")

    def solve_free(self, b: np.ndarray) -> np.ndarray:
        if not np.any(b):
            return np.zeros_like(b)
        if self._lu is not None:
            x = self._lu.solve(b)
        else:
            x = self._amg.solve(b, tol=RTOL, accel="cg", maxiter=MAXITER)
        res = float(np.max(np.abs(b - self.matrix @ x)))
        if res > RESIDUAL_MAX * max(1.0, float(np.max(np.abs(b)))):
            raise NumericalError(f"linear solve did not converge, residual {res:.3e}", residual=res)
        return x

    def solve(self, b_free: np.ndarray) -> np.ndarray:
        """Return the solution on the full grid (zeros on Dirichlet sites)."""
        out = np.zeros(self.grid.size)
        out[self.free] = self.solve_free(b_free)
        return out


class KilledDomain:
    """A carrier box with absorbing outer boundary and an optional absorbing set inside."""

    def __init__(self, carrier: Box, absorbing=()):
        self.carrier = carrier
        self.d = carrier.d
        self.grid = BoxGrid(carrier)
        ab = as_points(absorbing, self.d) if len(absorbing) else np.zeros((0, self.d), dtype=np.int64)
        self.absorbing = ab[carrier.contains(ab)] if len(ab) else ab
        self.killed = self.grid.mask(self.absorbing)
        self._solvers: dict = {}

    @property
    def bias_order(self) -> float:
        """Order of the truncation bias, R^(2-d)."""
        return float(max(self.carrier.radius, 1)) ** (2 - self.d)

    def interior(self) -> np.ndarray:
        return self.grid.coords(np.flatnonzero(~self.killed))

    def solver(self, extra=None) -> _Solver:
        mask = self.killed.copy()
        if extra is not None:
            mask |= extra
        key = np.packbits(mask).tobytes()
        s = self._solvers.get(key)
        if s is None:
            s = _Solver(self.grid, mask)
            self._solvers[key] = s
        return s

    def site(self, x) -> int:
        i = int(self.grid.index(as_point(x, self.d))[0])
        if i < 0 or self.killed[i]:
            raise DomainError(f"{as_point(x)} is absorbed or outside the carrier")
        return i

    def sites(self, A) -> np.ndarray:
        pts = as_points(A, self.d)
        idx = self.grid.index(pts)
        if np.any(idx < 0) or np.any(self.killed[idx]):
            raise DomainError("set is not contained in the interior of the domain")
        return idx

    def shrink(self, radius: int) -> "KilledDomain":
        return KilledDomain(Box(self.carrier.center, radius), self.absorbing)


def _neighbor_sum(grid: BoxGrid, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    ext = np.append(values, 0.0)
    return ext[grid.neighbors[idx]].sum(axis=1)


def green_column(domain: KilledDomain, y) -> np.ndarray:
    """g(., y) over the carrier grid."""
    j = domain.site(y)
    s = domain.solver()
    b = np.zeros(domain.grid.size)
    b[j] = 1.0
    return s.solve(b[s.free])


def _richardson(fine: float, coarse: float, d: int) -> float:
    f = 2.0 ** (d - 2)
    return (f * fine - coarse) / (f - 1.0)


def green(domain: KilledDomain, x, y, extrapolate: bool = False) -> float:
    """Expected visits to y of the walk from x killed on the absorbing set and outside the carrier.

    With ``extrapolate`` the value at carrier radius R is combined with the
    value at radius R//2 to cancel the leading R^(2-d) truncation term.
    """
    i = domain.site(x)
    val = float(green_column(domain, y)[i])
    if not extrapolate:
        return val
    half = domain.shrink(domain.carrier.radius // 2)
    return _richardson(val, green(half, x, y), domain.d)


@dataclass
class GreenTable:
    domain: KilledDomain
    points: np.ndarray
    values: np.ndarray

    def value(self, x, y) -> float:
        rows = {tuple(p): k for k, p in enumerate(self.points.tolist())}
        return float(self.values[rows[as_point(x)], rows[as_point(y)]])


def green_table(domain: KilledDomain, points) -> GreenTable:
    pts = as_points(points, domain.d)
    idx = domain.sites(pts)
    vals = np.empty((len(pts), len(pts)))
    for k, p in enumerate(pts):
        vals[:, k] = green_column(domain, p)[idx]
    return GreenTable(domain, pts, vals)


def hitting_field(domain: KilledDomain, A) -> np.ndarray:
    """h(z) = P_z[H_A before killing] over the grid (1 on A)."""
    g = domain.grid
    a_idx = domain.sites(A)
    amask = np.zeros(g.size, dtype=bool)
    amask[a_idx] = True
    s = domain.solver(amask)
    ind = amask.astype(float)
    b = _neighbor_sum(g, ind, s.free) / (2 * g.d)
    h = s.solve(b)
    h[a_idx] = 1.0
    return h


def hitting_prob(domain: KilledDomain, x, A) -> float:
    i = domain.site(x)
    if len(A) == 0:
        return 0.0
    A = as_points(A, domain.d)
    if np.any(np.all(A == np.asarray(as_point(x, domain.d)), axis=1)):
        return 1.0
    return float(hitting_field(domain, A)[i])


@dataclass
class HittingKernel:
    source: np.ndarray
    target: np.ndarray
    entries: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)


def hitting_kernel(domain: KilledDomain, A, B) -> HittingKernel:
    """Entries P_a[H_B before killing, X_{H_B} = b]."""
    A = as_points(A, domain.d)
    B = as_points(B, domain.d)
    ia, ib = domain.sites(A), domain.sites(B)
    if np.intersect1d(ia, ib).size:
        raise DomainError("source and target sets overlap")
    g = domain.grid
    bmask = np.zeros(g.size, dtype=bool)
    bmask[ib] = True
    s = domain.solver(bmask)
    H = np.empty((len(A), len(B)))
    if len(B) <= len(A):
        for j, b in enumerate(ib):
            ind = np.zeros(g.size)
            ind[b] = 1.0
            H[:, j] = s.solve(_neighbor_sum(g, ind, s.free) / (2 * g.d))[ia]
    else:
        nb = g.neighbors[ib]
        for i, a in enumerate(ia):
            rhs = np.zeros(g.size)
            rhs[a] = 1.0
            ga = np.append(s.solve(rhs[s.free]), 0.0)
            H[i, :] = ga[nb].sum(axis=1) / (2 * g.d)
    return HittingKernel(A, B, H)


@dataclass
class EquilibriumMeasure:
    support: np.ndarray
    weights: np.ndarray
    total: float
    bias_order: float = field(default=0.0)

    def normalized(self) -> np.ndarray:
        return self.weights / self.total


def equilibrium_measure(domain: KilledDomain, A, extrapolate: bool = False) -> EquilibriumMeasure:
    """e_A(x) = P_x[no return to A before killing] on A; total mass is cap(A)."""
    if len(A) == 0:
        raise DomainError("equilibrium measure of the empty set")
    A = as_points(A, domain.d)
    ia = domain.sites(A)
    h = hitting_field(domain, A)
    w = 1.0 - _neighbor_sum(domain.grid, h, ia) / (2 * domain.d)
    w = np.clip(w, 0.0, None)
    if extrapolate:
        coarse = equilibrium_measure(domain.shrink(domain.carrier.radius // 2), A)
        w = np.clip(_richardson(w, coarse.weights, domain.d), 0.0, None)
    return EquilibriumMeasure(A, w, float(w.sum()), domain.bias_order)


def capacity(domain: KilledDomain, A, extrapolate: bool = False) -> float:
    return equilibrium_measure(domain, A, extrapolate).total


def frame_capacity(domain: KilledDomain, R: int) -> float:
    if R < 2:
        raise DomainError("frame needs R >= 2")
    return capacity(domain, frame_points(domain.carrier.center, R))


class BridgeSampler:
    """Exact sampler of the walk conditioned to first enter A at a given target.

    The h-transform h_y(z) = P_z[X_{H_A} = y] is solved once per target; at
    z outside A the walk moves to w with probability h_y(w) / (2d h_y(z)).
    """

    def __init__(self, domain: KilledDomain, A):
        self.domain = domain
        self.grid = domain.grid
        self.A = as_points(A, domain.d)
        self.a_idx = domain.sites(self.A)
        self.amask = np.zeros(self.grid.size, dtype=bool)
        self.amask[self.a_idx] = True
        self.col = {int(a): k for k, a in enumerate(self.a_idx)}
        self._h = None

    @property
    def h(self) -> np.ndarray:
        """Columns h_y for every y in A; extra zero row for sites outside the carrier."""
        if self._h is None:
            g = self.grid
            s = self.domain.solver(self.amask)
            h = np.zeros((g.size + 1, len(self.a_idx)))
            for k, a in enumerate(self.a_idx):
                ind = np.zeros(g.size)
                ind[a] = 1.0
                col = s.solve(_neighbor_sum(g, ind, s.free) / (2 * g.d))
                col[a] = 1.0
                h[:-1, k] = col
            self._h = h
        return self._h

    def sample_sites(self, starts: np.ndarray, targets: np.ndarray, rng: np.random.Generator):
        """Vectorised sampling from grid sites ``starts`` to A-sites ``targets``.

        Returns (flat site sequence, offsets); path m is
        flat[offsets[m]:offsets[m+1]] and includes both endpoints.
        """
        starts = np.asarray(starts, dtype=np.int64)
        cols = np.array([self.col[int(t)] for t in targets], dtype=np.int64)
        h = self.h
        if len(starts) and np.any(h[starts, cols] < H_FLOOR):
            raise DomainError("target unreachable from start")
        if np.any(self.amask[starts] & (starts != np.asarray(targets))):
            raise DomainError("start lies in A")
        nbr = self.grid.neighbors
        ids_hist = [np.arange(len(starts))]
        pos_hist = [starts.copy()]
        cur = starts.copy()
        active = np.flatnonzero(~self.amask[cur])
        while active.size:
            z = cur[active]
            nz = nbr[z]
            w = h[nz, cols[active, None]]
            cw = np.cumsum(w, axis=1)
            u = rng.random(active.size) * cw[:, -1]
            k = np.minimum((cw <= u[:, None]).sum(axis=1), nz.shape[1] - 1)
            cur[active] = nz[np.arange(active.size), k]
            ids_hist.append(active)
            pos_hist.append(cur[active].copy())
            active = active[~self.amask[cur[active]]]
        ids = np.concatenate(ids_hist)
        pos = np.concatenate(pos_hist)
        order = np.argsort(ids, kind="stable")
        counts = np.bincount(ids, minlength=len(starts))
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return pos[order], offsets


def bridge_sample(domain: KilledDomain, x, y, A, rng) -> np.ndarray:
    """Path from x whose first entry into A is its last point, equal to y."""
    A = as_points(A, domain.d)
    xs = domain.site(x)
    ys = domain.site(y)
    bs = BridgeSampler(domain, A)
    if ys not in bs.col:
        raise DomainError("target is not in A")
    if bs.amask[xs]:
        raise DomainError("start lies in A")
    flat, _ = bs.sample_sites(np.array([xs]), np.array([ys]), rng)
    return domain.grid.coords(flat)


def hitting_decay_check(domain: KilledDomain, n: int, xs) -> dict:
    """Compare P_x[H_{B(0,n)}] with (n/|x|)^(d-2) and the entrance law with the normalized e_A."""
    d = domain.d
    A = Box((0,) * d, n).points()
    h = hitting_field(domain, A)
    rows = []
    for x in xs:
        x = as_point(x, d)
        nx = linf(x)
        p = float(h[domain.site(x)])
        ref = (n / nx) ** (d - 2) if nx > 0 else 1.0
        rows.append({"x": list(x), "norm": nx, "prob": p, "ref": ref, "ratio": p / ref})
    outside = [r["ratio"] for r in rows if r["norm"] > n]
    report = {"rows": rows,
              "ratio_band": (max(outside) / min(outside)) if outside else 1.0}
    far = [as_point(r["x"]) for r in rows if r["norm"] > 2 * n]
    if far:
        em = equilibrium_measure(domain, A)
        supp = em.weights > 0
        K = hitting_kernel(domain, far, A[supp])
        ent = K.entries / K.row_sums()[:, None]
        ratio = ent / em.normalized()[supp]
        report["entrance_band"] = (float(ratio.min()), float(ratio.max()))
    return report
