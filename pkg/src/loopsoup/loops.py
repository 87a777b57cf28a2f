"""Based loops, loop classes, the measures on them, exhaustive enumeration and bridge-DP mass tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ResourceError
from .lattice import Box, BoxGrid, as_point, unit_steps

ENUM_MAX_LEN = 12
EXACT_MAX_LEN = 24          # (2d)^n path counts fit in int64 up to here for d=3
TABLE_MAX_CELLS = 2 * 10 ** 9


@dataclass(frozen=True)
class BasedLoop:
    vertices: tuple

    def __post_init__(self):
        v = tuple(as_point(p) for p in self.vertices)
        object.__setattr__(self, "vertices", v)
        if len(v) < 2:
            raise DomainError("a based loop has at least two vertices")
        d = len(v[0])
        for a, b in zip(v, v[1:] + v[:1]):
            if len(b) != d or sum(abs(x - y) for x, y in zip(a, b)) != 1:
                raise DomainError(f"{a} and {b} are not nearest neighbours")

    def __len__(self):
        return len(self.vertices)

    @property
    def d(self) -> int:
        return len(self.vertices[0])

    def rotate(self, k: int) -> "BasedLoop":
        v = self.vertices
        return BasedLoop(v[k:] + v[:k])


@dataclass(frozen=True)
class Loop:
    canonical: BasedLoop

    @property
    def length(self) -> int:
        return len(self.canonical)

    def rotations(self) -> set:
        v = self.canonical.vertices
        return {v[k:] + v[:k] for k in range(len(v))}

    def visits(self, x) -> int:
        x = as_point(x)
        return sum(1 for p in self.canonical.vertices if p == x)


def _min_rotation(v: tuple) -> tuple:
    return min(v[k:] + v[:k] for k in range(len(v)))


def based_loop_mass(loop: BasedLoop, d: int | None = None) -> Fraction:
    d = d or loop.d
    n = len(loop)
    return Fraction(1, n * (2 * d) ** n)


def canonicalize(loop) -> Loop:
    if isinstance(loop, Loop):
        return loop
    if not isinstance(loop, BasedLoop):
        loop = BasedLoop(loop)
    return Loop(BasedLoop(_min_rotation(loop.vertices)))


def loop_mass(loop: Loop, d: int | None = None) -> Fraction:
    """Sum of the based-loop mass over the distinct rotations of the class."""
    d = d or loop.canonical.d
    n = loop.length
    return len(loop.rotations()) * Fraction(1, n * (2 * d) ** n)


def closed_walks(x, n: int, d: int) -> np.ndarray:
    """All nearest-neighbour walks (x_0=x, ..., x_{n-1}) with x_n = x, shape (count, n, d)."""
    x = np.asarray(as_point(x, d))
    steps = unit_steps(d)
    walks = x[None, None, :]
    for t in range(1, n):
        nxt = walks[:, -1, None, :] + steps[None, :, :]
        nxt = nxt.reshape(-1, d)
        rep = np.repeat(walks, len(steps), axis=0)
        keep = np.abs(nxt - x).sum(axis=1) <= n - t
        walks = np.concatenate([rep[keep], nxt[keep][:, None, :]], axis=1)
    last = np.abs(walks[:, -1, :] - x).sum(axis=1) == 1
    return walks[last]


def enumerate_loops_through(x, max_len: int, d: int = 3) -> list:
    """Every loop class of length <= max_len visiting x, with its exact mass, sorted canonically."""
    if max_len > ENUM_MAX_LEN or d > 3:
        raise ResourceError(f"exhaustive enumeration limited to length {ENUM_MAX_LEN} and d <= 3")
    x = as_point(x, d)
    found = set()
    for n in range(2, max_len + 1, 2):
        for w in closed_walks(x, n, d):
            found.add(_min_rotation(tuple(map(tuple, w.tolist()))))
    loops = [Loop(BasedLoop(v)) for v in sorted(found, key=lambda v: (len(v), v))]
    return [(l, loop_mass(l, d)) for l in loops]


def _compositions(m: int, d: int):
    if d == 1:
        yield (m,)
        return
    for k in range(m + 1):
        for rest in _compositions(m - k, d - 1):
            yield (k,) + rest


def return_counts(n_max: int, d: int) -> list:
    """Exact number of closed walks of length n from the origin, n = 0..n_max.

    A closed walk of length 2m has k_i steps +e_i and k_i steps -e_i with
    sum k_i = m, giving (2m)! / prod (k_i!)^2 walks per composition.
    """
    fact = [1]
    for i in range(1, n_max + 1):
        fact.append(fact[-1] * i)
    out = []
    for n in range(n_max + 1):
        if n % 2:
            out.append(0)
            continue
        tot = 0
        for ks in _compositions(n // 2, d):
            den = 1
            for k in ks:
                den *= fact[k] ** 2
            tot += fact[n] // den
        out.append(tot)
    return out


def _adjacency(grid: BoxGrid, blocked: np.ndarray | None, exact: bool):
    nbr = grid.neighbors
    rows = np.repeat(np.arange(grid.size), nbr.shape[1])
    cols = nbr.ravel()
    ok = cols >= 0
    if blocked is not None:
        ok &= ~blocked[rows] & ~blocked[np.where(cols >= 0, cols, 0)]
    data = np.ones(ok.sum(), dtype=np.int64) if exact else np.full(ok.sum(), 1.0 / (2 * grid.d))
    return sp.csr_matrix((data, (rows[ok], cols[ok])), shape=(grid.size, grid.size))


@dataclass
class MassTable:
    """Per-root return weights P_x[X_n = x] split by whether the bridge visits the window.

    In exact mode ``total`` and ``avoid`` hold path counts (divide by (2d)^n);
    otherwise they hold probabilities.
    """

    window: Box
    max_len: int
    d: int
    grid: BoxGrid
    roots: np.ndarray
    total: np.ndarray
    avoid: np.ndarray
    exact: bool
    carrier: Box | None
    window_mask: np.ndarray

    def _row(self, x) -> int:
        i = int(self.grid.index(as_point(x, self.d))[0])
        if i < 0:
            raise DomainError(f"root {as_point(x)} not covered by the table")
        return i

    def return_prob(self, x, n: int):
        i = self._row(x)
        if n > self.max_len:
            raise DomainError("length beyond table")
        if self.exact:
            return Fraction(int(self.total[i, n]), (2 * self.d) ** n)
        return float(self.total[i, n])

    def mass(self, x, n: int):
        if n == 0:
            return 0
        return self.return_prob(x, n) / n

    def visit_mass(self, x, n: int):
        i = self._row(x)
        if n == 0:
            return 0
        v = self.total[i, n] - self.avoid[i, n]
        if self.exact:
            return Fraction(int(v), n * (2 * self.d) ** n)
        return float(v) / n

    def visit_weights(self) -> np.ndarray:
        """Float array (sites, max_len+1) of visit masses (1/n)(P - P_avoid)."""
        v = (self.total - self.avoid).astype(float)
        n = np.arange(self.max_len + 1, dtype=float)
        if self.exact:
            v = v / (2.0 * self.d) ** n
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, v / np.where(n > 0, n, 1), 0.0)
        return w

    def total_visit_mass(self):
        if self.exact:
            s = Fraction(0)
            diff = self.total - self.avoid
            for n in range(2, self.max_len + 1, 2):
                s += Fraction(int(diff[:, n].sum()), n * (2 * self.d) ** n)
            return s
        return float(self.visit_weights().sum())

    def to_csv(self, path):
        from .io import atomic_writer
        coords = self.grid.coords(np.arange(self.grid.size))
        with atomic_writer(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i + 1}" for i in range(self.d)] + ["length", "numerator", "denominator"])
            for i in range(self.grid.size):
                for n in range(2, self.max_len + 1, 2):
                    if self.total[i, n] - self.avoid[i, n] == 0:
                        continue
                    m = self.visit_mass(coords[i], n)
                    if self.exact:
                        w.writerow(list(coords[i]) + [n, m.numerator, m.denominator])
                    else:
                        w.writerow(list(coords[i]) + [n, repr(m), ""])


def region_for(window: Box, n_max: int, carrier: Box | None) -> Box:
    if carrier is None:
        return window.grow(n_max // 2)
    if not np.all(carrier.contains(window.points())):
        raise DomainError("window not inside the carrier")
    return carrier


def forward_tables(grid: BoxGrid, roots: np.ndarray, n_max: int, window_mask: np.ndarray, exact: bool):
    """F[m, z, r] = weight of m-step paths from roots[r] to z, plain and avoiding the window.

    Arrays have an extra zero row (index grid.size) for sites outside the grid.
    """
    dtype = np.int64 if exact else float
    A = _adjacency(grid, None, exact)
    Aa = _adjacency(grid, window_mask, exact)
    k = len(roots)
    F = np.zeros((n_max + 1, grid.size + 1, k), dtype=dtype)
    Fa = np.zeros_like(F)
    F[0, roots, np.arange(k)] = 1
    Fa[0, roots, np.arange(k)] = np.where(window_mask[roots], 0, 1)
    for m in range(1, n_max + 1):
        F[m, :-1] = A @ F[m - 1, :-1]
        Fa[m, :-1] = Aa @ Fa[m - 1, :-1]
    return F, Fa


def mass_table(window: Box, n_max: int, d: int | None = None, carrier: Box | None = None,
               exact: bool | None = None, chunk: int = 512) -> MassTable:
    """Return weights per (root, length) for all roots whose window-visiting bridges have positive mass.

    Without a carrier the table is exact for the free walk: any loop of length
    n <= n_max meeting the window lies in window + B(0, n/2).
    """
    d = d or window.d
    if window.d != d:
        raise DomainError("window dimension mismatch")
    if n_max < 0:
        raise DomainError("negative length cap")
    if exact is None:
        exact = n_max <= EXACT_MAX_LEN and d <= 3
    if exact and (2 * d) ** n_max >= 2 ** 63:
        raise ResourceError("exact path counts overflow; use float mode")
    region = region_for(window, n_max, carrier)
    grid = BoxGrid(region)
    if grid.size * grid.size * 8 > TABLE_MAX_CELLS * 8:
        raise ResourceError("mass table too large")
    wmask = grid.mask(window.points())
    roots = np.arange(grid.size)
    dtype = np.int64 if exact else float
    total = np.zeros((grid.size, n_max + 1), dtype=dtype)
    avoid = np.zeros_like(total)
    A = _adjacency(grid, None, exact)
    Aa = _adjacency(grid, wmask, exact)
    for s in range(0, grid.size, chunk):
        r = roots[s:s + chunk]
        k = len(r)
        f = np.zeros((grid.size, k), dtype=dtype)
        fa = np.zeros_like(f)
        f[r, np.arange(k)] = 1
        fa[r, np.arange(k)] = np.where(wmask[r], 0, 1)
        total[r, 0] = 1
        avoid[r, 0] = fa[r, np.arange(k)]
        for m in range(1, n_max + 1):
            f = A @ f
            fa = Aa @ fa
            total[r, m] = f[r, np.arange(k)]
            avoid[r, m] = fa[r, np.arange(k)]
    return MassTable(window, n_max, d, grid, roots, total, avoid, exact, carrier, wmask)
