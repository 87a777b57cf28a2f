"""Geometry of Z^d: norms, boxes, boundaries, renormalized lattices and a flat box grid."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConfigurationError, DomainError

Point = tuple


def as_point(x, d: int | None = None) -> tuple:
    p = tuple(int(c) for c in np.atleast_1d(x))
    if d is not None and len(p) != d:
        if len(p) == 1 and p[0] == 0:
            return (0,) * d
        raise DomainError(f"point {p} is not in dimension {d}")
    return p


def as_points(A, d: int | None = None) -> np.ndarray:
    """Canonical form of a finite point set: unique rows sorted lexicographically."""
    arr = np.asarray(list(A) if not isinstance(A, np.ndarray) else A, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, d or 0), dtype=np.int64)
    arr = arr.reshape(len(arr), -1)
    if d is not None and arr.shape[1] != d:
        raise DomainError(f"points have dimension {arr.shape[1]}, expected {d}")
    return np.unique(arr, axis=0)


def to_tuples(arr) -> list:
    return [tuple(int(c) for c in row) for row in np.asarray(arr)]


def linf(x) -> int:
    return int(np.max(np.abs(np.asarray(x)), initial=0))


def l1(x) -> int:
    return int(np.sum(np.abs(np.asarray(x))))


def unit_steps(d: int) -> np.ndarray:
    """Rows e_1, -e_1, e_2, -e_2, ..."""
    s = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        s[2 * i, i] = 1
        s[2 * i + 1, i] = -1
    return s


@dataclass(frozen=True)
class Box:
    """The L-infinity ball center + [-radius, radius]^d."""

    center: tuple
    radius: int

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if self.radius < 0:
            raise DomainError("negative box radius")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    def __len__(self) -> int:
        return self.side ** self.d

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts).reshape(-1, self.d)
        return np.all(np.abs(pts - np.asarray(self.center)) <= self.radius, axis=1)

    def points(self) -> np.ndarray:
        r = np.arange(-self.radius, self.radius + 1)
        mesh = np.stack(np.meshgrid(*([r] * self.d), indexing="ij"), axis=-1)
        return mesh.reshape(-1, self.d) + np.asarray(self.center)

    def grow(self, k: int) -> "Box":
        return Box(self.center, self.radius + k)


def ball(center, radius: int, d: int | None = None) -> Box:
    return Box(as_point(center, d), radius)


def sphere(center, radius: int, d: int | None = None) -> np.ndarray:
    """L-infinity sphere: points of B(center, radius) at distance exactly radius."""
    b = ball(center, radius, d)
    p = b.points()
    return p[np.max(np.abs(p - np.asarray(b.center)), axis=1) == radius]


@dataclass(frozen=True)
class RenormLattice:
    level: int
    spacing: int

    def __post_init__(self):
        if self.spacing < 1:
            raise ConfigurationError("lattice spacing must be positive")

    def contains(self, x) -> bool:
        return all(int(c) % self.spacing == 0 for c in np.atleast_1d(x))


def interior_boundary(A) -> np.ndarray:
    pts = as_points(A)
    if len(pts) == 0:
        return pts
    S = set(map(tuple, pts.tolist()))
    steps = unit_steps(pts.shape[1]).tolist()
    keep = [p for p in pts.tolist()
            if any(tuple(a + b for a, b in zip(p, s)) not in S for s in steps)]
    return as_points(keep, pts.shape[1])


def exterior_boundary(A) -> np.ndarray:
    pts = as_points(A)
    if len(pts) == 0:
        return pts
    S = set(map(tuple, pts.tolist()))
    out = set()
    for p in pts.tolist():
        for s in unit_steps(pts.shape[1]).tolist():
            q = tuple(a + b for a, b in zip(p, s))
            if q not in S:
                out.add(q)
    return as_points(sorted(out), pts.shape[1])


def star_neighbors(x, lattice: RenormLattice) -> np.ndarray:
    x = as_point(x)
    if not lattice.contains(x):
        raise DomainError(f"{x} is not on the lattice of spacing {lattice.spacing}")
    d = len(x)
    offs = np.array([o for o in product((-1, 0, 1), repeat=d) if any(o)], dtype=np.int64)
    return offs * lattice.spacing + np.asarray(x)


def box_partition_cell(x, L0: int) -> tuple:
    """Center of the cube Q(x') = B(x', R) of G_0 = L0 Z^d containing x, with L0 = 2R+1."""
    if L0 < 3 or L0 % 2 == 0:
        raise ConfigurationError(f"L0 must be odd and at least 3, got {L0}")
    R = (L0 - 1) // 2
    x = np.asarray(as_point(x))
    return tuple(int(c) for c in L0 * np.floor_divide(x + R, L0))


class BoxGrid:
    """Flat C-order indexing of a box with a nearest-neighbour table.

    Flat order coincides with lexicographic order of the coordinates.  The
    neighbour table uses -1 for neighbours outside the box, so arrays of
    length size+1 whose last entry is zero read 0 there.
    """

    def __init__(self, box: Box):
        self.box = box
        self.d = box.d
        self.side = box.side
        self.size = len(box)
        self.center = np.asarray(box.center, dtype=np.int64)
        self.strides = self.side ** np.arange(self.d - 1, -1, -1, dtype=np.int64)
        self._nbr = None

    def index(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.int64).reshape(-1, self.d)
        off = pts - self.center + self.box.radius
        inside = np.all((off >= 0) & (off < self.side), axis=1)
        idx = off @ self.strides
        return np.where(inside, idx, -1)

    def coords(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        off = (idx[..., None] // self.strides) % self.side
        return off - self.box.radius + self.center

    @property
    def neighbors(self) -> np.ndarray:
        if self._nbr is None:
            c = self.coords(np.arange(self.size))
            steps = unit_steps(self.d)
            self._nbr = np.stack([self.index(c + s) for s in steps], axis=1)
        return self._nbr

    def mask(self, pts) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        idx = self.index(pts)
        m[idx[idx >= 0]] = True
        return m

    def reshape(self, values) -> np.ndarray:
        return np.asarray(values).reshape((self.side,) * self.d)


def frame_band(R: int) -> np.ndarray:
    return np.array(sorted({-R, -R + 1, -R + 2, R - 2, R - 1, R}), dtype=np.int64)


def in_frame(offsets, R: int) -> np.ndarray:
    """Rows (y - x') with at least two coordinates in the near-edge band of Q(x')."""
    off = np.asarray(offsets, dtype=np.int64)
    off = off.reshape(-1, off.shape[-1])
    inside = np.all(np.abs(off) <= R, axis=1)
    hits = np.isin(off, frame_band(R)).sum(axis=1)
    return inside & (hits >= 2)


def frame_points(center, R: int) -> np.ndarray:
    """The frame E(x') of the cube Q(x') = B(x', R)."""
    b = Box(as_point(center), R)
    p = b.points()
    return p[in_frame(p - np.asarray(b.center), R)]
