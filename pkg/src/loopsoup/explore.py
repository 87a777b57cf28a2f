"""Exploration of a vacant cluster through G_0 cubes, and the deterministic surgery inside a cube."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .errors import DomainError
from .lattice import Box, BoxGrid, as_point, box_partition_cell, in_frame, unit_steps
from .renorm import classify_box
from .stats import EstimateRecord


# ---------------------------------------------------------------- vacant-set oracles

def field_oracle(window: Box, vacant: np.ndarray):
    """Membership oracle for a vacant mask given on a box; raises outside the box."""
    grid = BoxGrid(window)
    flat = np.asarray(vacant, dtype=bool).reshape(-1)

    def oracle(pts):
        idx = grid.index(pts)
        if np.any(idx < 0):
            raise DomainError("vacant-set oracle queried outside its window")
        return flat[idx]

    return oracle


def set_oracle(points, window: Box | None = None):
    """Oracle for an explicit finite vacant set; with a window, points outside it raise."""
    S = set(map(tuple, np.asarray(points, dtype=np.int64).reshape(len(points), -1).tolist())) if len(points) else set()

    def oracle(pts):
        pts = np.asarray(pts, dtype=np.int64)
        if window is not None and not np.all(window.contains(pts)):
            raise DomainError("vacant-set oracle queried outside its window")
        return np.array([tuple(p) in S for p in pts.tolist()], dtype=bool)

    return oracle


def full_oracle(pts):
    return np.ones(len(np.asarray(pts)), dtype=bool)


# ---------------------------------------------------------------- exploration

@dataclass
class ExplorationState:
    start: tuple
    N: int
    L0: int
    cubes: list                  # x'_0, x'_1, ...
    ys: list                     # y_1, y_2, ...
    sizes: list                  # |A_k|
    cluster_sizes: list
    tau: int
    reason: str                  # "a" (reached the sphere) or "b" (disconnected)
    parents: dict = field(repr=False, default_factory=dict)

    @property
    def radius(self) -> int:
        return self.N // 30

    def records(self) -> list:
        out = [{"start": list(self.start), "N": self.N, "L0": self.L0, "tau": self.tau, "reason": self.reason}]
        for k, c in enumerate(self.cubes):
            out.append({"k": k, "cube": list(c), "y": list(self.ys[k - 1]) if k else None,
                        "size": self.sizes[k], "cluster": self.cluster_sizes[k]})
        return out

    def dump_jsonl(self, path):
        from .io import write_jsonl
        write_jsonl(path, self.records())

    def path_to(self, y) -> np.ndarray:
        """Vacant path from the start to y inside the explored region, from the search tree."""
        y = as_point(y)
        if y not in self.parents:
            raise DomainError(f"{y} is not in the explored cluster")
        out = [y]
        while self.parents[out[-1]] is not None:
            out.append(self.parents[out[-1]])
        return np.array(out[::-1], dtype=np.int64)

    def final_path_diameter(self) -> int:
        if not self.ys:
            return 0
        p = self.path_to(self.ys[-1])
        return int(np.max(p.max(axis=0) - p.min(axis=0)))


def explore_run(vacant, start, N: int, L0: int, check_start: bool = True) -> ExplorationState:
    """Run the exploration from ``start``; ``vacant`` maps an (m, d) array to a boolean array."""
    x = as_point(start)
    d = len(x)
    R = (L0 - 1) // 2
    c0 = box_partition_cell(x, L0)
    if check_start and np.max(np.abs(x)) > L0 * (2 * N // 3):
        raise DomainError("start lies outside B(0, L0 floor(2N/3))")
    M = N // 30
    steps = [tuple(s) for s in unit_steps(d).tolist()]
    inA: dict = {}            # point -> vacant flag, for explored points

    def add_cube(c):
        pts = Box(c, R).points()
        vals = np.asarray(vacant(pts), dtype=bool)
        if vals.shape != (len(pts),):
            raise DomainError("oracle returned a malformed answer")
        for p, v in zip(map(tuple, pts.tolist()), vals.tolist()):
            inA[p] = v

    add_cube(c0)
    cubes, ys = [c0], []
    sizes = [len(inA)]
    parents: dict = {}
    cluster: set = set()
    if inA[x]:
        parents[x] = None
        cluster.add(x)
        grow = deque([x])
    else:
        grow = deque()

    def flood(queue):
        while queue:
            p = queue.popleft()
            for s in steps:
                q = (p[0] + s[0], p[1] + s[1], p[2] + s[2]) if d == 3 else tuple(a + b for a, b in zip(p, s))
                if q not in cluster and inA.get(q, False):
                    cluster.add(q)
                    parents[q] = p
                    queue.append(q)

    def on_boundary(p):
        return any(tuple(a + b for a, b in zip(p, s)) not in inA for s in steps)

    flood(grow)
    csizes = [len(cluster)]
    k = 0
    while True:
        if max(abs(a - b) for a, b in zip(cubes[-1], c0)) // L0 == M:
            reason = "a"
            break
        bnd = sorted(p for p in cluster if on_boundary(p))
        if not bnd:
            reason = "b"
            break
        y = bnd[0]
        cands = set()
        for s in steps:
            z = tuple(a + b for a, b in zip(y, s))
            cz = box_partition_cell(z, L0)
            if z not in inA:
                cands.add(cz)
        cands -= set(cubes)
        nxt = min(cands)
        add_cube(nxt)
        cubes.append(nxt)
        ys.append(y)
        sizes.append(len(inA))
        # new vacant sites next to the cluster may join it, possibly reaching back into old cubes
        seeds = deque(p for p in cluster if any(
            tuple(a + b for a, b in zip(p, s)) in inA and tuple(a + b for a, b in zip(p, s)) not in cluster
            for s in steps))
        flood(seeds)
        csizes.append(len(cluster))
        k += 1
    return ExplorationState(x, N, L0, cubes, ys, sizes, csizes, k, reason, parents)


# ---------------------------------------------------------------- surgery

@dataclass
class SurgeryPlan:
    center: tuple
    R: int
    x: tuple
    y: tuple
    tunnel: np.ndarray
    interior: np.ndarray          # Q-bar
    pairs: list                   # (x_i, y_i)
    paths: list                   # rho_i as (len, d) arrays

    def boundary_visits(self) -> int:
        c = np.asarray(self.center)
        return int(sum((np.max(np.abs(p - c), axis=1) == self.R).sum() for p in self.paths))

    def as_dict(self) -> dict:
        return {"center": list(self.center), "R": self.R, "x": list(self.x), "y": list(self.y),
                "tunnel": self.tunnel.tolist(), "pairs": [[list(a), list(b)] for a, b in self.pairs],
                "paths": [p.tolist() for p in self.paths], "boundary_visits": self.boundary_visits()}


def _face_axis(off: np.ndarray, R: int):
    """The unique coordinate at +-R of a face point that is not on the frame."""
    ext = np.flatnonzero(np.abs(off) == R)
    if len(ext) != 1 or np.any(np.abs(np.delete(off, ext)) > R - 3):
        return None
    return int(ext[0])


def surgery_tunnel(center, x, R: int) -> tuple:
    """The tunnel Pi from x to the frame and Q-bar = Q minus (inner boundary, frame, Pi)."""
    c = np.asarray(as_point(center))
    x = np.asarray(as_point(x, len(c)))
    d = len(c)
    if R < 4:
        raise DomainError("surgery needs R >= 4")
    off = x - c
    if np.max(np.abs(off)) != R:
        raise DomainError("x is not on the inner boundary of the cube")
    if in_frame(off[None], R)[0]:
        raise DomainError("x lies on the frame")
    i = _face_axis(off, R)
    if i is None:
        raise DomainError("x is not a face point")
    j = 0 if i != 0 else 1
    sgn = 1 if off[i] == -R else -1
    ei = np.zeros(d, dtype=np.int64)
    ei[i] = sgn
    ej = np.zeros(d, dtype=np.int64)
    ej[j] = 1
    base = x + 2 * ei
    pts = [x, x + ei]
    t = 0
    while np.max(np.abs(base + t * ej - c)) <= R:
        pts.append(base + t * ej)
        t += 1
    tunnel = np.array(pts, dtype=np.int64)
    Q = Box(tuple(c), R).points()
    qo = Q - c
    keep = (np.max(np.abs(qo), axis=1) < R) & ~in_frame(qo, R)
    tmask = BoxGrid(Box(tuple(c), R)).mask(tunnel)
    keep &= ~tmask
    return tunnel, Q[keep]


def _interior_graph(center, R: int, interior: np.ndarray):
    grid = BoxGrid(Box(center, R))
    m = grid.mask(interior)
    nbr = grid.neighbors
    rows = np.repeat(np.arange(grid.size), nbr.shape[1])
    cols = nbr.ravel()
    ok = (cols >= 0) & m[rows] & m[np.where(cols >= 0, cols, 0)]
    g = sp.csr_matrix((np.ones(ok.sum(), dtype=np.int8), (rows[ok], cols[ok])), shape=(grid.size, grid.size))
    g.sort_indices()
    return grid, m, g


def tunnel_properties(center, x, R: int) -> dict:
    """The three geometric facts used by the surgery, checked directly."""
    c = np.asarray(as_point(center))
    tunnel, interior = surgery_tunnel(center, x, R)
    hits_frame = bool(in_frame(tunnel - c, R).any())
    grid, m, g = _interior_graph(tuple(c), R, interior)
    sub = g[m][:, m]
    ncomp = connected_components(sub, directed=False)[0] if m.any() else 0
    pts = Box(tuple(c), R).points()
    off = pts - c
    face = (np.max(np.abs(off), axis=1) == R) & ~in_frame(off, R) & np.any(pts != np.asarray(x), axis=1)
    nb = grid.neighbors[grid.index(pts[face])]
    has = np.any(np.where(nb >= 0, m[np.where(nb >= 0, nb, 0)], False), axis=1)
    return {"hits_frame": hits_frame, "interior_connected": ncomp == 1,
            "boundary_neighbor": bool(has.all()), "tunnel": tunnel, "interior_size": int(m.sum())}


def _unique_neighbor_in(p: np.ndarray, mask_fn) -> np.ndarray:
    cands = [p + s for s in unit_steps(len(p)) if mask_fn(p + s)]
    if len(cands) != 1:
        raise DomainError(f"{tuple(p)} has {len(cands)} admissible neighbours, expected one")
    return cands[0]


class _SurgeryContext:
    """Tunnel, Q-bar graph and cached BFS trees for one (cube, y) pair."""

    def __init__(self, center, y, R: int):
        c = np.asarray(as_point(center))
        d = len(c)
        y = np.asarray(as_point(y, d))
        self.Qbox = Qbox = Box(tuple(c), R)
        if Qbox.contains(y)[0] or np.max(np.abs(y - c)) != R + 1 or np.sum(np.abs(y - c) == R + 1) != 1:
            raise DomainError("y is not on the exterior boundary of the cube")
        self.c, self.d, self.R, self.y = c, d, R, y
        self.x = _unique_neighbor_in(y, lambda p: Qbox.contains(p)[0])
        self.tunnel, self.interior = surgery_tunnel(tuple(c), self.x, R)
        self.grid, self.m, self.g = _interior_graph(tuple(c), R, self.interior)
        self._pred: dict = {}

    def inner_ok(self, p) -> bool:
        i = self.grid.index(p)[0]
        return bool(self.m[i]) if i >= 0 else False

    def frame(self, p) -> bool:
        return bool(in_frame((np.asarray(p) - self.c)[None], self.R)[0])

    def ext_frame(self, p) -> bool:
        return (not self.Qbox.contains(p)[0]) and any(
            self.Qbox.contains(p + s)[0] and self.frame(p + s) for s in unit_steps(self.d))

    def pred(self, src: int) -> np.ndarray:
        p = self._pred.get(src)
        if p is None:
            _, p = breadth_first_order(self.g, src, directed=False, return_predecessors=True)
            self._pred[src] = p
        return p

    def path(self, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
        c, R, Qbox = self.c, self.R, self.Qbox
        if np.max(np.abs(xi - c)) != R or self.frame(xi) or np.array_equal(xi, self.x):
            raise DomainError(f"x_i = {tuple(xi)} not admissible")
        if Qbox.contains(yi)[0] or np.sum(np.abs(yi - c) == R + 1) != 1 or np.max(np.abs(yi - c)) != R + 1:
            raise DomainError(f"y_i = {tuple(yi)} not on the exterior boundary")
        if np.array_equal(yi, self.y) or self.ext_frame(yi):
            raise DomainError(f"y_i = {tuple(yi)} not admissible")
        yp = _unique_neighbor_in(yi, lambda p: Qbox.contains(p)[0])
        if np.array_equal(xi, yp):
            return np.array([xi, yi])
        xb = _unique_neighbor_in(xi, self.inner_ok)
        yb = _unique_neighbor_in(yp, self.inner_ok)
        src, dst = int(self.grid.index(xb)[0]), int(self.grid.index(yb)[0])
        pred = self.pred(src)
        route = [dst]
        while route[-1] != src:
            nxt = pred[route[-1]]
            if nxt < 0:
                raise DomainError("Q-bar is disconnected")
            route.append(int(nxt))
        mid = self.grid.coords(np.array(route[::-1]))
        return np.vstack([xi, mid, yp, yi])

    def plan(self, pairs, check_count: bool = True) -> SurgeryPlan:
        if check_count and 2 * len(pairs) > self.R ** (self.d - 1):
            raise DomainError("more than R^(d-1)/2 excursions")
        pairs = [(np.asarray(as_point(a, self.d)), np.asarray(as_point(b, self.d))) for a, b in pairs]
        paths = [self.path(xi, yi) for xi, yi in pairs]
        plan = SurgeryPlan(tuple(int(v) for v in self.c), self.R, tuple(int(v) for v in self.x),
                           tuple(int(v) for v in self.y), self.tunnel, self.interior,
                           [(tuple(a.tolist()), tuple(b.tolist())) for a, b in pairs], paths)
        check_plan(plan)
        return plan


def surgery_paths(center, y, pairs, R: int, check_count: bool = True) -> SurgeryPlan:
    """Prescribed simple bridge paths rho_i = (x_i, BFS route in Q-bar, y_i', y_i) avoiding the tunnel.

    If x_i is itself the neighbour of y_i in the cube the route is (x_i, y_i).
    """
    return _SurgeryContext(center, y, R).plan(pairs, check_count)


def check_plan(plan: SurgeryPlan) -> None:
    """Assert every stated property of a plan; raises AssertionError on failure."""
    c = np.asarray(plan.center)
    R = plan.R
    tset = set(map(tuple, plan.tunnel.tolist()))
    for (xi, yi), p in zip(plan.pairs, plan.paths):
        assert tuple(p[0]) == tuple(xi) and tuple(p[-1]) == tuple(yi), "endpoints"
        assert np.all(np.abs(np.diff(p, axis=0)).sum(axis=1) == 1), "nearest-neighbour steps"
        assert len(set(map(tuple, p.tolist()))) == len(p), "simple"
        assert not (set(map(tuple, p.tolist())) & tset), "avoids the tunnel"
        inside = np.max(np.abs(p - c), axis=1) <= R
        assert inside[:-1].all() and not inside[-1], "enters the exterior only at the end"
        assert not in_frame(p[:-1] - c, R).any(), "avoids the frame"
        nb = int((np.max(np.abs(p - c), axis=1) == R).sum())
        assert nb == (1 if len(p) == 2 else 2), "boundary visits"
    assert plan.boundary_visits() <= 2 * len(plan.pairs), "total boundary visits"


def surgery_exhaustive(R: int, d: int = 3, max_pairs: bool = False) -> dict:
    """Check every admissible configuration of a cube centred at 0.

    Default: every x and every singleton (x_1, y_1).  With ``max_pairs``: for
    every x one plan with floor(R^(d-1)/2) pairs, x_i and y_i walking the face
    list in opposite directions.
    """
    c = (0,) * d
    F = face_points(c, R)
    ys = np.array([outward(p, c, R) for p in F])
    n_plans = n_paths = worst = 0
    tunnel_ok = True
    for k, x in enumerate(F):
        ctx = _SurgeryContext(c, ys[k], R)
        tp = tunnel_properties(c, tuple(x), R)
        tunnel_ok &= tp["hits_frame"] and tp["interior_connected"] and tp["boundary_neighbor"]
        others = [i for i in range(len(F)) if i != k]
        if max_pairs:
            N = R ** (d - 1) // 2
            sel = [(others[i % len(others)], others[-1 - (i % len(others))]) for i in range(N)]
            plan = ctx.plan([(F[a], ys[b]) for a, b in sel])
            n_plans += 1
            n_paths += len(plan.paths)
            worst = max(worst, plan.boundary_visits())
            continue
        for a in others:
            for b in others:
                plan = ctx.plan([(F[a], ys[b])])
                n_plans += 1
                n_paths += 1
                worst = max(worst, plan.boundary_visits())
    return {"R": R, "d": d, "faces": len(F), "plans": n_plans, "paths": n_paths,
            "max_boundary_visits": worst, "bound": R ** (d - 1), "tunnel_ok": bool(tunnel_ok),
            "ok": bool(tunnel_ok and worst <= R ** (d - 1))}


def face_points(center, R: int) -> np.ndarray:
    """Inner-boundary points of the cube that are off the frame."""
    c = np.asarray(as_point(center))
    pts = Box(tuple(c), R).points()
    off = pts - c
    return pts[(np.max(np.abs(off), axis=1) == R) & ~in_frame(off, R)]


def outward(p: np.ndarray, center, R: int) -> np.ndarray:
    off = np.asarray(p) - np.asarray(center)
    i = int(np.flatnonzero(np.abs(off) == R)[0])
    q = np.array(p, dtype=np.int64)
    q[i] += int(np.sign(off[i]))
    return q


def path_prescription_floor(plan: SurgeryPlan, d: int | None = None) -> float:
    """prod_i (2d)^-|rho_i|, a lower bound on the bridges following the prescribed routes."""
    d = d or len(plan.center)
    return float(np.prod([(2.0 * d) ** -(len(p) - 1) for p in plan.paths])) if plan.paths else 1.0


# ---------------------------------------------------------------- connection statistic

def local_connect_statistic(center, y, alpha: float, R: int, replicates: int, seed: int = 0,
                            n_max: int = 40, batch: int = 2000) -> EstimateRecord:
    """Frequency of {y vacant, cube good, y connected to the frame inside {y} u Q} under the soup."""
    from .rng import stream
    from .soup import SoupConfig, sample_batch
    c = as_point(center)
    y = as_point(y, len(c))
    win = Box(c, R + 1)
    grid = BoxGrid(win)
    off = win.points() - np.asarray(c)
    inQ = np.max(np.abs(off), axis=1) <= R
    frame = in_frame(off, R) & inQ
    region = inQ.copy()
    region[grid.index(y)[0]] = True
    yi = int(grid.index(y)[0])
    vals = []
    streams = []
    done = 0
    while done < replicates:
        b = min(batch, replicates - done)
        key = (seed, done // batch)
        rng = stream(*key)
        if alpha > 0:
            cfg = SoupConfig(alpha=alpha, window=win, n_max=n_max, seed=seed)
            lt = sample_batch(cfg, b, rng, mode="thin").local_times(win)
        else:
            lt = np.zeros((b, grid.size), dtype=np.int64)
        for r in range(b):
            field_ = lt[r]
            vac = (field_ == 0) & region
            if not vac[yi] or classify_box(c, (win, field_), R) != "good":
                vals.append(0.0)
                continue
            lab, _ = ndimage.label(grid.reshape(vac))
            lab = lab.reshape(-1)
            vals.append(float(lab[yi] > 0 and np.any(lab[frame] == lab[yi])))
        streams.append(key)
        done += b
    return EstimateRecord.from_values("local_connect", vals, kind="bernoulli", streams=streams)
