"""Experiments: decoupling defects, local-uniqueness frequencies, vacancy curves and their estimators."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .errors import ConfigurationError, DomainError, ResourceError
from .lattice import Box, BoxGrid, as_point
from .rng import stream
from .soup import SoupBatch, SoupConfig, sample_batch
from .stats import LEVEL, EstimateRecord, merge_estimates

__all__ = ["MonotoneLocalFunction", "DecouplingExperiment", "EstimateRecord", "merge_estimates",
           "decoupling_defect", "decoupling_sweep", "local_uniqueness_stats", "vacancy_curve",
           "UnionFind", "label_components", "workers"]

MAX_SITES = 3 * 10 ** 7


def workers() -> int:
    """Worker count from LOOPSOUP_WORKERS, default 1; results never depend on it."""
    try:
        return max(1, int(os.environ.get("LOOPSOUP_WORKERS", "1")))
    except ValueError:
        raise ConfigurationError("LOOPSOUP_WORKERS must be an integer")


# ---------------------------------------------------------------- connected components

class UnionFind:
    """Disjoint sets over 0..n-1 with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return int(a)

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def union_edges(self, a: np.ndarray, b: np.ndarray):
        for u, v in zip(a.tolist(), b.tolist()):
            self.union(u, v)

    def roots(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


def label_components(mask: np.ndarray, backend: str = "ndimage") -> tuple:
    """Nearest-neighbour components of a boolean array: (labels with 0 off the mask, count)."""
    mask = np.asarray(mask, dtype=bool)
    if backend == "ndimage":
        return ndimage.label(mask)
    if backend != "unionfind":
        raise ConfigurationError(f"unknown backend {backend}")
    idx = np.flatnonzero(mask.ravel())
    pos = np.full(mask.size, -1, dtype=np.int64)
    pos[idx] = np.arange(len(idx))
    uf = UnionFind(len(idx))
    flat = mask.ravel()
    strides = np.array(mask.strides) // mask.itemsize
    coords = np.array(np.unravel_index(idx, mask.shape)).T
    for ax in range(mask.ndim):
        ok = coords[:, ax] + 1 < mask.shape[ax]
        a = idx[ok]
        b = a + strides[ax]
        keep = flat[b]
        uf.union_edges(pos[a[keep]], pos[b[keep]])
    roots = uf.roots()
    _, lab = np.unique(roots, return_inverse=True)
    out = np.zeros(mask.size, dtype=np.int64)
    # number components in order of their first site so that both backends agree
    first = {}
    nxt = 1
    for i, l in enumerate(lab.tolist()):
        if l not in first:
            first[l] = nxt
            nxt += 1
    out[idx] = np.array([first[l] for l in lab.tolist()], dtype=np.int64)
    return out.reshape(mask.shape), nxt - 1


# ---------------------------------------------------------------- local functions

KINDS = {"site_occupied": "increasing", "site_vacant": "decreasing",
         "occupied_fraction_ge": "increasing", "vacant_crossing": "decreasing"}


@dataclass(frozen=True)
class MonotoneLocalFunction:
    """A [0,1]-valued function of the range indicator on the anchor box B(anchor, L)."""

    kind: str
    anchor: tuple
    L: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown local function {self.kind}")
        object.__setattr__(self, "anchor", as_point(self.anchor))
        if self.L < 0:
            raise ConfigurationError("anchor radius must be non-negative")

    @property
    def direction(self) -> str:
        return KINDS[self.kind]

    @property
    def box(self) -> Box:
        return Box(self.anchor, self.L)

    def evaluate(self, occupied: np.ndarray) -> np.ndarray:
        """Values for a stack of occupation indicators shaped (reps,) + (2L+1,)*d on the anchor box."""
        occ = np.asarray(occupied, dtype=bool)
        d = len(self.anchor)
        occ = occ.reshape((-1,) + (2 * self.L + 1,) * d)
        if self.kind == "site_occupied":
            return occ[(slice(None),) + (self.L,) * d].astype(float)
        if self.kind == "site_vacant":
            return (~occ[(slice(None),) + (self.L,) * d]).astype(float)
        if self.kind == "occupied_fraction_ge":
            return (occ.reshape(len(occ), -1).mean(axis=1) >= self.threshold).astype(float)
        out = np.zeros(len(occ))
        for r in range(len(occ)):
            lab, _ = ndimage.label(~occ[r])
            a, b = np.unique(lab[0]), np.unique(lab[-1])
            out[r] = float(bool(np.intersect1d(a[a > 0], b[b > 0]).size))
        return out

    def check_direction(self, rng, trials: int = 200, p: float = 0.3) -> bool:
        """Flip one vacant site to occupied in random configurations and check the declared monotonicity."""
        d = len(self.anchor)
        shape = (trials,) + (2 * self.L + 1,) * d
        occ = rng.random(shape) < p
        flat = occ.reshape(trials, -1).copy()
        up = flat.copy()
        for t in range(trials):
            free = np.flatnonzero(~flat[t])
            if free.size:
                up[t, rng.choice(free)] = True
        f0, f1 = self.evaluate(flat.reshape(shape)), self.evaluate(up.reshape(shape))
        return bool(np.all(f1 >= f0) if self.direction == "increasing" else np.all(f1 <= f0))


# ---------------------------------------------------------------- decoupling

@dataclass(frozen=True)
class DecouplingExperiment:
    alpha: float
    delta: float
    L: int
    s: int
    f1: MonotoneLocalFunction
    f2: MonotoneLocalFunction
    replicates: int = 100000
    seed: int = 0
    n_max: int = 32
    batch: int = 20000

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        dist = int(np.max(np.abs(np.subtract(self.f1.anchor, self.f2.anchor))))
        if dist != self.s * self.L:
            raise ConfigurationError("anchors must be s*L apart")
        if max(self.f1.L, self.f2.L) > self.L:
            raise ConfigurationError("local functions reach beyond L")

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "delta": self.delta, "L": self.L, "s": self.s,
                "f1": {"kind": self.f1.kind, "anchor": list(self.f1.anchor), "L": self.f1.L},
                "f2": {"kind": self.f2.kind, "anchor": list(self.f2.anchor), "L": self.f2.L},
                "replicates": self.replicates, "seed": self.seed, "n_max": self.n_max}


def _bounding_window(boxes) -> Box:
    lo = np.min([np.asarray(b.center) - b.radius for b in boxes], axis=0)
    hi = np.max([np.asarray(b.center) + b.radius for b in boxes], axis=0)
    c = (lo + hi) // 2
    r = int(np.max(np.maximum(hi - c, c - lo)))
    return Box(tuple(int(v) for v in c), r)


def _restrict(lt: np.ndarray, window: Box, box: Box) -> np.ndarray:
    g = BoxGrid(window)
    idx = g.index(box.points())
    return lt[:, idx] > 0


def _paired(a, b, c, level=LEVEL) -> dict:
    """Estimate mean(a) - mean(b) mean(c) with a delta-method normal interval."""
    X = np.stack([a, b, c])
    n = X.shape[1]
    m = X.mean(axis=1)
    cov = np.cov(X) / n if n > 1 else np.zeros((3, 3))
    g = np.array([1.0, -m[2], -m[1]])
    se = float(np.sqrt(max(g @ cov @ g, 0.0)))
    D = float(m[0] - m[1] * m[2])
    z = norm.ppf(0.5 + level / 2)
    return {"lhs": float(m[0]), "f1": float(m[1]), "f2_sprinkled": float(m[2]), "raw": D, "se": se,
            "raw_ci": [D - z * se, D + z * se], "defect": max(0.0, D),
            "defect_ci": [max(0.0, D - z * se), max(0.0, D + z * se)]}


def decoupling_defect(exp: DecouplingExperiment, mode: str = "thin") -> dict:
    """Paired estimates of E[f1 f2] and E[f1] E^{sprinkled}[f2] on common replicates.

    The sprinkled soup is the alpha soup plus an independent delta soup
    (increasing f2) or its thinning to (alpha - delta)_+ (decreasing f2).
    """
    win = _bounding_window([exp.f1.box, exp.f2.box])
    a_l, b_l, c_l = [], [], []
    done = 0
    while done < exp.replicates:
        reps = min(exp.batch, exp.replicates - done)
        k = done // exp.batch
        base = _sample(exp.alpha, win, exp.n_max, reps, stream(exp.seed, exp.s, k, 0), mode)
        if exp.f2.direction == "increasing":
            extra = _sample(exp.delta, win, exp.n_max, reps, stream(exp.seed, exp.s, k, 1), mode)
            spr = base.merged(extra)
        else:
            keep = max(exp.alpha - exp.delta, 0.0) / exp.alpha if exp.alpha > 0 else 0.0
            spr = base.thinned(keep, stream(exp.seed, exp.s, k, 1))
        lt, lts = base.local_times(win), spr.local_times(win)
        f1 = exp.f1.evaluate(_restrict(lt, win, exp.f1.box))
        f2 = exp.f2.evaluate(_restrict(lt, win, exp.f2.box))
        f2s = exp.f2.evaluate(_restrict(lts, win, exp.f2.box))
        a_l.append(f1 * f2)
        b_l.append(f1)
        c_l.append(f2s)
        done += reps
    rep = _paired(np.concatenate(a_l), np.concatenate(b_l), np.concatenate(c_l))
    rep.update(experiment=exp.as_dict(), window={"center": list(win.center), "radius": win.radius},
               note="constants C, c of the decoupling bound are not estimated")
    return rep


def _sample(alpha: float, win: Box, n_max: int, reps: int, rng, mode: str) -> SoupBatch:
    d = win.d
    if alpha == 0:
        return SoupBatch(win, reps, np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros((0, d), np.int64), {})
    return sample_batch(SoupConfig(alpha=alpha, window=win, n_max=n_max), reps, rng, mode=mode)


def decoupling_sweep(alpha: float, delta: float, s_values, L: int = 1, kind: str = "site_occupied",
                     replicates: int = 100000, seed: int = 0, n_max: int = 32, d: int = 3) -> list:
    out = []
    for s in s_values:
        x2 = (s * L,) + (0,) * (d - 1)
        f1 = MonotoneLocalFunction(kind, (0,) * d, 0)
        f2 = MonotoneLocalFunction(kind, x2, 0)
        exp = DecouplingExperiment(alpha, delta, L, s, f1, f2, replicates, seed, n_max)
        out.append(decoupling_defect(exp))
    return out


# ---------------------------------------------------------------- local uniqueness

def _linf_diameters(lab: np.ndarray, count: int) -> np.ndarray:
    """L-infinity diameter of each labelled component (index 0 unused)."""
    diam = np.zeros(count + 1, dtype=np.int64)
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sl is not None:
            diam[i] = max(s.stop - s.start - 1 for s in sl)
    return diam


def lu2_event(vacant: np.ndarray, n: int, backend: str = "ndimage") -> bool:
    """Vacant mask on B(0, 2n): every component of V in B(0, n) of diameter >= n/10 lies in one component of V in B(0, 2n)."""
    vacant = np.asarray(vacant, dtype=bool)
    if any(s != 4 * n + 1 for s in vacant.shape):
        raise DomainError("mask must cover B(0, 2n)")
    inner = vacant[tuple(slice(n, 3 * n + 1) for _ in range(vacant.ndim))]
    lab_in, cnt = label_components(inner, backend)
    if cnt == 0:
        return True
    diam = _linf_diameters(lab_in, cnt)
    big = np.flatnonzero(diam >= n / 10.0)
    big = big[big > 0]
    if len(big) <= 1:
        return True
    lab_out, _ = label_components(vacant, backend)
    core = lab_out[tuple(slice(n, 3 * n + 1) for _ in range(vacant.ndim))]
    outer = set()
    for b in big:
        outer.update(np.unique(core[lab_in == b]).tolist())
    return len(outer) == 1


def lu1_proxy(vacant: np.ndarray, n: int, R: int, backend: str = "ndimage") -> bool:
    """Vacant mask on B(0, R): some vacant site of B(0, n) connects to the inner boundary of B(0, R)."""
    lab, _ = label_components(vacant, backend)
    side = 2 * R + 1
    core = lab[tuple(slice(R - n, R + n + 1) for _ in range(vacant.ndim))]
    inside = set(np.unique(core[core > 0]).tolist())
    shell = np.ones_like(vacant, dtype=bool)
    shell[tuple(slice(1, side - 1) for _ in range(vacant.ndim))] = False
    return bool(inside & set(np.unique(lab[shell & (lab > 0)]).tolist()))


def _lu_replicate(alpha, n, seed, which, n_max, d, radius, r):
    win = Box((0,) * d, radius)
    b = _sample(alpha, win, n_max, 1, stream(seed, r), "thin")
    vac = BoxGrid(win).reshape(b.local_times(win)[0] == 0)
    lu1 = lu2 = None
    if which in ("both", "lu2"):
        off = radius - 2 * n
        sub = vac[tuple(slice(off, off + 4 * n + 1) for _ in range(d))]
        lu2 = float(lu2_event(sub, n))
    if which in ("both", "lu1"):
        lu1 = float(lu1_proxy(vac, n, radius))
    return lu1, lu2


def local_uniqueness_stats(alpha: float, n: int, replicates: int, seed: int = 0, which: str = "both",
                           n_max: int = 64, d: int = 3, proxy_factor: int = 4) -> dict:
    """Frequencies of the local-uniqueness events with 99% Wilson intervals.

    lu2 is evaluated on B(0, 2n); the infinite-cluster event is proxied by a
    connection from B(0, n) to the inner boundary of B(0, proxy_factor*n).
    Replicate r uses the stream (seed, r), so LOOPSOUP_WORKERS only changes speed.
    """
    if which not in ("both", "lu1", "lu2"):
        raise ConfigurationError("which must be both, lu1 or lu2")
    radius = proxy_factor * n if which in ("both", "lu1") else 2 * n
    if (2 * radius + 1) ** d > MAX_SITES:
        raise ResourceError("window too large")
    job = partial(_lu_replicate, alpha, n, seed, which, n_max, d, radius)
    nw = min(workers(), replicates)
    if nw > 1:
        with ProcessPoolExecutor(nw) as ex:
            res = list(ex.map(job, range(replicates), chunksize=max(1, replicates // (4 * nw))))
    else:
        res = [job(r) for r in range(replicates)]
    v1 = [a for a, _ in res if a is not None]
    v2 = [b for _, b in res if b is not None]
    keys = [(seed, r) for r in range(replicates)]
    out = {"alpha": alpha, "n": n, "n_max": n_max, "replicates": replicates, "seed": seed,
           "surrogate": f"infinite cluster proxied by connection to the inner boundary of B(0, {radius})"
           if which != "lu2" else None}
    if v1:
        out["lu1"] = EstimateRecord.from_values("lu1", v1, "bernoulli", keys).as_dict()
    if v2:
        out["lu2"] = EstimateRecord.from_values("lu2", v2, "bernoulli", keys).as_dict()
    return out


def alpha_surrogate(alphas, n: int, target: float, replicates: int, seed: int = 0, n_max: int = 64,
                    d: int = 3) -> dict:
    """Largest grid alpha whose local-uniqueness frequency reaches ``target`` (an empirical stand-in, not a constant)."""
    rows = []
    for a in sorted(alphas):
        r = local_uniqueness_stats(a, n, replicates, seed, "lu2", n_max, d)["lu2"]
        rows.append({"alpha": a, "lu2": r["mean"], "ci_low": r["ci_low"], "ci_high": r["ci_high"]})
    hit = [r["alpha"] for r in rows if r["lu2"] >= target]
    return {"n": n, "target": target, "rows": rows, "alpha_star": max(hit) if hit else None,
            "label": "empirical surrogate on a finite grid"}


# ---------------------------------------------------------------- vacancy curve

def _crossing(vac: np.ndarray) -> bool:
    lab, _ = ndimage.label(vac)
    a, b = np.unique(lab[0]), np.unique(lab[-1])
    return bool(np.intersect1d(a[a > 0], b[b > 0]).size)


def vacancy_curve(alphas, radius: int, n_max: int, replicates: int, seed: int = 0, d: int = 3,
                  batch: int = 2000) -> list:
    """Per alpha: one-point vacancy at 0 with its truncated oracle, largest vacant cluster fraction and crossing frequency.

    Intensities are coupled by superposition of independent increments, so
    every statistic is pointwise monotone along the sorted grid.
    """
    from .loops import mass_table
    alphas = sorted(float(a) for a in alphas)
    if alphas and alphas[0] < 0:
        raise ConfigurationError("negative intensity")
    win = Box((0,) * d, radius)
    grid = BoxGrid(win)
    m = float(mass_table(Box((0,) * d, 0), n_max, exact=False).total_visit_mass())
    zero = int(grid.index((0,) * d)[0])
    rows = {a: {"vac": [], "frac": [], "cross": []} for a in alphas}
    done = 0
    while done < replicates:
        reps = min(batch, replicates - done)
        k = done // batch
        cur = _sample(0.0, win, n_max, reps, None, "thin")
        prev = 0.0
        for i, a in enumerate(alphas):
            if a > prev:
                cur = cur.merged(_sample(a - prev, win, n_max, reps, stream(seed, k, i), "thin"))
                prev = a
            vac = cur.local_times(win) == 0
            rows[a]["vac"].append(vac[:, zero].astype(float))
            fr, cr = np.zeros(reps), np.zeros(reps)
            for r in range(reps):
                v = grid.reshape(vac[r])
                lab, cnt = ndimage.label(v)
                fr[r] = np.bincount(lab.ravel())[1:].max() / grid.size if cnt else 0.0
                cr[r] = float(_crossing(v))
            rows[a]["frac"].append(fr)
            rows[a]["cross"].append(cr)
        done += reps
    out = []
    for a in alphas:
        vac = EstimateRecord.from_values("vacancy", np.concatenate(rows[a]["vac"]), "bernoulli")
        fr = EstimateRecord.from_values("largest_fraction", np.concatenate(rows[a]["frac"]), "mean")
        cr = EstimateRecord.from_values("crossing", np.concatenate(rows[a]["cross"]), "bernoulli")
        out.append({"alpha": a, "vacancy": vac.mean, "vacancy_lo": vac.ci[0], "vacancy_hi": vac.ci[1],
                    "oracle": float(np.exp(-a * m)), "largest_fraction": fr.mean, "crossing": cr.mean,
                    "crossing_lo": cr.ci[0], "crossing_hi": cr.ci[1]})
    return out


def write_vacancy_csv(path, rows):
    from .io import write_csv
    keys = ["alpha", "vacancy", "vacancy_lo", "vacancy_hi", "oracle", "largest_fraction",
            "crossing", "crossing_lo", "crossing_hi"]
    write_csv(path, keys, [[r[k] for k in keys] for r in rows])
