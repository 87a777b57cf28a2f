"""Sampling the loop soup restricted to loops that meet an observation window.

Two samplers produce the same law on window traces:

* ``sample_direct_batch`` draws Poisson counts per (root, length) class with
  the window-visiting mass of the mass table and samples each based loop as an
  exact window-visiting bridge, using forward path counts as conditional
  weights.  Works on a free region or on a killed carrier.
* ``sample_thin_batch`` (free walk only) draws based loops of every length
  with uniformly placed roots and discards those missing the window; shapes are
  exact uniform closed walks.  Suited to large windows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigurationError, DomainError
from .lattice import Box, BoxGrid, as_point, unit_steps
from .loops import MassTable, _adjacency, _compositions, canonicalize, mass_table
from .potential import lattice_green_constant

FORWARD_BUDGET = 256 * 2 ** 20   # bytes per root chunk of forward tables
THIN_CHUNK = 200_000             # candidate loops generated at once


@dataclass(frozen=True)
class SoupConfig:
    alpha: float
    window: Box
    n_max: int
    seed: int = 0
    carrier: Box | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.n_max < 2:
            raise ConfigurationError("length cap must be at least 2")

    @property
    def d(self) -> int:
        return self.window.d

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "window": {"center": list(self.window.center), "radius": self.window.radius},
                "n_max": self.n_max, "seed": self.seed, "d": self.d,
                "carrier": None if self.carrier is None else
                {"center": list(self.carrier.center), "radius": self.carrier.radius}}


@dataclass
class SoupBatch:
    """Loops of several independent replicates stored as flat arrays."""

    window: Box
    reps: int
    loop_rep: np.ndarray        # replicate of each loop
    offsets: np.ndarray         # loop m has vertices verts[offsets[m]:offsets[m+1]]
    verts: np.ndarray           # (total, d) coordinates
    meta: dict = field(default_factory=dict)

    @property
    def n_loops(self) -> int:
        return len(self.loop_rep)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def vertex_loop(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_loops), self.lengths)

    def local_times(self, window: Box | None = None) -> np.ndarray:
        """Array (reps, |window|) of cumulative visit counts."""
        window = window or self.window
        wg = BoxGrid(window)
        idx = wg.index(self.verts)
        rep = np.repeat(self.loop_rep, self.lengths)
        ok = idx >= 0
        flat = rep[ok] * wg.size + idx[ok]
        return np.bincount(flat, minlength=self.reps * wg.size).reshape(self.reps, wg.size)

    def probe_local_times(self, probes) -> np.ndarray:
        """Array (reps, len(probes)) of visit counts at the given points."""
        probes = np.asarray([as_point(p, self.window.d) for p in probes])
        rep = np.repeat(self.loop_rep, self.lengths)
        out = np.zeros((self.reps, len(probes)), dtype=np.int64)
        for j, p in enumerate(probes):
            hit = np.all(self.verts == p, axis=1)
            out[:, j] = np.bincount(rep[hit], minlength=self.reps)
        return out

    def select(self, keep: np.ndarray) -> "SoupBatch":
        """Sub-batch of the loops flagged in ``keep``."""
        keep = np.asarray(keep, dtype=bool)
        lens = self.lengths[keep]
        vk = np.repeat(keep, self.lengths)
        return SoupBatch(self.window, self.reps, self.loop_rep[keep],
                         np.concatenate([[0], np.cumsum(lens)]), self.verts[vk], dict(self.meta))

    def meets(self, pts) -> np.ndarray:
        """Per-loop flag: the loop visits at least one of ``pts``."""
        pts = np.asarray(pts).reshape(-1, self.window.d)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        g = BoxGrid(Box(tuple((lo + hi) // 2), int(np.max(hi - lo)) // 2 + 1))
        m = g.mask(pts)
        idx = g.index(self.verts)
        hit = np.zeros(len(idx), dtype=bool)
        hit[idx >= 0] = m[idx[idx >= 0]]
        return np.logical_or.reduceat(hit, self.offsets[:-1]) if self.n_loops else np.zeros(0, bool)

    def merged(self, other: "SoupBatch") -> "SoupBatch":
        """Superposition of two batches over the same replicates."""
        if other.reps != self.reps or other.window != self.window:
            raise DomainError("batches do not share replicates and window")
        return SoupBatch(self.window, self.reps, np.concatenate([self.loop_rep, other.loop_rep]),
                         np.concatenate([self.offsets, other.offsets[1:] + self.offsets[-1]]),
                         np.concatenate([self.verts, other.verts]), dict(self.meta))

    def thinned(self, keep_prob: float, rng: np.random.Generator) -> "SoupBatch":
        """Independent Bernoulli thinning, giving the soup at keep_prob times the intensity."""
        return self.select(rng.random(self.n_loops) < keep_prob)

    def sample(self, i: int) -> "SoupSample":
        sel = np.flatnonzero(self.loop_rep == i)
        loops = []
        for m in sel:
            v = self.verts[self.offsets[m]:self.offsets[m + 1]]
            loops.append(canonicalize(tuple(map(tuple, v.tolist()))))
        lt = self.select(self.loop_rep == i)
        lt.loop_rep = np.zeros(len(sel), dtype=np.int64)
        lt.reps = 1
        field_ = lt.local_times()[0]
        return SoupSample(self.window, tuple(loops), BoxGrid(self.window).reshape(field_), dict(self.meta))


@dataclass(frozen=True)
class SoupSample:
    window: Box
    loops: tuple
    local_time: np.ndarray      # shaped (side,)*d over the window
    meta: dict

    def at(self, x) -> int:
        i = int(BoxGrid(self.window).index(as_point(x, self.window.d))[0])
        if i < 0:
            raise DomainError("point outside the window")
        return int(self.local_time.ravel()[i])

    def dump_jsonl(self, path):
        from .io import atomic_writer
        with atomic_writer(path) as fh:
            fh.write(json.dumps({"header": self.meta}, sort_keys=True) + "\n")
            for l in self.loops:
                fh.write(json.dumps({"len": l.length, "verts": [list(p) for p in l.canonical.vertices]}) + "\n")


def local_time_field(sample: SoupSample) -> np.ndarray:
    return sample.local_time


def vacant_set(sample: SoupSample) -> np.ndarray:
    pts = sample.window.points()
    return pts[sample.local_time.ravel() == 0]


def range_set(sample: SoupSample) -> np.ndarray:
    pts = sample.window.points()
    return pts[sample.local_time.ravel() > 0]


# ---------------------------------------------------------------- tail bounds

def return_probs(n_max: int, d: int) -> np.ndarray:
    """P_0[X_n = 0] for the free walk, n = 0..n_max, via the multinomial formula."""
    out = np.zeros(n_max + 1)
    out[0] = 1.0
    for n in range(2, n_max + 1, 2):
        ks = _compositions_array(n // 2, d)
        lw = gammaln(n + 1) - 2 * gammaln(ks + 1).sum(axis=1) - n * np.log(2 * d)
        out[n] = np.exp(logsumexp(lw))
    return out


@lru_cache(maxsize=None)
def _compositions_array(m: int, d: int) -> np.ndarray:
    return np.array(list(_compositions(m, d)), dtype=np.int64).reshape(-1, d)


def tail_mass_bound(cfg: SoupConfig) -> float:
    """Upper bound on alpha times the mass of loops meeting the window with length > n_max.

    A loop meeting the window has a rotation rooted in it, so the mass is at
    most sum_{x in W} sum_{n > N} P_x[X_n = x]; on a carrier the trace of the
    killed n-step kernel gives a geometric majorant in its spectral radius.
    """
    if cfg.alpha == 0:
        return 0.0
    d = cfg.d
    p = return_probs(cfg.n_max, d)
    free = len(cfg.window) * max(lattice_green_constant(d) - p.sum(), 0.0)
    bound = free
    if cfg.carrier is not None:
        lam = np.cos(np.pi / (2 * cfg.carrier.radius + 2))
        N = cfg.n_max
        bound = min(bound, len(cfg.carrier) * lam ** (N + 1) / ((N + 1) * (1 - lam)))
    return cfg.alpha * bound


def domination_check(alpha: float, n_max: int, reps: int, rng, d: int = 3) -> dict:
    """One-point check of P[0 in V] <= exp(-alpha/2d), the mass of the 2d loops of length 2 at 0."""
    from .stats import EstimateRecord
    if n_max < 2:
        raise ConfigurationError("length-2 loops must be included")
    cfg = SoupConfig(alpha=alpha, window=Box((0,) * d, 0), n_max=n_max)
    vac = sample_batch(cfg, reps, rng).local_times()[:, 0] == 0
    est = EstimateRecord.from_values("vacancy", vac, "bernoulli")
    bound = float(np.exp(-alpha / (2 * d)))
    lo, hi = est.ci
    return {"alpha": alpha, "n_max": n_max, "vacancy": est.mean, "ci": [lo, hi], "bound": bound, "ok": lo <= bound}


# ---------------------------------------------------------------- direct sampler

def _group_by_replicate(loop_rep, lens):
    """Stable order of loops by replicate and the matching vertex gather index."""
    order = np.argsort(loop_rep, kind="stable")
    starts = np.concatenate([[0], np.cumsum(lens)])
    new_lens = lens[order]
    offsets = np.concatenate([[0], np.cumsum(new_lens)])
    within = np.arange(offsets[-1]) - np.repeat(offsets[:-1], new_lens)
    vidx = np.repeat(starts[:-1][order], new_lens) + within
    return order, offsets, vidx


def _poisson_classes(rng, reps: int, lam: np.ndarray):
    """Total counts per class over all replicates, then uniform replicate labels."""
    counts = rng.poisson(reps * lam)
    cls = np.repeat(np.arange(lam.size), counts.ravel())
    labels = rng.integers(0, reps, size=cls.size) if cls.size else np.zeros(0, dtype=np.int64)
    return cls, labels


def sample_direct_batch(cfg: SoupConfig, table: MassTable, reps: int, rng: np.random.Generator) -> SoupBatch:
    if table.window != cfg.window or table.max_len < cfg.n_max or table.carrier != cfg.carrier:
        raise DomainError("mass table does not cover the configuration")
    d = cfg.d
    grid = table.grid
    meta = {"config": cfg.as_dict(), "sampler": "direct", "tail_bound": tail_mass_bound(cfg)}
    empty = SoupBatch(cfg.window, reps, np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros((0, d), np.int64), meta)
    if cfg.alpha == 0:
        return empty
    w = table.visit_weights()[:, :cfg.n_max + 1]
    cls, labels = _poisson_classes(rng, reps, cfg.alpha * w)
    if cls.size == 0:
        return empty
    roots, lens = np.divmod(cls, cfg.n_max + 1)
    A = _adjacency(grid, None, table.exact)
    Aa = _adjacency(grid, table.window_mask, table.exact)
    wmask = np.append(table.window_mask, False)
    nbr = grid.neighbors
    uroots = np.unique(roots)
    reps_out, paths = [], []
    per_root = max(1, FORWARD_BUDGET // (16 * (cfg.n_max + 1) * (grid.size + 1)))
    for s in range(0, len(uroots), per_root):
        chunk = uroots[s:s + per_root]
        sel = np.flatnonzero(np.isin(roots, chunk))
        col = np.searchsorted(chunk, roots[sel])
        n = lens[sel]
        nmax = int(n.max())
        F = np.zeros((nmax + 1, grid.size + 1, len(chunk)))
        Fa = np.zeros_like(F)
        F[0, chunk, np.arange(len(chunk))] = 1.0
        Fa[0, chunk, np.arange(len(chunk))] = np.where(table.window_mask[chunk], 0.0, 1.0)
        # rescaling each step keeps long tables in range; ratios are unchanged
        for m in range(1, nmax + 1):
            F[m, :-1] = A @ F[m - 1, :-1]
            Fa[m, :-1] = Aa @ Fa[m - 1, :-1]
            if table.exact:
                F[m] /= 2 * d
                Fa[m] /= 2 * d
        path = np.zeros((len(sel), nmax), dtype=np.int64)
        cur = chunk[col].copy()
        path[:, 0] = cur
        visited = table.window_mask[cur].copy()
        for t in range(nmax - 1):
            act = np.flatnonzero(t < n - 1)
            if act.size == 0:
                break
            rem = n[act] - t - 1
            nz = nbr[cur[act]]
            c = col[act, None]
            tot = F[rem[:, None], nz, c]
            avo = Fa[rem[:, None], nz, c]
            need = ~(visited[act, None] | wmask[nz])
            wts = np.where(need, np.maximum(tot - avo, 0.0), tot)
            cw = np.cumsum(wts, axis=1)
            u = rng.random(act.size) * cw[:, -1]
            k = np.minimum((cw <= u[:, None]).sum(axis=1), nz.shape[1] - 1)
            cur[act] = nz[np.arange(act.size), k]
            visited[act] |= table.window_mask[cur[act]]
            path[act, t + 1] = cur[act]
        valid = np.arange(nmax)[None, :] < n[:, None]
        paths.append(path[valid])
        reps_out.append((labels[sel], n))
    loop_rep = np.concatenate([r for r, _ in reps_out])
    n_all = np.concatenate([n for _, n in reps_out])
    verts = grid.coords(np.concatenate(paths))
    order, offsets, vidx = _group_by_replicate(loop_rep, n_all)
    return SoupBatch(cfg.window, reps, loop_rep[order], offsets, verts[vidx], meta)


def sample_direct(cfg: SoupConfig, table: MassTable | None = None, rng=None) -> SoupSample:
    """One replicate of the soup restricted to loops of length <= n_max meeting the window."""
    from .rng import stream
    table = table if table is not None else mass_table(cfg.window, cfg.n_max, carrier=cfg.carrier)
    rng = rng if rng is not None else stream(cfg.seed, 0)
    return sample_direct_batch(cfg, table, 1, rng).sample(0)


# ---------------------------------------------------------------- thinning sampler

@lru_cache(maxsize=None)
def _composition_law(n: int, d: int):
    ks = _compositions_array(n // 2, d)
    lw = -2 * gammaln(ks + 1).sum(axis=1)
    p = np.exp(lw - logsumexp(lw))
    return ks, np.cumsum(p)


def closed_walk_steps(n: int, d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m uniform closed walks of length n as step codes (index into unit_steps)."""
    ks, cdf = _composition_law(n, d)
    pick = np.minimum(np.searchsorted(cdf, rng.random(m) * cdf[-1], side="right"), len(ks) - 1)
    k = ks[pick]
    cum = np.cumsum(np.repeat(k, 2, axis=1), axis=1)
    pos = np.arange(n)
    codes = (pos[None, None, :] >= cum[:, :, None]).sum(axis=1)
    perm = np.argsort(rng.random((m, n)), axis=1)
    return np.take_along_axis(codes, perm, axis=1)


def sample_thin_batch(cfg: SoupConfig, reps: int, rng: np.random.Generator) -> SoupBatch:
    if cfg.carrier is not None:
        raise ConfigurationError("the thinning sampler is translation invariant; use the direct sampler on a carrier")
    d = cfg.d
    W = cfg.window
    c = np.asarray(W.center)
    steps = unit_steps(d)
    p = return_probs(cfg.n_max, d)
    meta = {"config": cfg.as_dict(), "sampler": "thin", "tail_bound": tail_mass_bound(cfg)}
    reps_l, lens_l, verts_l = [], [], []
    if cfg.alpha > 0:
        for n in range(2, cfg.n_max + 1, 2):
            K = W.grow(n // 2)
            lam = cfg.alpha * p[n] / n * len(K)
            total = rng.poisson(reps * lam)
            while total > 0:
                m = min(total, max(1, THIN_CHUNK * 8 // n))
                total -= m
                lab = rng.integers(0, reps, size=m)
                root = c + rng.integers(-K.radius, K.radius + 1, size=(m, d))
                codes = closed_walk_steps(n, d, m, rng)
                disp = np.cumsum(steps[codes], axis=1)
                v = np.concatenate([np.zeros((m, 1, d), np.int64), disp[:, :-1]], axis=1) + root[:, None, :]
                hit = np.all(np.abs(v - c) <= W.radius, axis=2).any(axis=1)
                if hit.any():
                    reps_l.append(lab[hit])
                    lens_l.append(np.full(hit.sum(), n))
                    verts_l.append(v[hit].reshape(-1, d))
    if not reps_l:
        return SoupBatch(W, reps, np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros((0, d), np.int64), meta)
    loop_rep = np.concatenate(reps_l)
    n_all = np.concatenate(lens_l)
    verts = np.concatenate(verts_l)
    order, offsets, vidx = _group_by_replicate(loop_rep, n_all)
    return SoupBatch(W, reps, loop_rep[order], offsets, verts[vidx], meta)


def sample_batch(cfg: SoupConfig, reps: int, rng: np.random.Generator, mode: str = "auto",
                 table: MassTable | None = None) -> SoupBatch:
    """Dispatch between the conditioned and the thinning sampler."""
    if mode == "auto":
        mode = "condition" if (cfg.carrier is not None or len(cfg.window.grow(cfg.n_max // 2)) <= 30000) else "thin"
    if mode == "condition":
        table = table if table is not None else mass_table(cfg.window, cfg.n_max, carrier=cfg.carrier)
        return sample_direct_batch(cfg, table, reps, rng)
    if mode == "thin":
        return sample_thin_batch(cfg, reps, rng)
    raise ConfigurationError(f"unknown sampler mode {mode}")
