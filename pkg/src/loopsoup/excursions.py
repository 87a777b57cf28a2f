"""Excursions of loops between two disjoint sets, the endpoint Poisson process and the excursion-based sampler."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, DomainError
from .lattice import as_points
from .loops import BasedLoop, Loop, canonicalize, loop_mass
from .potential import BridgeSampler, KilledDomain, hitting_field, hitting_kernel
from .soup import SoupBatch, _group_by_replicate

SPECTRAL_MAX = 1 - 1e-6
LEVEL_TOL = 1e-12


def _pset(S) -> set:
    return set(map(tuple, as_points(S).tolist())) if len(S) else set()


def _check_disjoint(A: set, B: set):
    if A & B:
        raise DomainError("A and B must be disjoint")


def _admissible(v: tuple, A: set, B: set) -> bool:
    if v[0] not in A:
        return False
    for p in reversed(v):
        if p in B:
            return True
        if p in A:
            return False
    return False


def representatives_LAB(loop, A, B) -> list:
    """Distinct rotations (x_1..x_n) of the class with x_1 in A whose last visit to A or B is in B."""
    Aset, Bset = _pset(A), _pset(B)
    _check_disjoint(Aset, Bset)
    loop = canonicalize(loop)
    v = loop.canonical.vertices
    seen, out = set(), []
    for k in range(len(v)):
        r = v[k:] + v[:k]
        if r not in seen and _admissible(r, Aset, Bset):
            seen.add(r)
            out.append(BasedLoop(r))
    return out


@dataclass(frozen=True)
class ExcursionDecomposition:
    k: int
    phi: tuple       # 1-based entrance times into A
    psi: tuple       # 1-based entrance times into B
    Phi: tuple
    Psi: tuple
    inner: tuple     # paths A -> B
    outer: tuple     # paths B -> A, the last one wraps to x_1

    def reconstruct(self) -> tuple:
        out = []
        for a, b in zip(self.inner, self.outer):
            out.extend(a[:-1])
            out.extend(b[:-1])
        return tuple(out)


def decompose(bl, A, B) -> ExcursionDecomposition:
    Aset, Bset = _pset(A), _pset(B)
    _check_disjoint(Aset, Bset)
    if not isinstance(bl, BasedLoop):
        bl = BasedLoop(bl)
    v = bl.vertices
    if not _admissible(v, Aset, Bset):
        raise DomainError("based loop is not an admissible representative")
    n = len(v)
    phi, psi = [1], []
    j = 1
    while True:
        nb = next((t for t in range(j + 1, n + 1) if v[t - 1] in Bset), None)
        if nb is None:
            break
        psi.append(nb)
        na = next((t for t in range(nb + 1, n + 1) if v[t - 1] in Aset), None)
        if na is None:
            break
        phi.append(na)
        j = na
    k = len(phi)
    inner = tuple(v[phi[i] - 1:psi[i]] for i in range(k))
    outer = tuple(v[psi[i] - 1:phi[i + 1]] for i in range(k - 1)) + (v[psi[-1] - 1:] + (v[0],),)
    return ExcursionDecomposition(k, tuple(phi), tuple(psi), tuple(v[t - 1] for t in phi),
                                  tuple(v[t - 1] for t in psi), inner, outer)


def excursion_count(loop, A, B) -> int:
    """Number of A -> B crossings around the cycle; any rotation of the loop may be passed."""
    Aset, Bset = _pset(A), _pset(B)
    _check_disjoint(Aset, Bset)
    v = loop.canonical.vertices if isinstance(loop, Loop) else (loop.vertices if isinstance(loop, BasedLoop) else loop)
    lab = [1 if tuple(p) in Aset else 2 for p in v if tuple(p) in Aset or tuple(p) in Bset]
    return sum(1 for i in range(len(lab)) if lab[i - 1] == 1 and lab[i] == 2)


def batch_excursion_counts(batch: SoupBatch, A, B) -> np.ndarray:
    """excursion_count for every loop of a batch."""
    d = batch.verts.shape[1] if batch.verts.ndim == 2 else 1
    if batch.n_loops == 0:
        return np.zeros(0, dtype=np.int64)
    A, B = as_points(A, d), as_points(B, d)
    lo = np.minimum(batch.verts.min(axis=0), np.minimum(A.min(axis=0), B.min(axis=0)))
    hi = np.maximum(batch.verts.max(axis=0), np.maximum(A.max(axis=0), B.max(axis=0)))
    shape = tuple((hi - lo + 1).tolist())
    lab = np.zeros(shape, dtype=np.int8)
    lab[tuple((A - lo).T)] = 1
    if lab[tuple((B - lo).T)].any():
        raise DomainError("A and B must be disjoint")
    lab[tuple((B - lo).T)] = 2
    vl = lab[tuple((batch.verts - lo).T)]
    owner = batch.vertex_loop()
    keep = vl > 0
    vl, owner = vl[keep], owner[keep]
    if len(vl) == 0:
        return np.zeros(batch.n_loops, dtype=np.int64)
    first = np.r_[True, owner[1:] != owner[:-1]]
    starts = np.flatnonzero(first)
    # cyclic predecessor: previous labelled vertex of the same loop, or its last one
    ends = np.r_[starts[1:], len(vl)] - 1
    prev = np.r_[0, vl[:-1]]
    prev[starts] = vl[ends]
    cross = (prev == 1) & (vl == 2)
    return np.bincount(owner[cross], minlength=batch.n_loops).astype(np.int64)


def claim1_check(loop, A, B, d: int | None = None) -> dict:
    """Exact check of mu(l) = (1/k) sum_{x in A} P_x[(X_0..X_{n-1}) in L(A,B)(l), X_n = x].

    The right side sums the probability (2d)^-n of every admissible based
    path; k is the excursion count of a representative.
    """
    loop = canonicalize(loop)
    d = d or loop.canonical.d
    reps = representatives_LAB(loop, A, B)
    if not reps:
        return {"status": "skip", "reason": "loop does not meet both sets"}
    n = loop.length
    k = decompose(reps[0], A, B).k
    ks = {decompose(r, A, B).k for r in reps}
    rhs = Fraction(0)
    for r in reps:
        rhs += Fraction(1, (2 * d) ** n)
    rhs /= k
    lhs = loop_mass(loop, d)
    return {"status": "ok", "lhs": lhs, "rhs": rhs, "equal": lhs == rhs, "k": k,
            "n_representatives": len(reps), "k_constant": len(ks) == 1,
            "periodic": len(loop.rotations()) < n}


# ---------------------------------------------------------------- endpoint process

@dataclass
class ExcursionKernels:
    domain: KilledDomain
    A: np.ndarray
    B: np.ndarray
    H_AB: np.ndarray
    H_BA: np.ndarray

    def __post_init__(self):
        self.M = self.H_AB @ self.H_BA
        self.a_sites = self.domain.grid.index(self.A)
        self.b_sites = self.domain.grid.index(self.B)
        self._bridges = {}

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.M)))) if self.M.size else 0.0

    def power(self, j: int) -> np.ndarray:
        return np.linalg.matrix_power(self.M, j)

    def bridges(self, which: str) -> BridgeSampler:
        if which not in self._bridges:
            self._bridges[which] = BridgeSampler(self.domain, self.B if which == "B" else self.A)
        return self._bridges[which]


def excursion_kernels(domain: KilledDomain, A, B) -> ExcursionKernels:
    A, B = as_points(A, domain.d), as_points(B, domain.d)
    _check_disjoint(_pset(A), _pset(B))
    return ExcursionKernels(domain, A, B, hitting_kernel(domain, A, B).entries, hitting_kernel(domain, B, A).entries)


def endpoint_intensity(j: int, tup, K: ExcursionKernels, alpha: float = 1.0) -> float:
    """(alpha/j) prod_i H_AB(a_i,b_i) H_BA(b_i,a_{i+1}) with a_{j+1} = a_1; tuple entries are (a_i, b_i) points."""
    if len(tup) != j:
        raise DomainError("tuple length differs from level")
    ia = {tuple(p): k for k, p in enumerate(K.A.tolist())}
    ib = {tuple(p): k for k, p in enumerate(K.B.tolist())}
    try:
        idx = [(ia[tuple(a)], ib[tuple(b)]) for a, b in tup]
    except KeyError:
        raise DomainError("tuple entries not in A x B")
    val = alpha / j
    for i, (a, b) in enumerate(idx):
        nxt = idx[(i + 1) % j][0]
        val *= K.H_AB[a, b] * K.H_BA[b, nxt]
    return float(val)


def level_intensities(K: ExcursionKernels, alpha: float, tol: float = LEVEL_TOL) -> tuple:
    """Intensities (alpha/j) tr(M^j) until below tol, with a certified bound on the omitted tail."""
    rho = K.spectral_radius
    if rho >= SPECTRAL_MAX:
        raise ConfigurationError(f"spectral radius {rho:.6f} too close to 1")
    if alpha == 0 or K.M.size == 0:
        return np.zeros(0), 0.0
    q = float(np.max(K.M.sum(axis=1)))          # row-sum norm bounds every eigenvalue
    lam, P, j = [], np.eye(len(K.A)), 0
    while True:
        j += 1
        P = P @ K.M
        lam.append(alpha / j * float(np.trace(P)))
        if lam[-1] < tol and (q < 1 and len(K.A) * alpha * q ** (j + 1) / ((j + 1) * (1 - q)) < tol or j > 10000):
            break
    tail = len(K.A) * alpha * q ** (j + 1) / ((j + 1) * (1 - q)) if q < 1 else float("inf")
    return np.array(lam), tail


def _choose(rng, weights: np.ndarray) -> np.ndarray:
    cw = np.cumsum(weights, axis=1)
    u = rng.random(len(weights)) * cw[:, -1]
    return np.minimum((cw <= u[:, None]).sum(axis=1), weights.shape[1] - 1)


def sample_tuples(K: ExcursionKernels, j: int, count: int, rng) -> tuple:
    """Exact draws of level-j tuples; returns index arrays a (count, j) and b (count, j)."""
    nA = len(K.A)
    pows = [np.eye(nA)]
    for _ in range(j):
        pows.append(pows[-1] @ K.M)
    a = np.zeros((count, j), dtype=np.int64)
    b = np.zeros((count, j), dtype=np.int64)
    if count == 0:
        return a, b
    diag = np.diag(pows[j])
    a[:, 0] = _choose(rng, np.broadcast_to(diag, (count, nA)))
    a1 = a[:, 0]
    for i in range(j):
        G = K.H_BA @ pows[j - i - 1]                  # |B| x |A|
        w = K.H_AB[a[:, i]] * G[:, a1].T
        b[:, i] = _choose(rng, w)
        if i + 1 < j:
            w = K.H_BA[b[:, i]] * pows[j - i - 1][:, a1].T
            a[:, i + 1] = _choose(rng, w)
    return a, b


@dataclass
class EndpointProcess:
    levels: dict       # j -> (count, j, 2, d) array of ((a_i, b_i)) points

    def counts(self) -> dict:
        return {j: len(v) for j, v in self.levels.items()}

    def excursion_total(self) -> int:
        return sum(j * len(v) for j, v in self.levels.items())


def sample_endpoint_process(alpha: float, K: ExcursionKernels, rng) -> EndpointProcess:
    lam, _ = level_intensities(K, alpha)
    levels = {}
    for j, l in enumerate(lam, start=1):
        c = int(rng.poisson(l))
        a, b = sample_tuples(K, j, c, rng)
        levels[j] = np.stack([K.A[a], K.B[b]], axis=2)
    return EndpointProcess(levels)


def sample_level_counts(alpha: float, K: ExcursionKernels, reps: int, rng) -> np.ndarray:
    """Array (reps, J) of independent Poisson level counts."""
    lam, _ = level_intensities(K, alpha)
    return rng.poisson(lam, size=(reps, len(lam))) if len(lam) else np.zeros((reps, 0), np.int64)


def excursion_soup_batch(alpha: float, K: ExcursionKernels, reps: int, rng) -> SoupBatch:
    """Replicates of the soup restricted to loops meeting A and B, built from endpoints and bridges.

    Loops are emitted as the based loops (a_1, ...) of the construction; the
    batch window is the carrier box.
    """
    dom = K.domain
    d = dom.d
    lam, _ = level_intensities(K, alpha)
    tuples_a, tuples_b, labels = [], [], []
    for j, l in enumerate(lam, start=1):
        c = int(rng.poisson(reps * l))
        a, b = sample_tuples(K, j, c, rng)
        tuples_a.append(a)
        tuples_b.append(b)
        labels.append(rng.integers(0, reps, size=c))
    inner_s, inner_t, outer_s, outer_t, seg_loop = [], [], [], [], []
    loop_rep = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    lid = 0
    for a, b in zip(tuples_a, tuples_b):
        c, j = a.shape
        inner_s.append(K.a_sites[a].ravel())
        inner_t.append(K.b_sites[b].ravel())
        outer_s.append(K.b_sites[b].ravel())
        outer_t.append(K.a_sites[np.roll(a, -1, axis=1)].ravel())
        seg_loop.append(np.repeat(np.arange(lid, lid + c), j))
        lid += c
    meta = {"sampler": "excursions", "alpha": alpha}
    if lid == 0:
        return SoupBatch(dom.carrier, reps, np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros((0, d), np.int64), meta)
    inner_s, inner_t = np.concatenate(inner_s), np.concatenate(inner_t)
    outer_s, outer_t = np.concatenate(outer_s), np.concatenate(outer_t)
    seg_loop = np.concatenate(seg_loop)
    fin, oin = K.bridges("B").sample_sites(inner_s, inner_t, rng)
    fout, oout = K.bridges("A").sample_sites(outer_s, outer_t, rng)
    flat = np.concatenate([fin, fout])
    m = len(inner_s)
    # segment order per loop: inner_1, outer_1, inner_2, ...; each drops its last vertex
    seg_start = np.empty(2 * m, dtype=np.int64)
    seg_len = np.empty(2 * m, dtype=np.int64)
    seg_start[0::2] = oin[:-1]
    seg_len[0::2] = np.diff(oin) - 1
    seg_start[1::2] = oout[:-1] + len(fin)
    seg_len[1::2] = np.diff(oout) - 1
    within = np.arange(seg_len.sum()) - np.repeat(np.concatenate([[0], np.cumsum(seg_len)[:-1]]), seg_len)
    sites = flat[np.repeat(seg_start, seg_len) + within]
    lens = np.bincount(np.repeat(seg_loop, 2), weights=seg_len, minlength=lid).astype(np.int64)
    verts = dom.grid.coords(sites)
    order, offsets, vidx = _group_by_replicate(loop_rep, lens)
    return SoupBatch(dom.carrier, reps, loop_rep[order], offsets, verts[vidx], meta)


def sample_soup_via_excursions(alpha: float, A, B, domain: KilledDomain, rng, K: ExcursionKernels | None = None):
    """One replicate: list of based loops (admissible representatives) and their classes."""
    K = K if K is not None else excursion_kernels(domain, A, B)
    batch = excursion_soup_batch(alpha, K, 1, rng)
    based = []
    for m in range(batch.n_loops):
        v = batch.verts[batch.offsets[m]:batch.offsets[m + 1]]
        based.append(BasedLoop(tuple(map(tuple, v.tolist()))))
    return based, [canonicalize(b) for b in based]


def tail_check_Z(alpha: float, A, B, domain: KilledDomain, replicates: int, rng, k_max: int = 8,
                 K: ExcursionKernels | None = None) -> dict:
    """Empirical P[Z >= k] against exp(alpha - k), after certifying sup_B P_y[H_A] <= 1/(2e)."""
    A, B = as_points(A, domain.d), as_points(B, domain.d)
    h = hitting_field(domain, A)
    sup = float(h[domain.grid.index(B)].max())
    report = {"sup_hitting": sup, "threshold": 1 / (2 * np.e), "alpha": alpha, "replicates": replicates}
    if sup > 1 / (2 * np.e):
        report["status"] = "precondition-violated"
        return report
    K = K if K is not None else excursion_kernels(domain, A, B)
    counts = sample_level_counts(alpha, K, replicates, rng)
    Z = counts @ np.arange(1, counts.shape[1] + 1) if counts.size else np.zeros(replicates, np.int64)
    rows = []
    for k in range(1, k_max + 1):
        p = float(np.mean(Z >= k))
        s = float(np.sqrt(max(p * (1 - p), 1.0 / replicates) / replicates))
        bound = float(np.exp(alpha - k))
        rows.append({"k": k, "empirical": p, "sigma": s, "bound": bound, "ok": p <= bound + 3 * s})
    report.update(status="ok", rows=rows, passed=all(r["ok"] for r in rows), Z_mean=float(Z.mean()))
    return report
