"""Renormalization structures: frames, good and bad boxes, dyadic tree embeddings, scales, cascading events and the induction ledger."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import mpmath
import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DomainError, ResourceError
from .lattice import Box, BoxGrid, as_point, in_frame, interior_boundary
from .potential import KilledDomain, hitting_field

ENUM_GUARD = 10 ** 7
LIST_GUARD = 10 ** 6
K_MAX = 40


# ---------------------------------------------------------------- frames and boxes

@dataclass(frozen=True)
class Frame:
    center: tuple
    R: int

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if self.R < 2:
            raise DomainError("frames need R >= 2")

    @property
    def cube(self) -> Box:
        return Box(self.center, self.R)

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64).reshape(-1, len(self.center))
        return in_frame(y - np.asarray(self.center), self.R)

    def points(self) -> np.ndarray:
        p = self.cube.points()
        return p[self.contains(p)]


def frame_membership(y, frame: Frame) -> bool:
    return bool(frame.contains(as_point(y, len(frame.center)))[0])


def _connected(points: np.ndarray) -> bool:
    if len(points) == 0:
        return True
    lo = points.min(axis=0)
    arr = np.zeros(tuple(points.max(axis=0) - lo + 1), dtype=bool)
    arr[tuple((points - lo).T)] = True
    _, n = ndimage.label(arr)
    return n == 1


def frame_connectivity(R: int, d: int = 3) -> dict:
    """Flood-fill checks that E(x') and E(x') u E(x' + L0 e_i) are connected."""
    L0 = 2 * R + 1
    f0 = Frame((0,) * d, R).points()
    single = _connected(f0)
    pairs = []
    for i in range(d):
        shift = np.zeros(d, dtype=np.int64)
        shift[i] = L0
        pairs.append(_connected(np.concatenate([f0, f0 + shift])))
    return {"R": R, "d": d, "size": len(f0), "connected": single, "pairs_connected": all(pairs)}


class _FieldView:
    """Uniform access to a local-time field given as a SoupSample or a (Box, array) pair."""

    def __init__(self, field_):
        if hasattr(field_, "local_time") and hasattr(field_, "window"):
            self.window, values = field_.window, field_.local_time
        else:
            self.window, values = field_
        self.grid = BoxGrid(self.window)
        self.values = np.asarray(values).reshape(-1)
        if self.values.size != self.grid.size:
            raise DomainError("field does not match its window")

    def covers(self, box: Box) -> bool:
        w = self.window
        c = np.asarray(box.center) - np.asarray(w.center)
        return bool(np.all(np.abs(c) + box.radius <= w.radius))

    def at(self, pts) -> np.ndarray:
        idx = self.grid.index(pts)
        if np.any(idx < 0):
            raise DomainError("field does not cover the requested points")
        return self.values[idx]


def classify_box(center, field_, R: int, threshold: float | None = None) -> str:
    """'good' iff the field vanishes on the frame and sums to at most the threshold on the inner boundary."""
    fv = field_ if isinstance(field_, _FieldView) else _FieldView(field_)
    fr = Frame(center, R)
    if not fv.covers(fr.cube):
        raise DomainError("field does not cover the cube")
    thr = R ** (len(fr.center) - 1) if threshold is None else threshold
    if np.any(fv.at(fr.points()) != 0):
        return "bad"
    bnd = _cube_boundary(fr.center, R)
    return "good" if fv.at(bnd).sum() <= thr else "bad"


def _cube_boundary(center, R: int) -> np.ndarray:
    b = Box(center, R)
    p = b.points()
    return p[np.max(np.abs(p - np.asarray(b.center)), axis=1) == R]


@dataclass
class GoodBadField:
    """Classification of the G_0 cubes Q(x') for x' = L0 * (index - offset)."""

    bad: np.ndarray          # bool array, one axis per coordinate, in G_0 units
    offset: np.ndarray       # G_0 coordinate of index 0
    R: int
    threshold: float | None = None

    @property
    def L0(self) -> int:
        return 2 * self.R + 1

    def index(self, x) -> tuple:
        x = np.asarray(as_point(x, self.bad.ndim))
        if np.any(x % self.L0):
            raise DomainError(f"{tuple(x)} is not a G_0 point")
        i = x // self.L0 - self.offset
        if np.any(i < 0) or np.any(i >= self.bad.shape):
            raise DomainError("point outside the classified window")
        return tuple(int(c) for c in i)


def good_bad_field(field_, R: int, threshold: float | None = None) -> GoodBadField:
    """Classify every cube Q(x') fully covered by the field."""
    fv = _FieldView(field_)
    L0 = 2 * R + 1
    w = fv.window
    lo = -((-(np.asarray(w.center) - w.radius + R)) // L0)
    hi = (np.asarray(w.center) + w.radius - R) // L0
    if np.any(hi < lo):
        raise DomainError("window too small for a single cube")
    shape = tuple(int(c) for c in hi - lo + 1)
    bad = np.zeros(shape, dtype=bool)
    for idx in product(*[range(s) for s in shape]):
        c = (np.asarray(idx) + lo) * L0
        bad[idx] = classify_box(tuple(c), fv, R, threshold) == "bad"
    return GoodBadField(bad, lo, R, threshold)


def bad_star_component(gb: GoodBadField, start) -> tuple:
    """The *-connected bad component of ``start`` (G_0 points) and its reach in G_0 steps."""
    i0 = gb.index(start)
    if not gb.bad[i0]:
        return np.zeros((0, gb.bad.ndim), dtype=np.int64), 0
    lab, _ = ndimage.label(gb.bad, structure=np.ones((3,) * gb.bad.ndim, dtype=bool))
    comp = np.argwhere(lab == lab[i0])
    reach = int(np.max(np.abs(comp - np.asarray(i0)))) if len(comp) else 0
    return (comp + gb.offset) * gb.L0, reach


# ---------------------------------------------------------------- dyadic tree embeddings

def shell_count(r: int, d: int) -> int:
    return (2 * r + 1) ** d - (2 * r - 1) ** d if r > 0 else 1


def shell_points(r: int, d: int) -> np.ndarray:
    b = Box((0,) * d, r).points()
    return b[np.max(np.abs(b), axis=1) == r]


def lambda_bound(n: int, l: int, d: int) -> tuple:
    """The two nested upper bounds on |Lambda_n|."""
    e = 2 ** n - 1
    b1 = ((2 * d * (2 * l + 1) ** (d - 1)) * (2 * d * (4 * l + 1) ** (d - 1))) ** e
    b2 = ((2 * d) ** 2 * (4 * l) ** (2 * (d - 1))) ** e
    return b1, b2


def lambda_count(n: int, l: int, d: int, enumerate_: bool = True) -> int:
    """|Lambda_n|: every internal node picks its two children independently on shells of radius l and 2l.

    With ``enumerate_`` the shell sizes are recounted by scanning the lattice
    box instead of using the closed form.
    """
    if n == 0:
        return 1
    if enumerate_:
        if (4 * l + 1) ** d > ENUM_GUARD:
            raise ResourceError("shell enumeration too large")
        s1, s2 = len(shell_points(l, d)), len(shell_points(2 * l, d))
    else:
        s1, s2 = shell_count(l, d), shell_count(2 * l, d)
    return (s1 * s2) ** (2 ** n - 1)


def enumerate_embeddings(n: int, l: int, d: int, L0: int = 1) -> np.ndarray:
    """All embeddings of T_n as an array (count, nodes, d), nodes in breadth-first order."""
    if lambda_count(n, l, d, enumerate_=False) > LIST_GUARD:
        raise ResourceError("too many embeddings to list")
    trees = np.zeros((1, 1, d), dtype=np.int64)
    for k in range(n):
        step = L0 * l ** (n - k - 1)          # spacing of G_{n-k-1}
        s1 = shell_points(l, d) * step
        s2 = shell_points(2 * l, d) * step
        parents = trees[:, -2 ** k:, :]
        choices = [s1, s2] * 2 ** k
        combos = np.array(list(product(*[range(len(c)) for c in choices])), dtype=np.int64)
        kids = np.stack([choices[j][combos[:, j]] for j in range(len(choices))], axis=1)
        par = np.repeat(parents, 2, axis=1)
        new = np.repeat(par, len(combos), axis=0) + np.tile(kids, (len(trees), 1, 1))
        trees = np.concatenate([np.repeat(trees, len(combos), axis=0), new], axis=1)
    return trees


def _uniform_shell(r: int, d: int, m: int, rng) -> np.ndarray:
    out = np.empty((0, d), dtype=np.int64)
    while len(out) < m:
        z = rng.integers(-r, r + 1, size=(2 * (m - len(out)) * d + 16, d))
        out = np.concatenate([out, z[np.max(np.abs(z), axis=1) == r]])
    return out[:m]


def sample_embeddings(n: int, l: int, d: int, m: int, rng, L0: int = 1) -> np.ndarray:
    """m uniform embeddings; returns leaves (m, 2^n, d), leaf order by binary digits of the tree word."""
    cur = np.zeros((m, 1, d), dtype=np.int64)
    for k in range(n):
        step = L0 * l ** (n - k - 1)
        w = cur.shape[1]
        c1 = _uniform_shell(l, d, m * w, rng).reshape(m, w, d) * step
        c2 = _uniform_shell(2 * l, d, m * w, rng).reshape(m, w, d) * step
        cur = np.stack([cur + c1, cur + c2], axis=2).reshape(m, 2 * w, d)
    return cur


def separation_violations(leaves: np.ndarray, n: int, l: int, L0: int = 1) -> np.ndarray:
    """Per embedding, the number of (leaf, k) pairs with more than 2^k leaves within (l-5)/(l-1) L_{k+1}."""
    m = leaves.shape[0]
    diff = np.max(np.abs(leaves[:, :, None, :] - leaves[:, None, :, :]), axis=-1)
    bad = np.zeros(m, dtype=np.int64)
    for k in range(n):
        thr = (l - 5) / (l - 1) * L0 * l ** (k + 1)
        cnt = (diff <= thr).sum(axis=2)
        bad += (cnt > 2 ** k).sum(axis=1)
    return bad


def embeddings_count_and_separation(n: int, l: int, d: int, mode: str = "exhaustive",
                                    samples: int = 10000, rng=None, L0: int = 1) -> dict:
    b1, b2 = lambda_bound(n, l, d)
    rep = {"n": n, "l": l, "d": d, "mode": mode, "bound": b1, "bound_simple": b2}
    if mode == "exhaustive":
        closed = lambda_count(n, l, d, enumerate_=False)
        if n > 1 and closed > LIST_GUARD:
            raise ResourceError("exhaustive mode beyond n = 1 only for tiny cases")
        count = lambda_count(n, l, d, enumerate_=True)
        rep.update(count=count, closed_form=closed, within_bound=count <= b1)
        if count <= LIST_GUARD:
            trees = enumerate_embeddings(n, l, d, L0)
            rep["listed"] = len(trees)
            if l >= 6:
                leaves = trees[:, -2 ** n:, :]
                rep["separation_failures"] = int((separation_violations(leaves, n, l, L0) > 0).sum())
        return rep
    if mode != "sampled":
        raise ConfigurationError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = sample_embeddings(n, l, d, samples, rng, L0)
    v = separation_violations(leaves, n, l, L0)
    rep.update(count=lambda_count(n, l, d, enumerate_=False), samples=samples,
               separation_failures=int((v > 0).sum()))
    rep["within_bound"] = rep["count"] <= b1
    return rep


def dc_hitting_check(leaves: np.ndarray, L0: int, l: int, margin: int | None = None) -> dict:
    """sup over D_T of P_y[H_{C_T} < infinity] on a finite carrier, against 1/(2e).

    C_x' and D_x' are the inner boundaries of B(x', L0) and B(x', L1/4) around each leaf.
    """
    leaves = np.asarray(leaves, dtype=np.int64)
    rD = (l * L0) // 4
    lo, hi = leaves.min(axis=0), leaves.max(axis=0)
    margin = margin if margin is not None else 2 * rD
    center = tuple(int(c) for c in (lo + hi) // 2)
    rad = int(np.max(hi - lo)) // 2 + 1 + rD + margin
    dom = KilledDomain(Box(center, rad))
    C = np.concatenate([interior_boundary(Box(tuple(x), L0).points()) for x in leaves])
    D = np.concatenate([interior_boundary(Box(tuple(x), rD).points()) for x in leaves])
    h = hitting_field(dom, np.unique(C, axis=0))
    sup = float(h[dom.grid.index(np.unique(D, axis=0))].max())
    return {"sup": sup, "threshold": 1 / (2 * math.e), "ok": sup <= 1 / (2 * math.e), "carrier_radius": rad,
            "bias_order": dom.bias_order}


# ---------------------------------------------------------------- scales and cascading events

@dataclass(frozen=True)
class RenormScales:
    l0: int
    r0: int
    theta: float
    L0: int = 1

    def __post_init__(self):
        if self.theta <= 1:
            raise ConfigurationError("theta must exceed 1")
        if min(self.l0, self.r0, self.L0) < 1:
            raise ConfigurationError("l0, r0 and L0 must be positive integers")

    def _e(self, k: int) -> int:
        return int(math.floor(k ** self.theta))

    def l(self, k: int) -> int:
        return self.l0 * 4 ** self._e(k)

    def r(self, k: int) -> int:
        return self.r0 * 2 ** self._e(k)

    def L(self, k: int) -> int:
        out = self.L0
        for i in range(k):
            out *= self.l(i)
        return out


def cascading_eval(seed_oracle, scales: RenormScales, x, k: int, window: Box | None = None) -> bool:
    """Evaluate the cascading event at x in G_k by recursion over Lambda_{x,k}, memoized per call."""
    x = as_point(x)
    d = len(x)
    if k < 0:
        raise DomainError("negative level")
    Lk, L0 = scales.L(k), scales.L0
    if any(c % Lk for c in x):
        raise DomainError(f"{x} is not in G_{k}")
    if window is not None:
        lo = np.asarray(x) - L0
        hi = np.asarray(x) + Lk + 2 * L0 - 1
        if not (np.all(window.contains(lo)) and np.all(window.contains(hi))):
            raise DomainError("window too small for the cascading event")
    memo: dict = {}

    def ev(p: tuple, j: int) -> bool:
        key = (p, j)
        if key in memo:
            return memo[key]
        if j == 0:
            val = bool(seed_oracle(p))
        else:
            step = scales.L(j - 1)
            thr = scales.r(j - 1) * step
            base = np.asarray(p)
            true_pts = [base + step * np.asarray(o) for o in product(range(scales.l(j - 1)), repeat=d)
                        if ev(tuple(int(c) for c in base + step * np.asarray(o)), j - 1)]
            if len(true_pts) < 2:
                val = False
            else:
                P = np.asarray(true_pts)
                val = bool(np.max(P.max(axis=0) - P.min(axis=0)) > thr)
        memo[key] = val
        return val

    return ev(x, k)


# ---------------------------------------------------------------- induction ledger

@dataclass
class InductionLedger:
    params: dict
    chi: float
    xi: float
    u: list
    Delta: list
    sum_r: float
    sum_r_tail: float
    condr0: bool
    delta_ok: bool
    rk_ratios: list
    rk_margin: float
    rk_argmin: int
    rk_ok: bool
    verdict: str
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@mpmath.workdps(30)
def induction_ledger_run(u: float, u_prime: float, beta: float, gamma: float, zeta: float, theta: float,
                         l0: int, r0: int, d: int = 3, L0: int = 1, K_max: int = K_MAX,
                         C: float | None = None) -> InductionLedger:
    """Arithmetic of the multiscale induction up to horizon K_max with certified tail majorants.

    ``rk_margin`` is the largest C for which min{r_k^xi, exp((log L_k)^zeta)} >= C Delta_0 2^(k+1)
    holds for k <= K_max; the condition is judged feasible when that margin is positive, or at
    least ``C`` when given.
    """
    if min(beta, gamma, zeta) <= 0:
        raise ConfigurationError("beta, gamma and zeta must be positive")
    if theta <= 1:
        raise ConfigurationError("theta must exceed 1")
    if (theta + 1) * zeta <= 1:
        raise ConfigurationError("need (theta + 1) * zeta > 1")
    if u == u_prime:
        raise ConfigurationError("u and u' must differ")
    if K_max < 1:
        raise ConfigurationError("horizon must be positive")
    sc = RenormScales(l0, r0, theta, L0)
    mp = mpmath.mpf
    chi = mp(gamma) / (2 * mp(beta))
    xi = mp(gamma) / 2
    gap = abs(mp(u_prime) - mp(u))
    sign = -1 if u < u_prime else 1

    terms = [mp(sc.r(k)) ** (-chi) for k in range(K_max + 1)]
    # floor(k^theta) >= K^theta + (k - K) - 1 for k > K >= 1, a geometric majorant in 2^-chi
    q = mp(2) ** (-chi)
    tail_r = mp(r0) ** (-chi) * mp(2) ** (-chi * (mp(K_max) ** theta - 1)) * q / (1 - q)
    sum_r = mpmath.fsum(terms)
    condr0 = sum_r + tail_r <= gap
    us = [mp(u_prime)]
    for t in terms[:K_max]:
        us.append(us[-1] + sign * t)

    def dterm(i):
        return (1 + 2 * d * mpmath.log(sc.l(i), 2)) / mp(2) ** (i + 1)

    dts = [dterm(i) for i in range(K_max + 1)]
    # ratio of successive majorant terms (a + b i^theta) 2^-(i+1) is at most ((K+2)/(K+1))^theta / 2
    qd = (mp(K_max + 2) / (K_max + 1)) ** theta / 2
    nxt = (1 + 2 * d * (mpmath.log(l0, 2) + 2 * mp(K_max + 1) ** theta)) / mp(2) ** (K_max + 2)
    tail_d = nxt / (1 - qd) if qd < 1 else mpmath.inf
    Delta0 = 1 + mpmath.fsum(dts) + tail_d
    Delta = [Delta0]
    for t in dts[:K_max]:
        Delta.append(Delta[-1] - t)
    # Delta_k - 1 is the remaining tail, at least the computed partial terms
    delta_ok = all(mpmath.fsum(dts[k:]) > 0 for k in range(K_max + 1))

    ratios = []
    for k in range(K_max + 1):
        a = mp(sc.r(k)) ** xi
        Lk = mp(sc.L(k))
        b = mpmath.exp(mpmath.log(Lk) ** zeta) if Lk > 1 else mp(1)
        ratios.append(min(a, b) / (Delta0 * mp(2) ** (k + 1)))
    margin = min(ratios)
    argmin = ratios.index(margin)
    rk_ok = margin > 0 if C is None else margin >= C
    notes = []
    if ratios[-1] < ratios[-2]:
        notes.append("r_k ratio still decreasing at the horizon")
    verdict = "PASS" if condr0 and delta_ok and rk_ok else "FAIL"
    params = {"u": u, "u_prime": u_prime, "beta": beta, "gamma": gamma, "zeta": zeta, "theta": theta,
              "l0": l0, "r0": r0, "d": d, "L0": L0, "K_max": K_max, "C": C}
    return InductionLedger(params, float(chi), float(xi), [float(v) for v in us], [float(v) for v in Delta],
                           float(sum_r + tail_r), float(tail_r), bool(condr0), bool(delta_ok),
                           [float(v) for v in ratios], float(margin), argmin, bool(rk_ok), verdict, notes)
