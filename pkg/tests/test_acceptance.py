"""Acceptance suite; each test prints a single PASS/FAIL line."""
import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from loopsoup.errors import ConfigurationError
from loopsoup.excursions import (batch_excursion_counts, excursion_kernels, excursion_soup_batch,
                                 level_intensities, tail_check_Z)
from loopsoup.explore import surgery_exhaustive
from loopsoup.lab import decoupling_sweep, local_uniqueness_stats
from loopsoup.lattice import Box, sphere
from loopsoup.loops import enumerate_loops_through, mass_table
from loopsoup.potential import (KilledDomain, equilibrium_measure, green, green_column, hitting_field,
                                lattice_green_constant)
from loopsoup.renorm import embeddings_count_and_separation, frame_connectivity, induction_ledger_run
from loopsoup.rng import stream
from loopsoup.soup import SoupConfig, sample_batch

ORIGIN = (0, 0, 0)


@pytest.fixture(scope="module")
def mass_through_origin():
    loops = enumerate_loops_through(ORIGIN, 8, 3)
    return sum(m for _, m in loops), len(loops)


def test_01_enumeration_equals_bridge_dp(report, mass_through_origin):
    enum, count = mass_through_origin
    dp = mass_table(Box(ORIGIN, 0), 8, 3, exact=True).total_visit_mass()
    report(1, "loop mass through 0 up to length 8", enum == dp, f"enumerated {enum} over {count} classes, dp {dp}")


def test_02_one_point_vacancy(report, mass_through_origin):
    m = float(mass_through_origin[0])
    reps = 10 ** 5
    cfg = SoupConfig(alpha=1.0, window=Box(ORIGIN, 0), n_max=8, seed=2)
    vac = sample_batch(cfg, reps, stream(2, 0)).local_times()[:, 0] == 0
    p = math.exp(-m)
    sigma = math.sqrt(p * (1 - p) / reps)
    z = (vac.mean() - p) / sigma
    report(2, "one-point vacancy", abs(z) <= 3, f"empirical {vac.mean():.5f}, exp(-m) {p:.5f}, z {z:.2f}")


def test_03_potential_identities(report):
    D = KilledDomain(Box(ORIGIN, 60))
    A = sphere(ORIGIN, 2, 3)
    x, y = (5, 0, 0), (1, 2, -3)
    h = hitting_field(D, A)
    e = equilibrium_measure(D, A)
    gx = green_column(D, x)
    ident = abs(h[D.site(x)] - gx[D.sites(A)] @ e.weights)
    sym = abs(gx[D.site(y)] - green_column(D, y)[D.site(x)])
    g00 = green(D, ORIGIN, ORIGIN, extrapolate=True)
    watson = lattice_green_constant(3)
    ok = ident <= 1e-8 and sym <= 1e-10 and abs(g00 - watson) <= 2e-3
    report(3, "hitting = green * equilibrium, symmetry, g(0,0)", ok,
           f"identity err {ident:.1e}, symmetry err {sym:.1e}, g00 {g00:.6f} vs {watson:.6f}")


@pytest.fixture(scope="module")
def wide_pair():
    D = KilledDomain(Box(ORIGIN, 24))
    A, B = sphere(ORIGIN, 1, 3), sphere(ORIGIN, 10, 3)
    return D, A, B, excursion_kernels(D, A, B)


def test_04_excursion_count_tail(report, wide_pair):
    D, A, B, K = wide_pair
    r = tail_check_Z(0.5, A, B, D, 10 ** 6, stream(4, 0), 8, K=K)
    worst = max(row["empirical"] - row["bound"] - 3 * row["sigma"] for row in r["rows"])
    ok = r["status"] == "ok" and r["passed"]
    report(4, "tail of the excursion count", ok,
           f"sup hitting {r['sup_hitting']:.4f} <= {r['threshold']:.4f}, worst excess {worst:.3f}")


@pytest.fixture(scope="module")
def two_samplers():
    alpha, reps = 0.5, 10 ** 5
    car = Box(ORIGIN, 4)
    A, B = sphere(ORIGIN, 1, 3), sphere(ORIGIN, 3, 3)
    K = excursion_kernels(KilledDomain(car), A, B)
    W = Box(ORIGIN, 1)
    cfg = SoupConfig(alpha=alpha, window=W, n_max=300, seed=5, carrier=car)
    table = mass_table(W, 300, 3, car, exact=False)
    direct = sample_batch(cfg, reps, stream(5, 0), mode="condition", table=table)
    direct = direct.select(direct.meets(A) & direct.meets(B))
    exc = excursion_soup_batch(alpha, K, reps, stream(5, 1))
    return {"alpha": alpha, "reps": reps, "A": A, "B": B, "K": K, "direct": direct, "exc": exc}


def _pooled_table(x, y, min_count=20):
    m = int(max(x.max(), y.max())) + 1
    h = np.array([np.bincount(x, minlength=m), np.bincount(y, minlength=m)])
    cols, acc = [], np.zeros(2, dtype=np.int64)
    for c in h.T:
        acc = acc + c
        if acc.sum() >= min_count:
            cols.append(acc)
            acc = np.zeros(2, dtype=np.int64)
    if acc.sum():
        cols[-1] = cols[-1] + acc
    return np.array(cols).T


def test_05_sampler_equivalence(report, two_samplers):
    probes = [(0, 0, 0), (1, 0, 0), (1, 1, 1), (2, 1, 0), (3, 0, 0)]
    ld = two_samplers["direct"].probe_local_times(probes)
    le = two_samplers["exc"].probe_local_times(probes)
    p = np.array([chi2_contingency(_pooled_table(ld[:, i], le[:, i]))[1] for i in range(len(probes))])
    # Holm step-down adjustment
    order = np.argsort(p)
    adj = np.maximum.accumulate(np.minimum(1.0, p[order] * (len(p) - np.arange(len(p)))))
    p_adj = np.empty_like(adj)
    p_adj[order] = adj
    report(5, "direct and excursion samplers", bool(np.all(p_adj > 0.01)),
           "adjusted p " + ", ".join(f"{v:.3f}" for v in p_adj))


def test_06_endpoint_intensities(report, two_samplers):
    s = two_samplers
    lam, _ = level_intensities(s["K"], s["alpha"])
    ks = batch_excursion_counts(s["direct"], s["A"], s["B"])
    rows, ok = [], True
    for j in range(1, 5):
        cnt = np.bincount(s["direct"].loop_rep[ks == j], minlength=s["reps"])
        sigma = cnt.std(ddof=1) / math.sqrt(s["reps"])
        z = (cnt.mean() - lam[j - 1]) / sigma
        ok &= abs(z) <= 3
        rows.append(f"j={j} z={z:.2f}")
    report(6, "level counts of direct loops vs (a/j) tr M^j", bool(ok), ", ".join(rows))


def test_07_geometry(report):
    frames = [frame_connectivity(R, 3) for R in range(3, 9)]
    frames_ok = all(f["connected"] and f["pairs_connected"] for f in frames)
    single = surgery_exhaustive(4, 3)
    full = [surgery_exhaustive(R, 3, max_pairs=True) for R in range(5, 9)]
    ok = frames_ok and single["ok"] and all(r["ok"] for r in full)
    detail = (f"frames R=3..8 {'ok' if frames_ok else 'broken'}; R=4 singletons {single['plans']} plans; "
              + "; ".join(f"R={r['R']} max visits {r['max_boundary_visits']}/{r['bound']}" for r in full))
    report(7, "frame and surgery geometry", ok, detail)


def test_08_embedding_counts(report):
    one = embeddings_count_and_separation(1, 6, 3, "exhaustive")
    two = embeddings_count_and_separation(2, 6, 3, "sampled", 10 ** 4, stream(8, 0))
    ok = (one["count"] == one["closed_form"] == 2994628 and one["bound"] == 3802500 and one["within_bound"]
          and two["separation_failures"] == 0)
    report(8, "dyadic embeddings", ok,
           f"|Lambda_1| {one['count']} <= {one['bound']}, separation failures {two['separation_failures']}/10000")


def test_09_ledger(report):
    L = induction_ledger_run(0.4, 0.5, 0.5, 1.0, 0.9, 2.0, 4, 20)
    try:
        induction_ledger_run(0.4, 0.5, 0.5, 1.0, 0.3, 2.0, 4, 20)
        rejected = False
    except ConfigurationError:
        rejected = True
    ok = L.verdict == "PASS" and L.condr0 and L.delta_ok and rejected
    report(9, "induction ledger", ok, f"verdict {L.verdict}, sum_r {L.sum_r:.5f}, zeta=0.3 rejected {rejected}")


def test_10_decoupling_sweep(report):
    s_vals = [2, 4, 8]
    res = decoupling_sweep(0.5, 0.2, s_vals, L=1, kind="site_occupied", replicates=10 ** 5, seed=10)
    mono = all(res[i + 1]["defect_ci"][0] <= res[i]["defect_ci"][1] for i in range(len(res) - 1))
    zero = res[-1]["defect_ci"][0] <= 0.0 <= res[-1]["defect_ci"][1]
    detail = ", ".join(f"s={s} defect {r['defect']:.4f} raw {r['raw']:+.4f}" for s, r in zip(s_vals, res))
    report(10, "decoupling defect sweep", mono and zero, detail)


def test_11_local_uniqueness(report):
    r20 = local_uniqueness_stats(0.1, 20, 200, seed=11, which="lu2", n_max=100)["lu2"]
    r40 = local_uniqueness_stats(0.1, 40, 120, seed=12, which="lu2", n_max=100)["lu2"]
    slack = (r20["ci_high"] - r20["mean"]) + (r40["mean"] - r40["ci_low"])
    ok = r40["mean"] >= r20["mean"] - slack and r20["mean"] > 0.9 and r40["mean"] > 0.9
    report(11, "local uniqueness trend", ok,
           f"n=20 {r20['mean']:.3f} [{r20['ci_low']:.3f}, {r20['ci_high']:.3f}], "
           f"n=40 {r40['mean']:.3f} [{r40['ci_low']:.3f}, {r40['ci_high']:.3f}]")


CLI_RUNS = [
    ["soup", "--alpha", "1", "--window", "0", "--nmax", "2", "--reps", "100000", "--seed", "7"],
    ["ledger", "--gamma", "1", "--beta", "0.5", "--theta", "2", "--zeta", "0.9", "--u", "0.4", "--uprime", "0.5",
     "--r0", "20", "--l0", "4"],
    ["loops", "--window", "1", "--nmax", "6", "--enumerate", "4"],
    ["potential", "--carrier", "10"],
    ["excursions", "--carrier", "6", "--a", "1", "--b", "3", "--reps", "5000", "--seed", "3"],
    ["renorm", "--rmin", "3", "--rmax", "4", "--n", "1", "--l", "6", "--d", "2"],
    ["explore", "--alpha", "0.05", "--N", "40", "--L0", "5", "--seed", "1"],
    ["decouple", "--reps", "4000", "--s", "2,4", "--nmax", "16", "--seed", "2"],
    ["lu", "--n", "4", "--reps", "3", "--nmax", "16", "--which", "both", "--seed", "4"],
    ["vacancy", "--alphas", "0,0.5,1", "--radius", "2", "--reps", "300", "--nmax", "8", "--seed", "5"],
]


def _run_cli(args, out):
    proc = subprocess.run([sys.executable, "-m", "loopsoup", *args, "--out", str(out)],
                          capture_output=True, cwd=out.parent)
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir())} if out.exists() else {}
    return proc.returncode, proc.stdout.replace(str(out).encode(), b"OUT"), files


def test_12_cli_reproducible(report, tmp_path):
    bad = []
    for i, args in enumerate(CLI_RUNS):
        r1 = _run_cli(args, tmp_path / f"a{i}")
        r2 = _run_cli(args, tmp_path / f"b{i}")
        if r1[0] != 0 or r1 != r2 or not r1[2]:
            bad.append(args[0])
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"alpha": 0.5, "window": "1", "nmax": 4, "reps": 2000, "seed": 9}))
    s1 = _run_cli(["soup", "--spec", str(spec)], tmp_path / "s1")
    s2 = _run_cli(["soup", "--spec", str(spec)], tmp_path / "s2")
    if s1[0] != 0 or s1 != s2:
        bad.append("soup --spec")
    report(12, "byte-identical CLI reruns", not bad,
           f"{len(CLI_RUNS) + 1} commands" + (f", differing: {bad}" if bad else ""))
