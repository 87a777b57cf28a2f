"""Command-line front end: ``loopsoup <command> [options]``.

Options may also come from ``--spec FILE`` (JSON or key=value lines); flags
given on the command line win.  Outputs go to ``--out`` and are written
atomically; the last stdout line is a one-line summary.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import EXIT_CODES, ConfigurationError
from .io import to_jsonable, write_csv, write_json, write_jsonl
from .lattice import Box, sphere
from .rng import stream

COMMANDS = ("potential", "loops", "soup", "excursions", "renorm", "explore", "decouple", "lu", "vacancy", "ledger")


def parse_window(text, d: int = 3) -> Box:
    """'r' for B(0, r), or 'x,y,z:r'."""
    text = str(text).strip()
    if ":" in text:
        c, r = text.split(":")
        return Box(tuple(int(v) for v in c.split(",")), int(r))
    return Box((0,) * d, int(text))


def parse_point(text, d: int = 3) -> tuple:
    vals = tuple(int(v) for v in str(text).split(","))
    if len(vals) == 1 and d > 1:
        vals = vals + (0,) * (d - 1)
    return vals


def parse_list(text, kind=float) -> list:
    if isinstance(text, (list, tuple)):
        return [kind(v) for v in text]
    return [kind(v) for v in str(text).split(",") if v.strip()]


def read_spec(path) -> dict:
    raw = Path(path).read_text()
    try:
        data = json.loads(raw)
        if not isinstance(data, dict):
            raise ConfigurationError("spec file must hold an object")
        return {k.replace("-", "_"): v for k, v in data.items()}
    except json.JSONDecodeError:
        pass
    out = {}
    for line in raw.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"bad spec line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loopsoup", description="Random walk loop soup laboratory.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--spec", help="JSON or key=value file with option values")
        q.add_argument("--out", default=None, help="output directory")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--d", type=int, default=3)
        return q

    q = add("potential", "Green function, capacity and hitting quantities on a carrier box")
    q.add_argument("--carrier", type=int, default=20)
    q.add_argument("--A", type=int, default=2, help="A is the inner boundary of B(0, A)")
    q.add_argument("--x", default="5")
    q.add_argument("--extrapolate", action="store_true")

    q = add("loops", "Exact loop masses through the window")
    q.add_argument("--window", default="0")
    q.add_argument("--nmax", type=int, default=8)
    q.add_argument("--enumerate", type=int, default=0, help="also enumerate loops through 0 up to this length")

    q = add("soup", "Sample the soup restricted to loops meeting the window")
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--window", default="0")
    q.add_argument("--nmax", type=int, default=8)
    q.add_argument("--reps", type=int, default=1000)
    q.add_argument("--mode", default="auto", choices=["auto", "condition", "thin"])
    q.add_argument("--carrier", type=int, default=None)

    q = add("excursions", "Endpoint process and excursion counts between two spheres")
    q.add_argument("--alpha", type=float, default=0.5)
    q.add_argument("--a", type=int, default=1, help="radius of the inner sphere A")
    q.add_argument("--b", type=int, default=10, help="radius of the outer sphere B")
    q.add_argument("--carrier", type=int, default=24)
    q.add_argument("--reps", type=int, default=10000)
    q.add_argument("--kmax", type=int, default=8)

    q = add("renorm", "Frames, embedding counts and separation")
    q.add_argument("--rmin", type=int, default=3)
    q.add_argument("--rmax", type=int, default=8)
    q.add_argument("--l", type=int, default=6)
    q.add_argument("--n", type=int, default=1)
    q.add_argument("--samples", type=int, default=10000)
    q.add_argument("--mode", default="exhaustive", choices=["exhaustive", "sampled"])

    q = add("explore", "Exploration of the vacant cluster of a point")
    q.add_argument("--alpha", type=float, default=0.1)
    q.add_argument("--N", type=int, default=60)
    q.add_argument("--L0", type=int, default=5)
    q.add_argument("--start", default="0")
    q.add_argument("--nmax", type=int, default=32)

    q = add("decouple", "Decoupling defect sweep for occupancy indicators")
    q.add_argument("--alpha", type=float, default=0.5)
    q.add_argument("--delta", type=float, default=0.2)
    q.add_argument("--s", default="2,4,8")
    q.add_argument("--L", type=int, default=1)
    q.add_argument("--kind", default="site_occupied")
    q.add_argument("--reps", type=int, default=10000)
    q.add_argument("--nmax", type=int, default=32)

    q = add("lu", "Local uniqueness frequencies")
    q.add_argument("--alpha", type=float, default=0.1)
    q.add_argument("--n", type=int, default=10)
    q.add_argument("--reps", type=int, default=20)
    q.add_argument("--which", default="lu2", choices=["both", "lu1", "lu2"])
    q.add_argument("--nmax", type=int, default=64)
    q.add_argument("--alphas", default=None, help="scan these intensities for the largest one meeting --target")
    q.add_argument("--target", type=float, default=0.9)

    q = add("vacancy", "Vacancy, largest cluster and crossing along an intensity grid")
    q.add_argument("--alphas", default="0,0.5,1,2")
    q.add_argument("--radius", type=int, default=4)
    q.add_argument("--nmax", type=int, default=16)
    q.add_argument("--reps", type=int, default=1000)

    q = add("ledger", "Arithmetic of the multiscale induction")
    q.add_argument("--gamma", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=0.5)
    q.add_argument("--theta", type=float, default=2.0)
    q.add_argument("--zeta", type=float, default=0.9)
    q.add_argument("--u", type=float, default=0.4)
    q.add_argument("--uprime", type=float, default=0.5)
    q.add_argument("--r0", type=int, default=20)
    q.add_argument("--l0", type=int, default=4)
    q.add_argument("--L0", type=int, default=1)
    q.add_argument("--kmax", type=int, default=40)
    q.add_argument("--C", type=float, default=None)
    return p


def parse(argv) -> argparse.Namespace:
    p = build_parser()
    args = p.parse_args(argv)
    if args.spec:
        spec = read_spec(args.spec)
        sp = p._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        bad = set(spec) - known
        if bad:
            raise ConfigurationError(f"unknown spec keys: {sorted(bad)}")
        sp.set_defaults(**spec)
        args = p.parse_args(argv)
        for a in sp._actions:
            v = getattr(args, a.dest, None)
            if isinstance(v, str) and a.type is not None and a.dest in spec and not isinstance(spec[a.dest], bool):
                setattr(args, a.dest, a.type(v))
    return args


# ---------------------------------------------------------------- commands

def cmd_potential(a, out: Path) -> str:
    from .potential import KilledDomain, equilibrium_measure, green, lattice_green_constant
    dom = KilledDomain(Box((0,) * a.d, a.carrier))
    A = sphere((0,) * a.d, a.A, a.d)
    x = parse_point(a.x, a.d)
    eq = equilibrium_measure(dom, A, extrapolate=a.extrapolate)
    g00 = green(dom, (0,) * a.d, (0,) * a.d, extrapolate=a.extrapolate)
    res = {"carrier": a.carrier, "A_radius": a.A, "capacity": eq.total, "g00": g00,
           "g00_lattice": lattice_green_constant(a.d), "g0x": green(dom, (0,) * a.d, x, a.extrapolate),
           "x": list(x), "bias_order": dom.bias_order}
    write_json(out / "potential.json", res)
    write_csv(out / "equilibrium.csv", [f"x{i + 1}" for i in range(a.d)] + ["e"],
              [list(p) + [w] for p, w in zip(eq.support.tolist(), eq.weights)])
    return f"capacity={eq.total:.10g} g00={g00:.10g}"


def cmd_loops(a, out: Path) -> str:
    from .loops import enumerate_loops_through, mass_table
    W = parse_window(a.window, a.d)
    T = mass_table(W, a.nmax, a.d)
    T.to_csv(out / "mass_table.csv")
    tot = T.total_visit_mass()
    res = {"window": {"center": list(W.center), "radius": W.radius}, "nmax": a.nmax, "exact": T.exact,
           "total_visit_mass": tot}
    if a.enumerate:
        loops = enumerate_loops_through((0,) * a.d, a.enumerate, a.d)
        res["enumerated"] = {"count": len(loops), "total": sum(m for _, m in loops)}
        write_jsonl(out / "enumeration.jsonl",
                    ({"len": l.length, "mass": m, "verts": [list(p) for p in l.canonical.vertices]} for l, m in loops))
    write_json(out / "loops.json", res)
    return f"total_visit_mass={to_jsonable(tot)}"


def cmd_soup(a, out: Path) -> str:
    from .soup import SoupConfig, sample_batch, tail_mass_bound
    from .lattice import BoxGrid
    W = parse_window(a.window, a.d)
    car = Box((0,) * a.d, a.carrier) if a.carrier is not None else None
    cfg = SoupConfig(alpha=a.alpha, window=W, n_max=a.nmax, seed=a.seed, carrier=car)
    batch = sample_batch(cfg, a.reps, stream(a.seed, 0), mode=a.mode)
    lt = batch.local_times(W)
    pts = W.points()
    rows = [list(p) + [float(lt[:, i].mean()), float((lt[:, i] == 0).mean())] for i, p in enumerate(pts.tolist())]
    write_csv(out / "local_times.csv", [f"x{i + 1}" for i in range(a.d)] + ["mean_local_time", "vacancy"], rows)
    batch.sample(0).dump_jsonl(out / "sample_0.jsonl")
    per = np.bincount(batch.loop_rep, minlength=a.reps)
    c = int(BoxGrid(W).index(W.center)[0])
    vac = float((lt[:, c] == 0).mean())
    res = {"config": cfg.as_dict(), "reps": a.reps, "mode": a.mode, "loops_total": batch.n_loops,
           "loops_per_rep_mean": float(per.mean()), "vacancy_center": vac, "tail_bound": tail_mass_bound(cfg)}
    write_json(out / "soup.json", res)
    return f"loops={batch.n_loops} vacancy_center={vac:.6f}"


def cmd_excursions(a, out: Path) -> str:
    from .excursions import excursion_kernels, level_intensities, sample_level_counts, tail_check_Z
    from .potential import KilledDomain
    dom = KilledDomain(Box((0,) * a.d, a.carrier))
    A, B = sphere((0,) * a.d, a.a, a.d), sphere((0,) * a.d, a.b, a.d)
    K = excursion_kernels(dom, A, B)
    lam, tail = level_intensities(K, a.alpha)
    rep = tail_check_Z(a.alpha, A, B, dom, a.reps, stream(a.seed, 0), a.kmax, K=K)
    counts = sample_level_counts(a.alpha, K, a.reps, stream(a.seed, 1))
    Z = counts @ np.arange(1, counts.shape[1] + 1) if counts.size else np.zeros(a.reps, np.int64)
    hist = np.bincount(Z)
    write_csv(out / "z_histogram.csv", ["z", "count"], [[i, int(c)] for i, c in enumerate(hist)])
    write_json(out / "excursions.json", {"levels": lam, "level_tail": tail, "spectral_radius": K.spectral_radius,
                                         "tail_check": rep})
    return f"status={rep['status']} sup_hitting={rep['sup_hitting']:.6f}"


def cmd_renorm(a, out: Path) -> str:
    from .renorm import embeddings_count_and_separation, frame_connectivity
    frames = [frame_connectivity(R, a.d) for R in range(a.rmin, a.rmax + 1)]
    emb = embeddings_count_and_separation(a.n, a.l, a.d, a.mode, a.samples, stream(a.seed, 0))
    write_csv(out / "frames.csv", ["R", "size", "connected", "pairs_connected"],
              [[f["R"], f["size"], f["connected"], f["pairs_connected"]] for f in frames])
    write_json(out / "embeddings.json", emb)
    ok = all(f["connected"] and f["pairs_connected"] for f in frames)
    return f"frames_connected={ok} count={emb['count']} bound={emb['bound']}"


def cmd_explore(a, out: Path) -> str:
    from .explore import explore_run, field_oracle
    from .soup import SoupConfig, sample_batch
    start = parse_point(a.start, a.d)
    M = a.N // 30
    R = (a.L0 - 1) // 2
    rad = int(np.max(np.abs(start))) + a.L0 * (M + 1) + R + 1
    W = Box((0,) * a.d, rad)
    if a.alpha > 0:
        b = sample_batch(SoupConfig(alpha=a.alpha, window=W, n_max=a.nmax, seed=a.seed), 1, stream(a.seed, 0),
                         mode="thin")
        vac = b.local_times(W)[0] == 0
    else:
        vac = np.ones(len(W), dtype=bool)
    st = explore_run(field_oracle(W, vac), start, a.N, a.L0)
    st.dump_jsonl(out / "trace.jsonl")
    write_json(out / "explore.json", {"tau": st.tau, "reason": st.reason, "cubes": st.cubes,
                                      "path_diameter": st.final_path_diameter()})
    return f"tau={st.tau} reason={st.reason}"


def cmd_decouple(a, out: Path) -> str:
    from .lab import decoupling_sweep
    svals = parse_list(a.s, int)
    res = decoupling_sweep(a.alpha, a.delta, svals, a.L, a.kind, a.reps, a.seed, a.nmax, a.d)
    rows = [[s, r["lhs"], r["f1"], r["f2_sprinkled"], r["raw"], r["se"], r["defect"], *r["defect_ci"]]
            for s, r in zip(svals, res)]
    write_csv(out / "decoupling.csv", ["s", "lhs", "f1", "f2_sprinkled", "raw", "se", "defect", "ci_low", "ci_high"],
              rows)
    return "defects=" + ",".join(f"{r['defect']:.6f}" for r in res)


def cmd_lu(a, out: Path) -> str:
    from .lab import alpha_surrogate, local_uniqueness_stats
    if a.alphas:
        res = alpha_surrogate(parse_list(a.alphas), a.n, a.target, a.reps, a.seed, a.nmax, a.d)
        write_json(out / "lu_scan.json", res)
        return f"alpha_star={res['alpha_star']}"
    res = local_uniqueness_stats(a.alpha, a.n, a.reps, a.seed, a.which, a.nmax, a.d)
    write_json(out / "lu.json", res)
    return " ".join(f"{k}={res[k]['mean']:.6f}" for k in ("lu1", "lu2") if k in res)


def cmd_vacancy(a, out: Path) -> str:
    from .lab import vacancy_curve, write_vacancy_csv
    rows = vacancy_curve(parse_list(a.alphas), a.radius, a.nmax, a.reps, a.seed, a.d)
    write_vacancy_csv(out / "vacancy.csv", rows)
    return f"rows={len(rows)}"


def cmd_ledger(a, out: Path) -> str:
    from .renorm import induction_ledger_run
    L = induction_ledger_run(a.u, a.uprime, a.beta, a.gamma, a.zeta, a.theta, a.l0, a.r0, a.d, a.L0, a.kmax, a.C)
    write_json(out / "ledger.json", L.as_dict())
    return f"verdict={L.verdict} sum_r={L.sum_r:.6f} margin={L.rk_margin:.6g}"


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        out = Path(args.out) if args.out else Path("loopsoup-out") / args.command
        summary = HANDLERS[args.command](args, out)
    except SystemExit as e:
        return int(e.code or 0)
    except tuple(EXIT_CODES) as e:
        code = next(c for k, c in EXIT_CODES.items() if isinstance(e, k))
        print(f"loopsoup: {type(e).__name__}: {e}", file=sys.stderr)
        return code
    print(f"{args.command}: {summary} out={out}")
    return 0


def run_cli(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
