from fractions import Fraction

import numpy as np
import pytest

from loopsoup.errors import DomainError, ResourceError
from loopsoup.lattice import Box, BoxGrid, in_frame, sphere
from loopsoup.loops import (BasedLoop, Loop, canonicalize, enumerate_loops_through, loop_mass, mass_table,
                            return_counts)
from loopsoup.rng import stream
from loopsoup.soup import SoupConfig, return_probs, sample_batch, tail_mass_bound


def test_box_grid_roundtrip():
    B = Box((1, -2, 0), 2)
    g = BoxGrid(B)
    pts = B.points()
    assert len(pts) == 125
    assert np.array_equal(g.coords(g.index(pts)), pts)
    assert g.index(np.array([[10, 10, 10]]))[0] == -1


def test_sphere_is_inner_boundary():
    S = sphere((0, 0, 0), 2, 3)
    assert len(S) == 5 ** 3 - 3 ** 3
    assert np.all(np.max(np.abs(S), axis=1) == 2)


def test_frame_band_symmetric():
    pts = Box((0, 0, 0), 5).points()
    f = in_frame(pts, 5)
    assert np.array_equal(f, in_frame(-pts, 5))
    assert np.array_equal(f, in_frame(pts[:, ::-1], 5))


def test_canonical_rotation():
    a = canonicalize(((1, 0, 0), (0, 0, 0)))
    b = canonicalize(((0, 0, 0), (1, 0, 0)))
    assert a == b
    assert a.canonical.vertices[0] == (0, 0, 0)


def test_mass_of_periodic_loop():
    # (0, e1, 0, e1) has 2 distinct rotations out of 4: mu = 2 * (1/4) * 6^-4
    l = canonicalize(((0, 0, 0), (1, 0, 0), (0, 0, 0), (1, 0, 0)))
    assert loop_mass(l, 3) == Fraction(2, 4) / 6 ** 4
    assert len(l.rotations()) == 2


def test_based_loop_must_close():
    with pytest.raises(DomainError):
        BasedLoop(((0, 0), (2, 0)))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_enumeration_matches_dp_small(d):
    L = enumerate_loops_through((0,) * d, 6, d)
    T = mass_table(Box((0,) * d, 0), 6, d)
    assert sum(m for _, m in L) == T.total_visit_mass()


def test_return_counts_d1():
    # closed walks of length 2k in Z: binomial(2k, k)
    rc = return_counts(8, 1)
    assert [int(rc[n]) for n in (0, 2, 4, 6, 8)] == [1, 2, 6, 20, 70]


def test_enumeration_guard():
    with pytest.raises(ResourceError):
        enumerate_loops_through((0, 0, 0), 40, 3)


def test_return_probs_match_counts():
    p = return_probs(6, 3)
    rc = return_counts(6, 3)
    for n in range(7):
        assert p[n] == pytest.approx(int(rc[n]) / 6.0 ** n, rel=1e-14)


def test_soup_batch_reproducible():
    cfg = SoupConfig(alpha=0.7, window=Box((0, 0, 0), 1), n_max=6, seed=3)
    a = sample_batch(cfg, 500, stream(3, 0))
    b = sample_batch(cfg, 500, stream(3, 0))
    assert np.array_equal(a.verts, b.verts) and np.array_equal(a.loop_rep, b.loop_rep)


def test_soup_loops_are_closed_and_meet_window():
    W = Box((0, 0, 0), 1)
    cfg = SoupConfig(alpha=1.0, window=W, n_max=8, seed=1)
    b = sample_batch(cfg, 200, stream(1, 0), mode="condition")
    assert np.all(b.meets(W.points()))
    for m in range(min(b.n_loops, 200)):
        v = b.verts[b.offsets[m]:b.offsets[m + 1]]
        steps = np.abs(np.diff(np.vstack([v, v[:1]]), axis=0)).sum(axis=1)
        assert np.all(steps == 1)


def test_direct_and_thin_agree_on_mean_local_time():
    W = Box((0, 0, 0), 1)
    cfg = SoupConfig(alpha=1.0, window=W, n_max=6, seed=4)
    reps = 20000
    a = sample_batch(cfg, reps, stream(4, 0), mode="condition").local_times(W)
    b = sample_batch(cfg, reps, stream(4, 1), mode="thin").local_times(W)
    se = np.sqrt((a.var(axis=0) + b.var(axis=0)) / reps)
    z = np.abs(a.mean(axis=0) - b.mean(axis=0)) / se
    assert z.max() < 4.5


def test_tail_bound_decreases():
    W = Box((0, 0, 0), 0)
    t = [tail_mass_bound(SoupConfig(alpha=1.0, window=W, n_max=n)) for n in (4, 8, 16)]
    assert t[0] > t[1] > t[2] > 0


def test_sample_dump(tmp_path):
    cfg = SoupConfig(alpha=1.0, window=Box((0, 0, 0), 0), n_max=4, seed=0)
    b = sample_batch(cfg, 3, stream(0, 0))
    b.sample(0).dump_jsonl(tmp_path / "s.jsonl")
    assert (tmp_path / "s.jsonl").read_text().count("\n") >= 1


def test_loop_class_contains_rotations():
    l = Loop(BasedLoop(((0, 0), (1, 0), (1, 1), (0, 1))))
    assert l.length == 4
    assert l.visits((1, 1)) == 1


def test_vertex_domination_bound():
    from loopsoup.soup import domination_check
    r = domination_check(1.5, 6, 5000, stream(6, 0))
    assert r["ok"] and r["vacancy"] < r["bound"]
