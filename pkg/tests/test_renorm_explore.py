import numpy as np
import pytest

from loopsoup.errors import ConfigurationError, DomainError, ResourceError
from loopsoup.explore import (explore_run, face_points, full_oracle, outward, set_oracle, surgery_paths,
                              surgery_tunnel, tunnel_properties)
from loopsoup.lattice import Box, BoxGrid
from loopsoup.renorm import (Frame, RenormScales, bad_star_component, cascading_eval, classify_box,
                             embeddings_count_and_separation, frame_connectivity, frame_membership,
                             good_bad_field, induction_ledger_run, lambda_bound, lambda_count, shell_count)
from loopsoup.rng import stream


def _field(R, d=3):
    W = Box((0,) * d, R)
    return W, np.zeros(len(W), dtype=np.int64)


def test_frame_is_connected_small():
    r = frame_connectivity(3)
    assert r["connected"] and r["pairs_connected"]


def test_frame_membership_matches_points():
    fr = Frame((0, 0, 0), 4)
    pts = fr.points()
    assert all(frame_membership(tuple(p), fr) for p in pts[:50])
    assert not frame_membership((0, 0, 0), fr)


def test_good_box_clear():
    W, v = _field(3)
    assert classify_box((0, 0, 0), (W, v), 3) == "good"


def test_bad_box_frame_hit():
    W, v = _field(3)
    fr = Frame((0, 0, 0), 3)
    v[BoxGrid(W).index(fr.points()[:1])[0]] = 1
    assert classify_box((0, 0, 0), (W, v), 3) == "bad"


def test_boundary_sum_threshold():
    R = 4
    W, v = _field(R)
    pts = W.points()
    fr = Frame((0, 0, 0), R)
    face = (np.max(np.abs(pts), axis=1) == R) & ~fr.contains(pts)
    idx = np.flatnonzero(face)[0]
    v[idx] = R ** 2
    assert classify_box((0, 0, 0), (W, v), R) == "good"
    v[idx] = R ** 2 + 1
    assert classify_box((0, 0, 0), (W, v), R) == "bad"
    assert classify_box((0, 0, 0), (W, v), R, threshold=100) == "good"


def test_field_must_cover_cube():
    W, v = _field(2)
    with pytest.raises(DomainError):
        classify_box((0, 0, 0), (W, v), 3)


def test_bad_star_component_diagonal():
    R = 3
    L0 = 2 * R + 1
    W = Box((0, 0), 3 * L0 + R)
    v = np.zeros(len(W), dtype=np.int64)
    pts = W.points()
    for c in [(0, 0), (L0, L0)]:
        fr = Frame(c, R)
        v[np.flatnonzero(np.all(pts == fr.points()[0], axis=1))] = 1
    gb = good_bad_field((W, v), R)
    comp, reach = bad_star_component(gb, (0, 0))
    assert len(comp) == 2 and reach == 1
    assert len(bad_star_component(gb, (L0, 0))[0]) == 0


def test_shell_count():
    assert shell_count(1, 3) == 26
    assert shell_count(6, 3) == 13 ** 3 - 11 ** 3


def test_lambda_small_exhaustive():
    assert lambda_count(2, 6, 1, enumerate_=True) == lambda_count(2, 6, 1, enumerate_=False) == 64
    r = embeddings_count_and_separation(1, 6, 2)
    assert r["count"] == 4608 and r["within_bound"] and r["separation_failures"] == 0


def test_lambda_guard():
    with pytest.raises(ResourceError):
        embeddings_count_and_separation(2, 6, 3, mode="exhaustive")


def test_lambda_bound_orders():
    b1, b2 = lambda_bound(1, 6, 3)
    assert lambda_count(1, 6, 3, enumerate_=False) <= b1 <= b2


def test_sampled_separation():
    r = embeddings_count_and_separation(2, 10, 3, "sampled", 2000, stream(0, 0))
    assert r["separation_failures"] == 0


def test_cascading_hand_cases():
    sc = RenormScales(l0=4, r0=1, theta=2)
    assert cascading_eval(lambda p: p in {(0,), (3,)}, sc, (0,), 1)
    assert not cascading_eval(lambda p: p in {(0,), (1,)}, sc, (0,), 1)
    assert not cascading_eval(lambda p: p == (2,), sc, (0,), 1)
    with pytest.raises(DomainError):
        cascading_eval(lambda p: True, sc, (1,), 1)


def test_scales_reject_theta():
    with pytest.raises(ConfigurationError):
        RenormScales(4, 20, 1.0)


def test_ledger_pass_and_config_error():
    L = induction_ledger_run(0.4, 0.5, 0.5, 1.0, 0.9, 2.0, 4, 20)
    assert L.verdict == "PASS" and L.delta_ok and L.sum_r < 1
    with pytest.raises(ConfigurationError):
        induction_ledger_run(0.4, 0.5, 0.5, 1.0, 0.3, 2.0, 4, 20)


def test_ledger_fails_small_r0():
    L = induction_ledger_run(0.4, 0.5, 0.5, 1.0, 0.9, 2.0, 4, 1)
    assert L.verdict != "PASS"


def test_tunnel_examples():
    R = 4
    for x in face_points((0, 0, 0), R)[:10]:
        t, q = surgery_tunnel((0, 0, 0), tuple(x), R)
        assert tuple(t[0]) == tuple(x)
        tp = tunnel_properties((0, 0, 0), tuple(x), R)
        assert tp["hits_frame"] and tp["interior_connected"] and tp["boundary_neighbor"]


def test_tunnel_rejects_bad_input():
    with pytest.raises(DomainError):
        surgery_tunnel((0, 0, 0), (0, 0, 0), 4)
    with pytest.raises(DomainError):
        surgery_tunnel((0, 0, 0), (0, 0, 3), 3)
    with pytest.raises(DomainError):
        surgery_tunnel((0, 0, 0), (4, 4, 4), 4)


def test_surgery_adjacent_pair():
    R = 4
    F = face_points((0, 0, 0), R)
    y = outward(F[0], (0, 0, 0), R)
    plan = surgery_paths((0, 0, 0), tuple(y), [(tuple(F[1]), tuple(outward(F[1], (0, 0, 0), R)))], R)
    assert len(plan.paths[0]) == 2 and plan.boundary_visits() == 1


def test_surgery_count_guard():
    R = 4
    F = face_points((0, 0, 0), R)
    y = outward(F[0], (0, 0, 0), R)
    pairs = [(tuple(F[i]), tuple(outward(F[-i], (0, 0, 0), R))) for i in range(1, 10)]
    with pytest.raises(DomainError):
        surgery_paths((0, 0, 0), tuple(y), pairs, R)


def test_explore_full_vacant_reaches_sphere():
    st = explore_run(full_oracle, (0, 0, 0), 60, 5)
    assert st.reason == "a" and st.final_path_diameter() >= 5


def test_explore_isolated_point_stops():
    st = explore_run(set_oracle([(0, 0, 0)]), (0, 0, 0), 60, 5)
    assert st.reason == "b" and st.tau == 0


def test_explore_trace_dump(tmp_path):
    st = explore_run(full_oracle, (0, 0, 0), 60, 5)
    st.dump_jsonl(tmp_path / "t.jsonl")
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == len(st.cubes) + 1


def test_local_connect_without_loops():
    from loopsoup.explore import local_connect_statistic
    r = local_connect_statistic((0, 0, 0), (5, 0, 0), 0.0, 4, 10)
    assert r.n == 10 and r.mean == 1.0
