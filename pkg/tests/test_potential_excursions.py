from dataclasses import replace

import numpy as np
import pytest

from loopsoup.errors import ConfigurationError, DomainError
from loopsoup.excursions import (batch_excursion_counts, claim1_check, decompose, endpoint_intensity,
                                 excursion_count, excursion_kernels, excursion_soup_batch, level_intensities,
                                 representatives_LAB, sample_tuples)
from loopsoup.lattice import Box, sphere
from loopsoup.loops import canonicalize
from loopsoup.potential import (BridgeSampler, KilledDomain, capacity, equilibrium_measure, green, green_column,
                                hitting_field, hitting_kernel, hitting_prob, lattice_green_constant)
from loopsoup.rng import stream


@pytest.fixture(scope="module")
def dom():
    return KilledDomain(Box((0, 0, 0), 8))


def test_watson_constant():
    assert lattice_green_constant(3) == pytest.approx(1.516386059151978, abs=1e-10)


def test_green_symmetry(dom):
    x, y = (1, 2, 0), (-3, 0, 1)
    assert green(dom, x, y) == pytest.approx(green(dom, y, x), abs=1e-13)


def test_last_exit_identity(dom):
    A = sphere((0, 0, 0), 1, 3)
    e = equilibrium_measure(dom, A)
    h = hitting_field(dom, A)
    ia = dom.sites(A)
    for x in [(4, 0, 0), (3, 3, -2), (0, 0, 6)]:
        g = green_column(dom, x)
        assert h[dom.site(x)] == pytest.approx(g[ia] @ e.weights, abs=1e-12)


def test_hitting_kernel_rows(dom):
    A = sphere((0, 0, 0), 1, 3)
    B = sphere((0, 0, 0), 4, 3)
    K = hitting_kernel(dom, A, B)
    h = hitting_field(dom, B)
    ia = dom.sites(A)
    assert np.allclose(K.row_sums(), h[ia], atol=1e-12)
    assert np.all(K.entries >= -1e-15)


def test_capacity_monotone(dom):
    c1 = capacity(dom, Box((0, 0, 0), 1).points())
    c2 = capacity(dom, Box((0, 0, 0), 2).points())
    assert 0 < c1 < c2


def test_hitting_prob_on_set(dom):
    A = [(0, 0, 0)]
    assert hitting_prob(dom, (0, 0, 0), A) == 1.0
    assert 0 < hitting_prob(dom, (3, 0, 0), A) < 1


def test_site_outside_raises(dom):
    with pytest.raises(DomainError):
        dom.site((20, 0, 0))


def test_bridge_ends_at_target(dom):
    A = sphere((0, 0, 0), 1, 3)
    bs = BridgeSampler(dom, A)
    ia = dom.sites(A)
    start = dom.site((5, 0, 0))
    targets = np.full(50, ia[3])
    flat, off = bs.sample_sites(np.full(50, start), targets, stream(0, 0))
    for i in range(50):
        p = dom.grid.coords(flat[off[i]:off[i + 1]])
        assert tuple(p[-1]) == tuple(dom.grid.coords(ia[3:4])[0])
        assert not np.any(np.all(p[:-1][:, None, :] == A[None], axis=2))
        assert np.all(np.abs(np.diff(p, axis=0)).sum(axis=1) == 1)


def test_bridge_law_two_paths():
    # in d=1 from 2 to {0}: the bridge always walks 2 -> 1 -> 0 at the first visit to 0
    d1 = KilledDomain(Box((0,), 5))
    bs = BridgeSampler(d1, [(0,)])
    flat, off = bs.sample_sites(np.full(20, d1.site((2,))), np.full(20, d1.site((0,))), stream(1, 0))
    for i in range(20):
        p = d1.grid.coords(flat[off[i]:off[i + 1]])[:, 0]
        assert p[-1] == 0 and np.all(p[:-1] > 0)


A1 = [(0, 0)]
B1 = [(2, 0)]


def test_claim1_aperiodic_and_periodic():
    l = canonicalize(((0, 0), (1, 0), (2, 0), (1, 0)))
    r = claim1_check(l, A1, B1, 2)
    assert r["equal"] and r["k"] == 1
    p = canonicalize(((0, 0), (1, 0), (2, 0), (1, 0)) * 2)
    r = claim1_check(p, A1, B1, 2)
    assert r["equal"] and r["periodic"] and r["k"] == 2


def test_claim1_skip_when_disjoint():
    l = canonicalize(((5, 5), (6, 5)))
    assert claim1_check(l, A1, B1, 2)["status"] == "skip"


def test_decompose_roundtrip():
    v = ((0, 0), (1, 0), (2, 0), (3, 0), (2, 0), (1, 0), (0, 0), (0, 1), (1, 1), (2, 1), (2, 0), (1, 0))
    v = v[:6] + ((0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (2, 0), (1, 0))
    reps = representatives_LAB(v, A1, B1)
    for r in reps:
        dec = decompose(r, A1, B1)
        assert dec.reconstruct() == r.vertices
        assert dec.k == excursion_count(v, A1, B1) == 2


def test_overlapping_sets_rejected():
    with pytest.raises(DomainError):
        representatives_LAB(((0, 0), (1, 0)), A1, A1)


@pytest.fixture(scope="module")
def kern():
    d = KilledDomain(Box((0, 0, 0), 4))
    return excursion_kernels(d, sphere((0, 0, 0), 1, 3), sphere((0, 0, 0), 3, 3))


def test_level_intensity_is_sum_over_tuples(kern):
    lam, _ = level_intensities(kern, 0.5)
    tot = sum(endpoint_intensity(1, [(a, b)], kern, 0.5) for a in kern.A.tolist() for b in kern.B.tolist())
    assert tot == pytest.approx(lam[0], rel=1e-10)
    assert lam[1] == pytest.approx(0.5 / 2 * np.trace(kern.M @ kern.M), rel=1e-10)


def test_tuple_sampler_first_marginal(kern):
    a, b = sample_tuples(kern, 2, 40000, stream(2, 0))
    M2 = kern.M @ kern.M
    p = np.diag(M2) / np.trace(M2)
    emp = np.bincount(a[:, 0], minlength=len(p)) / len(a)
    assert np.max(np.abs(emp - p)) < 5 * np.sqrt(p.max() / len(a))


def test_subcritical_required(kern):
    hot = replace(kern, H_AB=kern.H_AB * 10.0)
    assert hot.spectral_radius > 1
    with pytest.raises(ConfigurationError):
        level_intensities(hot, 1.0)


def test_excursion_batch_loops_are_closed(kern):
    b = excursion_soup_batch(0.5, kern, 500, stream(3, 0))
    A = sphere((0, 0, 0), 1, 3)
    B = sphere((0, 0, 0), 3, 3)
    assert np.all(b.meets(A)) and np.all(b.meets(B))
    ks = batch_excursion_counts(b, A, B)
    for m in range(b.n_loops):
        v = b.verts[b.offsets[m]:b.offsets[m + 1]]
        steps = np.abs(np.diff(np.vstack([v, v[:1]]), axis=0)).sum(axis=1)
        assert np.all(steps == 1)
        assert ks[m] == excursion_count(tuple(map(tuple, v.tolist())), A, B) >= 1


def test_single_replicate_loops_are_representatives(kern):
    from loopsoup.excursions import sample_soup_via_excursions
    A, B = kern.A, kern.B
    based, classes = sample_soup_via_excursions(2.0, A, B, kern.domain, stream(4, 0), K=kern)
    assert len(based) == len(classes)
    for b, c in zip(based, classes):
        assert b in representatives_LAB(c, A, B)
