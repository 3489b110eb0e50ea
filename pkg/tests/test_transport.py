import math
from itertools import permutations

import numpy as np
import pytest

from kacchain import streams
from kacchain import transport as tr
from kacchain.model import torus_delta


def _equal(points, torus_first=False):
    n = len(points)
    return tr.DiscreteMeasure(np.asarray(points, float), np.full(n, 1.0 / n),
                              torus_first=torus_first)


def _rand_boxed(rng, eps_inv, per_box, d=1, scale=1.0, shift=0.0):
    rs, zs = [], []
    for j in range(eps_inv):
        rs.append((j + 1.0 - rng.random(per_box)) / eps_inv)
        zs.append(rng.normal(size=(per_box, 2 * d)) * scale + shift)
    pts = np.concatenate([np.concatenate(rs)[:, None], np.vstack(zs)], axis=1)
    n = eps_inv * per_box
    return tr.DiscreteMeasure(pts, np.full(n, 1.0 / n), torus_first=True)


def _brute_force_w1(a, b):
    n = a.count
    dist = tr.distance_matrix(a.points, b.points, a.torus_first or b.torus_first)
    return min(sum(dist[i, p[i]] for i in range(n)) for p in
               permutations(range(n))) / n


def _quantile_w1(pa, wa, pb, wb):
    # 1-d transport cost: integral of |CDF_a - CDF_b|
    pts = np.concatenate([pa, pb])
    signs = np.concatenate([wa, -wb])
    order = np.argsort(pts, kind="stable")
    pts, signs = pts[order], signs[order]
    cdf = np.cumsum(signs)[:-1]
    return float(np.sum(np.abs(cdf) * np.diff(pts)))


def test_matching_identity_and_singletons():
    rng = streams.stream(0, "w1")
    pts = rng.normal(size=(8, 3))
    a = _equal(pts, torus_first=True)
    cost, _ = tr.w1_matching(a, a)
    assert cost == 0.0
    y = np.array([[0.9, 1.0, -2.0]])
    yp = np.array([[0.05, 0.5, -1.0]])
    cost, _ = tr.w1_matching(_equal(y, True), _equal(yp, True))
    # torus metric on the first coordinate
    expected = math.sqrt(torus_delta(0.9 - 0.05) ** 2 + 0.5**2 + 1.0**2)
    assert cost == pytest.approx(expected, rel=1e-14)


def test_matching_equals_brute_force():
    rng = streams.stream(1, "brute")
    for _ in range(20):
        a = _equal(rng.normal(size=(6, 2)))
        b = _equal(rng.normal(size=(6, 2)))
        cost, perm = tr.w1_matching(a, b)
        assert abs(cost - _brute_force_w1(a, b)) <= 1e-10
        dist = tr.distance_matrix(a.points, b.points, False)
        assert cost == pytest.approx(float(np.mean(dist[np.arange(6), perm])))


def test_matching_input_validation():
    a = _equal(np.zeros((4, 2)))
    b = _equal(np.zeros((5, 2)))
    with pytest.raises(ValueError, match="equal atom counts"):
        tr.w1_matching(a, b)
    big = _equal(np.zeros((tr.MATCHING_SIZE_CAP + 1, 1)))
    with pytest.raises(ValueError, match="box or sliced"):
        tr.w1_matching(big, big)
    unequal = tr.DiscreteMeasure(np.zeros((3, 1)), np.array([0.5, 0.25, 0.25]))
    with pytest.raises(ValueError, match="equal weights"):
        tr.w1_matching(unequal, _equal(np.zeros((3, 1))))


def test_metric_axioms_on_random_triples():
    rng = streams.stream(2, "axioms")
    for _ in range(100):
        a = _equal(rng.normal(size=(5, 2)), True)
        b = _equal(rng.normal(size=(5, 2)), True)
        c = _equal(rng.normal(size=(5, 2)), True)
        ab, _ = tr.w1_matching(a, b)
        ba, _ = tr.w1_matching(b, a)
        ac, _ = tr.w1_matching(a, c)
        cb, _ = tr.w1_matching(c, b)
        assert abs(ab - ba) <= 1e-9
        assert ab <= ac + cb + 1e-9


def test_general_matches_matching_for_equal_weights():
    rng = streams.stream(3, "gen")
    for _ in range(10):
        a = _equal(rng.normal(size=(12, 2)))
        b = _equal(rng.normal(size=(12, 2)))
        c1, _ = tr.w1_matching(a, b)
        c2, plan = tr.w1_general(a, b)
        assert abs(c1 - c2) <= 1e-10
        plan.check_marginals(a.weights, b.weights, 1e-12)


def test_general_permuted_atoms_cost_zero():
    rng = streams.stream(4, "perm")
    pts = rng.normal(size=(9, 2))
    w = rng.random(9) + 0.1
    w /= w.sum()
    order = rng.permutation(9)
    a = tr.DiscreteMeasure(pts, w)
    b = tr.DiscreteMeasure(pts[order], w[order])
    cost, _ = tr.w1_general(a, b)
    assert cost <= 1e-12


def test_general_one_dimensional_quantile_oracle():
    rng = streams.stream(5, "quant")
    for _ in range(25):
        na, nb = int(rng.integers(2, 25)), int(rng.integers(2, 25))
        pa = rng.normal(size=na)
        pb = rng.normal(size=nb)
        wa = rng.random(na) + 0.05
        wa /= wa.sum()
        wb = rng.random(nb) + 0.05
        wb /= wb.sum()
        cost, _ = tr.w1_general(tr.DiscreteMeasure(pa[:, None], wa),
                                tr.DiscreteMeasure(pb[:, None], wb))
        assert abs(cost - _quantile_w1(pa, wa, pb, wb)) <= 1e-10


def test_general_mass_mismatch_rejected():
    a = tr.DiscreteMeasure(np.zeros((2, 1)), np.array([0.5, 0.5]))
    b = tr.DiscreteMeasure(np.zeros((2, 1)), np.array([0.6, 0.5]))
    with pytest.raises(ValueError, match="infeasible"):
        tr.w1_general(a, b)


def test_box_bound_equal_measures_reduces_to_diameters():
    rng = streams.stream(6, "bb0")
    mu = _rand_boxed(rng, 4, 8)
    m_cut, n_cubes = 3.0, 4
    zn = np.linalg.norm(mu.points[:, 1:], axis=1)
    tail = 2 * (np.mean(zn > m_cut) + np.mean(zn * (zn > m_cut)))
    expected = 2.0 * math.sqrt(2.0) * m_cut / n_cubes + 2.0 / 4 + tail
    bound = tr.w1_box_bound(mu, mu, 0.25, m_cut, n_cubes)
    assert bound == pytest.approx(expected, rel=1e-12)


def test_box_bound_dominates_exact_boxwise_w1():
    rng = streams.stream(7, "bb")
    for _ in range(25):
        eps_inv = int(rng.integers(2, 5))
        per = int(rng.integers(4, 12))
        a = _rand_boxed(rng, eps_inv, per)
        b = _rand_boxed(rng, eps_inv, per, scale=float(rng.uniform(0.5, 2.0)))
        # oracle: per-box exact matching, eps-weighted
        exact = 0.0
        for j in range(eps_inv):
            sel_a = slice(j * per, (j + 1) * per)
            pa = _equal(a.points[sel_a], True)
            pb = _equal(b.points[sel_a], True)
            exact += tr.w1_matching(pa, pb)[0] / eps_inv
        m_cut, n_cubes = tr.box_bound_schedule(per, 1)
        bound = tr.w1_box_bound(a, b, 1.0 / eps_inv, m_cut, n_cubes)
        assert bound >= exact - 1e-12


def test_box_bound_monotone_in_cubes_on_shared_atoms():
    # same atom set in permuted order: cube-mass differences vanish at every
    # resolution, so the bound decreases as the cubes refine and converges
    # to the diameter terms
    rng = streams.stream(8, "mono")
    a = _rand_boxed(rng, 4, 16)
    order = np.concatenate([4 * 16 - 1 - np.arange(16)[::-1] - 16 * j
                            for j in range(4)])
    b = tr.DiscreteMeasure(a.points[order], a.weights, torus_first=True)
    m_cut = float(np.max(np.linalg.norm(a.points[:, 1:], axis=1))) + 1.0
    bounds = [tr.w1_box_bound(a, b, 0.25, m_cut, n) for n in (1, 2, 4, 8, 16, 64)]
    assert all(bounds[i + 1] <= bounds[i] + 1e-12 for i in range(len(bounds) - 1))
    # tail vanishes (m_cut beyond every atom); limit is 2 eps as cubes refine
    assert bounds[-1] <= 2 * 0.25 + 2 * math.sqrt(2) * m_cut / 64 + 1e-12


def test_box_bound_validation():
    rng = streams.stream(9, "bbv")
    a = _rand_boxed(rng, 4, 6)
    b = _rand_boxed(rng, 2, 12)
    with pytest.raises(ValueError):
        tr.w1_box_bound(a, b, 0.25, 2.0, 2)  # box masses differ
    with pytest.raises(ValueError):
        tr.w1_box_bound(a, a, 0.3, 2.0, 2)  # 1/eps not an integer


def test_sliced_identity_and_single_box():
    rng = streams.stream(10, "sl")
    a = _rand_boxed(rng, 4, 8)
    assert tr.sliced_w1(a, a, 4) == 0.0
    b = _rand_boxed(rng, 1, 24)
    c = _rand_boxed(rng, 1, 24)
    assert tr.sliced_w1(b, c, 1) == pytest.approx(tr.w1_matching(b, c)[0],
                                                  rel=1e-12)


def test_sliced_dominates_plain_w1():
    rng = streams.stream(11, "sl2")
    for _ in range(25):
        eps_inv = int(rng.integers(2, 5))
        per = int(rng.integers(4, 10))
        a = _rand_boxed(rng, eps_inv, per)
        b = _rand_boxed(rng, eps_inv, per,
                        shift=float(rng.uniform(-0.5, 0.5)))
        s = tr.sliced_w1(a, b, eps_inv)
        w, _ = tr.w1_matching(a, b)
        assert s >= w - 1e-12


def test_sliced_replication_path_matches_lp():
    # unequal counts with commensurate sizes: replication reduction equals
    # the transportation LP
    rng = streams.stream(12, "rep")
    a = _rand_boxed(rng, 2, 4)
    b = _rand_boxed(rng, 2, 12)
    got = tr.sliced_w1(a, b, 2)
    exact = 0.0
    for j in range(2):
        pa = a.points[j * 4:(j + 1) * 4]
        pb = b.points[j * 12:(j + 1) * 12]
        cost, _ = tr.w1_general(
            tr.DiscreteMeasure(pa, np.full(4, 0.25), True),
            tr.DiscreteMeasure(pb, np.full(12, 1 / 12), True))
        exact += cost / 2
    assert got == pytest.approx(exact, rel=1e-10)


def test_sliced_box_mass_mismatch_rejected():
    rng = streams.stream(13, "slv")
    a = _rand_boxed(rng, 2, 6)
    pts = a.points.copy()
    pts[:, 0] = 0.25  # all in the first box
    b = tr.DiscreteMeasure(pts, a.weights, True)
    with pytest.raises(ValueError):
        tr.sliced_w1(a, b, 2)


def test_sliced_paths_sup_metric():
    rng = streams.stream(14, "paths")
    m, s = 12, 5
    r1 = 1.0 - rng.random(m)
    traj1 = rng.normal(size=(m, s, 2))
    # identical families in permuted order have distance zero
    order = rng.permutation(m)
    assert tr.sliced_w1_paths(r1, traj1, r1[order], traj1[order], 1) <= 1e-12
    # constant-in-time paths reduce to the marginal sliced distance
    z1 = rng.normal(size=(m, 2))
    z2 = rng.normal(size=(m, 2))
    t1 = np.repeat(z1[:, None, :], s, axis=1)
    t2 = np.repeat(z2[:, None, :], s, axis=1)
    got = tr.sliced_w1_paths(r1, t1, r1, t2, 1)
    a = tr.DiscreteMeasure(np.concatenate([r1[:, None], z1], axis=1),
                           np.full(m, 1 / m), True)
    b = tr.DiscreteMeasure(np.concatenate([r1[:, None], z2], axis=1),
                           np.full(m, 1 / m), True)
    assert got == pytest.approx(tr.w1_matching(a, b)[0], rel=1e-12)


# -- neighbour coupling map --------------------------------------------------


def _random_lag_weights(rng, k_max):
    raw = np.sort(rng.random(k_max + 1))[::-1] + 0.05
    gam = np.concatenate([raw[:0:-1], raw])
    return gam / gam.sum()


def test_pi_map_identity_coupling():
    gam = np.array([0.2, 0.6, 0.2])
    vels = np.array([[1.0], [2.0], [3.0]])
    target = tr.DiscreteMeasure(vels, gam)
    pm = tr.build_pi_map(gam, vels, target, 16)
    assert pm.cost <= 1e-14
    # Pi(r) equals the cell's own velocity on each neighbour cell
    assert pm.evaluate([0.0])[0, 0] == 2.0
    assert pm.evaluate([1.0 / 16])[0, 0] == 3.0
    assert pm.evaluate([-1.0 / 16])[0, 0] == 1.0


def test_pi_map_cost_identity_and_pushforward():
    rng = streams.stream(15, "pi")
    for _ in range(30):
        k_max = int(rng.integers(1, 6))
        gam = _random_lag_weights(rng, k_max)
        d = int(rng.integers(1, 4))
        vels = rng.normal(size=(2 * k_max + 1, d))
        mt = int(rng.integers(2, 11))
        tw = rng.random(mt) + 0.05
        tw /= tw.sum()
        target = tr.DiscreteMeasure(rng.normal(size=(mt, d)), tw)
        pm = tr.build_pi_map(gam, vels, target, 64)
        assert abs(pm.cost_integral() - pm.cost) <= 1e-10
        assert np.max(np.abs(pm.pushforward_weights() - target.weights)) <= 1e-12


def test_pi_map_pushforward_via_dense_evaluation():
    # empirical check of the pushforward: evaluate Pi on a dense grid of
    # each cell and accumulate sigma-weighted masses per target atom
    rng = streams.stream(16, "pidense")
    k_max = 2
    gam = _random_lag_weights(rng, k_max)
    vels = rng.normal(size=(5, 1))
    tw = np.array([0.3, 0.45, 0.25])
    target = tr.DiscreteMeasure(np.array([[0.0], [1.0], [-1.0]]), tw)
    n = 32
    pm = tr.build_pi_map(gam, vels, target, n)
    grid_per_cell = 4000
    acc = np.zeros(3)
    for lag, g in zip(pm.lags, pm.gamma):
        offs = (np.arange(grid_per_cell) + 0.5) / grid_per_cell - 0.5
        rr = (lag + offs) / n
        vals = pm.evaluate(rr)
        for b in range(3):
            hits = np.all(np.abs(vals - target.points[b]) < 1e-12, axis=1)
            acc[b] += g * np.mean(hits)
    assert np.max(np.abs(acc - tw)) < 2e-3  # grid resolution error only


def test_pi_map_validation():
    gam = np.array([0.25, 0.5, 0.25])
    vels = np.zeros((3, 1))
    bad_target = tr.DiscreteMeasure(np.zeros((2, 1)), np.array([0.7, 0.7]))
    with pytest.raises(ValueError, match="mass"):
        tr.build_pi_map(gam, vels, bad_target, 8)
    with pytest.raises(ValueError, match="odd"):
        tr.build_pi_map(np.array([0.5, 0.5]), np.zeros((2, 1)),
                        tr.DiscreteMeasure(np.zeros((1, 1)), np.array([1.0])), 8)


def test_measure_csv_roundtrip(tmp_path):
    rng = streams.stream(17, "csv")
    r = 1.0 - rng.random(20)
    pts = np.concatenate([r[:, None], rng.normal(size=(20, 4))], axis=1)
    m = tr.DiscreteMeasure(pts, np.full(20, 0.05), torus_first=True)
    path = tmp_path / "measure.csv"
    tr.write_measure_csv(path, m)
    back = tr.read_measure_csv(path)
    assert np.array_equal(back.points, m.points)
    assert np.array_equal(back.weights, m.weights)


def test_box_bound_schedule_rate_knobs():
    # cut radius (n eps)^(1/(4(d+1))) and floor of its square, per the
    # law-of-large-numbers estimator's optimization
    m_cut, n_cubes = tr.box_bound_schedule(256, 1)
    assert m_cut == pytest.approx(256.0 ** (1.0 / 8.0))
    assert n_cubes == math.floor(m_cut**2)
    m_cut2, n_cubes2 = tr.box_bound_schedule(4096, 2)
    assert m_cut2 == pytest.approx(4096.0 ** (1.0 / 12.0))
    assert n_cubes2 == math.floor(m_cut2**2)
