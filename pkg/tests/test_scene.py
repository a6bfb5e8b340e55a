import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtloc.blocking import is_consistent
from mtloc.scene import (
    FIG2_RXS,
    FIG2_TARGETS,
    FIG2_TXS,
    PlacementFailure,
    Region,
    Scene,
    SceneConfig,
    ground_truth,
    ground_truth_blocking,
    ground_truth_ips,
    los,
    sample_scene,
    trp_nodes,
    trp_of,
)

coord = st.floats(-10, 10, allow_nan=False)


class TestIndexing:
    @pytest.mark.parametrize("i,expect", [(1, (1, 1)), (5, (2, 2)), (9, (3, 3)), (2, (2, 1)), (4, (1, 2))])
    def test_trp_of(self, i, expect):
        assert trp_of(i, 3) == expect

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            trp_of(0, 3)

    def test_zero_based_agrees(self):
        for i in range(12):
            a, b = trp_nodes(i, 4)
            assert (a + 1, b + 1) == trp_of(i + 1, 4)


class TestLos:
    def test_no_scatterers(self):
        assert los((0, 0), (5, 0), np.zeros((0, 2)), L=5)

    def test_midpoint_blocks(self):
        assert not los((0, 0), (10, 0), [(5, 0)], L=5)

    def test_boundary_exclusive(self):
        assert los((0, 0), (10, 0), [(5, 2.5 + 1e-9)], L=5)
        assert not los((0, 0), (10, 0), [(5, 2.5 - 1e-9)], L=5)

    def test_rectangle_not_stadium(self):
        # beyond the segment end but within L/2 of the endpoint: outside the rectangle
        assert los((0, 0), (10, 0), [(11, 0)], L=5)

    @given(st.tuples(coord, coord), st.tuples(coord, coord), st.lists(st.tuples(coord, coord), max_size=5))
    def test_symmetric(self, p, q, cs):
        cs = np.array(cs, float).reshape(-1, 2)
        assert los(p, q, cs, L=3) == los(q, p, cs, L=3)

    def test_pair_frequency_matches_exponential(self):
        lam, L, d = 0.0075, 5.0, 10.0
        region = Region(-20, 20, -20, 20)
        rng = np.random.default_rng(7)
        n = 10_000
        hits = sum(los((-5, 0), (5, 0), region.uniform(rng, rng.poisson(lam * region.area)), L=L)
                   for _ in range(n))
        p = math.exp(-lam * L * d)
        assert abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


class TestSampling:
    def test_no_scatterers_when_lambda_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_scene(SceneConfig(lam=0.0), rng).n_scatterers == 0

    def test_mean_scatterer_count(self):
        rng = np.random.default_rng(1)
        cfg = SceneConfig(txs=FIG2_TXS, rxs=FIG2_RXS, targets=FIG2_TARGETS)
        counts = [sample_scene(cfg, rng).n_scatterers for _ in range(4000)]
        assert np.mean(counts) == pytest.approx(3.0, abs=3 * math.sqrt(3.0 / 4000))

    def test_nodes_outside_scatterers(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            sc = sample_scene(SceneConfig(lam=0.02), rng)
            pts = np.vstack([sc.txs, sc.rxs, sc.targets])
            assert np.all(sc.region.contains(pts))
            if sc.n_scatterers:
                d = np.hypot(*(pts[:, None, :] - sc.centers[None]).transpose(2, 0, 1))
                assert np.all(d >= sc.diameters / 2)

    def test_placement_failure(self):
        cfg = SceneConfig(region=Region(0, 1, 0, 1), lam=400.0, L=5.0)
        with pytest.raises(PlacementFailure):
            sample_scene(cfg, np.random.default_rng(0))

    def test_r_obs_default(self):
        sc = sample_scene(SceneConfig(lam=0.0), np.random.default_rng(0))
        assert sc.r_obs == pytest.approx(2 * math.hypot(20, 20))

    def test_segment_placement(self):
        cfg = SceneConfig(placement="segment", L=0.001, p_los=0.9, txs=FIG2_TXS, rxs=FIG2_RXS, targets=FIG2_TARGETS)
        rng = np.random.default_rng(3)
        blocked = []
        for _ in range(500):
            sc = sample_scene(cfg, rng)
            _, v, w = ground_truth_blocking(sc)
            blocked.append(1 - np.concatenate([v.ravel(), w.ravel()]).mean())
        assert np.mean(blocked) == pytest.approx(0.1, abs=0.01)

    def test_round_trip(self):
        sc = sample_scene(SceneConfig(), np.random.default_rng(5))
        back = Scene.loads(sc.dumps())
        for name in ("txs", "rxs", "targets", "centers", "diameters"):
            assert np.array_equal(getattr(sc, name), getattr(back, name))
        assert back.r_obs == sc.r_obs and back.region == sc.region


class TestGroundTruth:
    def test_clear_scene_all_ones(self):
        sc = sample_scene(SceneConfig(lam=0.0), np.random.default_rng(0))
        k, v, w = ground_truth_blocking(sc)
        assert k.all() and v.all() and w.all()

    def test_single_blocker_hits_one_tx(self):
        sc = Scene(Region(), txs=[(-8, 0), (0, 8), (8, 8)], rxs=[(0, -8), (8, -8), (-8, -8)],
                   targets=[(0, 0)], centers=[(-4, 0)], diameters=[1.0])
        k, v, w = ground_truth_blocking(sc)
        col = k[:, 0]
        for i in range(9):
            a, _ = trp_nodes(i, 3)
            assert col[i] == (0 if a == 0 else 1)

    def test_columns_are_consistent(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            sc = sample_scene(SceneConfig(), rng)
            k, _, _ = ground_truth_blocking(sc)
            for t in range(k.shape[1]):
                assert is_consistent(k[:, t], sc.m_tx, sc.m_rx) is not None

    def test_no_ip_policy(self):
        sc = sample_scene(SceneConfig(lam=0.02), np.random.default_rng(4))
        g, h = ground_truth_ips(sc, "none")
        assert not g.any() and not h.any()

    def test_all_ips_without_blocking(self):
        sc = Scene(Region(), txs=[(-9, 9)], rxs=[(9, 9)], targets=[(0, 0)], centers=[(0, -9)], diameters=[0.01])
        g, h = ground_truth_ips(sc, "geometric", np.random.default_rng(0), p_ip=1.0)
        assert g.all() and h.all()

    def test_ip_density(self):
        sc = Scene(Region(), txs=[(-9, 9), (-9, -9)], rxs=[(9, 9), (9, -9)], targets=[(0, 0), (3, 1)],
                   centers=[(0, -5), (5, 5)], diameters=[0.01, 0.01])
        rng = np.random.default_rng(9)
        dens = np.mean([ground_truth_ips(sc, "geometric", rng, p_ip=0.5)[0].mean() for _ in range(2000)])
        assert dens == pytest.approx(0.5, abs=0.02)

    def test_truth_bundle(self):
        sc = sample_scene(SceneConfig(), np.random.default_rng(6))
        gt = ground_truth(sc, np.random.default_rng(6))
        assert gt.k.shape == (9, 2) and gt.g.shape == (9, sc.n_scatterers, 2)
