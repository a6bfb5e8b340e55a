import numpy as np
import pytest

from mtloc.geometry import bistatic_ranges
from mtloc.scene import GroundTruth, Region, Scene, SceneConfig, ground_truth, sample_scene
from mtloc.signal import MpcSet, SignalParams, generate_mpcs, merge_unresolvable


def clear_scene(T=2):
    return Scene(Region(), txs=[(-9, 9), (9, 9), (0, -9)], rxs=[(-9, -9), (9, -9), (0, 9)],
                 targets=[(1.0, 2.0), (-3.0, -1.5)][:T])


def truth_for(scene, k=None):
    I, T = scene.n_trps, len(scene.targets)
    k = np.ones((I, T), np.uint8) if k is None else k
    z = np.zeros((I, 0, T), np.uint8)
    return GroundTruth(k, np.ones((scene.m_tx, T)), np.ones((scene.m_rx, T)), z, z)


class TestMerge:
    def test_example(self):
        assert merge_unresolvable([10.000, 10.015, 10.050], 0.02) == [10.000, 10.050]

    def test_empty(self):
        assert merge_unresolvable([], 0.02) == []

    def test_resolvable_unchanged(self):
        assert merge_unresolvable([1.0, 1.5, 3.0], 0.02) == [1.0, 1.5, 3.0]

    def test_greedy_from_left(self):
        # 1.03 is within reach of 1.015 but not of the retained 1.0
        assert merge_unresolvable([1.0, 1.015, 1.03], 0.02) == [1.0, 1.03]


class TestGenerate:
    def test_exact_dps(self):
        sc = clear_scene()
        mp = generate_mpcs(sc, truth_for(sc), SignalParams(sigma=1e-9, nu=0.0), np.random.default_rng(0))
        assert mp.counts == (2,) * 9
        for i, t in enumerate(sc.trps()):
            expect = np.sort(bistatic_ranges(np.asarray(t.tx), np.asarray(t.rx), sc.targets))
            assert np.allclose(mp.ranges[i], expect, atol=1e-6)

    def test_all_blocked_empty(self):
        sc = clear_scene()
        k = np.zeros((9, 2), np.uint8)
        mp = generate_mpcs(sc, truth_for(sc, k), SignalParams(nu=0.0), np.random.default_rng(1))
        assert mp.counts == (0,) * 9

    def test_dp_noise_moments(self):
        sc = clear_scene(T=1)
        t = sc.trps()[0]
        r0 = bistatic_ranges(np.asarray(t.tx), np.asarray(t.rx), sc.targets)[0]
        rng = np.random.default_rng(2)
        res = np.array([generate_mpcs(sc, truth_for(sc), SignalParams(nu=0.0), rng).ranges[0][0] - r0
                        for _ in range(10_000)])
        assert abs(res.mean()) < 3 * 0.01 / 100
        assert res.std() == pytest.approx(0.01, rel=0.03)

    def test_fixed_noise_count(self):
        sc = clear_scene(T=1)
        k = np.zeros((9, 1), np.uint8)
        mp = generate_mpcs(sc, truth_for(sc, k), SignalParams(n_noise=3, resolution=0.0), np.random.default_rng(3))
        assert mp.counts == (3,) * 9
        assert all(lab.kind == "Noise" for row in mp.labels for lab in row)

    def test_sorted_resolvable_and_in_range(self):
        rng = np.random.default_rng(4)
        cfg = SceneConfig()
        params = SignalParams(nu=3.0)
        for _ in range(100):
            sc = sample_scene(cfg, rng)
            mp = generate_mpcs(sc, ground_truth(sc, rng), params, rng)
            for r in mp.ranges:
                assert np.all(np.diff(r) > params.threshold)
                assert np.all((r >= 0) & (r <= sc.r_obs))

    def test_labels_partition_pre_merge_peaks(self):
        rng = np.random.default_rng(5)
        sc = sample_scene(SceneConfig(lam=0.02), rng)
        gt = ground_truth(sc, rng, p_ip=1.0)
        mp = generate_mpcs(sc, gt, SignalParams(nu=2.0, resolution=0.5), rng)
        n_dp = sum(1 for row in mp.labels for lab in row if lab.kind == "DP") + \
            sum(1 for row in mp.merged for m in row for lab in m if lab.kind == "DP")
        assert n_dp == gt.k.sum()
        n_ip = sum(1 for row in mp.labels for lab in row if lab.kind.startswith("IP")) + \
            sum(1 for row in mp.merged for m in row for lab in m if lab.kind.startswith("IP"))
        assert n_ip == gt.g.sum() + gt.h.sum()

    def test_dp_index(self):
        sc = clear_scene()
        mp = generate_mpcs(sc, truth_for(sc), SignalParams(nu=0.0), np.random.default_rng(6))
        for i in range(9):
            for t in range(2):
                j = mp.dp_index(i, t)
                assert mp.labels[i][j].target == t

    def test_serialization(self):
        sc = clear_scene()
        mp = generate_mpcs(sc, truth_for(sc), SignalParams(nu=1.0), np.random.default_rng(7))
        back = MpcSet.from_dict(mp.to_dict())
        assert all(np.array_equal(a, b) for a, b in zip(mp.ranges, back.ranges))
        assert back.labels == mp.labels
        bare = mp.to_dict(with_labels=False)
        assert "labels" not in bare
        assert MpcSet.from_dict(bare).counts == mp.counts

    def test_seeded_determinism(self):
        sc = clear_scene()
        a = generate_mpcs(sc, truth_for(sc), SignalParams(), np.random.default_rng(8))
        b = generate_mpcs(sc, truth_for(sc), SignalParams(), np.random.default_rng(8))
        assert a.dumps() == b.dumps()
