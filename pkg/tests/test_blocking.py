import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtloc.blocking import (
    EmpiricalModel,
    ErrorRates,
    GridStats,
    IcbModel,
    InconsistentVector,
    MahalanobisModel,
    SingularCovariance,
    consistent_set,
    consistent_set_size,
    corridor_union_area,
    empirical_pmf,
    grid_cells,
    grid_precompute,
    hamming_neighbors_consistent,
    is_consistent,
    is_partially_consistent,
    lower_bound_pmf,
    mahalanobis_score,
    neg_log,
    p_dp_icb,
    p_los_ppp,
    partial_consistent_set,
    prob_khat,
    prob_lower_bound,
    q_function,
)
from mtloc.scene import Region

TXS = np.array([(-8.0, 7.0), (-7.0, -8.0), (9.0, 1.0)])
RXS = np.array([(-9.0, -1.0), (6.0, 8.0), (7.0, -7.0)])


def all_vectors(I):
    return np.array(list(itertools.product((0, 1), repeat=I)), np.uint8)


class TestConsistency:
    def test_factorization_example(self):
        v, w = is_consistent([1, 1, 0, 1, 1, 0, 1, 1, 0], 3, 3)
        assert v.tolist() == [1, 1, 0] and w.tolist() == [1, 1, 1]

    def test_inconsistent_example(self):
        assert is_consistent([1, 1, 0, 1, 1, 1, 1, 0, 0], 3, 3) is None

    def test_all_ones_and_zero(self):
        v, w = is_consistent(np.ones(9), 3, 3)
        assert v.all() and w.all()
        v, w = is_consistent(np.zeros(9), 3, 3)
        assert not (np.kron(w, v)).any()

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            is_consistent([1, 0], 3, 3)

    @pytest.mark.parametrize("m_tx,m_rx,size", [(3, 3, 50), (1, 1, 2), (2, 1, 4)])
    def test_set_sizes(self, m_tx, m_rx, size):
        table = consistent_set(m_tx, m_rx)
        assert len(table) == size == consistent_set_size(m_tx, m_rx)

    def test_set_matches_exhaustive_scan(self):
        for m_tx, m_rx in itertools.product(range(1, 4), repeat=2):
            scan = {tuple(k) for k in all_vectors(m_tx * m_rx) if is_consistent(k, m_tx, m_rx) is not None}
            table = {tuple(r) for r in consistent_set(m_tx, m_rx)}
            assert scan == table

    def test_all_zero_first(self):
        assert not consistent_set(3, 3)[0].any()

    def test_partial_restrictions(self):
        rng = np.random.default_rng(0)
        full = consistent_set(3, 3)
        for _ in range(50):
            cols = list(rng.permutation(9)[: rng.integers(1, 9)])
            for k in full[rng.choice(len(full), 5)]:
                assert is_partially_consistent(k[cols], 3, 3, cols)
            assert len(partial_consistent_set(3, 3, cols)) <= len(full)


class TestNeighbours:
    def test_consistent_contains_itself(self):
        k = np.array([1, 1, 0, 1, 1, 0, 1, 1, 0])
        near = hamming_neighbors_consistent(k, 3, 3)
        assert any(np.array_equal(k, r) for r in near)

    def test_example_against_scan(self):
        khat = np.array([1, 1, 0, 1, 1, 1, 1, 0, 0])
        scan = {tuple(r) for r in consistent_set(3, 3) if np.count_nonzero(r != khat) <= 1}
        got = {tuple(r) for r in hamming_neighbors_consistent(khat, 3, 3)}
        assert got == scan
        assert (1, 1, 0, 1, 1, 0, 1, 1, 0) not in got

    def test_far_vector_has_no_neighbours(self):
        table = consistent_set(3, 3)
        far = [k for k in all_vectors(9) if np.min(np.count_nonzero(table != k, axis=1)) >= 2]
        assert far
        for k in far[:20]:
            assert len(hamming_neighbors_consistent(k, 3, 3)) == 0

    def test_partial_columns(self):
        cols = [4, 0, 8]
        near = hamming_neighbors_consistent([1, 0, 1], 3, 3, cols)
        part = partial_consistent_set(3, 3, cols)
        expect = {tuple(r) for r in part if np.count_nonzero(r != np.array([1, 0, 1])) <= 1}
        assert {tuple(r) for r in near} == expect


class TestErrorModel:
    def test_q_function(self):
        assert q_function(0) == pytest.approx(0.5)
        assert 2 * q_function(3) == pytest.approx(0.0026998, abs=1e-7)
        assert q_function(-1.3) == pytest.approx(1 - q_function(1.3))

    def test_error_free_identity(self):
        table = consistent_set(2, 2)
        probs = np.zeros(len(table))
        probs[-1] = 1.0
        assert prob_khat(table[-1], table, probs, ErrorRates(0, 0)) == 1.0

    def test_far_khat_is_zero(self):
        table = consistent_set(3, 3)
        probs = np.full(len(table), 1 / len(table))
        assert prob_khat([1, 0, 0, 0, 1, 0, 0, 0, 1], table, probs, ErrorRates(0.1, 0.1)) == 0.0

    def test_toy_sum(self):
        vecs = all_vectors(2)
        probs = np.array([0.1, 0.2, 0.3, 0.4])
        r01, r10 = 0.1, 0.1
        for khat in vecs:
            expect = 0.0
            for k, p in zip(vecs, probs):
                if np.count_nonzero(k != khat) > 1:
                    continue
                f = 1.0
                for kb, hb in zip(k, khat):
                    f *= {(1, 0): r01, (1, 1): 1 - r01, (0, 1): r10, (0, 0): 1 - r10}[(kb, hb)]
                expect += f * p
            assert prob_khat(khat, vecs, probs, ErrorRates(r01, r10)) == pytest.approx(expect, rel=1e-12)

    def test_rates_validated(self):
        with pytest.raises(ValueError):
            ErrorRates(1.0, 0.0)

    def test_neg_log(self):
        assert neg_log(0.0) == math.inf
        assert neg_log(1.0) == 0.0


class TestCorridorsAndBound:
    def test_single_corridor(self):
        a = corridor_union_area([((0, 0), (10, 0), 5.0)], 200_000, 0)
        assert a == pytest.approx(50, rel=0.01)

    def test_identical_corridors(self):
        c = ((0, 0), (10, 0), 5.0)
        assert corridor_union_area([c, c], 200_000, 1) == pytest.approx(50, rel=0.01)

    def test_crossing_corridors_against_polygon_clipping(self):
        shapely = pytest.importorskip("shapely.geometry")
        a = ((-6, 0), (6, 0), 2.0)
        b = ((0, -5), (0, 5), 3.0)
        exact = shapely.box(-6, -1, 6, 1).union(shapely.box(-1.5, -5, 1.5, 5)).area
        assert corridor_union_area([a, b], 400_000, 2) == pytest.approx(exact, rel=0.01)

    def test_lambda_zero(self):
        tgt = (0.0, 0.0)
        assert prob_lower_bound(np.ones(9), tgt, TXS, RXS, 0.0, 5.0) == 1.0
        k = np.kron([1, 1, 1], [0, 1, 1])
        assert prob_lower_bound(k, tgt, TXS, RXS, 0.0, 5.0) == 0.0

    def test_disjoint_all_ones(self):
        txs = np.array([(10.0, 0.0)])
        rxs = np.array([(-10.0, 0.0), (0.0, 10.0)])
        lam, L = 0.01, 1.0
        # corridors overlap only near the target, inside a set of measure ~L^2
        p = prob_lower_bound(np.ones(2), (0.0, 0.0), txs, rxs, lam, L, 400_000, 3)
        approx = math.exp(-lam * L * 30)
        assert p == pytest.approx(approx, rel=0.01)

    def test_inconsistent_raises(self):
        with pytest.raises(InconsistentVector):
            prob_lower_bound([1, 1, 0, 1, 1, 1, 1, 0, 0], (0, 0), TXS, RXS, 0.0075, 5.0)

    def test_bound_below_empirical(self):
        tgt = (0.5, -1.0)
        lb = lower_bound_pmf(tgt, TXS, RXS, 0.0075, 5.0, 200_000, 4)
        emp = empirical_pmf(tgt, TXS, RXS, 0.0075, 5.0, 20_000, np.random.default_rng(5), exclude=False)
        se = np.sqrt(emp.probs * (1 - emp.probs) / emp.n_samples)
        assert np.all(lb.probs <= emp.probs + 3 * se + 1e-3)
        assert lb.total() <= 1.0 + 1e-9


class TestEmpirical:
    def test_lambda_zero_point_mass(self):
        pmf = empirical_pmf((0, 0), TXS, RXS, 0.0, 5.0, 100, np.random.default_rng(0))
        assert pmf.prob(np.ones(9)) == 1.0

    def test_normalized_and_consistent(self):
        pmf = empirical_pmf((1, 2), TXS, RXS, 0.02, 5.0, 5000, np.random.default_rng(1))
        assert pmf.total() == pytest.approx(1.0, abs=1e-12)
        for k in pmf.vectors[pmf.probs > 0]:
            assert is_consistent(k, 3, 3) is not None

    def test_marginal_sums_to_one(self):
        pmf = empirical_pmf((1, 2), TXS, RXS, 0.02, 5.0, 5000, np.random.default_rng(2))
        vecs, probs = pmf.marginal([3, 1])
        assert probs.sum() == pytest.approx(1.0)
        assert vecs.shape[1] == 2

    def test_model_caches_per_cell(self):
        m = EmpiricalModel(TXS, RXS, 0.0075, 5.0, Region(), 2000, 1.0, seed=3)
        a = m.pmf_at((0.2, 0.2))
        assert m.pmf_at((0.7, 0.9)) is a
        assert m.pmf_at((1.2, 0.2)) is not a

    def test_model_nll_is_error_corrected_pmf(self):
        m = EmpiricalModel(TXS, RXS, 0.0075, 5.0, Region(), 2000, 1.0, seed=3)
        err = ErrorRates.from_delta(3)
        cols = [0, 4, 8]
        vecs, probs = m.pmf_at((0, 0)).marginal(cols)
        assert m.neg_log_prob([1, 1, 0], cols, (0, 0), err) == pytest.approx(
            -math.log(prob_khat([1, 1, 0], vecs, probs, err)))


class TestIcb:
    def test_p_dp(self):
        p_los = p_los_ppp(0.0075, 5.0, 10.1133)
        assert p_dp_icb(p_los, 3.0) == pytest.approx(0.5329, abs=5e-4)

    def test_binomial_row(self):
        m = IcbModel.from_p_los(p_los_ppp(0.0075, 5.0, 10.1133), 3.0, 3, 3)
        pmf = m.dp_count_pmf()
        assert pmf.sum() == pytest.approx(1.0)
        assert pmf[8] == pytest.approx(0.0109, abs=5e-4)
        assert pmf[9] == pytest.approx(0.0011, abs=5e-4)

    def test_limit(self):
        assert p_dp_icb(1.0, 40.0) == pytest.approx(0.0, abs=1e-12)

    def test_pmf_over_all_vectors(self):
        m = IcbModel(0.3, 2, 2)
        pmf = m.pmf_at()
        assert len(pmf.vectors) == 16
        assert pmf.total() == pytest.approx(1.0)
        # an inconsistent vector still carries mass
        assert pmf.prob([1, 0, 0, 1]) == pytest.approx(0.7**2 * 0.3**2)

    def test_nll_additive(self):
        m = IcbModel(0.3, 3, 3)
        assert m.neg_log_prob([1, 0, 1]) == pytest.approx(-2 * math.log(0.7) - math.log(0.3))


class TestGrid:
    def test_lambda_zero(self):
        g = grid_precompute(Region(-2, 2, -2, 2), 1.0, TXS, RXS, 0.0, 5.0, 50, np.random.default_rng(0))
        assert np.all(g.means == 1.0) and np.all(g.covs == 0.0)

    def test_bernoulli_diagonal(self):
        g = grid_precompute(Region(-2, 2, -2, 2), 1.0, TXS, RXS, 0.02, 5.0, 3000, np.random.default_rng(1))
        d = np.diagonal(g.covs, axis1=2, axis2=3)
        assert np.allclose(d, g.means * (1 - g.means), atol=1e-12)
        assert np.allclose(g.covs, np.swapaxes(g.covs, 2, 3))

    def test_shared_tx_positive_correlation(self):
        # TX 0 sits far from the target, so blocking along its corridor hits TRPs 0, 3, 6 together
        txs = np.array([(-9.0, 0.0), (0.0, 1.0), (1.0, 0.0)])
        rxs = np.array([(0.0, -1.0), (-1.0, 0.5), (0.5, -1.0)])
        g = grid_precompute(Region(-0.5, 0.5, -0.5, 0.5), 1.0, txs, rxs, 0.05, 2.0, 5000,
                            np.random.default_rng(2), exclude=False)
        C = g.covs[0, 0]
        assert C[0, 3] > 0 and C[0, 6] > 0 and C[3, 6] > 0

    def test_halved_resolution_quadruples_cells(self):
        xs, ys = grid_cells(Region(), 1.0)
        xs2, ys2 = grid_cells(Region(), 0.5)
        assert len(xs2) * len(ys2) == 4 * len(xs) * len(ys)

    def test_round_trip(self, tmp_path):
        g = grid_precompute(Region(-1, 1, -1, 1), 1.0, TXS, RXS, 0.02, 5.0, 200, np.random.default_rng(3))
        g.dump(tmp_path / "g.json")
        back = GridStats.load(tmp_path / "g.json")
        assert np.allclose(back.means, g.means) and np.allclose(back.covs, g.covs)


class TestMahalanobis:
    def test_zero_at_mean(self):
        m = np.array([0.3, 0.8])
        assert mahalanobis_score(m, m, np.eye(2)) == 0.0

    def test_unit_vector(self):
        assert mahalanobis_score([1, 0, 0], [0, 0, 0], np.eye(3), eps=0.0) == pytest.approx(1.0)

    def test_hand_inverse(self):
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        d = np.array([0.7, -0.2])
        inv = np.array([[1.0, -0.5], [-0.5, 2.0]]) / (2.0 - 0.25)
        expect = math.sqrt(d @ inv @ d)
        assert mahalanobis_score(d, [0, 0], C, eps=0.0) == pytest.approx(expect, abs=1e-12)

    def test_singular(self):
        with pytest.raises(SingularCovariance):
            mahalanobis_score([1, 0], [0, 0], np.zeros((2, 2)), eps=0.0)

    def test_model_uses_cell_statistics(self):
        g = grid_precompute(Region(-1, 1, -1, 1), 1.0, TXS, RXS, 0.02, 5.0, 500, np.random.default_rng(4))
        model = MahalanobisModel(g, 3, 3)
        m, C = g.cell((0.5, 0.5))
        cols = [2, 5]
        assert model.neg_log_prob([1, 0], cols, (0.5, 0.5)) == pytest.approx(
            mahalanobis_score([1, 0], m[cols], C[np.ix_(cols, cols)], 1e-6))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_kron_products_are_consistent(m_tx, m_rx, data):
    v = np.array(data.draw(st.lists(st.integers(0, 1), min_size=m_tx, max_size=m_tx)), np.uint8)
    w = np.array(data.draw(st.lists(st.integers(0, 1), min_size=m_rx, max_size=m_rx)), np.uint8)
    assert is_consistent(np.kron(w, v), m_tx, m_rx) is not None
