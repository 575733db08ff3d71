import numpy as np
import pytest

from cohortsim.metrics import adjusted_rand_index, bias_stats, time_to_accuracy


class TestAdjustedRandIndex:
    def test_identical_partition(self):
        assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 9, 9]) == pytest.approx(1.0)

    def test_relabeling_invariant(self):
        a = [0, 0, 1, 1, 2, 2]
        b = ["x" if v == 2 else "y" if v == 1 else "z" for v in a]
        assert adjusted_rand_index(a, b) == pytest.approx(1.0)

    def test_independent_near_zero(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 4, size=2000).tolist()
        b = rng.integers(0, 4, size=2000).tolist()
        assert abs(adjusted_rand_index(a, b)) < 0.05

    def test_known_hand_example(self):
        # contingency [[2,0],[1,1]]: ari = (sum_cells - E) / (max - E)
        a = [0, 0, 1, 1]
        b = [0, 0, 0, 1]
        # pairs: cells C(2,2)=1; rows 1+1=2; cols C(3,2)=3+0=3; total C(4,2)=6
        # expected = 2*3/6 = 1; max = (2+3)/2 = 2.5; ari = (1-1)/(2.5-1) = 0
        assert adjusted_rand_index(a, b) == pytest.approx(0.0)

    def test_mismatched_length(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([0], [0, 1])


class TestBiasStats:
    def test_all_equal(self):
        stats = bias_stats({i: 0.5 for i in range(20)})
        assert stats.variance == 0.0
        assert stats.worst10_mean == stats.best10_mean == 0.5

    def test_hand_deciles_one_to_hundred(self):
        values = [i / 100 for i in range(1, 101)]
        stats = bias_stats(values)
        assert stats.worst10_mean == pytest.approx(0.055)
        assert stats.best10_mean == pytest.approx(0.955)
        assert stats.variance == pytest.approx(np.var(values))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        values = rng.random(50).tolist()
        a = bias_stats(values)
        b = bias_stats(list(reversed(values)))
        assert a == b

    def test_requires_ten_clients(self):
        with pytest.raises(ValueError):
            bias_stats([0.5] * 9)


class TestTimeToAccuracy:
    def test_first_crossing(self):
        curve = [(10.0, 0.2), (20.0, 0.5), (30.0, 0.7)]
        assert time_to_accuracy(curve, 0.5) == 20.0

    def test_unreached_none(self):
        assert time_to_accuracy([(10.0, 0.2)], 0.9) is None
