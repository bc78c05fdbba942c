import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kdm.rng import RngState, as_rng


class TestRngState:
    def test_same_seed_same_stream(self):
        assert np.array_equal(RngState(3, 1).raw(10), RngState(3, 1).raw(10))

    def test_streams_differ(self):
        assert not np.array_equal(RngState(3, 1).raw(10), RngState(3, 2).raw(10))
        assert not np.array_equal(RngState(3).raw(10), RngState(4).raw(10))

    def test_split(self):
        base = RngState(5)
        base.raw(7)
        np.testing.assert_array_equal(base.split(2).raw(4), RngState(5, 2).raw(4))

    def test_golden_prefix(self):
        # frozen on first run; guards cross-platform stability
        first = RngState(0).raw(2)
        assert first.dtype == np.uint64
        assert first.tolist() == [213000021201967259, 4455796210202625458]
        assert RngState(0).normal(2).tolist() == [0.15853383451844044, 2.982879282617075]

    def test_draw_counter(self):
        r = RngState(1)
        r.uniform(5)
        r.normal(3)
        assert r.draws == 5 + 4

    @pytest.mark.parametrize("bad", [(-1, 0), (0, -1), (1 << 64, 0)])
    def test_range(self, bad):
        with pytest.raises(ValueError):
            RngState(*bad)

    def test_uniform_open_interval(self):
        u = RngState(2).uniform(100_000)
        assert u.min() > 0.0 and u.max() < 1.0
        assert stats.kstest(u, "uniform").pvalue > 0.01

    def test_scalar_uniform(self):
        assert isinstance(RngState(2).uniform(), float)

    def test_normal(self):
        z = RngState(3).normal(50_001)
        assert z.shape == (50_001,)
        assert stats.kstest(z, "norm").pvalue > 0.01

    def test_normal_shape(self):
        assert RngState(3).normal((4, 3)).shape == (4, 3)

    @given(st.integers(0, 200), st.integers(0, 2 ** 64 - 1))
    @settings(max_examples=50, deadline=None)
    def test_permutation(self, n, seed):
        p = RngState(seed).permutation(n)
        assert sorted(p.tolist()) == list(range(n))

    def test_choice(self):
        c = RngState(4).choice(10, 10)
        assert sorted(c.tolist()) == list(range(10))
        with pytest.raises(ValueError):
            RngState(4).choice(3, 4)
        r = RngState(4).choice(3, 1000, replace=True)
        assert set(r.tolist()) == {0, 1, 2}

    def test_categorical_skips_zero_weights(self):
        idx = RngState(5).categorical([0.0, 1.0, 0.0, 2.0, 0.0], 10_000)
        assert set(idx.tolist()) == {1, 3}

    def test_as_rng(self):
        r = RngState(1)
        assert as_rng(r) is r
        assert as_rng(None).seed == 0
        assert as_rng(7).seed == 7
