import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tollsim.toller import (OnlineGradientToller, PolicyKind, ReactiveToller, StaticToller, gradient_update,
                            reactive_update, recommended_step, static_tolls)

vec = arrays(float, 5, elements=st.floats(0, 50))


class TestGradient:
    def test_raise(self):
        s = OnlineGradientToller(1, 0.5, initial=[1.0])
        assert gradient_update(s, [2.0], [4.0]) == pytest.approx([2.0])

    def test_projection_binds(self):
        s = OnlineGradientToller(1, 1.0, initial=[0.3])
        assert gradient_update(s, [5.0], [2.0]) == pytest.approx([0.0])

    def test_fixed_point(self):
        s = OnlineGradientToller(2, 0.7, initial=[1.0, 2.0])
        assert np.array_equal(gradient_update(s, [3.0, 4.0], [3.0, 4.0]), [1.0, 2.0])

    def test_starts_at_zero_and_logs(self):
        s = OnlineGradientToller(3, 0.1, record=True)
        assert np.array_equal(s.current(), np.zeros(3))
        s.update([1, 1, 1], [2, 0, 1])
        assert s.period == 2 and len(s.trajectory) == 2

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gradient_update(OnlineGradientToller(2, 0.1), [1.0], [1.0, 2.0])

    def test_wrong_kind(self):
        with pytest.raises(TypeError):
            gradient_update(ReactiveToller(1), [1.0], [1.0])

    @settings(max_examples=100)
    @given(vec, vec, vec, st.floats(1e-3, 2.0))
    def test_nonnegative_and_formula(self, tau, c, x, gamma):
        s = OnlineGradientToller(5, gamma, initial=tau)
        out = gradient_update(s, c, x)
        assert np.all(out >= 0)
        assert out == pytest.approx(np.maximum(tau - gamma * (c - x), 0.0))

    @settings(max_examples=100)
    @given(vec, vec, vec, vec, st.floats(1e-3, 2.0))
    def test_lipschitz_max_norm(self, t1, t2, c, x, gamma):
        a = gradient_update(OnlineGradientToller(5, gamma, initial=t1), c, x)
        b = gradient_update(OnlineGradientToller(5, gamma, initial=t2), c, x)
        assert np.max(np.abs(a - b)) <= np.max(np.abs(t1 - t2)) + 1e-9

    @settings(max_examples=50)
    @given(st.lists(arrays(float, 3, elements=st.integers(0, 8).map(float)), min_size=1, max_size=40),
           st.floats(1e-3, 1.0))
    def test_telescoping(self, flows, gamma):
        c = np.array([2.0, 3.0, 1.0])
        s = OnlineGradientToller(3, gamma)
        total = np.zeros(3)
        for x in flows:
            s.update(c, x)
            total += x - c
        assert np.all(total <= s.tolls / gamma + 1e-6)


class TestReactive:
    def test_increase(self):
        assert reactive_update(ReactiveToller(1, 0.1, initial=[0.5]), [5.0], [10.0]) == pytest.approx([0.6])

    def test_floor(self):
        assert reactive_update(ReactiveToller(1, 0.1, initial=[0.05]), [5.0], [1.0]) == pytest.approx([0.0])

    def test_equal_holds(self):
        assert reactive_update(ReactiveToller(1, 0.1, initial=[0.4]), [5.0], [5.0]) == pytest.approx([0.4])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            reactive_update(ReactiveToller(2), [1.0, 1.0], [1.0])

    @settings(max_examples=100)
    @given(vec, vec, vec)
    def test_step_size_bounded(self, tau, c, x):
        out = reactive_update(ReactiveToller(5, 0.1, initial=tau), c, x)
        assert np.all(out >= 0) and np.all(np.abs(out - tau) <= 0.1 + 1e-12)


class TestStatic:
    def test_no_noise_exact(self):
        base = np.array([0.0, 1.5, 2.0])
        s = StaticToller(base, 0.0)
        for _ in range(3):
            assert np.array_equal(s.update(np.ones(3), np.ones(3)), base)

    def test_clipped_at_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            t = static_tolls(np.zeros(4), 5e-4, rng)
            assert np.all((t >= 0) & (t <= 5e-4))

    def test_noise_mean_vanishes(self):
        rng = np.random.default_rng(1)
        t = static_tolls(np.full(1_000_000, 1.0), 5e-4, rng)
        assert abs(t.mean() - 1.0) < 1e-5

    def test_fresh_noise_each_period(self):
        s = StaticToller(np.ones(3), 5e-4, seed=2)
        first = s.current().copy()
        assert not np.array_equal(first, s.update(np.ones(3), np.ones(3)))
        assert s.kind is PolicyKind.STATIC

    def test_accepts_lp_solution_like(self):
        class Sol:
            tolls = np.array([0.25])
        assert static_tolls(Sol(), 0.0, None) == pytest.approx([0.25])


def test_recommended_step():
    assert recommended_step(100) == pytest.approx(0.1)
    assert recommended_step(10_000) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        recommended_step(0)
