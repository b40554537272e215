import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamp import flowmatch
from lamp.errors import ConfigError, NumericError, ShapeError
from lamp.gradcore import Rng, Tensor, default_dtype
from lamp.selftest import check_beta_sampler, check_flow_identities, linear_ode_error


def test_identities_check_passes():
    res = check_flow_identities()
    assert res.passed, res.detail


def test_beta_check_passes():
    res = check_beta_sampler()
    assert res.passed, res.detail


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_interpolant_lies_on_segment(t, seed):
    r = Rng(seed)
    with default_dtype(np.float64):
        e, x = r.spawn(0).normal(5), r.spawn(1).normal(5)
        xt = flowmatch.interpolate(e, x, t).data
    np.testing.assert_allclose(xt, e + t * (x - e), atol=1e-12)


def test_velocity_target_is_data_minus_noise():
    with default_dtype(np.float64):
        v = flowmatch.velocity_target(np.array([1.0, 2.0]), np.array([4.0, 0.0])).data
    np.testing.assert_array_equal(v, [3.0, -2.0])


def test_per_sample_times_broadcast():
    with default_dtype(np.float64):
        e, x = np.zeros((2, 3)), np.ones((2, 3))
        xt = flowmatch.interpolate(e, x, np.array([0.25, 0.75])).data
    np.testing.assert_array_equal(xt, [[0.25] * 3, [0.75] * 3])
    with pytest.raises(ShapeError):
        flowmatch.interpolate(e, x, np.array([0.1, 0.2, 0.3]))


def test_flow_loss_is_zero_for_the_oracle():
    with default_dtype(np.float64):
        r = Rng(3)
        x, e = r.spawn(0).normal((4, 6)), r.spawn(1).normal((4, 6))
        loss = flowmatch.flow_matching_loss(lambda xt, t, c: Tensor(x - e), x, e, 0.3)
    assert loss.item() == 0.0


def test_flow_loss_respects_weight_mask():
    with default_dtype(np.float64):
        x, e = np.ones((1, 4)), np.zeros((1, 4))
        w = np.array([[1.0, 1.0, 0.0, 0.0]])

        def model(xt, t, c):
            return Tensor(np.array([[1.0, 1.0, 50.0, -50.0]]))

        assert flowmatch.flow_matching_loss(model, x, e, 0.5, weight=w).item() == 0.0


def test_partial_denoise_prefix_property():
    calls = []

    def field(x, tau, c):
        calls.append(tau)
        return x * 0.5 + 1.0

    sched = flowmatch.SolverSchedule(10)
    with default_dtype(np.float64):
        x0 = Tensor(np.zeros(3))
        one = flowmatch.partial_denoise(field, x0, sched, 1)
    assert calls == [0.0]
    np.testing.assert_allclose(one.data, 0.1)
    with pytest.raises(ConfigError):
        flowmatch.partial_denoise(field, x0, sched, 0)
    with pytest.raises(ConfigError):
        flowmatch.partial_denoise(field, x0, sched, 11)


def test_counting_field():
    f = flowmatch.CountingField(lambda x, t, c: x * 0.0)
    with default_dtype(np.float64):
        flowmatch.euler_integrate(f, Tensor(np.ones(2)), flowmatch.SolverSchedule(7))
    assert f.calls == 7


def test_non_finite_velocity_is_reported():
    with pytest.raises(NumericError):
        flowmatch.euler_integrate(lambda x, t, c: x * np.nan, Tensor(np.ones(2)), flowmatch.SolverSchedule(3))


def test_solver_schedule_grid():
    s = flowmatch.SolverSchedule(4)
    np.testing.assert_array_equal(s.grid, [0, 0.25, 0.5, 0.75, 1.0])
    assert s.t1 == 0.25
    with pytest.raises(ConfigError):
        flowmatch.SolverSchedule(0)


@pytest.mark.parametrize("n", [5, 10, 20])
def test_euler_first_order(n):
    assert 1.6 <= linear_ode_error(n) / linear_ode_error(2 * n) <= 2.4


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0, exclude_min=True))
def test_inverse_cdf_inverts_cdf(u):
    x = flowmatch.inverse_cdf_beta1(u, 1.5)
    assert 0.0 < x <= 1.0
    assert abs(x ** 1.5 - u) <= 1e-12


def test_flow_times_stay_inside_open_interval():
    t = flowmatch.sample_flow_time(flowmatch.FlowTimeSampler(), Rng(0), 50_000)
    assert t.min() > 0.0 and t.max() < 1.0
    assert isinstance(flowmatch.sample_flow_time(flowmatch.FlowTimeSampler(), Rng(0)), float)


def test_general_beta_sampler_mean():
    t = flowmatch.sample_flow_time(flowmatch.FlowTimeSampler(2.0, 3.0), Rng(0), 100_000)
    assert abs(t.mean() - 0.4) < 0.01
    with pytest.raises(ConfigError):
        flowmatch.FlowTimeSampler(0.0, 1.0)
