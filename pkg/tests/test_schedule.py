import math

import pytest
from hypothesis import given, settings, strategies as st

from stssl.schedule import PlateauPolicy, PlateauScheduler, RampSchedule, plateau_step, rampup_w


def test_ramp_closed_forms():
    s = RampSchedule(ramp_length=10)
    assert rampup_w(0, s) == pytest.approx(math.exp(-5), rel=1e-12)
    assert rampup_w(5, s) == pytest.approx(math.exp(-1.25), rel=1e-12)
    assert rampup_w(10, s) == 1.0
    assert rampup_w(1000, s) == 1.0
    assert rampup_w(20, RampSchedule(10, w_max=0.4)) == 0.4


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.floats(0.0, 1.0))
def test_ramp_monotone_and_bounded(length, w_max):
    s = RampSchedule(length, w_max)
    values = [rampup_w(t, s) for t in range(length + 3)]
    assert all(0.0 <= v <= w_max for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] <= 0.01 * w_max


def test_ramp_continuous_at_saturation():
    s = RampSchedule(1000)
    assert rampup_w(1000, s) - rampup_w(999, s) < 1e-4


def test_ramp_rejects_bad_settings():
    with pytest.raises(ValueError):
        RampSchedule(0)
    with pytest.raises(ValueError):
        RampSchedule(5, w_max=1.5)
    with pytest.raises(ValueError):
        RampSchedule(5, shape="linear")
    with pytest.raises(ValueError):
        rampup_w(-1, RampSchedule(5))


def test_plateau_rules():
    policy = PlateauPolicy()
    assert plateau_step([5, 4, 3, 2, 1, 0.5, 0.2], 1e-4, policy) == 1e-4
    assert plateau_step([1.0] * 6, 1e-4, policy) == pytest.approx(1e-5)
    # fewer than patience + 1 epochs never decays
    assert plateau_step([1.0] * 5, 1e-4, policy) == 1e-4
    # an improvement inside the tolerance does not count
    assert plateau_step([1.0] + [1.0 - 1e-10] * 5, 1e-4, policy) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        plateau_step([], 1e-4, policy)


def test_two_plateaus_decay_twice():
    sched = PlateauScheduler(1e-4)
    lrs = [sched.step(1.0) for _ in range(11)]
    assert lrs[4] == 1e-4
    assert lrs[5] == pytest.approx(1e-5)
    assert lrs[9] == pytest.approx(1e-5)
    assert lrs[10] == pytest.approx(1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40))
def test_scheduler_never_increases(losses):
    sched = PlateauScheduler(1e-3)
    last = sched.lr
    for loss in losses:
        lr = sched.step(loss)
        assert 0 < lr <= last
        last = lr


def test_scheduler_state_roundtrip():
    a = PlateauScheduler(1e-3)
    for loss in [3, 2, 2, 2]:
        a.step(loss)
    b = PlateauScheduler(1.0)
    b.load_state_dict(a.state_dict())
    for loss in [2, 2, 2, 2, 2]:
        assert a.step(loss) == b.step(loss)


def test_policy_validation():
    with pytest.raises(ValueError):
        PlateauPolicy(decay_factor=1.0)
    with pytest.raises(ValueError):
        PlateauPolicy(patience=0)
