import numpy as np
import pytest

from linkforge import formats
from linkforge.autodiff import Tensor
from linkforge.optim import (ParamStore, ScheduleConfig, TemperatureSchedule, adam_step, lr_at,
                             temperature_at)


def test_zero_gradient_fixed_point():
    s = ParamStore()
    s.add("w", np.array([1.5, -2.0]))
    s["w"].grad = np.zeros(2)
    adam_step(s, 0.1)
    assert s["w"].data.tolist() == [1.5, -2.0]


def test_unit_first_step():
    s = ParamStore(np.float64)
    s.add("w", np.array([0.0]))
    s["w"].grad = np.array([1.0])
    adam_step(s, 0.1)
    assert s["w"].data[0] == pytest.approx(-0.1, abs=1e-6)


def test_quadratic_bowl():
    s = ParamStore(np.float64)
    s.add("x", np.array([1.0]))
    for _ in range(200):
        s["x"].grad = 2 * s["x"].data
        adam_step(s, 0.05)
    assert abs(s["x"].data[0]) < 1e-2
    assert all(np.all(np.isfinite(a)) for a in (s.m["x"], s.v["x"]))


def test_nonfinite_gradient_aborts_step():
    s = ParamStore()
    s.add("a", np.ones(2))
    s.add("b", np.ones(2))
    s["a"].grad = np.ones(2)
    s["b"].grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="'b'"):
        adam_step(s, 0.1)
    assert s["a"].data.tolist() == [1.0, 1.0]
    assert s.t["a"] == 0


def test_lr_schedule_endpoints():
    cfg = ScheduleConfig(1e-4, 1e-5, 10_000, 100_000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10_000, cfg) == pytest.approx(1e-4)
    assert lr_at(100_000, cfg) == pytest.approx(1e-5)
    assert lr_at(5_000, cfg) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        lr_at(100_001, cfg)
    with pytest.raises(ValueError):
        ScheduleConfig(1e-5, 1e-4)


def test_temperature_schedule():
    sched = TemperatureSchedule(1.0, 0.1, 0.8)
    assert temperature_at(0, sched) == 1.0
    assert temperature_at(3, sched) == pytest.approx(0.512, abs=1e-15)
    assert temperature_at(50, sched) == 0.1
    for t in range(61):
        assert temperature_at(t, sched) == max(0.1, 1.0 * 0.8 ** t)
    with pytest.raises(ValueError):
        TemperatureSchedule(1.0, 0.1, 1.0)


def test_checkpoint_round_trip_with_optimizer():
    s = ParamStore(seed=1)
    s.glorot("w", 4, 3)
    s.zeros("b", 3)
    s["w"].grad = np.ones((4, 3), np.float32)
    s["b"].grad = np.ones(3, np.float32)
    adam_step(s, 1e-2)
    buf = s.to_bytes({"note": "x"}, with_optimizer=True)
    back, meta = ParamStore.from_bytes(buf)
    assert meta == {"note": "x"}
    assert back.checksum() == s.checksum()
    assert back.t == s.t
    assert np.array_equal(back.m["w"], s.m["w"]) and np.array_equal(back.v["b"], s.v["b"])
    assert back.to_bytes({"note": "x"}, with_optimizer=True) == buf


def test_checkpoint_rejects_garbage():
    with pytest.raises(formats.FormatError):
        ParamStore.from_bytes(b"nope" + bytes(20))


def test_grad_norm_and_zero_grad():
    s = ParamStore()
    s.add("p.w", np.zeros(2))
    s["p.w"].grad = np.array([3.0, 4.0])
    assert s.grad_norm("p.") == pytest.approx(5.0)
    s.zero_grad()
    assert s["p.w"].grad is None or not np.any(s["p.w"].grad)
