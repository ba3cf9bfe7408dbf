import math

import numpy as np
import pytest

import contune.autodiff as ad
from contune.errors import ConfigError, ContractError
from contune.optim import LrSchedule, ParamRegistry, SgdOptimizer, sgd_step


def make_registry(values, frozen_values=()):
    reg = ParamRegistry()
    params = [ad.parameter(np.asarray(v, dtype=float)) for v in values]
    for i, p in enumerate(params):
        reg.add_trainable(f"p{i}", p)
    frozen = [ad.constant(np.asarray(v, dtype=float)) for v in frozen_values]
    for i, f in enumerate(frozen):
        reg.add_frozen(f"f{i}", f)
    return reg, params, frozen


def test_zero_lr_leaves_params():
    # base_lr must be positive; a zero *effective* lr happens at step 0 of warmup
    reg, (p,), _ = make_registry([[1.0, 2.0]])
    p.grad = np.array([5.0, -3.0])
    sched = LrSchedule(0.1, 0.5, 10)  # warmup 5 steps; lr(0) = 0
    sgd_step(reg, sched, 0)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_hand_update():
    reg, (p,), _ = make_registry([1.0])
    p.grad = np.array(2.0)
    sched = LrSchedule(0.1, 0.0, 1000)
    sgd_step(reg, sched, 0)
    assert float(p.data) == pytest.approx(0.8, rel=1e-15)
    assert p.grad is None


def test_frozen_params_bitwise_stable():
    reg, (p,), (f,) = make_registry([[1.0, 1.0]], [[3.0, -4.0]])
    before = f.data.tobytes()
    sched = LrSchedule(0.5, 0.0, 100)
    for step in range(100):
        p.grad = np.ones(2)
        sgd_step(reg, sched, step)
    assert f.data.tobytes() == before


def test_missing_grad_is_contract_error():
    reg, _, _ = make_registry([[1.0]])
    with pytest.raises(ContractError):
        sgd_step(reg, LrSchedule(0.1, 0.0, 10), 0)


def test_ensure_grads_fills_zeros():
    reg, (p, q), _ = make_registry([[1.0]], ())
    reg2, params2, _ = make_registry([[1.0], [2.0]])
    params2[0].grad = np.array([3.0])
    reg2.ensure_grads()
    assert np.array_equal(params2[1].grad, [0.0])
    assert np.array_equal(params2[0].grad, [3.0])


def test_registry_rejects_double_registration():
    reg = ParamRegistry()
    t = ad.parameter(np.ones(2))
    reg.add_trainable("a", t)
    with pytest.raises(ContractError):
        reg.add_frozen("b", t)
    with pytest.raises(ContractError):
        reg.add_trainable("a", ad.parameter(np.ones(1)))


def test_schedule_shape():
    sched = LrSchedule(base_lr=0.4, warmup_ratio=0.1, total_steps=100)
    w = sched.warmup_steps
    assert w == 10
    # linear warmup
    for s in range(w):
        assert sched.lr(s) == pytest.approx(0.4 * s / w)
    # peak right at warmup end
    assert sched.lr(w) == pytest.approx(0.4)
    # cosine form afterwards
    for s in range(w, 101):
        progress = (s - w) / (100 - w)
        assert sched.lr(s) == pytest.approx(0.4 * 0.5 * (1 + math.cos(math.pi * progress)))
    # terminal lr collapses
    assert sched.lr(100) <= 1e-3 * 0.4
    assert all(sched.lr(s) >= 0 for s in range(0, 120))


def test_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule(-1.0, 0.0, 10)
    with pytest.raises(ConfigError):
        LrSchedule(0.1, 1.0, 10)
    with pytest.raises(ConfigError):
        LrSchedule(0.1, 0.0, 0)
    with pytest.raises(ConfigError):
        LrSchedule(0.1, 0.0, 10, kind="linear")


def test_momentum_zero_matches_plain_sgd():
    reg1, (p1,), _ = make_registry([[1.0, -2.0]])
    reg2, (p2,), _ = make_registry([[1.0, -2.0]])
    sched = LrSchedule(0.2, 0.0, 10)
    opt = SgdOptimizer(reg2, sched, momentum=0.0)
    for step in range(5):
        g = np.array([0.1 * (step + 1), -0.3])
        p1.grad = g.copy()
        p2.grad = g.copy()
        sgd_step(reg1, sched, step)
        opt.step(step)
    assert np.array_equal(p1.data, p2.data)


def test_momentum_accumulates_velocity():
    reg, (p,), _ = make_registry([[0.0]])
    sched = LrSchedule(1.0, 0.0, 1000)
    opt = SgdOptimizer(reg, sched, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step(0)  # v=1, p=-1
    p.grad = np.array([1.0])
    opt.step(0)  # v=1.5, p=-2.5
    assert float(p.data) == pytest.approx(-2.5)


def test_momentum_range_validated():
    reg, _, _ = make_registry([[1.0]])
    with pytest.raises(ConfigError):
        SgdOptimizer(reg, LrSchedule(0.1, 0.0, 10), momentum=1.0)
