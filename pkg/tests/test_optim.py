"""Optimizer math against hand-computed values, plus the decay schedule."""

import numpy as np
import pytest

from pixelda.autodiff import Parameter
from pixelda.optim import Adam, lr_schedule


def test_lr_schedule_staircase_values():
    assert lr_schedule(1e-3, 0) == pytest.approx(1e-3)
    assert lr_schedule(1e-3, 19_999) == pytest.approx(1e-3)
    assert lr_schedule(1e-3, 20_000) == pytest.approx(0.95e-3)
    assert lr_schedule(1e-3, 40_000) == pytest.approx(1e-3 * 0.95**2)
    assert lr_schedule(2.2e-4, 95_000, decay=0.75, interval=95_000) == pytest.approx(2.2e-4 * 0.75)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        lr_schedule(0.0, 1)
    with pytest.raises(ValueError):
        lr_schedule(1e-3, 1, decay=1.5)
    with pytest.raises(ValueError):
        lr_schedule(1e-3, -1)


def test_adam_first_step_hand_value():
    # With g constant: m/c1 = g, v/c2 = g^2, update = g / (|g| + eps).
    # For g = 0.3, lr = 1e-3: delta = -1e-3 * 0.3 / (0.3 + 1e-8)
    p = Parameter("w", np.full(3, 2.0, dtype=np.float64))
    p.gradient.data[:] = 0.3
    opt = Adam([p], beta1=0.5, beta2=0.999, eps=1e-8)
    opt.step(1e-3)
    want = 2.0 - 1e-3 * 0.3 / (0.3 + 1e-8)
    np.testing.assert_allclose(p.value.data, np.full(3, want), rtol=1e-12)


def test_adam_two_constant_steps():
    # Bias correction makes constant-gradient steps identical in size.
    p = Parameter("w", np.zeros(1, dtype=np.float64))
    opt = Adam([p], beta1=0.5, beta2=0.999, eps=1e-8)
    p.gradient.data[:] = 1.0
    opt.step(1e-2)
    first = p.value.data.copy()
    p.gradient.data[:] = 1.0
    opt.step(1e-2)
    np.testing.assert_allclose(p.value.data - first, first, rtol=1e-7)


def test_adam_weight_decay_pulls_toward_zero():
    p = Parameter("w", np.full(2, 10.0, dtype=np.float64))
    opt = Adam([p], weight_decay=1e-2)
    p.gradient.data[:] = 0.0  # decay alone drives the update
    opt.step(1e-3)
    assert (p.value.data < 10.0).all()


def test_adam_zero_gradient_zero_decay_no_motion():
    p = Parameter("w", np.full(2, 3.0, dtype=np.float64))
    opt = Adam([p])
    opt.step(1e-3)
    np.testing.assert_array_equal(p.value.data, np.full(2, 3.0))


def test_adam_moment_counter_advances():
    p = Parameter("w", np.zeros(1, dtype=np.float32))
    opt = Adam([p])
    assert opt.t == 0
    opt.step(1e-3)
    opt.step(1e-3)
    assert opt.t == 2


def test_adam_rejects_duplicate_names():
    a = Parameter("w", np.zeros(1, dtype=np.float32))
    b = Parameter("w", np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError):
        Adam([a, b])


def test_adam_state_roundtrip():
    p = Parameter("layer/w", np.ones(3, dtype=np.float32))
    opt = Adam([p])
    p.gradient.data[:] = 0.5
    opt.step(1e-3)
    state = {k: v.copy() for k, v in opt.state_arrays().items()}
    assert set(state) == {"layer/w/adam_m", "layer/w/adam_v"}

    fresh = Adam([Parameter("layer/w", np.ones(3, dtype=np.float32))])
    for name, arr in state.items():
        fresh.load_state_array(name, arr)
    np.testing.assert_array_equal(fresh.m["layer/w"], opt.m["layer/w"])
    np.testing.assert_array_equal(fresh.v["layer/w"], opt.v["layer/w"])


def test_adam_load_state_rejects_unknown_and_misshaped():
    opt = Adam([Parameter("w", np.zeros(2, dtype=np.float32))])
    with pytest.raises(KeyError):
        opt.load_state_array("nope/adam_m", np.zeros(2, dtype=np.float32))
    with pytest.raises(ValueError):
        opt.load_state_array("w/adam_m", np.zeros(3, dtype=np.float32))


def test_adam_matches_reference_trajectory():
    # Independent dense reference implementation, 20 random steps.
    g = np.random.default_rng(0)
    w0 = g.normal(size=(4, 3))
    grads = [g.normal(size=(4, 3)) for _ in range(20)]

    p = Parameter("w", w0.copy())
    opt = Adam([p], beta1=0.5, beta2=0.999, eps=1e-8, weight_decay=1e-5)

    ref = w0.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t, grad in enumerate(grads, start=1):
        p.gradient.data[:] = grad
        opt.step(1e-3)
        p.zero_grad()

        gd = grad + 1e-5 * ref
        m = 0.5 * m + 0.5 * gd
        v = 0.999 * v + 0.001 * gd * gd
        mhat = m / (1 - 0.5**t)
        vhat = v / (1 - 0.999**t)
        ref -= 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)

    np.testing.assert_allclose(p.value.data, ref, rtol=1e-10)
