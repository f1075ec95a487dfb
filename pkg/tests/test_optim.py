import numpy as np
import pytest

from textinv.autograd import ShapeError, Tensor
from textinv.optim import Adam, AdamState, adam_update, effective_lr


def test_effective_lr_default_scaling():
    assert effective_lr(0.005) == pytest.approx(0.04)
    assert effective_lr(1e-3, devices=1, batch_size=1) == 1e-3


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    st = AdamState.for_params([p], lr=0.1)
    (out,) = adam_update([p], [np.zeros(3)], st)
    np.testing.assert_array_equal(out, p)


def test_first_step_moves_by_lr_times_sign():
    # bias correction makes the first step exactly lr * g / (|g| + eps)
    p = np.zeros(4)
    g = np.array([1.0, 1.0, -3.0, 1e-3])
    st = AdamState.for_params([p], lr=0.04)
    (out,) = adam_update([p], [g], st)
    expected = -0.04 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out, expected, rtol=1e-6)
    assert out[0] == pytest.approx(-0.04)


def test_matches_hand_rolled_over_several_steps():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(5)
    st = AdamState.for_params([p], lr=0.01)
    m = v = np.zeros(5)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        (p,) = adam_update([p], [g], st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_shape_mismatch_raises():
    st = AdamState.for_params([np.zeros(3)])
    with pytest.raises(ShapeError):
        adam_update([np.zeros(3)], [np.zeros(4)], st)
    with pytest.raises(ShapeError):
        adam_update([np.zeros(3), np.zeros(2)], [np.zeros(3), np.zeros(2)], st)


def test_wrapper_uses_grad_and_keeps_dtype():
    p = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.04)
    p.grad = np.ones((2, 2), dtype=np.float32)
    opt.step()
    assert p.data.dtype == np.float32
    np.testing.assert_allclose(p.data, 0.96, rtol=1e-6)
    opt.zero_grad()
    assert p.grad is None


def test_missing_grad_counts_as_zero():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([p], lr=0.5)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_state_round_trip():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0, 2.0, 3.0])
    opt.step()
    saved = opt.state_arrays()
    q = Tensor(p.data.copy(), requires_grad=True)
    twin = Adam([q], lr=0.1)
    twin.load_state_arrays(saved)
    p.grad = q.grad = np.array([0.5, -1.0, 2.0])
    opt.step()
    twin.step()
    np.testing.assert_array_equal(p.data, q.data)
