import math

import numpy as np
import pytest

from sttm.autodiff import Tensor
from sttm.numerics import (
    AdamW,
    LrSchedule,
    adamw_step,
    cosine_sim_matrix,
    grad_check,
    init_opt_state,
    l2_normalize,
    onecycle_lr,
    sample_beta,
    softmax_rows,
)


def test_l2_normalize_unit_rows(gen):
    v = gen.standard_normal((10, 7)).astype(np.float32)
    out = l2_normalize(v)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-6)


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(ValueError, match="near-zero norm"):
        l2_normalize(np.zeros((2, 4), dtype=np.float32))


def test_softmax_rows_temperature():
    m = np.array([[0.0, 1.0]], dtype=np.float32)
    hot = softmax_rows(m, tau=0.05)
    warm = softmax_rows(m, tau=1.0)
    assert hot[0, 1] > warm[0, 1] > 0.5
    np.testing.assert_allclose(hot.sum(axis=1), 1.0, rtol=1e-6)


def test_cosine_sim_matrix_self_similarity(gen):
    a = gen.standard_normal((5, 9)).astype(np.float32)
    sim = cosine_sim_matrix(a, a)
    np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-5)
    assert np.all(sim <= 1.0 + 1e-5) and np.all(sim >= -1.0 - 1e-5)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_decay_applies_to_matrices_only():
    w = np.full((3, 3), 2.0, dtype=np.float32)
    b = np.full(3, 2.0, dtype=np.float32)
    state = init_opt_state([w, b], weight_decay=0.01)
    adamw_step([w, b], [np.zeros_like(w), np.zeros_like(b)], state, lr=0.1)
    # zero gradient leaves only the decoupled decay: w *= 1 - lr*wd
    np.testing.assert_allclose(w, 2.0 * (1.0 - 0.1 * 0.01), rtol=1e-6)
    np.testing.assert_allclose(b, 2.0, rtol=1e-7)


def test_nonfinite_gradient_skips_whole_step():
    w = np.ones((2, 2), dtype=np.float32)
    state = init_opt_state([w])
    bad = np.array([[1.0, np.nan], [0.0, 0.0]], dtype=np.float32)
    adamw_step([w], [bad], state, lr=0.5)
    np.testing.assert_array_equal(w, 1.0)
    assert state.skipped == 1 and state.step == 0


def test_step_rejects_mismatched_grads():
    w = np.ones(3, dtype=np.float32)
    state = init_opt_state([w])
    with pytest.raises(ValueError, match="gradients for"):
        adamw_step([w], [], state, lr=0.1)
    with pytest.raises(ValueError):
        adamw_step([w], [np.ones(4, dtype=np.float32)], state, lr=0.1)


def test_adamw_wrapper_only_tracks_trainable(gen):
    a = Tensor(gen.standard_normal((2, 2)).astype(np.float32), requires_grad=True)
    frozen = Tensor(gen.standard_normal((2, 2)).astype(np.float32), requires_grad=False)
    opt = AdamW([a, frozen], weight_decay=0.0)
    assert len(opt.params) == 1
    (a.square().sum()).backward()
    before = a.data.copy()
    opt.step(lr=0.05)
    assert not np.array_equal(a.data, before)
    opt.zero_grad()
    assert a.grad is None


def test_adamw_descends_quadratic(gen):
    target = gen.standard_normal(8).astype(np.float32)
    x = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
    opt = AdamW([x], weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        loss = (x - target).square().sum()
        loss.backward()
        opt.step(lr=0.05)
    np.testing.assert_allclose(x.data, target, atol=1e-2)


# ---------------------------------------------------------------------------
# OneCycle
# ---------------------------------------------------------------------------


def test_onecycle_endpoints():
    sched = LrSchedule(max_lr=1.0, total_steps=100, warmup_frac=0.3)
    assert onecycle_lr(0, sched) == pytest.approx(0.04)
    assert onecycle_lr(30, sched) == pytest.approx(1.0)
    assert onecycle_lr(99, sched) == pytest.approx(1e-4)


def test_onecycle_is_unimodal():
    sched = LrSchedule(max_lr=2.0, total_steps=50, warmup_frac=0.2)
    lrs = [onecycle_lr(s, sched) for s in range(50)]
    peak = int(np.argmax(lrs))
    assert peak == 10
    assert all(lrs[i] <= lrs[i + 1] + 1e-12 for i in range(peak))
    assert all(lrs[i] >= lrs[i + 1] - 1e-12 for i in range(peak, 49))


def test_onecycle_range_check():
    sched = LrSchedule(max_lr=1.0, total_steps=10)
    with pytest.raises(ValueError, match="outside schedule"):
        onecycle_lr(10, sched)


# ---------------------------------------------------------------------------
# Beta draws and the gradient checker
# ---------------------------------------------------------------------------


def test_sample_beta_open_interval(gen):
    draws = sample_beta(0.15, 0.15, gen, size=5000)
    assert draws.shape == (5000,)
    assert np.all(draws > 0) and np.all(draws < 1)
    # Beta(0.15, 0.15) is strongly bimodal: mass piles up near both ends
    assert (draws < 0.1).mean() > 0.3 and (draws > 0.9).mean() > 0.3
    assert abs(draws.mean() - 0.5) < 0.03


def test_sample_beta_scalar_and_validation(gen):
    val = sample_beta(2.0, 5.0, gen)
    assert isinstance(val, float) and 0 < val < 1
    with pytest.raises(ValueError, match="positive"):
        sample_beta(0.0, 1.0, gen)


def test_grad_check_accepts_correct_gradients(gen):
    params = {"w": Tensor(gen.standard_normal((4, 4)).astype(np.float32), requires_grad=True)}
    err = grad_check(lambda p: (p["w"].square() * 0.5).sum(), params)
    assert err < 1e-7


def test_grad_check_flags_wrong_gradients(gen):
    class Lying(Tensor):
        pass

    w = Tensor(gen.standard_normal(6).astype(np.float32), requires_grad=True)

    def loss_fn(p):
        # detach-and-rescale produces a gradient that is half the true one
        half = p["w"] * 0.5
        return (half * p["w"].detach()).sum()

    err = grad_check(loss_fn, {"w": w})
    assert err > 0.5


def test_grad_check_reports_zero_for_exact_linear(gen):
    params = {"w": Tensor(gen.standard_normal(5).astype(np.float32), requires_grad=True)}
    coef = np.arange(1.0, 6.0, dtype=np.float32)
    err = grad_check(lambda p: (p["w"] * coef).sum(), params)
    assert err < 1e-9


def test_math_constants_stay_exact():
    assert math.isclose(LrSchedule().init_frac, 1.0 / 25.0)
