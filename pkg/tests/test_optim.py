"""Optimizer and schedule behavior, including the frozen single-step oracle."""
import numpy as np
import pytest

from gdt.ndcore import (
    AdamState,
    OptimError,
    ScheduleConfig,
    Tensor,
    adam_step,
    clip_by_global_norm,
    lr_schedule,
)


def test_adam_single_param_first_step_oracle():
    # one scalar parameter at 0, gradient 1, lr 0.1, betas (0.9, 0.95):
    # m=0.1, v=0.05, bias-corrected both to 1.0 -> update ~ -0.1
    p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    state = AdamState(betas=(0.9, 0.95))
    adam_step({"p": p}, {"p": np.ones(1)}, state, lr=0.1)
    np.testing.assert_allclose(p.data, [-0.1], atol=1e-8)
    assert state.step_count == 1


def test_adam_matches_reference_loop_over_steps():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(10)]

    p = Tensor(p0.copy(), requires_grad=True, dtype=np.float64)
    state = AdamState(betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        adam_step({"p": p}, {"p": g}, state, lr=0.01)

    # straight-line float64 reference
    ref, m, v = p0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_global_norm_clip_exact():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}  # norm 5
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    got = np.sqrt(sum(float((g ** 2).sum()) for g in clipped.values()))
    np.testing.assert_allclose(got, 1.0, rtol=1e-6)


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3])}
    clipped, _ = clip_by_global_norm(grads, 1.0)
    np.testing.assert_array_equal(clipped["a"], grads["a"])


def test_decoupled_weight_decay_only_hits_decay_set():
    w = Tensor(np.full(3, 2.0), requires_grad=True, dtype=np.float64)
    b = Tensor(np.full(3, 2.0), requires_grad=True, dtype=np.float64)
    state = AdamState(weight_decay=0.1, decay_names=frozenset({"w"}))
    zero = {"w": np.zeros(3), "b": np.zeros(3)}
    adam_step({"w": w, "b": b}, zero, state, lr=0.5)
    np.testing.assert_allclose(w.data, 2.0 - 0.5 * 0.1 * 2.0)
    np.testing.assert_allclose(b.data, 2.0)


def test_lr_zero_leaves_parameters_unchanged():
    w = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    state = AdamState(weight_decay=0.1, decay_names=frozenset({"w"}))
    adam_step({"w": w}, {"w": np.ones(4)}, state, lr=0.0)
    np.testing.assert_array_equal(w.data, np.ones(4))


def test_nan_gradient_aborts_naming_parameter():
    w = Tensor(np.ones(2), requires_grad=True)
    bad = {"w": np.array([1.0, np.nan])}
    with pytest.raises(OptimError, match="'w'"):
        adam_step({"w": w}, bad, AdamState(), lr=0.1)


def test_atari_schedule_shape():
    cfg = ScheduleConfig(mode="atari", base_lr=6e-4, warmup_tokens=1024,
                         final_tokens=100_000, tokens_per_step=64)
    assert lr_schedule(0, cfg) < 1e-4                 # near zero at the start
    boundary = 1024 // 64 - 1                          # tokens hit warmup here
    np.testing.assert_allclose(lr_schedule(boundary, cfg), 6e-4, rtol=1e-9)
    late = lr_schedule(100_000 // 64, cfg)
    assert late < 6e-4
    np.testing.assert_allclose(late, 6e-4 * 0.1, rtol=1e-6)  # cosine floor
    # monotone decay after warmup
    vals = [lr_schedule(s, cfg) for s in range(boundary, 1500, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_gym_schedule_ramps_then_constant():
    cfg = ScheduleConfig(mode="gym", base_lr=1e-4, warmup_steps=100)
    assert lr_schedule(0, cfg) == pytest.approx(1e-6)
    assert lr_schedule(99, cfg) == pytest.approx(1e-4)
    assert lr_schedule(200_000, cfg) == pytest.approx(1e-4)


def test_unknown_schedule_mode():
    with pytest.raises(ValueError, match="unknown schedule"):
        lr_schedule(0, ScheduleConfig(mode="cyclic"))
