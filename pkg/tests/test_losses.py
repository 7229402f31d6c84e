"""Closed-form oracles and algebraic invariants for the training objectives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelda.autodiff import GraphError, Tensor
from pixelda.losses import (
    D_STEP,
    G_STEP,
    LossWeights,
    combined_objective,
    domain_loss,
    generator_adversarial_loss,
    masked_pmse,
    pose_term,
    quaternion_angle,
    task_loss,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def random_unit_quats(n, seed):
    q = rng(seed).normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---- domain / adversarial ----------------------------------------------------

def test_domain_loss_at_maximum_confusion():
    half = Tensor(np.full(8, 0.5, dtype=np.float64))
    assert domain_loss(half, half).item() == pytest.approx(-2.0 * np.log(2.0), rel=1e-9)


def test_domain_loss_perfect_discriminator_is_clamped_zero():
    real = Tensor(np.ones(4, dtype=np.float64))
    fake = Tensor(np.zeros(4, dtype=np.float64))
    assert domain_loss(real, fake).item() == pytest.approx(0.0, abs=1e-6)


def test_domain_loss_manual_average():
    real = Tensor(np.array([0.9, 0.8], dtype=np.float64))
    fake = Tensor(np.array([0.1, 0.3], dtype=np.float64))
    want = (np.log(0.9) + np.log(0.8)) / 2 + (np.log(0.9) + np.log(0.7)) / 2
    assert domain_loss(real, fake).item() == pytest.approx(want, rel=1e-9)


def test_domain_loss_rejects_empty():
    with pytest.raises(GraphError):
        domain_loss(Tensor(np.zeros(0)), Tensor(np.full(2, 0.5)))


def test_generator_adversarial_nonsaturating_default():
    d = Tensor(np.array([0.25, 0.5], dtype=np.float64))
    want = -(np.log(0.25) + np.log(0.5)) / 2
    assert generator_adversarial_loss(d).item() == pytest.approx(want, rel=1e-9)


def test_generator_adversarial_saturating_variant():
    d = Tensor(np.array([0.25, 0.5], dtype=np.float64))
    want = (np.log(0.75) + np.log(0.5)) / 2
    assert generator_adversarial_loss(d, saturating=True).item() == pytest.approx(want, rel=1e-9)


# ---- task loss ----------------------------------------------------------------

def test_task_loss_uniform_logits_value():
    n, k = 6, 10
    onehot = Tensor(np.eye(k, dtype=np.float32)[np.arange(n) % k])
    logits = Tensor(np.zeros((n, k), dtype=np.float32))
    w = LossWeights()
    # both streams enabled -> 2 * ln k
    got = task_loss(w, onehot, source_logits=logits, adapted_logits=logits).item()
    assert got == pytest.approx(2.0 * np.log(k), rel=1e-6)


def test_task_loss_single_stream():
    n, k = 4, 5
    onehot = Tensor(np.eye(k, dtype=np.float32)[np.arange(n) % k])
    logits = Tensor(np.zeros((n, k), dtype=np.float32))
    w = LossWeights(train_t_on_source=False)
    got = task_loss(w, onehot, adapted_logits=logits).item()
    assert got == pytest.approx(np.log(k), rel=1e-6)


def test_task_loss_missing_stream_is_an_error():
    onehot = Tensor(np.eye(3, dtype=np.float32)[:2])
    with pytest.raises(GraphError):
        task_loss(LossWeights(), onehot, source_logits=Tensor(np.zeros((2, 3))))


def test_task_loss_pose_needs_ground_truth():
    onehot = Tensor(np.eye(3, dtype=np.float32)[:2])
    logits = Tensor(np.zeros((2, 3), dtype=np.float32))
    quat = Tensor(random_unit_quats(2, 0).astype(np.float32))
    w = LossWeights(train_t_on_adapted=False, pose_weight=0.5)
    with pytest.raises(GraphError):
        task_loss(w, onehot, source_logits=logits, source_quat=quat)


def test_task_loss_pose_term_added():
    onehot = Tensor(np.eye(2, dtype=np.float64)[[0, 1]])
    logits = Tensor(np.zeros((2, 2), dtype=np.float64))
    pred = Tensor(random_unit_quats(2, 1))
    true = random_unit_quats(2, 2)
    w = LossWeights(train_t_on_adapted=False, pose_weight=0.3)
    got = task_loss(w, onehot, source_logits=logits, source_quat=pred,
                    true_quat=true).item()
    want = np.log(2.0) + 0.3 * pose_term(pred, Tensor(true)).item()
    assert got == pytest.approx(want, rel=1e-9)


# ---- pose term ----------------------------------------------------------------

def test_pose_term_perfect_match_clamped_finite():
    q = Tensor(random_unit_quats(5, 3))
    v = pose_term(q, q).item()
    assert np.isfinite(v)
    assert v == pytest.approx(np.log(1e-6), rel=1e-3)


def test_pose_term_antipodal_equals_identical():
    q = random_unit_quats(4, 4)
    a = pose_term(Tensor(q), Tensor(q)).item()
    b = pose_term(Tensor(-q), Tensor(q)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_pose_term_orthogonal_is_zero():
    q1 = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    q2 = Tensor(np.array([[0.0, 1.0, 0.0, 0.0]]))
    assert pose_term(q1, q2).item() == pytest.approx(0.0, abs=1e-12)


# ---- quaternion angle -----------------------------------------------------------

def test_quaternion_angle_identity():
    q = random_unit_quats(10, 5)
    np.testing.assert_allclose(quaternion_angle(q, q), np.zeros(10), atol=1e-5)


def test_quaternion_angle_antipodal_is_zero():
    q = random_unit_quats(10, 6)
    np.testing.assert_allclose(quaternion_angle(q, -q), np.zeros(10), atol=1e-5)


def test_quaternion_angle_right_angle():
    # 90 degrees about z: q = (cos 45, 0, 0, sin 45)
    s = np.sqrt(0.5)
    q1 = np.array([1.0, 0.0, 0.0, 0.0])
    q2 = np.array([s, 0.0, 0.0, s])
    assert quaternion_angle(q1, q2) == pytest.approx(90.0, rel=1e-9)


def test_quaternion_angle_180_degrees():
    q1 = np.array([1.0, 0.0, 0.0, 0.0])
    q2 = np.array([0.0, 0.0, 0.0, 1.0])
    assert quaternion_angle(q1, q2) == pytest.approx(180.0, rel=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_quaternion_angle_symmetric_and_bounded(seed):
    q = random_unit_quats(8, seed)
    p = random_unit_quats(8, seed + 1 if seed < 2**32 - 1 else 0)
    a = quaternion_angle(q, p)
    b = quaternion_angle(p, q)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert (a >= 0.0).all() and (a <= 180.0).all()


# ---- masked pairwise MSE --------------------------------------------------------

def test_masked_pmse_hand_value():
    # one image, one channel, 2x1 plane, full mask:
    # d = [1, 2], k = 2 -> ||d||^2/k - (sum d)^2/k^2 = 5/2 - 9/4 = 0.25
    source = Tensor(np.zeros((1, 1, 2, 1), dtype=np.float64))
    generated = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 2, 1))
    mask = np.ones((1, 1, 2, 1), dtype=np.float64)
    assert masked_pmse(source, generated, mask).item() == pytest.approx(0.25, rel=1e-12)


def test_masked_pmse_zero_for_identical():
    g = rng(7)
    x = Tensor(g.normal(size=(2, 3, 4, 4)))
    mask = (g.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    assert masked_pmse(x, Tensor(x.data.copy()), mask).item() == pytest.approx(0.0, abs=1e-12)


def test_masked_pmse_shift_invariance():
    g = rng(8)
    src = Tensor(g.normal(size=(3, 2, 5, 5)))
    gen = Tensor(g.normal(size=(3, 2, 5, 5)))
    mask = np.ones((3, 1, 5, 5), dtype=np.float64)
    base = masked_pmse(src, gen, mask).item()
    shifted = masked_pmse(src, Tensor(gen.data + 3.7), mask).item()
    assert shifted == pytest.approx(base, abs=1e-9)


def test_masked_pmse_ignores_pixels_outside_mask():
    g = rng(9)
    src = Tensor(g.normal(size=(2, 1, 6, 6)))
    gen = g.normal(size=(2, 1, 6, 6))
    mask = np.zeros((2, 1, 6, 6))
    mask[:, :, :3, :] = 1.0
    base = masked_pmse(src, Tensor(gen.copy()), mask).item()
    tampered = gen.copy()
    tampered[:, :, 3:, :] += g.normal(scale=10.0, size=(2, 1, 3, 6))
    after = masked_pmse(src, Tensor(tampered), mask).item()
    assert after == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_masked_pmse_rejects_nonbinary_mask():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    with pytest.raises(GraphError):
        masked_pmse(x, x, np.full((1, 1, 2, 2), 0.5))


def test_masked_pmse_rejects_bad_mask_shape():
    x = Tensor(np.zeros((1, 2, 2, 2), dtype=np.float64))
    with pytest.raises(GraphError):
        masked_pmse(x, x, np.ones((1, 2, 2, 2)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_masked_pmse_nonnegative(seed):
    g = rng(seed)
    n, c, h, w = 2, int(g.integers(1, 4)), int(g.integers(2, 7)), int(g.integers(2, 7))
    src = Tensor(g.normal(size=(n, c, h, w)))
    gen = Tensor(g.normal(size=(n, c, h, w)))
    mask = (g.random((n, 1, h, w)) > 0.4).astype(np.float64)
    value = masked_pmse(src, gen, mask).item()
    # Cauchy-Schwarz: per-plane k*||d||^2 >= (sum d)^2; tiny negative only from fp
    assert value >= -1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_masked_pmse_all_ones_mask_shift_invariant(seed):
    g = rng(seed)
    src = Tensor(g.normal(size=(2, 2, 4, 4)))
    gen = g.normal(size=(2, 2, 4, 4))
    mask = np.ones((2, 1, 4, 4))
    shift = float(g.normal())
    a = masked_pmse(src, Tensor(gen), mask).item()
    b = masked_pmse(src, Tensor(gen + shift), mask).item()
    assert b == pytest.approx(a, abs=1e-6)


# ---- weights / combination -------------------------------------------------------

def test_loss_weights_validate_rejects_negative():
    with pytest.raises(ValueError):
        LossWeights(domain_weight=-0.1).validate()


def test_loss_weights_validate_requires_a_task_stream():
    with pytest.raises(ValueError):
        LossWeights(train_t_on_source=False, train_t_on_adapted=False).validate()


def test_loss_weights_zero_task_weight_allows_no_streams():
    LossWeights(task_weight=0.0, train_t_on_source=False,
                train_t_on_adapted=False).validate()


def test_combined_objective_d_step_negates_domain():
    w = LossWeights(domain_weight=0.5, task_weight=2.0)
    domain = Tensor(np.float64(-1.0))
    task = Tensor(np.float64(3.0))
    out = combined_objective(w, D_STEP, domain=domain, task=task)
    assert out.item() == pytest.approx(0.5 * 1.0 + 2.0 * 3.0, rel=1e-12)


def test_combined_objective_g_step_sum():
    w = LossWeights(generator_adversarial_weight=0.011, task_weight_in_g_step=0.01,
                    content_weight=0.3)
    adv = Tensor(np.float64(2.0))
    task = Tensor(np.float64(1.5))
    content = Tensor(np.float64(0.25))
    out = combined_objective(w, G_STEP, task=task, generator_adversarial=adv,
                             content=content)
    assert out.item() == pytest.approx(0.011 * 2.0 + 0.01 * 1.5 + 0.3 * 0.25, rel=1e-12)


def test_combined_objective_skips_zero_weights():
    w = LossWeights(generator_adversarial_weight=0.0, task_weight_in_g_step=0.0,
                    content_weight=0.0)
    out = combined_objective(w, G_STEP, task=Tensor(np.float64(1.0)),
                             generator_adversarial=Tensor(np.float64(1.0)),
                             content=Tensor(np.float64(1.0)))
    assert out is None


def test_combined_objective_rejects_unknown_phase():
    with pytest.raises(ValueError):
        combined_objective(LossWeights(), "warmup")
