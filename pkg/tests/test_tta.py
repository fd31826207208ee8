import numpy as np
import pytest

from ripbench.augment import AugConfig
from ripbench.core import ModelParams, RngStream, one_hot, softmax
from ripbench.data import make_benchmark
from ripbench.losses import LossKind, ent_loss
from ripbench.tta import (AdaptState, OptimizerState, SrcReplayConfig,
                          TtaConfig, TtaModel, adapt_step, ema_update,
                          optimizer_step, predict, pseudo_labels,
                          source_ensemble_update)


def tiny_model():
    return ModelParams(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.array([0.0, 0.0]))


def no_aug_cfg(**kw):
    kw.setdefault("aug", AugConfig(sigma=0.0, enabled=False))
    return TtaConfig(**kw)


# --- optimizer --------------------------------------------------------------

def test_adam_zero_grad_no_motion():
    params = tiny_model()
    opt = OptimizerState.zeros(params)
    _, new = optimizer_step(opt, params, np.zeros_like(params.W),
                            np.zeros_like(params.b), lr=1e-3)
    np.testing.assert_array_equal(new.W, params.W)
    np.testing.assert_array_equal(new.b, params.b)


def test_adam_zero_lr_updates_moments_only():
    params = tiny_model()
    opt = OptimizerState.zeros(params)
    g = np.ones_like(params.W)
    opt2, new = optimizer_step(opt, params, g, np.zeros_like(params.b), lr=0.0)
    np.testing.assert_array_equal(new.W, params.W)
    assert opt2.t == 1 and opt2.m_W.max() > 0


def test_adam_first_step_magnitude():
    # bias correction makes the first step approximately lr * sign(grad)
    params = ModelParams(np.zeros((1, 1)), np.zeros(1))
    opt = OptimizerState.zeros(params)
    _, new = optimizer_step(opt, params, np.array([[1.0]]), np.zeros(1), lr=1e-3)
    assert new.W[0, 0] == pytest.approx(-1e-3, rel=1e-4)


def test_adam_shape_mismatch():
    params = tiny_model()
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState.zeros(params), params,
                       np.zeros((3, 3)), np.zeros(2), lr=1e-3)


def test_adam_matches_hand_computation_two_steps():
    # independent hand-rolled Adam on a scalar with constant gradient
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 1e-2
    g = 0.3
    m = v = 0.0
    x = 1.0
    params = ModelParams(np.array([[1.0]]), np.zeros(1))
    opt = OptimizerState.zeros(params)
    for t in range(1, 3):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        x = x - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        opt, params = optimizer_step(opt, params, np.array([[g]]),
                                     np.zeros(1), lr=lr)
        assert params.W[0, 0] == pytest.approx(x, abs=1e-12)


# --- blends -----------------------------------------------------------------

def test_ema_update_examples():
    t = ModelParams(np.ones((1, 1)), np.ones(1))
    s = ModelParams(np.zeros((1, 1)), np.zeros(1))
    assert ema_update(t, s, 1.0).W[0, 0] == 1.0
    assert ema_update(t, s, 0.0).W[0, 0] == 0.0
    assert ema_update(t, s, 0.9).W[0, 0] == pytest.approx(0.9)


def test_source_ensemble_examples():
    src = ModelParams(np.full((1, 1), 2.0), np.zeros(1))
    stu = ModelParams(np.zeros((1, 1)), np.zeros(1))
    assert source_ensemble_update(src, stu, 1.0).W[0, 0] == 2.0
    assert source_ensemble_update(src, stu, 0.0).W[0, 0] == 0.0
    same = source_ensemble_update(src, src, 0.37)
    np.testing.assert_array_equal(same.W, src.W)


def test_blend_shape_mismatch():
    a = ModelParams(np.zeros((2, 2)), np.zeros(2))
    b = ModelParams(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        ema_update(a, b, 0.5)


# --- prediction and pseudo-labels -------------------------------------------

def test_predict_zero_params_uniform():
    state = AdaptState.init(ModelParams.zeros(4, 3))
    p = predict(state, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(p, 0.25)


def test_pseudo_labels_zero_params_tiebreak():
    state = AdaptState.init(ModelParams.zeros(3, 2))
    labels = pseudo_labels(state, np.array([[1.0, 2.0], [0.5, -1.0]]))
    np.testing.assert_array_equal(labels, [[1, 0, 0], [1, 0, 0]])


def test_pseudo_labels_hand_set_sign():
    params = ModelParams(np.array([[1.0], [-1.0]]), np.zeros(2))
    state = AdaptState.init(params)
    labels = pseudo_labels(state, np.array([[3.0]]))
    np.testing.assert_array_equal(labels, [[1, 0]])  # W.x = (3, -3)


def test_pseudo_labels_teacher_equals_student_at_alpha_zero():
    dom = make_benchmark(1, n_source=400, n_attack=300, n_probe=100)
    cfg = no_aug_cfg(alpha=0.0)
    state = AdaptState.init(dom.source_model)
    state, _ = adapt_step(state, dom.attack_pool.features[:16], cfg, RngStream(0, 1))
    np.testing.assert_array_equal(state.teacher.W, state.student.W)
    a = pseudo_labels(state, dom.probe.features[:5], "teacher")
    b = pseudo_labels(state, dom.probe.features[:5], "student")
    np.testing.assert_array_equal(a, b)


# --- adapt_step ---------------------------------------------------------------

def test_adapt_step_empty_batch():
    state = AdaptState.init(tiny_model())
    with pytest.raises(ValueError):
        adapt_step(state, np.empty((0, 2)), no_aug_cfg(), RngStream(0, 1))


def test_adapt_step_zero_lr_keeps_params():
    dom = make_benchmark(2, n_source=400, n_attack=300, n_probe=100)
    state = AdaptState.init(dom.source_model)
    cfg = no_aug_cfg(lr=0.0)
    new, preds = adapt_step(state, dom.attack_pool.features[:8], cfg, RngStream(0, 1))
    np.testing.assert_array_equal(new.student.W, state.student.W)
    np.testing.assert_array_equal(
        preds, softmax(state.teacher.logits(dom.attack_pool.features[:8])).argmax(axis=1))


def test_adapt_step_alpha_one_teacher_frozen():
    dom = make_benchmark(3, n_source=400, n_attack=300, n_probe=100)
    state = AdaptState.init(dom.source_model)
    cfg = TtaConfig(alpha=1.0)
    rng = RngStream(1, 1)
    for i in range(5):
        state, _ = adapt_step(state, dom.attack_pool.features[i * 8:(i + 1) * 8],
                              cfg, rng)
    np.testing.assert_array_equal(state.teacher.W, dom.source_model.W)
    assert not np.array_equal(state.student.W, dom.source_model.W)


def test_predictions_are_pre_update():
    # oracle: snapshot the teacher before the step and compare
    dom = make_benchmark(4, n_source=400, n_attack=300, n_probe=100)
    state = AdaptState.init(dom.source_model)
    cfg = TtaConfig(alpha=0.5)
    rng = RngStream(2, 1)
    batch1 = dom.attack_pool.features[:8]
    batch2 = dom.attack_pool.features[8:16]
    state, _ = adapt_step(state, batch1, cfg, rng)
    before = softmax(state.teacher.logits(batch2)).argmax(axis=1)
    state2, preds = adapt_step(state, batch2, cfg, rng)
    np.testing.assert_array_equal(preds, before)
    assert not np.array_equal(state2.teacher.W, state.teacher.W)


def test_ent_loss_value_logged_on_clean_batch():
    dom = make_benchmark(5, n_source=400, n_attack=300, n_probe=100)
    state = AdaptState.init(dom.source_model)
    cfg = no_aug_cfg(loss=LossKind.ENT, diversity_weighting="off")
    batch = dom.attack_pool.features[:16]
    q = softmax(state.student.logits(batch))
    new, _ = adapt_step(state, batch, cfg, RngStream(0, 1))
    assert new.last_loss == pytest.approx(ent_loss(q), abs=1e-9)


def test_source_ensemble_stays_near_source():
    dom = make_benchmark(6, n_source=400, n_attack=300, n_probe=100)
    state = AdaptState.init(dom.source_model)
    cfg = TtaConfig(update_scheme="source_ensemble", alpha=0.9)
    rng = RngStream(3, 1)
    for i in range(10):
        state, _ = adapt_step(state, dom.attack_pool.features[i * 8:(i + 1) * 8],
                              cfg, rng)
        lhs = np.linalg.norm(state.teacher.W - dom.source_model.W)
        rhs = (1 - cfg.alpha) * np.linalg.norm(state.student.W - dom.source_model.W)
        assert lhs <= rhs + 1e-12


def test_adapt_step_deterministic():
    dom = make_benchmark(7, n_source=400, n_attack=300, n_probe=100)
    batch = dom.attack_pool.features[:16]
    cfg = TtaConfig()
    a, _ = adapt_step(AdaptState.init(dom.source_model), batch, cfg, RngStream(9, 9))
    b, _ = adapt_step(AdaptState.init(dom.source_model), batch, cfg, RngStream(9, 9))
    np.testing.assert_array_equal(a.student.W, b.student.W)
    np.testing.assert_array_equal(a.teacher.W, b.teacher.W)


def test_single_sample_ce_adam_hand_oracle():
    # K=2, d=1: gradient is (q - p) outer (x, 1); verify one Adam step
    params = ModelParams(np.array([[0.5], [-0.5]]), np.zeros(2))
    state = AdaptState.init(params)
    x = np.array([[2.0]])
    cfg = no_aug_cfg(loss=LossKind.CE, alpha=0.0, lr=1e-3)
    q = softmax(params.logits(x))[0]
    p = one_hot([int(q.argmax())], 2)[0]
    gz = q - p
    grad_W = np.outer(gz, x[0])
    grad_b = gz
    opt, expected = optimizer_step(OptimizerState.zeros(params), params,
                                   grad_W, grad_b, lr=1e-3)
    new, _ = adapt_step(state, x, cfg, RngStream(0, 1))
    np.testing.assert_allclose(new.student.W, expected.W, atol=1e-15)
    np.testing.assert_allclose(new.student.b, expected.b, atol=1e-15)


def test_src_replay_changes_update():
    dom = make_benchmark(8, n_source=400, n_attack=300, n_probe=100)
    batch = dom.attack_pool.features[:16]
    replay = SrcReplayConfig(dom.source_train.features, dom.source_train.labels, m=8)
    a, _ = adapt_step(AdaptState.init(dom.source_model), batch,
                      no_aug_cfg(), RngStream(1, 1))
    b, _ = adapt_step(AdaptState.init(dom.source_model), batch,
                      no_aug_cfg(src_replay=replay), RngStream(1, 1))
    assert not np.array_equal(a.student.W, b.student.W)


def test_lambda_regularizer_pulls_to_source():
    dom = make_benchmark(9, n_source=400, n_attack=300, n_probe=100)
    rng1, rng2 = RngStream(4, 1), RngStream(4, 1)
    s_free = AdaptState.init(dom.source_model)
    s_reg = AdaptState.init(dom.source_model)
    for i in range(30):
        batch = dom.attack_pool.features[(i * 8) % 200:(i * 8) % 200 + 8]
        s_free, _ = adapt_step(s_free, batch, no_aug_cfg(lam=0.0), rng1)
        s_reg, _ = adapt_step(s_reg, batch, no_aug_cfg(lam=1.0), rng2)
    d_free = np.linalg.norm(s_free.student.W - dom.source_model.W)
    d_reg = np.linalg.norm(s_reg.student.W - dom.source_model.W)
    assert d_reg < d_free


def test_config_validation():
    with pytest.raises(ValueError):
        TtaConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TtaConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TtaConfig(predictor="oracle")
    with pytest.raises(ValueError):
        TtaConfig(update_scheme="nope")


def test_tta_model_reset():
    dom = make_benchmark(10, n_source=400, n_attack=300, n_probe=100)
    model = TtaModel(dom.source_model, TtaConfig(), RngStream(5, 1))
    model.adapt(dom.attack_pool.features[:16])
    assert not np.array_equal(model.state.student.W, dom.source_model.W)
    model.reset()
    np.testing.assert_array_equal(model.state.student.W, dom.source_model.W)
    assert model.state.t == 0
