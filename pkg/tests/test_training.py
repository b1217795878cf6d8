import csv
import math
import warnings

import numpy as np
import pytest

import oracles
from vtn.decoder import DecoderConfig, decoder_backward, forward_with_cache, init_weights
from vtn.errors import ConfigError, DomainError, NumericError
from vtn.synthetic import separable_dataset
from vtn.training import (KDConfig, LabeledDataset, OptimizerState, PlateauSchedule, TrainConfig,
                          adam_step, adam_update, cross_entropy, fuse_predictions, kd_loss,
                          parse_run_config, plateau_step, split_columns, train, write_history_csv)


# -------- cross-entropy

@pytest.mark.parametrize("c", [2, 5, 400])
def test_ce_uniform_logits(c):
    loss, grad = cross_entropy(np.full(c, 0.3), 1)
    assert loss == pytest.approx(math.log(c), rel=1e-14)
    assert abs(grad.sum()) < 1e-15


def test_ce_large_margin():
    loss, _ = cross_entropy(np.array([0.0, 60.0, 0.0]), 1)
    assert 0 <= loss < 1e-25


def test_ce_gradient_is_softmax_minus_onehot(rng):
    z = rng.standard_normal(6)
    _, g = cross_entropy(z, 4)
    p = np.array(oracles.softmax_row(list(z)))
    p[4] -= 1
    np.testing.assert_allclose(g, p, atol=1e-15)


def test_ce_batch_and_bad_label(rng):
    z = rng.standard_normal((3, 4))
    loss, _ = cross_entropy(z, np.array([0, 3, 1]))
    assert loss.shape == (3,) and np.all(loss >= 0)
    for bad in (4, -1):
        with pytest.raises(DomainError):
            cross_entropy(z[0], bad)
    with pytest.raises(NumericError):
        cross_entropy(np.array([np.nan, 0.0]), 0)


# -------- fusion

def test_fuse_examples(rng):
    np.testing.assert_array_equal(fuse_predictions([1.0, 0.0], [0.0, 1.0]), [0.5, 0.5])
    p = rng.dirichlet(np.ones(7))
    np.testing.assert_allclose(fuse_predictions(p, p), p, atol=1e-15)
    q = rng.dirichlet(np.ones(7))
    f = fuse_predictions(p, q)
    assert abs(f.sum() - 1) < 1e-12
    assert np.argmax(f) == np.argmax(p + q)


def test_fuse_rejects_unnormalized():
    with pytest.raises(DomainError):
        fuse_predictions([0.6, 0.6], [0.5, 0.5])
    with pytest.raises(DomainError):
        fuse_predictions()


def test_fuse_logit_mode(rng):
    p, q = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    f = fuse_predictions(p, q, mode="logits")
    g = np.sqrt(p * q)
    np.testing.assert_allclose(f, g / g.sum(), atol=1e-14)


# -------- distillation loss

def test_kd_alpha_zero_is_ce(rng):
    z, p = rng.standard_normal(5), rng.dirichlet(np.ones(5))
    loss, grad = kd_loss(z, p, 2, KDConfig(alpha=0.0))
    ce, ce_grad = cross_entropy(z, 2)
    assert loss == ce
    np.testing.assert_array_equal(grad, ce_grad)


def test_kd_same_distribution_alpha_one_is_zero(rng):
    z = rng.standard_normal(5)
    p = np.exp(z - z.max())
    p /= p.sum()
    loss, grad = kd_loss(z, p, 0, KDConfig(alpha=1.0))
    assert abs(loss) < 1e-13
    assert np.abs(grad).max() < 1e-13


@pytest.mark.parametrize("seed", range(5))
def test_kd_gradient_finite_difference(seed):
    r = np.random.default_rng(seed)
    z = r.standard_normal(5) * 2
    p = r.dirichlet(np.ones(5))
    cfg = KDConfig(temperature=r.uniform(1, 6), alpha=r.uniform(0, 1))
    lbl = int(r.integers(5))
    _, grad = kd_loss(z, p, lbl, cfg)
    (num,) = oracles.central_difference(lambda: float(kd_loss(z, p, lbl, cfg)[0]), [z])
    np.testing.assert_allclose(grad, num, atol=1e-6)


def test_kd_clamp_warns():
    with pytest.warns(RuntimeWarning):
        loss, grad = kd_loss(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_kd_config_validation():
    with pytest.raises(ConfigError):
        KDConfig(temperature=0)
    with pytest.raises(ConfigError):
        KDConfig(alpha=1.5)


# -------- Adam

def _scalar_adam(x, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain-float Adam simulation used as an oracle."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) - lr * wd * x
    return x


def test_adam_zero_grad_only_decays(rng):
    p = rng.standard_normal((3, 2))
    (out,) = adam_update([p], [np.zeros_like(p)], OptimizerState(lr=1e-3, weight_decay=1e-4))
    np.testing.assert_allclose(out, p - 1e-3 * 1e-4 * p, rtol=0, atol=1e-18)
    (out,) = adam_update([p], [np.zeros_like(p)], OptimizerState(weight_decay=0.0))
    np.testing.assert_array_equal(out, p)


def test_adam_constant_gradient_step_tends_to_lr():
    p = np.array([0.0, 0.0])
    g = np.array([3.0, -0.5])
    st = OptimizerState(lr=1e-3, weight_decay=0.0)
    for _ in range(200):
        prev = p
        (p,) = adam_update([p], [g], st)
    np.testing.assert_allclose(p - prev, -1e-3 * np.sign(g), rtol=1e-6)
    assert st.step == 200


def test_adam_scalar_quadratic_converges():
    target = 1.7
    grad_fn = lambda x: 2 * (x - target)
    p = np.array([-3.0])
    st = OptimizerState(lr=1e-2, weight_decay=0.0)
    for _ in range(2000):
        (p,) = adam_update([p], [grad_fn(p)], st)
    expected = _scalar_adam(-3.0, grad_fn, 2000, 1e-2)
    assert (p[0] - target) ** 2 < 1e-6
    assert p[0] == pytest.approx(expected, abs=1e-12)


def test_adam_matches_scalar_oracle_with_decay():
    grad_fn = lambda x: 0.3 * x ** 3 - 1.0
    p = np.array([0.5])
    st = OptimizerState(lr=5e-3, weight_decay=1e-2)
    for _ in range(50):
        (p,) = adam_update([p], [grad_fn(p)], st)
    assert p[0] == pytest.approx(_scalar_adam(0.5, grad_fn, 50, 5e-3, wd=1e-2), abs=1e-12)


def test_adam_rejects_nan_and_mismatch():
    with pytest.raises(NumericError):
        adam_update([np.zeros(2)], [np.array([np.nan, 0.0])], OptimizerState())
    with pytest.raises(ConfigError):
        adam_update([np.zeros(2)], [np.zeros(3)], OptimizerState())


def test_adam_step_on_weights(small_cfg):
    w = init_weights(small_cfg, seed=0)
    w2, st = adam_step(w, w.zeros_like(), OptimizerState(weight_decay=0.0))
    np.testing.assert_array_equal(w2.flat(), w.flat())
    assert all(m.shape == t.shape for m, t in zip(st.m, w.tensors()))


# -------- plateau schedule

def test_plateau_decreasing_keeps_lr():
    s = PlateauSchedule(lr=1e-4)
    for i in range(20):
        assert plateau_step(s, 10.0 - i) == 1e-4


def test_plateau_constant_loss_one_decay():
    s = PlateauSchedule(lr=1e-4, patience=5)
    lrs = [plateau_step(s, 1.0) for _ in range(6)]
    assert lrs[:5] == [1e-4] * 5
    assert lrs[5] == pytest.approx(1e-5)


def test_plateau_small_improvement_not_counted():
    s = PlateauSchedule(lr=1.0, patience=2)
    plateau_step(s, 1.0)
    plateau_step(s, 1.0 - 5e-5)
    assert plateau_step(s, 1.0 - 9e-5) == pytest.approx(0.1)


def test_plateau_improvement_resets_counter():
    s = PlateauSchedule(lr=1.0, patience=3)
    for v in (1.0, 1.0, 1.0, 0.5, 0.5, 0.5):
        plateau_step(s, v)
    assert s.lr == 1.0
    assert plateau_step(s, 0.5) == pytest.approx(0.1)


def test_plateau_floor():
    s = PlateauSchedule(lr=1e-4, patience=1, min_lr=1e-7)
    for _ in range(50):
        plateau_step(s, 1.0)
    assert s.lr == 1e-7
    with pytest.raises(NumericError):
        plateau_step(s, float("nan"))
    with pytest.raises(ConfigError):
        PlateauSchedule(factor=1.0)


# -------- training loop

def _tiny_problem():
    ds = separable_dataset(n=40, d=8, t=4, seed=0)
    cfg = DecoderConfig(d_model=8, num_heads=2, num_blocks=1, seq_len=4, num_classes=2)
    return ds, cfg


def test_train_smoke_and_history():
    ds, cfg = _tiny_problem()
    w, hist = train(ds, cfg, TrainConfig(epochs=20, lr=1e-3))
    assert len(hist) == 20
    assert hist[-1]["train_acc"] == 1.0
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_train_deterministic():
    ds, cfg = _tiny_problem()
    a, ha = train(ds, cfg, TrainConfig(epochs=3, seed=4))
    b, hb = train(ds, cfg, TrainConfig(epochs=3, seed=4))
    assert a.flat().tobytes() == b.flat().tobytes()
    assert ha == hb


def test_train_stops_at_min_lr():
    ds, cfg = _tiny_problem()
    # lr small enough that the loss is flat, so every epoch counts as a plateau
    conf = TrainConfig(epochs=200, lr=1e-9, patience=1, min_lr=1e-11, factor=0.1)
    _, hist = train(ds, cfg, conf)
    assert [h["lr"] for h in hist] == pytest.approx([1e-9, 1e-9, 1e-10, 1e-11])


def test_train_dimension_mismatch():
    ds, cfg = _tiny_problem()
    with pytest.raises(ConfigError):
        train(ds, DecoderConfig(d_model=16, num_heads=2, seq_len=4, num_classes=2), TrainConfig(epochs=1))
    with pytest.raises(DomainError):
        train(ds, DecoderConfig(d_model=8, num_heads=2, seq_len=4, num_classes=1), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train(ds, cfg, TrainConfig(epochs=1), teacher_probs=np.ones((3, 2)) / 2)


def test_fixed_batch_loss_monotone_first_steps():
    ds = separable_dataset(n=16, d=16, t=16, seed=0)
    cfg = DecoderConfig(d_model=16, num_heads=2, num_blocks=2, seq_len=16, num_classes=2)
    w = init_weights(cfg, seed=0)
    st = OptimizerState(lr=1e-4)
    losses = []
    for _ in range(11):
        logits, cache = forward_with_cache(ds.clips, w)
        loss, g = cross_entropy(logits, ds.labels)
        losses.append(float(loss.mean()))
        grads, _ = decoder_backward(cache, g / len(ds))
        w, st = adam_step(w, grads, st)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_split_columns_routing():
    x = np.arange(2 * 3 * 6, dtype=float).reshape(2, 3, 6)
    t3 = init_weights(DecoderConfig(d_model=4, num_heads=2, input_dim=3, seq_len=3, num_classes=2))
    t6 = init_weights(DecoderConfig(d_model=6, num_heads=2, seq_len=3, num_classes=2))
    a, b = split_columns(x, [t3, t3])
    np.testing.assert_array_equal(a, x[..., :3])
    np.testing.assert_array_equal(b, x[..., 3:])
    (full,) = split_columns(x, [t6])
    assert full is x
    with pytest.raises(ConfigError):
        split_columns(x[..., :4], [t3, t3])


# -------- run config + history

def test_parse_run_config():
    cfg, model = parse_run_config("""
        # comment
        seed = 3
        lr=1e-3
        batch=4
        epochs=7
        kd.tau=2
        kd.alpha=0.25
        schedule.patience=2
        shuffle=false
        model.num_blocks=1
        model.attn_residual=no
    """)
    assert (cfg.seed, cfg.lr, cfg.batch, cfg.epochs, cfg.patience) == (3, 1e-3, 4, 7, 2)
    assert cfg.kd == KDConfig(2.0, 0.25) and cfg.shuffle is False
    assert model == {"num_blocks": 1, "attn_residual": False}


@pytest.mark.parametrize("text", ["bogus=1", "lr", "lr=abc", "kd.alpha=2", "model.nope=1"])
def test_parse_run_config_errors(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_history_csv(tmp_path):
    hist = [dict(epoch=1, train_loss=0.5, val_loss=0.25, val_acc=1.0, lr=1e-4, train_acc=1.0)]
    write_history_csv(hist, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_acc", "lr"]
    assert rows[1] == ["1", "0.5", "0.25", "1.0", "0.0001"]
