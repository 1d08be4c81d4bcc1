import math

import numpy as np
import pytest

from microdann import autodiff as ad
from microdann.data import DEFAULT_DOMAINS, AugmentPolicy, ImageSample, SplitSpec, generate_domain, split_source
from microdann.errors import InvalidConfig, TrainingAborted
from microdann.model import BackboneConfig, build_model, extract_features, param_grads
from microdann.model import discriminate, load_checkpoint
from microdann.training import (
    LossBreakdown,
    OptimizerState,
    TauSchedule,
    TrainConfig,
    TrainData,
    adamw_step,
    compute_gradients,
    compute_losses,
    fit,
    new_optimizer_states,
    tau,
    train_step,
)

TINY = BackboneConfig(input_size=8, stage_channels=(4, 6), embedding_dim=8, discriminator_hidden=6)


def tiny_batch(seed, n=6, domains=2):
    rng = np.random.default_rng(seed)
    return [ImageSample(rng.uniform(0, 1, (8, 8)), int(rng.integers(6)), i % domains) for i in range(n)]


def tiny_data(seed=0, per_class=8):
    rng = np.random.default_rng(seed)
    src = [ImageSample(np.clip(rng.normal(c / 6, 0.1, (8, 8)), 0, 1), c, 0) for c in range(6) for _ in range(per_class)]
    tgt = [ImageSample(np.clip(rng.normal(c / 6 + 0.1, 0.1, (8, 8)), 0, 1), c, 1) for c in range(6) for _ in range(2)]
    tr, va, _ = split_source(src, SplitSpec(seed=seed))
    return TrainData(tr, va, tgt, 2)


# -- tau ---------------------------------------------------------------------

def test_tau_values():
    assert tau(0, 90) == 0.0
    assert abs(tau(90, 90) - 0.99990920) <= 1e-8
    assert abs(tau(45, 90) - 0.98661430) <= 1e-8
    assert tau(30, 90) > 0.9
    assert abs(tau(30, 90) - (2 / (1 + math.exp(-10 / 3)) - 1)) < 1e-15


def test_tau_monotone_and_bounded():
    vals = [tau(i, 90) for i in range(91)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= 2 / (1 + math.exp(-10)) - 1
    assert TauSchedule(90, 45).value == tau(45, 90)


def test_tau_errors():
    with pytest.raises(InvalidConfig):
        tau(0, 0)
    with pytest.raises(InvalidConfig):
        tau(91, 90)


def test_train_config_validation():
    for bad in ({"mode": "x"}, {"learning_rate": 0}, {"epochs": 0}, {"lam": -1}, {"weight_decay": -1}):
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)


# -- losses ------------------------------------------------------------------

def test_fresh_model_domain_loss_near_ln2():
    vals = []
    for seed in range(20):
        p = build_model(BackboneConfig(), seed=seed)
        batch = generate_domain(DEFAULT_DOMAINS["source"], 1, seed=seed)
        for i, s in enumerate(batch):
            s.domain_label = i % 2
        bd = compute_losses(p, batch, TauSchedule(90, 0), TrainConfig(lam=1.0))
        vals.append(bd.loss_d)
    assert abs(np.mean(vals) - math.log(2)) < 0.2


def test_loss_breakdown_total():
    p = build_model(TINY, seed=0)
    bd = compute_losses(p, tiny_batch(0), TauSchedule(10, 3), TrainConfig(lam=0.5))
    assert bd.total == bd.loss_c + bd.loss_d
    assert bd.loss_c >= 0
    src = compute_losses(p, tiny_batch(0), TauSchedule(10, 3), TrainConfig(mode="source_only"))
    assert src.loss_d == 0.0 and src.loss_c == bd.loss_c


def test_confident_classifier_has_near_zero_loss():
    p = build_model(TINY, seed=0, scheme="zeros")
    p.theta_c["c.b"][:] = [50, 0, 0, 0, 0, 0]
    batch = [ImageSample(np.zeros((8, 8)), 0, 0) for _ in range(3)]
    bd = compute_losses(p, batch, TauSchedule(10, 0), TrainConfig(mode="source_only"))
    assert bd.loss_c < 1e-20


def _domain_grads(p, batch, scale):
    x = np.stack([s.pixels for s in batch])[:, None]
    e = extract_features(p, x)
    loss, _ = ad.softmax_cross_entropy(discriminate(p, e, scale), [s.domain_label for s in batch])
    return param_grads(p, e.tape, ad.backward(loss))


def test_sign_reversal_property():
    p = build_model(TINY, seed=1)
    batch = tiny_batch(1)
    plain = _domain_grads(p, batch, None)
    for lam, t in ((1.0, 0.5), (2.0, 0.93), (0.5, 0.25)):
        rev = _domain_grads(p, batch, ad.ReversalScale(lam, t))
        for k in p.theta_f:
            np.testing.assert_allclose(rev[k], -(lam * t) * plain[k], rtol=1e-12, atol=1e-300)


def test_lambda_zero_gives_no_domain_signal():
    p = build_model(TINY, seed=2)
    rev = _domain_grads(p, tiny_batch(2), ad.ReversalScale(0.0, 0.9))
    assert all(np.all(rev[k] == 0) for k in p.theta_f)


def test_discriminator_gradient_scaled_by_lambda():
    p = build_model(TINY, seed=3)
    batch = tiny_batch(3)
    sched = TauSchedule(10, 5)
    g1 = compute_gradients(p, compute_losses(p, batch, sched, TrainConfig(lam=1.0)), TrainConfig(lam=1.0))
    g2 = compute_gradients(p, compute_losses(p, batch, sched, TrainConfig(lam=2.0)), TrainConfig(lam=2.0))
    for k in p.theta_d:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12)
    for k in p.theta_c:
        assert np.array_equal(g1[k], g2[k])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_isolation_in_training_graph(seed):
    p = build_model(TINY, seed=seed)
    batch = tiny_batch(seed)
    x = np.stack([s.pixels for s in batch])[:, None]
    e = extract_features(p, x)
    from microdann.model import classify
    lc, _ = ad.softmax_cross_entropy(classify(p, e), [s.class_label for s in batch])
    g = param_grads(p, e.tape, ad.backward(lc))
    assert all(np.all(g[k] == 0) for k in p.theta_d)
    g = _domain_grads(p, batch, ad.ReversalScale(1.0, 0.7))
    assert all(np.all(g[k] == 0) for k in p.theta_c)


# -- AdamW -------------------------------------------------------------------

def test_adamw_zero_gradient_is_pure_decay():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=(5, 4))}
    before = p["w"].copy()
    adamw_step(p, {"w": np.zeros((5, 4))}, OptimizerState(), 1e-3, 1e-3)
    assert np.array_equal(p["w"], before * (1 - 1e-6))


def test_adamw_unit_step_property():
    p = {"w": np.zeros(3)}
    g = np.array([0.3, -2.0, 1e-3])
    state = OptimizerState()
    prev = p["w"].copy()
    for _ in range(1000):
        adamw_step(p, {"w": g}, state, 1e-3, 0.0)
        step = np.abs(p["w"] - prev)
        prev = p["w"].copy()
    np.testing.assert_allclose(step, 1e-3, rtol=0.05)
    assert state.step == 1000


def test_adamw_first_step_bound():
    g = np.array([5.0, -0.01, 0.0])
    p = {"w": np.ones(3)}
    adamw_step(p, {"w": g}, OptimizerState(), 1e-3, 0.0)
    delta = p["w"] - 1.0
    assert np.all(np.abs(delta) <= 1e-3 * (1 + 1e-8))
    assert np.all(np.sign(delta) == -np.sign(g))


def test_adamw_moments_track_shapes():
    p = {"a": np.ones((2, 3)), "b": np.ones(4)}
    s = OptimizerState()
    adamw_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, s, 1e-3, 0.0)
    assert s.m["a"].shape == (2, 3) and s.v["b"].shape == (4,)


def test_adamw_nan_names_parameter():
    p = {"f.conv0.w": np.ones(2)}
    with pytest.raises(TrainingAborted, match="f.conv0.w"):
        adamw_step(p, {"f.conv0.w": np.array([1.0, np.nan])}, OptimizerState(), 1e-3, 0.0)
    assert np.array_equal(p["f.conv0.w"], np.ones(2))


# -- train_step and fit ------------------------------------------------------

def test_source_only_leaves_discriminator_untouched():
    p = build_model(TINY, seed=0)
    d_before = {k: v.copy() for k, v in p.theta_d.items()}
    states = new_optimizer_states(p)
    cfg = TrainConfig(mode="source_only")
    for seed in range(5):
        train_step(p, tiny_batch(seed), TauSchedule(10, 5), cfg, states)
    assert all(p.theta_d[k].tobytes() == d_before[k].tobytes() for k in d_before)


def test_tau_zero_matches_detached_branch():
    batch = tiny_batch(4)
    runs = []
    for branch in ("reversal", "detached"):
        p = build_model(TINY, seed=4)
        train_step(p, batch, TauSchedule(10, 0), TrainConfig(lam=1.0), new_optimizer_states(p), branch)
        runs.append(p)
    for k in runs[0].theta_f:
        assert runs[0].theta_f[k].tobytes() == runs[1].theta_f[k].tobytes()


def test_single_step_decreases_class_loss():
    wins = 0
    cfg = TrainConfig(mode="source_only", learning_rate=1e-3)
    for seed in range(100):
        p = build_model(TINY, seed=seed)
        batch = tiny_batch(seed)
        before = train_step(p, batch, TauSchedule(10, 0), cfg, new_optimizer_states(p)).loss_c
        after = compute_losses(p, batch, TauSchedule(10, 0), cfg).loss_c
        wins += after < before
    assert wins >= 95


def test_lambda_zero_dann_matches_source_only_classifier():
    # identical batch streams: the source-only run sees the same pool with
    # the target samples included (labels unchanged), only the domain branch differs
    data = tiny_data()
    pool = TrainData(data.source_train + data.target_shots, data.source_val, [], 2)
    so = fit(TrainConfig(mode="source_only", epochs=2, augment=False), pool, TINY)
    mixed = TrainData(data.source_train, data.source_val, data.target_shots, 2)
    # the batcher concatenates source then target, so the pools coincide
    dn = fit(TrainConfig(mode="dann", lam=0.0, epochs=2, augment=False), mixed, TINY)
    for k in list(so.params.theta_f) + list(so.params.theta_c):
        assert so.params.get(k).tobytes() == dn.params.get(k).tobytes()


def test_fit_log_and_checkpoint(tmp_path):
    data = tiny_data()
    path = tmp_path / "best.adsh"
    res = fit(TrainConfig(epochs=4, checkpoint_path=str(path)), data, TINY)
    assert len(res.log) == 4
    losses = [r["val_loss"] for r in res.log]
    best = int(np.argmin(losses))
    assert res.meta.epoch == best and res.meta.validation_loss == losses[best]
    assert [r["tau"] for r in res.log] == [tau(i, 4) for i in range(4)]
    params, header = load_checkpoint(path)
    assert header["meta"]["epoch"] == best
    for (na, va), (nb, vb) in zip(params.items(), res.params.items()):
        assert va.tobytes() == vb.tobytes()
    lines = res.metrics_csv().splitlines()
    assert lines[0] == "epoch,tau,loss_c,loss_d,val_loss,val_acc" and len(lines) == 5


def test_fit_is_deterministic():
    data = tiny_data(1)
    a = fit(TrainConfig(epochs=2, seed=3), data, TINY)
    b = fit(TrainConfig(epochs=2, seed=3), data, TINY)
    assert a.metrics_csv() == b.metrics_csv()
    c = fit(TrainConfig(epochs=2, seed=4), data, TINY)
    assert a.metrics_csv() != c.metrics_csv()


def test_fit_rejects_too_few_domains():
    data = tiny_data()
    data.num_domains = 3
    with pytest.raises(InvalidConfig):
        fit(TrainConfig(epochs=1), data, TINY)


def test_loss_breakdown_fields():
    assert {"loss_c", "loss_d", "total"} <= set(LossBreakdown.__dataclass_fields__)
    assert AugmentPolicy.disabled().p_hflip == 0
