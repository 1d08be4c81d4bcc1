import numpy as np
import pytest

from microdann import autodiff as ad
from microdann.autodiff import ReversalScale, Tape
from microdann.errors import InvalidConfig, InvalidShape
from microdann.model import (
    BackboneConfig,
    build_model,
    classify,
    discriminate,
    extract_features,
    load_checkpoint,
    param_grads,
    save_checkpoint,
)

SMALL = BackboneConfig(input_size=8, stage_channels=(3, 4), embedding_dim=5, num_domains=3, discriminator_hidden=4)


def images(b, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (b, 1, size, size))


def test_build_is_deterministic():
    cfg = BackboneConfig()
    a, b = build_model(cfg, seed=3), build_model(cfg, seed=3)
    for (na, va), (nb, vb) in zip(a.items(), b.items()):
        assert na == nb and va.tobytes() == vb.tobytes()
    c = build_model(cfg, seed=4)
    assert not np.array_equal(a.get("f.conv0.w"), c.get("f.conv0.w"))


def test_head_shapes():
    p = build_model(BackboneConfig(num_domains=3), seed=0)
    assert p.theta_c["c.w"].shape == (128, 6)
    assert p.theta_c["c.b"].shape == (6,)
    assert p.theta_d["d.out.w"].shape[1] == 3
    assert p.count() == build_model(BackboneConfig(num_domains=3), seed=9).count()


def test_groups_are_disjoint():
    p = build_model(BackboneConfig(), seed=0)
    names = [set(g) for g in p.groups.values()]
    assert not (names[0] & names[1]) and not (names[0] & names[2]) and not (names[1] & names[2])
    arrays = [id(v) for _, v in p.items()]
    assert len(arrays) == len(set(arrays))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        BackboneConfig(input_size=20)
    with pytest.raises(InvalidConfig):
        BackboneConfig(num_domains=1)
    with pytest.raises(InvalidConfig):
        BackboneConfig(num_classes=1)
    BackboneConfig(embedding_dim=2152)


def test_extract_features_shapes_and_purity():
    p = build_model(BackboneConfig(), seed=1)
    x = images(6)
    x[3] = x[2]
    e = extract_features(p, x)
    assert e.shape == (6, 128)
    assert np.array_equal(e.values[2], e.values[3])
    assert e.values.tobytes() == extract_features(p, x).values.tobytes()
    with pytest.raises(InvalidShape):
        extract_features(p, images(2, size=16))


def test_zero_model_gives_zero_embedding():
    p = build_model(BackboneConfig(), seed=0, scheme="zeros")
    e = extract_features(p, np.zeros((2, 1, 32, 32)))
    assert np.all(e.values == 0.0)


def test_classify_is_affine():
    p = build_model(BackboneConfig(), seed=0, scheme="zeros")
    p.theta_c["c.b"][:] = np.arange(6)
    t = Tape()
    logits = classify(p, t.leaf(np.zeros((2, 128))))
    assert logits.shape == (2, 6)
    assert np.array_equal(logits.values, np.tile(np.arange(6.0), (2, 1)))

    q = build_model(BackboneConfig(), seed=2)
    e = np.random.default_rng(0).normal(size=(3, 128))
    t = Tape()
    z1 = classify(q, t.leaf(e)).values
    z2 = classify(q, t.leaf(2 * e)).values
    np.testing.assert_allclose(z2, 2 * z1, rtol=1e-12)
    with pytest.raises(InvalidShape):
        classify(q, t.leaf(np.zeros((2, 7))))


def test_discriminator_forward_ignores_tau():
    p = build_model(BackboneConfig(num_domains=3), seed=5)
    e = np.random.default_rng(1).normal(size=(4, 128))
    a = discriminate(p, Tape().leaf(e), ReversalScale(1.0, 0.0)).values
    b = discriminate(p, Tape().leaf(e), ReversalScale(1.0, 0.9)).values
    assert a.shape == (4, 3) and a.tobytes() == b.tobytes()
    two = build_model(BackboneConfig(num_domains=2), seed=5)
    assert discriminate(two, Tape().leaf(e), ReversalScale(1.0, 0.5)).shape == (4, 2)


def _branch_grads(p, x, y, d, scale, which):
    e = extract_features(p, x)
    if which == "class":
        loss, _ = ad.softmax_cross_entropy(classify(p, e), y)
    else:
        loss, _ = ad.softmax_cross_entropy(discriminate(p, e, scale), d)
    return param_grads(p, e.tape, ad.backward(loss))


def test_gradient_isolation():
    p = build_model(BackboneConfig(num_domains=3), seed=0)
    x = images(4, seed=2)
    y, d = [0, 1, 2, 5], [0, 1, 2, 0]
    g = _branch_grads(p, x, y, d, ReversalScale(1.0, 0.5), "class")
    assert all(np.all(g[k] == 0) for k in p.theta_d)
    assert any(np.any(g[k] != 0) for k in p.theta_f)
    g = _branch_grads(p, x, y, d, ReversalScale(1.0, 0.5), "domain")
    assert all(np.all(g[k] == 0) for k in p.theta_c)
    assert any(np.any(g[k] != 0) for k in p.theta_f)


def test_reversal_flips_extractor_gradient():
    p = build_model(BackboneConfig(num_domains=2), seed=0)
    x = images(4, seed=3)
    y, d = [0, 1, 2, 3], [0, 1, 0, 1]
    rev = _branch_grads(p, x, y, d, ReversalScale(2.0, 0.5), "domain")
    plain = _branch_grads(p, x, y, d, None, "domain")
    # compared by value: sign of zero may differ after reversal
    for k in p.theta_f:
        assert np.array_equal(rev[k], -plain[k])
    for k in p.theta_d:
        assert np.array_equal(rev[k], plain[k])


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_matches_finite_differences(seed):
    p = build_model(SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    for name, value in p.items():
        if name.endswith(".b"):
            value[...] = rng.uniform(-0.1, 0.1, value.shape)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    y, d = [1, 4], [0, 2]
    scale = ReversalScale(1.0, 0.5)

    def total(params, tape):
        e = extract_features(params, x, tape)
        lc, _ = ad.softmax_cross_entropy(classify(params, e), y)
        ld, _ = ad.softmax_cross_entropy(discriminate(params, e, None), d)
        return ad.add(lc, ld)

    tape = Tape()
    grads = param_grads(p, tape, ad.backward(total(p, tape)))
    for name, value in p.items():
        def f(v, name=name):
            q = p.copy()
            q.get(name)[...] = v
            return float(total(q, Tape()).values)

        fd = ad.finite_diff_gradient(f, value, 1e-5)
        err = np.max(np.abs(grads[name] - fd) / np.maximum(1.0, np.abs(fd)))
        assert err < 1e-5, name
    assert scale.multiplier == -0.5


def test_checkpoint_roundtrip(tmp_path):
    p = build_model(BackboneConfig(num_domains=3), seed=11)
    path = tmp_path / "model.adsh"
    save_checkpoint(path, p, {"epoch": 4})
    raw = path.read_bytes()
    assert raw[:4] == b"ADSH" and raw[4] == 1
    q, header = load_checkpoint(path)
    assert header["meta"]["epoch"] == 4
    assert q.config == p.config
    for (na, va), (nb, vb) in zip(p.items(), q.items()):
        assert na == nb and va.tobytes() == vb.tobytes()
    save_checkpoint(tmp_path / "again.adsh", q, {"epoch": 4})
    assert (tmp_path / "again.adsh").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.adsh"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(InvalidConfig):
        load_checkpoint(bad)
