import numpy as np
import pytest

from gpatcher.errors import ShapeMismatch
from gpatcher.mixer import (MixerConfig, MixerModel, backward, forward, init_params,
                            param_shapes, predict)
from gpatcher.patcher import PatchSet, top_p_select


def tiny_patches(n=5, p=2, d=3, seed=0, pad=False):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    R = rng.random((n, n)) + 2 * np.eye(n)
    ps = top_p_select(R, p, X)
    if pad:
        valid = ps.valid.copy()
        valid[1, p - 1] = False
        idx = np.where(valid, ps.indices, -1)
        ps = PatchSet(idx, valid, X)
    return ps


def random_model(cfg, seed=0):
    # nonzero biases and LN shifts so every parameter matters
    rng = np.random.default_rng(seed)
    m = init_params(cfg, seed)
    for k, v in m.params.items():
        v += 0.3 * rng.normal(size=v.shape)
    return m


# independent straight-line reference: one node at a time, plain numpy

def _ln_rows(P, scale, shift, eps):
    mu = P.mean(axis=1, keepdims=True)
    var = ((P - mu) ** 2).mean(axis=1, keepdims=True)
    return (P - mu) / np.sqrt(var + eps) * scale + shift


def _sigma(kind, x):
    return {"relu": lambda t: np.maximum(t, 0), "tanh": np.tanh, "none": lambda t: t}[kind](x)


def reference_logits(model, X, indices, valid):
    cfg, P_ = model.config, model.params
    out = []
    for v in range(indices.shape[0]):
        ok = valid[v]
        P = np.where(ok[:, None], X[np.where(ok, indices[v], 0)], 0.0)
        for i in range(cfg.layers):
            f = f"feature{i}"
            # padding slots stay exactly zero through every block
            Z = _ln_rows(P, P_[f + ".ln_scale"], P_[f + ".ln_shift"], cfg.ln_eps) * ok[:, None]
            P = _sigma(cfg.activation, Z @ P_[f + ".W"] + P_[f + ".b"]) * ok[:, None]
            q = f"patch{i}"
            Z = _ln_rows(P, P_[q + ".ln_scale"], P_[q + ".ln_shift"], cfg.ln_eps) * ok[:, None]
            P = _sigma(cfg.activation, P_[q + ".W"].T @ Z + P_[q + ".b"][:, None]) * ok[:, None]
        pooled = P[ok].mean(axis=0)
        out.append(pooled @ P_["head.W"] + P_["head.b"])
    return np.array(out)


@pytest.mark.parametrize("activation", ["relu", "tanh", "none"])
@pytest.mark.parametrize("pad", [False, True])
def test_forward_matches_reference(activation, pad):
    ps = tiny_patches(pad=pad)
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, layers=2, activation=activation)
    model = random_model(cfg, 1)
    ref = reference_logits(model, ps.node_features, ps.indices, ps.valid)
    np.testing.assert_allclose(predict(model, ps), ref, atol=1e-12)
    tensor_ps = PatchSet(ps.indices, ps.valid, tensor=ps.features)
    np.testing.assert_allclose(predict(model, tensor_ps), ref, atol=1e-12)


def test_zero_parameters_zero_logits():
    ps = tiny_patches()
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4)
    model = MixerModel(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})
    assert np.all(predict(model, ps) == 0.0)


def test_p1_is_per_node_mlp():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(6, 3))
    ps = PatchSet(np.arange(6)[:, None], np.ones((6, 1), bool), X)
    cfg = MixerConfig(d=3, p=1, num_classes=3, hidden=5, layers=2)
    model = random_model(cfg, 3)
    logits = predict(model, ps)
    P = model.params
    for v in range(6):
        h = X[v]
        for i in range(2):
            f, q = f"feature{i}", f"patch{i}"
            z = _ln_rows(h[None], P[f + ".ln_scale"], P[f + ".ln_shift"], 1e-5)[0]
            h = np.maximum(z @ P[f + ".W"] + P[f + ".b"], 0)
            z = _ln_rows(h[None], P[q + ".ln_scale"], P[q + ".ln_shift"], 1e-5)[0]
            h = np.maximum(P[q + ".W"][0, 0] * z + P[q + ".b"][0], 0)
        np.testing.assert_allclose(logits[v], h @ P["head.W"] + P["head.b"], atol=1e-12)
    # other nodes' features cannot reach a p=1 node's logits
    X2 = X.copy()
    X2[1:] += 5.0
    np.testing.assert_array_equal(predict(model, ps.with_features(X2))[0], logits[0])


def _loss(model, ps, Rw, training=False, seed=0):
    rng = np.random.default_rng(seed) if training else None
    logits, trace = forward(model, ps, training=training, rng=rng)
    return float((logits * Rw).sum()), trace


def grad_check(cfg, ps, seed=0, training=False, h=1e-5):
    model = random_model(cfg, seed)
    Rw = np.random.default_rng(seed + 100).normal(size=(ps.n, cfg.num_classes))
    _, trace = _loss(model, ps, Rw, training)
    grads = backward(model, trace, Rw)
    worst = 0.0
    rng = np.random.default_rng(seed + 7)
    for name, value in model.params.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 20), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + h
            fp, _ = _loss(model, ps, Rw, training)
            flat[j] = old - h
            fm, _ = _loss(model, ps, Rw, training)
            flat[j] = old
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[j]
            # floored denominator: exactly-zero gradients (e.g. a bias that the next
            # layer norm cancels) are judged on absolute error
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-5)
            worst = max(worst, err)
    return worst


def test_gradient_tiny_instance():
    # n=5, p=2, d=3, C=2, m=2 layers
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, layers=2, dropout=0.0)
    assert grad_check(cfg, tiny_patches()) < 1e-4


@pytest.mark.parametrize("kw", [
    dict(activation="tanh"), dict(activation="none"), dict(aggregate="sum"),
    dict(aggregate="max"), dict(residual=True), dict(two_layer=True),
    dict(residual=True, activation="tanh", hidden=3), dict(layers=3, hidden=3, two_layer=True),
])
def test_gradient_variants(kw):
    cfg = MixerConfig(**{**dict(d=3, p=3, num_classes=2, hidden=4, layers=2, dropout=0.0), **kw})
    assert grad_check(cfg, tiny_patches(n=6, p=3, pad=True), seed=2) < 1e-4


def test_gradient_with_dropout_mask_fixed():
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, dropout=0.3)
    assert grad_check(cfg, tiny_patches(), training=True) < 1e-4


def test_gradient_tensor_input_path():
    ps = tiny_patches(pad=True)
    tps = PatchSet(ps.indices, ps.valid, tensor=ps.features)
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, dropout=0.0)
    assert grad_check(cfg, tps) < 1e-4
    model = random_model(cfg)
    Rw = np.ones((5, 2))
    g1 = backward(model, forward(model, ps)[1], Rw)
    g2 = backward(model, forward(model, tps)[1], Rw)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


def test_zero_upstream_zero_gradients():
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4)
    model = random_model(cfg)
    _, trace = forward(model, tiny_patches())
    grads = backward(model, trace, np.zeros((5, 2)))
    assert all(np.all(g == 0.0) for g in grads.values())


def test_duplicate_node_doubles_gradient():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 3))
    idx = np.array([[0, 1], [1, 2], [2, 0]])
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, dropout=0.0)
    model = random_model(cfg)
    one = PatchSet(idx[:1], np.ones((1, 2), bool), X)
    two = PatchSet(np.vstack([idx[:1], idx[:1]]), np.ones((2, 2), bool), X)
    up = np.array([[0.7, -0.2]])
    g1 = backward(model, forward(model, one)[1], up)
    g2 = backward(model, forward(model, two)[1], np.vstack([up, up]))
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], atol=1e-12)


def test_init_deterministic_and_bounded():
    cfg = MixerConfig(d=7, p=4, num_classes=3, hidden=6)
    a, b, c = init_params(cfg, 5), init_params(cfg, 5), init_params(cfg, 6)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
        v = a.params[k]
        if k.endswith(".W"):
            assert np.all(np.abs(v) <= np.sqrt(6.0 / sum(v.shape)))
        elif k.endswith("ln_scale"):
            assert np.all(v == 1.0)
        else:
            assert np.all(v == 0.0)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_padding_neutrality():
    ps = tiny_patches(n=6, p=4, pad=True)
    cfg = MixerConfig(d=3, p=4, num_classes=2, hidden=4)
    model = random_model(cfg)
    T = ps.features.copy()
    base = predict(model, PatchSet(ps.indices, ps.valid, tensor=T))
    T[~ps.valid] = np.random.default_rng(1).normal(size=(int((~ps.valid).sum()), 3)) * 100
    np.testing.assert_array_equal(predict(model, PatchSet(ps.indices, ps.valid, tensor=T)), base)


def test_patch_order_sensitivity():
    ps = tiny_patches(n=6, p=3)
    cfg = MixerConfig(d=3, p=3, num_classes=2, hidden=4)
    model = random_model(cfg)
    flipped = PatchSet(ps.indices[:, ::-1].copy(), ps.valid, ps.node_features)
    assert not np.allclose(predict(model, ps), predict(model, flipped))


def test_forward_deterministic_and_dropout_seeded():
    ps = tiny_patches()
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=8, dropout=0.5)
    model = random_model(cfg)
    assert np.array_equal(predict(model, ps), predict(model, ps))
    a = forward(model, ps, training=True, rng=np.random.default_rng(3))[0]
    b = forward(model, ps, training=True, rng=np.random.default_rng(3))[0]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, predict(model, ps))


def test_checkpoint_roundtrip(tmp_path):
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4, two_layer=True, aggregate="max")
    model = random_model(cfg)
    model.save(tmp_path / "m.npz")
    back = MixerModel.load(tmp_path / "m.npz")
    assert back.config == cfg
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()


def test_shape_errors():
    cfg = MixerConfig(d=3, p=2, num_classes=2, hidden=4)
    model = init_params(cfg)
    with pytest.raises(ShapeMismatch):
        forward(model, tiny_patches(p=3))
    with pytest.raises(ShapeMismatch):
        forward(model, tiny_patches(d=4))
    bad = dict(model.params)
    bad["head.W"] = np.zeros((3, 3))
    with pytest.raises(ShapeMismatch):
        MixerModel(cfg, bad)
    with pytest.raises(ValueError):
        MixerConfig(d=3, p=2, num_classes=2, activation="gelu")
