import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evpretrain import model as M
from evpretrain.pipeline.config import TrainConfig
from evpretrain.pipeline.training import build_pretrain_graph
from evpretrain.tensor import Graph, Tensor, grad_check

CFG = M.ModelConfig()


@pytest.fixture(scope="module")
def params():
    return M.init_params(CFG, 7)


# -- loop oracles ----------------------------------------------------------


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


def conv_loop(x, w, b, stride):
    """Zero-padded 'same' correlation, one output pixel at a time."""
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    ho = (x.shape[0] + 2 * p - k) // stride + 1
    wo = (x.shape[1] + 2 * p - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            acc = b.copy()
            for di in range(k):
                for dj in range(k):
                    acc += xp[i * stride + di, j * stride + dj] @ w[di, dj]
            out[i, j] = acc
    return out


def trunk_loop(p, prefix, x):
    yy, xx = np.meshgrid(np.linspace(-1, 1, x.shape[0]), np.linspace(-1, 1, x.shape[1]), indexing="ij")
    x = np.concatenate([x, xx[..., None], yy[..., None]], axis=-1)
    for i, s in enumerate((2, 2, 2, 1)):
        x = leaky(conv_loop(x, p[f"{prefix}/conv{i}/w"].data, p[f"{prefix}/conv{i}/b"].data, s))
    return x


def mlp_loop(p, v):
    out = []
    for i in range(3):
        w, b = p[f"pose/fc{i}/w"].data, p[f"pose/fc{i}/b"].data
        y = np.array([b[o] + sum(v[k] * w[k, o] for k in range(len(v))) for o in range(w.shape[1])])
        v = leaky(y) if i < 2 else y
        out = v
    return (out * CFG.pose_scale).reshape(-1, 3)


def test_parameter_count_and_groups(params):
    assert params.count() < 500_000
    assert set(n.split("/")[0] for n in params.tensors) == set(M.GROUPS)


def test_encode_rgb_deterministic_and_normalized(params):
    img = np.random.default_rng(0).random((64, 64, 3))
    a, b = M.encode_rgb(params, img), M.encode_rgb(params, img)
    assert np.array_equal(a.f, b.f)
    assert a.f.shape == (8, 8, 32) and a.z is None
    assert abs(np.linalg.norm(a.f_bar) - 1.0) < 1e-9


def test_encode_rgb_matches_conv_loop(params):
    img = np.random.default_rng(1).random((64, 64, 3))
    h = trunk_loop(params, "rgb", img)
    ref = conv_loop(h, params["rgb/app/w"].data, params["rgb/app/b"].data, 1)
    np.testing.assert_allclose(M.encode_rgb(params, img).f, ref, rtol=1e-10, atol=1e-12)


def test_encode_event_zero_histogram_fixed(params):
    z = np.zeros((64, 64, 2))
    a, b = M.encode_event(params, z), M.encode_event(params, z)
    assert np.array_equal(a.f, b.f) and np.array_equal(a.z, b.z)
    assert a.z.shape == (8, 8, 16)


def test_encode_event_matches_conv_loop(params):
    hist = np.random.default_rng(2).poisson(1.5, (64, 64, 2)).astype(float)
    h = trunk_loop(params, "ev", np.log1p(hist))
    out = M.encode_event(params, hist)
    np.testing.assert_allclose(out.f, conv_loop(h, params["ev/app/w"].data, params["ev/app/b"].data, 1), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.z, conv_loop(h, params["ev/motion/w"].data, params["ev/motion/b"].data, 1), rtol=1e-10, atol=1e-12)
    assert abs(np.linalg.norm(out.z_bar) - 1.0) < 1e-9


def test_encoder_shape_errors(params):
    with pytest.raises(M.ModelError):
        M.encode_rgb(params, np.zeros((32, 32, 3)))
    with pytest.raises(M.ModelError):
        M.encode_event(params, np.zeros((64, 64, 3)))
    with pytest.raises(M.ModelError):
        M.decode_flow(params, np.zeros((8, 8, 32)), np.zeros((8, 8, 8)))
    with pytest.raises(M.ModelError):
        M.predict_pose(params, np.zeros(16))


def test_decode_flow_shape_and_cap(params):
    rng = np.random.default_rng(3)
    f = rng.normal(size=(8, 8, 32))
    for scale in (0.0, 1.0, 100.0):
        v = M.decode_flow(params, f, scale * rng.normal(size=(8, 8, 16)))
        assert v.shape == (64, 64, 2)
        assert np.hypot(v[..., 0], v[..., 1]).max() <= CFG.cap + 1e-12
    z = rng.normal(size=(8, 8, 16))
    assert np.array_equal(M.decode_flow(params, f, z), M.decode_flow(params, f, z))


def test_decode_flow_gradient_wrt_z():
    cfg = M.ModelConfig(height=16, width=16)
    p = M.init_params(cfg, 0)
    rng = np.random.default_rng(4)
    g = Graph()
    z = Tensor(rng.normal(size=(1, 2, 2, 16)), requires_grad=True, name="z")
    for t in p.tensors.values():
        t.requires_grad = False
    v = M.Net(g, p).decode_flow(g.input("f"), g.param(z))
    loss = g.mean(g.multiply(v, g.constant(rng.normal(size=(1, 16, 16, 2)))))
    rep = grad_check(g, loss, {"f": rng.normal(size=(1, 2, 2, 32))})
    assert rep.passed, rep.summary()


def test_predict_pose_matches_mlp_loop(params):
    v = np.random.default_rng(5).normal(size=32)
    out = M.predict_pose(params, v)
    assert out.shape == (21, 3)
    np.testing.assert_allclose(out, mlp_loop(params, v), rtol=1e-10, atol=1e-10)
    assert np.array_equal(out, M.predict_pose(params, v))


def test_pose_head_shared_between_modalities():
    p = M.init_params(M.ModelConfig(height=16, width=16), 0)
    pg = build_pretrain_graph(p, TrainConfig(height=16, width=16, T=2))
    for name in p.names("pose"):
        nodes = [n for n in pg.g.nodes if n.kind == "parameter" and n.tensor is p[name]]
        assert len(nodes) == 1
        users = [n for n in pg.g.nodes if nodes[0] in n.inputs]
        assert len(users) == 2  # RGB path and pseudo-event path
    rng = np.random.default_rng(0)
    v = rng.normal(size=32)
    assert np.array_equal(M.predict_pose(p, v), M.predict_pose(p, v.copy()))


def test_mean_pose_bias():
    mean = np.random.default_rng(0).normal(size=(21, 3)) * 40
    p = M.init_params(CFG, 0, mean)
    np.testing.assert_allclose(M.predict_pose(p, np.zeros(32)), mean, atol=1e-9)


# -- losses ---------------------------------------------------------------------


def smooth_l1_loop(pred, gt):
    tot, n = 0.0, 0
    for j in range(1, pred.shape[0]):
        for c in range(3):
            d = abs((pred[j, c] - pred[0, c]) - (gt[j, c] - gt[0, c]))
            tot += 0.5 * d * d if d < 1 else d - 0.5
            n += 1
    return tot / n


def test_pose_loss_examples():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(21, 3)) * 30
    assert M.loss_pose(gt, gt) == 0.0
    off = gt + 0.5
    off[0] = gt[0]  # root stays put so every non-root coordinate is off by 0.5
    assert abs(M.loss_pose(off, gt) - 0.125) < 1e-12
    pred = gt + rng.normal(size=(21, 3)) * 2
    assert abs(M.loss_pose(pred, gt) - smooth_l1_loop(pred, gt)) < 1e-12
    with pytest.raises(M.ModelError):
        M.loss_pose(np.zeros((21, 3)), np.zeros((20, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    b = 5
    perm = rng.permutation(b)
    pred, gt = rng.normal(size=(b, 21, 3)) * 5, rng.normal(size=(b, 21, 3)) * 5
    assert np.isclose(M.loss_pose(pred, gt), M.loss_pose(pred[perm], gt[perm]), rtol=1e-12)
    a, c = rng.normal(size=(b, 16)), rng.normal(size=(b, 16))
    assert np.isclose(M.loss_divergence(a, c), M.loss_divergence(a[perm], c[perm]), rtol=1e-12)
    assert np.isclose(M.loss_alignment(a, c), M.loss_alignment(a[perm], c[perm]), rtol=1e-12)
    p = M.init_params(M.ModelConfig(height=16, width=16), seed)
    fr, fe = rng.normal(size=(b, 32)), rng.normal(size=(b, 32))
    for role in M.ROLES:
        assert np.isclose(M.loss_adversarial(p, fr, fe, role), M.loss_adversarial(p, fr[perm], fe[perm], role), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_loss_bounds(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=8)
    b = rng.choice([-1.0, 1.0]) * a * rng.uniform(0.1, 3) if seed % 3 == 0 else rng.normal(size=8)
    d, al = M.loss_divergence(a, b), M.loss_alignment(a, b)
    assert -1.0 <= d <= 1.0
    assert 0.0 <= al <= 2.0


def test_divergence_examples():
    z = np.random.default_rng(7).normal(size=16)
    z /= np.linalg.norm(z)
    assert abs(M.loss_divergence(z, z) - 1.0) < 1e-12
    assert abs(M.loss_divergence(z, -z) + 1.0) < 1e-12
    y = np.random.default_rng(8).normal(size=16)
    assert abs(M.loss_divergence(z, y) - z @ y / np.linalg.norm(y)) < 1e-12
    with pytest.raises(M.ModelError):
        M.loss_divergence(z, np.zeros(16))


def test_alignment_examples():
    a = np.array([1.0, 0, 0])
    assert abs(M.loss_alignment(a, a)) < 1e-12
    assert abs(M.loss_alignment(a, np.array([0, 1.0, 0])) - 1.0) < 1e-12
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=5), rng.normal(size=5)
    assert abs(M.loss_alignment(x, y) - (1 - x @ y / np.linalg.norm(x) / np.linalg.norm(y))) < 1e-12
    with pytest.raises(M.ModelError):
        M.loss_alignment(np.zeros(3), a)


def _const_disc(value_logit):
    p = M.init_params(M.ModelConfig(height=16, width=16), 0)
    p["disc/fc1/w"].data[:] = 0.0
    p["disc/fc1/b"].data[:] = value_logit
    return p


def test_adversarial_examples():
    rng = np.random.default_rng(10)
    fr, fe = rng.normal(size=(4, 32)), rng.normal(size=(4, 32))
    p = _const_disc(0.0)
    assert abs(M.loss_adversarial(p, fr, fe, "discriminator") - 0.5) < 1e-12
    assert abs(M.loss_adversarial(p, fr, fe, "generator") - 0.25) < 1e-12
    g = Graph()
    d = M.adversarial_loss(g, g.constant(np.ones((4, 1))), g.constant(np.zeros((4, 1))), "discriminator")
    gen = M.adversarial_loss(g, None, g.constant(np.zeros((4, 1))), "generator")
    g.run({})
    assert g.value(d)[0] == 0.0 and g.value(gen)[0] == 1.0
    with pytest.raises(M.ModelError):
        M.loss_adversarial(p, fr, np.zeros((0, 32)), "generator")
    with pytest.raises(M.ModelError):
        M.loss_adversarial(p, fr, fe, "critic")


def test_adversarial_matches_loop():
    rng = np.random.default_rng(11)
    p = M.init_params(M.ModelConfig(height=16, width=16), 3)
    fr, fe = rng.normal(size=(6, 32)), rng.normal(size=(6, 32))

    def disc(v):
        h = leaky(v @ p["disc/fc0/w"].data + p["disc/fc0/b"].data)
        return 1 / (1 + np.exp(-(h @ p["disc/fc1/w"].data + p["disc/fc1/b"].data)[0]))

    dis = np.mean([(disc(v) - 1) ** 2 for v in fr]) + np.mean([disc(v) ** 2 for v in fe])
    gen = np.mean([(disc(v) - 1) ** 2 for v in fe])
    assert abs(M.loss_adversarial(p, fr, fe, "discriminator") - dis) < 1e-12
    assert abs(M.loss_adversarial(p, fr, fe, "generator") - gen) < 1e-12


def _small_batch(rng, b=2, h=16):
    img = rng.random((b, h, h, 3)) * 0.8 + 0.1
    return {
        "img": img,
        "logimg": np.log(img[..., 0] + 1e-3),
        "hist": rng.poisson(1.0, (b, h, h, 2)).astype(float),
        "gt": rng.normal(size=(b, 21, 3)) * 30,
    }


def test_discriminator_backward_stops_at_features():
    p = M.init_params(M.ModelConfig(height=16, width=16), 0)
    pg = build_pretrain_graph(p, TrainConfig(height=16, width=16, T=2))
    pg.g.run(_small_batch(np.random.default_rng(0)))
    for t in p.tensors.values():
        t.grad = None
    pg.g.backward(pg.disc, accumulate=False)
    for name, t in p.tensors.items():
        if name.startswith("disc/"):
            assert t.grad is not None and np.abs(t.grad).sum() > 0
        else:
            assert t.grad is None or not np.any(t.grad), name


@pytest.mark.parametrize("method,quantize", [("iterative", "per_iteration"), ("iterative", "final"), ("one_shot", "per_iteration")])
def test_full_composite_gradcheck(method, quantize):
    cfg = TrainConfig(height=16, width=16, T=3, method=method, quantize=quantize)
    rng = np.random.default_rng(12)
    batch = _small_batch(rng)
    # a head biased near the targets keeps the loss O(1), so finite-difference
    # roundoff stays well below the tolerance on tiny gradients
    mean = batch["gt"].mean(axis=0)
    batch["gt"] = mean + rng.normal(size=batch["gt"].shape) * 3.0
    p = M.init_params(M.ModelConfig(height=16, width=16), 1, mean - mean[:1])
    # larger final decoder weights so the flow is a few pixels and events fire
    p["dec/conv2/w"].data *= 20.0
    pg = build_pretrain_graph(p, cfg)
    pg.g.run(batch)
    assert pg.g.value(pg.parts["x_pev"]).sum() > 0
    rep = grad_check(pg.g, pg.total, batch, max_elements=24)
    assert rep.passed, rep.summary()
    assert rep.straight_through_nodes
    # detached features: only the discriminator's own weights are checked
    for name, t in p.tensors.items():
        t.requires_grad = name.startswith("disc/")
    rep = grad_check(pg.g, pg.disc, batch)
    assert rep.passed, rep.summary()


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, params, {"step": 3}, extra={"m/x": np.ones(2)})
    assert M.sidecar_path(path).exists()
    back, header, extra = M.load_checkpoint(path)
    assert header["step"] == 3 and np.array_equal(extra["m/x"], np.ones(2))
    for n, t in params.tensors.items():
        np.testing.assert_array_equal(back[n].data, t.data.astype(np.float32).astype(np.float64))
    with pytest.raises(M.ArchitectureMismatch):
        M.load_checkpoint(path, expect=M.ModelConfig(height=32, width=32))
