import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from evpretrain.construction import (
    ConstructionError,
    ConstructionTrace,
    GraphConstructor,
    IncompleteTraceError,
    backward_warp,
    clamp_flow,
    gradient_matrix,
    iterative_construct,
    one_shot_construct,
    reverse_construct,
    spatial_gradient,
)
from evpretrain.events import accumulate_histograms, polarity_swap, quantize_change_map
from evpretrain.tensor import Graph, Tensor, grad_check


def _grad_loop(img):
    h, w = img.shape
    out = np.zeros((h, w, 2))
    for y in range(h):
        for x in range(w):
            if x == 0:
                out[y, x, 0] = img[y, 1] - img[y, 0]
            elif x == w - 1:
                out[y, x, 0] = img[y, x] - img[y, x - 1]
            else:
                out[y, x, 0] = (img[y, x + 1] - img[y, x - 1]) / 2
            if y == 0:
                out[y, x, 1] = img[1, x] - img[0, x]
            elif y == h - 1:
                out[y, x, 1] = img[y, x] - img[y - 1, x]
            else:
                out[y, x, 1] = (img[y + 1, x] - img[y - 1, x]) / 2
    return out


def _bilinear_loop(img, fx, fy):
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            sx = min(max(x - fx[y, x], 0.0), w - 1.0)
            sy = min(max(y - fy[y, x], 0.0), h - 1.0)
            x0, y0 = min(int(np.floor(sx)), w - 2), min(int(np.floor(sy)), h - 2)
            ax, ay = sx - x0, sy - y0
            out[y, x] = ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x0 + 1])
                         + ay * ((1 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]))
    return out


def _quant_loop(s, C):
    h, w = s.shape
    out = np.zeros((h, w, 2), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            n = int(np.floor(abs(s[y, x]) / C))
            out[y, x, 0 if s[y, x] > 0 else 1] += n if s[y, x] != 0 else 0
    return out


def _random_case(rng, h=9, w=11, scale=0.6):
    img = rng.normal(size=(h, w))
    flow = rng.normal(scale=scale, size=(h, w, 2))
    return img, flow


# -- spatial gradient --------------------------------------------------------


def test_gradient_constant_and_ramp():
    assert not spatial_gradient(np.full((5, 6), 3.0)).any()
    x = np.arange(7.0)
    g = spatial_gradient(np.tile(0.7 * x, (5, 1)))
    np.testing.assert_allclose(g[:, :, 0], 0.7)
    np.testing.assert_allclose(g[:, :, 1], 0.0)


def test_gradient_matches_loop():
    img = np.random.default_rng(0).normal(size=(6, 8))
    np.testing.assert_allclose(spatial_gradient(img), _grad_loop(img), atol=1e-14)


def test_gradient_too_small():
    with pytest.raises(ConstructionError):
        spatial_gradient(np.zeros((2, 5)))


def test_gradient_matrix_is_np_gradient():
    v = np.random.default_rng(1).normal(size=7)
    np.testing.assert_allclose(gradient_matrix(7) @ v, np.gradient(v), atol=1e-14)


# -- backward warp -----------------------------------------------------------


def test_warp_zero_flow_bit_exact():
    img = np.random.default_rng(2).normal(size=(6, 7))
    assert backward_warp(img, np.zeros((6, 7, 2))).tobytes() == img.tobytes()


def test_warp_integer_shift_right():
    img = np.random.default_rng(3).normal(size=(6, 7))
    flow = np.zeros((6, 7, 2))
    flow[..., 0] = 1.0
    out = backward_warp(img, flow)
    np.testing.assert_allclose(out[:, 1:], img[:, :-1], atol=1e-14)


def test_warp_half_pixel_on_ramp():
    yy, xx = np.mgrid[0:6, 0:8].astype(float)
    img = 0.3 * xx - 0.2 * yy
    flow = np.zeros((6, 8, 2))
    flow[..., 0] = 0.5
    out = backward_warp(img, flow)
    np.testing.assert_allclose(out[:, 1:], (0.3 * (xx - 0.5) - 0.2 * yy)[:, 1:], atol=1e-14)


def test_warp_matches_loop():
    rng = np.random.default_rng(4)
    img, flow = _random_case(rng, scale=1.5)
    np.testing.assert_allclose(backward_warp(img, flow), _bilinear_loop(img, flow[..., 0], flow[..., 1]), atol=1e-13)


def test_warp_errors():
    with pytest.raises(ConstructionError):
        backward_warp(np.zeros((4, 4)), np.zeros((4, 5, 2)))
    bad = np.zeros((4, 4, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ConstructionError):
        backward_warp(np.zeros((4, 4)), bad)
    with pytest.raises(ConstructionError):
        backward_warp(np.zeros((4, 4)), np.full((4, 4, 2), 10.0))


def test_clamp_flow():
    f = np.array([[[3.0, 4.0], [0.3, 0.4]]])
    out = clamp_flow(f, 1.0)
    np.testing.assert_allclose(out[0, 0], [0.6, 0.8])
    np.testing.assert_array_equal(out[0, 1], f[0, 1])


# -- one-shot ----------------------------------------------------------------


def test_one_shot_trivial():
    rng = np.random.default_rng(5)
    img, flow = _random_case(rng)
    assert not one_shot_construct(img, np.zeros_like(flow)).any()
    assert not one_shot_construct(np.full((9, 11), 2.0), flow).any()


def test_one_shot_is_composition():
    rng = np.random.default_rng(6)
    for _ in range(5):
        img, flow = _random_case(rng)
        g = _grad_loop(img)
        s = -(g[..., 0] * flow[..., 0] + g[..., 1] * flow[..., 1])
        np.testing.assert_array_equal(one_shot_construct(img, flow, 0.15, cap=np.inf), _quant_loop(s, 0.15))


def test_one_shot_polarity_follows_motion():
    # bright bar moving right brightens the pixels it moves into
    img = np.zeros((5, 9))
    img[:, 4] = 1.0
    flow = np.zeros((5, 9, 2))
    flow[..., 0] = 0.8
    h = one_shot_construct(img, flow, 0.2)
    assert h[2, 5, 0] > 0 and h[2, 3, 1] > 0
    assert h[2, 5, 1] == 0 and h[2, 3, 0] == 0


# -- iterative ---------------------------------------------------------------


def test_collapse_to_one_shot():
    rng = np.random.default_rng(7)
    for _ in range(20):
        img, flow = _random_case(rng)
        tr = iterative_construct(img, [flow], T=1, C=0.2)
        np.testing.assert_array_equal(tr.final, one_shot_construct(img, flow, 0.2))


def test_zero_flow_stationary():
    img = np.random.default_rng(8).normal(size=(7, 7))
    tr = iterative_construct(img, np.zeros((7, 7, 2)), T=6)
    assert not tr.final.any()
    for f in tr.frames:
        assert f.tobytes() == img.tobytes()
    assert not reverse_construct(tr).any()


flows_strategy = st.integers(0, 2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(flows_strategy, st.integers(1, 6), st.floats(0.05, 0.5))
def test_accumulation_invariant(seed, T, C):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(6, 7))
    flows = [rng.normal(scale=0.7, size=(6, 7, 2)) for _ in range(T)]
    tr = iterative_construct(img, flows, T=T, C=C)
    assert tr.T == T and len(tr.frames) == T + 1 and len(tr.subframes) == T
    np.testing.assert_array_equal(tr.final, accumulate_histograms(tr.subframes))


@settings(max_examples=40, deadline=None)
@given(flows_strategy, st.integers(1, 5))
def test_negated_flow_swaps_each_subframe(seed, T):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(6, 7))
    flows = [rng.normal(scale=0.7, size=(6, 7, 2)) for _ in range(T)]
    tr = iterative_construct(img, flows, T=T, C=0.2)
    for t in range(T):
        neg = iterative_construct(tr.frames[t], [-flows[t]], T=1, C=0.2).final
        np.testing.assert_array_equal(neg, polarity_swap(tr.subframes[t]))


def test_flow_sources():
    rng = np.random.default_rng(9)
    img, flow = _random_case(rng)
    a = iterative_construct(img, flow, T=3)
    b = iterative_construct(img, [flow] * 3, T=3)
    c = iterative_construct(img, lambda t, x: flow, T=3)
    np.testing.assert_array_equal(a.final, b.final)
    np.testing.assert_array_equal(a.final, c.final)
    seen = []
    iterative_construct(img, lambda t, x: seen.append((t, x.copy())) or flow, T=3)
    assert [t for t, _ in seen] == [1, 2, 3]
    np.testing.assert_array_equal(seen[1][1], a.frames[1])


def test_iterative_errors():
    img = np.zeros((5, 5))
    with pytest.raises(ConstructionError):
        iterative_construct(img, np.zeros((5, 5, 2)), T=0)
    with pytest.raises(ConstructionError):
        iterative_construct(img, np.zeros((5, 5, 2)), C=0)
    with pytest.raises(ConstructionError):
        iterative_construct(img, [np.zeros((5, 5, 2))], T=2)

    def boom(t, x):
        raise RuntimeError("decoder down")

    with pytest.raises(ConstructionError, match="iteration 1"):
        iterative_construct(img, boom, T=2)


def test_iterative_caps_flow():
    img = np.random.default_rng(10).normal(size=(8, 8))
    tr = iterative_construct(img, np.full((8, 8, 2), 50.0), T=2)
    assert np.hypot(tr.flows[0][..., 0], tr.flows[0][..., 1]).max() <= 2.0 + 1e-12


def test_final_quantize_mode():
    rng = np.random.default_rng(11)
    img, flow = _random_case(rng)
    flows = [flow * 0.3] * 4
    tr = iterative_construct(img, flows, T=4, C=0.2, quantize="final")
    np.testing.assert_array_equal(tr.final, quantize_change_map(np.sum(tr.changes, axis=0), 0.2))
    per = iterative_construct(img, flows, T=4, C=0.2)
    # floor of a sum never loses to a sum of floors
    assert tr.final.sum() >= per.final.sum()
    with pytest.raises(ConstructionError):
        iterative_construct(img, flows, T=4, quantize="bogus")


# -- reverse -----------------------------------------------------------------


def test_reverse_single_step_ramp():
    yy, xx = np.mgrid[0:8, 0:8].astype(float)
    img = 0.5 * xx + 0.25 * yy
    flow = np.zeros((8, 8, 2))
    flow[...] = [0.9, -0.4]
    tr = iterative_construct(img, [flow], T=1, C=0.1)
    assert tr.final.sum() > 0
    # border clamping flattens the warped ramp on the edge the flow pulls in
    inner = (slice(2, -2), slice(2, -2))
    np.testing.assert_array_equal(reverse_construct(tr)[inner], polarity_swap(tr.final)[inner])
    tr0 = iterative_construct(img, [np.zeros((8, 8, 2))], T=1, C=0.1)
    assert not reverse_construct(tr0).any()


def _reverse_loop(frames, flows, C):
    T = len(flows)
    total = np.zeros(frames[0].shape + (2,), dtype=np.int64)
    for r in range(T, 0, -1):
        g = _grad_loop(frames[r])
        v = -flows[r - 1]
        s = -(g[..., 0] * v[..., 0] + g[..., 1] * v[..., 1])
        total += _quant_loop(s, C)
    return total


def test_reverse_matches_loop():
    rng = np.random.default_rng(12)
    for _ in range(5):
        img = rng.normal(size=(7, 9))
        flows = [rng.normal(scale=0.6, size=(7, 9, 2)) for _ in range(4)]
        tr = iterative_construct(img, flows, T=4, C=0.15)
        np.testing.assert_array_equal(reverse_construct(tr), _reverse_loop(tr.frames, tr.flows, 0.15))


def test_reverse_incomplete():
    with pytest.raises(IncompleteTraceError):
        reverse_construct(ConstructionTrace())
    tr = iterative_construct(np.zeros((5, 5)), np.zeros((5, 5, 2)), T=3)
    tr.frames.pop()
    with pytest.raises(IncompleteTraceError):
        reverse_construct(tr)


# -- graph builders ------------------------------------------------------------


def _graph_case(seed, T=3, B=2, h=6, w=7):
    rng = np.random.default_rng(seed)
    imgs = rng.normal(size=(B, h, w))
    flows = [rng.normal(scale=0.6, size=(B, h, w, 2)) for _ in range(T)]
    return imgs, flows


def test_graph_matches_eager():
    imgs, flows = _graph_case(13)
    g = Graph()
    gc = GraphConstructor(g, 6, 7, C=0.2)
    x0 = g.input("x0")
    fnodes = [g.input(f"v{t}") for t in range(3)]
    hist, frames = gc.iterative(x0, fnodes)
    rev = gc.reverse(frames, fnodes)
    one = gc.one_shot(x0, fnodes[0])
    binds = {"x0": imgs, **{f"v{t}": f for t, f in enumerate(flows)}}
    g.run(binds)
    for b in range(2):
        tr = iterative_construct(imgs[b], [f[b] for f in flows], T=3, C=0.2, cap=np.inf)
        np.testing.assert_array_equal(g.value(hist)[b], tr.final)
        np.testing.assert_array_equal(g.value(rev)[b], reverse_construct(tr))
        np.testing.assert_array_equal(g.value(one)[b], one_shot_construct(imgs[b], flows[0][b], 0.2, cap=np.inf))
        np.testing.assert_allclose(g.value(frames[-1])[b], tr.frames[-1], atol=1e-13)


def test_graph_construction_gradcheck():
    imgs, flows = _graph_case(14, T=2, B=1, h=5, w=5)
    g = Graph()
    gc = GraphConstructor(g, 5, 5, C=0.2)
    x0 = g.input("x0")
    params = [Tensor(f, requires_grad=True, name=f"v{t}") for t, f in enumerate(flows)]
    fnodes = [g.param(p) for p in params]
    hist, frames = gc.iterative(x0, fnodes)
    rev = gc.reverse(frames, fnodes)
    wts = g.constant(np.random.default_rng(0).normal(size=(1, 5, 5, 2)))
    loss = g.sum(g.multiply(g.add(hist, g.multiply(rev, g.constant(0.5))), wts))
    report = grad_check(g, loss, {"x0": imgs}, tolerance=1e-4)
    assert report.passed, report.summary()
    assert report.straight_through_nodes
