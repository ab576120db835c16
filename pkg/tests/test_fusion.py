import numpy as np
import pytest

from fogfusion import tensor as T
from fogfusion.encoding import STREAM_CHANNELS, STREAMS
from fogfusion.fusion import (
    ALL_MODES,
    REFERENCE_PLANE,
    REFERENCE_PYRAMID,
    BranchConfig,
    FusionMode,
    FusionNet,
    dropout_streams,
    exchange_block,
    pyramid_shapes,
    scaled_reference_pyramid,
)
from fogfusion.tensor import ShapeError, Tensor

SMALL = BranchConfig(widths=(4, 4, 6, 6, 8, 8), stem_width=4)


def _inputs(rng, plane, B=1, same=False):
    if same:
        x = rng.random((B, 3) + tuple(plane))
        return {s: x[:, : STREAM_CHANNELS[s]].copy() for s in STREAMS}
    return {s: rng.random((B, STREAM_CHANNELS[s]) + tuple(plane)) for s in STREAMS}


def test_mode_parsing():
    assert FusionMode.parse("camera_only") == FusionMode("single_sensor", "camera")
    assert FusionMode.parse("single_sensor:lidar").name == "lidar_only"
    assert [m.name for m in ALL_MODES][:4] == ["entropy_deep", "deep_no_entropy", "late_fusion", "early_concat"]
    for bad in ("single_sensor", "entropy_deep:camera", "sonar_only", "mystery"):
        with pytest.raises(ValueError):
            FusionMode.parse(bad)


def test_reference_plane_reproduces_listed_pyramid():
    assert pyramid_shapes(REFERENCE_PLANE) == list(REFERENCE_PYRAMID)
    assert pyramid_shapes((96, 192)) == scaled_reference_pyramid((96, 192))


@pytest.mark.parametrize("mode", ALL_MODES, ids=str)
def test_feature_shapes_every_mode(mode):
    rng = np.random.default_rng(0)
    for plane in (REFERENCE_PLANE, (96, 192)):
        net = FusionNet(mode, plane, SMALL)
        feats = net.forward(_inputs(rng, plane), rng.random((1, 4) + plane))
        assert [f.shape[2:] for f in feats] == scaled_reference_pyramid(plane)
        n_br = len(mode.branches)
        assert [f.shape[1] for f in feats] == [w * n_br for w in SMALL.widths]


def test_head_output_sizes():
    net = FusionNet("late_fusion", (96, 192), SMALL)
    rng = np.random.default_rng(1)
    logits, regs = net(_inputs(rng, (96, 192), B=2))
    n = 3 * sum(h * w for h, w in pyramid_shapes((96, 192)))
    assert logits.shape == (2, n, 2) and regs.shape == (2, n, 4)


def test_forward_errors():
    rng = np.random.default_rng(2)
    net = FusionNet("entropy_deep", (96, 192), SMALL)
    x = _inputs(rng, (96, 192))
    with pytest.raises(ValueError, match="entropy"):
        net.forward(x)
    with pytest.raises(ValueError, match="needs stream"):
        net.forward({"camera": x["camera"]}, rng.random((1, 4, 96, 192)))
    with pytest.raises(ShapeError):
        net.forward(_inputs(rng, (64, 192)), rng.random((1, 4, 64, 192)))
    with pytest.raises(ValueError):
        pyramid_shapes((94, 192))


def test_single_sensor_ignores_other_streams():
    rng = np.random.default_rng(3)
    net = FusionNet("camera_only", (96, 192), SMALL)
    a = _inputs(rng, (96, 192))
    b = dict(_inputs(rng, (96, 192)), camera=a["camera"])
    for fa, fb in zip(net.forward(a), net.forward(b)):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_zero_gate_is_one_half():
    rng = np.random.default_rng(4)
    feats = [Tensor(rng.normal(size=(1, 2, 3, 3))) for _ in range(4)]
    gw, gb = Tensor(np.zeros((8, 4, 1, 1))), Tensor(np.zeros(8))
    pw, pb = Tensor(np.zeros((8, 12, 1, 1))), Tensor(np.zeros(8))
    outs, gate = exchange_block(feats, np.zeros((1, 4, 3, 3)), pw, pb, gw, gb, return_gate=True)
    np.testing.assert_array_equal(gate.data, 0.5)
    for f, o in zip(feats, outs):
        np.testing.assert_array_equal(f.data, o.data)


def test_gate_open_interval_and_monotone_in_entropy():
    rng = np.random.default_rng(5)
    feats = [Tensor(rng.normal(size=(2, 2, 4, 4))) for _ in range(4)]
    gw, gb = Tensor(rng.uniform(0, 3, size=(8, 4, 1, 1))), Tensor(rng.normal(size=8))
    pw, pb = Tensor(rng.normal(size=(8, 12, 1, 1))), Tensor(np.zeros(8))
    ent = rng.random((2, 4, 4, 4))
    _, g0 = exchange_block(feats, ent, pw, pb, gw, gb, return_gate=True)
    assert np.all((g0.data > 0) & (g0.data < 1))
    for s in range(4):
        bumped = ent.copy()
        bumped[:, s] += rng.random((2, 4, 4)) * 0.5
        _, g1 = exchange_block(feats, bumped, pw, pb, gw, gb, return_gate=True)
        assert np.all(g1.data >= g0.data)


def test_exchange_spatial_mismatch():
    z = lambda *s: Tensor(np.zeros(s))
    with pytest.raises(ShapeError):
        exchange_block([z(1, 2, 3, 3), z(1, 2, 4, 3)], np.zeros((1, 2, 3, 3)), z(4, 6, 1, 1), z(4), z(4, 2, 1, 1), z(4))
    with pytest.raises(ShapeError):
        exchange_block([z(1, 2, 3, 3), z(1, 2, 3, 3)], np.zeros((1, 2, 2, 3)), z(4, 6, 1, 1), z(4), z(4, 2, 1, 1), z(4))


def _randomise(net, rng, scale=0.3):
    for k, p in net.params.items():
        if k.startswith("x"):
            p.data = (rng.normal(size=p.shape) * scale).astype(p.data.dtype)


def test_deep_no_entropy_is_entropy_deep_with_gate_one():
    rng = np.random.default_rng(6)
    deep = FusionNet("entropy_deep", (96, 192), SMALL, seed=1)
    _randomise(deep, rng)
    plain = FusionNet("deep_no_entropy", (96, 192), SMALL, seed=1)
    plain.load_state_dict(deep.state_dict(), strict=False)
    x, ent = _inputs(rng, (96, 192)), rng.random((1, 4, 96, 192))
    for a, b in zip(deep.forward(x, ent, force_gate=1.0), plain.forward(x, ent)):
        np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(deep.forward(x, ent)[-1].data, plain.forward(x, ent)[-1].data)


def test_symmetric_branches_stay_identical():
    """Tied branch weights, identical planes and equal entropies keep every branch output equal."""
    rng = np.random.default_rng(7)
    cfg = BranchConfig(SMALL.widths, SMALL.stem_width, {s: 3 for s in STREAMS})
    net = FusionNet("entropy_deep", (96, 192), cfg)
    for k in list(net.params):
        b, rest = k.split(".", 1)
        if b in STREAMS and b != "camera":
            net.params[k].data = net.params[f"camera.{rest}"].data.copy()
    for l, w in enumerate(cfg.widths):
        A = rng.normal(size=(w, w)) * 0.2
        Bm = rng.normal(size=(w, w)) * 0.2
        E = rng.normal(size=(w, 1)) * 0.2
        proj = np.zeros((4 * w, 4 * w + 4))
        for i in range(4):
            for j in range(4):
                proj[i * w : (i + 1) * w, j * w : (j + 1) * w] = A if i == j else Bm
            proj[i * w : (i + 1) * w, 4 * w :] = E
        net.params[f"x{l}.proj.w"].data = proj[:, :, None, None].astype(np.float32)
        net.params[f"x{l}.gate.w"].data = np.tile(rng.normal(size=(w, 4)), (4, 1))[:, :, None, None].astype(np.float32)
    x = rng.random((1, 3, 96, 192))
    inputs = {s: x.copy() for s in STREAMS}
    ent = np.repeat(rng.random((1, 1, 96, 192)), 4, axis=1)
    probe = {}
    net.forward(inputs, ent, probe=probe)
    for level in probe["branch"]:
        ref = level["camera"].data
        for s in STREAMS[1:]:
            np.testing.assert_allclose(level[s].data, ref, rtol=1e-5, atol=1e-6)


def test_every_branch_first_kernel_gets_gradient():
    rng = np.random.default_rng(8)
    net = FusionNet("entropy_deep", (96, 192), SMALL)
    logits, regs = net(_inputs(rng, (96, 192), B=2), rng.random((2, 4, 96, 192)))
    loss = T.add(T.tsum(T.elementwise_mul(logits, Tensor(rng.normal(size=logits.shape).astype(np.float32)))),
                 T.tsum(T.elementwise_mul(regs, Tensor(rng.normal(size=regs.shape).astype(np.float32)))))
    T.backward(loss)
    for s in STREAMS:
        assert np.linalg.norm(net.params[f"{s}.stem0.w"].grad) > 0


def test_trained_gate_probe():
    """Train only the gate on a task where low-entropy streams carry noise, then zero one entropy map."""
    rng = np.random.default_rng(9)
    n_br, B, h = 3, 8, 4
    gw = Tensor(np.zeros((n_br, n_br, 1, 1)), requires_grad=True)
    gb = Tensor(np.zeros(n_br), requires_grad=True)
    opt = T.Adam([gw, gb], 0.05)

    def batch():
        sig = rng.normal(size=(B, 1, h, h))
        ent = rng.random((B, n_br, h, h))
        noise = rng.normal(size=(B, n_br, h, h)) * 3.0 * (1 - ent)
        return np.repeat(sig, n_br, axis=1) + noise, ent, sig

    for _ in range(300):
        feats, ent, sig = batch()
        gate = T.sigmoid(T.conv2d(Tensor(ent), gw, gb))
        fused = T.elementwise_mul(Tensor(feats), gate)
        pred = T.scale(T.conv2d(fused, Tensor(np.ones((1, n_br, 1, 1)))), 1.0 / n_br)
        err = T.add(pred, Tensor(-sig))
        T.backward(T.tsum(T.elementwise_mul(err, err)))
        opt.step()

    feats, ent, _ = batch()
    fs = [Tensor(feats[:, i : i + 1]) for i in range(n_br)]
    zeros = lambda *s: Tensor(np.zeros(s))
    s = 1
    means, contrib = [], []
    for alpha in (1.0, 0.75, 0.5, 0.25, 0.0):
        e = ent.copy()
        e[:, s] *= alpha
        _, g = exchange_block(fs, e, zeros(n_br, 2 * n_br, 1, 1), zeros(n_br), gw, gb, return_gate=True)
        means.append(g.data[:, s].mean())
        contrib.append(np.abs(feats[:, s] * g.data[:, s]).mean())
        others = np.delete(g.data, s, axis=1)
        if alpha == 1.0:
            base_others = others
    assert all(b < a for a, b in zip(means, means[1:]))
    assert all(b < a for a, b in zip(contrib, contrib[1:]))
    # the learned gate mostly reacts to its own stream's entropy
    assert np.abs(others - base_others).mean() < 0.5 * (means[0] - means[-1])


def test_dropout_edges():
    rng = np.random.default_rng(10)
    frame = {s: rng.random((STREAM_CHANNELS[s], 8, 8)) + 0.1 for s in STREAMS}
    ent = rng.random((4, 8, 8)) + 0.1
    same, e0, kept = dropout_streams(frame, ent, p=0.0, seed=1)
    assert kept.all() and all(np.array_equal(same[s], frame[s]) for s in STREAMS)
    np.testing.assert_array_equal(e0, ent)
    counts = np.zeros(4)
    for t in range(4000):
        out, e1, kept = dropout_streams(frame, ent, p=1.0, seed=t)
        assert kept.sum() == 1
        k = int(np.flatnonzero(kept)[0])
        counts[k] += 1
        for i, s in enumerate(STREAMS):
            assert out[s].any() == (i == k) and e1[i].any() == (i == k)
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.03)


def test_dropout_statistics():
    frame = {s: np.ones((1, 2, 2)) for s in STREAMS}
    rng = np.random.default_rng(11)
    kept = np.array([dropout_streams(frame, np.ones((4, 2, 2)), 0.5, rng=rng)[2] for _ in range(10_000)])
    drop = 1 - kept.mean(axis=0)
    assert np.all((drop >= 0.47) & (drop <= 0.53))
    assert kept.any(axis=1).all()


def test_float64_cast_and_state_round_trip():
    net = FusionNet("early_concat", (96, 192), SMALL, seed=3)
    twin = FusionNet("early_concat", (96, 192), SMALL, seed=99)
    twin.load_state_dict(net.state_dict())
    for k in net.params:
        np.testing.assert_array_equal(net.params[k].data, twin.params[k].data)
    net.astype(np.float64)
    assert net.dtype == np.float64
    rng = np.random.default_rng(12)
    assert net.forward(_inputs(rng, (96, 192)))[0].data.dtype == np.float64
    with pytest.raises(KeyError):
        FusionNet("entropy_deep", (96, 192), SMALL).load_state_dict(FusionNet("late_fusion", (96, 192), SMALL).state_dict())
