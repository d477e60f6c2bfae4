import numpy as np
import pytest

from psforge.micronet import (
    AdamState,
    ArchConfig,
    AvgPool2,
    Concat,
    Conv,
    Dense,
    Dropout,
    FingerprintError,
    Flatten,
    L2Norm,
    MicroNet,
    ReLU,
    Sequential,
    adam_step,
    conv3x3_backward,
    conv3x3_forward,
    finite_diff_check,
    fingerprint,
    l2norm,
    layer_specs,
    load_weights,
    manifest_path,
    mse_loss,
    network_forward,
    save_weights,
)

F64 = np.float64


def reference_conv(x, k, b, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    f, c, kh, kw = k.shape
    h, w = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros((f, h, w))
    for i in range(h):
        for j in range(w):
            out[:, i, j] = np.einsum("fcij,cij->f", k, xp[:, i:i + kh, j:j + kw]) + b
    return out


class TestConv:
    def test_ones_valid(self):
        out, _ = conv3x3_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), "valid")
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9

    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 5, 6))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1
        out, _ = conv3x3_forward(x, k, np.zeros(2))
        assert np.array_equal(out, x)

    def test_bias_only(self):
        out, _ = conv3x3_forward(np.random.default_rng(0).random((3, 4, 4)), np.zeros((2, 3, 3, 3)),
                                 np.array([1.5, -2.0]))
        assert np.all(out[0] == 1.5) and np.all(out[1] == -2.0)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_matches_reference(self, padding):
        rng = np.random.default_rng(1)
        x, k, b = rng.normal(size=(3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out, _ = conv3x3_forward(x, k, b, padding)
        ref = reference_conv(x, k, b, 1 if padding == "same" else 0)
        assert np.abs(out - ref).max() < 1e-12

    def test_zero_upstream(self):
        rng = np.random.default_rng(2)
        out, cache = conv3x3_forward(rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        dx, dk, db = conv3x3_backward(np.zeros_like(out), cache)
        assert not dx.any() and not dk.any() and not db.any()

    def test_bias_grad_is_sum(self):
        rng = np.random.default_rng(3)
        out, cache = conv3x3_forward(rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        dout = rng.normal(size=out.shape)
        _, _, db = conv3x3_backward(dout, cache)
        assert np.allclose(db, dout.sum(axis=(0, 2, 3)))

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(4)
        x, k, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        R = rng.normal(size=(3, 5, 5))
        out, cache = conv3x3_forward(x, k, b)
        dx, dk, db = conv3x3_backward(R, cache)
        f = lambda x_, k_, b_: np.sum(R * conv3x3_forward(x_, k_, b_)[0])
        for arr, grad in ((x, dx), (k, dk), (b, db)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + 1e-6
                fp = f(x, k, b)
                arr[idx] = orig - 1e-6
                fm = f(x, k, b)
                arr[idx] = orig
                num[idx] = (fp - fm) / 2e-6
            assert np.abs(num - grad).max() / np.abs(grad).max() < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv3x3_forward(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            conv3x3_forward(np.ones((1, 4, 4)), np.ones((1, 1, 5, 5)), np.zeros(1))


class TestSimpleLayers:
    def test_relu(self):
        assert ReLU().forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]

    def test_avg_pool(self):
        out = AvgPool2().forward(np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1))
        assert out.shape == (1, 1, 1, 1) and out.item() == 2.5

    def test_l2norm(self):
        assert np.allclose(l2norm(np.array([3.0, 4, 0]))[0], [0.6, 0.8, 0])
        with pytest.raises(ValueError):
            l2norm(np.zeros(3))

    def test_dropout_modes(self):
        x = np.ones((200, 50))
        d = Dropout(0.2)
        assert d.forward(x, train=False) is x
        y = d.forward(x, train=True)
        assert set(np.unique(y)) <= {0.0, 1.25}
        assert abs((y == 0).mean() - 0.2) < 0.02

    def test_concat_stacks_channels(self):
        c = Concat([ReLU()])
        x = np.array([[-1.0, 2.0]]).reshape(1, 1, 1, 2)
        assert c.forward(x).reshape(-1).tolist() == [-1, 2, 0, 2]

    def test_mse(self):
        loss, _ = mse_loss(np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))
        assert loss == pytest.approx(2 / 3)
        assert mse_loss(np.array([0.6, 0, 0.8]), np.array([0.6, 0, 0.8]))[0] == 0

    def test_mse_gradient(self):
        rng = np.random.default_rng(0)
        p, g = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, grad = mse_loss(p, g)
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            q = p.copy()
            q[idx] += 1e-6
            r = p.copy()
            r[idx] -= 1e-6
            num[idx] = (mse_loss(q, g)[0] - mse_loss(r, g)[0]) / 2e-6
        assert np.abs(num - grad).max() / np.abs(grad).max() < 1e-6


def nhwc(rng, *shape):
    return rng.normal(size=shape)


class TestGradientCheck:
    def test_dense_linear(self):
        rng = np.random.default_rng(0)
        rep = finite_diff_check(Dense(6, 4, rng, F64), rng.normal(size=(3, 6)))
        assert rep.max_error < 1e-7

    @pytest.mark.parametrize("name,make,shape", [
        ("conv3x3", lambda r: Conv(3, 4, 3, r, F64), (2, 6, 6, 3)),
        ("conv1x1", lambda r: Conv(3, 4, 1, r, F64), (2, 6, 6, 3)),
        ("relu", lambda r: ReLU(), (2, 4, 4, 3)),
        ("avgpool", lambda r: AvgPool2(), (2, 4, 4, 3)),
        ("flatten", lambda r: Flatten(), (2, 4, 4, 3)),
        ("l2norm", lambda r: L2Norm(), (5, 3)),
        ("concat", lambda r: Concat([ReLU(), Conv(3, 2, 3, r, F64)]), (2, 5, 5, 3)),
        ("transition", lambda r: Sequential([Conv(3, 4, 1, r, F64), AvgPool2()]), (2, 4, 4, 3)),
    ])
    def test_layers(self, name, make, shape):
        rng = np.random.default_rng(1)
        rep = finite_diff_check(make(rng), rng.normal(size=shape), probes=20)
        assert rep.max_error < 1e-4, (name, rep.errors)

    def test_dropout_frozen(self):
        rng = np.random.default_rng(2)
        d = Dropout(0.2)
        x = rng.normal(size=(4, 10))
        d.forward(x, train=True)
        d.frozen = True
        assert finite_diff_check(d, x, train=True).max_error < 1e-7

    def test_full_network(self, small_net64):
        net, x = small_net64
        rep = finite_diff_check(net, x, probes=4, train=True)
        assert rep.max_error < 1e-4, rep.errors

    def test_negative_control(self):
        rng = np.random.default_rng(3)
        layer = Dense(5, 3, rng, F64)
        honest = layer.backward

        def flipped(dout):
            dx = honest(dout)
            layer.grads["W"] = -layer.grads["W"]
            return dx

        layer.backward = flipped
        assert finite_diff_check(layer, rng.normal(size=(4, 5))).max_error > 1e-1


@pytest.fixture(scope="module")
def small_net64():
    cfg = ArchConfig(w=8, hidden=16)
    net = MicroNet(cfg, seed=0, dtype=F64)
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    net.forward(x, train=True)
    net.freeze_dropout(True)
    return net, x


class TestNetwork:
    def test_unit_output(self):
        net = MicroNet(seed=0)
        maps = np.random.default_rng(0).random((8, 1, 32, 32)).astype(np.float32)
        out = net.forward(maps)
        assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-6

    def test_zero_map(self):
        out = network_forward(np.zeros((1, 32, 32)), MicroNet(seed=0))
        assert np.all(np.isfinite(out)) and abs(np.linalg.norm(out) - 1) < 1e-6

    def test_deterministic_infer(self):
        x = np.random.default_rng(1).random((1, 32, 32))
        a = network_forward(x, MicroNet(seed=3))
        b = network_forward(x, MicroNet(seed=3))
        assert a.tobytes() == b.tobytes()

    def test_fingerprint_mismatch(self):
        net = MicroNet(seed=0)
        with pytest.raises(FingerprintError):
            network_forward(np.zeros((1, 32, 32)), net, expected_fingerprint="0" * 16)

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            MicroNet(seed=0).forward(np.zeros((1, 1, 16, 16)))

    def test_layer_chain(self):
        specs = layer_specs(ArchConfig())
        for i, (a, b) in enumerate(zip(specs, specs[1:])):
            if b.kind == "concat":
                # concat takes the skip input from before relu/conv/dropout
                assert tuple(specs[i - 2].in_shape) == tuple(b.in_shape)
            else:
                assert int(np.prod(a.out_shape)) == int(np.prod(b.in_shape))
        assert tuple(specs[0].in_shape) == (1, 32, 32) and tuple(specs[-1].out_shape) == (3,)
        assert not any("batch" in s.kind for s in specs)
        assert fingerprint(ArchConfig()) != fingerprint(ArchConfig(hidden=64))

    def test_save_load(self, tmp_path):
        net = MicroNet(seed=5)
        save_weights(tmp_path / "m.pst", net)
        back = load_weights(tmp_path / "m.pst")
        x = np.random.default_rng(0).random((3, 1, 32, 32)).astype(np.float32)
        assert np.array_equal(net.forward(x), back.forward(x))

    def test_load_tampered_manifest(self, tmp_path):
        save_weights(tmp_path / "m.pst", MicroNet(seed=5))
        mp = manifest_path(tmp_path / "m.pst")
        mp.write_text(mp.read_text().replace('"hidden": 128', '"hidden": 64'))
        with pytest.raises(FingerprintError):
            load_weights(tmp_path / "m.pst")


class TestAdam:
    def test_zero_gradient(self):
        p = {"a": np.array([1.0, -2.0])}
        st = AdamState()
        out = adam_step(p, {"a": np.zeros(2)}, st)
        assert np.array_equal(out["a"], p["a"]) and st.t == 1

    def test_first_step(self):
        st = AdamState()
        out = adam_step({"a": np.zeros(4)}, {"a": np.ones(4)}, st)
        assert np.all(np.abs(out["a"] + 0.001) < 1e-6)

    def test_monotone(self):
        st = AdamState()
        p = {"a": np.array([0.0, 0.0])}
        g = {"a": np.array([2.0, -3.0])}
        p1 = adam_step(p, g, st)
        p2 = adam_step(p1, g, st)
        assert np.all(np.sign(p1["a"] - p["a"]) == -np.sign(g["a"]))
        assert np.all(np.sign(p2["a"] - p1["a"]) == -np.sign(g["a"]))

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            adam_step({"a": np.zeros(1)}, {"a": np.array([np.nan])}, AdamState())
