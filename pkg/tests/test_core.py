import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psforge.core import (
    FormatError,
    ImageStack,
    LightSet,
    NormalMap,
    angular_error,
    decode_normal_image,
    encode_normal_image,
    error_map,
    mean_angular_error,
    read_gray,
    read_normal_png,
    read_tensor,
    write_gray16,
    write_normal_png,
    write_tensor,
)

unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 1e-3 < np.linalg.norm(v)).map(
    lambda v: np.array(v) / np.linalg.norm(v))


def flat_map(vectors):
    v = np.asarray(vectors, dtype=float).reshape(1, -1, 3)
    return NormalMap(v, np.ones(v.shape[:2], dtype=bool))


class TestLightSet:
    def test_valid(self):
        ls = LightSet([[0, 0, 1], [0.6, 0, 0.8]], [1.0, 2.0])
        assert len(ls) == 2

    @pytest.mark.parametrize("dirs,intens", [
        ([[0, 0, 1.001]], [1.0]),
        ([[0.6, 0, -0.8]], [1.0]),
        ([[0, 0, 1]], [0.0]),
        ([[0, 0, 1]], [1.0, 1.0]),
        ([[np.nan, 0, 1]], [1.0]),
    ])
    def test_rejects(self, dirs, intens):
        with pytest.raises(ValueError):
            LightSet(dirs, intens)

    def test_subset(self):
        ls = LightSet.from_directions([[0, 0, 1], [1, 0, 1], [0, 1, 1]])
        sub = ls.subset([0, 2])
        assert len(sub) == 2 and np.allclose(sub.directions[1], [0, 1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_image_stack_rejects_negative():
    with pytest.raises(ValueError):
        ImageStack(-np.ones((2, 3, 3)), np.ones((3, 3), bool))


def test_image_stack_light_count():
    stack = ImageStack(np.zeros((2, 3, 3)), np.ones((3, 3), bool))
    with pytest.raises(ValueError):
        stack.check_lights(LightSet.from_directions([[0, 0, 1]]))


def test_normal_map_requires_unit():
    with pytest.raises(ValueError):
        NormalMap(np.full((1, 1, 3), 0.5), np.ones((1, 1), bool))
    # unmasked pixels are free
    NormalMap(np.zeros((1, 1, 3)), np.zeros((1, 1), bool))


class TestAngularError:
    def test_examples(self):
        assert angular_error([0, 0, 1], [0, 0, 1]) == 0
        assert angular_error([1, 0, 0], [0, 1, 0]) == pytest.approx(90)
        assert angular_error([0, 0, 1], [0, 0, -1]) == pytest.approx(180)

    def test_clamps_rounding(self):
        a = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
        assert angular_error(a, a * (1 + 1e-15)) == 0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            angular_error([np.nan, 0, 1], [0, 0, 1])

    @given(unit, unit)
    def test_symmetric(self, a, b):
        assert angular_error(a, b) == angular_error(b, a)

    @given(unit)
    def test_self_zero(self, a):
        assert angular_error(a, a) == 0


class TestMeanAngularError:
    def test_identity(self):
        n = flat_map([[0, 0, 1], [0.6, 0, 0.8]])
        assert mean_angular_error(n, n) == 0

    def test_half_and_half(self):
        t = np.radians(10)
        est = flat_map([[0, 0, 1], [0, 0, 1], [np.sin(t), 0, np.cos(t)], [0, np.sin(t), np.cos(t)]])
        gt = flat_map([[0, 0, 1]] * 4)
        assert mean_angular_error(est, gt) == pytest.approx(5)

    def test_three_pixel_fixture(self):
        est = flat_map([[0, 0, 1], [1, 0, 0], [0, 1, 0]])
        gt = flat_map([[0, 0, 1]] * 3)
        assert mean_angular_error(est, gt) == pytest.approx(60)

    def test_intersected_mask(self):
        est = flat_map([[0, 0, 1], [1, 0, 0]])
        gt = NormalMap(est.normals.copy(), np.array([[True, False]]))
        gt.normals[0, 1] = [0, 0, 1]
        assert mean_angular_error(est, gt) == 0

    def test_empty_intersection(self):
        est = NormalMap(np.array([[[0, 0, 1.0], [0, 0, 1]]]), np.array([[True, False]]))
        gt = NormalMap(est.normals, np.array([[False, True]]))
        with pytest.raises(ValueError):
            mean_angular_error(est, gt)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            error_map(flat_map([[0, 0, 1]]), flat_map([[0, 0, 1]] * 2))


class TestTensorFile:
    def test_rank1(self, tmp_path):
        write_tensor(tmp_path / "a.pst", np.array([1, 2, 3], dtype=np.float32))
        out = read_tensor(tmp_path / "a.pst")
        assert out.shape == (3,) and out.tolist() == [1, 2, 3]

    def test_rank3_zeros(self, tmp_path):
        write_tensor(tmp_path / "z.pst", np.zeros((2, 2, 1)))
        out = read_tensor(tmp_path / "z.pst")
        assert out.shape == (2, 2, 1) and not out.any()

    def test_layout(self, tmp_path):
        write_tensor(tmp_path / "a.pst", np.array([[1.5, 2]], dtype=np.float32))
        raw = (tmp_path / "a.pst").read_bytes()
        assert raw[:8] == b"PSTENSR0"
        assert raw[8:20] == np.array([2, 1, 2], "<u4").tobytes()
        assert raw[20:] == np.array([1.5, 2], "<f4").tobytes()

    def test_truncated(self, tmp_path):
        write_tensor(tmp_path / "a.pst", np.ones((4, 4)))
        p = tmp_path / "a.pst"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.pst"
        p.write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(FormatError):
            read_tensor(p)

    def test_rejects_non_finite(self, tmp_path):
        with pytest.raises(ValueError):
            write_tensor(tmp_path / "a.pst", np.array([np.inf]))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=1, max_size=64))
    def test_round_trip_bit_exact(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("t") / "r.pst"
        a = np.array(values, dtype=np.float32)
        write_tensor(p, a)
        assert read_tensor(p).tobytes() == a.tobytes()


class TestNormalImage:
    def test_zenith(self):
        enc = encode_normal_image(flat_map([[0, 0, 1]]))
        assert enc[0, 0].tolist() == [32768, 32768, 65535]

    def test_negative_x(self):
        assert encode_normal_image(flat_map([[-1, 0, 0]]))[0, 0, 0] == 0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        n = rng.normal(size=(4, 5, 3))
        n[..., 2] = np.abs(n[..., 2])
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        nm = NormalMap(n, np.ones((4, 5), bool))
        enc = encode_normal_image(nm)
        dec = decode_normal_image(enc)
        assert np.array_equal(encode_normal_image(dec), enc)
        err, _ = error_map(dec, nm)
        assert err.max() < 0.01

    def test_requires_three_channels(self):
        with pytest.raises(ValueError):
            decode_normal_image(np.zeros((2, 2), np.uint16))

    def test_png_round_trip(self, tmp_path):
        nm = flat_map([[0.6, 0, 0.8], [0, -0.6, 0.8]])
        write_normal_png(tmp_path / "n.png", nm)
        back = read_normal_png(tmp_path / "n.png")
        err, _ = error_map(back, nm)
        assert err.max() < 0.01


def test_gray16_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_gray16(tmp_path / "g.png", img)
    assert np.abs(read_gray(tmp_path / "g.png") - img).max() <= 0.5 / 65535 + 1e-7
