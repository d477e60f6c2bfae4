import numpy as np
import pytest

from psforge.core import FormatError, write_gray16, write_mask
from psforge.dataset import DatasetLayout, load_dataset, read_lights


def make_capture(d, m=4, size=6, intensity_line="1 1 1"):
    d.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(m, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    (d / "light_directions.txt").write_text("".join(f"{x} {y} {z}\n" for x, y, z in dirs))
    (d / "light_intensities.txt").write_text(f"{intensity_line}\n" * m)
    for j in range(m):
        write_gray16(d / f"{j + 1:03d}.png", np.full((size, size), (j + 1) / 10))
    write_mask(d / "mask.png", np.ones((size, size), bool))
    return dirs


def test_numbered_pngs(tmp_path):
    dirs = make_capture(tmp_path / "c")
    ds = load_dataset(tmp_path / "c")
    assert ds.stack.m == 4 and ds.gt is None
    assert np.allclose(ds.lights.directions, dirs)
    assert np.allclose(ds.stack.images[:, 0, 0], [0.1, 0.2, 0.3, 0.4], atol=1e-4)


def test_three_channel_intensities_are_averaged(tmp_path):
    make_capture(tmp_path / "c", intensity_line="1.0 2.0 3.0")
    assert np.allclose(read_lights(tmp_path / "c").intensities, 2.0)


def test_filenames_listing(tmp_path):
    d = tmp_path / "c"
    make_capture(d)
    (d / "filenames.txt").write_text("004.png\n003.png\n002.png\n001.png\n")
    ds = load_dataset(d)
    assert np.allclose(ds.stack.images[:, 0, 0], [0.4, 0.3, 0.2, 0.1], atol=1e-4)


def test_exclude(tmp_path):
    make_capture(tmp_path / "c")
    ds = load_dataset(tmp_path / "c", exclude=[1, 3])
    assert ds.stack.m == 2 and len(ds.lights) == 2
    assert np.allclose(ds.stack.images[:, 0, 0], [0.2, 0.4], atol=1e-4)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "c", exclude=[9])


def test_count_mismatch(tmp_path):
    d = tmp_path / "c"
    make_capture(d)
    (d / "004.png").unlink()
    with pytest.raises(FormatError):
        load_dataset(d)


def test_bad_line(tmp_path):
    d = tmp_path / "c"
    make_capture(d)
    (d / "light_directions.txt").write_text("0 0\n")
    with pytest.raises(FormatError):
        read_lights(d)


def test_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "none")


def test_custom_layout(tmp_path):
    d = tmp_path / "c"
    make_capture(d)
    (d / "light_directions.txt").rename(d / "L.txt")
    ds = load_dataset(d, DatasetLayout(lights="L.txt"))
    assert ds.stack.m == 4
