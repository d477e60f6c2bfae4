"""On-disk dataset layout shared by rendered scenes and DiLiGenT-style captures.

A dataset directory holds:

    images.pst              (m, H, W) linear float images; optional if PNGs are present
    001.png, 002.png, ...   16-bit grayscale images (or the names listed in filenames.txt)
    light_directions.txt    one "lx ly lz" per line
    light_intensities.txt   one or three scalars per line (three are averaged)
    mask.png                foreground mask
    normal_gt.pst / Normal_gt.png   optional ground-truth normals
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    FormatError,
    ImageStack,
    LightSet,
    NormalMap,
    read_gray,
    read_mask,
    read_normals,
    read_tensor,
    write_gray16,
    write_mask,
    write_normal_png,
    write_normals,
    write_tensor,
)
from .synth import RenderedSample


@dataclass(frozen=True)
class DatasetLayout:
    images_tensor: str = "images.pst"
    filenames: str = "filenames.txt"
    lights: str = "light_directions.txt"
    intensities: str = "light_intensities.txt"
    mask: str = "mask.png"
    normals: tuple = ("normal_gt.pst", "Normal_gt.png", "normal_gt.png")


@dataclass
class Dataset:
    name: str
    stack: ImageStack
    lights: LightSet
    gt: NormalMap | None = None


def _read_rows(path: Path, widths: tuple) -> np.ndarray:
    rows = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in widths:
            raise FormatError(f"{path}:{i}: expected {' or '.join(map(str, widths))} values, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return rows


def read_lights(directory, layout: DatasetLayout = DatasetLayout()) -> LightSet:
    d = Path(directory)
    dirs = np.array(_read_rows(d / layout.lights, (3,)), dtype=np.float64).reshape(-1, 3)
    ipath = d / layout.intensities
    if ipath.exists():
        rows = _read_rows(ipath, (1, 3))
        intens = np.array([np.mean(r) for r in rows])
    else:
        intens = np.ones(len(dirs))
    if len(intens) != len(dirs):
        raise FormatError(f"{len(dirs)} light directions but {len(intens)} intensities")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise FormatError("light directions are not unit vectors")
    return LightSet(dirs / norms[:, None], intens)


def write_lights(directory, lights: LightSet, layout: DatasetLayout = DatasetLayout()) -> None:
    d = Path(directory)
    (d / layout.lights).write_text("".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in lights.directions))
    (d / layout.intensities).write_text("".join(f"{e:.17g}\n" for e in lights.intensities))


def _image_paths(d: Path, layout: DatasetLayout) -> list[Path]:
    listing = d / layout.filenames
    if listing.exists():
        return [d / name.strip() for name in listing.read_text().splitlines() if name.strip()]
    numbered = [p for p in d.glob("*.png") if re.fullmatch(r"\d+", p.stem)]
    return sorted(numbered, key=lambda p: int(p.stem))


def load_dataset(directory, layout: DatasetLayout = DatasetLayout(), exclude=()) -> Dataset:
    """Load images, lights, mask and (if present) ground truth; ``exclude`` lists 1-based image numbers."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    lights = read_lights(d, layout)
    mask = read_mask(d / layout.mask)
    tensor = d / layout.images_tensor
    if tensor.exists():
        images = read_tensor(tensor)
    else:
        paths = _image_paths(d, layout)
        if not paths:
            raise FormatError(f"no images found in {d}")
        images = np.stack([read_gray(p) for p in paths])
    if len(images) != len(lights):
        raise FormatError(f"{len(images)} images but {len(lights)} lights in {d}")
    if images.shape[1:] != mask.shape:
        raise FormatError(f"mask shape {mask.shape} does not match images {images.shape[1:]}")
    keep = np.ones(len(images), dtype=bool)
    for j in exclude:
        if not 1 <= j <= len(images):
            raise ValueError(f"excluded image {j} out of range 1..{len(images)}")
        keep[j - 1] = False
    stack = ImageStack(images[keep], mask)
    lights = lights.subset(keep)
    gt = None
    for name in layout.normals:
        if (d / name).exists():
            gt = read_normals(d / name, mask)
            break
    return Dataset(d.name, stack, lights, gt)


def save_rendered(directory, sample: RenderedSample, layout: DatasetLayout = DatasetLayout()) -> None:
    """Write a rendered sample in the dataset layout, plus shadow masks and heights."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images = sample.stack.images
    write_tensor(d / layout.images_tensor, images)
    peak = float(images.max()) or 1.0
    width = max(3, len(str(len(images))))
    names = []
    for j, img in enumerate(images, 1):
        name = f"{j:0{width}d}.png"
        write_gray16(d / name, img / peak)
        names.append(name)
    (d / layout.filenames).write_text("\n".join(names) + "\n")
    (d / "preview_scale.txt").write_text(f"{peak:.9g}\n")
    write_lights(d, sample.lights, layout)
    write_mask(d / layout.mask, sample.stack.mask)
    write_normals(d / "normal_gt.pst", sample.normals)
    write_normal_png(d / "Normal_gt.png", sample.normals)
    write_tensor(d / "shadows.pst", sample.shadow_masks.astype(np.float32))
    write_tensor(d / "heights.pst", sample.scene.heights)
