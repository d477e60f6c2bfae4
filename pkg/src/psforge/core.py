"""Shared types, file formats and angular-error metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

TENSOR_MAGIC = b"PSTENSR0"
UINT16_MAX = 65535


class FormatError(ValueError):
    """Raised when a file on disk does not match its declared format."""


@dataclass(frozen=True)
class LightSet:
    """Unit lighting directions (camera frame, +z toward the viewer) and intensities."""

    directions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        e = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(d) != len(e):
            raise ValueError(f"{len(d)} directions but {len(e)} intensities")
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(e)):
            raise ValueError("non-finite light data")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
            raise ValueError("light directions must be unit length")
        if np.any(d[:, 2] <= 0):
            raise ValueError("light directions must lie in the front hemisphere (z > 0)")
        if np.any(e <= 0):
            raise ValueError("light intensities must be strictly positive")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", e)

    def __len__(self):
        return len(self.directions)

    @classmethod
    def from_directions(cls, directions, intensities=None) -> "LightSet":
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        if intensities is None:
            intensities = np.ones(len(d))
        return cls(d, intensities)

    def subset(self, index) -> "LightSet":
        return LightSet(self.directions[index], self.intensities[index])


@dataclass(frozen=True)
class ImageStack:
    """m linear grayscale images of identical size plus a foreground mask."""

    images: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 3:
            raise ValueError("images must be an (m, H, W) array")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != imgs.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} != image shape {imgs.shape[1:]}")
        if np.any(imgs < 0) or not np.all(np.isfinite(imgs)):
            raise ValueError("image values must be finite and non-negative")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "mask", mask)

    @property
    def m(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:]

    def check_lights(self, lights: LightSet):
        if len(lights) != self.m:
            raise ValueError(f"{self.m} images but {len(lights)} lights")

    def subset(self, index) -> "ImageStack":
        return ImageStack(self.images[index], self.mask)


@dataclass
class NormalMap:
    """Per-pixel normals. Pixels outside ``mask`` are ignored (conventionally zero).

    ``flagged`` marks pixels a solver gave up on; they are excluded from ``mask``.
    """

    normals: np.ndarray
    mask: np.ndarray
    flagged: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.shape != self.mask.shape + (3,):
            raise ValueError(f"normals {self.normals.shape} do not match mask {self.mask.shape}")
        norms = np.linalg.norm(self.normals[self.mask], axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("masked normals must be unit length")
        if self.flagged is None:
            self.flagged = np.zeros_like(self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def angular_error(a, b) -> float:
    """Angle between two unit vectors in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input to angular_error")
    return float(angular_errors(a, b))


def angular_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized angle in degrees between unit vectors along the last axis."""
    # atan2 form: exactly 0 for a == b (acos loses ~1e-6 deg near 1) and exactly symmetric
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def error_map(est: NormalMap, gt: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel angular error (degrees) and the intersected mask it is valid on."""
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    mask = est.mask & gt.mask
    err = np.zeros(mask.shape)
    err[mask] = angular_errors(est.normals[mask], gt.normals[mask])
    return err, mask


def mean_angular_error(est: NormalMap, gt: NormalMap) -> float:
    err, mask = error_map(est, gt)
    if not mask.any():
        raise ValueError("masks do not intersect")
    return float(err[mask].mean())


# -- tensor files --------------------------------------------------------------------


def write_tensor(path, array) -> None:
    """Write ``array`` as a PSTENSR0 file: magic, u32 rank, u32 dims, f32 LE payload."""
    arr = np.asarray(array)
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ValueError(f"dims must be positive, got {arr.shape}")
    payload = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(payload)):
        raise ValueError("tensor payload must be finite")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(payload).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + 4 * rank
    if rank == 0 or len(raw) < offset:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    expected = int(np.prod(dims)) * 4
    if len(raw) - offset != expected:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).copy()


# -- images --------------------------------------------------------------------------


def read_gray(path) -> np.ndarray:
    """Read an 8/16-bit PNG as linear float32 in [0, 1]. Color input is channel-averaged."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read image {path}")
    scale = UINT16_MAX if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float32) / scale
    if img.ndim == 3:
        img = img[..., :3].mean(axis=-1)
    return img


def write_gray16(path, image: np.ndarray) -> None:
    """Write float values in [0, 1] as a 16-bit grayscale PNG (values clipped)."""
    q = np.round(np.clip(image, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write {path}")


def read_mask(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read mask {path}")
    if img.ndim == 3:
        img = img.max(axis=-1)
    return img > 0


def write_mask(path, mask: np.ndarray) -> None:
    cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8))


def encode_normal_image(nmap: NormalMap) -> np.ndarray:
    """Map normals to 16-bit RGB via (n + 1) / 2. Unmasked pixels become 0."""
    enc = np.round((nmap.normals * 0.5 + 0.5) * UINT16_MAX)
    enc[~nmap.mask] = 0
    return enc.astype(np.uint16)


def decode_normal_image(image: np.ndarray, mask: np.ndarray | None = None) -> NormalMap:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"normal image must have 3 channels, got shape {image.shape}")
    scale = UINT16_MAX if image.dtype == np.uint16 else (255.0 if image.dtype == np.uint8 else 1.0)
    n = image.astype(np.float64) / scale * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1)
    if mask is None:
        mask = image.any(axis=-1)
    mask = np.asarray(mask, dtype=bool) & (norm > 1e-6)
    out = np.zeros_like(n)
    out[mask] = n[mask] / norm[mask][:, None]
    return NormalMap(out, mask)


def write_normal_png(path, nmap: NormalMap) -> None:
    rgb = encode_normal_image(nmap)
    if not cv2.imwrite(str(path), rgb[..., ::-1]):
        raise OSError(f"cannot write {path}")


def read_normal_png(path, mask: np.ndarray | None = None) -> NormalMap:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read normal image {path}")
    if img.ndim != 3:
        raise ValueError(f"{path}: normal image must have 3 channels")
    return decode_normal_image(img[..., 2::-1], mask)


def read_normals(path, mask: np.ndarray | None = None) -> NormalMap:
    """Load a normal map from an (H, W, 3) tensor file or an encoded PNG."""
    path = Path(path)
    if path.suffix == ".png":
        return read_normal_png(path, mask)
    n = read_tensor(path).astype(np.float64)
    if n.ndim != 3 or n.shape[-1] != 3:
        raise FormatError(f"{path}: expected (H, W, 3) normals, got {n.shape}")
    norm = np.linalg.norm(n, axis=-1)
    valid = norm > 1e-6 if mask is None else (np.asarray(mask, dtype=bool) & (norm > 1e-6))
    out = np.zeros_like(n)
    out[valid] = n[valid] / norm[valid][:, None]
    return NormalMap(out, valid)


def write_normals(path, nmap: NormalMap) -> None:
    n = np.where(nmap.mask[..., None], nmap.normals, 0.0)
    write_tensor(path, n)
