"""Observation maps: per-pixel projection of (intensity, light) pairs onto a w x w grid.

A light direction ``l`` lands in cell ``(u, v) = (floor(w (l_x + 1) / 2), floor(w (l_y + 1) / 2))``
and contributes ``I / L``. Contributions that collide in one cell are averaged, and the whole
map is divided by the largest contribution so values lie in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LightSet

DEFAULT_W = 32


@dataclass(frozen=True)
class ObservationMap:
    cells: np.ndarray
    hits: np.ndarray

    @property
    def w(self) -> int:
        return self.cells.shape[0]


@dataclass(frozen=True)
class PixelObservations:
    values: np.ndarray
    lights: LightSet

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(v) != len(self.lights):
            raise ValueError(f"{len(v)} values but {len(self.lights)} lights")
        object.__setattr__(self, "values", v)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_about_z(vectors, theta: float) -> np.ndarray:
    """Rotate the (x, y) part of 3-vectors by ``theta``; z is copied untouched."""
    v = np.asarray(vectors, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite vector")
    out = v.copy()
    c, s = np.cos(theta), np.sin(theta)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


def rotate_light(l, theta: float) -> np.ndarray:
    return rotate_about_z(l, theta)


def rotate_normal(n, theta: float) -> np.ndarray:
    return rotate_about_z(n, theta)


def light_cells(directions: np.ndarray, w: int = DEFAULT_W) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized grid indices (u, v) of light directions, clamped into [0, w-1]."""
    d = np.asarray(directions, dtype=np.float64)
    u = np.clip(np.floor(w * (d[..., 0] + 1.0) / 2.0), 0, w - 1).astype(np.int64)
    v = np.clip(np.floor(w * (d[..., 1] + 1.0) / 2.0), 0, w - 1).astype(np.int64)
    return u, v


def project_light(l, w: int = DEFAULT_W) -> tuple[int, int]:
    l = np.asarray(l, dtype=np.float64)
    if not np.all(np.isfinite(l)) or abs(np.linalg.norm(l) - 1.0) > 1e-6:
        raise ValueError(f"light {l} is not a unit vector")
    if l[2] < 0:
        raise ValueError(f"light {l} faces away from the camera")
    u, v = light_cells(l, w)
    return int(u), int(v)


def build_maps(values: np.ndarray, directions: np.ndarray, intensities: np.ndarray,
               w: int = DEFAULT_W, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Build observation maps for a batch of pixels.

    values: (N, m) intensities; directions: (m, 3) shared or (N, m, 3) per pixel;
    mask: optional (N, m) boolean selecting which observations each pixel uses.
    Returns ``cells`` (N, w, w) and ``hits`` (N, w, w).
    Pixels with no positive observation get an all-zero map; use ``max_ratio`` to
    detect them.

    Contributions are summed in a canonical (cell, value) order, so any permutation
    of the observations produces a bit-identical map.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None]
    n, m = values.shape
    ratio = values / np.asarray(intensities, dtype=np.float64)
    u, v = light_cells(directions, w)
    cell = np.broadcast_to(u * w + v, (n, m))
    if mask is None:
        mask = np.ones((n, m), dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (n, m))

    order = np.lexsort((ratio, cell), axis=-1)
    rows = np.arange(n)[:, None]
    ratio_s = ratio[rows, order]
    cell_s = cell[rows, order]
    used = mask[rows, order]

    flat = (rows * (w * w) + cell_s)[used]
    sums = np.bincount(flat, weights=ratio_s[used], minlength=n * w * w)
    hits = np.bincount(flat, minlength=n * w * w)
    cells = np.divide(sums, hits, out=np.zeros_like(sums), where=hits > 0)

    peak = np.where(mask, ratio, -np.inf).max(axis=1)
    peak = np.where(peak > 0, peak, np.inf)
    cells = cells.reshape(n, w * w) / peak[:, None]
    return cells.reshape(n, w, w), hits.reshape(n, w, w)


def max_ratio(values: np.ndarray, intensities: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    ratio = np.atleast_2d(values) / np.asarray(intensities)
    if mask is not None:
        ratio = np.where(mask, ratio, -np.inf)
    return ratio.max(axis=1)


def build_observation_map(obs: PixelObservations, w: int = DEFAULT_W) -> ObservationMap:
    if not np.all(np.isfinite(obs.values)) or np.any(obs.values < 0):
        raise ValueError("observations must be finite and non-negative")
    if max_ratio(obs.values, obs.lights.intensities)[0] <= 0:
        raise ValueError("all observations are zero; map cannot be normalized")
    cells, hits = build_maps(obs.values[None], obs.lights.directions, obs.lights.intensities, w)
    return ObservationMap(cells[0], hits[0])


def rotated_map(obs: PixelObservations, theta: float, w: int = DEFAULT_W) -> ObservationMap:
    lights = LightSet(rotate_light(obs.lights.directions, theta), obs.lights.intensities)
    return build_observation_map(PixelObservations(obs.values, lights), w)
