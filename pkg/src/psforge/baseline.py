"""Per-pixel Lambertian least squares, with an optional dark-observation cut."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageStack, LightSet, NormalMap

# 655 out of a 16-bit full scale
DEFAULT_THRESHOLD = 655 / 65535
COND_FALLBACK = 1e6
COND_LIMIT = 1e8


class Unrecoverable(ValueError):
    """Too few or degenerate observations to fit a normal."""


@dataclass(frozen=True)
class LsSolution:
    normal: np.ndarray
    albedo: float
    residual: float
    used_count: int


def threshold_shadow(values, lights: LightSet, tau: float = DEFAULT_THRESHOLD):
    """Drop observations darker than ``tau``. Returns (values, lights, count)."""
    values = np.asarray(values, dtype=np.float64)
    keep = values >= tau
    count = int(keep.sum())
    if count < 3:
        raise Unrecoverable(f"only {count} observations at or above {tau}")
    return values[keep], lights.subset(keep), count


def lambertian_ls(values, lights: LightSet) -> LsSolution:
    """Least-squares b with L b = I / intensity; normal = b / |b|, albedo = |b|."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(lights):
        raise ValueError(f"{len(values)} values but {len(lights)} lights")
    if len(values) < 3:
        raise Unrecoverable("need at least 3 observations")
    L = lights.directions
    i = values / lights.intensities
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise Unrecoverable(f"light matrix is rank deficient (condition number {cond:.3g})")
    if cond > COND_FALLBACK:
        b = np.linalg.lstsq(L, i, rcond=None)[0]
    else:
        b = np.linalg.solve(L.T @ L, L.T @ i)
    albedo = float(np.linalg.norm(b))
    if albedo == 0:
        raise Unrecoverable("zero solution")
    residual = float(np.sqrt(np.mean((L @ b - i) ** 2)))
    return LsSolution(b / albedo, albedo, residual, len(values))


@dataclass
class BaselineResult:
    normals: NormalMap
    albedo: np.ndarray
    residual: np.ndarray
    used: np.ndarray


def baseline_map(stack: ImageStack, lights: LightSet, tau: float = DEFAULT_THRESHOLD,
                 mask: np.ndarray | None = None) -> BaselineResult:
    """Threshold then least squares at every masked pixel; failures become flagged pixels.

    Solved in batch through per-pixel normal equations; pixels whose system is
    ill-conditioned go through ``lambertian_ls`` one at a time.
    """
    stack.check_lights(lights)
    mask = stack.mask if mask is None else np.asarray(mask, dtype=bool)
    pixels = np.argwhere(mask)
    vals = stack.images[:, pixels[:, 0], pixels[:, 1]].T.astype(np.float64) / lights.intensities
    keep = stack.images[:, pixels[:, 0], pixels[:, 1]].T >= tau
    L = lights.directions
    w = keep.astype(np.float64)
    ata = np.einsum("pm,mi,mj->pij", w, L, L)
    atb = np.einsum("pm,pm,mi->pi", w, vals, L)
    used = keep.sum(axis=1)

    b = np.zeros((len(pixels), 3))
    ok = used >= 3
    cond = np.full(len(pixels), np.inf)
    if ok.any():
        cond[ok] = np.linalg.cond(ata[ok])
    # cond(A^T A) = cond(A)^2
    fast = ok & (cond <= COND_FALLBACK**2)
    if fast.any():
        b[fast] = np.linalg.solve(ata[fast], atb[fast][..., None])[..., 0]
    flagged = ~ok
    for p in np.flatnonzero(ok & ~fast):
        try:
            sol = lambertian_ls(vals[p][keep[p]], LightSet(L[keep[p]], np.ones(used[p])))
            b[p] = sol.normal * sol.albedo
        except Unrecoverable:
            flagged[p] = True
    albedo_px = np.linalg.norm(b, axis=1)
    flagged |= albedo_px == 0
    good = ~flagged

    normals = np.zeros(mask.shape + (3,))
    albedo = np.zeros(mask.shape)
    residual = np.zeros(mask.shape)
    used_map = np.zeros(mask.shape, dtype=np.int64)
    r, c = pixels[good, 0], pixels[good, 1]
    normals[r, c] = b[good] / albedo_px[good][:, None]
    albedo[r, c] = albedo_px[good]
    fit = np.einsum("mi,pi->pm", L, b)
    sq = np.where(keep, (fit - vals) ** 2, 0.0).sum(axis=1) / np.maximum(used, 1)
    residual[r, c] = np.sqrt(sq[good])
    used_map[pixels[:, 0], pixels[:, 1]] = used
    flag_map = np.zeros(mask.shape, dtype=bool)
    flag_map[pixels[flagged, 0], pixels[flagged, 1]] = True
    return BaselineResult(NormalMap(normals, mask & ~flag_map, flag_map), albedo, residual, used_map)
