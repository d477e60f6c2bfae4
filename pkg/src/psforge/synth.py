"""Height-field renderer used to synthesize photometric stereo training data.

Scenes are single-valued height fields seen by an orthographic camera looking down -z.
World x grows with the column index, world y grows toward the top row, heights are in
pixel units times ``spacing``. Shading uses an isotropic subset of the Disney
principled BRDF evaluated purely from (n.l, n.v, l.v); global effects come from
ray-marched cast shadows and an optional one-bounce diffuse interreflection.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.ndimage import map_coordinates

from .core import ImageStack, LightSet, NormalMap

VIEW = np.array([0.0, 0.0, 1.0])
PARAM_NAMES = ("base_color", "metallic", "specular", "roughness", "sheen")


class Category(enum.Enum):
    DIFFUSE = "diffuse"
    SPECULAR = "specular"
    METALLIC = "metallic"


# (low, high) per parameter
CATEGORY_RANGES = {
    Category.DIFFUSE: dict(base_color=(0.1, 1.0), metallic=(0.0, 0.0), specular=(0.0, 0.1),
                           roughness=(0.3, 1.0), sheen=(0.0, 0.5)),
    Category.SPECULAR: dict(base_color=(0.1, 1.0), metallic=(0.0, 0.0), specular=(0.3, 1.0),
                            roughness=(0.05, 0.5), sheen=(0.0, 0.0)),
    Category.METALLIC: dict(base_color=(0.3, 1.0), metallic=(1.0, 1.0), specular=(0.0, 1.0),
                            roughness=(0.05, 0.5), sheen=(0.0, 0.0)),
}


@dataclass(frozen=True)
class HeightfieldScene:
    heights: np.ndarray
    mask: np.ndarray
    spacing: float = 1.0
    name: str = "scene"

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != h.shape:
            raise ValueError("mask and heights differ in shape")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.heights.shape

    def points(self) -> np.ndarray:
        """World positions (H, W, 3) of pixel centers."""
        rows, cols = np.indices(self.shape, dtype=np.float64)
        height = self.shape[0]
        return np.stack([cols * self.spacing, (height - 1 - rows) * self.spacing, self.heights], axis=-1)


@dataclass(frozen=True)
class PrincipledParams:
    base_color: float = 0.8
    metallic: float = 0.0
    specular: float = 0.5
    roughness: float = 0.5
    sheen: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


@dataclass(frozen=True)
class MaterialMap:
    """Per-pixel principled parameters, piecewise constant over superpixels."""

    params: dict
    superpixel_id: np.ndarray
    category: Category | None = None
    lambertian: bool = False

    @classmethod
    def uniform(cls, shape, p: PrincipledParams, category=None) -> "MaterialMap":
        params = {k: np.full(shape, getattr(p, k)) for k in PARAM_NAMES}
        return cls(params, np.zeros(shape, dtype=np.int64), category)

    @classmethod
    def lambertian_albedo(cls, shape, albedo=1.0) -> "MaterialMap":
        """Pure Lambertian reflectance albedo / pi; only ``base_color`` is used."""
        params = {k: np.zeros(shape) for k in PARAM_NAMES}
        params["base_color"] = np.broadcast_to(np.asarray(albedo, dtype=np.float64), shape).copy()
        return cls(params, np.zeros(shape, dtype=np.int64), None, lambertian=True)

    def at(self, row: int, col: int) -> PrincipledParams:
        return PrincipledParams(**{k: float(self.params[k][row, col]) for k in PARAM_NAMES})


@dataclass
class RenderedSample:
    scene: HeightfieldScene
    lights: LightSet
    stack: ImageStack
    normals: NormalMap
    shadow_masks: np.ndarray
    materials: MaterialMap | None = None


# -- scenes --------------------------------------------------------------------------


def _radius_grid(size: int):
    rows, cols = np.indices((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    return np.hypot(rows - c, cols - c)


def sphere_scene(size: int = 64, radius: float | None = None, mask_fraction: float = 0.95,
                 name: str = "sphere") -> HeightfieldScene:
    """Hemisphere resting on a ground plane; masked to ``mask_fraction`` of its radius."""
    radius = radius if radius is not None else 0.45 * size
    r = _radius_grid(size)
    heights = np.sqrt(np.clip(radius**2 - r**2, 0.0, None))
    return HeightfieldScene(heights, r < mask_fraction * radius, 1.0, name)


def bowl_scene(size: int = 64, radius: float | None = None, depth_ratio: float = 1.0,
               name: str = "bowl") -> HeightfieldScene:
    """Parabolic bowl cut into a plateau: h = depth (r/R)^2 inside R, depth outside."""
    radius = radius if radius is not None else 0.45 * size
    r = _radius_grid(size)
    heights = depth_ratio * radius * np.minimum(r / radius, 1.0) ** 2
    return HeightfieldScene(heights, r < radius, 1.0, name)


def bumps_scene(size: int = 64, count: int = 12, seed: int = 0, border: int = 2,
                name: str | None = None) -> HeightfieldScene:
    """Sum of random Gaussian bumps and dents; a mixture of convex and concave regions."""
    rng = np.random.default_rng(seed)
    rows, cols = np.indices((size, size), dtype=np.float64)
    heights = np.zeros((size, size))
    for _ in range(count):
        cr, cc = rng.uniform(0, size, 2)
        width = rng.uniform(0.06, 0.2) * size
        amp = rng.uniform(0.3, 2.5) * width * rng.choice([-1.0, 1.0])
        heights += amp * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * width**2))
    heights -= heights.min()
    mask = np.zeros((size, size), dtype=bool)
    mask[border:size - border, border:size - border] = True
    return HeightfieldScene(heights, mask, 1.0, name or f"bumps{seed}")


def make_scene(kind: str, size: int = 64, seed: int = 0) -> HeightfieldScene:
    if kind == "sphere":
        return sphere_scene(size)
    if kind == "bowl":
        return bowl_scene(size)
    if kind == "bumps":
        return bumps_scene(size, seed=seed)
    raise ValueError(f"unknown scene kind {kind!r}")


def heightfield_normals(scene: HeightfieldScene) -> NormalMap:
    """Finite-difference normals: central inside the mask, one-sided at its border."""
    h, mask = scene.heights, scene.mask
    if not mask.any():
        raise ValueError("empty mask")
    grads = []
    # axis 1 is +x; axis 0 runs against +y
    for axis, sign in ((1, 1.0), (0, -1.0)):
        fwd = np.zeros_like(mask)
        bwd = np.zeros_like(mask)
        sl_hi = [slice(None)] * 2
        sl_lo = [slice(None)] * 2
        sl_hi[axis] = slice(0, -1)
        sl_lo[axis] = slice(1, None)
        fwd[tuple(sl_hi)] = mask[tuple(sl_lo)]
        bwd[tuple(sl_lo)] = mask[tuple(sl_hi)]
        if np.any(mask & ~fwd & ~bwd):
            raise ValueError("mask contains regions one pixel wide; gradient undefined")
        hp = np.roll(h, -1, axis=axis)
        hm = np.roll(h, 1, axis=axis)
        g = np.where(fwd & bwd, (hp - hm) / 2.0, np.where(fwd, hp - h, h - hm))
        grads.append(sign * g / scene.spacing)
    gx, gy = grads
    n = np.stack([-gx, -gy, np.ones_like(h)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[~mask] = 0.0
    return NormalMap(n, mask)


# -- lights --------------------------------------------------------------------------


def sample_lights(count: int = 1300, elevation_min_deg: float = 20.0, jitter_deg: float = 1.0,
                  seed: int = 0) -> LightSet:
    """Fibonacci-spiral lights above an elevation floor, each nudged by a seeded jitter."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= elevation_min_deg < 90.0:
        raise ValueError("elevation_min_deg must be in [0, 90)")
    z_min = np.sin(np.radians(elevation_min_deg))
    k = np.arange(count) + 0.5
    z = 1.0 - k / count * (1.0 - z_min)
    phi = k * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z**2)
    d = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)

    rng = np.random.default_rng(seed)
    # perturb within the tangent plane by an angle of at most jitter_deg
    helper = np.where(np.abs(d[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(d, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(d, t1)
    ang = np.radians(jitter_deg) * np.sqrt(rng.uniform(0, 1, count))
    psi = rng.uniform(0, 2 * np.pi, count)
    offset = np.cos(psi)[:, None] * t1 + np.sin(psi)[:, None] * t2
    d = np.cos(ang)[:, None] * d + np.sin(ang)[:, None] * offset
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return LightSet(d, np.ones(count))


# -- materials -----------------------------------------------------------------------


def make_material_map(scene: HeightfieldScene, P: int, category: Category | str,
                      seed: int = 0) -> MaterialMap:
    """k-means superpixels over the mask, one parameter tuple drawn per superpixel."""
    category = Category(category)
    if P < 1:
        raise ValueError("P must be >= 1")
    coords = np.argwhere(scene.mask).astype(np.float64)
    if P > len(coords):
        raise ValueError(f"P={P} exceeds the {len(coords)} masked pixels")
    rng = np.random.default_rng(seed)
    init = coords[rng.choice(len(coords), P, replace=False)]
    if P == 1:
        labels = np.zeros(len(coords), dtype=np.int64)
    else:
        _, labels = kmeans2(coords, init, iter=5, minit="matrix", missing="warn")
    _, labels = np.unique(labels, return_inverse=True)
    n_regions = labels.max() + 1

    ranges = CATEGORY_RANGES[category]
    superpixel = np.full(scene.shape, -1, dtype=np.int64)
    superpixel[scene.mask] = labels
    params = {}
    for name in PARAM_NAMES:
        lo, hi = ranges[name]
        per_region = rng.uniform(lo, hi, n_regions)
        field = np.zeros(scene.shape)
        field[scene.mask] = per_region[labels]
        params[name] = field
    return MaterialMap(params, superpixel, category)


# -- reflectance ---------------------------------------------------------------------


def brdf_from_dots(nl, nv, lv, base_color, metallic, specular, roughness, sheen):
    """Isotropic principled BRDF as a function of the three dot products only."""
    nl = np.asarray(nl, dtype=np.float64)
    nv = np.asarray(nv, dtype=np.float64)
    lv = np.asarray(lv, dtype=np.float64)
    half_len = np.sqrt(np.maximum(2.0 + 2.0 * lv, 1e-24))
    nh = np.clip((nl + nv) / half_len, 0.0, 1.0)
    lh = np.clip((1.0 + lv) / half_len, 0.0, 1.0)

    fl = (1.0 - nl) ** 5
    fv = (1.0 - nv) ** 5
    fh = (1.0 - lh) ** 5
    fd90 = 0.5 + 2.0 * roughness * lh**2
    diffuse = base_color / np.pi * (1.0 + (fd90 - 1.0) * fl) * (1.0 + (fd90 - 1.0) * fv)

    a2 = np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, 1e-3) ** 2
    ndf = a2 / (np.pi * (nh**2 * (a2 - 1.0) + 1.0) ** 2)
    g1l = 2.0 * nl / (nl + np.sqrt(a2 + (1.0 - a2) * nl**2))
    g1v = 2.0 * nv / (nv + np.sqrt(a2 + (1.0 - a2) * nv**2))
    fresnel = (1.0 - metallic) * specular * (0.08 + 0.92 * fh) \
        + metallic * (base_color + (1.0 - base_color) * fh)
    spec = ndf * g1l * g1v * fresnel / (4.0 * nl * nv)

    return (1.0 - metallic) * (diffuse + sheen * fh) + spec


def eval_brdf(p: PrincipledParams, n, l, v=VIEW) -> float:
    n, l, v = (np.asarray(x, dtype=np.float64) for x in (n, l, v))
    nl, nv, lv = float(n @ l), float(n @ v), float(l @ v)
    if nl <= 0 or nv <= 0:
        raise ValueError("light and view must both face the surface")
    return float(brdf_from_dots(nl, nv, lv, p.base_color, p.metallic, p.specular,
                                p.roughness, p.sheen))


def shade(normals: np.ndarray, mask: np.ndarray, materials: MaterialMap, light, intensity=1.0):
    """Direct shading L rho max(n.l, 0) for a view straight down the z axis (no shadows)."""
    nl = normals @ np.asarray(light, dtype=np.float64)
    lit = mask & (nl > 0)
    out = np.zeros(mask.shape)
    if materials.lambertian:
        rho = materials.params["base_color"][lit] / np.pi
    else:
        nv = normals[lit][:, 2]
        pars = [materials.params[k][lit] for k in PARAM_NAMES]
        rho = brdf_from_dots(nl[lit], nv, float(light[2]), *pars)
    out[lit] = intensity * rho * nl[lit]
    return out


# -- shadows -------------------------------------------------------------------------


def _ray_params(scene: HeightfieldScene):
    h = scene.heights
    eps = 1e-4 * max(float(np.ptp(h)), 1e-12)
    return h, eps, float(h.max())


def shadow_map(scene: HeightfieldScene, light, pixels: np.ndarray | None = None) -> np.ndarray:
    """Cast-shadow test for many pixels at once; returns a boolean per pixel.

    Each ray leaves the pixel's surface point along ``light`` in steps of half a pixel
    spacing and is shadowed as soon as it dips below the bilinear surface.
    """
    l = np.asarray(light, dtype=np.float64)
    if l[2] <= 0 or abs(np.linalg.norm(l) - 1.0) > 1e-6:
        raise ValueError("light must be a unit vector with positive z")
    h, eps, top = _ray_params(scene)
    height, width = scene.shape
    if pixels is None:
        pixels = np.argwhere(scene.mask)
    rows0 = pixels[:, 0].astype(np.float64)
    cols0 = pixels[:, 1].astype(np.float64)
    z0 = h[pixels[:, 0], pixels[:, 1]]

    step = 0.5 * scene.spacing
    # a step of length `step` along l moves (l_x, -l_y) pixels in (col, row)
    dcol = step * l[0] / scene.spacing
    drow = -step * l[1] / scene.spacing
    dz = step * l[2]

    shadowed = np.zeros(len(pixels), dtype=bool)
    active = np.arange(len(pixels))
    k = 0
    while active.size:
        k += 1
        r = rows0[active] + k * drow
        c = cols0[active] + k * dcol
        z = z0[active] + k * dz
        inside = (r >= 0) & (r <= height - 1) & (c >= 0) & (c <= width - 1) & (z <= top)
        active, r, c, z = active[inside], r[inside], c[inside], z[inside]
        if not active.size:
            break
        surf = map_coordinates(h, [r, c], order=1, mode="nearest")
        hit = z < surf - eps
        shadowed[active[hit]] = True
        active = active[~hit]
    return shadowed


def cast_shadow(scene: HeightfieldScene, pixel, light) -> bool:
    row, col = pixel
    if not (0 <= row < scene.shape[0] and 0 <= col < scene.shape[1]) or not scene.mask[row, col]:
        raise ValueError(f"pixel {pixel} is outside the mask")
    return bool(shadow_map(scene, light, np.array([[row, col]]))[0])


# -- rendering -----------------------------------------------------------------------


def _scene_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _gather_kernel(scene, normals, materials, samples, seed):
    """Sampled one-bounce geometry: sample indices and weights per masked pixel."""
    pts = scene.points()[scene.mask]
    nrm = normals.normals[scene.mask]
    n_px = len(pts)
    samples = min(samples, n_px - 1)
    rng = _scene_rng(seed, scene.name)
    # stratified over the masked pixel list
    edges = np.linspace(0, n_px, samples + 1)
    u = rng.uniform(0, 1, (n_px, samples))
    idx = np.minimum((edges[:-1] + u * np.diff(edges)).astype(np.int64), n_px - 1)
    own = idx == np.arange(n_px)[:, None]
    d = pts[idx] - pts[:, None, :]
    r2 = np.maximum(np.sum(d * d, axis=-1), scene.spacing**2)
    r = np.sqrt(r2)
    cos_i = np.clip(np.einsum("nsk,nk->ns", d, nrm) / r, 0.0, None)
    cos_j = np.clip(-np.einsum("nsk,nsk->ns", d, nrm[idx]) / r, 0.0, None)
    area = scene.spacing**2 / nrm[idx][..., 2]
    weight = cos_i * cos_j * area / r2 * (n_px / samples)
    weight[own] = 0.0
    albedo = (1.0 - materials.params["metallic"][scene.mask]) * materials.params["base_color"][scene.mask] / np.pi
    return idx, weight * albedo[:, None]


def render(scene: HeightfieldScene, materials: MaterialMap, lights: LightSet,
           interreflection: bool = False, seed: int = 0, samples: int = 64) -> RenderedSample:
    """Render one image per light: I = L rho max(n.l, 0) off cast shadows, plus optional bounce."""
    normals = heightfield_normals(scene)
    m = len(lights)
    images = np.zeros((m,) + scene.shape)
    shadows = np.zeros((m,) + scene.shape, dtype=bool)
    pixels = np.argwhere(scene.mask)
    for j, (l, e) in enumerate(zip(lights.directions, lights.intensities)):
        direct = shade(normals.normals, scene.mask, materials, l, e)
        blocked = np.zeros(scene.shape, dtype=bool)
        blocked[pixels[:, 0], pixels[:, 1]] = shadow_map(scene, l, pixels)
        direct[blocked] = 0.0
        images[j] = direct
        shadows[j] = blocked
    if interreflection:
        idx, weight = _gather_kernel(scene, normals, materials, samples, seed)
        for j in range(m):
            direct = images[j][scene.mask]
            images[j][scene.mask] = direct + np.sum(weight * direct[idx], axis=1)
    images = np.clip(images, 0.0, None)
    return RenderedSample(scene, lights, ImageStack(images.astype(np.float32), scene.mask),
                          normals, shadows, materials)
