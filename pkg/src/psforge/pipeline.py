"""Training-set assembly, training loop and K-rotation prediction."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import micronet
from .core import ImageStack, LightSet, NormalMap, angular_errors, read_tensor, write_tensor
from .micronet import AdamState, ArchConfig, MicroNet, adam_step, mse_loss
from .obsmap import PixelObservations, build_maps, max_ratio, rotate_about_z
from .synth import RenderedSample

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    w: int = 32
    rotations: int = 10
    subset_min: int = 10
    subset_max: int = 100
    elevation_range: tuple = (20.0, 90.0)
    pixels_per_scene: int | None = 150
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    val_limit: int = 2000

    def __post_init__(self):
        if self.subset_min < 1 or self.subset_max < self.subset_min:
            raise ValueError("need 1 <= subset_min <= subset_max")
        lo, hi = self.elevation_range
        if not 0 <= lo <= hi <= 90:
            raise ValueError("elevation_range must be ordered within [0, 90]")
        if self.rotations < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("rotations, epochs and batch_size must be positive")


@dataclass
class PredictConfig:
    rotations: int = 1
    w: int = 32
    batch_size: int = 128

    def __post_init__(self):
        if self.rotations < 1:
            raise ValueError("rotations must be >= 1")

    @property
    def angles(self) -> np.ndarray:
        return rotation_angles(self.rotations)


def rotation_angles(k: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(k) / k


@dataclass
class TrainSample:
    obsmap: np.ndarray
    gt_normal: np.ndarray
    provenance: tuple


@dataclass
class TrainingSet:
    """Observation maps (N, w, w), unit normals (N, 3) and one provenance row per sample.

    Provenance columns: scene, row, col, rotation index, subset size, elevation threshold.
    """

    maps: np.ndarray
    normals: np.ndarray
    provenance: list = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i) -> TrainSample:
        return TrainSample(self.maps[i], self.normals[i], self.provenance[i])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "maps.pst", self.maps)
        write_tensor(d / "normals.pst", self.normals)
        lines = [" ".join(str(x) for x in row) for row in self.provenance]
        (d / "provenance.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "TrainingSet":
        d = Path(directory)
        maps = read_tensor(d / "maps.pst")
        normals = read_tensor(d / "normals.pst").astype(np.float64)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        prov = []
        for line in (d / "provenance.txt").read_text().splitlines():
            scene, *rest = line.split()
            prov.append((scene, *[int(x) for x in rest[:4]], float(rest[4])))
        return cls(maps, normals, prov)

    @classmethod
    def concat(cls, sets) -> "TrainingSet":
        sets = list(sets)
        return cls(np.concatenate([s.maps for s in sets]), np.concatenate([s.normals for s in sets]),
                   [p for s in sets for p in s.provenance], sum(s.skipped for s in sets))


def _pixel_rng(seed: int, scene: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene.encode()), index + 1])


def assemble_training_set(samples: list[RenderedSample], cfg: TrainConfig) -> TrainingSet:
    """Per pixel: random elevation cut, random light subset, one map per rotation."""
    angles = rotation_angles(cfg.rotations)
    maps, normals, prov = [], [], []
    skipped = 0
    for sample in samples:
        name = sample.scene.name
        stack, lights = sample.stack, sample.lights
        stack.check_lights(lights)
        if len(lights) < cfg.subset_min:
            raise ValueError(f"{name}: {len(lights)} lights < subset_min {cfg.subset_min}")
        elevation = np.degrees(np.arcsin(np.clip(lights.directions[:, 2], -1, 1)))
        pixels = np.argwhere(stack.mask & sample.normals.mask)
        if cfg.pixels_per_scene is not None and cfg.pixels_per_scene < len(pixels):
            pick = _pixel_rng(cfg.seed, name, -1).choice(len(pixels), cfg.pixels_per_scene, replace=False)
            pixels = pixels[np.sort(pick)]
        for row, col in pixels:
            rng = _pixel_rng(cfg.seed, name, int(row) * stack.shape[1] + int(col))
            cut = rng.uniform(*cfg.elevation_range)
            avail = np.flatnonzero(elevation >= cut)
            if len(avail) < cfg.subset_min:
                skipped += 1
                continue
            size = min(int(rng.integers(cfg.subset_min, cfg.subset_max + 1)), len(avail))
            subset = np.sort(rng.choice(avail, size, replace=False))
            values = stack.images[subset, row, col].astype(np.float64)
            intens = lights.intensities[subset]
            if max_ratio(values, intens)[0] <= 0:
                skipped += 1
                continue
            dirs = np.stack([rotate_about_z(lights.directions[subset], t) for t in angles])
            cells, _ = build_maps(np.broadcast_to(values, (len(angles), size)), dirs, intens, cfg.w)
            n = sample.normals.normals[row, col]
            for k, theta in enumerate(angles):
                maps.append(cells[k].astype(np.float32))
                normals.append(rotate_about_z(n, theta))
                prov.append((name, int(row), int(col), k, size, round(float(cut), 3)))
    if skipped:
        log.warning("skipped %d pixels with too few usable lights", skipped)
    w = cfg.w
    return TrainingSet(np.array(maps, dtype=np.float32).reshape(-1, w, w),
                       np.array(normals, dtype=np.float64).reshape(-1, 3), prov, skipped)


# -- training ------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_mae: float


@dataclass
class TrainResult:
    net: MicroNet
    log: list
    initial_loss: float

    def write_log(self, path) -> None:
        lines = [f"{s.epoch} {s.loss:.6f} {s.val_mae:.4f}" for s in self.log]
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate(net: MicroNet, data: TrainingSet, limit: int | None = None) -> tuple[float, float]:
    """Mean MSE loss and mean angular error (degrees) of ``net`` on ``data`` in infer mode."""
    n = len(data) if limit is None else min(limit, len(data))
    pred = net.predict(data.maps[:n]).astype(np.float64)
    gt = data.normals[:n]
    return float(np.mean((pred - gt) ** 2)), float(angular_errors(pred, gt).mean())


def train(train_set: TrainingSet, val_set: TrainingSet, cfg: TrainConfig,
          arch: ArchConfig | None = None, progress=None) -> TrainResult:
    """Shuffled mini-batch Adam on the MSE between predicted and true unit normals."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    arch = arch or ArchConfig(w=cfg.w)
    net = MicroNet(arch, seed=cfg.seed)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    val_limit = cfg.val_limit
    val = TrainingSet(val_set.maps, val_set.normals)
    if val_limit and val_limit < len(val):
        pick = np.sort(np.random.default_rng(cfg.seed + 1).choice(len(val), val_limit, replace=False))
        val = TrainingSet(val.maps[pick], val.normals[pick])

    initial_loss, _ = evaluate(net, train_set, limit=4096)
    history = []
    gt_all = train_set.normals.astype(np.float32)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x = train_set.maps[idx][:, None]
            pred = net.forward(x, train=True)
            loss, grad = mse_loss(pred, gt_all[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            net.backward(grad.astype(net.dtype))
            net.set_parameters(adam_step(net.parameters(), net.gradients(), state))
            total += loss * len(idx)
            count += len(idx)
        _, val_mae = evaluate(net, val)
        stats = EpochStats(epoch, total / count, val_mae)
        history.append(stats)
        log.info("epoch %d loss %.5f val MAE %.3f", epoch, stats.loss, val_mae)
        if progress:
            progress(stats)
    return TrainResult(net, history, initial_loss)


# -- prediction ----------------------------------------------------------------------


class PixelFlagged(ValueError):
    """A pixel whose observations cannot produce a reliable normal."""


def _predict_rows(values, lights: LightSet, net: MicroNet, cfg: PredictConfig):
    """Rotation-averaged normals for (N, m) pixel values; returns (normals, per-rotation, flagged)."""
    n = len(values)
    per_rot = np.zeros((cfg.rotations, n, 3))
    for k, theta in enumerate(cfg.angles):
        dirs = rotate_about_z(lights.directions, theta)
        cells, _ = build_maps(values, dirs, lights.intensities, cfg.w)
        pred = net.predict(cells.astype(np.float32), cfg.batch_size).astype(np.float64)
        per_rot[k] = rotate_about_z(pred, -theta)
    mean = per_rot.mean(axis=0)
    norm = np.linalg.norm(mean, axis=1)
    flagged = (norm < 1e-9) | (max_ratio(values, lights.intensities) <= 0)
    out = np.zeros_like(mean)
    ok = ~flagged
    out[ok] = mean[ok] / norm[ok][:, None]
    return out, per_rot, flagged


def predict_pixel(obs: PixelObservations, net: MicroNet, cfg: PredictConfig = PredictConfig()) -> np.ndarray:
    if max_ratio(obs.values, obs.lights.intensities)[0] <= 0:
        raise PixelFlagged("all observations are zero")
    out, _, flagged = _predict_rows(obs.values[None], obs.lights, net, cfg)
    if flagged[0]:
        raise PixelFlagged("rotated predictions cancel out")
    return out[0]


def predict_map(stack: ImageStack, lights: LightSet, net: MicroNet, cfg: PredictConfig = PredictConfig(),
                mask: np.ndarray | None = None, jobs: int = 1, chunk: int = 1024,
                return_rotations: bool = False):
    """Normal map over ``mask`` (default: the stack's mask). Flagged pixels drop out of the mask."""
    stack.check_lights(lights)
    mask = stack.mask if mask is None else np.asarray(mask, dtype=bool)
    pixels = np.argwhere(mask)
    values = stack.images[:, pixels[:, 0], pixels[:, 1]].T.astype(np.float64)
    starts = list(range(0, len(pixels), chunk))

    def run(start):
        return _predict_rows(values[start:start + chunk], lights, net, cfg)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    normals = np.zeros(mask.shape + (3,))
    flagged = np.zeros(mask.shape, dtype=bool)
    if parts:
        est = np.concatenate([p[0] for p in parts])
        flags = np.concatenate([p[2] for p in parts])
        normals[pixels[:, 0], pixels[:, 1]] = est
        flagged[pixels[:, 0], pixels[:, 1]] = flags
    result = NormalMap(normals, mask & ~flagged, flagged)
    if return_rotations:
        per_rot = np.concatenate([p[1] for p in parts], axis=1) if parts else np.zeros((cfg.rotations, 0, 3))
        return result, per_rot, pixels
    return result


@dataclass
class RotationGap:
    per_rotation_mae: np.ndarray
    mean_mae: float
    mean_disagreement: float
    mean_error_difference: float

    @property
    def disagreement_ratio(self) -> float:
        return self.mean_disagreement / self.mean_mae

    @property
    def error_difference_ratio(self) -> float:
        return self.mean_error_difference / self.mean_mae


def summarize_rotations(per_rot: np.ndarray, truth: np.ndarray) -> RotationGap:
    """Gap statistics from back-rotated single-rotation predictions (K, N, 3) against truth (N, 3).

    ``mean_disagreement`` is the mean angle between every pair of rotations;
    ``mean_error_difference`` the mean |MAE_a - MAE_b| over the same pairs.
    """
    per_rot = per_rot / np.linalg.norm(per_rot, axis=-1, keepdims=True)
    k = len(per_rot)
    if k < 2:
        raise ValueError("need at least two rotations")
    maes = np.array([angular_errors(p, truth).mean() for p in per_rot])
    pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
    disagreement = np.mean([angular_errors(per_rot[a], per_rot[b]).mean() for a, b in pairs])
    diff = np.mean([abs(maes[a] - maes[b]) for a, b in pairs])
    return RotationGap(maes, float(maes.mean()), float(disagreement), float(diff))


def rotation_gap(stack: ImageStack, lights: LightSet, net: MicroNet, gt: NormalMap,
                 rotations: int = 10, w: int = 32) -> RotationGap:
    """How far predictions for differently rotated inputs disagree with each other."""
    mask = stack.mask & gt.mask
    _, per_rot, pixels = predict_map(stack, lights, net, PredictConfig(rotations, w), mask,
                                     return_rotations=True)
    return summarize_rotations(per_rot, gt.normals[pixels[:, 0], pixels[:, 1]])


def save_model(path, result_or_net) -> None:
    net = result_or_net.net if isinstance(result_or_net, TrainResult) else result_or_net
    micronet.save_weights(path, net)
