"""psforge command line: render, maps, train, predict, eval, baseline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import cv2
import numpy as np

from . import baseline, micronet, pipeline, synth
from .core import FormatError, NormalMap, angular_errors, read_mask, read_normals, write_normal_png, write_normals, write_tensor
from .dataset import Dataset, load_dataset, save_rendered

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

RENDER_DEFAULTS = {
    "kind": "sphere",
    "size": "64",
    "seed": None,
    "category": "diffuse",
    "superpixels": "100",
    "lights": "100",
    "light_seed": None,
    "elevation_min": "20",
    "jitter": "1",
    "interreflection": "false",
    "bounce_samples": "64",
    "albedo": "1.0",
}

TRAIN_KEYS = {f.name for f in fields(pipeline.TrainConfig)} - {"elevation_range"} | {"elevation_min", "elevation_max"}


class UsageError(Exception):
    pass


def read_config(path, section: str, allowed) -> dict:
    """Read ``key = value`` lines (a leading ``[section]`` header is optional)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    text = p.read_text()
    parser = configparser.ConfigParser()
    try:
        if text.lstrip().startswith("["):
            parser.read_string(text)
        else:
            parser.read_string(f"[{section}]\n{text}")
    except configparser.Error as exc:
        raise UsageError(f"{p}: {exc}") from None
    if not parser.has_section(section):
        raise UsageError(f"{p}: missing [{section}] section")
    values = dict(parser.items(section))
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise UsageError(f"{p}: unknown config key(s): {', '.join(unknown)}")
    return values


def resolve_seed(flag, config_value) -> int:
    """--seed flag, then the config file, then PSFORGE_SEED, then 0."""
    for candidate in (flag, config_value, os.environ.get("PSFORGE_SEED")):
        if candidate is not None:
            try:
                return int(candidate)
            except ValueError:
                raise UsageError(f"invalid seed {candidate!r}") from None
    return 0


def _as_bool(key, value) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {value!r}")


def _as_number(key, value, kind=float):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key}: expected {kind.__name__}, got {value!r}") from None


def _parse_exclude(text) -> list[int]:
    if not text:
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands ------------------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = {**RENDER_DEFAULTS, **read_config(args.config, "render", RENDER_DEFAULTS)}
    seed = resolve_seed(args.seed, cfg["seed"])
    kind = cfg["kind"]
    if kind not in ("sphere", "bowl", "bumps"):
        raise UsageError(f"config key kind: unknown scene kind {kind!r}")
    size = _as_number("size", cfg["size"], int)
    scene = synth.make_scene(kind, size, seed)
    category = cfg["category"]
    if category == "lambertian":
        materials = synth.MaterialMap.lambertian_albedo(scene.shape, _as_number("albedo", cfg["albedo"]))
    elif category in {c.value for c in synth.Category}:
        materials = synth.make_material_map(scene, _as_number("superpixels", cfg["superpixels"], int),
                                            category, seed)
    else:
        raise UsageError(f"config key category: unknown category {category!r}")
    light_seed = seed if cfg["light_seed"] is None else _as_number("light_seed", cfg["light_seed"], int)
    lights = synth.sample_lights(_as_number("lights", cfg["lights"], int),
                                 _as_number("elevation_min", cfg["elevation_min"]),
                                 _as_number("jitter", cfg["jitter"]), seed=light_seed)
    sample = synth.render(scene, materials, lights,
                          interreflection=_as_bool("interreflection", cfg["interreflection"]),
                          seed=seed, samples=_as_number("bounce_samples", cfg["bounce_samples"], int))
    out = _out_dir(args)
    save_rendered(out, sample)
    print(f"rendered {scene.name}: {sample.stack.m} images of {scene.shape[0]}x{scene.shape[1]} -> {out}")
    return EXIT_OK


def _train_config(args) -> pipeline.TrainConfig:
    raw = read_config(args.config, "train", TRAIN_KEYS)
    kw = {}
    for f in fields(pipeline.TrainConfig):
        if f.name in raw and f.name != "seed":
            kind = float if f.name == "lr" else int
            kw[f.name] = _as_number(f.name, raw[f.name], kind)
    lo, hi = pipeline.TrainConfig.elevation_range
    kw["elevation_range"] = (_as_number("elevation_min", raw.get("elevation_min", lo)),
                             _as_number("elevation_max", raw.get("elevation_max", hi)))
    kw["seed"] = resolve_seed(args.seed, raw.get("seed"))
    try:
        return pipeline.TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _as_sample(ds: Dataset) -> synth.RenderedSample:
    if ds.gt is None:
        raise FormatError(f"dataset {ds.name} has no ground-truth normals")
    scene = synth.HeightfieldScene(np.zeros(ds.stack.shape), ds.stack.mask, name=ds.name)
    return synth.RenderedSample(scene, ds.lights, ds.stack, ds.gt, np.zeros((0,) + ds.stack.shape, dtype=bool))


def _assemble(dirs, cfg) -> pipeline.TrainingSet:
    samples = [_as_sample(load_dataset(d)) for d in dirs]
    return pipeline.assemble_training_set(samples, cfg)


def cmd_maps(args) -> int:
    cfg = _train_config(args)
    data = _assemble(args.datasets, cfg)
    out = _out_dir(args)
    data.save(out)
    print(f"{len(data)} maps ({data.skipped} pixels skipped) -> {out}")
    return EXIT_OK


def verify_gradients(seed: int = 0) -> micronet.GradCheckReport:
    """Finite-difference check of the full network in float64 with dropout frozen."""
    net = micronet.MicroNet(micronet.ArchConfig(), seed=seed, dtype=np.float64)
    net.seed_dropout(seed)
    x = np.random.default_rng(seed).random((2, 1, 32, 32))
    net.forward(x, train=True)
    net.freeze_dropout(True)
    return micronet.finite_diff_check(net, x, probes=6, seed=seed, train=True)


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    cfg = _train_config(args)
    if args.verify_gradients:
        report = verify_gradients(cfg.seed)
        print(f"gradient check: max relative error {report.max_error:.3g}")
        if not report.passed(1e-4):
            print("gradient check failed", file=sys.stderr)
            return EXIT_NUMERIC
    # validation always comes from whole held-out scenes
    train_dirs, val_dirs = list(args.datasets), args.val
    if not val_dirs:
        if len(train_dirs) < 2:
            raise UsageError("give --val or at least two datasets (the last one is held out)")
        train_dirs, val_dirs = train_dirs[:-1], train_dirs[-1:]
    train_set, val_set = _assemble(train_dirs, cfg), _assemble(val_dirs, cfg)
    result = pipeline.train(train_set, val_set, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_model(out, result)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    result.write_log(log_path)
    last = result.log[-1]
    print(f"trained on {len(train_set)} maps: loss {last.loss:.5f}, val MAE {last.val_mae:.3f} deg -> {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.model:
        raise UsageError("--model is required")
    ds = load_dataset(args.dataset, exclude=_parse_exclude(args.exclude))
    net = micronet.load_weights(args.model)
    cfg = pipeline.PredictConfig(rotations=args.rotations)
    est = pipeline.predict_map(ds.stack, ds.lights, net, cfg, jobs=args.jobs)
    out = _out_dir(args)
    write_normals(out / "normals.pst", est)
    write_normal_png(out / "normals.png", est)
    flagged = int(est.flagged.sum()) if est.flagged is not None else 0
    print(f"predicted {int(est.mask.sum())} normals from {ds.stack.m} images (K={args.rotations}, "
          f"{flagged} flagged) -> {out}")
    return EXIT_OK


def error_image(err: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """8-bit error map: 0 deg -> 0, 90 deg -> 255, clamped; unmasked pixels are 0."""
    img = np.clip(np.rint(err / 90.0 * 255.0), 0, 255).astype(np.uint8)
    img[~mask] = 0
    return img


def evaluate_maps(est: NormalMap, gt: NormalMap, mask=None):
    if est.shape != gt.shape:
        raise FormatError(f"estimate shape {est.shape} does not match ground truth {gt.shape}")
    valid = est.mask & gt.mask
    if mask is not None:
        if mask.shape != est.shape:
            raise FormatError(f"mask shape {mask.shape} does not match normals {est.shape}")
        valid &= mask
    if not valid.any():
        raise FormatError("no pixel is valid in both estimate and ground truth")
    err = np.zeros(est.shape)
    err[valid] = angular_errors(est.normals[valid], gt.normals[valid])
    return err, valid


def cmd_eval(args) -> int:
    mask = read_mask(args.mask) if args.mask else None
    est = read_normals(args.est, mask)
    if not Path(args.gt).exists():
        raise FileNotFoundError(f"ground truth {args.gt} not found")
    gt = read_normals(args.gt, mask)
    err, valid = evaluate_maps(est, gt, mask)
    values = err[valid]
    report = f"mean {values.mean():.4f}\nmedian {np.median(values):.4f}\nmax {values.max():.4f}\npixels {values.size}\n"
    out = _out_dir(args)
    (out / "report.txt").write_text(report)
    cv2.imwrite(str(out / "error_map.png"), error_image(err, valid))
    print(report, end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = load_dataset(args.dataset, exclude=_parse_exclude(args.exclude))
    res = baseline.baseline_map(ds.stack, ds.lights, tau=args.threshold)
    out = _out_dir(args)
    write_normals(out / "normals.pst", res.normals)
    write_normal_png(out / "normals.png", res.normals)
    write_tensor(out / "albedo.pst", res.albedo)
    msg = f"baseline on {int(res.normals.mask.sum())} pixels (tau={args.threshold:g})"
    if ds.gt is not None:
        err, valid = evaluate_maps(res.normals, ds.gt)
        msg += f": MAE {err[valid].mean():.4f} deg"
    print(msg)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psforge", description="Photometric stereo with observation maps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_render)

    for name, func, help_text in (("maps", cmd_maps, "assemble observation maps for training"),
                                  ("train", cmd_train, "train a network")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("datasets", nargs="+")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if name == "train":
            p.add_argument("--val", nargs="+", help="validation dataset directories")
            p.add_argument("--log", help="metric log path (default: <out>.log)")
            p.add_argument("--verify-gradients", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="estimate normals with a trained network")
    p.add_argument("dataset")
    p.add_argument("--model")
    p.add_argument("--rotations", type=int, default=1)
    p.add_argument("--exclude", help="1-based image numbers to drop, e.g. 1-20,33")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="angular error report and error map")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--mask")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="Lambertian least-squares normals")
    p.add_argument("dataset")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--exclude")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "rotations", 1) < 1 or getattr(args, "jobs", 1) < 1:
        print("psforge: error: --rotations and --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"psforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"psforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"psforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
