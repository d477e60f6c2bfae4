"""A small DenseNet-style regressor written directly in numpy.

Layers work on channel-last (N, H, W, C) activations; the public conv functions and the
network input use channel-first arrays and convert at the boundary. Every layer keeps
whatever it needs from ``forward`` to run ``backward``; parameter gradients land in
``layer.grads`` under the same keys as ``layer.params``. The network maps a (N, 1, w, w)
batch of observation maps to (N, 3) unit normals.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import read_tensor, write_tensor

FORMAT_VERSION = 1
L2_EPS = 1e-12


class FingerprintError(ValueError):
    """Weights were produced for a different architecture or format version."""


# -- functional kernels --------------------------------------------------------------
#
# Convolutions run on NHWC arrays. The padded input is flattened to (T, C) rows; a
# kernel tap at (i, j) then reads rows shifted by i * padded_width + j, so every tap is
# one contiguous GEMM accumulated into the output rows. Output rows that straddle an
# image edge hold garbage and are cropped away.


def _tap_offsets(kh, kw, wp):
    return [(s, (s // kw) * wp + (s % kw)) for s in range(kh * kw)]


def _conv_nhwc(x, kernels, bias, pad):
    n, h, w, c = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c or bias.shape != (f,):
        raise ValueError(f"kernel {kernels.shape} / bias {bias.shape} do not fit {c} input channels")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    hp, wp = xp.shape[1], xp.shape[2]
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("input smaller than kernel")
    rows = xp.reshape(-1, c)
    taps = np.ascontiguousarray(kernels.transpose(2, 3, 1, 0)).reshape(kh * kw, c, f)
    total = len(rows)
    acc = np.zeros((total, f), dtype=np.result_type(rows, taps))
    for s, off in _tap_offsets(kh, kw, wp):
        acc[:total - off] += rows[off:] @ taps[s]
    out = acc.reshape(n, hp, wp, f)[:, :ho, :wo] + bias
    return np.ascontiguousarray(out), (rows, taps, xp.shape, kernels.shape, pad)


def _conv_nhwc_backward(dout, cache):
    rows, taps, pshape, kshape, pad = cache
    n, hp, wp, c = pshape
    f, _, kh, kw = kshape
    ho, wo = hp - kh + 1, wp - kw + 1
    if dout.shape != (n, ho, wo, f):
        raise ValueError(f"upstream gradient shape {dout.shape} does not match the forward pass")
    dbias = dout.sum(axis=(0, 1, 2))
    dacc = np.zeros((n, hp, wp, f), dtype=dout.dtype)
    dacc[:, :ho, :wo] = dout
    dacc = dacc.reshape(-1, f)
    total = len(dacc)
    drows = np.zeros_like(rows, dtype=np.result_type(rows, dout))
    dtaps = np.empty_like(taps, dtype=np.result_type(taps, dout))
    for s, off in _tap_offsets(kh, kw, wp):
        dtaps[s] = rows[off:].T @ dacc[:total - off]
        drows[off:] += dacc[:total - off] @ taps[s].T
    dkernels = dtaps.reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
    dx = drows.reshape(n, hp, wp, c)
    if pad:
        dx = dx[:, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(dx), np.ascontiguousarray(dkernels), dbias


def conv_forward(x, kernels, bias, padding="same"):
    """Cross-correlate (C, H, W) or (N, C, H, W) input with (F, C, k, k) kernels.

    Returns ``(out, cache)``; ``out`` keeps the input's channel-first layout.
    """
    x = np.asarray(x)
    unbatched = x.ndim == 3
    xb = x[None] if unbatched else x
    if xb.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")
    pad = kernels.shape[-1] // 2 if padding == "same" else 0
    out, cache = _conv_nhwc(xb.transpose(0, 2, 3, 1), kernels, bias, pad)
    out = out.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[0] if unbatched else out), (cache, unbatched)


def conv_backward(dout, cache):
    """Gradients (dx, dkernels, dbias) of ``conv_forward`` given the upstream gradient."""
    inner, unbatched = cache
    d = dout[None] if unbatched else dout
    dx, dk, db = _conv_nhwc_backward(np.ascontiguousarray(d.transpose(0, 2, 3, 1)), inner)
    dx = dx.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx[0] if unbatched else dx), dk, db


def conv3x3_forward(x, kernels, bias, padding="same"):
    if kernels.shape[-2:] != (3, 3):
        raise ValueError("conv3x3 expects 3x3 kernels")
    return conv_forward(x, kernels, bias, padding)


conv3x3_backward = conv_backward


def l2norm(x, fallback=None):
    """Scale rows of ``x`` to unit length.

    Rows shorter than 1e-12 raise unless ``fallback`` gives a replacement unit vector.
    """
    x = np.asarray(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    small = norm < L2_EPS
    if np.any(small):
        if fallback is None:
            raise ValueError("cannot normalize a near-zero vector")
        safe = np.where(small, 1.0, norm)
        return np.where(small, np.asarray(fallback, dtype=x.dtype), x / safe), norm
    return x / norm, norm


def mse_loss(pred, gt):
    """Mean squared error over all components and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(gt, dtype=pred.dtype)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# -- layers --------------------------------------------------------------------------


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, in_ch, out_ch, size=3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * size * size
        limit = np.sqrt(6.0 / fan_in)
        self.params["k"] = rng.uniform(-limit, limit, (out_ch, in_ch, size, size)).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False):
        pad = self.params["k"].shape[-1] // 2
        out, self._cache = _conv_nhwc(x, self.params["k"], self.params["b"], pad)
        return out

    def backward(self, dout):
        dx, self.grads["k"], self.grads["b"] = _conv_nhwc_backward(dout, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._pos = x > 0
        return np.where(self._pos, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self._pos, dout, 0).astype(dout.dtype, copy=False)


class Dropout(Layer):
    """Inverted dropout. ``frozen`` reuses the last mask, for gradient checks."""

    def __init__(self, p=0.2):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(0)
        self.frozen = False
        self._scale = None

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._scale = None
            return x
        if not (self.frozen and self._scale is not None and self._scale.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.p
            self._scale = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * self._scale

    def backward(self, dout):
        return dout if self._scale is None else dout * self._scale


class AvgPool2(Layer):
    def forward(self, x, train=False):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError("avg_pool2 needs even spatial size")
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, dout):
        return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * dout.dtype.type(0.25)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / in_dim)
        self.params["W"] = rng.uniform(-limit, limit, (in_dim, out_dim)).astype(dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class L2Norm(Layer):
    """Unit-normalization head; degenerate rows fall back to +z with zero gradient."""

    fallback = (0.0, 0.0, 1.0)

    def forward(self, x, train=False):
        y, norm = l2norm(x, fallback=self.fallback if x.shape[-1] == 3 else None)
        self._y, self._norm = y, norm
        return y

    def backward(self, dout):
        y, norm = self._y, self._norm
        small = norm < L2_EPS
        dx = (dout - y * np.sum(y * dout, axis=-1, keepdims=True)) / np.where(small, 1.0, norm)
        return np.where(small, 0.0, dx).astype(dout.dtype, copy=False)


class Concat(Layer):
    """Runs ``inner`` on x and stacks its output after x along channels."""

    def __init__(self, inner: list[Layer]):
        super().__init__()
        self.inner = inner

    def forward(self, x, train=False):
        self._c = x.shape[-1]
        y = x
        for layer in self.inner:
            y = layer.forward(y, train)
        return np.concatenate([x, y], axis=-1)

    def backward(self, dout):
        dx = dout[..., :self._c]
        dy = np.ascontiguousarray(dout[..., self._c:])
        for layer in reversed(self.inner):
            dy = layer.backward(dy)
        return dx + dy


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


# -- architecture --------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple
    out_shape: tuple
    units: int = 0
    p: float = 0.0


@dataclass(frozen=True)
class ArchConfig:
    w: int = 32
    init_filters: int = 16
    growth: int = 16
    block_layers: int = 2
    transition_filters: int = 32
    hidden: int = 128
    dropout: float = 0.2


def layer_specs(cfg: ArchConfig) -> list[LayerSpec]:
    """The flat layer chain of the network, used for documentation and fingerprinting."""
    specs = []
    c, s = 1, cfg.w
    specs.append(LayerSpec("conv3x3", (c, s, s), (cfg.init_filters, s, s), cfg.init_filters))
    c = cfg.init_filters
    for block in range(2):
        for _ in range(cfg.block_layers):
            specs.append(LayerSpec("relu", (c, s, s), (c, s, s)))
            specs.append(LayerSpec("conv3x3", (c, s, s), (cfg.growth, s, s), cfg.growth))
            specs.append(LayerSpec("dropout", (cfg.growth, s, s), (cfg.growth, s, s), p=cfg.dropout))
            specs.append(LayerSpec("concat", (c, s, s), (c + cfg.growth, s, s)))
            c += cfg.growth
        if block == 0:
            t = cfg.transition_filters
            specs.append(LayerSpec("transition", (c, s, s), (t, s // 2, s // 2), t))
            c, s = t, s // 2
    specs.append(LayerSpec("relu", (c, s, s), (c, s, s)))
    flat = c * s * s
    specs.append(LayerSpec("dense", (flat,), (cfg.hidden,), cfg.hidden))
    specs.append(LayerSpec("relu", (cfg.hidden,), (cfg.hidden,)))
    specs.append(LayerSpec("dense", (cfg.hidden,), (3,), 3))
    specs.append(LayerSpec("l2norm", (3,), (3,)))
    return specs


def fingerprint(cfg: ArchConfig) -> str:
    chain = [asdict(s) for s in layer_specs(cfg)]
    blob = json.dumps({"version": FORMAT_VERSION, "layers": chain}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class MicroNet(Sequential):
    """Observation map (N, 1, w, w) -> unit normal (N, 3)."""

    def __init__(self, cfg: ArchConfig = ArchConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dropouts: list[Dropout] = []
        layers: list[Layer] = [Conv(1, cfg.init_filters, 3, rng, dtype)]
        c, s = cfg.init_filters, cfg.w
        for block in range(2):
            for _ in range(cfg.block_layers):
                drop = Dropout(cfg.dropout)
                self.dropouts.append(drop)
                layers.append(Concat([ReLU(), Conv(c, cfg.growth, 3, rng, dtype), drop]))
                c += cfg.growth
            if block == 0:
                layers.append(Sequential([Conv(c, cfg.transition_filters, 1, rng, dtype), AvgPool2()]))
                c, s = cfg.transition_filters, s // 2
        layers += [ReLU(), Flatten(), Dense(c * s * s, cfg.hidden, rng, dtype), ReLU(),
                   Dense(cfg.hidden, 3, rng, dtype), L2Norm()]
        super().__init__(layers)
        self.seed_dropout(seed)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.cfg)

    @property
    def dtype(self):
        return self.layers[0].params["k"].dtype

    def _param_layers(self):
        found = []

        def walk(layer, prefix):
            if isinstance(layer, Sequential):
                for i, sub in enumerate(layer.layers):
                    walk(sub, f"{prefix}{i}.")
            elif isinstance(layer, Concat):
                for i, sub in enumerate(layer.inner):
                    walk(sub, f"{prefix}{i}.")
            elif layer.params:
                found.append((prefix, layer))

        for i, layer in enumerate(self.layers):
            walk(layer, f"{i}.")
        return found

    def parameters(self) -> dict:
        return {pre + k: v for pre, layer in self._param_layers() for k, v in layer.params.items()}

    def gradients(self) -> dict:
        return {pre + k: v for pre, layer in self._param_layers() for k, v in layer.grads.items()}

    def set_parameters(self, params: dict):
        for pre, layer in self._param_layers():
            for k in layer.params:
                layer.params[k] = params[pre + k]

    def astype(self, dtype) -> "MicroNet":
        self.set_parameters({k: v.astype(dtype) for k, v in self.parameters().items()})
        return self

    def seed_dropout(self, seed: int):
        seqs = np.random.SeedSequence(seed).spawn(len(self.dropouts))
        for d, s in zip(self.dropouts, seqs):
            d.rng = np.random.default_rng(s)

    def freeze_dropout(self, frozen=True):
        for d in self.dropouts:
            d.frozen = frozen

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            return self.forward(x[None], train)[0]
        w = self.cfg.w
        if x.shape[1:] != (1, w, w):
            raise ValueError(f"expected (N, 1, {w}, {w}) input, got {x.shape}")
        return super().forward(x.reshape(-1, w, w, 1), train)

    def backward(self, dout):
        dx = super().backward(dout)
        return dx.reshape(dx.shape[0], 1, self.cfg.w, self.cfg.w)

    def predict(self, maps, batch_size=128) -> np.ndarray:
        """Inference over (N, w, w) maps in fixed-size chunks."""
        maps = np.asarray(maps)
        out = np.empty((len(maps), 3), dtype=self.dtype)
        for start in range(0, len(maps), batch_size):
            chunk = maps[start:start + batch_size, None]
            out[start:start + batch_size] = self.forward(chunk, train=False)
        return out


def network_forward(obsmap, net: MicroNet, mode="infer", expected_fingerprint=None):
    if expected_fingerprint is not None and expected_fingerprint != net.fingerprint:
        raise FingerprintError(f"weights fingerprint {expected_fingerprint} != network {net.fingerprint}")
    x = np.asarray(obsmap).reshape(1, 1, net.cfg.w, net.cfg.w)
    return net.forward(x, train=(mode == "train"))[0]


# -- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update. Mutates ``state`` and returns the new parameters."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[k] = (p - step).astype(p.dtype, copy=False)
    return out


# -- gradient verification -----------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def finite_diff_check(module: Layer, x, probes: int = 12, h: float = 1e-5, seed: int = 0,
                      train: bool = False) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a random linear read-out.

    The objective is ``sum(R * module.forward(x))`` for a fixed random ``R``. For each
    parameter tensor (and the input, under the key ``"input"``) ``probes`` entries are
    perturbed by ``h * max(1, |value|)``. The reported error per tensor is the largest
    absolute disagreement divided by the largest gradient magnitude seen in that tensor.
    Run in float64; freeze any dropout masks first.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = module.forward(x, train)
    weights = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(weights * module.forward(x, train)))

    module.forward(x, train)
    dx = module.backward(weights)
    params = module.parameters() if hasattr(module, "parameters") else module.params
    grads = dict(module.gradients() if hasattr(module, "gradients") else module.grads)
    targets = dict(params)
    grads["input"] = dx
    targets["input"] = x

    errors = {}
    for name, tensor in targets.items():
        flat = tensor.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        analytic, numeric = [], []
        for i in picks:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * step))
            analytic.append(gflat[i])
        analytic, numeric = np.array(analytic), np.array(numeric)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return GradCheckReport(errors)


# -- serialization -------------------------------------------------------------------


def save_weights(path, net: MicroNet) -> None:
    """Write parameters as one flat tensor file plus a JSON manifest alongside it."""
    path = Path(path)
    params = net.parameters()
    manifest = {
        "format_version": FORMAT_VERSION,
        "fingerprint": net.fingerprint,
        "arch": asdict(net.cfg),
        "layers": [asdict(s) for s in layer_specs(net.cfg)],
        "tensors": [[k, list(v.shape)] for k, v in params.items()],
    }
    flat = np.concatenate([v.reshape(-1).astype(np.float32) for v in params.values()])
    write_tensor(path, flat)
    manifest_path(path).write_text(json.dumps(manifest, indent=1))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_weights(path) -> MicroNet:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FingerprintError(f"unsupported weights format {manifest.get('format_version')}")
    cfg = ArchConfig(**manifest["arch"])
    if fingerprint(cfg) != manifest["fingerprint"]:
        raise FingerprintError("architecture fingerprint does not match this code version")
    net = MicroNet(cfg)
    flat = read_tensor(path)
    params, offset = {}, 0
    expected = net.parameters()
    for name, shape in manifest["tensors"]:
        if name not in expected or tuple(shape) != expected[name].shape:
            raise FingerprintError(f"unexpected tensor {name} {shape}")
        size = int(np.prod(shape))
        params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size or len(params) != len(expected):
        raise FingerprintError("weights payload does not match the manifest")
    net.set_parameters(params)
    return net
