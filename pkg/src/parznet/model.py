"""ParzNet graph: Parzen block, pool, layer norm, conv-conv-pool pairs, MLP, softmax.

Every network scalar is a :class:`VariationalParam`. A deterministic model
keeps the same storage and simply never samples. Forward in ``"sampled"``
mode draws one standard-normal ``eps`` per scalar for the whole minibatch;
``"mean"`` mode uses the variational means.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc
from . import parzen
from .variational import (
    LOG_ALPHA_MIN,
    PriorConfig,
    PriorKind,
    ScaleMixturePrior,
    VariationalParam,
    clip_log_alpha,
    sample_param,
    sample_param_grads,
)

INIT_LOG_ALPHA = -3.0
NEAR_DETERMINISTIC_LOG_ALPHA = LOG_ALPHA_MIN


class ModelConfigError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    input_len: int = 3200
    sample_rate: float = 16000.0
    parzen_count: int = 40
    parzen_taps: int = 401
    window_kind: str = "epanechnikov"
    freq_scale: str = "mel"
    conv_channels: tuple = (32, 32, 64, 64, 128, 128, 256, 256)
    conv_kernel: int = 5
    pool_size: int = 3
    padded_pairs_from: int = 4
    mlp_hidden: tuple = (512, 512, 512)
    fc_init_scale: float = 0.01
    class_count: int = 8
    variational: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def layer_lengths(self):
        """Signal length after the Parzen block, its pool, and each conv layer / pair pool."""
        length = self.input_len - self.parzen_taps + 1
        lengths = [length]
        length //= self.pool_size
        lengths.append(length)
        for i in range(len(self.conv_channels)):
            if i // 2 < self.padded_pairs_from:
                length -= self.conv_kernel - 1
            lengths.append(length)
            if i % 2 == 1:
                length //= self.pool_size
                lengths.append(length)
        return lengths

    def validate(self):
        if len(self.conv_channels) % 2:
            raise ModelConfigError("conv_channels must describe complete conv-conv pairs")
        if len(self.mlp_hidden) != 3:
            raise ModelConfigError("the MLP block has exactly three hidden layers")
        if self.parzen_taps % 2 == 0 or self.parzen_taps > self.input_len:
            raise ModelConfigError("parzen_taps must be odd and no longer than the input")
        if self.class_count < 2 or self.parzen_count < 2:
            raise ModelConfigError("need at least two classes and two Parzen filters")
        if self.dtype not in ("float32", "float64"):
            raise ModelConfigError("dtype must be float32 or float64")
        parzen.WindowKind(self.window_kind)
        lengths = self.layer_lengths()
        if min(lengths) < 1:
            raise ModelConfigError(f"input too short for this depth (lengths {lengths})")
        return lengths


# -- layers ---------------------------------------------------------------------------

class ParzenBlock:
    groups = ("parzen.eta", "parzen.gamma")

    def __init__(self, cfg: ModelConfig):
        self.fs = cfg.sample_rate
        self.taps = cfg.parzen_taps
        self.kind = parzen.WindowKind(cfg.window_kind)

    def forward(self, x, vals):
        eta = parzen.clip_eta(vals["parzen.eta"])
        gamma = parzen.clip_gamma(vals["parzen.gamma"])
        taps = parzen.bank_taps(eta, gamma, self.fs, self.taps, self.kind)
        out, cache = nc.fft_correlate_forward(x, taps.astype(x.dtype))
        self.cache = (cache, eta, gamma)
        return out

    def backward(self, dout, grads):
        cache, eta, gamma = self.cache
        dtaps = nc.fft_correlate_backward(dout.astype(np.float64), cache)
        d_eta, d_gamma = parzen.bank_tap_grads(eta, gamma, self.fs, self.taps, self.kind)
        grads["parzen.eta"] = (dtaps * d_eta).sum(axis=1)
        grads["parzen.gamma"] = (dtaps * d_gamma).sum(axis=1)
        return None


class Pool:
    groups = ()

    def __init__(self, size):
        self.size = size

    def forward(self, x, vals):
        out, self.cache = nc.maxpool_forward(x, self.size, self.size)
        return out

    def backward(self, dout, grads):
        return nc.maxpool_backward(dout, self.cache)


class Norm:
    def __init__(self, name):
        self.name = name
        self.groups = (f"{name}.scale", f"{name}.offset")

    def forward(self, x, vals):
        out, self.cache = nc.layernorm_forward(x, vals[self.groups[0]], vals[self.groups[1]])
        return out

    def backward(self, dout, grads):
        dx, ds, do = nc.layernorm_backward(dout, self.cache)
        grads[self.groups[0]], grads[self.groups[1]] = ds, do
        return dx


class Conv:
    def __init__(self, name, pad):
        self.name = name
        self.pad = pad
        self.groups = (f"{name}.w", f"{name}.b")

    def forward(self, x, vals):
        out, ccache = nc.conv1d_forward(x, vals[self.groups[0]], vals[self.groups[1]], pad=self.pad)
        out, mask = nc.relu_forward(out)
        self.cache = (ccache, mask)
        return out

    def backward(self, dout, grads):
        ccache, mask = self.cache
        dx, dw, db = nc.conv1d_backward(nc.relu_backward(dout, mask), ccache)
        grads[self.groups[0]], grads[self.groups[1]] = dw, db
        return dx


class Flatten:
    groups = ()

    def forward(self, x, vals):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout, grads):
        return dout.reshape(self.shape)


class Dense:
    def __init__(self, name, relu):
        self.name = name
        self.relu = relu
        self.groups = (f"{name}.w", f"{name}.b")

    def forward(self, x, vals):
        out, dcache = nc.dense_forward(x, vals[self.groups[0]], vals[self.groups[1]])
        mask = None
        if self.relu:
            out, mask = nc.relu_forward(out)
        self.cache = (dcache, mask)
        return out

    def backward(self, dout, grads):
        dcache, mask = self.cache
        if mask is not None:
            dout = nc.relu_backward(dout, mask)
        dx, dw, db = nc.dense_backward(dout, dcache)
        grads[self.groups[0]], grads[self.groups[1]] = dw, db
        return dx


FEATURE_PREFIXES = ("parzen.", "norm", "conv")


def is_feature_group(name):
    return name.startswith(FEATURE_PREFIXES)


# -- graph -------------------------------------------------------------------------

@dataclass
class ModelGraph:
    cfg: ModelConfig
    params: dict
    prior: PriorConfig
    layers: list = field(default_factory=list)
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        self._cache_token = None
        self._eps = None

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    @property
    def variational(self):
        return self.cfg.variational

    def param_count(self):
        return sum(p.mu.size for p in self.params.values())

    def values(self, mode="mean", seed=None):
        """Network values per group; ``eps`` draws are made in sorted group order."""
        if mode not in ("mean", "sampled"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "mean" or not self.variational:
            self._eps = None
            return {k: p.mu for k, p in self.params.items()}
        rng = np.random.default_rng(seed)
        self._eps = {}
        vals = {}
        for name in sorted(self.params):
            p = self.params[name]
            eps = rng.standard_normal(p.mu.shape)
            if name in self.frozen:
                vals[name] = p.mu
                continue
            self._eps[name] = eps
            vals[name] = sample_param(p.mu, p.log_alpha, eps)
        return vals

    def forward(self, frames, mode="mean", seed=None):
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.input_len:
            raise ValueError(f"frames must have shape (batch, {self.cfg.input_len}), got {frames.shape}")
        x = frames.astype(self.dtype)
        vals = self.values(mode, seed)
        for layer in self.layers:
            x = layer.forward(x, vals)
        self._cache_token = object()
        self._last_token = self._cache_token
        return x

    def backward(self, dlogits):
        """Return ``{group: (d_mu, d_log_alpha)}`` for the most recent forward call."""
        if self._cache_token is None:
            raise StaleCacheError("backward called without a matching forward")
        self._cache_token = None
        raw = {}
        d = np.asarray(dlogits).astype(self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d, raw)
        grads = {}
        for name, p in self.params.items():
            g = np.asarray(raw[name], dtype=np.float64)
            if self._eps is not None and name in self._eps:
                grads[name] = sample_param_grads(p.mu, p.log_alpha, self._eps[name], g)
            else:
                grads[name] = (g, np.zeros_like(g))
        return grads

    def clip(self):
        for name, p in self.params.items():
            p.log_alpha = clip_log_alpha(p.log_alpha)
        self.params["parzen.eta"].mu = parzen.clip_eta(self.params["parzen.eta"].mu)
        self.params["parzen.gamma"].mu = parzen.clip_gamma(self.params["parzen.gamma"].mu)

    def filter_bank(self):
        return parzen.FilterBank(self.params["parzen.eta"].mu.copy(), self.params["parzen.gamma"].mu.copy(),
                                 self.cfg.sample_rate, self.cfg.parzen_taps, parzen.WindowKind(self.cfg.window_kind))

    def snapshot(self):
        return {k: (p.mu.copy(), p.log_alpha.copy()) for k, p in self.params.items()}

    def restore(self, snap):
        for k, (mu, la) in snap.items():
            self.params[k].mu = mu.copy()
            self.params[k].log_alpha = la.copy()

    def predict(self, frames, batch_size=256):
        out = [self.forward(frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)]
        return np.concatenate(out).astype(np.float64)


def _layers(cfg):
    layers = [ParzenBlock(cfg), Pool(cfg.pool_size), Norm("norm0")]
    for i in range(len(cfg.conv_channels)):
        layers.append(Conv(f"conv{i + 1}", pad=(i // 2) >= cfg.padded_pairs_from))
        if i % 2 == 1:
            layers.append(Pool(cfg.pool_size))
    layers.append(Flatten())
    for j in range(len(cfg.mlp_hidden)):
        layers.append(Dense(f"fc{j + 1}", relu=True))
    layers.append(Dense("out", relu=False))
    return layers


def parameter_shapes(cfg: ModelConfig):
    """Ordered ``{group: shape}`` for a configuration."""
    lengths = cfg.validate()
    shapes = {"parzen.eta": (cfg.parzen_count,), "parzen.gamma": (cfg.parzen_count,),
              "norm0.scale": (cfg.parzen_count,), "norm0.offset": (cfg.parzen_count,)}
    c_in = cfg.parzen_count
    for i, c in enumerate(cfg.conv_channels):
        shapes[f"conv{i + 1}.w"] = (c, c_in, cfg.conv_kernel)
        shapes[f"conv{i + 1}.b"] = (c,)
        c_in = c
    p = lengths[-1] * c_in
    for j, q in enumerate(cfg.mlp_hidden + (cfg.class_count,)):
        name = f"fc{j + 1}" if j < len(cfg.mlp_hidden) else "out"
        shapes[f"{name}.w"] = (p, q)
        shapes[f"{name}.b"] = (q,)
        p = q
    return shapes


def build(cfg: ModelConfig, seed: int = 0, prior_kind=PriorKind.LOG_SCALE_UNIFORM,
          mixture: ScaleMixturePrior | None = None) -> ModelGraph:
    shapes = parameter_shapes(cfg)
    rng = np.random.default_rng(seed)
    bank = parzen.mel_init(cfg.parzen_count, fs=cfg.sample_rate, n_taps=cfg.parzen_taps,
                           kind=parzen.WindowKind(cfg.window_kind), scale=cfg.freq_scale)
    params, means, frozen_alpha = {}, {}, set()
    for name, shape in shapes.items():
        la = INIT_LOG_ALPHA
        mean = 0.0
        if name == "parzen.eta":
            mu = bank.eta.copy()
            mean = mu.copy()
        elif name == "parzen.gamma":
            mu = bank.gamma.copy()
            mean = mu.copy()
        elif name.startswith("norm"):
            mu = np.ones(shape) if name.endswith("scale") else np.zeros(shape)
            mean = 1.0 if name.endswith("scale") else 0.0
            la = NEAR_DETERMINISTIC_LOG_ALPHA
            frozen_alpha.add(name)
        elif name.startswith("conv"):
            w_shape = shapes[name[:-1] + "w"]
            bound = 1.0 / math.sqrt(w_shape[1] * w_shape[2])
            mu = rng.uniform(-bound, bound, size=shape)
        else:
            if name.endswith(".w"):
                bound = cfg.fc_init_scale / math.sqrt(shape[0] + shape[1])
                mu = rng.uniform(-bound, bound, size=shape)
            else:
                mu = np.zeros(shape)
            if name.startswith("out"):
                la = NEAR_DETERMINISTIC_LOG_ALPHA
        params[name] = VariationalParam(mu, np.full(shape, la))
        means[name] = mean
    prior = PriorConfig(kind=prior_kind, mixture=mixture or ScaleMixturePrior(), means=means,
                        frozen_alpha=frozen_alpha)
    prior.check(params)
    return ModelGraph(cfg, params, prior, _layers(cfg))


# -- shift stability ------------------------------------------------------------

def shift_stability(model: ModelGraph, frames, max_shift: int):
    """Mean-mode output change under circular shifts in [-max_shift, max_shift].

    Returns a list of dicts with ``shift``, ``mean_rel_change``, ``max_rel_change``
    and ``argmax_stable`` (fraction of frames whose predicted class is unchanged).
    """
    frames = np.asarray(frames)
    base = model.predict(frames)
    base_arg = base.argmax(axis=1)
    norms = np.linalg.norm(base, axis=1)
    rows = []
    for s in range(-max_shift, max_shift + 1):
        out = model.predict(np.roll(frames, s, axis=1))
        rel = np.linalg.norm(out - base, axis=1) / np.maximum(norms, 1e-300)
        rows.append({"shift": s, "mean_rel_change": float(rel.mean()), "max_rel_change": float(rel.max()),
                     "argmax_stable": float(np.mean(out.argmax(axis=1) == base_arg))})
    return rows


# -- checkpoint ----------------------------------------------------------------------
#
# PZNM container (little-endian):
#   magic b"PZNM", version u32, config_len u32, config JSON (utf-8),
#   manifest_len u32, manifest JSON: [{"name", "shape", "offset"}...] with offsets
#   relative to the start of the data section, then the data section:
#   float64 blocks, one per manifest entry.

CKPT_MAGIC = b"PZNM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _blocks(model: ModelGraph):
    for name, p in model.params.items():
        yield f"{name}:mu", p.mu
        yield f"{name}:log_alpha", p.log_alpha
    for name in model.params:
        m = model.prior.means[name]
        if np.ndim(m):
            yield f"{name}:prior_mean", np.asarray(m, dtype=float)


def save_checkpoint(model: ModelGraph, path, extra=None):
    meta = {"model": model.cfg.to_dict(), "prior_kind": model.prior.kind.value,
            "mixture": dataclasses.asdict(model.prior.mixture),
            "scalar_prior_means": {k: float(v) for k, v in model.prior.means.items() if not np.ndim(v)},
            "frozen_alpha": sorted(model.prior.frozen_alpha), "frozen": sorted(model.frozen),
            "extra": extra or {}}
    manifest, chunks, offset = [], [], 0
    for name, arr in _blocks(model):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    cfg_bytes = json.dumps(meta, sort_keys=True).encode()
    man_bytes = json.dumps(manifest).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg_bytes)) + cfg_bytes)
        fh.write(struct.pack("<I", len(man_bytes)) + man_bytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a PZNM checkpoint (bad magic at offset 0)")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(raw[pos:pos + clen])
    pos += clen
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    manifest = json.loads(raw[pos:pos + mlen])
    base = pos + mlen
    cfg = ModelConfig.from_dict(meta["model"])
    mixture = ScaleMixturePrior(**meta["mixture"])
    model = build(cfg, 0, PriorKind(meta["prior_kind"]), mixture)
    arrays = {}
    for entry in manifest:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"truncated block {entry['name']} at offset {start}")
        arrays[entry["name"]] = np.frombuffer(raw, "<f8", count, start).reshape(entry["shape"]).astype(np.float64)
    for name, p in model.params.items():
        p.mu = arrays[f"{name}:mu"]
        p.log_alpha = arrays[f"{name}:log_alpha"]
        key = f"{name}:prior_mean"
        model.prior.means[name] = arrays[key] if key in arrays else meta["scalar_prior_means"][name]
    model.prior.frozen_alpha = set(meta["frozen_alpha"])
    model.frozen = set(meta["frozen"])
    return model, meta.get("extra", {})


def params_digest(model: ModelGraph):
    h = hashlib.sha256()
    for name in sorted(model.params):
        p = model.params[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.mu, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(p.log_alpha, dtype="<f8").tobytes())
    return h.hexdigest()
