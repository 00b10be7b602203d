"""Finite-difference suites for every analytic gradient in the package.

Each suite returns a list of :class:`Check` rows; ``run`` dispatches by scope.
All checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netcore as nc
from . import parzen
from .model import ModelConfig, build
from .quadrature import hermite_rule
from .variational import (
    ScaleMixturePrior,
    kl_lsu_gh,
    kl_lsu_gh_grad,
    kl_sm_gh,
    kl_sm_gh_grad,
)


@dataclass
class Check:
    scope: str
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self):
        return bool(self.max_rel_err <= self.tol)


def rel_err(analytic, numeric, floor=1e-300):
    """Normwise relative error max|a - n| / max(max|a|, max|n|)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    if not a.size:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), floor)
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f, x, h):
    """Central differences of scalar ``f`` with respect to every entry of array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    h = np.broadcast_to(h, x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h[i]
        fp = f()
        x[i] = old - h[i]
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h[i])
    return g


def layer_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []

    def scalar_of(y, proj):
        return lambda: float(np.sum(y() * proj))

    # conv1d, valid and padded
    for pad in (False, True):
        x = rng.standard_normal((2, 11, 3))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)
        y, cache = nc.conv1d_forward(x, w, b, pad)
        proj = rng.standard_normal(y.shape)
        dx, dw, db = nc.conv1d_backward(proj, cache)
        f = scalar_of(lambda: nc.conv1d_forward(x, w, b, pad)[0], proj)
        err = max(rel_err(dx, numeric_grad(f, x, 1e-5)), rel_err(dw, numeric_grad(f, w, 1e-5)),
                  rel_err(db, numeric_grad(f, b, 1e-5)))
        out.append(Check("layers", f"conv1d(pad={pad})", err, 1e-6))

    # max pooling on distinct values (away from ties)
    x = rng.permutation(60).reshape(2, 10, 3).astype(float) / 7.0
    y, cache = nc.maxpool_forward(x, 3, 3)
    proj = rng.standard_normal(y.shape)
    dx = nc.maxpool_backward(proj, cache)
    f = scalar_of(lambda: nc.maxpool_forward(x, 3, 3)[0], proj)
    out.append(Check("layers", "maxpool", rel_err(dx, numeric_grad(f, x, 1e-6)), 1e-6))

    # relu away from the kink
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-3] = 0.5
    y, mask = nc.relu_forward(x)
    proj = rng.standard_normal(y.shape)
    f = scalar_of(lambda: nc.relu_forward(x)[0], proj)
    out.append(Check("layers", "relu", rel_err(nc.relu_backward(proj, mask), numeric_grad(f, x, 1e-6)), 1e-8))

    # layer norm
    x = rng.standard_normal((2, 6, 4))
    s = rng.standard_normal(4)
    o = rng.standard_normal(4)
    y, cache = nc.layernorm_forward(x, s, o)
    proj = rng.standard_normal(y.shape)
    dx, ds, do = nc.layernorm_backward(proj, cache)
    f = scalar_of(lambda: nc.layernorm_forward(x, s, o)[0], proj)
    err = max(rel_err(dx, numeric_grad(f, x, 1e-5)), rel_err(ds, numeric_grad(f, s, 1e-5)),
              rel_err(do, numeric_grad(f, o, 1e-5)))
    out.append(Check("layers", "layernorm", err, 1e-5))

    # dense
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    y, cache = nc.dense_forward(x, w, b)
    proj = rng.standard_normal(y.shape)
    dx, dw, db = nc.dense_backward(proj, cache)
    f = scalar_of(lambda: nc.dense_forward(x, w, b)[0], proj)
    err = max(rel_err(dx, numeric_grad(f, x, 1e-5)), rel_err(dw, numeric_grad(f, w, 1e-5)),
              rel_err(db, numeric_grad(f, b, 1e-5)))
    out.append(Check("layers", "dense", err, 1e-8))

    # jittered softmax cross-entropy
    z = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, size=4)
    for kappa in (1e-8, 0.05):
        loss, _, cache = nc.softmax_xent_forward(z, labels, kappa)
        wts = rng.uniform(0.5, 1.5, size=4)
        dz = nc.softmax_xent_backward(wts, cache)
        f = lambda: float(np.dot(nc.softmax_xent_forward(z, labels, kappa)[0], wts))
        out.append(Check("layers", f"softmax_xent(kappa={kappa:g})", rel_err(dz, numeric_grad(f, z, 1e-6)), 1e-6))

    # FFT correlation (Parzen block convolution) with respect to the taps
    x = rng.standard_normal((2, 40))
    taps = rng.standard_normal((3, 9))
    y, cache = nc.fft_correlate_forward(x, taps)
    proj = rng.standard_normal(y.shape)
    dt = nc.fft_correlate_backward(proj, cache)
    f = scalar_of(lambda: nc.fft_correlate_forward(x, taps)[0], proj)
    out.append(Check("layers", "fft_correlate", rel_err(dt, numeric_grad(f, taps, 1e-5)), 1e-6))
    return out


def filter_checks(seed=0):
    out = []
    fs, n_taps = parzen.DEFAULT_FS, parzen.DEFAULT_TAPS
    bank = parzen.mel_init(40)
    # keep every parameter strictly inside its clip interval
    eta = np.clip(bank.eta, 60.0, 7900.0)
    gamma = np.clip(bank.gamma, 7000.0, 3.9e6)
    for kind in parzen.WindowKind:
        d_eta, d_gamma = parzen.bank_tap_grads(eta, gamma, fs, n_taps, kind)
        he = 1e-6 * eta[:, None]
        hg = 1e-6 * gamma[:, None]
        num_eta = (parzen.bank_taps(eta[:, None] + he, gamma, fs, n_taps, kind)
                   - parzen.bank_taps(eta[:, None] - he, gamma, fs, n_taps, kind))
        # bank_taps broadcasts (B,1) against (B,) -> take the diagonal filter rows
        num_eta = np.stack([
            (parzen.bank_taps(eta[i:i + 1] + he[i], gamma[i:i + 1], fs, n_taps, kind)
             - parzen.bank_taps(eta[i:i + 1] - he[i], gamma[i:i + 1], fs, n_taps, kind))[0] / (2 * he[i])
            for i in range(len(eta))])
        num_gamma = np.stack([
            (parzen.bank_taps(eta[i:i + 1], gamma[i:i + 1] + hg[i], fs, n_taps, kind)
             - parzen.bank_taps(eta[i:i + 1], gamma[i:i + 1] - hg[i], fs, n_taps, kind))[0] / (2 * hg[i])
            for i in range(len(eta))])
        # exclude taps within a step of the support edge, where the second derivative jumps
        t = parzen.tap_times(fs, n_taps)
        edge = np.abs(1.0 - gamma[:, None] * t**2) < 1e-4
        if kind is parzen.WindowKind.EPANECHNIKOV:
            num_gamma = np.where(edge, d_gamma, num_gamma)
        scale_e = np.abs(d_eta).max(axis=1, keepdims=True)
        scale_g = np.abs(d_gamma).max(axis=1, keepdims=True)
        err_e = float(np.max(np.abs(d_eta - num_eta) / scale_e))
        err_g = float(np.max(np.abs(d_gamma - num_gamma) / scale_g))
        out.append(Check("filters", f"taps d/deta ({kind.value})", err_e, 1e-6))
        out.append(Check("filters", f"taps d/dgamma ({kind.value})", err_g, 1e-6))
    return out


def kl_checks(seed=0):
    out = []
    rule = hermite_rule(32)
    h = 1e-5
    las = np.array([-9.0, -5.0, -3.0, -1.0, 0.5, 2.0])
    num = (kl_lsu_gh(las + h, rule) - kl_lsu_gh(las - h, rule)) / (2 * h)
    out.append(Check("kl", "log-scale uniform d/dlog_alpha", rel_err(kl_lsu_gh_grad(las, rule), num), 1e-6))
    prior = ScaleMixturePrior(0.25, 0.0, 0.0005, 1.0)
    mus = np.array([-2.0, -0.5, 0.01, 0.5, 2.0])
    mu, la = np.meshgrid(mus, np.array([-5.0, -3.0, -1.0, 0.5]))
    mu, la = mu.ravel(), la.ravel()
    d_mu, d_la = kl_sm_gh_grad(mu, la, prior, rule)
    hm = 1e-6 * np.abs(mu)
    num_mu = (kl_sm_gh(mu + hm, la, prior, rule) - kl_sm_gh(mu - hm, la, prior, rule)) / (2 * hm)
    num_la = (kl_sm_gh(mu, la + h, prior, rule) - kl_sm_gh(mu, la - h, prior, rule)) / (2 * h)
    out.append(Check("kl", "scale mixture d/dmu", rel_err(d_mu, num_mu), 1e-6))
    out.append(Check("kl", "scale mixture d/dlog_alpha", rel_err(d_la, num_la), 1e-6))
    return out


def tiny_model(seed=0, variational=True):
    cfg = ModelConfig(input_len=120, parzen_count=4, parzen_taps=41, conv_channels=(3, 3),
                      mlp_hidden=(8, 8, 8), class_count=3, variational=variational, dtype="float64",
                      fc_init_scale=1.0)
    model = build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    model.params["parzen.eta"].mu = np.array([400.0, 1300.0, 3100.0, 6000.0])
    model.params["parzen.gamma"].mu = np.array([2.0e4, 8.0e4, 3.0e5, 1.0e6])
    for name, p in model.params.items():
        if name.endswith(".b") or name.startswith("norm"):
            p.mu = p.mu + 0.1 * rng.standard_normal(p.mu.shape)
        if name not in model.prior.frozen_alpha:
            p.log_alpha = rng.uniform(-6.0, -4.0, size=p.mu.shape)
    return model


def model_checks(seed=0):
    """End-to-end check of the sampled-mode backward over every parameter of a tiny model."""
    model = tiny_model(seed)
    rng = np.random.default_rng(seed + 2)
    frames = rng.uniform(-1, 1, size=(3, model.cfg.input_len))
    labels = np.array([0, 1, 2])

    def loss():
        logits = model.forward(frames, "sampled", seed)
        return float(nc.softmax_xent_forward(logits, labels, 1e-8)[0].sum())

    logits = model.forward(frames, "sampled", seed)
    _, _, cache = nc.softmax_xent_forward(logits, labels, 1e-8)
    grads = model.backward(nc.softmax_xent_backward(np.ones(3), cache))
    out = []
    worst_mu = worst_la = 0.0
    for name, p in model.params.items():
        h_mu = 1e-6 * np.maximum(np.abs(p.mu), 1e-2)
        worst_mu = max(worst_mu, rel_err(grads[name][0], numeric_grad(loss, p.mu, h_mu)))
        if name not in model.prior.frozen_alpha:
            worst_la = max(worst_la, rel_err(grads[name][1], numeric_grad(loss, p.log_alpha, 1e-5)))
    out.append(Check("model", "end-to-end d/dmu (sampled)", worst_mu, 1e-4))
    out.append(Check("model", "end-to-end d/dlog_alpha (sampled)", worst_la, 1e-4))
    return out


SUITES = {"layers": layer_checks, "filters": filter_checks, "kl": kl_checks, "model": model_checks}


def run(scope="all", seed=0):
    scopes = list(SUITES) if scope == "all" else [scope]
    checks = []
    for s in scopes:
        checks.extend(SUITES[s](seed))
    return checks
