"""Stochastic variational inference loop.

Per minibatch the objective is ``(n/m) * sum_batch jittered_xent + rho_t * pi_i * KL``
where ``rho_t`` is the epoch warm-up weight and ``pi_i`` the batch importance
weight. Optimizer steps use the gradient of that objective divided by ``n``
(a per-example ELBO) so learning rates do not depend on dataset size.
Feature-extraction groups (Parzen, normalization, convolution) use RMSProp,
fully connected groups plain gradient descent.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc
from .data import FrameDataset, batches
from .model import ModelGraph, is_feature_group, save_checkpoint
from .quadrature import hermite_rule
from .variational import group_kl, group_kl_grads

log = logging.getLogger(__name__)

FLOAT32_EPS = float(np.finfo(np.float32).eps)  # 1.1920929e-07


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_feature: float = 0.0008
    lr_fc: float = 0.08
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    warmup_c: float = 0.2
    kappa: float = 1e-8
    max_epochs: int = 25
    patience: int = 3
    plateau_threshold: float = 0.001
    quad_order: int = 32
    importance_weighting: bool = True
    static_filters: bool = False
    objective_scale: str = "example"
    filter_units: str = "normalized"
    seed: int = 0

    def validate(self):
        if self.lr_feature < 0 or self.lr_fc < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.warmup_c <= 1:
            raise ValueError("warmup_c must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.objective_scale not in ("example", "dataset"):
            raise ValueError("objective_scale must be 'example' or 'dataset'")
        if self.filter_units not in ("normalized", "hz"):
            raise ValueError("filter_units must be 'normalized' or 'hz'")


def kl_weight(t: int, c: float) -> float:
    """Warm-up weight rho_t = min(1, t * c), the closed form of rho_{t+1} = min(1, rho_t + c), rho_0 = 0."""
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    return min(1.0, t * c)


def batch_kl_weights(m: int, floor: float = FLOAT32_EPS):
    """Geometric importance weights pi_i = beta**(M-i) (beta-1)/(beta**M - 1), i = 1..M.

    ``beta`` is found by bisection so that the smallest weight pi_M equals ``floor``.
    """
    if m < 1:
        raise ValueError("need at least one batch")
    if m == 1:
        return np.ones(1)

    def last(beta):
        # pi_M = (beta - 1) / (beta**M - 1), evaluated in log space
        return math.exp(math.log(beta - 1.0) - (m * math.log(beta) + math.log1p(-beta ** -m)))

    lo, hi = 1.0 + 1e-12, 2.0
    while last(hi) > floor:
        hi *= 2.0
    if last(lo) < floor:
        raise ValueError("cannot reach the requested minimal weight")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if last(mid) > floor:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    i = np.arange(1, m + 1)
    logw = (m - i) * math.log(beta) + math.log(beta - 1.0) - (m * math.log(beta) + math.log1p(-beta ** -m))
    w = np.exp(logw)
    return w / w.sum()


def sgd_step(param, grad, lr):
    return param - lr * grad


def adaptive_rms_step(param, grad, state, lr, decay=0.9, eps=1e-8):
    """RMSProp: s <- decay s + (1 - decay) g^2; param <- param - lr g / (sqrt(s) + eps)."""
    state = decay * state + (1.0 - decay) * grad * grad
    return param - lr * grad / (np.sqrt(state) + eps), state


@dataclass
class StepContext:
    n_total: int
    rho: float
    pi: float
    lr_feature: float
    lr_fc: float
    seed: int
    rule: object
    sampled: bool = True


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    val_err: float
    kl: float
    rho: float
    lr_feature: float
    lr_fc: float
    wall: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    initial_val_err: float = float("nan")
    best_val_err: float = float("nan")
    checkpoint: str | None = None
    stop_reason: str = ""
    step_kl: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_err", "val_err", "kl", "rho", "lr_feature", "lr_fc", "wall_s"])
            for r in self.epochs:
                w.writerow([r.epoch, fmt(r.train_loss), fmt(r.train_err), fmt(r.val_err), fmt(r.kl), fmt(r.rho),
                            fmt(r.lr_feature), fmt(r.lr_fc), fmt(r.wall)])


    def write_steps(self, path):
        """Per-step KL values (one row per optimizer step)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "kl"])
            for i, k in enumerate(self.step_kl):
                w.writerow([i, fmt(k)])


def fmt(x):
    return format(float(x), ".17g")


class Trainer:
    def __init__(self, model: ModelGraph, cfg: TrainConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.rule = hermite_rule(cfg.quad_order)
        self.state = {}
        # optimizer coordinates: centre frequencies as cycles per sample, so one
        # RMSProp step of size lr moves eta by about lr * sample_rate Hz
        self.opt_scale = {}
        if cfg.filter_units == "normalized":
            self.opt_scale["parzen.eta"] = float(model.cfg.sample_rate)
        if cfg.static_filters:
            model.frozen |= {"parzen.eta", "parzen.gamma"}

    # -- KL ----------------------------------------------------------------------
    def kl_groups(self):
        return [n for n in sorted(self.model.params) if n not in self.model.frozen]

    def kl_value(self):
        if not self.model.variational:
            return 0.0
        m = self.model
        return float(sum(np.sum(group_kl(m.params[n], n, m.prior, self.rule)) for n in self.kl_groups()))

    def kl_and_grads(self):
        m = self.model
        total, grads = 0.0, {}
        for n in self.kl_groups():
            total += float(np.sum(group_kl(m.params[n], n, m.prior, self.rule)))
            grads[n] = group_kl_grads(m.params[n], n, m.prior, self.rule)
        return total, grads

    # -- one step ----------------------------------------------------------------
    def train_step(self, labels, frames, ctx: StepContext):
        model, cfg = self.model, self.cfg
        m = len(labels)
        mode = "sampled" if (model.variational and ctx.sampled) else "mean"
        logits = model.forward(frames, mode, ctx.seed)
        losses, probs, cache = nc.softmax_xent_forward(logits, labels, cfg.kappa)
        if not np.all(np.isfinite(losses)):
            raise NumericalError("non-finite loss; the jitter bound makes this a numerical bug")
        # gradient of (n/m) sum(loss), optionally divided by n
        div = ctx.n_total if cfg.objective_scale == "example" else 1.0
        dlogits = nc.softmax_xent_backward(np.full(m, ctx.n_total / m / div), cache)
        grads = model.backward(dlogits)
        kl = 0.0
        if model.variational:
            kl, kgrads = self.kl_and_grads()
            if not math.isfinite(kl):
                raise NumericalError("non-finite KL term")
            scale = ctx.rho * ctx.pi / div
            if scale:
                for n, (dmu, dla) in kgrads.items():
                    gmu, gla = grads[n]
                    grads[n] = (gmu + scale * dmu, gla + scale * dla)
        self.apply(grads, ctx)
        objective = ctx.n_total / m * float(losses.sum()) + ctx.rho * ctx.pi * kl
        return {"loss": float(losses.mean()), "objective": objective, "kl": kl,
                "errors": int(np.sum(probs.argmax(axis=1) != labels))}

    def apply(self, grads, ctx):
        model, cfg = self.model, self.cfg
        for name in sorted(grads):
            if name in model.frozen:
                continue
            p = model.params[name]
            dmu, dla = grads[name]
            targets = [("mu", dmu)]
            if model.variational and name not in model.prior.frozen_alpha:
                targets.append(("log_alpha", dla))
            for attr, g in targets:
                value = getattr(p, attr)
                if is_feature_group(name):
                    key = (name, attr)
                    st = self.state.get(key)
                    if st is None:
                        st = np.zeros_like(value)
                    scale = self.opt_scale.get(name, 1.0) if attr == "mu" else 1.0
                    value, st = adaptive_rms_step(value / scale, g * scale, st, ctx.lr_feature,
                                                  cfg.rms_decay, cfg.rms_eps)
                    value = value * scale
                    self.state[key] = st
                else:
                    value = sgd_step(value, g, ctx.lr_fc)
                setattr(p, attr, value)
        model.clip()

    # -- evaluation ---------------------------------------------------------------
    def error_rate(self, ds: FrameDataset, batch_size=256):
        if len(ds) == 0:
            return float("nan")
        pred = self.model.predict(ds.frames, batch_size).argmax(axis=1)
        return float(np.mean(pred != ds.labels))

    def _snapshot(self):
        return self.model.snapshot(), {k: v.copy() for k, v in self.state.items()}

    def _restore(self, snap):
        self.model.restore(snap[0])
        self.state = {k: v.copy() for k, v in snap[1].items()}

    # -- full fit -------------------------------------------------------------------
    def fit(self, train: FrameDataset, val: FrameDataset, out_dir=None, on_epoch=None) -> TrainReport:
        cfg, model = self.cfg, self.model
        if len(train) == 0 or len(val) == 0:
            raise ValueError("train and validation splits must be non-empty")
        for ds in (train, val):
            if ds.frame_len != model.cfg.input_len or ds.class_count != model.cfg.class_count:
                raise ValueError("dataset frame length / class count do not match the model")
        n = len(train)
        n_batches = math.ceil(n / cfg.batch_size)
        pis = batch_kl_weights(n_batches) if cfg.importance_weighting else np.full(n_batches, 1.0 / n_batches)
        lr_f, lr_c = cfg.lr_feature, cfg.lr_fc
        report = TrainReport()
        prev_err = best_err = self.error_rate(val)
        report.initial_val_err = prev_err
        prev_snap = self._snapshot()
        best_snap = prev_snap
        stale = 0
        seeds = np.random.SeedSequence(cfg.seed)
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            rho = kl_weight(epoch, cfg.warmup_c)
            ep_seeds = seeds.spawn(1)[0].generate_state(n_batches + 1)
            loss_sum = err_sum = 0.0
            kl = 0.0
            for i, (labels, frames) in enumerate(batches(train, cfg.batch_size, int(ep_seeds[0]))):
                ctx = StepContext(n, rho, float(pis[i]), lr_f, lr_c, int(ep_seeds[i + 1]), self.rule)
                res = self.train_step(labels, frames, ctx)
                loss_sum += res["loss"] * len(labels)
                err_sum += res["errors"]
                kl = res["kl"]
                report.step_kl.append(kl)
            val_err = self.error_rate(val)
            rec = EpochRecord(epoch, loss_sum / n, err_sum / n, val_err, kl, rho, lr_f, lr_c,
                              time.perf_counter() - t0)
            report.epochs.append(rec)
            log.info("epoch %d loss %.4f train_err %.4f val_err %.4f kl %.4g rho %.2f lr %.3g/%.3g",
                     epoch, rec.train_loss, rec.train_err, val_err, kl, rho, lr_f, lr_c)
            # degradation first: roll back to the previous epoch and halve the rates
            if val_err > prev_err:
                self._restore(prev_snap)
                lr_f, lr_c = lr_f / 2, lr_c / 2
            else:
                rel = (prev_err - val_err) / prev_err if prev_err > 0 else 0.0
                if rel < cfg.plateau_threshold:
                    lr_f, lr_c = lr_f / 2, lr_c / 2
                prev_err = val_err
                prev_snap = self._snapshot()
            if val_err < best_err:
                best_err, best_snap, stale = val_err, prev_snap, 0
            else:
                stale += 1
            if on_epoch is not None:
                on_epoch(rec)
            if stale >= cfg.patience:
                report.stop_reason = f"no improvement for {cfg.patience} epochs"
                break
        else:
            report.stop_reason = "max epochs"
        self._restore(best_snap)
        report.best_val_err = best_err
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            ckpt = out_dir / "model.pznm"
            save_checkpoint(model, ckpt, {"train_config": dataclasses.asdict(cfg)})
            report.checkpoint = str(ckpt)
            report.write_csv(out_dir / "report.csv")
            report.write_steps(out_dir / "steps.csv")
        return report
