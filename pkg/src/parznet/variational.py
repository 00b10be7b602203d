"""Dropout-posterior parameters, priors and KL divergence approximations.

Every learnable scalar is a Gaussian ``N(mu, alpha * mu**2)`` stored as the
pair ``(mu, log_alpha)``. KL terms against the log-scale-uniform and the
scale-mixture prior are evaluated with Gauss-Hermite quadrature; Monte-Carlo
estimators of the same quantities serve as independent oracles.

All functions broadcast over numpy arrays.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .quadrature import QuadratureRule, SQRT_PI

log = logging.getLogger(__name__)

ALPHA_MIN = 1e-4
ALPHA_MAX = 16.0
LOG_ALPHA_MIN = math.log(ALPHA_MIN)
LOG_ALPHA_MAX = math.log(ALPHA_MAX)
MU_FLOOR = 1e-8
V_FLOOR = 1e-300
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class PriorConfigError(ValueError):
    pass


@dataclass
class VariationalParam:
    mu: np.ndarray
    log_alpha: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_alpha = np.broadcast_to(np.asarray(self.log_alpha, dtype=float), self.mu.shape).copy()

    @property
    def alpha(self):
        return np.exp(self.log_alpha)

    @property
    def std(self):
        return np.sqrt(self.alpha) * np.abs(effective_mean(self.mu))

    def clip(self):
        self.log_alpha = clip_log_alpha(self.log_alpha)
        return self


def clip_log_alpha(log_alpha):
    return np.clip(log_alpha, LOG_ALPHA_MIN, LOG_ALPHA_MAX)


def effective_mean(mu, floor=MU_FLOOR):
    """sign(mu) * max(|mu|, floor), with sign(0) taken as +1."""
    mu = np.asarray(mu, dtype=float)
    sign = np.where(mu < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(mu), floor)


def sample_param(mu, log_alpha, eps):
    """Reparameterized draw mu + eps * sqrt(alpha) * |mu_eff|."""
    return mu + eps * np.exp(0.5 * log_alpha) * np.abs(effective_mean(mu))


def sample_param_grads(mu, log_alpha, eps, grad):
    """Chain ``grad = dL/dDelta`` back to (mu, log_alpha) through sample_param."""
    mu = np.asarray(mu, dtype=float)
    sq = np.exp(0.5 * log_alpha)
    sign = np.where(mu < 0, -1.0, 1.0)
    dabs = np.where(np.abs(mu) >= MU_FLOOR, sign, 0.0)
    d_mu = grad * (1.0 + eps * sq * dabs)
    d_log_alpha = grad * eps * sq * np.abs(effective_mean(mu)) * 0.5
    return d_mu, d_log_alpha


# -- log-scale uniform prior -------------------------------------------------

def _lsu_v(log_alpha, rule):
    la = np.asarray(log_alpha, dtype=float)[..., None]
    root = np.sqrt(2.0 * np.exp(la))
    return root, root * rule.nodes + 1.0


def kl_lsu_gh(log_alpha, rule: QuadratureRule):
    """KL(q || log-scale uniform) up to its additive constant (fixed to 0).

    ``-log(alpha)/2 + sum_i w_i log|sqrt(2 alpha) u_i + 1| / sqrt(pi)``; mu-free.
    """
    _, v = _lsu_v(log_alpha, rule)
    logs = np.log(np.maximum(np.abs(v), V_FLOOR))
    return -0.5 * np.asarray(log_alpha, dtype=float) + logs @ rule.weights / SQRT_PI


def kl_lsu_gh_grad(log_alpha, rule: QuadratureRule):
    """d kl_lsu_gh / d log_alpha."""
    root, v = _lsu_v(log_alpha, rule)
    v = np.where(np.abs(v) < V_FLOOR, V_FLOOR, v)
    terms = 0.5 * root * rule.nodes / v
    return -0.5 + terms @ rule.weights / SQRT_PI


def kl_lsu_mc(log_alpha: float, n_samples: int, seed: int):
    """Monte-Carlo estimate of E_{N(1, alpha)}[log|e|] - log(alpha)/2 and its standard error."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    rng = np.random.default_rng(seed)
    e = 1.0 + math.exp(0.5 * log_alpha) * rng.standard_normal(n_samples)
    vals = np.log(np.maximum(np.abs(e), V_FLOOR))
    return float(vals.mean() - 0.5 * log_alpha), float(vals.std(ddof=1) / math.sqrt(n_samples))


# -- scale mixture prior -----------------------------------------------------

@dataclass(frozen=True)
class ScaleMixturePrior:
    lam: float = 0.25
    xi: float = 0.0
    eta1: float = 0.0005
    eta2: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("mixture scale must lie in [0, 1]")
        if not (0 < self.eta1 < self.eta2):
            raise ValueError("require 0 < eta1 < eta2")

    def with_mean(self, xi):
        """Same prior recentred at ``xi``, which may be an array (one mean per parameter)."""
        return dataclasses.replace(self, xi=xi)


def _component_logs(prior, x):
    xi = np.asarray(prior.xi, dtype=float)
    d = np.asarray(x, dtype=float) - (xi[..., None] if xi.ndim and np.ndim(x) > xi.ndim else xi)
    with np.errstate(divide="ignore"):
        l1 = math.log(prior.lam) if prior.lam > 0 else -np.inf
        l2 = math.log1p(-prior.lam) if prior.lam < 1 else -np.inf
    a = l1 - 0.5 * (d / prior.eta1) ** 2 - LOG_SQRT_2PI - math.log(prior.eta1)
    b = l2 - 0.5 * (d / prior.eta2) ** 2 - LOG_SQRT_2PI - math.log(prior.eta2)
    return d, a, b


def sm_log_density(prior, x):
    """log(lam N(x|xi, eta1^2) + (1 - lam) N(x|xi, eta2^2)) via log-sum-exp."""
    _, a, b = _component_logs(prior, x)
    return np.logaddexp(a, b)


def sm_log_density_dx(prior, x):
    d, a, b = _component_logs(prior, x)
    top = np.logaddexp(a, b)
    r1 = np.exp(a - top)
    r2 = np.exp(b - top)
    return -d * (r1 / prior.eta1**2 + r2 / prior.eta2**2)


def _sm_nodes(mu, log_alpha, rule):
    mu_eff = effective_mean(mu)[..., None]
    root = np.sqrt(2.0 * np.exp(np.asarray(log_alpha, dtype=float)))[..., None]
    return mu_eff, root, (root * rule.nodes + 1.0) * mu_eff


def _entropy(mu_eff, log_alpha):
    # H(q) = log sqrt(2 pi alpha mu^2) + 1/2
    return LOG_SQRT_2PI + 0.5 * log_alpha + np.log(np.abs(mu_eff)) + 0.5


def kl_sm_gh(mu, log_alpha, prior, rule: QuadratureRule, return_clamped=False):
    """Full KL(q || scale mixture) with the cross term by Gauss-Hermite quadrature."""
    mu = np.asarray(mu, dtype=float)
    log_alpha = np.asarray(log_alpha, dtype=float)
    mu_eff, _, v = _sm_nodes(mu, log_alpha, rule)
    cross = sm_log_density(prior, v) @ rule.weights / SQRT_PI
    kl = -(_entropy(mu_eff[..., 0], log_alpha) - 0.5) - cross - 0.5
    clamped = np.abs(mu) < MU_FLOOR
    if np.any(clamped):
        log.debug("kl_sm_gh: %d mean(s) below floor %g were clamped", int(np.sum(clamped)), MU_FLOOR)
    return (kl, clamped) if return_clamped else kl


def kl_sm_gh_grad(mu, log_alpha, prior, rule: QuadratureRule):
    """(d/d mu, d/d log_alpha) of kl_sm_gh."""
    mu = np.asarray(mu, dtype=float)
    log_alpha = np.asarray(log_alpha, dtype=float)
    mu_eff, root, v = _sm_nodes(mu, log_alpha, rule)
    g = sm_log_density_dx(prior, v)
    dv_dmu = root * rule.nodes + 1.0
    dv_dla = 0.5 * root * rule.nodes * mu_eff
    d_mu = -1.0 / mu_eff[..., 0] - (g * dv_dmu) @ rule.weights / SQRT_PI
    d_mu = np.where(np.abs(mu) >= MU_FLOOR, d_mu, 0.0)
    d_la = -0.5 - (g * dv_dla) @ rule.weights / SQRT_PI
    return d_mu, d_la


def kl_sm_mc(mu: float, log_alpha: float, prior, n_samples: int, seed: int):
    """Monte-Carlo estimate of -H(q) - E_q[log p_sm] and its standard error."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    rng = np.random.default_rng(seed)
    mu_eff = float(effective_mean(mu))
    x = mu_eff + math.exp(0.5 * log_alpha) * abs(mu_eff) * rng.standard_normal(n_samples)
    vals = sm_log_density(prior, x)
    h = float(_entropy(mu_eff, log_alpha))
    return float(-h - vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


# -- whole-model KL ------------------------------------------------------------

class PriorKind(enum.Enum):
    LOG_SCALE_UNIFORM = "lsu"
    SCALE_MIXTURE = "sm"


@dataclass
class PriorConfig:
    """Prior family plus a prior mean for every variational parameter group.

    ``means`` maps group name to a scalar or array; log-scale-uniform KL
    ignores it. ``frozen_alpha`` lists groups whose log-alpha is not trained.
    """

    kind: PriorKind = PriorKind.LOG_SCALE_UNIFORM
    mixture: ScaleMixturePrior = field(default_factory=ScaleMixturePrior)
    means: dict = field(default_factory=dict)
    frozen_alpha: set = field(default_factory=set)

    def check(self, names):
        missing = [n for n in names if n not in self.means]
        if missing:
            raise PriorConfigError(f"no prior entry for parameter group(s): {', '.join(missing)}")

    def group_prior(self, name):
        return self.mixture.with_mean(self.means[name])


def group_kl(vp: VariationalParam, name, prior_cfg: PriorConfig, rule):
    if prior_cfg.kind is PriorKind.LOG_SCALE_UNIFORM:
        return kl_lsu_gh(vp.log_alpha, rule)
    xi = np.broadcast_to(np.asarray(prior_cfg.means[name], dtype=float), vp.mu.shape)
    return kl_sm_gh(vp.mu, vp.log_alpha, prior_cfg.mixture.with_mean(xi), rule)


def group_kl_grads(vp: VariationalParam, name, prior_cfg: PriorConfig, rule):
    if prior_cfg.kind is PriorKind.LOG_SCALE_UNIFORM:
        return np.zeros_like(vp.mu), kl_lsu_gh_grad(vp.log_alpha, rule)
    xi = np.broadcast_to(np.asarray(prior_cfg.means[name], dtype=float), vp.mu.shape)
    return kl_sm_gh_grad(vp.mu, vp.log_alpha, prior_cfg.mixture.with_mean(xi), rule)


def total_kl(params: Mapping[str, VariationalParam], prior_cfg: PriorConfig, rule) -> float:
    """Sum of per-scalar KL terms over every group, in sorted group order."""
    prior_cfg.check(params)
    total = 0.0
    for name in sorted(params):
        total += float(np.sum(group_kl(params[name], name, prior_cfg, rule)))
    return total
