"""Physicist's Gauss-Hermite quadrature.

Nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix of the
Hermite recurrence, solved with a local implicit-shift QL iteration and
polished by Newton steps. Weights come from the classical formula
``w_i = 2**(s-1) s! sqrt(pi) / (s**2 H_{s-1}(u_i)**2)`` rewritten with
orthonormal Hermite functions, which is ``1 / (s * h_{s-1}(u_i)**2)`` and
does not overflow for large orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

MAX_ORDER = 128
SQRT_PI = math.sqrt(math.pi)


class InvalidOrderError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)


def tridiagonal_eigenvalues(diag, offdiag, max_iter=60):
    """Eigenvalues of a symmetric tridiagonal matrix by implicit-shift QL.

    ``offdiag[i]`` couples rows ``i`` and ``i+1``. Returns ascending values.
    """
    d = np.array(diag, dtype=float)
    n = d.size
    e = np.zeros(n)
    e[: n - 1] = offdiag
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= np.finfo(float).eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise RuntimeError("QL iteration did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            else:
                d[l] -= p
                e[l] = g
                e[m] = 0.0
    return np.sort(d)


def hermite_functions(s, u):
    """Orthonormal Hermite functions h_{s-1}(u), h_s(u) (without the Gaussian factor).

    ``h_k = H_k / sqrt(2**k k! sqrt(pi))`` so that ``sum_k`` weights stay finite.
    """
    u = np.asarray(u, dtype=float)
    prev = np.zeros_like(u)
    cur = np.full_like(u, SQRT_PI ** -0.5)
    for k in range(s):
        nxt = u * math.sqrt(2.0 / (k + 1)) * cur - math.sqrt(k / (k + 1)) * prev
        prev, cur = cur, nxt
    return prev, cur


@lru_cache(maxsize=None)
def hermite_rule(s: int) -> QuadratureRule:
    """Gauss-Hermite rule of order ``s`` for the weight ``exp(-u**2)``."""
    if not isinstance(s, (int, np.integer)) or isinstance(s, bool) or s < 1 or s > MAX_ORDER:
        raise InvalidOrderError(f"quadrature order must be in 1..{MAX_ORDER}, got {s!r}")
    s = int(s)
    off = np.sqrt(np.arange(1, s) / 2.0)
    u = tridiagonal_eigenvalues(np.zeros(s), off)
    for _ in range(3):
        h_prev, h_s = hermite_functions(s, u)
        u = u - h_s / (math.sqrt(2.0 * s) * h_prev)
    h_prev, _ = hermite_functions(s, u)
    w = 1.0 / (s * h_prev**2)
    # symmetrize so the rule is exactly even
    u = 0.5 * (u - u[::-1])
    w = 0.5 * (w + w[::-1])
    if s % 2:
        u[s // 2] = 0.0
    return QuadratureRule(order=s, nodes=u, weights=w)


def integrate(rule: QuadratureRule, h: Callable) -> float:
    """Approximate the integral of ``h(u) exp(-u**2)`` over the real line."""
    vals = np.asarray(h(rule.nodes), dtype=float)
    return float(np.dot(rule.weights, vals))


def gaussian_expectation(rule: QuadratureRule, mean: float, std: float, f: Callable) -> float:
    """E[f(X)] for X ~ N(mean, std**2) via the change of variables x = sqrt(2) std u + mean."""
    if std < 0:
        raise ValueError("std must be non-negative")
    x = math.sqrt(2.0) * std * rule.nodes + mean
    return float(np.dot(rule.weights, np.asarray(f(x), dtype=float)) / SQRT_PI)
