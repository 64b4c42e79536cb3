"""Brute-force reference computations used to check the analytic code.

Nothing here is used by the fitting code itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data_io import build_G
from .model_core import (
    ModelSpec,
    Params,
    StructuralError,
    build_X,
    class_weights,
    covariate_rows,
    mixture_matrix,
)


@dataclass(frozen=True)
class FDConfig:
    h: float = 1e-5
    scheme: str = "central"
    richardson: bool = True

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.scheme != "central":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


def _eval(f, x, coord):
    val = float(f(x))
    if not np.isfinite(val):
        raise FloatingPointError(f"non-finite function value perturbing coordinate {coord}")
    return val


def _central_gradient(f, psi, h):
    g = np.empty(psi.size)
    for i in range(psi.size):
        e = np.zeros(psi.size)
        e[i] = h
        g[i] = (_eval(f, psi + e, i) - _eval(f, psi - e, i)) / (2 * h)
    return g


def fd_gradient(f: Callable[[np.ndarray], float], psi, cfg: FDConfig = FDConfig()) -> np.ndarray:
    """Central-difference gradient, optionally Richardson extrapolated (h and h/2)."""
    psi = np.asarray(psi, dtype=float)
    g = _central_gradient(f, psi, cfg.h)
    if cfg.richardson:
        g2 = _central_gradient(f, psi, cfg.h / 2)
        g = (4 * g2 - g) / 3
    return g


def _central_hessian(f, psi, h):
    n = psi.size
    H = np.empty((n, n))
    f0 = _eval(f, psi, "all")
    E = np.eye(n) * h
    for i in range(n):
        fp = _eval(f, psi + E[i], i)
        fm = _eval(f, psi - E[i], i)
        H[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            pp = _eval(f, psi + E[i] + E[j], (i, j))
            pm = _eval(f, psi + E[i] - E[j], (i, j))
            mp = _eval(f, psi - E[i] + E[j], (i, j))
            mm = _eval(f, psi - E[i] - E[j], (i, j))
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * h**2)
    return H


def fd_hessian(f: Callable[[np.ndarray], float], psi, cfg: FDConfig = FDConfig(h=1e-4)) -> np.ndarray:
    """Central second differences, symmetrized."""
    psi = np.asarray(psi, dtype=float)
    H = _central_hessian(f, psi, cfg.h)
    if cfg.richardson:
        H = (4 * _central_hessian(f, psi, cfg.h / 2) - H) / 3
    return 0.5 * (H + H.T)


def pattern_distribution(spec: ModelSpec, params: Params, x) -> np.ndarray:
    """Marginal pattern probabilities for one covariate vector, computed term by term."""
    G = build_G(spec)
    pi = class_weights(build_X(x, spec), params.beta)
    r = spec.r
    p = np.zeros(r)
    for j in range(spec.classes):
        eta = G @ params.theta[j]
        q = np.exp(eta - eta.max())
        p += pi[j] * q / q.sum()
    return p


def enumerate_expectation(spec: ModelSpec, params: Params, config,
                          statistic: Callable[[int], object], cap: int = 10**6):
    """``sum_u p_u * statistic(u)`` over every response pattern for one configuration."""
    if spec.r > cap:
        raise StructuralError(f"{spec.r} patterns exceed the enumeration cap {cap}")
    p = pattern_distribution(spec, params, config)
    total = None
    for u in range(spec.r):
        term = p[u] * np.asarray(statistic(u), dtype=float)
        total = term if total is None else total + term
    return total


def naive_loglik(spec: ModelSpec, params: Params, covariates, patterns) -> float:
    """Log-likelihood by explicit per-subject loops."""
    total = 0.0
    for x, u in zip(covariate_rows(covariates, spec.v), patterns):
        total += np.log(pattern_distribution(spec, params, x)[int(u)])
    return float(total)


def multinomial_info(spec: ModelSpec, theta, n: float) -> np.ndarray:
    """Closed-form information of a single-class log-linear multinomial model."""
    G = build_G(spec)
    q = mixture_matrix(G, np.atleast_2d(theta))[:, 0]
    return n * G.T @ (np.diag(q) - np.outer(q, q)) @ G
