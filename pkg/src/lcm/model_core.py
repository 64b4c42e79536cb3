"""Probability machinery for latent class models with concomitant covariates.

Class weights are a multinomial logit of the covariates (class 0 is the
reference), and each class carries a log-linear model for the joint
distribution of the categorical responses::

    pi_i = softmax(X_i beta)          (length c)
    q_j  = softmax(G theta_j)         (length r)
    p_i  = Q pi_i                     (Q has columns q_j)

Response patterns are indexed lexicographically with the last response
varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Sequence

import numpy as np


class StructuralError(ValueError):
    """Shapes or model structure do not conform."""


class NumericError(ArithmeticError):
    """A probability needed by the likelihood underflowed to zero."""


@dataclass(frozen=True)
class ModelSpec:
    """Structural description of a latent class model.

    Parameters
    ----------
    classes : int
        Number of latent classes ``c``.
    responses : sequence of (name, n_categories)
        Ordered response variables.
    covariates : sequence of str
        Covariate names entering the class-weight regression.
    pair_scores : sequence of (int, int)
        Pairs of response indices receiving a score-coded association term.
    """

    classes: int
    responses: tuple[tuple[str, int], ...]
    covariates: tuple[str, ...] = ()
    pair_scores: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "responses",
                           tuple((str(n), int(m)) for n, m in self.responses))
        object.__setattr__(self, "covariates", tuple(str(x) for x in self.covariates))
        object.__setattr__(self, "pair_scores",
                           tuple((int(a), int(b)) for a, b in self.pair_scores))
        if int(self.classes) < 1:
            raise StructuralError(f"classes must be >= 1, got {self.classes}")
        object.__setattr__(self, "classes", int(self.classes))
        if not self.responses:
            raise StructuralError("at least one response variable is required")
        names = [n for n, _ in self.responses]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate response names: {names}")
        if len(set(self.covariates)) != len(self.covariates):
            raise StructuralError(f"duplicate covariate names: {list(self.covariates)}")
        for name, m in self.responses:
            if m < 2:
                raise StructuralError(f"response {name!r} needs >= 2 categories, got {m}")
        nresp = len(self.responses)
        for a, b in self.pair_scores:
            if not (0 <= a < nresp and 0 <= b < nresp) or a == b:
                raise StructuralError(f"invalid response pair ({a}, {b})")
            if self.responses[a][1] != self.responses[b][1]:
                raise StructuralError(
                    f"pair ({self.responses[a][0]}, {self.responses[b][0]}) "
                    "has unequal category counts")
        if len(set(frozenset(p) for p in self.pair_scores)) != len(self.pair_scores):
            raise StructuralError("duplicate response pair in pair_scores")

    @property
    def categories(self) -> tuple[int, ...]:
        return tuple(m for _, m in self.responses)

    @property
    def response_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.responses)

    @property
    def r(self) -> int:
        return prod(self.categories)

    @property
    def g(self) -> int:
        return sum(m - 1 for m in self.categories) + len(self.pair_scores)

    @property
    def v(self) -> int:
        return len(self.covariates)

    @property
    def k(self) -> int:
        return (self.classes - 1) * (self.v + 1)

    @property
    def n_params(self) -> int:
        return self.k + self.classes * self.g

    def with_classes(self, classes: int) -> "ModelSpec":
        return ModelSpec(classes, self.responses, self.covariates, self.pair_scores)


@dataclass
class Params:
    """Parameter vector: weight-regression ``beta`` and per-class ``theta`` rows."""

    beta: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros((1, 0)))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Params":
        return cls(np.zeros(spec.k), np.zeros((spec.classes, spec.g)))

    @classmethod
    def from_vector(cls, spec: ModelSpec, psi) -> "Params":
        psi = np.asarray(psi, dtype=float).reshape(-1)
        if psi.size != spec.n_params:
            raise StructuralError(
                f"parameter vector has length {psi.size}, expected {spec.n_params}")
        return cls(psi[:spec.k].copy(), psi[spec.k:].reshape(spec.classes, spec.g).copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.theta.reshape(-1)])

    def check(self, spec: ModelSpec) -> "Params":
        if self.beta.shape != (spec.k,):
            raise StructuralError(f"beta has shape {self.beta.shape}, expected ({spec.k},)")
        if self.theta.shape != (spec.classes, spec.g):
            raise StructuralError(
                f"theta has shape {self.theta.shape}, expected ({spec.classes}, {spec.g})")
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.theta))):
            raise StructuralError("parameters must be finite")
        return self

    def beta_matrix(self, spec: ModelSpec) -> np.ndarray:
        """Contrast coefficients as a ``(c-1, v+1)`` array (intercept first)."""
        return self.beta.reshape(spec.classes - 1, spec.v + 1)


def softmax(eta: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalized exponential with max subtraction."""
    eta = np.asarray(eta, dtype=float)
    z = np.exp(eta - eta.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def class_weights(X: np.ndarray, beta) -> np.ndarray:
    """Prior class probabilities ``softmax(X beta)`` for one subject."""
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[1] != beta.size:
        raise StructuralError(f"design of shape {X.shape} does not conform with beta of "
                              f"length {beta.size}")
    return softmax(X @ beta)


def response_probs(G: np.ndarray, theta_j) -> np.ndarray:
    """Conditional pattern probabilities ``softmax(G theta_j)``."""
    G = np.asarray(G, dtype=float)
    theta_j = np.asarray(theta_j, dtype=float).reshape(-1)
    if G.ndim != 2 or G.shape[1] != theta_j.size:
        raise StructuralError(f"G of shape {G.shape} does not conform with theta of "
                              f"length {theta_j.size}")
    return softmax(G @ theta_j)


def mixture_matrix(G: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """The ``r x c`` matrix whose column ``j`` is ``q_j``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[0] < 1:
        raise StructuralError("at least one class block is required")
    return np.column_stack([response_probs(G, th) for th in theta])


def marginal_probs(Q: np.ndarray, pi) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if Q.ndim != 2 or Q.shape[1] != pi.size:
        raise StructuralError(f"Q of shape {Q.shape} does not conform with pi of "
                              f"length {pi.size}")
    return Q @ pi


def omega(v) -> np.ndarray:
    """Multinomial covariance ``diag(v) - v v'``."""
    v = np.asarray(v, dtype=float).reshape(-1)
    return np.diag(v) - np.outer(v, v)


def build_X(x, spec: ModelSpec) -> np.ndarray:
    """Class design for one subject: row 0 zero, row ``j`` holds ``(1, x)`` in block ``j-1``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != spec.v:
        raise StructuralError(f"covariate vector has length {x.size}, expected {spec.v}")
    z = np.concatenate([[1.0], x])
    X = np.zeros((spec.classes, spec.k))
    for j in range(1, spec.classes):
        X[j, (j - 1) * z.size:j * z.size] = z
    return X


def covariate_rows(x, v: int) -> np.ndarray:
    """Covariates as an ``(n, v)`` array.

    A 2-D input must already have ``v`` columns; a 1-D input is split into rows
    of length ``v`` (a single empty row when ``v == 0``).
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        if a.shape[1] != v:
            raise StructuralError(f"covariates have {a.shape[1]} columns, expected {v}")
        return a
    a = a.reshape(-1)
    if v == 0:
        if a.size:
            raise StructuralError("model has no covariates but values were given")
        return np.zeros((1, 0))
    if a.size % v:
        raise StructuralError(f"{a.size} covariate values do not split into rows of {v}")
    return a.reshape(-1, v)


def weights_matrix(spec: ModelSpec, beta, covariates: np.ndarray) -> np.ndarray:
    """Class weights for many subjects at once, shape ``(n, c)``."""
    covariates = covariate_rows(covariates, spec.v)
    n = covariates.shape[0]
    eta = np.zeros((n, spec.classes))
    if spec.classes > 1:
        B = np.asarray(beta, dtype=float).reshape(spec.classes - 1, spec.v + 1)
        eta[:, 1:] = B[:, 0] + covariates @ B[:, 1:].T
    return softmax(eta, axis=1)


def _as_grouped(data):
    # local import; data_io depends on this module
    from .data_io import Dataset, GroupedData
    if isinstance(data, GroupedData):
        return data
    if isinstance(data, Dataset):
        return None
    raise TypeError(f"unsupported data type {type(data).__name__}")


def loglik(spec: ModelSpec, params: Params, data, G: np.ndarray | None = None) -> float:
    """Log-likelihood ``sum_i y_i' log p_i`` (frequency-weighted for grouped data)."""
    from .data_io import build_G
    params.check(spec)
    if G is None:
        G = build_G(spec)
    Q = mixture_matrix(G, params.theta)
    grouped = _as_grouped(data)
    if grouped is None:
        pi = weights_matrix(spec, params.beta, data.covariates)
        p = np.einsum("nc,nc->n", pi, Q[data.patterns])
        bad = np.flatnonzero(~(p > 0))
        if bad.size:
            raise NumericError(f"probability of observed pattern underflowed for subject {bad[0]}")
        return float(np.sum(np.log(p)))
    pi = weights_matrix(spec, params.beta, grouped.configs)
    P = pi @ Q.T
    observed = grouped.freqs > 0
    bad = np.argwhere(observed & ~(P > 0))
    if bad.size:
        raise NumericError(
            f"probability of pattern {bad[0][1]} underflowed for configuration {bad[0][0]}")
    return float(np.sum(grouped.freqs[observed] * np.log(P[observed])))


def permute_classes(spec: ModelSpec, params: Params, perm: Sequence[int]) -> Params:
    """Relabel classes so that new class ``j`` is old class ``perm[j]``.

    The weight contrasts are re-expressed relative to the new reference class,
    so the fitted distribution is unchanged.
    """
    perm = list(perm)
    if sorted(perm) != list(range(spec.classes)):
        raise StructuralError(f"{perm} is not a permutation of {spec.classes} classes")
    full = np.zeros((spec.classes, spec.v + 1))
    if spec.classes > 1:
        full[1:] = params.beta_matrix(spec)
    full = full[perm] - full[perm[0]]
    return Params(full[1:].reshape(-1), params.theta[perm].copy())


def permutation_matrix(spec: ModelSpec, perm: Sequence[int]) -> np.ndarray:
    """Linear map ``L`` with ``permute_classes(psi) == L @ psi``."""
    P = spec.n_params
    L = np.empty((P, P))
    for col in range(P):
        e = np.zeros(P)
        e[col] = 1.0
        L[:, col] = permute_classes(spec, Params.from_vector(spec, e), perm).to_vector()
    return L


def align_classes(spec: ModelSpec, params: Params, reference: Params,
                  G: np.ndarray | None = None,
                  ref_spec: ModelSpec | None = None) -> list[int]:
    """Permutation matching the classes of ``params`` to those of ``reference``.

    Chooses the labelling minimizing the summed total variation distance
    between conditional pattern distributions. Returns ``perm`` for use with
    :func:`permute_classes`.
    """
    from itertools import permutations

    from .data_io import build_G

    if G is None:
        G = build_G(spec)
    ref_spec = ref_spec or spec
    Q = mixture_matrix(G, params.theta)
    Qr = mixture_matrix(build_G(ref_spec), reference.theta)
    if Q.shape[0] != Qr.shape[0]:
        raise StructuralError("models have different pattern spaces")
    tv = 0.5 * np.abs(Qr[:, :, None] - Q[:, None, :]).sum(axis=0)   # (c_ref, c)
    c = spec.classes
    best, best_cost = None, np.inf
    for perm in permutations(range(c)):
        cost = sum(tv[j, perm[j]] for j in range(min(c, ref_spec.classes)))
        if cost < best_cost - 1e-15:
            best, best_cost = list(perm), cost
    return best
