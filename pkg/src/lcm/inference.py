"""Score vector and information matrices.

Two code paths compute the same quantities:

* the *general* path forms ``A_i = d p_i / d psi'`` explicitly for each
  covariate configuration and works with arbitrary frequency vectors;
* the *fast* path builds ``t_i = A_i' e_u(i)`` directly for one-hot data,
  giving ``s = sum t_i / p~_i`` and ``F = sum t_i t_i' / p~_i**2``.

Parameter layout is ``[beta (k), theta_0 (g), ..., theta_{c-1} (g)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import Dataset, GroupedData, build_G
from .model_core import (
    ModelSpec,
    NumericError,
    Params,
    StructuralError,
    build_X,
    covariate_rows,
    mixture_matrix,
    omega,
    weights_matrix,
)

RANK_RTOL = 1e-10
_CHUNK = 512


class SingularInformationError(np.linalg.LinAlgError):
    """Information matrix is not positive definite."""

    def __init__(self, message, diagnosis=None):
        super().__init__(message)
        self.diagnosis = diagnosis


@dataclass
class InfoMatrix:
    matrix: np.ndarray
    kind: str  # hybrid | observed | expected

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


@dataclass
class SubjectBasis:
    t: np.ndarray
    p_tilde: float


@dataclass
class RankDiagnosis:
    rank: int
    n_params: int
    singular_values: np.ndarray

    @property
    def positive_definite(self) -> bool:
        return self.rank == self.n_params

    def __str__(self):
        if self.positive_definite:
            return "positive_definite"
        return f"singular(rank={self.rank} < {self.n_params})"


def _class_designs(spec: ModelSpec, configs: np.ndarray) -> np.ndarray:
    return np.stack([build_X(x, spec) for x in configs]) if len(configs) \
        else np.zeros((0, spec.classes, spec.k))


def _check_pattern(p, where):
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        raise NumericError(f"probability of observed pattern underflowed for {where} {bad[0]}")


# -- single-subject quantities ---------------------------------------------

def subject_design(spec: ModelSpec, params: Params, X_i: np.ndarray,
                   G: np.ndarray | None = None) -> np.ndarray:
    """``A_i = [Q Omega_pi X_i, pi_0 Omega_0 G, ..., pi_{c-1} Omega_{c-1} G]``."""
    params.check(spec)
    if G is None:
        G = build_G(spec)
    X_i = np.asarray(X_i, dtype=float)
    if X_i.shape != (spec.classes, spec.k):
        raise StructuralError(f"X_i has shape {X_i.shape}, expected ({spec.classes}, {spec.k})")
    Q = mixture_matrix(G, params.theta)
    pi = _softmax_row(X_i @ params.beta)
    blocks = [Q @ omega(pi) @ X_i]
    blocks += [pi[j] * omega(Q[:, j]) @ G for j in range(spec.classes)]
    return np.hstack(blocks)


def _softmax_row(eta):
    z = np.exp(eta - eta.max())
    return z / z.sum()


def subject_basis(spec: ModelSpec, params: Params, X_i: np.ndarray, u: int,
                  G: np.ndarray | None = None) -> SubjectBasis:
    """``t_i = A_i' e_u`` assembled without forming ``A_i``."""
    params.check(spec)
    if not 0 <= u < spec.r:
        raise StructuralError(f"pattern index {u} out of range [0, {spec.r})")
    if G is None:
        G = build_G(spec)
    X_i = np.asarray(X_i, dtype=float)
    if X_i.shape != (spec.classes, spec.k):
        raise StructuralError(f"X_i has shape {X_i.shape}, expected ({spec.classes}, {spec.k})")
    Q = mixture_matrix(G, params.theta)
    pi = _softmax_row(X_i @ params.beta)
    q_u = Q[u]
    p_tilde = float(pi @ q_u)
    t_beta = X_i.T @ (pi * q_u) - (X_i.T @ pi) * p_tilde
    gbar = Q.T @ G
    t_theta = (pi * q_u)[:, None] * (G[u][None, :] - gbar)
    return SubjectBasis(np.concatenate([t_beta, t_theta.reshape(-1)]), p_tilde)


# -- vectorized paths --------------------------------------------------------

def basis_matrix(spec: ModelSpec, params: Params, data: Dataset,
                 G: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Fast path: the matrix ``T`` (rows ``t_i'``) and the vector ``p~``."""
    if G is None:
        G = build_G(spec)
    Q = mixture_matrix(G, params.theta)
    pi = weights_matrix(spec, params.beta, data.covariates)
    qt = Q[data.patterns]                       # (n, c)
    pt = np.einsum("nc,nc->n", pi, qt)
    w = pi * (qt - pt[:, None])
    n = data.n
    z = np.column_stack([np.ones(n), data.covariates])
    t_beta = (w[:, 1:, None] * z[:, None, :]).reshape(n, spec.k)
    gbar = Q.T @ G                              # (c, g)
    t_theta = (pi * qt)[:, :, None] * (G[data.patterns][:, None, :] - gbar[None])
    return np.hstack([t_beta, t_theta.reshape(n, -1)]), pt


def _design_stack(spec, params, configs, G, Q):
    """General path: ``A_i`` for every configuration, shape ``(m, r, P)``."""
    pi = weights_matrix(spec, params.beta, configs)
    m = configs.shape[0]
    Xs = _class_designs(spec, configs)
    om_pi = pi[:, :, None] * np.eye(spec.classes)[None] - pi[:, :, None] * pi[:, None, :]
    a_beta = np.einsum("rc,mcd,mdk->mrk", Q, om_pi, Xs)
    om_G = np.stack([omega(Q[:, j]) @ G for j in range(spec.classes)], axis=1)  # (r, c, g)
    a_theta = pi[:, None, :, None] * om_G[None]
    return np.concatenate([a_beta, a_theta.reshape(m, spec.r, -1)], axis=2), pi


def _grouped_view(data, r: int) -> GroupedData:
    if isinstance(data, GroupedData):
        return data
    if isinstance(data, Dataset):
        # subjects kept separate (no grouping), so terms match the fast path one for one
        freqs = np.zeros((data.n, r))
        freqs[np.arange(data.n), data.patterns] = 1.0
        return GroupedData(data.covariates, freqs)
    raise TypeError(f"unsupported data type {type(data).__name__}")


def _general_terms(spec, params, data, G, *, want_score=True, want_info=True):
    grouped = _grouped_view(data, spec.r).validate(spec)
    freqs = grouped.freqs
    Q = mixture_matrix(G, params.theta)
    P = spec.n_params
    ll = 0.0
    s = np.zeros(P)
    F = np.zeros((P, P))
    for lo in range(0, grouped.configs.shape[0], _CHUNK):
        cfg = grouped.configs[lo:lo + _CHUNK]
        Y = freqs[lo:lo + _CHUNK]
        A, pi = _design_stack(spec, params, cfg, G, Q)
        Pm = pi @ Q.T
        obs = Y > 0
        if np.any(obs & ~(Pm > 0)):
            bad = np.argwhere(obs & ~(Pm > 0))[0]
            raise NumericError(f"probability of pattern {bad[1]} underflowed for "
                               f"configuration {lo + bad[0]}")
        w1 = np.where(obs, Y / np.where(obs, Pm, 1.0), 0.0)
        ll += float(np.sum(Y[obs] * np.log(Pm[obs])))
        if want_score:
            s += np.einsum("mrp,mr->p", A, w1)
        if want_info:
            W = A * (np.sqrt(Y) / np.where(obs, Pm, 1.0))[:, :, None]
            W = W.reshape(-1, P)
            F += W.T @ W
    return ll, s, F


def evaluate(spec: ModelSpec, params: Params, data, G: np.ndarray | None = None,
             want_info: bool = True, path: str = "auto"):
    """Log-likelihood, score and hybrid information in one pass."""
    params.check(spec)
    if G is None:
        G = build_G(spec)
    if path == "auto":
        path = "fast" if isinstance(data, Dataset) else "general"
    if path == "fast":
        if not isinstance(data, Dataset):
            raise TypeError("the fast path needs individual (one-hot) data")
        T, pt = basis_matrix(spec, params, data, G)
        _check_pattern(pt, "subject")
        W = T / pt[:, None]
        ll = float(np.sum(np.log(pt)))
        s = W.sum(axis=0)
        F = W.T @ W if want_info else None
        return ll, s, F
    if path != "general":
        raise ValueError(f"unknown path {path!r}")
    ll, s, F = _general_terms(spec, params, data, G, want_info=want_info)
    return ll, s, (F if want_info else None)


def score(spec: ModelSpec, params: Params, data, G=None, path: str = "auto") -> np.ndarray:
    return evaluate(spec, params, data, G, want_info=False, path=path)[1]


def hybrid_info(spec: ModelSpec, params: Params, data, G=None, path: str = "auto") -> InfoMatrix:
    return InfoMatrix(evaluate(spec, params, data, G, path=path)[2], "hybrid")


def rank_check(spec: ModelSpec, params: Params, data, G=None) -> RankDiagnosis:
    """Numerical rank of the (weighted) stacked basis ``T``.

    Singular values below ``1e-10`` times the largest count as zero.
    """
    if G is None:
        G = build_G(spec)
    P = spec.n_params
    if isinstance(data, Dataset):
        T, pt = basis_matrix(spec, params, data, G)
        _check_pattern(pt, "subject")
        W = T / pt[:, None]
    else:
        grouped = _grouped_view(data, spec.r).validate(spec)
        Q = mixture_matrix(G, params.theta)
        A, pi = _design_stack(spec, params, grouped.configs, G, Q)
        Pm = pi @ Q.T
        W = (A * (np.sqrt(grouped.freqs) / Pm)[:, :, None]).reshape(-1, P)
    if W.shape[0] == 0:
        return RankDiagnosis(0, P, np.zeros(0))
    sv = np.linalg.svd(W, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv[0] > 0 else 0
    return RankDiagnosis(rank, P, sv)


def _second_derivative_sum(spec, params, data, G):
    """``sum_i sum_u (y_iu / p_iu) * Hessian(p_iu)`` over all observations."""
    grouped = _grouped_view(data, spec.r).validate(spec)
    freqs = grouped.freqs
    c, k, g = spec.classes, spec.k, spec.g
    Q = mixture_matrix(G, params.theta)
    gbar = Q.T @ G                                          # (c, g)
    GdqG = np.einsum("ru,rc,rv->cuv", G, Q, G)              # G' diag(q_j) G
    H = np.zeros((spec.n_params, spec.n_params))
    for lo in range(0, grouped.configs.shape[0], _CHUNK):
        cfg = grouped.configs[lo:lo + _CHUNK]
        Y = freqs[lo:lo + _CHUNK]
        pi = weights_matrix(spec, params.beta, cfg)
        Pm = pi @ Q.T
        obs = Y > 0
        w = np.where(obs, Y / np.where(obs, Pm, 1.0), 0.0)  # (m, r)
        wq = w @ Q                                           # (m, c)
        eye = np.eye(c)[None]
        Xs = _class_designs(spec, cfg)

        # beta-beta: X' M X
        a = wq * pi
        S = a.sum(axis=1)
        M = (a[:, :, None] * eye - a[:, :, None] * pi[:, None, :] - pi[:, :, None] * a[:, None, :]
             + 2 * S[:, None, None] * pi[:, :, None] * pi[:, None, :]
             - S[:, None, None] * pi[:, :, None] * eye)
        H[:k, :k] += np.einsum("mck,mcd,mdl->kl", Xs, M, Xs)

        # theta_j - theta_j
        b = w[:, None, :] * Q.T[None]                        # (m, c, r)
        Gb = b @ G                                           # (m, c, g)
        GdbG = np.einsum("ru,mcr,rv->mcuv", G, b, G)
        tt = (GdbG
              - Gb[:, :, :, None] * gbar[None, :, None, :]
              - gbar[None, :, :, None] * Gb[:, :, None, :]
              + 2 * wq[:, :, None, None] * gbar[None, :, :, None] * gbar[None, :, None, :]
              - wq[:, :, None, None] * GdqG[None])
        tt = np.einsum("mc,mcuv->cuv", pi, tt)
        for j in range(c):
            sl = slice(k + j * g, k + (j + 1) * g)
            H[sl, sl] += tt[j]

        # beta - theta_j
        if k:
            om_pi = pi[:, :, None] * eye - pi[:, :, None] * pi[:, None, :]
            XO = np.einsum("mck,mcd->mkd", Xs, om_pi)        # (m, k, c): X' Omega_pi e_j
            Gd = Gb - wq[:, :, None] * gbar[None]            # (m, c, g)
            bt = np.einsum("mkc,mcu->cku", XO, Gd)
            for j in range(c):
                sl = slice(k + j * g, k + (j + 1) * g)
                H[:k, sl] += bt[j]
                H[sl, :k] += bt[j].T
    return H


def observed_info(spec: ModelSpec, params: Params, data, G=None) -> InfoMatrix:
    """Negative Hessian of the log-likelihood, assembled as ``F + D``.

    ``D = -sum_i sum_u (y_iu / p_iu) d^2 p_iu / d psi d psi'`` has zero
    expectation under the model.
    """
    if G is None:
        G = build_G(spec)
    F = hybrid_info(spec, params, data, G).matrix
    D = -_second_derivative_sum(spec, params, data, G)
    return InfoMatrix(F + D, "observed")


def correction_term(spec: ModelSpec, params: Params, data, G=None) -> np.ndarray:
    """The zero-expectation part ``D`` of the observed information."""
    if G is None:
        G = build_G(spec)
    return -_second_derivative_sum(spec, params, data, G)


def expected_info(spec: ModelSpec, params: Params, configs, weights=None,
                  G=None, cap: int = 10**6) -> InfoMatrix:
    """``sum_i w_i sum_u a_iu a_iu' / p_iu`` enumerating every response pattern."""
    if spec.r > cap:
        raise StructuralError(f"{spec.r} patterns exceed the enumeration cap {cap}")
    if G is None:
        G = build_G(spec)
    configs = covariate_rows(configs, spec.v)
    weights = np.ones(configs.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    Q = mixture_matrix(G, params.theta)
    P = spec.n_params
    out = np.zeros((P, P))
    for lo in range(0, configs.shape[0], _CHUNK):
        A, pi = _design_stack(spec, params, configs[lo:lo + _CHUNK], G, Q)
        Pm = pi @ Q.T
        W = A * (np.sqrt(weights[lo:lo + _CHUNK, None]) / np.sqrt(Pm))[:, :, None]
        W = W.reshape(-1, P)
        out += W.T @ W
    return InfoMatrix(out, "expected")


def standard_errors(info, params: Params | np.ndarray, diagnosis=None):
    """Standard errors from the inverse information, and z ratios.

    Raises :class:`SingularInformationError` if ``info`` is not positive
    definite.
    """
    M = np.asarray(info.matrix if isinstance(info, InfoMatrix) else info, dtype=float)
    psi = params.to_vector() if isinstance(params, Params) else np.asarray(params, dtype=float)
    M = 0.5 * (M + M.T)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        if diagnosis is None:
            sv = np.linalg.svd(M, compute_uv=False)
            rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
            diagnosis = RankDiagnosis(rank, M.shape[0], sv)
        raise SingularInformationError(
            f"information matrix is not positive definite: {diagnosis}", diagnosis) from None
    Linv = np.linalg.solve(L, np.eye(M.shape[0]))
    cov = Linv.T @ Linv
    se = np.sqrt(np.diag(cov))
    return se, psi / se


def covariance(info) -> np.ndarray:
    M = np.asarray(info.matrix if isinstance(info, InfoMatrix) else info, dtype=float)
    M = 0.5 * (M + M.T)
    L = np.linalg.cholesky(M)
    Linv = np.linalg.solve(L, np.eye(M.shape[0]))
    return Linv.T @ Linv
