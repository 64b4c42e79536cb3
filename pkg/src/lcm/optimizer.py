"""Monotone line-search Fisher scoring.

Each iteration solves ``F d = s`` with the hybrid information, tries a first
step along ``d``, fits a cubic to the values and slopes at both ends to get a
second step, and keeps the best point. If neither improves, the step is
halved; if that fails too, a backtracking steepest-ascent pass along ``s`` is
made. A point is only ever replaced by a strictly better one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data_io import Dataset, GroupedData, build_G
from .inference import evaluate
from .model_core import ModelSpec, NumericError, Params, mixture_matrix

logger = logging.getLogger(__name__)

PIVOT_RTOL = 1e-6


class FitError(RuntimeError):
    """No run produced a finite log-likelihood."""


@dataclass(frozen=True)
class OptimOptions:
    initial_step: float = 0.5
    tol_loglik: float = 1e-8
    tol_score: float = 1e-5
    max_iter: int = 500
    max_halvings: int = 20
    restarts: int = 5
    perturb_scale: float = 0.1
    ridge0: float = 1e-8
    max_change: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("initial_step", "tol_loglik", "tol_score", "perturb_scale", "ridge0",
                     "max_change"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1 or self.max_halvings < 1:
            raise ValueError("max_iter and max_halvings must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass
class TraceEntry:
    loglik: float
    step: float
    kind: str  # scoring | shortened | steepest


@dataclass
class RunResult:
    psi: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    trace: list[TraceEntry]
    loglik_start: float = math.nan


@dataclass
class FitResult:
    params_hat: Params
    loglik_final: float
    n_iter: int
    trace: list[TraceEntry]
    converged: bool
    restart_index: int
    runs: list[RunResult] = field(default_factory=list)


# -- building blocks -----------------------------------------------------------

def direction(F, s, ridge0: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Scoring direction ``F^{-1} s``.

    Solved by Cholesky. If the factorization fails, or the smallest pivot
    falls below ``PIVOT_RTOL`` times the largest, it is retried with a ridge
    ``lam * I``, ``lam`` growing tenfold from ``ridge0 * tr(F)/P`` to
    ``1e-2 * tr(F)/P``. Returns ``(d, steepest)``; ``steepest`` is True when
    no ascent direction was found and ``d = s`` is returned instead.
    """
    F = np.asarray(getattr(F, "matrix", F), dtype=float)
    s = np.asarray(s, dtype=float)
    P = s.size
    if P == 0 or not np.all(np.isfinite(F)):
        return s.copy(), True
    scale = max(np.trace(F) / P, np.finfo(float).tiny)
    lambdas = [0.0]
    lam = ridge0
    while lam <= 1e-2 * (1 + 1e-12):
        lambdas.append(lam * scale)
        lam *= 10
    eye = np.eye(P)
    for lam in lambdas:
        try:
            L = np.linalg.cholesky(F + lam * eye)
        except np.linalg.LinAlgError:
            continue
        piv = np.diag(L) ** 2
        if piv.min() < PIVOT_RTOL * piv.max():
            continue
        d = np.linalg.solve(L.T, np.linalg.solve(L, s))
        if np.all(np.isfinite(d)) and s @ d > 0:
            return d, False
    return s.copy(), True


def cubic_coefficients(l0, g0, a1, l1, g1):
    """Coefficients ``(c2, c3)`` of ``phi(a) = l0 + g0 a + c2 a^2 + c3 a^3``."""
    delta = l1 - l0 - g0 * a1
    c3 = (g1 - g0 - 2 * delta / a1) / a1**2
    c2 = (delta - c3 * a1**3) / a1**2
    return c2, c3


def cubic_step(l0: float, g0: float, a1: float, l1: float, g1: float) -> float:
    """Step maximizing the cubic matching value and slope at ``0`` and ``a1``.

    The result lies in ``(0, 4 * a1]``; ``a1`` is returned when the cubic has
    no local maximum at a positive step.
    """
    vals = (l0, g0, a1, l1, g1)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite input to cubic_step: {vals}")
    if not a1 > 0:
        raise ValueError("trial step must be positive")
    c2, c3 = cubic_coefficients(l0, g0, a1, l1, g1)
    # phi'(a) = g0 + 2 c2 a + 3 c3 a^2
    A, B, C = 3 * c3, 2 * c2, g0
    roots = []
    if abs(A) <= 1e-12 * max(abs(B), abs(C) / a1, 1e-300):
        if B < 0:
            roots.append(-C / B)
    else:
        disc = B * B - 4 * A * C
        if disc >= 0:
            sq = math.sqrt(disc)
            qq = -0.5 * (B + math.copysign(sq, B))
            cands = []
            if qq != 0:
                cands += [qq / A, C / qq]
            else:
                cands += [-B / (2 * A)]
            roots += [x for x in cands if 2 * c2 + 6 * c3 * x < 0]
    roots = [x for x in roots if x > 0 and math.isfinite(x)]
    if not roots:
        return a1
    return min(min(roots), 4 * a1)


def cubic_curvature(l0, g0, a1, l1, g1, a):
    """Second derivative of the interpolating cubic at ``a``."""
    c2, c3 = cubic_coefficients(l0, g0, a1, l1, g1)
    return 2 * c2 + 6 * c3 * a


@dataclass
class State:
    psi: np.ndarray
    loglik: float
    score: np.ndarray
    info: np.ndarray
    step: float


def _safe_eval(objective, psi, want_info=True):
    try:
        ll, s, F = objective(psi, want_info)
    except (NumericError, FloatingPointError, np.linalg.LinAlgError):
        return -math.inf, None, None
    if not math.isfinite(ll) or not np.all(np.isfinite(s)):
        return -math.inf, None, None
    return ll, s, F


def line_search_iterate(state: State, objective: Callable, opts: OptimOptions):
    """One monotone iteration. Returns ``(new_state, trace_entry or None)``.

    ``objective(psi, want_info)`` returns ``(loglik, score, info)``. ``None``
    for the entry means no improving point was found.
    """
    psi, l0, s = state.psi, state.loglik, state.score
    d, steepest = direction(state.info, s, opts.ridge0)
    kind = "steepest" if steepest else "scoring"
    # largest step keeping every coordinate change within max_change
    a_cap = opts.max_change / max(float(np.max(np.abs(d), initial=0.0)), 1e-300)
    a = min(state.step, a_cap)
    g0 = float(s @ d)

    best = None  # (loglik, step, score, info)
    la, sa, Fa = _safe_eval(objective, psi + a * d)
    if la > l0:
        best = (la, a, sa, Fa)
    if math.isfinite(la):
        g1 = float(sa @ d)
        a2 = min(cubic_step(l0, g0, a, la, g1), a_cap)
        concave = cubic_curvature(l0, g0, a, la, g1, a2) <= 0
        if concave and a2 != a:
            lb, sb, Fb = _safe_eval(objective, psi + a2 * d)
            if lb > l0 and (best is None or lb > best[0]):
                best = (lb, a2, sb, Fb)
    if best is None:
        kind = "shortened" if not steepest else "steepest"
        b = a
        for _ in range(opts.max_halvings):
            b *= 0.5
            lb, sb, Fb = _safe_eval(objective, psi + b * d)
            if lb > l0:
                best = (lb, b, sb, Fb)
                break
    if best is None and not steepest:
        kind = "steepest"
        b = min(1.0, opts.max_change / max(float(np.max(np.abs(s))), 1e-300))
        for _ in range(opts.max_halvings):
            lb, sb, Fb = _safe_eval(objective, psi + b * s)
            if lb > l0:
                best = (lb, b, sb, Fb)
                break
            b *= 0.5
        if best is not None:
            ll, step, sn, Fn = best
            new = State(psi + step * s, ll, sn, Fn, state.step)
            return new, TraceEntry(ll, step, kind)
    if best is None:
        return state, None
    ll, step, sn, Fn = best
    new = State(psi + step * d, ll, sn, Fn, min(1.0, 2 * step))
    return new, TraceEntry(ll, step, kind)


def optimize(objective: Callable, psi0, opts: OptimOptions) -> RunResult:
    """Run the iteration from ``psi0`` until convergence or ``max_iter``."""
    psi0 = np.asarray(psi0, dtype=float)
    ll, s, F = _safe_eval(objective, psi0)
    if not math.isfinite(ll):
        raise FitError("log-likelihood is not finite at the starting point")
    state = State(psi0, ll, s, F, opts.initial_step)
    trace: list[TraceEntry] = []
    converged = False
    n_iter = 0
    while n_iter < opts.max_iter:
        n_iter += 1
        new, entry = line_search_iterate(state, objective, opts)
        if entry is None:
            # no improving point exists numerically
            converged = float(np.max(np.abs(state.score), initial=0.0)) < opts.tol_score
            break
        gain = new.loglik - state.loglik
        state = new
        trace.append(entry)
        if abs(gain) < opts.tol_loglik and np.max(np.abs(state.score), initial=0.0) < opts.tol_score:
            converged = True
            break
    return RunResult(state.psi, state.loglik, n_iter, converged, trace, ll)


# -- model fitting -------------------------------------------------------------

def _pooled_frequencies(spec: ModelSpec, data) -> np.ndarray:
    if isinstance(data, Dataset):
        return np.bincount(data.patterns, minlength=spec.r).astype(float)
    return np.asarray(data.freqs, dtype=float).sum(axis=0)


def loglinear_fit(G: np.ndarray, counts: np.ndarray, max_iter: int = 100,
                  tol: float = 1e-12) -> np.ndarray:
    """Maximum likelihood ``theta`` of a single multinomial log-linear model (Newton)."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    theta = np.zeros(G.shape[1])
    for _ in range(max_iter):
        q = mixture_matrix(G, theta[None])[:, 0]
        grad = G.T @ (counts - n * q)
        info = n * G.T @ (np.diag(q) - np.outer(q, q)) @ G
        step = np.linalg.solve(info, grad)
        # halve until the multinomial log-likelihood improves
        cur = counts @ np.log(q)
        t = 1.0
        while t > 1e-10:
            cand = theta + t * step
            if counts @ np.log(mixture_matrix(G, cand[None])[:, 0]) >= cur:
                break
            t *= 0.5
        theta = theta + t * step
        if np.max(np.abs(grad)) < tol * max(n, 1):
            break
    return theta


def default_init(spec: ModelSpec, data, seed=0, G: np.ndarray | None = None,
                 jitter: float = 0.25) -> Params:
    """``beta = 0``; each ``theta_j`` is the pooled log-linear fit plus N(0, jitter^2) noise."""
    if G is None:
        G = build_G(spec)
    base = loglinear_fit(G, _pooled_frequencies(spec, data) + 0.5)
    rng = np.random.default_rng(seed)
    theta = base[None, :] + rng.normal(0.0, jitter, size=(spec.classes, spec.g))
    return Params(np.zeros(spec.k), theta)


def make_objective(spec: ModelSpec, data, G: np.ndarray | None = None):
    if G is None:
        G = build_G(spec)

    def objective(psi, want_info=True):
        return evaluate(spec, Params.from_vector(spec, psi), data, G, want_info=want_info)

    return objective


def _seed_stream(seed):
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)


def fit(spec: ModelSpec, data, init: Params | None = None,
        opts: OptimOptions = OptimOptions()) -> FitResult:
    """Maximum likelihood fit with perturbation restarts.

    The base run starts from ``init`` (or :func:`default_init`); each restart
    perturbs the incumbent with ``N(0, (perturb_scale * (1 + |psi|))^2)`` noise
    and re-optimizes. The best run is returned; a converged run whose
    log-likelihood is within ``tol_loglik`` of the best is preferred to an
    unconverged one.
    """
    if isinstance(data, Dataset):
        data.validate(spec)
        if data.n == 0:
            raise ValueError("cannot fit an empty dataset")
    elif isinstance(data, GroupedData):
        data.validate(spec)
        if data.n <= 0:
            raise ValueError("cannot fit an empty dataset")
    G = build_G(spec)
    objective = make_objective(spec, data, G)
    ss = _seed_stream(opts.seed)
    init_seed, perturb_seed = ss.spawn(2)
    if init is None:
        init = default_init(spec, data, np.random.default_rng(init_seed), G)
    init.check(spec)
    rng = np.random.default_rng(perturb_seed)

    runs: list[RunResult] = []
    best_idx = None
    start = init.to_vector()
    for idx in range(opts.restarts + 1):
        if idx > 0:
            inc = runs[best_idx].psi if best_idx is not None else start
            start = inc + rng.normal(size=inc.size) * opts.perturb_scale * (1 + np.abs(inc))
        try:
            run = optimize(objective, start, opts)
        except FitError as exc:
            logger.info("run %d failed: %s", idx, exc)
            runs.append(RunResult(start, -math.inf, 0, False, []))
            continue
        runs.append(run)
        if best_idx is None or run.loglik > runs[best_idx].loglik:
            best_idx = idx
    if best_idx is None:
        raise FitError("no run produced a finite log-likelihood")
    if not runs[best_idx].converged:
        # a converged run tied with the best to within tol_loglik is preferred
        tied = [i for i, run in enumerate(runs)
                if run.converged and run.loglik >= runs[best_idx].loglik - opts.tol_loglik]
        if tied:
            best_idx = tied[0]
    best = runs[best_idx]
    return FitResult(Params.from_vector(spec, best.psi), best.loglik, best.n_iter,
                     best.trace, best.converged, best_idx, runs)


def with_options(opts: OptimOptions, **changes) -> OptimOptions:
    return replace(opts, **changes)
