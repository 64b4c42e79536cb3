"""Pseudo-true parameters of possibly misspecified models.

Observations are replaced by their expectation under a known true model,
``m_i * p_i``, at fixed covariate configurations. Maximizing the resulting
expected log-likelihood of a candidate model gives its pseudo-true
parameters; the gap to the true model's own expected log-likelihood is the
(weighted) Kullback-Leibler divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import GroupedData, build_G, column_names, parameter_names
from .inference import score
from .model_core import (
    ModelSpec,
    Params,
    StructuralError,
    align_classes,
    covariate_rows,
    loglik,
    mixture_matrix,
    permute_classes,
    weights_matrix,
)
from .optimizer import OptimOptions, fit


@dataclass
class MisfitScenario:
    """A true model, a candidate model and fixed covariate configurations.

    ``configs`` holds one row per configuration with the true model's
    covariates; the candidate uses the subset of columns it names.
    """

    true_spec: ModelSpec
    true_params: Params
    candidate_spec: ModelSpec
    configs: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.true_params.check(self.true_spec)
        if self.true_spec.responses != self.candidate_spec.responses:
            raise StructuralError("true and candidate models must share the response variables")
        missing = set(self.candidate_spec.covariates) - set(self.true_spec.covariates)
        if missing:
            raise StructuralError(f"candidate covariates {sorted(missing)} are not in the true model")
        self.configs = covariate_rows(self.configs, self.true_spec.v)
        if self.weights is None:
            self.weights = np.ones(self.configs.shape[0])
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.size != self.configs.shape[0]:
            raise StructuralError("one weight per configuration is required")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise StructuralError("configuration weights must be positive")

    def candidate_configs(self) -> np.ndarray:
        cols = [self.true_spec.covariates.index(name) for name in self.candidate_spec.covariates]
        return self.configs[:, cols].reshape(self.configs.shape[0], len(cols))


@dataclass
class MisfitResult:
    scenario: MisfitScenario
    pseudo_true_params: Params
    expected_loglik: float
    expected_loglik_true: float
    n_iter: int
    converged: bool
    bias: list[tuple[str, float, float, float]] = field(default_factory=list)
    run_iters: list[int] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.expected_loglik_true - self.expected_loglik


def expected_responses(true_spec: ModelSpec, true_params: Params, config) -> np.ndarray:
    """Expected value of the one-hot response vector, i.e. ``p_i`` under the true model."""
    G = build_G(true_spec)
    pi = weights_matrix(true_spec, true_params.beta, covariate_rows(config, true_spec.v)[:1])[0]
    return mixture_matrix(G, true_params.theta) @ pi


def expected_data(scenario: MisfitScenario, for_candidate: bool = True) -> GroupedData:
    G = build_G(scenario.true_spec)
    Q = mixture_matrix(G, scenario.true_params.theta)
    pi = weights_matrix(scenario.true_spec, scenario.true_params.beta, scenario.configs)
    freqs = scenario.weights[:, None] * (pi @ Q.T)
    cfg = scenario.candidate_configs() if for_candidate else scenario.configs
    return GroupedData(cfg, freqs)


def _bias_table(scenario: MisfitScenario, pseudo: Params):
    tspec, cspec = scenario.true_spec, scenario.candidate_spec
    if tspec.classes != cspec.classes:
        return []
    true_vals = dict(zip(parameter_names(tspec), scenario.true_params.to_vector()))
    rows = []
    for name, val in zip(parameter_names(cspec), pseudo.to_vector()):
        if name in true_vals:
            rows.append((name, float(true_vals[name]), float(val), float(val - true_vals[name])))
    return rows


def projected_start(scenario: MisfitScenario) -> Params:
    """Starting values for the candidate obtained from the true parameters.

    Shared parameters are copied by name and the rest set to zero. With fewer
    candidate classes the classes of smallest average weight are dropped;
    with more, the heaviest class is duplicated with a small offset on its
    response parameters so the copies are not exchangeable.
    """
    tspec, cspec = scenario.true_spec, scenario.candidate_spec
    tp = scenario.true_params
    full = np.zeros((tspec.classes, tspec.v + 1))
    if tspec.classes > 1:
        full[1:] = tp.beta_matrix(tspec)
    pi = weights_matrix(tspec, tp.beta, scenario.configs)
    mean_w = scenario.weights @ pi / scenario.weights.sum()
    order = np.argsort(-mean_w, kind="stable")
    c = cspec.classes
    if c <= tspec.classes:
        keep = sorted(order[:c].tolist())
        offsets = [0.0] * c
    else:
        keep = list(range(tspec.classes)) + [int(order[0])] * (c - tspec.classes)
        offsets = [0.0] * tspec.classes + [0.2 * (i + 1) for i in range(c - tspec.classes)]
    tcols = {name: i for i, name in enumerate(("Int",) + tspec.covariates)}
    cols = [tcols[name] for name in ("Int",) + cspec.covariates]
    B = full[keep][:, cols]
    B[:, 0] -= np.log(np.bincount(keep, minlength=tspec.classes)[keep])
    B = B - B[0]
    tnames = {name: i for i, name in enumerate(column_names(tspec))}
    theta = np.zeros((c, cspec.g))
    for a, name in enumerate(column_names(cspec)):
        if name in tnames:
            theta[:, a] = tp.theta[keep, tnames[name]]
    theta += np.asarray(offsets)[:, None]
    return Params(B[1:].reshape(-1), theta)


def fit_expected(scenario: MisfitScenario, opts: OptimOptions = OptimOptions(),
                 init: Params | None = None) -> MisfitResult:
    """Maximize the candidate's expected log-likelihood.

    Without ``init`` the search starts from :func:`projected_start`.
    """
    cspec = scenario.candidate_spec
    data = expected_data(scenario)
    if init is None:
        init = projected_start(scenario)
    res = fit(cspec, data, init=init, opts=opts)
    pseudo = res.params_hat
    if cspec.classes == scenario.true_spec.classes:
        perm = align_classes(cspec, pseudo, scenario.true_params, ref_spec=scenario.true_spec)
        pseudo = permute_classes(cspec, pseudo, perm)
    e_true = loglik(scenario.true_spec, scenario.true_params, expected_data(scenario, False))
    return MisfitResult(scenario, pseudo, loglik(cspec, pseudo, data), e_true,
                        res.n_iter, res.converged, _bias_table(scenario, pseudo),
                        [run.n_iter for run in res.runs])


def expected_score(scenario: MisfitScenario, params: Params) -> np.ndarray:
    """Score of the candidate's expected log-likelihood at ``params``."""
    return score(scenario.candidate_spec, params, expected_data(scenario))


def class_distributions(spec: ModelSpec, params: Params) -> list[np.ndarray]:
    """Per-response marginal distributions for each class, as ``(c, m_t)`` arrays."""
    Q = mixture_matrix(build_G(spec), params.theta)
    shape = spec.categories
    out = []
    for t in range(len(shape)):
        axes = tuple(a for a in range(len(shape)) if a != t)
        out.append(np.stack([Q[:, j].reshape(shape).sum(axis=axes) for j in range(spec.classes)]))
    return out


def misfit_report(result: MisfitResult) -> dict:
    """Flat record of a misspecification run."""
    cspec = result.scenario.candidate_spec
    rec = {
        "true_classes": result.scenario.true_spec.classes,
        "candidate_classes": cspec.classes,
        "n_configs": int(result.scenario.configs.shape[0]),
        "total_weight": float(result.scenario.weights.sum()),
        "expected_loglik_true": result.expected_loglik_true,
        "expected_loglik_candidate": result.expected_loglik,
        "gap": result.gap,
        "converged": result.converged,
        "n_iter": result.n_iter,
        "param_names": parameter_names(cspec),
        "pseudo_true": result.pseudo_true_params.to_vector(),
        "class_weights_mean": weights_matrix(
            cspec, result.pseudo_true_params.beta, result.scenario.candidate_configs()).mean(axis=0),
    }
    for name, dist in zip(cspec.response_names, class_distributions(cspec, result.pseudo_true_params)):
        rec[f"dist.{name}"] = dist.reshape(-1)
    if result.bias:
        rec["bias_names"] = [b[0] for b in result.bias]
        rec["bias_true"] = np.array([b[1] for b in result.bias])
        rec["bias_pseudo"] = np.array([b[2] for b in result.bias])
        rec["bias"] = np.array([b[3] for b in result.bias])
        rec["max_abs_bias"] = float(np.max(np.abs(rec["bias"])))
    return rec
