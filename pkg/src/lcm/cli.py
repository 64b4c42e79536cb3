"""Command-line interface: ``lcm fit | select | simulate | misfit``.

Every command writes a flat ``key = value`` result file. Values are JSON
literals (floats with 17 significant digits), so reading a file back with
:func:`read_result` reproduces each number exactly.

Exit codes: 0 success/converged, 1 input error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .data_io import (
    DataError,
    Dataset,
    build_G,
    load_spec,
    parameter_names,
    parse_dataset,
    simulate,
    spec_from_dict,
    write_dataset,
)
from .inference import SingularInformationError, hybrid_info, observed_info, standard_errors
from .misfit_lab import MisfitScenario, class_distributions, fit_expected, misfit_report
from .model_core import (
    ModelSpec,
    NumericError,
    Params,
    StructuralError,
    covariate_rows,
    permute_classes,
    weights_matrix,
)
from .optimizer import FitError, FitResult, OptimOptions, fit, with_options

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2
INPUT_ERRORS = (DataError, StructuralError, OSError, yaml.YAMLError, KeyError, ValueError)


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems are input errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# -- result files -------------------------------------------------------------

def format_value(value) -> str:
    """JSON literal with floats at 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if value is None:
        return "null"
    if isinstance(value, np.ndarray):
        value = value.reshape(-1).tolist()
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    raise TypeError(f"cannot format {type(value).__name__}")


def write_result(record: dict, path) -> None:
    lines = [f"{key} = {format_value(val)}" for key, val in record.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_result(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, val = line.partition(" = ")
        if not sep:
            raise DataError(f"{path}, line {lineno}: expected 'key = value'")
        try:
            out[key.strip()] = json.loads(val)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}, line {lineno}: bad value for {key.strip()!r}: {exc}") from None
    return out


def params_from_result(rec: dict, spec: ModelSpec) -> Params:
    try:
        beta = np.asarray(rec["beta"], dtype=float)
        theta = np.asarray(rec["theta"], dtype=float)
    except KeyError as exc:
        raise DataError(f"parameter file lacks key {exc}") from None
    if theta.size != spec.classes * spec.g or beta.size != spec.k:
        raise DataError(f"parameter file has {beta.size} beta and {theta.size} theta values; "
                        f"the model needs {spec.k} and {spec.classes * spec.g}")
    return Params(beta, theta.reshape(spec.classes, spec.g))


# -- report helpers -----------------------------------------------------------

def bic(loglik: float, n_params: int, n: float) -> float:
    return -2.0 * loglik + n_params * math.log(n)


def class_order(spec: ModelSpec, params: Params) -> list[int]:
    """Classes sorted by the expected value of the first response."""
    first = class_distributions(spec, params)[0]
    means = first @ np.arange(first.shape[1])
    return [int(j) for j in np.argsort(means, kind="stable")]


def _threads() -> int:
    raw = os.environ.get("LCM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"LCM_THREADS must be an integer, got {raw!r}") from None


def _child_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1, np.uint64)[0]) for child in ss.spawn(count)]


def _seed(text: str) -> int:
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _options(args) -> OptimOptions:
    kw = dict(seed=args.seed, restarts=args.restarts, max_iter=args.max_iter)
    if args.tol is not None:
        kw["tol_loglik"] = args.tol
    if args.tol_score is not None:
        kw["tol_score"] = args.tol_score
    return OptimOptions(**kw)


def _trace_summary(res: FitResult) -> dict:
    kinds = {}
    for e in res.trace:
        kinds[e.kind] = kinds.get(e.kind, 0) + 1
    lls = [e.loglik for e in res.trace]
    monotone = all(b >= a for a, b in zip(lls, lls[1:]))
    return {"kinds": dict(sorted(kinds.items())), "start": lls[0] if lls else res.loglik_final,
            "monotone": monotone}


def _fit_record(spec, data, res: FitResult, info_kind: str, opts: OptimOptions):
    """Canonically ordered parameters, standard errors and the flat result record."""
    params = permute_classes(spec, res.params_hat, class_order(spec, res.params_hat))
    G = build_G(spec)
    info = (observed_info if info_kind == "observed" else hybrid_info)(spec, params, data, G)
    try:
        se, z = standard_errors(info, params)
        info_status = "positive_definite"
    except SingularInformationError as exc:
        se = z = np.full(spec.n_params, np.nan)
        info_status = str(exc.diagnosis)
    n = data.n
    tr = _trace_summary(res)
    rec = {
        "classes": spec.classes,
        "responses": list(spec.response_names),
        "categories": list(spec.categories),
        "covariates": list(spec.covariates),
        "n": int(n),
        "seed": int(opts.seed),
        "restarts": opts.restarts,
        "loglik": res.loglik_final,
        "n_params": spec.n_params,
        "bic": bic(res.loglik_final, spec.n_params, n),
        "converged": bool(res.converged),
        "n_iter": res.n_iter,
        "restart_index": res.restart_index,
        "run_logliks": [run.loglik for run in res.runs],
        "trace_monotone": tr["monotone"],
        "info": info_kind,
        "info_status": info_status,
        "param_names": parameter_names(spec),
        "beta": params.beta,
        "theta": params.theta,
        "se": se,
        "z": z,
    }
    return params, rec


def format_fit_report(spec: ModelSpec, params: Params, rec: dict, res: FitResult,
                      covariates: np.ndarray, show: list[str] | None = None) -> str:
    lines = []
    resp = " ".join(f"{name}({m})" for name, m in spec.responses)
    covs = " ".join(spec.covariates) if spec.covariates else "(none)"
    lines.append(f"Latent class model: {spec.classes} classes; responses {resp}; covariates {covs}")
    lines.append(f"Subjects: {rec['n']}   Parameters: {rec['n_params']}")
    lines.append(f"Log-likelihood: {rec['loglik']:.6f}   BIC: {rec['bic']:.4f}")
    status = "yes" if rec["converged"] else "NO"
    lines.append(f"Converged: {status} ({rec['n_iter']} iterations; best of "
                 f"{len(res.runs)} runs is run {rec['restart_index']})")
    tr = _trace_summary(res)
    kinds = ", ".join(f"{k} {v}" for k, v in tr["kinds"].items()) or "none"
    lines.append(f"Trace: {kinds}; loglik {tr['start']:.6f} -> {rec['loglik']:.6f}; "
                 f"{'monotone' if tr['monotone'] else 'NOT monotone'}")
    lines.append("")
    lines.append(f"Regression coefficients for the latent weights ({rec['info']} information, "
                 f"{rec['info_status']})")
    if spec.classes > 1:
        lines.append(f"{'contrast':<12}{'term':<14}{'coef':>12}{'se':>12}{'z':>10}")
        names = ("Int",) + spec.covariates
        for idx in range(spec.k):
            j, t = divmod(idx, spec.v + 1)
            lines.append(f"{f'class {j + 1}/0':<12}{names[t]:<14}{params.beta[idx]:>12.4f}"
                         f"{rec['se'][idx]:>12.4f}{rec['z'][idx]:>10.3f}")
    else:
        lines.append("(single class: no weight model)")
    pi_bar = weights_matrix(spec, params.beta, covariates).mean(axis=0)
    lines.append("")
    lines.append("Average class weights: " + "  ".join(f"{j}: {w:.4f}" for j, w in enumerate(pi_bar)))
    lines.append("")
    lines.append("Conditional response distributions by class")
    wanted = spec.response_names if not show else show
    for name, dist in zip(spec.response_names, class_distributions(spec, params)):
        if name not in wanted:
            continue
        lines.append(f"response {name}")
        lines.append(f"{'class':<8}" + "".join(f"{a:>9}" for a in range(dist.shape[1])))
        for j, row in enumerate(dist):
            lines.append(f"{j:<8}" + "".join(f"{x:>9.4f}" for x in row))
    return "\n".join(lines) + "\n"


# -- commands -----------------------------------------------------------------

def _load(args, classes=None):
    spec = load_spec(args.spec, classes)
    data = parse_dataset(args.data, spec)
    if data.n == 0:
        raise InputError(f"{args.data}: dataset has no rows")
    return spec, data


def cmd_fit(args) -> int:
    spec, data = _load(args, args.classes)
    if args.show:
        unknown = set(args.show) - set(spec.response_names)
        if unknown:
            raise InputError(f"--show names unknown responses {sorted(unknown)}")
    opts = _options(args)
    res = fit(spec, data, opts=opts)
    params, rec = _fit_record(spec, data, res, args.info, opts)
    report = format_fit_report(spec, params, rec, res, data.covariates, args.show)
    sys.stdout.write(report)
    write_result(rec, args.out)
    return EXIT_OK if res.converged else EXIT_NOCONV


def _parse_range(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise InputError(f"--classes-range must look like 2..5, got {text!r}") from None
    if a < 1 or b < a:
        raise InputError(f"--classes-range {text!r} must satisfy 1 <= a <= b")
    return list(range(a, b + 1))


def _select_one(spec_base: ModelSpec, data: Dataset, c: int, opts: OptimOptions):
    spec = spec_base.with_classes(c)
    try:
        res = fit(spec, data, opts=opts)
    except (FitError, NumericError, StructuralError, np.linalg.LinAlgError) as exc:
        return {"c": c, "loglik": math.nan, "n_params": spec.n_params, "bic": math.nan,
                "converged": False, "status": f"failed: {exc}"}
    return {"c": c, "loglik": res.loglik_final, "n_params": spec.n_params,
            "bic": bic(res.loglik_final, spec.n_params, data.n), "converged": bool(res.converged),
            "status": "converged" if res.converged else "not converged"}


def select_table(spec: ModelSpec, data: Dataset, classes: list[int], opts: OptimOptions,
                 threads: int = 1) -> list[dict]:
    """One row per class count; each count gets its own seed stream."""
    seeds = _child_seeds(opts.seed, len(classes))
    jobs = [(c, with_options(opts, seed=s)) for c, s in zip(classes, seeds)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda job: _select_one(spec, data, *job), jobs))
    else:
        rows = [_select_one(spec, data, *job) for job in jobs]
    finite = [r for r in rows if math.isfinite(r["bic"])]
    best = min(finite, key=lambda r: r["bic"])["c"] if finite else None
    for r in rows:
        r["best"] = r["c"] == best
    return rows


def cmd_select(args) -> int:
    classes = _parse_range(args.classes_range)
    spec, data = _load(args, classes[0])
    rows = select_table(spec, data, classes, _options(args), _threads())
    print(f"Bayes information criteria (n = {data.n} subjects)")
    print(f"{'c':>3}{'loglik':>16}{'n_params':>10}{'BIC':>16}  status")
    for r in rows:
        mark = "  *" if r["best"] else ""
        print(f"{r['c']:>3}{r['loglik']:>16.4f}{r['n_params']:>10}{r['bic']:>16.4f}  {r['status']}{mark}")
    best = [r["c"] for r in rows if r["best"]]
    rec = {
        "n": data.n,
        "seed": args.seed,
        "classes": [r["c"] for r in rows],
        "loglik": [r["loglik"] for r in rows],
        "n_params": [r["n_params"] for r in rows],
        "bic": [r["bic"] for r in rows],
        "converged": [r["converged"] for r in rows],
        "status": [r["status"] for r in rows],
        "best": best[0] if best else None,
    }
    write_result(rec, args.out)
    if not best:
        return EXIT_NOCONV
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOCONV


def cmd_simulate(args) -> int:
    if args.n < 0:
        raise InputError("--n must be nonnegative")
    spec = load_spec(args.spec)
    params = params_from_result(read_result(args.params), spec)
    data = simulate(spec, params, args.covariates, args.n, seed=args.seed)
    write_dataset(data, spec, args.out)
    if args.n == 0:
        print("warning: --n 0 writes a header-only dataset", file=sys.stderr)
    print(f"simulated {data.n} subjects from a {spec.classes}-class model (seed {args.seed}) "
          f"to {args.out}")
    if data.n:
        pi_bar = weights_matrix(spec, params.beta, data.covariates).mean(axis=0)
        print("average class weights: " + "  ".join(f"{w:.4f}" for w in pi_bar))
    return EXIT_OK


def load_scenario(path) -> MisfitScenario:
    """Read a misspecification scenario from YAML.

    Keys: ``truth`` (``spec``, ``beta``, ``theta``), ``candidate`` (a spec
    mapping), ``configurations`` (list of covariate rows in the true model's
    covariate order, or ``{n, distribution, seed}``) and optional
    ``weights`` (a list or a single replicate count).
    """
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: scenario must be a mapping")
    try:
        true = doc["truth"]
        tspec = spec_from_dict(true["spec"])
        tparams = Params(np.asarray(true.get("beta", []), dtype=float).reshape(-1),
                         np.asarray(true["theta"], dtype=float).reshape(tspec.classes, -1))
        cspec = spec_from_dict(doc["candidate"])
        cfg = doc["configurations"]
    except KeyError as exc:
        raise DataError(f"{path}: scenario is missing key {exc}") from None
    if isinstance(cfg, dict):
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        n = int(cfg["n"])
        dist = cfg.get("distribution", "normal")
        if dist == "normal":
            configs = rng.standard_normal((n, tspec.v))
        elif dist == "uniform":
            configs = rng.uniform(-1.0, 1.0, size=(n, tspec.v))
        else:
            raise DataError(f"{path}: unknown configuration distribution {dist!r}")
    else:
        configs = covariate_rows(cfg, tspec.v)
    w = doc.get("weights")
    if w is None or np.isscalar(w):
        weights = np.full(configs.shape[0], 1.0 if w is None else float(w))
    else:
        weights = np.asarray(w, dtype=float)
    return MisfitScenario(tspec, tparams, cspec, configs, weights)


def cmd_misfit(args) -> int:
    scenario = load_scenario(args.scenario)
    opts = _options(args)
    result = fit_expected(scenario, opts)
    rec = misfit_report(result)
    rec["seed"] = args.seed
    write_result(rec, args.out)
    print(f"true classes {rec['true_classes']}, candidate classes {rec['candidate_classes']}, "
          f"{rec['n_configs']} configurations")
    print(f"expected loglik: true {rec['expected_loglik_true']:.6f}, "
          f"candidate {rec['expected_loglik_candidate']:.6f}, gap {rec['gap']:.6g}")
    print(f"converged: {'yes' if rec['converged'] else 'NO'} in {rec['n_iter']} iterations")
    if "bias" in rec:
        print(f"{'parameter':<28}{'true':>12}{'pseudo':>12}{'bias':>12}")
        for name, t, p, b in zip(rec["bias_names"], rec["bias_true"], rec["bias_pseudo"], rec["bias"]):
            print(f"{name:<28}{t:>12.5f}{p:>12.5f}{b:>12.5f}")
    return EXIT_OK if result.converged else EXIT_NOCONV


# -- parser -------------------------------------------------------------------

def _fit_flags(p, default_out):
    p.add_argument("--data", required=True, help="CSV dataset with a header row")
    p.add_argument("--spec", required=True, help="YAML model file")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--tol", type=float, default=None, help="log-likelihood change tolerance")
    p.add_argument("--tol-score", type=float, default=None, help="max-abs score tolerance")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--out", default=default_out, help="key-value result file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lcm", description="Latent class models with concomitant variables.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model by Fisher scoring")
    _fit_flags(p, "fit_result.txt")
    p.add_argument("--classes", type=int, default=None, help="override the class count of --spec")
    p.add_argument("--info", choices=("hybrid", "observed"), default="hybrid",
                   help="information matrix used for standard errors")
    p.add_argument("--show", nargs="+", default=None, metavar="RESPONSE",
                   help="responses whose class distributions are printed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="compare class counts by BIC")
    _fit_flags(p, "select_result.txt")
    p.add_argument("--classes-range", required=True, help="e.g. 2..5")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="draw a dataset from a fitted or given model")
    p.add_argument("--spec", required=True)
    p.add_argument("--params", required=True, help="key-value file with beta and theta")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--covariates", choices=("normal", "uniform", "binary"), default="normal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("misfit", help="pseudo-true parameters under misspecification")
    p.add_argument("--scenario", required=True, help="YAML scenario file")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--tol-score", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--out", default="misfit_result.txt")
    p.set_defaults(func=cmd_misfit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"lcm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
