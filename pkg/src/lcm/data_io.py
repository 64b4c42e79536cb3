"""Datasets, design matrices, pattern indexing, file parsing and simulation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .model_core import (
    ModelSpec,
    Params,
    StructuralError,
    build_X,
    covariate_rows,
    mixture_matrix,
    weights_matrix,
)

__all__ = [
    "Dataset", "GroupedData", "DataError", "pattern_index", "pattern_tuple",
    "all_patterns", "build_G", "build_X", "parse_dataset", "write_dataset",
    "simulate", "load_spec", "spec_from_dict", "spec_to_dict",
]


class DataError(ValueError):
    """Malformed input file or dataset."""


@dataclass
class Dataset:
    """Individual-level data: one covariate row and one pattern index per subject."""

    covariates: np.ndarray
    patterns: np.ndarray

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.intp).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(self.patterns.size, -1)
        self.covariates = cov
        if cov.shape[0] != self.patterns.size:
            raise DataError(f"{cov.shape[0]} covariate rows for {self.patterns.size} patterns")

    @property
    def n(self) -> int:
        return int(self.patterns.size)

    def validate(self, spec: ModelSpec) -> "Dataset":
        if self.covariates.shape[1] != spec.v:
            raise DataError(f"dataset has {self.covariates.shape[1]} covariates, "
                            f"model expects {spec.v}")
        if self.n and (self.patterns.min() < 0 or self.patterns.max() >= spec.r):
            raise DataError(f"pattern indices must lie in [0, {spec.r})")
        return self

    def grouped(self, r: int) -> "GroupedData":
        """Collapse subjects with identical covariate vectors (first-seen order)."""
        index: dict[bytes, int] = {}
        rows = []
        owner = np.empty(self.n, dtype=np.intp)
        for i, row in enumerate(self.covariates):
            key = row.tobytes()
            if key not in index:
                index[key] = len(rows)
                rows.append(row)
            owner[i] = index[key]
        freqs = np.zeros((len(rows), r))
        np.add.at(freqs, (owner, self.patterns), 1.0)
        configs = np.array(rows).reshape(len(rows), self.covariates.shape[1])
        return GroupedData(configs, freqs)


@dataclass
class GroupedData:
    """Distinct covariate configurations with frequency vectors over patterns.

    Frequencies need not be integers; expected-data fits use ``m_i * p_i``.
    """

    configs: np.ndarray
    freqs: np.ndarray

    def __post_init__(self):
        self.freqs = np.atleast_2d(np.asarray(self.freqs, dtype=float))
        cfg = np.asarray(self.configs, dtype=float)
        if cfg.ndim == 1:
            cfg = cfg.reshape(self.freqs.shape[0], -1)
        self.configs = cfg
        if cfg.shape[0] != self.freqs.shape[0]:
            raise DataError(f"{cfg.shape[0]} configurations for {self.freqs.shape[0]} "
                            "frequency vectors")
        if np.any(self.freqs < 0) or not np.all(np.isfinite(self.freqs)):
            raise DataError("frequencies must be finite and nonnegative")

    @property
    def n(self) -> float:
        return float(self.freqs.sum())

    def validate(self, spec: ModelSpec) -> "GroupedData":
        if self.configs.shape[1] != spec.v:
            raise DataError(f"data has {self.configs.shape[1]} covariates, "
                            f"model expects {spec.v}")
        if self.freqs.shape[1] != spec.r:
            raise DataError(f"frequency vectors have length {self.freqs.shape[1]}, "
                            f"model has {spec.r} patterns")
        return self

    def expand(self) -> Dataset:
        """Back to one row per subject; requires integer frequencies."""
        counts = np.rint(self.freqs).astype(np.intp)
        if not np.allclose(counts, self.freqs, rtol=0, atol=1e-9):
            raise DataError("cannot expand non-integer frequencies")
        cfg_idx, pat_idx = np.nonzero(counts)
        reps = counts[cfg_idx, pat_idx]
        return Dataset(np.repeat(self.configs[cfg_idx], reps, axis=0).reshape(-1, self.configs.shape[1]),
                       np.repeat(pat_idx, reps))


def pattern_index(responses: Sequence[int], categories: Sequence[int]) -> int:
    """Lexicographic index of a response pattern, last variable fastest."""
    if len(responses) != len(categories):
        raise StructuralError(f"{len(responses)} responses for {len(categories)} variables")
    idx = 0
    for t, (a, m) in enumerate(zip(responses, categories)):
        if not 0 <= a < m:
            raise StructuralError(f"category {a} out of range [0, {m}) for response {t}")
        idx = idx * m + int(a)
    return idx


def pattern_tuple(index: int, categories: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`pattern_index`."""
    r = math.prod(categories)
    if not 0 <= index < r:
        raise StructuralError(f"pattern index {index} out of range [0, {r})")
    out = []
    for m in reversed(categories):
        index, a = divmod(index, m)
        out.append(a)
    return tuple(reversed(out))


def all_patterns(categories: Sequence[int]) -> np.ndarray:
    """Every pattern as an ``(r, n_responses)`` integer array, in index order."""
    grids = np.meshgrid(*[np.arange(m) for m in categories], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


@lru_cache(maxsize=64)
def _build_G_cached(categories: tuple[int, ...], pairs: tuple[tuple[int, int], ...]) -> np.ndarray:
    pats = all_patterns(categories)
    cols = []
    for t, m in enumerate(categories):
        for a in range(1, m):
            cols.append((pats[:, t] == a).astype(float))
    for a, b in pairs:
        m = categories[a]
        cols.append(1.0 - np.abs(pats[:, a] - pats[:, b]) / (m - 1))
    G = np.column_stack(cols)
    G.setflags(write=False)
    return G


def build_G(spec: ModelSpec) -> np.ndarray:
    """Response design: dummy main effects (category 0 reference) then pair scores.

    A pair of responses with ``m`` categories gets the score
    ``1 - |a - b| / (m - 1)``, i.e. 1, 0.5, 0 for three categories.
    """
    G = _build_G_cached(spec.categories, spec.pair_scores)
    rank = np.linalg.matrix_rank(G)
    if rank < G.shape[1]:
        # find which columns are linearly dependent on earlier ones
        bad = [j for j in range(G.shape[1])
               if np.linalg.matrix_rank(G[:, :j + 1]) < j + 1]
        raise StructuralError(f"response design is rank deficient; dependent columns {bad}")
    return G


def column_names(spec: ModelSpec) -> list[str]:
    """Labels for the columns of :func:`build_G`."""
    names = [f"{name}={a}" for name, m in spec.responses for a in range(1, m)]
    names += [f"{spec.responses[a][0]}~{spec.responses[b][0]}" for a, b in spec.pair_scores]
    return names


def parameter_names(spec: ModelSpec) -> list[str]:
    """Labels for every entry of the stacked parameter vector."""
    names = []
    for j in range(1, spec.classes):
        names += [f"beta[{j}/0].{x}" for x in ("Int",) + spec.covariates]
    cols = column_names(spec)
    for j in range(spec.classes):
        names += [f"theta[{j}].{col}" for col in cols]
    return names


# -- spec files ---------------------------------------------------------------

def spec_from_dict(d: dict, classes: int | None = None) -> ModelSpec:
    try:
        responses = [(item["name"], int(item["categories"])) for item in d["responses"]]
        c = int(classes if classes is not None else d["classes"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"spec is missing a required key: {exc}") from exc
    covariates = list(d.get("covariates") or [])
    names = [n for n, _ in responses]
    pairs = []
    for pair in d.get("pair_scores") or []:
        if len(pair) != 2:
            raise DataError(f"pair_scores entries must have two names, got {pair}")
        try:
            pairs.append((names.index(pair[0]), names.index(pair[1])))
        except ValueError:
            raise DataError(f"pair {pair} names an unknown response") from None
    return ModelSpec(c, responses, covariates, pairs)


def spec_to_dict(spec: ModelSpec) -> dict:
    names = spec.response_names
    return {
        "classes": spec.classes,
        "responses": [{"name": n, "categories": m} for n, m in spec.responses],
        "covariates": list(spec.covariates),
        "pair_scores": [[names[a], names[b]] for a, b in spec.pair_scores],
    }


def load_spec(path, classes: int | None = None) -> ModelSpec:
    """Read a YAML spec file with keys classes, responses, covariates, pair_scores."""
    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise DataError(f"{path}: spec file must be a mapping")
    return spec_from_dict(d, classes)


# -- dataset files -------------------------------------------------------------

def parse_dataset(file, spec: ModelSpec, group: bool = False):
    """Parse a comma-delimited dataset with a header row.

    Response columns are integer coded ``0..m-1``; covariate columns are
    real. Columns are matched by name. Errors cite the 1-based data row.
    Returns a :class:`Dataset`, or :class:`GroupedData` when ``group`` is set.
    """
    if isinstance(file, (str, Path)):
        with open(file, encoding="utf-8", newline="") as fh:
            text = fh.read()
    else:
        text = file.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty dataset file (no header)") from None
    cols = {}
    for name in spec.response_names + spec.covariates:
        if name not in header:
            raise DataError(f"missing column {name!r}")
        cols[name] = header.index(name)
    cats = spec.categories
    covs, pats = [], []
    for rowno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        resp = []
        for (name, m) in spec.responses:
            cell = row[cols[name]].strip()
            try:
                a = int(cell)
            except ValueError:
                raise DataError(f"row {rowno}: response {name!r} is not an integer: {cell!r}") from None
            if not 0 <= a < m:
                raise DataError(f"row {rowno}: response {name!r} = {a} out of range [0, {m})")
            resp.append(a)
        x = []
        for name in spec.covariates:
            cell = row[cols[name]].strip()
            try:
                val = float(cell)
            except ValueError:
                raise DataError(f"row {rowno}: covariate {name!r} is not a number: {cell!r}") from None
            if not math.isfinite(val):
                raise DataError(f"row {rowno}: covariate {name!r} is not finite")
            x.append(val)
        pats.append(pattern_index(resp, cats))
        covs.append(x)
    data = Dataset(np.array(covs, dtype=float).reshape(len(pats), spec.v), np.array(pats, dtype=np.intp))
    return data.grouped(spec.r) if group else data


def write_dataset(data: Dataset, spec: ModelSpec, file) -> None:
    """Write in the format read by :func:`parse_dataset`; floats use 17 significant digits."""
    header = list(spec.response_names) + list(spec.covariates)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    cats = spec.categories
    for u, x in zip(data.patterns, data.covariates):
        w.writerow([*pattern_tuple(int(u), cats), *(format(float(v), ".17g") for v in x)])
    if isinstance(file, (str, Path)):
        Path(file).write_text(out.getvalue(), encoding="utf-8")
    else:
        file.write(out.getvalue())


# -- simulation ----------------------------------------------------------------

def _draw_covariates(source, n: int, v: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(source, str):
        if source == "normal":
            return rng.standard_normal((n, v))
        if source == "uniform":
            return rng.uniform(-1.0, 1.0, size=(n, v))
        if source == "binary":
            return rng.integers(0, 2, size=(n, v)).astype(float)
        raise DataError(f"unknown covariate distribution {source!r}")
    arr = covariate_rows(source, v)
    if n is not None and arr.shape[0] != n:
        # cycle through the supplied rows
        arr = arr[np.arange(n) % arr.shape[0]] if arr.shape[0] else np.zeros((n, v))
    return arr


def simulate(spec: ModelSpec, params: Params, covariates="normal", n: int | None = None,
             seed: int = 0, G: np.ndarray | None = None) -> Dataset:
    """Draw a class from ``pi_i`` then a pattern from that class's ``q``.

    ``covariates`` is an explicit ``(n, v)`` array or the name of an i.i.d.
    generator (``normal``, ``uniform``, ``binary``).
    """
    params.check(spec)
    rng = np.random.default_rng(seed)
    if n is None:
        if isinstance(covariates, str):
            raise DataError("n is required with a generated covariate source")
        n = covariate_rows(covariates, spec.v).shape[0]
    X = _draw_covariates(covariates, n, spec.v, rng)
    if G is None:
        G = build_G(spec)
    Q = mixture_matrix(G, params.theta)
    pi = weights_matrix(spec, params.beta, X)
    u_cls = rng.random(n)
    cls = (u_cls[:, None] > np.cumsum(pi, axis=1)[:, :-1]).sum(axis=1)
    cumQ = np.cumsum(Q, axis=0)
    u_pat = rng.random(n)
    pats = (u_pat[:, None] > cumQ[:-1, cls].T).sum(axis=1)
    return Dataset(X, pats.astype(np.intp))


def iter_rows(data: Dataset, spec: ModelSpec) -> Iterable[tuple[tuple[int, ...], tuple[float, ...]]]:
    for u, x in zip(data.patterns, data.covariates):
        yield pattern_tuple(int(u), spec.categories), tuple(float(v) for v in x)
