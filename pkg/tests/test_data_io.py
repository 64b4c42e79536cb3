import io
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import lcm.data_io as data_io
from lcm.data_io import (
    DataError,
    Dataset,
    GroupedData,
    all_patterns,
    build_G,
    column_names,
    load_spec,
    parameter_names,
    parse_dataset,
    pattern_index,
    pattern_tuple,
    simulate,
    spec_from_dict,
    spec_to_dict,
    write_dataset,
)
from lcm.model_core import ModelSpec, Params, StructuralError, mixture_matrix

from conftest import FIXTURES

shapes = st.lists(st.integers(2, 4), min_size=1, max_size=4)


class TestPatternIndex:
    @pytest.mark.parametrize("resp, idx", [((0, 0), 0), ((0, 1), 1), ((2, 2), 8), ((1, 0), 3)])
    def test_shape_3x3(self, resp, idx):
        assert pattern_index(resp, (3, 3)) == idx

    @given(shapes)
    def test_bijection(self, cats):
        r = int(np.prod(cats))
        seen = [pattern_index(pattern_tuple(u, cats), cats) for u in range(r)]
        assert seen == list(range(r))

    def test_all_patterns_in_index_order(self):
        pats = all_patterns((2, 3))
        assert [pattern_index(p, (2, 3)) for p in pats] == list(range(6))
        assert list(map(tuple, pats)) == list(itertools.product(range(2), range(3)))

    @pytest.mark.parametrize("resp", [(3, 0), (-1, 0), (0,)])
    def test_out_of_range(self, resp):
        with pytest.raises(StructuralError):
            pattern_index(resp, (3, 3))

    def test_tuple_out_of_range(self):
        with pytest.raises(StructuralError):
            pattern_tuple(9, (3, 3))


class TestBuildG:
    def test_two_binary_no_pairs(self):
        G = build_G(ModelSpec(1, [("a", 2), ("b", 2)]))
        np.testing.assert_array_equal(G, [[0, 0], [0, 1], [1, 0], [1, 1]])

    def test_pair_scores_three_categories(self):
        spec = ModelSpec(1, [("a", 3), ("b", 3)], pair_scores=[(0, 1)])
        G = build_G(spec)
        score = G[:, -1]
        # patterns (0,0), (0,1), (0,2)
        assert score[pattern_index((0, 0), (3, 3))] == 1.0
        assert score[pattern_index((0, 1), (3, 3))] == 0.5
        assert score[pattern_index((0, 2), (3, 3))] == 0.0

    def test_pair_scores_general_m(self):
        spec = ModelSpec(1, [("a", 5), ("b", 5)], pair_scores=[(0, 1)])
        G = build_G(spec)
        for u, (a, b) in enumerate(all_patterns((5, 5))):
            assert G[u, -1] == pytest.approx(1 - abs(a - b) / 4)

    @given(shapes)
    def test_column_count_and_rank(self, cats):
        spec = ModelSpec(1, [(f"y{i}", m) for i, m in enumerate(cats)])
        G = build_G(spec)
        assert G.shape == (int(np.prod(cats)), sum(m - 1 for m in cats))
        assert np.linalg.matrix_rank(G) == G.shape[1]
        assert set(np.unique(G)) <= {0.0, 1.0}

    def test_frozen_layout(self):
        spec = ModelSpec(1, [("a", 2), ("b", 3)], pair_scores=[])
        expected = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 1],
                             [1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=float)
        np.testing.assert_array_equal(build_G(spec), expected)
        assert column_names(spec) == ["a=1", "b=1", "b=2"]

    def test_rank_deficiency_names_columns(self, monkeypatch):
        def fake(categories, pairs):
            G = np.array([[0, 0, 0], [0, 1, 1], [1, 0, 0], [1, 1, 1]], dtype=float)
            return G
        monkeypatch.setattr(data_io, "_build_G_cached", fake)
        with pytest.raises(StructuralError, match=r"dependent columns \[2\]"):
            build_G(ModelSpec(1, [("a", 2), ("b", 2)]))

    def test_parameter_names(self):
        spec = ModelSpec(2, [("a", 2), ("b", 2)], ["x"], [(0, 1)])
        names = parameter_names(spec)
        assert len(names) == spec.n_params
        assert names[:2] == ["beta[1/0].Int", "beta[1/0].x"]
        assert names[-1] == "theta[1].a~b"


class TestDataset:
    def test_grouping(self):
        d = Dataset(np.array([[1.0], [2.0], [1.0]]), np.array([0, 3, 0]))
        g = d.grouped(4)
        assert g.configs.shape == (2, 1)
        np.testing.assert_array_equal(g.freqs[0], [2, 0, 0, 0])
        assert g.n == d.n

    def test_group_expand_round_trip(self, rng):
        cov = rng.integers(0, 3, size=(50, 2)).astype(float)
        pats = rng.integers(0, 6, size=50)
        d = Dataset(cov, pats)
        back = d.grouped(6).expand()
        key = lambda c, p: sorted(zip(map(tuple, c), p.tolist()))
        assert key(back.covariates, back.patterns) == key(cov, pats)

    def test_validation(self):
        spec = ModelSpec(1, [("a", 2)], ["x"])
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1)), np.array([0, 2])).validate(spec)
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 2)), np.array([0, 1])).validate(spec)
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 1)), np.array([0, 1]))
        with pytest.raises(DataError):
            GroupedData(np.zeros((1, 1)), np.array([[1.0, -1.0]]))

    def test_expand_rejects_fractions(self):
        with pytest.raises(DataError):
            GroupedData(np.zeros((1, 0)), np.array([[0.5, 1.0]])).expand()


class TestParse:
    spec = ModelSpec(1, [("a", 3), ("b", 2)], ["x"])

    def test_well_formed(self):
        text = "a,b,x\n0,1,0.5\n2,0,-1\n1,1,3e2\n"
        d = parse_dataset(io.StringIO(text), self.spec)
        assert d.n == 3
        np.testing.assert_array_equal(d.patterns, [1, 4, 3])
        np.testing.assert_array_equal(d.covariates[:, 0], [0.5, -1, 300])

    def test_columns_matched_by_name(self):
        d = parse_dataset(io.StringIO("x,b,a\n0.5,1,0\n"), self.spec)
        assert d.patterns[0] == pattern_index((0, 1), (3, 2))

    @pytest.mark.parametrize("body, match", [
        ("0,1,0.5\n3,0,1\n", "row 2: response 'a' = 3"),
        ("0,1,0.5\n1.5,0,1\n", "row 2: response 'a' is not an integer"),
        ("0,1,nan\n", "row 1: covariate 'x' is not finite"),
        ("0,1,abc\n", "row 1: covariate 'x' is not a number"),
        ("0,1\n", "row 1: expected 3 fields"),
    ])
    def test_errors_cite_row(self, body, match):
        with pytest.raises(DataError, match=match):
            parse_dataset(io.StringIO("a,b,x\n" + body), self.spec)

    def test_missing_column(self):
        with pytest.raises(DataError, match="missing column 'x'"):
            parse_dataset(io.StringIO("a,b\n0,1\n"), self.spec)

    def test_group_option(self):
        g = parse_dataset(io.StringIO("a,b,x\n0,1,1\n0,1,1\n"), self.spec, group=True)
        assert isinstance(g, GroupedData)
        assert g.freqs.shape == (1, 6) and g.freqs[0, 1] == 2

    def test_write_parse_round_trip(self, tmp_path, rng):
        d = Dataset(rng.normal(size=(20, 1)), rng.integers(0, 6, 20))
        path = tmp_path / "d.csv"
        write_dataset(d, self.spec, path)
        back = parse_dataset(path, self.spec)
        np.testing.assert_array_equal(back.patterns, d.patterns)
        np.testing.assert_array_equal(back.covariates, d.covariates)

    def test_fixture(self):
        spec = load_spec(FIXTURES / "spec2.yaml")
        d = parse_dataset(FIXTURES / "sim2.csv", spec)
        assert d.n == 600 and d.covariates.shape == (600, 1)


class TestSpecFiles:
    def test_round_trip(self):
        spec = ModelSpec(3, [("a", 3), ("b", 3)], ["x"], [(0, 1)])
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_fixture_spec(self):
        spec = load_spec(FIXTURES / "spec2.yaml")
        assert spec.classes == 2 and spec.pair_scores == ((1, 2),)
        assert load_spec(FIXTURES / "spec2.yaml", classes=4).classes == 4

    @pytest.mark.parametrize("d", [
        {"responses": [{"name": "a", "categories": 2}]},
        {"classes": 2, "responses": [{"name": "a"}]},
        {"classes": 2, "responses": [{"name": "a", "categories": 2}], "pair_scores": [["a", "z"]]},
    ])
    def test_bad_spec(self, d):
        with pytest.raises(DataError):
            spec_from_dict(d)


class TestSimulate:
    def test_deterministic(self):
        spec = ModelSpec(2, [("a", 3)], ["x"])
        p = Params([0.2, 0.5], [[0.0, 1.0], [1.0, 0.0]])
        a = simulate(spec, p, "normal", 100, seed=7)
        b = simulate(spec, p, "normal", 100, seed=7)
        np.testing.assert_array_equal(a.patterns, b.patterns)
        np.testing.assert_array_equal(a.covariates, b.covariates)

    def test_single_class_goodness_of_fit(self):
        spec = ModelSpec(1, [("a", 3), ("b", 2)])
        p = Params(np.zeros(0), [[0.3, -0.4, 0.8]])
        q = mixture_matrix(build_G(spec), p.theta)[:, 0]
        d = simulate(spec, p, np.zeros((10000, 0)), seed=3)
        counts = np.bincount(d.patterns, minlength=spec.r)
        assert stats.chisquare(counts, 10000 * q).pvalue > 0.001

    def test_degenerate_weights(self):
        spec = ModelSpec(2, [("a", 3)])
        p = Params([40.0], [[3.0, 3.0], [-1.0, 2.0]])
        q1 = mixture_matrix(build_G(spec), p.theta)[:, 1]
        d = simulate(spec, p, np.zeros((5000, 0)), seed=11)
        freq = np.bincount(d.patterns, minlength=3) / 5000
        np.testing.assert_allclose(freq, q1, atol=4 * np.sqrt(0.25 / 5000))

    def test_covariate_sources(self):
        spec = ModelSpec(1, [("a", 2)], ["x", "z"])
        p = Params(np.zeros(0), [[0.0]])
        assert set(np.unique(simulate(spec, p, "binary", 50, seed=1).covariates)) <= {0.0, 1.0}
        u = simulate(spec, p, "uniform", 50, seed=1).covariates
        assert u.min() >= -1 and u.max() <= 1
        with pytest.raises(DataError):
            simulate(spec, p, "cauchy", 5)

    def test_zero_subjects(self):
        spec = ModelSpec(2, [("a", 2)], ["x"])
        d = simulate(spec, Params.zeros(spec), "normal", 0, seed=0)
        assert d.n == 0 and d.covariates.shape == (0, 1)
