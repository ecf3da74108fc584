import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from longmix.model import (
    DAYS_PER_MONTH,
    Covariate,
    Dataset,
    DatasetError,
    MarkerSpec,
    ModelConfig,
    Observation,
    linear_predictor,
    log_family_density,
    read_csv,
    validate_dataset,
    write_csv,
)
from longmix.simulate import pbc_markers

finite = st.floats(-50, 50, allow_nan=False)


class TestMarkerSpec:
    def test_links_follow_family(self):
        assert MarkerSpec("a", "gaussian").link == "identity"
        assert MarkerSpec("b", "poisson").link == "log"
        assert MarkerSpec("c", "bernoulli").link == "logit"

    def test_unknown_family(self):
        with pytest.raises(DatasetError):
            MarkerSpec("a", "gamma")

    def test_fixed_and_random_must_be_disjoint(self):
        with pytest.raises(DatasetError, match="disjoint"):
            MarkerSpec("a", "gaussian", ("time",), ("intercept", "t"))

    def test_mismatched_link_rejected(self):
        with pytest.raises(DatasetError):
            MarkerSpec.from_dict({"id": "a", "family": "poisson", "link": "identity"})

    def test_dict_round_trip(self):
        m = MarkerSpec("s", "bernoulli", ("time", "time^2", "attr:sex"), ("intercept",))
        assert MarkerSpec.from_dict(m.to_dict()) == m

    def test_covariates(self):
        t = np.array([0.0, 2.0, 3.0])
        np.testing.assert_array_equal(Covariate.parse("1").evaluate(t), [1, 1, 1])
        np.testing.assert_array_equal(Covariate.parse("time^2").evaluate(t), [0, 4, 9])
        np.testing.assert_array_equal(Covariate.parse("attr:age").evaluate(t, np.full(3, 7.0)), [7, 7, 7])
        with pytest.raises(DatasetError):
            Covariate.parse("log(time)")


class TestLinearPredictor:
    def test_intercept_only(self):
        assert linear_predictor([], [1.0], [], [0.5]) == 0.5

    def test_spiders_posterior_means(self):
        assert linear_predictor([12.2], [1.0], [0.0280], [-4.33]) == pytest.approx(-3.9884, abs=1e-12)

    def test_all_zero(self):
        assert linear_predictor([0.0, 0.0], [0.0], [0.0, 0.0], [0.0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            linear_predictor([1.0, 2.0], [1.0], [0.3], [0.1])

    @given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
           st.floats(-5, 5, allow_nan=False))
    def test_homogeneous_and_additive(self, v, u, a):
        x, z = np.array(v[:2]), np.array(v[2:])
        al, b = np.array(u[:2]), np.array(u[2:])
        eta = linear_predictor(x, z, al, b)
        assert linear_predictor(x, z, a * al, a * b) == pytest.approx(a * eta, rel=1e-9, abs=1e-6)
        split = linear_predictor(x, z, al, np.zeros(1)) + linear_predictor(x, z, np.zeros(2), b)
        assert split == pytest.approx(eta, rel=1e-12, abs=1e-9)


class TestFamilyDensity:
    def test_reference_values(self):
        assert log_family_density("gaussian", 0.0, 0.0, 1.0) == pytest.approx(-0.918939, abs=1e-6)
        assert log_family_density("poisson", 0, 0.0) == pytest.approx(-1.0, abs=1e-15)
        assert log_family_density("bernoulli", 1, 0.0) == pytest.approx(-0.693147, abs=1e-6)

    def test_gaussian_needs_positive_dispersion(self):
        with pytest.raises(ValueError):
            log_family_density("gaussian", 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            log_family_density("gaussian", 0.0, 0.0)

    def test_extreme_eta_is_finite(self):
        assert np.isfinite(log_family_density("bernoulli", 1, -800.0))
        assert log_family_density("bernoulli", 0, -800.0) == pytest.approx(0.0, abs=1e-300)
        assert log_family_density("bernoulli", 1, -800.0) == pytest.approx(-800.0)
        assert np.isfinite(log_family_density("poisson", 0, -800.0))

    @given(st.floats(-4, 4), st.floats(0.05, 5))
    def test_gaussian_integrates_to_one(self, eta, phi):
        val, _ = integrate.quad(lambda y: math.exp(log_family_density("gaussian", y, eta, phi)), -np.inf, np.inf)
        assert val == pytest.approx(1.0, abs=1e-8)

    @given(st.floats(-5, 3))
    def test_poisson_sums_to_one(self, eta):
        y = np.arange(200)
        assert np.exp(log_family_density("poisson", y, eta)).sum() == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(-30, 30))
    def test_bernoulli_sums_to_one(self, eta):
        p = np.exp(log_family_density("bernoulli", np.array([0.0, 1.0]), eta))
        assert p.sum() == pytest.approx(1.0, abs=1e-14)


def _pbc_shaped(rng):
    """260 subjects and 2734 observations; subject 1 has baseline visits only."""
    markers = pbc_markers()
    counts = np.full((260, 3), 3)
    counts[0] = 1
    extra = 2734 - counts.sum()
    idx = rng.choice(np.arange(3, 260 * 3), size=extra, replace=False)
    counts.ravel()[idx] += 1
    obs = []
    for i in range(260):
        for r, m in enumerate(markers):
            n = counts[i, r]
            t = np.zeros(1) if i == 0 else np.concatenate([[0.0], rng.uniform(1, 120, n - 1)])
            for tj in rng.permutation(t):
                v = rng.normal() if m.family == "gaussian" else rng.poisson(200) if m.family == "poisson" else rng.integers(2)
                obs.append(Observation(i + 1, m.marker_id, float(tj), float(v)))
    return Dataset.from_observations(markers, obs)


class TestValidation:
    def test_pbc_shaped_input(self, rng):
        ds = validate_dataset(_pbc_shaped(rng))
        assert ds.N == 260 and ds.n == 2734
        s = ds.summary()
        assert s["n"] == 2734 and sum(v["n"] for v in s["per_marker"].values()) == 2734
        assert ds.q == 5 and ds.p == 1

    def test_baseline_only_subject(self, rng):
        ds = validate_dataset(_pbc_shaped(rng))
        rows = ds.subject_rows(0)
        np.testing.assert_array_equal(ds.time[rows], 0.0)

    def test_sorted_within_subject_marker(self, rng):
        ds = validate_dataset(_pbc_shaped(rng))
        key = np.stack([ds.subj, ds.marker_idx]).T
        same = np.all(key[1:] == key[:-1], axis=1)
        assert np.all(np.diff(ds.time)[same] >= 0)
        assert np.all(np.diff(ds.subj) >= 0)

    def test_idempotent(self, rng):
        ds = validate_dataset(_pbc_shaped(rng))
        again = validate_dataset(ds)
        for name in ("subj", "marker_idx", "time", "y", "X", "Z", "counts"):
            np.testing.assert_array_equal(getattr(again, name), getattr(ds, name))
        assert again.subject_ids == ds.subject_ids

    def test_negative_count(self):
        raw = Dataset(pbc_markers(), [7], ["platelet"], [0.0], [-3.0])
        with pytest.raises(DatasetError, match=r"subject 7.*platelet.*poisson"):
            validate_dataset(raw)

    def test_non_integer_count_and_bad_binary(self):
        with pytest.raises(DatasetError):
            validate_dataset(Dataset(pbc_markers(), [1], ["platelet"], [0.0], [2.5]))
        with pytest.raises(DatasetError, match="spiders"):
            validate_dataset(Dataset(pbc_markers(), [1], ["spiders"], [0.0], [2.0]))

    def test_unknown_marker(self):
        with pytest.raises(DatasetError, match="unknown marker 'albumin'"):
            validate_dataset(Dataset(pbc_markers(), [1], ["albumin"], [0.0], [1.0]))

    def test_non_finite_time(self):
        with pytest.raises(DatasetError, match="non-finite"):
            validate_dataset(Dataset(pbc_markers(), [3], ["lbili"], [float("nan")], [1.0]))

    def test_design_blocks(self):
        m = pbc_markers()
        ds = validate_dataset(Dataset(m, [1, 1, 1], ["spiders", "lbili", "platelet"], [2.0, 1.0, 3.0],
                                      [1.0, 0.4, 150.0]))
        np.testing.assert_array_equal(ds.marker_idx, [0, 1, 2])
        np.testing.assert_array_equal(ds.Z, [[1, 1, 0, 0, 0], [0, 0, 1, 3, 0], [0, 0, 0, 0, 1]])
        np.testing.assert_array_equal(ds.X, [[0], [0], [2]])
        assert ds.random_names == ["lbili:intercept", "lbili:time", "platelet:intercept",
                                   "platelet:time", "spiders:intercept"]

    def test_missing_attribute(self):
        m = [MarkerSpec("g", "gaussian", ("attr:age",), ("intercept",))]
        with pytest.raises(DatasetError, match="age"):
            validate_dataset(Dataset(m, [1], ["g"], [0.0], [1.0]))
        ds = validate_dataset(Dataset(m, [1], ["g"], [0.0], [1.0], {1: {"age": 50.0}}))
        assert ds.X[0, 0] == 50.0


class TestCsv:
    def test_round_trip(self, rng, tmp_path):
        ds = validate_dataset(_pbc_shaped(rng))
        write_csv(ds, tmp_path / "d.csv")
        back = validate_dataset(read_csv(tmp_path / "d.csv", pbc_markers()))
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.time, ds.time)
        assert back.subject_ids == ds.subject_ids

    def test_days_are_converted(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,marker,time,value\n1,lbili,365.25,0.5\n")
        raw = read_csv(p, pbc_markers(), time_unit="days")
        assert raw.time[0] == pytest.approx(365.25 / DAYS_PER_MONTH)
        assert raw.time[0] == pytest.approx(12.0)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,marker,value\n1,lbili,0.5\n")
        with pytest.raises(DatasetError, match="time"):
            read_csv(p, pbc_markers())

    def test_model_config(self):
        cfg = ModelConfig.from_dict({"markers": [m.to_dict() for m in pbc_markers()], "time_unit": "days"})
        assert cfg.time_unit == "days"
        assert ModelConfig.from_dict(cfg.to_dict()).markers == cfg.markers
        with pytest.raises(DatasetError):
            ModelConfig.from_dict({"markers": []})
