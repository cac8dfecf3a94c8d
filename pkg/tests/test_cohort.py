import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from confedlearn.cohort import (
    DATA_TYPES,
    STATE_SIZES,
    CodeVector,
    CohortConfig,
    DiseaseSpec,
    PersonRecord,
    cohort_stats,
    default_region_weights,
    export_cohort,
    generate_cohort,
    import_cohort,
    relabel,
    signal_counts,
    split_windows,
    stack_dense,
)
from confedlearn.exceptions import ParseError, RejectedInputError

SOURCE_MEAN_CODES = (13.6, 6.9, 7.4)
DIABETES_PREVALENCE = 16824 / 82143


@pytest.fixture(scope="module")
def desk_cohort():
    return generate_cohort(CohortConfig(n_people=10000, n_regions=9, seed=42))


def _person(diag=(), labels=(0,), region=0, pid="P1"):
    return PersonRecord(pid, region, CodeVector(10, diag, "diag"), CodeVector(5, (), "med"),
                        CodeVector(5, (), "lab"), labels)


class TestCodeVector:
    def test_dense_round_trip(self):
        v = CodeVector(6, (1, 4), "med")
        np.testing.assert_array_equal(v.to_dense(), [0, 1, 0, 0, 1, 0])
        assert CodeVector.from_dense(v.to_dense(), "med") == v
        assert len(v) == 2

    @pytest.mark.parametrize("idx", [(2, 1), (1, 1), (-1,), (6,)])
    def test_invalid_indices(self, idx):
        with pytest.raises(RejectedInputError):
            CodeVector(6, idx)

    def test_stack_dense_with_missing(self):
        m = stack_dense([CodeVector(3, (0,)), None, CodeVector(3, (1, 2))], 3)
        np.testing.assert_array_equal(m, [[1, 0, 0], [0, 0, 0], [0, 1, 1]])


class TestConfig:
    def test_default_weights_follow_state_sizes(self):
        w = default_region_weights(34)
        np.testing.assert_allclose(w, np.array(STATE_SIZES) / sum(STATE_SIZES), rtol=1e-12)
        assert sum(STATE_SIZES) == 82143

    def test_weights_heavy_tailed(self):
        w = default_region_weights(9)
        assert abs(sum(w) - 1) < 1e-12
        assert max(w) / min(w) > 10

    @pytest.mark.parametrize("kwargs", [
        {"n_people": -1},
        {"mean_codes": (600.0, 6.9, 7.4)},
        {"n_regions": 2, "region_weights": (0.5, 0.6)},
        {"unpaired_fraction": 1.0},
        {"latent_dim": 2},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(RejectedInputError):
            CohortConfig(**kwargs)

    def test_disease_needs_signal(self):
        with pytest.raises(RejectedInputError):
            DiseaseSpec("x", 0.1, {"diag": ()})
        with pytest.raises(RejectedInputError):
            DiseaseSpec("x", 1.0, {"diag": (1,)})


class TestGenerate:
    def test_empty(self):
        assert len(generate_cohort(CohortConfig(n_people=0))) == 0

    def test_deterministic(self):
        config = CohortConfig(n_people=300, n_regions=4, seed=42)
        assert generate_cohort(config) == generate_cohort(config)
        assert generate_cohort(config) != generate_cohort(CohortConfig(
            n_people=300, n_regions=4, seed=43))

    def test_summary_statistics_match_source(self, desk_cohort):
        stats = cohort_stats(desk_cohort)
        assert stats.n_people == 10000
        for t, target in zip(DATA_TYPES, SOURCE_MEAN_CODES):
            assert abs(stats.mean_codes[t] - target) <= 0.05 * target
        assert abs(stats.prevalence["disease_0"] - DIABETES_PREVALENCE) <= 0.02

    def test_every_prevalence_calibrated(self, desk_cohort):
        labels = np.array([r.labels for r in desk_cohort])
        for d, disease in enumerate(desk_cohort.config.diseases):
            assert abs(labels[:, d].mean() - disease.target_prevalence) <= 0.02

    def test_record_invariants(self, desk_cohort):
        config = desk_cohort.config
        for r in desk_cohort:
            assert r.present
            assert len(r.labels) == 3
            assert 0 <= r.region < config.n_regions
            for t in r.present:
                assert r.vector(t).vocab_size == config.vocab(t)

    def test_unpaired_fraction(self, desk_cohort):
        frac = cohort_stats(desk_cohort).unpaired_fraction
        assert abs(frac - desk_cohort.config.unpaired_fraction) < 0.02

    def test_cross_type_signal(self, desk_cohort):
        """Diagnoses predict each medication signal code."""
        rows = [r for r in desk_cohort if r.fully_paired]
        x = stack_dense([r.x_diag for r in rows], 500).astype(float)
        med = stack_dense([r.x_med for r in rows], 300)
        half = len(rows) // 2
        codes = sorted({c for d in desk_cohort.config.diseases for c in d.signal_codes["med"]})
        for c in codes:
            y = med[:, c]
            clf = LogisticRegression(C=0.03, max_iter=500).fit(x[:half], y[:half])
            assert roc_auc_score(y[half:], clf.decision_function(x[half:])) > 0.6

    def test_infeasible_calibration(self):
        from confedlearn.exceptions import CalibrationError

        spec = DiseaseSpec("rare", 0.01, {"diag": (0,)}, noise_level=0.0, signal_weight=1e3)
        config = CohortConfig(n_people=200, vocab_sizes=(20, 20, 20), mean_codes=(10, 1, 1),
                              n_regions=1, diseases=(spec,), seed=0)
        # every carrier of code 0 is a case, and far more than 1% carry it
        with pytest.raises(CalibrationError):
            generate_cohort(config)


class TestStats:
    def test_single_person(self):
        stats = cohort_stats([_person(diag=(1, 4, 7))])
        assert stats.mean_codes["diag"] == 3.0

    def test_everyone_sick(self):
        stats = cohort_stats([_person(labels=(1,), pid=f"P{i}") for i in range(4)])
        assert stats.prevalence["disease_0"] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(RejectedInputError):
            cohort_stats([])

    def test_recount(self):
        cohort = generate_cohort(CohortConfig(n_people=400, n_regions=5, seed=3))
        stats = cohort_stats(cohort)
        for t in DATA_TYPES:
            counts = []
            for r in cohort:
                v = getattr(r, "x_" + t)
                if v is not None:
                    counts.append(sum(1 for _ in v.set_indices))
            assert stats.mean_codes[t] == pytest.approx(sum(counts) / len(counts), rel=1e-14)
        hist = [0] * 5
        for r in cohort:
            hist[r.region] += 1
        assert list(stats.region_counts) == hist
        for d in range(3):
            cases = sum(r.labels[d] for r in cohort)
            assert stats.prevalence[f"disease_{d}"] == pytest.approx(cases / 400, rel=1e-14)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortConfig(n_people=2000, n_regions=3, seed=5))


class TestWindows:
    def test_views_disjoint(self, cohort):
        features, labels = split_windows(cohort)
        assert features.person_ids == labels.person_ids
        assert not hasattr(features, "labels")
        np.testing.assert_array_equal(labels.labels, [r.labels for r in cohort])

    def test_relabel_reproduces_labels(self, cohort):
        np.testing.assert_array_equal(relabel(cohort), [r.labels for r in cohort])

    def test_noise_free_relabel_differs_where_noise_flips(self, cohort):
        observed_only = relabel(cohort, noise_scale=0.0)
        truth = np.array([r.labels for r in cohort])
        assert (observed_only != truth).any()

    def test_label_draw_oracle(self, cohort):
        """Reimplement the threshold draw from the stored ground truth."""
        config = cohort.config
        for i in range(0, len(cohort), 97):
            for d, disease in enumerate(config.diseases):
                count = cohort.signal_counts[i, d]
                z = (cohort.intercepts[d] + disease.signal_weight * count
                     + disease.noise_level * cohort.followup_noise[i, d])
                expected = int(cohort.followup_uniform[i, d] < 1 / (1 + np.exp(-z)))
                assert cohort[i].labels[d] == expected

    def test_signal_counts_oracle(self, cohort):
        """Counts for fully paired people recount from their vectors."""
        diseases = cohort.config.diseases
        for i, r in enumerate(cohort):
            if not r.fully_paired or i % 13:
                continue
            for d, disease in enumerate(diseases):
                n = sum(len(set(getattr(r, "x_" + t).set_indices) & set(codes))
                        for t, codes in disease.signal_codes.items())
                assert cohort.signal_counts[i, d] == n

    def test_no_signal_zero_noise_gives_no_cases(self):
        spec = DiseaseSpec("quiet", 0.1, {"diag": (0,)}, noise_level=0.0, signal_weight=5.0)
        counts = np.zeros((50, 1))
        probs = expit(np.full((50, 1), -60.0) + spec.signal_weight * counts)
        assert (np.random.default_rng(0).random((50, 1)) < probs).sum() == 0
        vectors = {"diag": np.zeros((50, 20), dtype=np.uint8)}
        np.testing.assert_array_equal(signal_counts(vectors, (spec,)), 0)


class TestExport:
    def test_round_trip(self, tmp_path):
        cohort = generate_cohort(CohortConfig(n_people=200, n_regions=4, seed=1))
        path = tmp_path / "cohort.tsv"
        export_cohort(cohort, path)
        assert tuple(import_cohort(path)) == tuple(cohort)

    def test_byte_identical(self, tmp_path):
        config = CohortConfig(n_people=150, n_regions=3, seed=9)
        export_cohort(generate_cohort(config), tmp_path / "a.tsv")
        export_cohort(generate_cohort(config), tmp_path / "b.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("not a cohort\n")
        with pytest.raises(ParseError):
            import_cohort(path)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 60), st.integers(1, 4), st.integers(0, 2**20))
def test_small_cohorts_valid(n, regions, seed):
    config = CohortConfig(n_people=n, vocab_sizes=(40, 30, 20), mean_codes=(4, 3, 2),
                          n_regions=regions, seed=seed)
    cohort = generate_cohort(config)
    assert len(cohort) == n
    for r in cohort:
        assert r.present
        for t in r.present:
            v = r.vector(t)
            assert list(v.set_indices) == sorted(set(v.set_indices))
