import numpy as np
import pytest

from astad.errors import DegenerateLabelsError
from astad.evaluate import (
    MetricsReport,
    ToySpec,
    auroc,
    compute_metrics,
    export_score_map,
    histogram,
    pixel_auroc,
    random_orthonormal_basis,
    random_projection_2d,
    toy_experiment,
    write_histogram_csv,
)
from astad.verify import pairwise_auroc


class TestAuroc:
    def test_perfect_and_inverted_ranking(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0
        assert auroc([0.9, 0.1], [0, 1]) == 0.0

    def test_all_ties_give_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_oracle_with_heavy_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(4, 200))
            labels = (rng.uniform(size=n) > 0.5).astype(int)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            scores = np.round(rng.normal(size=n), int(rng.integers(0, 2)))
            assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-9

    def test_single_class_raises(self):
        with pytest.raises(DegenerateLabelsError):
            auroc([0.1, 0.2], [1, 1])

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=50)
        labels = (rng.uniform(size=50) > 0.4).astype(int)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_complement_identity(self):
        rng = np.random.default_rng(2)
        scores = np.round(rng.normal(size=80), 1)
        labels = (rng.uniform(size=80) > 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)


class TestPixelAuroc:
    def test_indicator_scores_are_perfect(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        assert pixel_auroc([gt * 5.0], [gt]) == 1.0

    def test_constant_scores_give_half(self):
        gt = np.zeros((4, 4))
        gt[0, 0] = 1
        assert pixel_auroc([np.ones((4, 4))], [gt]) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        dists = [rng.normal(size=(5, 5)) for _ in range(3)]
        gts = [(rng.uniform(size=(5, 5)) > 0.7).astype(float) for _ in range(3)]
        gts[0][0, 0] = 1.0
        got = pixel_auroc(dists, gts)
        want = pairwise_auroc(np.concatenate([d.ravel() for d in dists]),
                              np.concatenate([g.ravel() for g in gts]))
        assert got == pytest.approx(want, abs=1e-9)

    def test_all_ones_fg_mask_equals_no_mask(self):
        rng = np.random.default_rng(4)
        dists = [rng.normal(size=(4, 4))]
        gts = [(rng.uniform(size=(4, 4)) > 0.5).astype(float)]
        gts[0][0, 0], gts[0][1, 1] = 1.0, 0.0
        fg = [np.ones((4, 4))]
        assert pixel_auroc(dists, gts, fg) == pixel_auroc(dists, gts)

    def test_background_excluded(self):
        dist = np.array([[9.0, 0.0], [1.0, 2.0]])
        gt = np.array([[0.0, 0.0], [0.0, 1.0]])
        fg = np.array([[0.0, 1.0], [1.0, 1.0]])  # drop the misleading 9.0
        assert pixel_auroc([dist], [gt], [fg]) == 1.0


class TestHistogram:
    def test_one_score_per_class_single_bin(self):
        hist = histogram([0.2, 0.8], [0, 1], 1)
        assert hist.counts[0].tolist() == [1] and hist.counts[1].tolist() == [1]

    def test_counts_sum_to_sample_counts(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=60)
        labels = (rng.uniform(size=60) > 0.3).astype(int)
        hist = histogram(scores, labels, 7)
        assert hist.counts[0].sum() == (labels == 0).sum()
        assert hist.counts[1].sum() == (labels == 1).sum()

    def test_rebinning_preserves_totals(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=40)
        labels = (rng.uniform(size=40) > 0.5).astype(int)
        h1 = histogram(scores, labels, 8)
        h2 = histogram(scores, labels, 16)
        for cls in (0, 1):
            assert h1.counts[cls].sum() == h2.counts[cls].sum()

    def test_csv_export(self, tmp_path):
        hist = histogram([0.0, 1.0], [0, 1], 2)
        path = tmp_path / "h.csv"
        write_histogram_csv(path, hist)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "bin_lo,bin_hi,count_normal,count_anomalous"
        assert len(lines) == 3


class TestRandomProjection:
    def test_identical_points_identical_projection(self):
        pts = np.ones((4, 8))
        proj = random_projection_2d(pts, seed=0)
        assert np.allclose(proj, proj[0])

    def test_projection_contracts_distances(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(10, 16))
        proj = random_projection_2d(pts, seed=1)
        for i in range(9):
            d_orig = np.linalg.norm(pts[i] - pts[i + 1])
            d_proj = np.linalg.norm(proj[i] - proj[i + 1])
            assert d_proj <= d_orig + 1e-9

    def test_basis_orthonormal(self):
        q = random_orthonormal_basis(12, seed=3)
        np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-6)

    def test_shared_basis_for_one_call(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(5, 6))
        b = rng.normal(size=(5, 6))
        both = random_projection_2d(np.concatenate([a, b]), seed=2)
        np.testing.assert_allclose(both[:5], random_projection_2d(a, seed=2))

    def test_projection_rows_pair_teacher_and_student(self):
        from astad.data import SynthSpec, synth_corpus
        from astad.evaluate import projection_rows
        from astad.flow import TeacherModel
        from astad.student import StudentModel

        spec = SynthSpec(seed=1, train_samples=1, test_normal=2, test_anomalous=2,
                         feature_channels=4, height=8, width=8)
        _, test = synth_corpus(spec)
        channels = test[0].model_input().shape[0]
        teacher = TeacherModel(channels, 4, 2, 8, rng=np.random.default_rng(0))
        student = StudentModel(channels, 4, out_channels=channels, hidden=8,
                               n_st_blocks=1, rng=np.random.default_rng(1))
        rows = projection_rows(test, teacher, student, seed=0, max_points=50)
        kinds = {r[0] for r in rows}
        assert kinds == {"teacher", "student"}
        assert len([r for r in rows if r[0] == "teacher"]) == \
               len([r for r in rows if r[0] == "student"]) <= 50
        assert {r[1] for r in rows} == {"normal", "anomalous"}


class TestExportScoreMap:
    def test_constant_map_zero_payload(self, tmp_path):
        path = tmp_path / "m.pgm"
        export_score_map(np.full((3, 4), 2.0, np.float32), path)
        raw = path.read_bytes()
        header = b"P5\n4 3\n65535\n"
        assert raw.startswith(header)
        assert raw[len(header):] == bytes(2 * 3 * 4)

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        dist = rng.normal(size=(4, 5)).astype(np.float32)
        path = tmp_path / "m.pgm"
        export_score_map(dist, path)
        rows = [[float(v) for v in line.split(",")]
                for line in (tmp_path / "m.pgm.csv").read_text().strip().split("\n")]
        np.testing.assert_array_equal(np.array(rows, np.float64), dist.astype(np.float64))

    def test_pgm_dimensions_and_range(self, tmp_path):
        rng = np.random.default_rng(10)
        dist = rng.normal(size=(6, 3))
        path = tmp_path / "m.pgm"
        export_score_map(dist, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 6\n65535\n")
        payload = np.frombuffer(raw[len(b"P5\n3 6\n65535\n"):], dtype=">u2")
        assert payload.size == 18 and payload.max() == 65535 and payload.min() == 0


class TestToyExperiment:
    def test_zero_width_anomaly_interval_is_vacuous(self):
        spec = ToySpec(seed=0, steps=10, anomaly_intervals=((1.0, 1.0),))
        result = toy_experiment(spec)
        assert result.symmetric_ood_dist is None
        assert result.asymmetric_ood_dist is None
        assert result.curves.shape[1] == 4

    def test_overlapping_interval_rejected(self):
        with pytest.raises(ValueError):
            ToySpec(anomaly_intervals=((0.5, 2.0),))

    def test_deterministic_per_seed(self):
        spec = ToySpec(seed=4, steps=50)
        r1 = toy_experiment(spec)
        r2 = toy_experiment(spec)
        assert r1.symmetric_ood_dist == r2.symmetric_ood_dist
        assert r1.asymmetric_ood_dist == r2.asymmetric_ood_dist
        np.testing.assert_array_equal(r1.curves, r2.curves)

    def test_full_run_fits_in_distribution(self):
        result = toy_experiment(ToySpec(seed=0))
        assert result.symmetric_train_err < 0.05 * result.teacher_range
        assert result.asymmetric_train_err < 0.05 * result.teacher_range


class TestMetricsReport:
    def test_compute_metrics_fields(self):
        from astad.training import ScoreReport
        rng = np.random.default_rng(11)
        reports = []
        for i in range(8):
            label = "anomalous" if i % 2 else "normal"
            base = 1.0 if label == "anomalous" else 0.0
            gt = np.zeros((3, 3), np.float32)
            if label == "anomalous":
                gt[1, 1] = 1.0
            reports.append(ScoreReport(
                index=i, label=label,
                score=base + rng.uniform(0, 0.1),
                teacher_score=base + rng.uniform(0, 0.1),
                dist_map=gt * 2 + rng.uniform(0, 0.1, (3, 3)).astype(np.float32),
                teacher_nll=np.zeros((3, 3), np.float32),
                mask=np.ones((3, 3), np.float32),
                gt_mask=gt))
        metrics = compute_metrics(reports, seed=7, config_digest="abc")
        assert metrics.image_auroc == 1.0
        assert metrics.pixel_auroc is not None and metrics.pixel_auroc > 0.9
        assert len(metrics.scores) == 8
        assert metrics.seed == 7
        payload = metrics.to_json()
        assert '"image_auroc"' in payload
