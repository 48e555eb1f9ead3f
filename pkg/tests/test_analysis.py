import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import convolve2d

from matforge.analysis import (
    PredictionRecord,
    confidence_stats,
    confusion,
    lm_bank,
    lm_pca,
    patch_features,
    pca_fit,
    pca_project,
    read_predictions_csv,
    top_misclassifications,
    write_confusion_csv,
    write_predictions_csv,
)
from matforge.errors import ConfigurationError


@pytest.fixture(scope="module")
def bank():
    return lm_bank()


class TestLMBank:
    def test_counts(self, bank):
        assert len(bank) == 48
        assert bank.filters.shape == (48, 49, 49)
        assert [bank.kinds.count(k) for k in ("edge", "bar", "log", "gauss")] == [18, 18, 8, 4]

    def test_zero_mean_and_l1(self, bank):
        sums = bank.filters.sum(axis=(1, 2))
        zm = bank.zero_mean()
        assert np.abs(sums[zm]).max() < 1e-6
        np.testing.assert_allclose(np.abs(bank.filters).sum(axis=(1, 2)), 1, rtol=1e-12)

    def test_gaussians_nonnegative_unit_sum(self, bank):
        g = bank.filters[~bank.zero_mean()]
        assert (g >= 0).all()
        np.testing.assert_allclose(g.sum(axis=(1, 2)), 1, rtol=1e-12)

    def test_deterministic_bytes(self, bank):
        assert lm_bank().filters.tobytes() == bank.filters.tobytes()


class TestPatchFeatures:
    def test_zero_patch(self, bank):
        assert not patch_features(np.zeros((60, 60)), bank).any()

    def test_constant_patch(self, bank):
        f = patch_features(np.full((60, 60), 0.4), bank)
        zm = bank.zero_mean()
        assert np.abs(f[zm]).max() < 1e-6
        np.testing.assert_allclose(f[~zm], 0.4, rtol=1e-9)

    def test_vertical_edge_prefers_horizontal_derivative(self, bank):
        patch = np.zeros((60, 60))
        patch[:, 30:] = 1.0
        f = patch_features(patch, bank)
        for sigma in (1.0, np.sqrt(2), 2.0):
            idx = {round(a, 6): i for i, (k, s, a) in enumerate(zip(bank.kinds, bank.scales, bank.angles))
                   if k == "edge" and np.isclose(s, sigma)}
            across_x, across_y = idx[0.0], idx[round(np.pi / 2, 6)]
            assert f[across_x] > f[across_y]

    def test_matches_direct_convolution(self, bank):
        patch = np.random.default_rng(0).uniform(size=(60, 60))
        k = 7
        resp = convolve2d(patch, bank.filters[k][::-1, ::-1], mode="valid")
        assert patch_features(patch, bank)[k] == pytest.approx(np.abs(resp).mean(), rel=1e-12)

    def test_wrong_size(self, bank):
        with pytest.raises(ConfigurationError):
            patch_features(np.zeros((50, 60)), bank)

    def test_shift_stability_on_periodic_texture(self, bank):
        ys, xs = np.mgrid[0:120, 0:120]
        tex = 0.5 + 0.4 * np.sin(2 * np.pi * xs / 8) * np.cos(2 * np.pi * ys / 12)
        ref = patch_features(tex[:60, :60], bank)
        for dy, dx in ((3, 5), (17, 2), (40, 33)):
            f = patch_features(tex[dy:dy + 60, dx:dx + 60], bank)
            assert np.linalg.norm(f - ref) / np.linalg.norm(ref) < 0.05


class TestPCA:
    def test_rank_two_exact(self):
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.standard_normal((48, 2)))[0].T
        coords = rng.standard_normal((40, 2)) * [5, 2]
        offset = rng.standard_normal(48)
        x = coords @ basis + offset
        m = pca_fit(x)
        proj = pca_project(m, x)
        recon = (m.components.T @ proj).T + m.mean
        np.testing.assert_allclose(recon, x, atol=1e-8)

    def test_orthonormal_and_sorted(self):
        x = np.random.default_rng(1).standard_normal((100, 48)) * np.linspace(3, 0.1, 48)
        m = pca_fit(x)
        np.testing.assert_allclose(m.components @ m.components.T, np.eye(2), atol=1e-8)
        assert m.explained_variance[0] >= m.explained_variance[1]

    def test_mean_projects_to_origin(self):
        x = np.random.default_rng(2).standard_normal((10, 48))
        m = pca_fit(x)
        np.testing.assert_allclose(pca_project(m, m.mean), 0, atol=1e-12)

    def test_order_invariance(self):
        x = np.random.default_rng(3).standard_normal((30, 48))
        a, b = pca_fit(x), pca_fit(x[::-1])
        np.testing.assert_allclose(a.components, b.components, atol=1e-10)

    def test_degenerate(self):
        with pytest.raises(ConfigurationError):
            pca_fit(np.ones((10, 48)))
        with pytest.raises(ConfigurationError):
            pca_fit(np.zeros((2, 48)))

    def test_lm_pca_end_to_end(self):
        rng = np.random.default_rng(0)
        imgs = [rng.uniform(size=(3, 64, 64)) for _ in range(6)]
        model, pts, labels = lm_pca(imgs, list("aabbcc"), patches_per_image=2, seed=1)
        assert pts.shape == (12, 2)
        assert labels == [l for l in "aabbcc" for _ in range(2)]


def rec(i, t, p, c=0.5):
    return PredictionRecord(f"s{i:03d}", t, p, c)


class TestConfusion:
    def test_identity(self):
        cm = confusion([rec(i, i % 10, i % 10) for i in range(20)])
        np.testing.assert_array_equal(cm.matrix, np.eye(10))
        assert cm.overall_accuracy == 1.0

    def test_uniform_random(self):
        rng = np.random.default_rng(0)
        cm = confusion([rec(i, int(rng.integers(10)), int(rng.integers(10))) for i in range(10_000)])
        assert np.abs(cm.matrix - 0.1).max() < 0.03

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_row_stochastic(self, pairs):
        cm = confusion([rec(i, t, p) for i, (t, p) in enumerate(pairs)])
        rows = cm.matrix.sum(axis=1)
        assert np.all(np.abs(rows[cm.counts > 0] - 1) < 1e-9)
        assert not rows[cm.counts == 0].any()
        assert ((cm.matrix >= 0) & (cm.matrix <= 1)).all()
        trace = sum(t == p for t, p in pairs) / len(pairs)
        assert cm.overall_accuracy == pytest.approx(trace, abs=1e-12)

    def test_csv_rows(self, tmp_path):
        cm = confusion([rec(0, 0, 0), rec(1, 0, 3), rec(2, 5, 5)])
        write_confusion_csv(cm, tmp_path / "c.csv")
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0][0] == "true\\pred" and rows[1][0] == "fabric"
        assert [float(v) for v in rows[1][1:11]] == [0.5, 0, 0, 0.5, 0, 0, 0, 0, 0, 0]


class TestConfidence:
    def test_single_correct(self):
        s = confidence_stats([rec(0, 2, 2, 0.8)])
        assert s[2]["mean_conf_correct"] == 0.8
        assert s[2]["mean_conf_wrong"] is None and s[2]["mean_conf_when_predicted_wrongly_as"] is None

    def test_correct_and_wrong(self):
        s = confidence_stats([rec(0, 4, 4, 0.9), rec(1, 4, 7, 0.5)])
        assert (s[4]["mean_conf_correct"], s[4]["mean_conf_wrong"]) == (0.9, 0.5)
        assert s[7]["mean_conf_when_predicted_wrongly_as"] == 0.5

    def test_partition_totals(self):
        rng = np.random.default_rng(0)
        recs = [rec(i, int(rng.integers(10)), int(rng.integers(10)), rng.uniform()) for i in range(300)]
        s = confidence_stats(recs)
        assert sum(v["n_correct"] + v["n_wrong"] for v in s.values()) == 300
        assert sum(v["n_wrongly_as"] for v in s.values()) == sum(v["n_wrong"] for v in s.values())


class TestTopErrors:
    def test_all_correct(self):
        assert top_misclassifications([rec(0, 1, 1, 0.9)], 3) == []

    def test_k_larger(self):
        recs = [rec(0, 1, 2, 0.3), rec(1, 1, 1, 0.9)]
        assert top_misclassifications(recs, 10) == [recs[0]]

    def test_sorted(self):
        recs = [rec(0, 1, 2, 0.9), rec(1, 1, 2, 0.7), rec(2, 1, 2, 0.8)]
        assert [r.confidence for r in top_misclassifications(recs, 2)] == [0.9, 0.8]

    def test_ties_by_sample_id(self):
        recs = [rec(5, 1, 2, 0.6), rec(3, 1, 2, 0.6)]
        assert [r.sample_id for r in top_misclassifications(recs, 2)] == ["s003", "s005"]

    def test_predictions_csv_round_trip(self, tmp_path):
        recs = [rec(0, 1, 2, 0.123456789012345), PredictionRecord("x", 9, 9, 1.0, "shading")]
        write_predictions_csv(recs, tmp_path / "p.csv")
        assert read_predictions_csv(tmp_path / "p.csv") == recs
