import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvgan.errors import InsufficientDataError, NumericalError, ShapeError
from cvgan.metrics import (
    FeatureExtractor,
    MetricReport,
    evaluate_generation,
    fid,
    fid_from_features,
    fit_pca,
    frechet_distance,
    mad,
    mmd,
    mmd_statistic,
    mse_metric,
    mtd,
    mv,
    psnr,
    psnr_from_error,
    rul_scores,
    write_reports,
)
from oracles import fid_diagonal, fid_sqrtm, mad_loops, mmd_double_loop


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + 0.1 * np.eye(n)


# ---------------------------------------------------------------------------
# PCA


def test_pca_recovers_subspace(rng):
    basis = np.linalg.qr(rng.standard_normal((32, 2)))[0].T
    data = rng.standard_normal((80, 2)) @ basis + 0.5
    proj = fit_pca(data, channel=None, dims=2)
    np.testing.assert_allclose(proj.inverse(proj.transform(data)), data, atol=1e-8)


def test_pca_variance_ordering(rng):
    data = rng.standard_normal((200, 2, 80)) * np.linspace(3, 0.1, 80)
    proj = fit_pca(data, channel=1, dims=64)
    var = proj.transform(data[:, 1]).var(axis=0)
    assert np.all(np.diff(var) <= 1e-9)
    np.testing.assert_allclose(proj.axes @ proj.axes.T, np.eye(64), atol=1e-10)


def test_pca_rank_bound(rng):
    with pytest.raises(InsufficientDataError):
        fit_pca(rng.standard_normal((50, 2, 128)), 0, 64)


def test_pca_fingerprint_stable(rng):
    data = rng.standard_normal((70, 2, 64))
    assert fit_pca(data, 0).fingerprint == fit_pca(data.copy(), 0).fingerprint
    assert fit_pca(data, 0).fingerprint != fit_pca(data, 1).fingerprint


# ---------------------------------------------------------------------------
# MMD


def test_mmd_identical_sets(rng):
    real = rng.standard_normal((90, 2, 64))
    proj = fit_pca(real, 0)
    assert abs(mmd(real.copy(), real, proj)) <= 1e-9


def test_mmd_far_apart_limit():
    a = np.zeros((10, 4))
    b = np.full((7, 4), 100.0)
    assert mmd_statistic(a, b) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mmd_matches_double_loop(seed):
    r = np.random.default_rng(seed)
    gen, real = r.standard_normal((r.integers(2, 20), 3)) * 0.7, r.standard_normal((r.integers(2, 32), 3))
    for bw in (1.0, 2.5):
        assert abs(mmd_statistic(gen, real, bw) - mmd_double_loop(gen, real, bw)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)), arrays(np.float64, (9, 3), elements=st.floats(-3, 3)))
def test_mmd_symmetric_nonnegative(a, b):
    ab, ba = mmd_statistic(a, b), mmd_statistic(b, a)
    assert abs(ab - ba) <= 1e-12
    assert ab >= -1e-12
    assert abs(mmd_statistic(a, a)) <= 1e-12


def test_mmd_grows_with_noise(rng):
    real = rng.standard_normal((150, 2, 64)) * 0.3
    proj = fit_pca(real, 0)
    values = [mmd(real + s * rng.standard_normal(real.shape), real, proj) for s in (0.0, 0.05, 0.1, 0.2, 0.4)]
    ranks = np.argsort(np.argsort(values))
    assert np.sum(ranks == np.arange(5)) >= 4


def test_mmd_empty():
    with pytest.raises(InsufficientDataError):
        mmd_statistic(np.zeros((0, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# FID


def test_fid_identical(rng):
    feats = rng.standard_normal((100, 8))
    assert fid_from_features(feats, feats.copy()) <= 1e-6


def test_fid_mean_shift(rng):
    s = random_spd(rng, 6)
    d = rng.standard_normal(6)
    mu = rng.standard_normal(6)
    assert frechet_distance(mu, s, mu + d, s) == pytest.approx(d @ d, abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_fid_diagonal_closed_form(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(0.1, 4, 7), r.uniform(0.1, 4, 7)
    mu = r.standard_normal(7)
    assert frechet_distance(mu, np.diag(a), mu, np.diag(b)) == pytest.approx(fid_diagonal(a, b), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_fid_matches_sqrtm_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 16))
    s1, s2 = random_spd(r, n), random_spd(r, n)
    mu1, mu2 = r.standard_normal(n), r.standard_normal(n)
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(fid_sqrtm(mu1, s1, mu2, s2), abs=1e-6)
    assert abs(frechet_distance(mu1, s1, mu2, s2) - frechet_distance(mu2, s2, mu1, s1)) <= 1e-6


def test_fid_negative_eigenvalue():
    bad = np.diag([1.0, -0.5])
    with pytest.raises(NumericalError):
        frechet_distance(np.zeros(2), bad, np.zeros(2), np.eye(2))
    # tiny negatives from round-off are clamped
    tiny = np.diag([1.0, -1e-9])
    assert math.isfinite(frechet_distance(np.zeros(2), tiny, np.zeros(2), np.eye(2)))


def test_fid_through_extractor(rng):
    torch = pytest.importorskip("torch")

    class Net(torch.nn.Module):
        def forward(self, x):
            f = torch.cat([x.mean(-1), x.std(-1)], 1)
            return f.sum(1, keepdim=True), f

    ext = FeatureExtractor(Net())
    real = rng.random((60, 2, 32))
    assert fid(real, real.copy(), ext) <= 1e-6
    assert fid(real + 0.2, real, ext) == pytest.approx(2 * 0.2**2, rel=1e-4)
    assert len(ext.fingerprint) == 16


# ---------------------------------------------------------------------------
# auxiliary statistics


def test_mad_examples(rng):
    real = rng.random((12, 2, 16))
    np.testing.assert_array_equal(mad(real, real), [0, 0])
    np.testing.assert_allclose(mad(real + 0.1, real), [0.1, 0.1], atol=1e-12)
    gen = rng.random((12, 2, 16))
    np.testing.assert_allclose(mad(gen, real), mad_loops(gen, real), atol=1e-12)
    mask = np.arange(12) < 5
    np.testing.assert_allclose(mad(gen, real, mask), mad_loops(gen[:5], real[:5]), atol=1e-12)
    with pytest.raises(InsufficientDataError):
        mad(gen, real, np.zeros(12, bool))


def test_mtd_mv_examples():
    assert mtd([3.0] * 10) == 0
    assert mtd([0, 1] * 6) == 1
    assert mv([2.5] * 20, 15) == 0
    assert mv([0, 1, 0, 1], 2) == pytest.approx(0.25)
    with pytest.raises(InsufficientDataError):
        mv([1, 2], 3)


def test_psnr_examples(rng):
    assert psnr_from_error(4.0, 2.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr_from_error(0.0, 1.0) is None
    real = rng.random((5, 2, 8))
    assert psnr(real, real.copy()) is None
    assert psnr(real * 0 + 0.5, real * 0 + 0.4, max_i=1.0) == pytest.approx(20.0)


def test_mse_metric():
    assert mse_metric([1, 2], [1, 4]) == 2.0
    with pytest.raises(ShapeError):
        mse_metric([1], [1, 2])


def test_rul_score_examples():
    assert rul_scores([5, 7], [5, 7]) == (0.0, 0.0, 0.0)
    assert rul_scores([0], [10])[2] == pytest.approx(math.e - 1)
    assert rul_scores([13], [0])[2] == pytest.approx(math.e - 1)
    with pytest.raises(ShapeError):
        rul_scores([1, 2], [1])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 50))
def test_rul_score_asymmetry(e):
    late = rul_scores([0.0], [e])[2]
    early = rul_scores([e], [0.0])[2]
    assert late > early


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-100, 100)), arrays(np.float64, 8, elements=st.floats(-100, 100)))
def test_mae_bounded_by_rmse(p, t):
    rmse, mae, _ = rul_scores(p, t)
    assert mae <= rmse + 1e-9


# ---------------------------------------------------------------------------
# reports


def test_report_shows_undefined_psnr(rng, tmp_path):
    real = rng.random((70, 2, 64))
    projs = (fit_pca(real, 0), fit_pca(real, 1))
    rep = evaluate_generation(real.copy(), real, projs, predictions=np.linspace(1, 0, 20), labels=np.linspace(1, 0, 20))
    row = rep.row()
    assert row["psnr"] == "undefined" and row["fid"] == "undefined"
    assert row["horizontal_mmd"] == pytest.approx(0, abs=1e-9)
    assert row["mse"] == 0 and row["mv"] is not None
    write_reports(tmp_path / "r.csv", [row])
    assert "undefined" in (tmp_path / "r.csv").read_text()
    assert len(rep.provenance["projector_fingerprints"]) == 2


def test_report_rejects_non_finite():
    with pytest.raises(NumericalError):
        MetricReport(horizontal_mmd=float("nan"), vertical_mmd=0.0)
    rep = MetricReport(0.1, 0.2, psnr=None)
    assert MetricReport.from_dict(rep.to_dict()) == rep
