"""Generation-quality metrics and RUL error metrics.

MMD compares generated and real signals channel by channel after projecting
both onto a 64-axis PCA basis fitted on the real set. FID uses pooled
features of a classifier trained on real vibration data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, InsufficientDataError, NumericalError, ShapeError

CHANNELS = ("horizontal", "vertical")


@dataclass
class PcaProjector:
    mean: np.ndarray
    axes: np.ndarray  # (dims, n_feature), rows orthonormal
    explained_variance: np.ndarray
    channel: int = 0

    @property
    def dims(self) -> int:
        return self.axes.shape[0]

    def transform(self, signals: np.ndarray) -> np.ndarray:
        return (np.asarray(signals, dtype=np.float64) - self.mean) @ self.axes.T

    def inverse(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.axes + self.mean

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(np.round(self.mean, 10).tobytes())
        h.update(np.round(np.abs(self.axes), 10).tobytes())
        return h.hexdigest()[:16]


def _channel(signals: np.ndarray, channel: int | None) -> np.ndarray:
    signals = np.asarray(signals, dtype=np.float64)
    if channel is None:
        return signals.reshape(len(signals), -1)
    if signals.ndim != 3:
        raise ShapeError(f"expected (N, 2, n_feature) signals, got {signals.shape}")
    return signals[:, channel, :]


def fit_pca(real_signals: np.ndarray, channel: int | None = 0, dims: int = 64) -> PcaProjector:
    """PCA on centered real signals of one channel (or flattened when channel is None)."""
    data = _channel(real_signals, channel)
    if len(data) < dims:
        raise InsufficientDataError(f"PCA to {dims} dims needs at least {dims} samples, got {len(data)}")
    if data.shape[1] < dims:
        raise InsufficientDataError(f"PCA to {dims} dims needs at least {dims} features, got {data.shape[1]}")
    mean = data.mean(axis=0)
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    return PcaProjector(mean, vt[:dims], s[:dims] ** 2 / max(len(data) - 1, 1), -1 if channel is None else channel)


def gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float = 1.0) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / bandwidth)


def mmd_statistic(gen: np.ndarray, real: np.ndarray, bandwidth: float = 1.0) -> float:
    """Biased (V-statistic) squared MMD with ``K(x, y) = exp(-|x-y|^2 / bandwidth)``."""
    gen = np.asarray(gen, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if len(gen) == 0 or len(real) == 0:
        raise InsufficientDataError("MMD needs two non-empty sets")
    return float(
        gaussian_kernel(gen, gen, bandwidth).mean()
        - 2.0 * gaussian_kernel(gen, real, bandwidth).mean()
        + gaussian_kernel(real, real, bandwidth).mean()
    )


def mmd(gen: np.ndarray, real: np.ndarray, projector: PcaProjector | None, bandwidth: float = 1.0) -> float:
    """MMD of one channel; signals are ``(N, 2, n_feature)`` or already per-channel."""
    if projector is None:
        return mmd_statistic(gen, real, bandwidth)
    gen, real = np.asarray(gen), np.asarray(real)
    if gen.ndim == 3:
        gen, real = gen[:, projector.channel], real[:, projector.channel]
    return mmd_statistic(projector.transform(gen), projector.transform(real), bandwidth)


# ---------------------------------------------------------------------------
# FID


def _sqrtm_psd(mat: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    if w.min() < -tol:
        raise NumericalError(f"covariance has a negative eigenvalue {w.min():.3e}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2, tol: float = 1e-6) -> float:
    """``|mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})``.

    The trace of the product root is taken from the symmetric matrix
    ``S1^{1/2} S2 S1^{1/2}``, which has the same eigenvalues as ``S1 S2``.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (len(mu1), len(mu1)):
        raise ShapeError("mean/covariance shapes do not agree")
    root1 = _sqrtm_psd(s1, tol)
    inner = root1 @ s2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if w.min() < -tol:
        raise NumericalError(f"product covariance has a negative eigenvalue {w.min():.3e}")
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean)
    return max(d, 0.0)  # round-off can dip just below zero for identical moments


def feature_moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise InsufficientDataError("FID needs at least two feature vectors per set")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def fid_from_features(gen_features: np.ndarray, real_features: np.ndarray) -> float:
    mu_g, s_g = feature_moments(gen_features)
    mu_r, s_r = feature_moments(real_features)
    return frechet_distance(mu_g, s_g, mu_r, s_r)


class FeatureExtractor:
    """Wraps a trained classifier; returns its pooled pre-head features."""

    def __init__(self, network, batch_size: int = 512):
        self.network = network
        self.batch_size = batch_size

    def __call__(self, signals: np.ndarray) -> np.ndarray:
        import torch

        self.network.eval()
        signals = np.asarray(signals, dtype=np.float32)
        outs = []
        with torch.no_grad():
            for start in range(0, len(signals), self.batch_size):
                _, feats = self.network(torch.from_numpy(signals[start : start + self.batch_size]))
                outs.append(feats.double().numpy())
        if not outs:
            raise InsufficientDataError("no signals to extract features from")
        return np.concatenate(outs)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for name, p in sorted(self.network.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def fid(gen: np.ndarray, real: np.ndarray, extractor) -> float:
    try:
        fg, fr = extractor(gen), extractor(real)
    except (DataError, NumericalError):
        raise
    except Exception as err:
        raise DataError(f"feature extraction failed: {err}") from err
    return fid_from_features(fg, fr)


# ---------------------------------------------------------------------------
# auxiliary statistics


def mad(gen: np.ndarray, real: np.ndarray, normal_phase_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-channel mean |difference of per-sample means| over paired samples."""
    gen, real = np.asarray(gen, dtype=np.float64), np.asarray(real, dtype=np.float64)
    if gen.shape != real.shape:
        raise ShapeError(f"paired sets differ in shape: {gen.shape} vs {real.shape}")
    if normal_phase_mask is not None:
        mask = np.asarray(normal_phase_mask, dtype=bool)
        gen, real = gen[mask], real[mask]
    if len(gen) == 0:
        raise InsufficientDataError("MAD mask selects no samples")
    return np.abs(gen.mean(axis=-1) - real.mean(axis=-1)).mean(axis=0)


def mse_metric(predictions, labels) -> float:
    p, y = np.asarray(predictions, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError("predictions and labels differ in length")
    return float(np.mean((y - p) ** 2))


def mtd(predictions) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    if len(p) < 2:
        raise InsufficientDataError("MTD needs at least two predictions")
    return float(np.mean(np.abs(np.diff(p))))


def mv(predictions, k: int) -> float:
    """Mean of the population variances of every length-k window."""
    p = np.asarray(predictions, dtype=np.float64)
    if not 1 <= k <= len(p):
        raise InsufficientDataError(f"MV window {k} does not fit {len(p)} predictions")
    windows = np.lib.stride_tricks.sliding_window_view(p, k)
    # shifting by the first element leaves variance unchanged and makes constants exactly 0
    return float((windows - windows[:, :1]).var(axis=1).mean())


def psnr_from_error(e: float, max_i: float) -> float | None:
    if e == 0:
        return None
    return float(10.0 * math.log10(max_i**2 / e))


def psnr(gen: np.ndarray, real: np.ndarray, max_i: float | None = None) -> float | None:
    """PSNR in dB; None (undefined) when the sets are identical."""
    gen, real = np.asarray(gen, dtype=np.float64), np.asarray(real, dtype=np.float64)
    if gen.shape != real.shape:
        raise ShapeError(f"paired sets differ in shape: {gen.shape} vs {real.shape}")
    if max_i is None:
        max_i = float(max(gen.max(), real.max()))
    e = float(np.mean((gen - real) ** 2))
    return psnr_from_error(e, max_i)


def rul_scores(pred, truth) -> tuple[float, float, float]:
    """RMSE, MAE and the asymmetric PHM score with ``E = truth - pred``."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"length mismatch: {pred.shape} vs {truth.shape}")
    err = truth - pred
    a = np.where(err <= 0, np.exp(-err / 13.0) - 1.0, np.exp(err / 10.0) - 1.0)
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), float(a.sum())


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    horizontal_mmd: float
    vertical_mmd: float
    fid: float | None = None
    mad_h: float | None = None
    mad_v: float | None = None
    mse: float | None = None
    mtd: float | None = None
    mv: float | None = None
    psnr: float | None = None
    n_generated: int = 0
    n_real: int = 0
    provenance: dict = field(default_factory=dict)

    VALUE_FIELDS = ("horizontal_mmd", "vertical_mmd", "fid", "mad_h", "mad_v", "mse", "mtd", "mv", "psnr")

    def __post_init__(self):
        for name in self.VALUE_FIELDS:
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise NumericalError(f"metric {name} is not finite: {v}")

    def row(self) -> dict:
        out = {name: ("undefined" if getattr(self, name) is None else getattr(self, name)) for name in self.VALUE_FIELDS}
        out["n_generated"] = self.n_generated
        out["n_real"] = self.n_real
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate_generation(
    gen: np.ndarray,
    real: np.ndarray,
    projectors: tuple[PcaProjector, PcaProjector],
    extractor=None,
    normal_phase_mask: np.ndarray | None = None,
    predictions: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    mv_window: int = 15,
    bandwidth: float = 1.0,
) -> MetricReport:
    """Full metric suite for a generated set against its paired real set."""
    gen, real = np.asarray(gen), np.asarray(real)
    report = MetricReport(
        horizontal_mmd=mmd(gen, real, projectors[0], bandwidth),
        vertical_mmd=mmd(gen, real, projectors[1], bandwidth),
        n_generated=len(gen),
        n_real=len(real),
        provenance={
            "projector_fingerprints": [p.fingerprint for p in projectors],
            "pca_dims": projectors[0].dims,
            "bandwidth": bandwidth,
        },
    )
    if extractor is not None:
        report.fid = fid(gen, real, extractor)
        report.provenance["extractor_fingerprint"] = getattr(extractor, "fingerprint", None)
    if gen.shape == real.shape:
        if normal_phase_mask is None or np.any(normal_phase_mask):
            report.mad_h, report.mad_v = (float(v) for v in mad(gen, real, normal_phase_mask))
        report.psnr = psnr(gen, real)
        report.provenance["max_i"] = float(max(gen.max(), real.max()))
    if predictions is not None:
        report.mtd = mtd(predictions)
        if len(predictions) >= mv_window:
            report.mv = mv(predictions, mv_window)
        if labels is not None:
            report.mse = mse_metric(predictions, labels)
    return report


def write_reports(path: str | Path, rows: list[dict]):
    """Delimited table, one row per report (keys of the first row as header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_json(path: str | Path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))
