"""Run-to-failure vibration data: ingestion, scaling, pooling, HI labels and windows.

Raw PHM-2012 snapshots are 2 x 2560 acceleration frames recorded every 10 s.
They are min-max scaled per channel over the training recordings, average
pooled to ``2 x n_feature`` and labelled with a health indicator (HI) that is
quantized into 32 classes. Sliding windows of ``k`` consecutive snapshots form
the conditioning history for the next snapshot.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateScaleError,
    InsufficientDataError,
    MalformedFrameError,
    MissingDataError,
    ParseError,
    RangeError,
    ScheduleError,
)

logger = logging.getLogger(__name__)

FRAME_LEN = 2560
N_CHANNELS = 2
N_CLASSES = 32
SAMPLE_PERIOD_S = 10.0
SCHEMA_VERSION = 1

# Condition-1 bearings: (FPT seconds, full life seconds).
PHM2012_CONDITION1 = {
    "Bearing1_1": (11420, 28030),
    "Bearing1_2": (8220, 8710),
    "Bearing1_3": (9600, 23750),
    "Bearing1_4": (10180, 14280),
    "Bearing1_5": (24070, 24630),
    "Bearing1_6": (16270, 24480),
    "Bearing1_7": (22040, 22590),
}


def phm_fpt_index(bearing_id: str, period_s: float = SAMPLE_PERIOD_S) -> int:
    """Snapshot index of the tabulated FPT for a condition-1 bearing."""
    key = bearing_id.replace("-", "_")
    if key not in PHM2012_CONDITION1:
        raise ConfigError(f"no tabulated FPT for bearing {bearing_id!r}")
    return int(round(PHM2012_CONDITION1[key][0] / period_s))


@dataclass
class RawRecording:
    bearing_id: str
    condition: int
    snapshots: np.ndarray  # (n, 2, 2560)
    sample_period_s: float = SAMPLE_PERIOD_S
    source: str = ""

    def __post_init__(self):
        if self.snapshots.ndim != 3 or self.snapshots.shape[1] != N_CHANNELS:
            raise MalformedFrameError(
                f"{self.bearing_id}: snapshots must be (n, 2, L), got {self.snapshots.shape}"
            )

    def __len__(self):
        return self.snapshots.shape[0]


@dataclass
class NormStats:
    """Per-channel min/max used for [0, 1] scaling."""

    ch_min: np.ndarray
    ch_max: np.ndarray

    def __post_init__(self):
        self.ch_min = np.asarray(self.ch_min, dtype=np.float64).reshape(N_CHANNELS)
        self.ch_max = np.asarray(self.ch_max, dtype=np.float64).reshape(N_CHANNELS)
        if np.any(self.ch_max <= self.ch_min):
            bad = np.flatnonzero(self.ch_max <= self.ch_min).tolist()
            raise DegenerateScaleError(f"degenerate scale on channel(s) {bad}: max == min")

    def apply(self, x: np.ndarray, clip: bool = False) -> np.ndarray:
        """Scale an array whose axis -2 is the channel axis."""
        lo = self.ch_min[:, None]
        span = (self.ch_max - self.ch_min)[:, None]
        out = (np.asarray(x, dtype=np.float64) - lo) / span
        if clip:
            out = np.clip(out, 0.0, 1.0)
        return out

    def invert(self, x: np.ndarray) -> np.ndarray:
        lo = self.ch_min[:, None]
        span = (self.ch_max - self.ch_min)[:, None]
        return np.asarray(x, dtype=np.float64) * span + lo

    def to_dict(self) -> dict:
        return {"ch_min": self.ch_min.tolist(), "ch_max": self.ch_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["ch_min"]), np.asarray(d["ch_max"]))


@dataclass
class BearingLifecycle:
    """One bearing's pooled two-channel series with its HI labels.

    ``norm_stats`` is the scaling that was applied to ``series``; it is None
    when the series is still in raw units.
    """

    bearing_id: str
    series: np.ndarray  # (n, 2, n_feature)
    fpt_index: int
    hi: np.ndarray
    hi_class: np.ndarray
    norm_stats: NormStats | None = None
    synthetic: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float32)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.hi_class = np.asarray(self.hi_class, dtype=np.int64)
        n = self.series.shape[0]
        if not (len(self.hi) == len(self.hi_class) == n):
            raise InsufficientDataError(
                f"{self.bearing_id}: series/hi/hi_class lengths differ "
                f"({n}, {len(self.hi)}, {len(self.hi_class)})"
            )
        if not 0 <= self.fpt_index < n:
            raise ScheduleError(f"{self.bearing_id}: fpt_index {self.fpt_index} outside [0, {n})")

    def __len__(self):
        return self.series.shape[0]

    @property
    def n_feature(self) -> int:
        return self.series.shape[-1]

    def raw_series(self) -> np.ndarray:
        if self.norm_stats is None:
            return self.series.astype(np.float64)
        return self.norm_stats.invert(self.series)

    def rescaled(self, stats: NormStats, clip: bool = False) -> "BearingLifecycle":
        """Return a copy scaled by ``stats`` (from whatever scale it is in now)."""
        return BearingLifecycle(
            bearing_id=self.bearing_id,
            series=stats.apply(self.raw_series(), clip=clip),
            fpt_index=self.fpt_index,
            hi=self.hi.copy(),
            hi_class=self.hi_class.copy(),
            norm_stats=stats,
            synthetic=self.synthetic,
            provenance=dict(self.provenance),
        )


@dataclass
class WindowSample:
    x: np.ndarray  # (2, n_feature)
    x2: np.ndarray  # (k, 2, n_feature)
    hi: float
    hi_class: int


@dataclass
class SyntheticSpec:
    n: int
    fpt_index: int
    base_mean: tuple[float, float] = (0.0, 0.0)
    noise_scale: float = 1.0
    growth_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.base_mean = tuple(float(b) for b in self.base_mean)
        if len(self.base_mean) != N_CHANNELS:
            raise ConfigError("base_mean needs one value per channel")
        if not 0 < self.fpt_index < self.n:
            raise ConfigError(f"fpt_index must lie in (0, {self.n}), got {self.fpt_index}")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be positive")


# ---------------------------------------------------------------------------
# ingestion


def _file_index(path: Path) -> int:
    digits = re.findall(r"\d+", path.stem)
    if not digits:
        raise MalformedFrameError(f"{path.name}: no snapshot index in file name")
    return int(digits[-1])


def _snapshot_files(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.is_file() and not p.name.startswith(".")]
    acc = [p for p in files if p.name.lower().startswith("acc")]
    if acc:
        files = acc
    return sorted(files, key=_file_index)


def read_frame(path: str | Path, frame_len: int = FRAME_LEN) -> np.ndarray:
    """Parse one snapshot file into a (2, frame_len) array.

    Rows are ``h, m, s, us, horizontal, vertical``; the delimiter is sniffed
    because the public release mixes commas and semicolons.
    """
    path = Path(path)
    text = path.read_text()
    first = text.split("\n", 1)[0]
    delim = ";" if first.count(";") > first.count(",") else ","
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delim) if r and any(c.strip() for c in r)]
    if len(rows) != frame_len:
        raise MalformedFrameError(f"{path.name}: expected {frame_len} rows, found {len(rows)}")
    frame = np.empty((N_CHANNELS, frame_len), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) < 6:
            raise ParseError(f"{path.name}: row {i} has {len(row)} fields, expected 6")
        try:
            frame[0, i] = float(row[4])
            frame[1, i] = float(row[5])
        except ValueError:
            raise ParseError(f"{path.name}: non-numeric acceleration at row {i}") from None
    return frame


def ingest_bearing(directory_path: str | Path, bearing_id: str, condition: int = 1) -> RawRecording:
    """Read every snapshot file of one bearing, ordered by file index."""
    directory = Path(directory_path)
    if not directory.is_dir():
        raise MissingDataError(f"bearing directory not found: {directory}")
    files = _snapshot_files(directory)
    if not files:
        raise MissingDataError(f"no snapshot files in {directory}")
    frames = np.stack([read_frame(p) for p in files])
    logger.info("ingested %s: %d snapshots from %s", bearing_id, len(files), directory)
    return RawRecording(bearing_id, condition, frames.astype(np.float32), source=str(directory))


# ---------------------------------------------------------------------------
# transforms


def pool_features(frame: np.ndarray, n_feature: int) -> np.ndarray:
    """Average-pool the last axis into ``n_feature`` equal non-overlapping bins."""
    frame = np.asarray(frame)
    length = frame.shape[-1]
    if n_feature <= 0 or length % n_feature:
        raise ConfigError(f"frame length {length} is not divisible by n_feature={n_feature}")
    return frame.reshape(*frame.shape[:-1], n_feature, length // n_feature).mean(axis=-1)


def fit_norm_stats(arrays: Iterable[np.ndarray]) -> NormStats:
    lo = np.full(N_CHANNELS, np.inf)
    hi = np.full(N_CHANNELS, -np.inf)
    seen = False
    for a in arrays:
        a = np.asarray(a)
        axes = tuple(i for i in range(a.ndim) if i != a.ndim - 2)
        lo = np.minimum(lo, a.min(axis=axes))
        hi = np.maximum(hi, a.max(axis=axes))
        seen = True
    if not seen:
        raise MissingDataError("need at least one recording to fit normalization")
    return NormStats(lo, hi)


def normalize(recordings: Sequence[RawRecording]) -> tuple[list[np.ndarray], NormStats]:
    """Global per-channel min-max scaling over all given recordings."""
    if not recordings:
        raise MissingDataError("need at least one recording to normalize")
    stats = fit_norm_stats(r.snapshots for r in recordings)
    return [stats.apply(r.snapshots).astype(np.float32) for r in recordings], stats


def compute_hi(n: int, fpt_index: int = 0, mode: str = "piecewise") -> np.ndarray:
    if n < 2:
        raise InsufficientDataError(f"HI schedule needs n >= 2, got {n}")
    t = np.arange(n, dtype=np.float64)
    if mode == "linear":
        return 1.0 - t / (n - 1)
    if mode != "piecewise":
        raise ConfigError(f"unknown HI mode {mode!r}")
    if not 0 <= fpt_index < n - 1:
        raise ScheduleError(f"piecewise HI needs 0 <= fpt_index < n-1, got {fpt_index} for n={n}")
    z = 1.0 - (t - fpt_index) / (n - 1 - fpt_index)
    z[: fpt_index + 1] = 1.0
    z[-1] = 0.0
    return z


def quantize_hi(hi: float) -> int:
    if not 0.0 <= hi <= 1.0:
        raise RangeError(f"HI value {hi} outside [0, 1]")
    return min(int(np.floor(hi * N_CLASSES)), N_CLASSES - 1)


def quantize_hi_array(hi: np.ndarray) -> np.ndarray:
    hi = np.asarray(hi, dtype=np.float64)
    if hi.size and (hi.min() < 0.0 or hi.max() > 1.0):
        raise RangeError("HI values outside [0, 1]")
    return np.minimum(np.floor(hi * N_CLASSES), N_CLASSES - 1).astype(np.int64)


def build_lifecycle(
    recording: RawRecording,
    fpt_index: int,
    stats: NormStats,
    n_feature: int = 512,
    hi_mode: str = "piecewise",
    clip: bool = False,
) -> BearingLifecycle:
    """Scale, pool and label one recording."""
    scaled = stats.apply(recording.snapshots, clip=clip)
    series = pool_features(scaled, n_feature)
    hi = compute_hi(len(recording), fpt_index, hi_mode)
    return BearingLifecycle(
        bearing_id=recording.bearing_id,
        series=series,
        fpt_index=fpt_index,
        hi=hi,
        hi_class=quantize_hi_array(hi),
        norm_stats=stats,
        provenance={"source": recording.source, "hi_mode": hi_mode},
    )


# ---------------------------------------------------------------------------
# synthetic run-to-failure data


def synthesize_lifecycle(spec: SyntheticSpec, n_feature: int = 512, bearing_id: str | None = None) -> BearingLifecycle:
    """Gaussian vibration with amplitude growth after the FPT, in raw units."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.n, dtype=np.float64)
    span = spec.n - 1 - spec.fpt_index
    amp = np.where(t > spec.fpt_index, np.clip((t - spec.fpt_index) / span, 0.0, 1.0), 0.0) ** spec.growth_exponent
    xi = rng.standard_normal((spec.n, N_CHANNELS, n_feature))
    base = np.asarray(spec.base_mean)[None, :, None]
    series = base + spec.noise_scale * xi * (1.0 + amp)[:, None, None]
    hi = compute_hi(spec.n, spec.fpt_index, "piecewise")
    return BearingLifecycle(
        bearing_id=bearing_id or f"synthetic_{spec.seed}",
        series=series,
        fpt_index=spec.fpt_index,
        hi=hi,
        hi_class=quantize_hi_array(hi),
        norm_stats=None,
        synthetic=True,
        provenance={"synthetic_spec": asdict(spec)},
    )


def normalize_lifecycles(lifecycles: Sequence[BearingLifecycle], stats: NormStats | None = None) -> tuple[list[BearingLifecycle], NormStats]:
    """Scale pooled lifecycles with shared stats (fitted on them unless given)."""
    if stats is None:
        stats = fit_norm_stats(lc.raw_series() for lc in lifecycles)
        return [lc.rescaled(stats) for lc in lifecycles], stats
    return [lc.rescaled(stats, clip=True) for lc in lifecycles], stats


def synthetic_corpus(specs: Sequence[SyntheticSpec], n_feature: int = 512) -> list[BearingLifecycle]:
    raw = [synthesize_lifecycle(s, n_feature, bearing_id=f"synthetic_{i}") for i, s in enumerate(specs)]
    out, _ = normalize_lifecycles(raw)
    return out


def toy_corpus(
    count: int = 8,
    n: int = 200,
    fpt_index: int = 80,
    n_feature: int = 512,
    noise_scale: float = 0.05,
    seed: int = 0,
) -> list[BearingLifecycle]:
    """Small corpus of bearings with distinct healthy baselines.

    Baselines are spread evenly so that the history window identifies the
    bearing; only the post-FPT noise growth carries the degradation.
    """
    levels = np.linspace(-0.6, 0.6, count)
    specs = [
        SyntheticSpec(
            n=n,
            fpt_index=fpt_index,
            base_mean=(levels[i], -0.5 * levels[i]),
            noise_scale=noise_scale,
            growth_exponent=1.5,
            seed=seed * 1000 + i,
        )
        for i in range(count)
    ]
    return synthetic_corpus(specs, n_feature)


# ---------------------------------------------------------------------------
# windows


def build_windows(lifecycle: BearingLifecycle, k: int) -> list[WindowSample]:
    n = len(lifecycle)
    if k < 1:
        raise ConfigError(f"window size k must be >= 1, got {k}")
    if n <= k:
        raise InsufficientDataError(f"{lifecycle.bearing_id}: n={n} leaves no labelled window for k={k}")
    s = lifecycle.series
    return [
        WindowSample(x=s[t], x2=s[t - k : t], hi=float(lifecycle.hi[t]), hi_class=int(lifecycle.hi_class[t]))
        for t in range(k, n)
    ]


class WindowSet:
    """Index over the windows of several lifecycles, materialized per batch.

    Window ``i`` refers to lifecycle ``lc_idx[i]`` at labelled position
    ``pos[i]``; its history is ``series[pos-k:pos]``.
    """

    def __init__(self, lifecycles: Sequence[BearingLifecycle], k: int, index: np.ndarray | None = None):
        if not lifecycles:
            raise MissingDataError("no lifecycles to window")
        self.lifecycles = list(lifecycles)
        self.k = k
        if index is None:
            parts = []
            for j, lc in enumerate(self.lifecycles):
                n = len(lc)
                if n <= k:
                    raise InsufficientDataError(f"{lc.bearing_id}: n={n} leaves no labelled window for k={k}")
                pos = np.arange(k, n)
                parts.append(np.stack([np.full_like(pos, j), pos], axis=1))
            index = np.concatenate(parts)
        self.index = np.asarray(index, dtype=np.int64)

    def __len__(self):
        return len(self.index)

    @property
    def n_feature(self) -> int:
        return self.lifecycles[0].n_feature

    @property
    def lc_idx(self) -> np.ndarray:
        return self.index[:, 0]

    @property
    def pos(self) -> np.ndarray:
        return self.index[:, 1]

    def subset(self, rows: np.ndarray) -> "WindowSet":
        return WindowSet(self.lifecycles, self.k, self.index[np.asarray(rows)])

    def batch(self, rows=None, histories: Sequence[np.ndarray] | None = None):
        """Return ``(x, x2, hi, hi_class)`` arrays for the selected windows.

        ``histories`` optionally replaces each lifecycle's series as the
        source of the history block (used for self-rollout training).
        """
        idx = self.index if rows is None else self.index[np.asarray(rows)]
        k = self.k
        x = np.stack([self.lifecycles[j].series[t] for j, t in idx])
        src = histories if histories is not None else [lc.series for lc in self.lifecycles]
        x2 = np.stack([src[j][t - k : t] for j, t in idx])
        hi = np.array([self.lifecycles[j].hi[t] for j, t in idx])
        cls = np.array([self.lifecycles[j].hi_class[t] for j, t in idx], dtype=np.int64)
        return x.astype(np.float32), x2.astype(np.float32), hi, cls

    def samples(self) -> list[WindowSample]:
        x, x2, hi, cls = self.batch()
        return [WindowSample(x[i], x2[i], float(hi[i]), int(cls[i])) for i in range(len(self))]

    def fingerprints(self) -> set[str]:
        return {hashlib.sha1(self.lifecycles[j].series[t].tobytes()).hexdigest() for j, t in self.index}


def dataset_fingerprint(lifecycles: Sequence[BearingLifecycle]) -> str:
    h = hashlib.sha256()
    for lc in lifecycles:
        h.update(lc.bearing_id.encode())
        h.update(np.ascontiguousarray(lc.series).tobytes())
        h.update(lc.hi.tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# container

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_dataset(path: str | Path, lifecycles: Sequence[BearingLifecycle], provenance: dict | None = None) -> str:
    """Write lifecycles to a self-describing zip container, return its sha256.

    Entries carry a fixed timestamp so identical content gives identical bytes;
    the file is readable with ``np.load``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "provenance": provenance or {},
        "lifecycles": [
            {
                "bearing_id": lc.bearing_id,
                "fpt_index": int(lc.fpt_index),
                "n": len(lc),
                "n_feature": lc.n_feature,
                "norm_stats": None if lc.norm_stats is None else lc.norm_stats.to_dict(),
                "synthetic": bool(lc.synthetic),
                "provenance": lc.provenance,
            }
            for lc in lifecycles
        ],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for i, lc in enumerate(lifecycles):
            put(f"series_{i}.npy", _npy_bytes(lc.series))
            put(f"hi_{i}.npy", _npy_bytes(lc.hi))
            put(f"hi_class_{i}.npy", _npy_bytes(lc.hi_class))
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_dataset(path: str | Path) -> tuple[list[BearingLifecycle], dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"dataset container not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported schema_version {meta.get('schema_version')!r}")

        def arr(name):
            return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)

        lifecycles = []
        for i, m in enumerate(meta["lifecycles"]):
            ns = m["norm_stats"]
            lifecycles.append(
                BearingLifecycle(
                    bearing_id=m["bearing_id"],
                    series=arr(f"series_{i}.npy"),
                    fpt_index=m["fpt_index"],
                    hi=arr(f"hi_{i}.npy"),
                    hi_class=arr(f"hi_class_{i}.npy"),
                    norm_stats=None if ns is None else NormStats.from_dict(ns),
                    synthetic=m["synthetic"],
                    provenance=m["provenance"],
                )
            )
    return lifecycles, meta
