"""Autoregressive lifecycle rollout and non-autoregressive generation.

During a rollout only the generator runs. Each step draws a fresh latent
vector, generates the next snapshot from the HI class planned for that step
and the last ``k`` generated snapshots, then pushes it into a FIFO history.

Noise is counter-based: the latent for step ``t`` under ``seed`` comes from
its own ``default_rng([seed, stream, t])`` draw, so a shorter rollout
reproduces the prefix of a longer one and NAR generation can reuse the very
same draws.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .dataset import BearingLifecycle, WindowSet, compute_hi, quantize_hi_array
from .errors import ContractError, NumericalError, ScheduleError, ShapeError
from .nets import Condition, InitialGenerator, ModelBundle

logger = logging.getLogger(__name__)

NOISE_STREAM = 1
INIT_STREAM = 2
HEALTHY_CLASS = 31


@dataclass
class HiSchedule:
    length: int
    fpt_step: int
    classes: np.ndarray
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if len(self.classes) != self.length or self.length < 1:
            raise ScheduleError(f"schedule has {len(self.classes)} classes for length {self.length}")
        if np.any(self.classes[: self.fpt_step] != HEALTHY_CLASS):
            raise ScheduleError("classes before fpt_step must be healthy (31)")
        if np.any(np.diff(self.classes) > 0):
            raise ScheduleError("classes must be non-increasing")
        if self.classes[-1] != 0:
            raise ScheduleError("schedule must end in class 0")

    @classmethod
    def from_classes(cls, classes, hi=None) -> "HiSchedule":
        """Wrap an explicit class sequence, e.g. a real bearing's labels."""
        classes = np.asarray(classes, dtype=np.int64)
        fpt = int(np.argmax(classes != HEALTHY_CLASS)) if np.any(classes != HEALTHY_CLASS) else len(classes)
        return cls(len(classes), fpt, classes, None if hi is None else np.asarray(hi, dtype=np.float64))


def plan_hi_schedule(length: int = 1000, fpt_step: int = 300) -> HiSchedule:
    if not 0 < fpt_step < length:
        raise ScheduleError(f"need 0 < fpt_step < length, got fpt_step={fpt_step}, length={length}")
    hi = compute_hi(length, fpt_step - 1, "piecewise")
    return HiSchedule(length, fpt_step, quantize_hi_array(hi), hi)


class HistoryBuffer:
    """Fixed-length FIFO of the last ``k`` snapshots, oldest first."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 3 or rows.shape[1] != 2:
            raise ShapeError(f"history rows must be (k, 2, n_feature), got {rows.shape}")
        self.k = rows.shape[0]
        self._rows = deque(rows, maxlen=self.k)
        self.discarded = 0

    def __len__(self):
        return len(self._rows)

    @property
    def rows(self) -> np.ndarray:
        return np.stack(self._rows)

    def push(self, x: np.ndarray):
        self._rows.append(np.asarray(x, dtype=np.float32))  # maxlen drops the oldest row
        self.discarded += 1


@dataclass
class GeneratedLifecycle:
    series: np.ndarray  # (length, 2, n_feature)
    schedule: HiSchedule
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.series) != self.schedule.length:
            raise ShapeError(f"series length {len(self.series)} != schedule length {self.schedule.length}")

    def to_lifecycle(self, bearing_id: str = "generated", norm_stats=None) -> BearingLifecycle:
        hi = self.schedule.hi
        if hi is None:
            hi = (self.schedule.classes + 0.5) / 32.0
            hi[self.schedule.classes == HEALTHY_CLASS] = 1.0
            hi[-1] = 0.0
        return BearingLifecycle(
            bearing_id=bearing_id,
            series=self.series,
            fpt_index=max(self.schedule.fpt_step - 1, 0),
            hi=hi,
            hi_class=self.schedule.classes,
            norm_stats=norm_stats,
            synthetic=True,
            provenance=dict(self.provenance),
        )


def step_noise(seed: int, t: int, dim: int, stream: int = NOISE_STREAM) -> np.ndarray:
    return np.random.default_rng([seed, stream, t]).standard_normal(dim).astype(np.float32)


@torch.no_grad()
def sample_initial(initial_generator: InitialGenerator, n: int, seed: int) -> np.ndarray:
    """``n`` windows of shape ``(k, 2, n_feature)`` from the initial generator."""
    if not getattr(initial_generator, "trained", False):
        raise ContractError("initial generator has not been trained")
    initial_generator.eval()
    z = np.stack([step_noise(seed, i, initial_generator.cfg.latent_dim, INIT_STREAM) for i in range(n)])
    out = initial_generator.decode(torch.from_numpy(z)).numpy()
    if not np.all(np.isfinite(out)) or out.min() < 0.0 or out.max() > 1.0:
        raise ContractError("initial generator produced values outside [0, 1]")
    return out


def init_history(initial_generator: InitialGenerator, seed: int) -> HistoryBuffer:
    return HistoryBuffer(sample_initial(initial_generator, 1, seed)[0])


def _cond(model: ModelBundle, cls: torch.Tensor, history: torch.Tensor) -> Condition | None:
    mode = model.cfg.cond
    if mode == "none":
        return None
    if mode == "class":
        return Condition(cls)
    return Condition(cls, history)


@torch.no_grad()
def ar_generate(
    generator: ModelBundle,
    initial_generator: InitialGenerator | None,
    schedule: HiSchedule,
    seed: int,
    initial_history: np.ndarray | None = None,
    on_step: Callable[[int, HistoryBuffer], None] | None = None,
) -> GeneratedLifecycle:
    """Roll out ``schedule.length`` snapshots from the generator alone.

    ``initial_history`` bypasses the initial generator (used when a real
    window seeds the rollout). ``on_step(t, buffer)`` sees the buffer right
    after snapshot ``t`` was pushed.
    """
    generator.eval()
    if initial_history is not None:
        buffer = HistoryBuffer(initial_history)
    else:
        if initial_generator is None:
            raise ContractError("need an initial generator or an initial history")
        buffer = init_history(initial_generator, seed)
    k, nf, latent = generator.cfg.k, generator.cfg.n_feature, generator.cfg.latent_dim
    if buffer.k != k or buffer.rows.shape[-1] != nf:
        raise ShapeError(f"history buffer {buffer.rows.shape} does not match generator (k={k}, n_feature={nf})")
    series = np.empty((schedule.length, 2, nf), dtype=np.float32)
    for t in range(schedule.length):
        z = torch.from_numpy(step_noise(seed, t, latent))[None]
        cls = torch.tensor([int(schedule.classes[t])])
        hist = torch.from_numpy(buffer.rows)[None]
        x = generator.generate(z, _cond(generator, cls, hist))[0].numpy()
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite generator output at step {t}")
        series[t] = x
        buffer.push(x)
        if on_step is not None:
            on_step(t, buffer)
    return GeneratedLifecycle(
        series,
        schedule,
        {"variant": generator.variant, "seed": seed, "seed_lineage": list(generator.seed_lineage), "mode": "ar"},
    )


@torch.no_grad()
def nar_generate(generator: ModelBundle, windows: WindowSet, seed: int, batch_size: int = 256) -> np.ndarray:
    """One signal per window, conditioned on the real history and real class.

    Window ``j`` uses the same latent draw as step ``j`` of an AR rollout with
    the same seed.
    """
    generator.eval()
    latent = generator.cfg.latent_dim
    out = np.empty((len(windows), 2, generator.cfg.n_feature), dtype=np.float32)
    for start in range(0, len(windows), batch_size):
        rows = np.arange(start, min(start + batch_size, len(windows)))
        _, x2, _, cls = windows.batch(rows)
        z = torch.from_numpy(np.stack([step_noise(seed, int(j), latent) for j in rows]))
        x = generator.generate(z, _cond(generator, torch.from_numpy(cls), torch.from_numpy(x2))).numpy()
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite generator output in windows {rows[0]}..{rows[-1]}")
        out[rows] = x
    return out


def rms_profile(series) -> np.ndarray:
    """Per-step, per-channel RMS, shape ``(length, 2)``."""
    if isinstance(series, (GeneratedLifecycle, BearingLifecycle)):
        series = series.series
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ShapeError("empty series")
    return np.sqrt(np.mean(series**2, axis=-1))
