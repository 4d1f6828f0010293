"""Paired AR / NAR evaluation of a trained bundle against real lifecycles.

For every real lifecycle the NAR set conditions on its true histories, and
the AR set rolls the generator out along the same class sequence, starting
from an initial-generator history. Both use the same per-lifecycle noise
seed, so history-free variants produce the same draws in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .argen import HiSchedule, ar_generate, nar_generate
from .dataset import BearingLifecycle, WindowSet
from .metrics import FeatureExtractor, MetricReport, PcaProjector, evaluate_generation, fit_pca
from .nets import InitialGenerator, ModelBundle


@dataclass
class Evaluator:
    lifecycles: list
    k: int
    projectors: tuple
    extractor: FeatureExtractor | None = None
    predictor: object | None = None
    bandwidth: float = 1.0

    @classmethod
    def fit(cls, lifecycles: Sequence[BearingLifecycle], k: int, dims: int = 64, extractor=None, predictor=None):
        real = WindowSet(lifecycles, k).batch()[0]
        projectors = (fit_pca(real, 0, dims), fit_pca(real, 1, dims))
        return cls(list(lifecycles), k, projectors, extractor, predictor)

    def real_signals(self) -> np.ndarray:
        return WindowSet(self.lifecycles, self.k).batch()[0]

    def lifecycle_seed(self, seed: int, i: int) -> int:
        return seed * 1000 + i

    def nar_set(self, model: ModelBundle, seed: int) -> np.ndarray:
        return np.concatenate(
            [nar_generate(model, WindowSet([lc], self.k), self.lifecycle_seed(seed, i)) for i, lc in enumerate(self.lifecycles)]
        )

    def ar_set(self, model: ModelBundle, initial: InitialGenerator | None, seed: int, real_start: bool = False) -> np.ndarray:
        parts = []
        for i, lc in enumerate(self.lifecycles):
            schedule = HiSchedule.from_classes(lc.hi_class[self.k :], lc.hi[self.k :])
            start = lc.series[: self.k] if real_start or initial is None else None
            parts.append(ar_generate(model, initial, schedule, self.lifecycle_seed(seed, i), initial_history=start).series)
        return np.concatenate(parts)

    def _predictions(self, gen: np.ndarray, histories: np.ndarray):
        if self.predictor is None:
            return None, None
        from .rulpred import predict

        seq = np.concatenate([histories, gen[:, None]], axis=1)
        labels = np.concatenate([lc.hi[self.k :] for lc in self.lifecycles])
        return predict(self.predictor, seq), labels

    def report(self, gen: np.ndarray, histories: np.ndarray | None = None) -> MetricReport:
        real_ws = WindowSet(self.lifecycles, self.k)
        real, x2, _, _ = real_ws.batch()
        mask = np.concatenate([lc.hi[self.k :] >= 1.0 for lc in self.lifecycles])
        preds, labels = self._predictions(gen, x2 if histories is None else histories)
        return evaluate_generation(
            gen,
            real,
            self.projectors,
            self.extractor,
            normal_phase_mask=mask,
            predictions=preds,
            labels=labels,
            mv_window=self.k,
            bandwidth=self.bandwidth,
        )

    def evaluate(self, model: ModelBundle, initial: InitialGenerator | None, seed: int) -> dict[str, MetricReport]:
        nar = self.nar_set(model, seed)
        ar = self.ar_set(model, initial, seed)
        return {"NAR": self.report(nar), "AR": self.report(ar, self._ar_histories(ar))}

    def _ar_histories(self, ar: np.ndarray) -> np.ndarray:
        """Histories seen by a predictor reading the generated series itself."""
        out, offset = [], 0
        for lc in self.lifecycles:
            n = len(lc) - self.k
            seg = ar[offset : offset + n]
            full = np.concatenate([lc.series[: self.k], seg])  # real rows pad the first windows
            out.append(np.stack([full[t : t + self.k] for t in range(n)]))
            offset += n
        return np.concatenate(out)
