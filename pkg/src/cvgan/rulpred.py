"""RUL predictors (SCNN, GRU) and the generated-data augmentation experiment.

Both predictors read a window of ``k`` history snapshots plus the current
snapshot and regress the current HI, bounded to [0, 1] by a sigmoid head.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import BearingLifecycle, WindowSet, fit_norm_stats
from .errors import ConfigError, ContractError, InsufficientDataError, NumericalError
from .metrics import rul_scores
from .trainer import PAPER_SEEDS, run_seeds

logger = logging.getLogger(__name__)

KINDS = ("SCNN", "GRU")


@dataclass
class PredictorSpec:
    kind: str = "SCNN"
    k: int = 15
    n_feature: int = 512
    hidden: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown predictor kind {self.kind!r}; expected one of {KINDS}")


class SCNN(nn.Module):
    def __init__(self, spec: PredictorSpec):
        super().__init__()
        layers, c = [], 2 * (spec.k + 1)
        for cout in (16, 32, 64):
            layers += [nn.Conv1d(c, cout, 3, stride=2, padding=1), nn.BatchNorm1d(cout), nn.LeakyReLU(0.2)]
            c = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, 1)

    def forward(self, seq):  # (B, T, 2, F)
        b = seq.shape[0]
        h = self.features(seq.reshape(b, -1, seq.shape[-1])).mean(dim=2)
        return torch.sigmoid(self.head(h)).squeeze(1)


class GRURegressor(nn.Module):
    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.gru = nn.GRU(2 * spec.n_feature, spec.hidden, num_layers=2, batch_first=True)
        self.head = nn.Linear(spec.hidden, 1)

    def forward(self, seq):  # (B, T, 2, F), any T
        out, _ = self.gru(seq.flatten(2))
        return torch.sigmoid(self.head(out[:, -1])).squeeze(1)


def build_predictor(spec: PredictorSpec, seed: int | None = None) -> nn.Module:
    cls = SCNN if spec.kind == "SCNN" else GRURegressor
    if seed is None:
        return cls(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(spec)


@dataclass
class PredictorPlan:
    lr: float = 8e-4
    batch_size: int = 2048
    epochs: int = 150
    early_stop_patience: int = 20
    val_fraction: float = 0.1
    seed: int = 15
    weight_decay: float = 0.01


def window_arrays(windows: WindowSet, rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Stack history and current snapshot into ``(N, k+1, 2, F)`` plus HI targets."""
    x, x2, hi, _ = windows.batch(rows)
    return np.concatenate([x2, x[:, None]], axis=1), hi.astype(np.float32)


@torch.no_grad()
def predict(predictor: nn.Module, seq: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    predictor.eval()
    outs = [predictor(torch.from_numpy(np.ascontiguousarray(seq[s : s + batch_size], dtype=np.float32))).numpy()
            for s in range(0, len(seq), batch_size)]
    return np.concatenate(outs).astype(np.float64) if outs else np.empty(0)


def train_predictor(predictor: nn.Module, train_windows, plan: PredictorPlan):
    """MSE regression to HI with AdamW and early stopping on validation MSE.

    ``train_windows`` is a WindowSet or a ``(seq, targets)`` pair. Returns the
    predictor with its best weights and the per-epoch trace.
    """
    seq, y = window_arrays(train_windows) if isinstance(train_windows, WindowSet) else train_windows
    if len(seq) == 0:
        raise InsufficientDataError("no training windows for the predictor")
    torch.manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(len(seq))
    n_val = max(1, int(round(len(seq) * plan.val_fraction))) if len(seq) > 1 else 0
    val_rows, train_rows = perm[:n_val], perm[n_val:]
    if len(train_rows) == 0:
        train_rows = val_rows
    seq_t, y_t = torch.from_numpy(np.ascontiguousarray(seq, dtype=np.float32)), torch.from_numpy(y)
    opt = torch.optim.AdamW(predictor.parameters(), lr=plan.lr, weight_decay=plan.weight_decay)
    best, best_epoch, best_state = math.inf, -1, copy.deepcopy(predictor.state_dict())
    trace = []
    for epoch in range(plan.epochs):
        predictor.train()
        order = rng.permutation(train_rows)
        total = 0.0
        for start in range(0, len(order), plan.batch_size):
            rows = order[start : start + plan.batch_size]
            if len(rows) < 2:
                continue
            loss = nn.functional.mse_loss(predictor(seq_t[rows]), y_t[rows])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite predictor loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
        val = float(np.mean((predict(predictor, seq[val_rows]) - y[val_rows]) ** 2))
        trace.append({"epoch": epoch, "train_mse": total / max(len(train_rows), 1), "val_mse": val})
        if val < best:
            best, best_epoch, best_state = val, epoch, copy.deepcopy(predictor.state_dict())
        elif epoch - best_epoch >= plan.early_stop_patience:
            break
    predictor.load_state_dict(best_state)
    predictor.eval()
    return predictor, trace


@dataclass
class ExperimentPlan:
    test_bearing: str
    train_bearings: list | None = None  # default: every other bearing
    predictor: str = "SCNN"
    seeds: tuple = PAPER_SEEDS
    k: int = 15
    predictor_plan: PredictorPlan = field(default_factory=PredictorPlan)
    augmentation: str = "none"  # label of the generated set, "none" disables it


def _pooled_rows(lifecycles: Sequence[BearingLifecycle], k: int):
    ws = WindowSet(lifecycles, k)
    seq, y = window_arrays(ws)
    return ws, seq, y


def augmentation_experiment(
    plan: ExperimentPlan,
    lifecycles: Sequence[BearingLifecycle],
    generated: Sequence[BearingLifecycle] = (),
) -> dict:
    """Train on real (+ generated) bearings, test on the held-out one.

    All series are rescaled with min/max statistics fitted on the training
    bearings only; the test bearing is clipped into that range.
    """
    by_id = {lc.bearing_id: lc for lc in lifecycles}
    if plan.test_bearing not in by_id:
        raise ConfigError(f"test bearing {plan.test_bearing!r} not among {sorted(by_id)}")
    train_ids = plan.train_bearings or [b for b in by_id if b != plan.test_bearing]
    if plan.test_bearing in train_ids:
        raise ContractError("test bearing listed among training bearings")
    if plan.augmentation != "none" and not generated:
        raise ConfigError(f"augmentation {plan.augmentation!r} requested but no generated lifecycles given")

    train_real = [by_id[b] for b in train_ids]
    stats = fit_norm_stats(lc.raw_series() for lc in train_real)
    train_lcs = [lc.rescaled(stats) for lc in train_real]
    if plan.augmentation != "none":
        train_lcs += [g.rescaled(stats, clip=True) for g in generated]
    test_lc = by_id[plan.test_bearing].rescaled(stats, clip=True)

    train_ws, seq, y = _pooled_rows(train_lcs, plan.k)
    test_ws, test_seq, test_y = _pooled_rows([test_lc], plan.k)
    leaked = train_ws.fingerprints() & test_ws.fingerprints()
    if leaked:
        raise ContractError(f"{len(leaked)} test-bearing windows found in the training set")

    spec = PredictorSpec(plan.predictor, plan.k, train_ws.n_feature)

    def task(seed: int) -> dict:
        pplan = PredictorPlan(**(asdict(plan.predictor_plan) | {"seed": seed}))
        model, _ = train_predictor(build_predictor(spec, seed), (seq, y), pplan)
        rmse, mae, score = rul_scores(predict(model, test_seq), test_y)
        return {"mae": mae, "rmse": rmse, "score": score}

    report = run_seeds(task, plan.seeds)
    return {
        "test_bearing": plan.test_bearing,
        "train_bearings": list(train_ids),
        "predictor": plan.predictor,
        "augmentation": plan.augmentation,
        "n_train_windows": len(train_ws),
        "n_real_train_windows": sum(len(lc) - plan.k for lc in train_real),
        "n_generated_lifecycles": len(generated) if plan.augmentation != "none" else 0,
        "n_test_windows": len(test_ws),
        "per_seed": {str(s): v for s, v in report.values.items()},
        "mean": report.mean,
        "failures": {str(s): v for s, v in report.failures.items()},
        "partial": report.partial,
    }
