import dataclasses
import math

import numpy as np
import pytest
import torch

from cvgan.dataset import WindowSet, toy_corpus
from cvgan.errors import ConfigError, ContractError
from cvgan.rulpred import (
    ExperimentPlan,
    GRURegressor,
    PredictorPlan,
    PredictorSpec,
    SCNN,
    augmentation_experiment,
    build_predictor,
    predict,
    train_predictor,
    window_arrays,
)

NF = 64


@pytest.fixture(scope="module")
def corpus():
    return toy_corpus(count=3, n=45, fpt_index=15, n_feature=NF, seed=5)


def quick(**kw):
    base = dict(epochs=2, batch_size=32, early_stop_patience=5, seed=15)
    base.update(kw)
    return PredictorPlan(**base)


def test_plan_defaults():
    p = PredictorPlan()
    assert (p.lr, p.batch_size, p.epochs, p.early_stop_patience) == (8e-4, 2048, 150, 20)


def test_scnn_output_range():
    net = build_predictor(PredictorSpec("SCNN", 15, NF), seed=0).eval()
    out = net(torch.rand(7, 16, 2, NF) * 4 - 2)
    assert out.shape == (7,) and torch.all((out >= 0) & (out <= 1))
    assert isinstance(net, SCNN)


@pytest.mark.parametrize("length", [15, 20])
def test_gru_any_length(length):
    net = build_predictor(PredictorSpec("GRU", 15, NF), seed=0).eval()
    assert isinstance(net, GRURegressor)
    out = net(torch.rand(4, length, 2, NF))
    assert out.shape == (4,) and torch.all((out >= 0) & (out <= 1))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        PredictorSpec("LSTM")


def test_window_arrays_shape(corpus):
    seq, y = window_arrays(WindowSet(corpus, 5))
    assert seq.shape == (3 * 40, 6, 2, NF) and y.shape == (120,)
    assert np.array_equal(seq[0, -1], corpus[0].series[5])


def test_smoke_and_determinism(corpus):
    ws = WindowSet(corpus, 5)
    spec = PredictorSpec("SCNN", 5, NF)
    _, a = train_predictor(build_predictor(spec, 1), ws, quick())
    _, b = train_predictor(build_predictor(spec, 1), ws, quick())
    assert len(a) == 2 and a == b
    assert all(math.isfinite(r["val_mse"]) and math.isfinite(r["train_mse"]) for r in a)


@pytest.mark.parametrize("kind", ["SCNN", "GRU"])
def test_constant_targets(kind, rng):
    seq = rng.random((200, 6, 2, NF), dtype=np.float32)
    y = np.full(200, 0.5, np.float32)
    model, trace = train_predictor(build_predictor(PredictorSpec(kind, 5, NF), 0), (seq, y), quick(epochs=30, lr=3e-3))
    assert trace[-1]["val_mse"] < 0.25  # constant-0 baseline: (0.5 - 0)^2
    assert np.mean((predict(model, seq) - 0.5) ** 2) < 0.25


def test_experiment_report(corpus):
    plan = ExperimentPlan("synthetic_2", predictor="SCNN", seeds=(15, 25), k=5, predictor_plan=quick())
    rep = augmentation_experiment(plan, corpus)
    assert rep["train_bearings"] == ["synthetic_0", "synthetic_1"]
    assert rep["n_train_windows"] == rep["n_real_train_windows"] == 80
    assert set(rep["per_seed"]) == {"15", "25"} and not rep["partial"]
    for v in rep["per_seed"].values():
        assert set(v) == {"mae", "rmse", "score"}
        assert v["mae"] <= v["rmse"] + 1e-12
    assert rep["mean"]["mae"] == pytest.approx(np.mean([v["mae"] for v in rep["per_seed"].values()]))


def test_augmentation_accounting(corpus):
    gen = toy_corpus(count=2, n=30, fpt_index=10, n_feature=NF, seed=77)
    gen = [dataclasses.replace(g, bearing_id=f"gen_{i}", synthetic=True) for i, g in enumerate(gen)]
    plan = ExperimentPlan("synthetic_2", seeds=(15,), k=5, predictor_plan=quick(epochs=1), augmentation="toy")
    rep = augmentation_experiment(plan, corpus, gen)
    assert rep["n_train_windows"] - rep["n_real_train_windows"] == sum(len(g) - 5 for g in gen)
    assert rep["n_generated_lifecycles"] == 2


def test_leakage_is_refused(corpus):
    copy = dataclasses.replace(corpus[2], bearing_id="copy_of_test", synthetic=True)
    plan = ExperimentPlan("synthetic_2", seeds=(15,), k=5, predictor_plan=quick(epochs=1), augmentation="leaky")
    with pytest.raises(ContractError):
        augmentation_experiment(plan, corpus, [copy])
    with pytest.raises(ContractError):
        augmentation_experiment(ExperimentPlan("synthetic_2", ["synthetic_0", "synthetic_2"], k=5), corpus)


def test_experiment_config_errors(corpus):
    with pytest.raises(ConfigError):
        augmentation_experiment(ExperimentPlan("nope", k=5), corpus)
    with pytest.raises(ConfigError):
        augmentation_experiment(ExperimentPlan("synthetic_2", k=5, augmentation="ckpt"), corpus)
