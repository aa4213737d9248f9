from __future__ import annotations

import numpy as np
import pytest

from probembed.pipeline import (
    random_retrieval,
    run_robustness,
    toy_datasets,
    toy_loss_config,
    toy_train_config,
    train_and_evaluate,
)
from probembed.synth_data import SynthConfig
from probembed.trainer import TrainConfig


def test_random_retrieval_is_seeded_and_near_chance():
    a = random_retrieval(200, 8, seed=1, ks=(1, 10))
    b = random_retrieval(200, 8, seed=1, ks=(1, 10))
    assert a[0].recall_at == b[0].recall_at and a[1].recall_at == b[1].recall_at
    values = [random_retrieval(200, 8, seed=s, ks=(10,))[0].recall_at[10] for s in range(10)]
    sigma = 100 * np.sqrt(0.05 * 0.95 / (200 * 10))
    assert abs(np.mean(values) - 5.0) < 3 * sigma


def test_toy_presets():
    cfg = toy_train_config(3, "infonce")
    assert (cfg.seed, cfg.objective, cfg.epochs) == (3, "infonce", 20)
    assert toy_loss_config().lambda_I == 3.0
    train, test = toy_datasets(cfg=SynthConfig(height=3, width=3, text_dim=4, latent_dim=2))
    assert len(train) == 2000 and len(test) == 500
    assert train[0].id != test[0].id


@pytest.fixture(scope="module")
def small_run():
    synth = SynthConfig(height=4, width=4, text_dim=8, latent_dim=4)
    train, test = toy_datasets(cfg=synth)
    cfg = TrainConfig(epochs=2, batch_size=64, base_lr=1e-2, hidden_sizes=(16, 16), embedding_dim=8, seed=0)
    return train_and_evaluate(train[:400], test[:100], cfg, toy_loss_config()), test[:100]


def test_train_and_evaluate_reports(small_run):
    run, _ = small_run
    assert len(run.history) == 2
    assert 0.0 <= run.rsum <= 800.0
    assert set(run.i2t.recall_at) == {1, 5, 10, 100}


def test_run_robustness_grid(small_run):
    run, test = small_run
    report = run_robustness(run.model, test, kinds=("blur", "rotation"), severities=(0, 2), ks=(1, 5))
    assert len(report.entries) == 2 * 2 * 2
    for kind in ("blur", "rotation"):
        for K in (1, 5):
            assert report.ratio(kind, 0, K) in (1.0, None)
