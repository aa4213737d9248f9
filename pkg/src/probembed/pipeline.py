"""End-to-end helpers shared by the CLI and the behavioural test-suite.

The toy preset is the configuration the behavioural checks run on: 2000
training studies over 10 classes with 30% ambiguous reports, 20 epochs, and
the same encoders and step budget for both objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .evalkit import (
    K_VALUES,
    RetrievalReport,
    RobustnessReport,
    distance_matrix,
    evaluate_retrieval,
    retrieval_report,
    robustness_report,
    rsum,
)
from .objective import LossBreakdown, LossConfig
from .store import EmbeddingStore
from .synth_data import (
    PERTURB_KINDS,
    SynthConfig,
    SynthStudy,
    generate_dataset,
    perturb_images,
)
from .trainer import Model, TrainConfig, encode_corpus, encode_images, encode_texts, fit

TOY_N_TRAIN = 2000
TOY_N_TEST = 500
TOY_CLASSES = 10
TOY_AMBIGUITY = 0.3
TOY_DATA_SEED = 7
SEVERITIES = (0, 1, 2, 3, 4, 5)


def toy_train_config(seed: int = 0, objective: str = "probabilistic") -> TrainConfig:
    # Small batches give enough optimizer steps in 20 epochs for the variance
    # heads to separate; a low initial variance keeps the text side in the
    # regime where its variance actually moves the distance.
    return TrainConfig(
        epochs=20,
        batch_size=32,
        base_lr=1e-2,
        seed=seed,
        objective=objective,
        logvar_bias_init=-4.0,
    )


def toy_loss_config() -> LossConfig:
    # A strong view/view term pins the image variance down so that the
    # text variance carries the pair-level uncertainty.
    return LossConfig(lambda_I=3.0)


def toy_datasets(
    seed: int = TOY_DATA_SEED, cfg: SynthConfig = SynthConfig()
) -> tuple[list[SynthStudy], list[SynthStudy]]:
    """Train and held-out splits drawn from the same synthetic world."""
    train = generate_dataset(TOY_N_TRAIN, TOY_CLASSES, TOY_AMBIGUITY, seed, cfg=cfg)
    test = generate_dataset(TOY_N_TEST, TOY_CLASSES, TOY_AMBIGUITY, seed, split=1, cfg=cfg)
    return train, test


@dataclass
class ToyRun:
    model: Model
    history: list[LossBreakdown]
    images: EmbeddingStore
    texts: EmbeddingStore
    i2t: RetrievalReport
    t2i: RetrievalReport

    @property
    def rsum(self) -> float:
        return rsum(self.i2t, self.t2i)


def train_and_evaluate(
    train: Sequence[SynthStudy],
    test: Sequence[SynthStudy],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    metric: str | None = None,
) -> ToyRun:
    """Fit on ``train`` and score retrieval on ``test``.

    The default metric follows the objective: CSD for the probabilistic
    model, cosine for the deterministic baseline.
    """
    if metric is None:
        metric = "csd" if cfg.objective == "probabilistic" else "cosine"
    model, history = fit(train, cfg, loss_cfg)
    images, texts = encode_corpus(model, test)
    i2t, t2i = evaluate_retrieval(images, texts, metric)
    return ToyRun(model, history, images, texts, i2t, t2i)


def run_toy(seed: int = 0, objective: str = "probabilistic") -> ToyRun:
    train, test = toy_datasets()
    return train_and_evaluate(train, test, toy_train_config(seed, objective), toy_loss_config())


def run_robustness(
    model: Model,
    dataset: Sequence[SynthStudy],
    kinds: Iterable[str] = PERTURB_KINDS,
    severities: Iterable[int] = SEVERITIES,
    seed: int = 0,
    ks: Sequence[int] = K_VALUES,
    metric: str = "csd",
) -> RobustnessReport:
    """Perturb every view-1 image, re-encode, and compare R@K against clean."""
    views = np.stack([s.view1 for s in dataset])
    text_mu, text_lv = encode_texts(model, np.stack([s.sect1 for s in dataset]))
    clean = encode_images(model, views)
    perturbed = {}
    for kind in kinds:
        for severity in severities:
            perturbed[(kind, int(severity))] = encode_images(model, perturb_images(views, kind, int(severity), seed))
    return robustness_report(text_mu, text_lv, clean, perturbed, ks, metric)


def random_retrieval(
    n: int, dim: int, seed: int, ks: Sequence[int] = K_VALUES
) -> tuple[RetrievalReport, RetrievalReport]:
    """Retrieval between two independent sets of standard-normal embeddings.

    Means are N(0, I) and every variance is 1, so each gallery item is an
    exchangeable guess and R@K should sit at ``100 K / n``.
    """
    rng = np.random.default_rng([seed, 0xA11CE])
    img_mu = rng.standard_normal((n, dim))
    txt_mu = rng.standard_normal((n, dim))
    zeros = np.zeros((n, dim))
    D = distance_matrix(img_mu, zeros, txt_mu, zeros)
    gt = np.arange(n)
    return retrieval_report(D, gt, "i2t", ks), retrieval_report(D.T, gt, "t2i", ks)
