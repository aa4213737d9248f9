"""Retrieval, zero-shot, calibration, selective-prediction and robustness metrics.

Ties in every ranking are broken toward the lower index so results do not
depend on the machine or the sort implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .prob_core import MatchScalars, pairwise_csd_arrays
from .store import EmbeddingStore

K_VALUES = (1, 5, 10, 100)
DIRECTIONS = ("i2t", "t2i")
CONFIDENCE_SOURCES = ("match_prob", "neg_total_variance", "random")
METRICS = ("csd", "cosine")


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Distances and ranks
# ---------------------------------------------------------------------------


def distance_matrix(q_mu, q_lv, g_mu, g_lv, metric: str = "csd", chunk: int = 256) -> np.ndarray:
    """Query-by-gallery distances, computed in row blocks to bound memory."""
    if metric not in METRICS:
        raise EvalError(f"unknown metric {metric!r}")
    q_mu, q_lv = np.asarray(q_mu, np.float64), np.asarray(q_lv, np.float64)
    g_mu, g_lv = np.asarray(g_mu, np.float64), np.asarray(g_lv, np.float64)
    if metric == "cosine":
        qn = q_mu / np.linalg.norm(q_mu, axis=1, keepdims=True)
        gn = g_mu / np.linalg.norm(g_mu, axis=1, keepdims=True)
        return 1.0 - qn @ gn.T
    out = np.empty((q_mu.shape[0], g_mu.shape[0]))
    for start in range(0, q_mu.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = pairwise_csd_arrays(q_mu[sl], q_lv[sl], g_mu, g_lv)
    return out


def store_distances(query: EmbeddingStore, gallery: EmbeddingStore, metric: str = "csd") -> np.ndarray:
    q_mu, q_lv = query.as_float64()
    g_mu, g_lv = gallery.as_float64()
    return distance_matrix(q_mu, q_lv, g_mu, g_lv, metric)


def ground_truth(query_ids: Sequence[str], gallery_ids: Sequence[str]) -> np.ndarray:
    index = {ident: j for j, ident in enumerate(gallery_ids)}
    try:
        return np.array([index[i] for i in query_ids], dtype=np.int64)
    except KeyError as exc:
        raise EvalError(f"query id {exc.args[0]!r} has no match in the gallery") from exc


def gt_ranks(D, gt) -> np.ndarray:
    """0-based rank of each query's ground-truth item (lower index wins ties)."""
    D = np.asarray(D, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    M, N = D.shape
    if gt.shape != (M,):
        raise EvalError(f"need one ground-truth index per query, got {gt.shape} for {M} queries")
    if M and (gt.min() < 0 or gt.max() >= N):
        raise EvalError("ground-truth index out of range")
    d_gt = D[np.arange(M), gt][:, None]
    before = np.arange(N)[None, :] < gt[:, None]
    return np.sum(D < d_gt, axis=1) + np.sum((D == d_gt) & before, axis=1)


def recall_at_k(D, gt, K: int) -> float:
    D = np.asarray(D, dtype=np.float64)
    if not 1 <= K <= D.shape[1]:
        raise EvalError(f"K={K} must lie in [1, {D.shape[1]}]")
    return 100.0 * float(np.mean(gt_ranks(D, gt) < K))


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]

    @property
    def rsum_contribution(self) -> float:
        return math.fsum(self.recall_at.values())


def retrieval_report(D, gt, direction: str, ks: Iterable[int] = K_VALUES) -> RetrievalReport:
    if direction not in DIRECTIONS:
        raise EvalError(f"unknown direction {direction!r}")
    ranks = gt_ranks(D, gt)
    N = np.asarray(D).shape[1]
    out = {}
    for K in ks:
        if not 1 <= K <= N:
            raise EvalError(f"K={K} must lie in [1, {N}]")
        out[int(K)] = 100.0 * float(np.mean(ranks < K))
    return RetrievalReport(direction, out)


def rsum(i2t: RetrievalReport, t2i: RetrievalReport) -> float:
    values = []
    for report in (i2t, t2i):
        missing = [K for K in K_VALUES if K not in report.recall_at]
        if missing:
            raise EvalError(f"{report.direction} report is missing K={missing}")
        values.extend(report.recall_at[K] for K in K_VALUES)
    return math.fsum(values)


def evaluate_retrieval(
    images: EmbeddingStore, texts: EmbeddingStore, metric: str = "csd", ks: Iterable[int] = K_VALUES
) -> tuple[RetrievalReport, RetrievalReport]:
    ks = tuple(ks)
    D = store_distances(images, texts, metric)
    i2t = retrieval_report(D, ground_truth(images.ids, texts.ids), "i2t", ks)
    t2i = retrieval_report(D.T, ground_truth(texts.ids, images.ids), "t2i", ks)
    return i2t, t2i


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


@dataclass
class ZeroShotReport:
    per_class: list[float | None]
    mean: float
    predictions: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.per_class)


def zero_shot_eval(
    images: EmbeddingStore, prompts: EmbeddingStore, labels, s: MatchScalars, metric: str = "csd"
) -> ZeroShotReport:
    """C-way nearest-prompt classification; accuracies are percentages.

    With the CSD metric the argmin distance is the argmax match probability
    for any ``a > 0``, so ``s`` does not change predictions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = len(prompts)
    if labels.shape != (len(images),):
        raise EvalError("need one label per image")
    if len(labels) and (labels.min() < 0 or labels.max() >= C):
        raise EvalError(f"labels must lie in [0, {C})")
    D = store_distances(images, prompts, metric)
    preds = np.argmin(D, axis=1)
    per_class: list[float | None] = []
    for c in range(C):
        mask = labels == c
        per_class.append(100.0 * float(np.mean(preds[mask] == c)) if mask.any() else None)
    present = [v for v in per_class if v is not None]
    mean = float(np.mean(present)) if present else float("nan")
    return ZeroShotReport(per_class, mean, preds)


# ---------------------------------------------------------------------------
# Selective prediction and calibration
# ---------------------------------------------------------------------------


@dataclass
class RiskCoverageCurve:
    coverage: np.ndarray
    risk: np.ndarray
    aurc: float
    confidence_source: str = "match_prob"

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.coverage.tolist(), self.risk.tolist()))


def risk_coverage(confidences, correctness, source: str = "match_prob") -> RiskCoverageCurve:
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    if conf.shape != corr.shape or conf.ndim != 1:
        raise EvalError(f"confidences {conf.shape} and correctness {corr.shape} must be equal-length vectors")
    n = conf.shape[0]
    if n < 1:
        raise EvalError("need at least one query")
    if source not in CONFIDENCE_SOURCES:
        raise EvalError(f"unknown confidence source {source!r}")
    order = np.lexsort((np.arange(n), -conf))
    m = np.arange(1, n + 1)
    risk = 1.0 - np.cumsum(corr[order]) / m
    return RiskCoverageCurve(m / n, risk, float(np.mean(risk)), source)


def aurc(curve: RiskCoverageCurve) -> float:
    return float(np.mean(curve.risk))


def ece(probs, correctness, n_bins: int = 10) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    if probs.shape != corr.shape:
        raise EvalError("probabilities and correctness differ in length")
    if np.any((probs < 0) | (probs > 1)):
        raise EvalError("probabilities must lie in [0, 1]")
    n = probs.shape[0]
    if n == 0:
        return 0.0
    bins = np.minimum((probs * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / n * abs(probs[mask].mean() - corr[mask].mean())
    return float(total)


def query_confidence(
    D, s: MatchScalars, source: str = "match_prob", query_log_var=None, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Per-query confidence for selective retrieval."""
    if source == "match_prob":
        return expit(-s.a * np.min(D, axis=1) + s.b)
    if source == "neg_total_variance":
        if query_log_var is None:
            raise EvalError("neg_total_variance needs the query log-variances")
        return -np.sum(np.exp(np.asarray(query_log_var, dtype=np.float64)), axis=1)
    if source == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.random(np.asarray(D).shape[0])
    raise EvalError(f"unknown confidence source {source!r}")


@dataclass
class SelectiveResult:
    direction: str
    K: int
    curve: RiskCoverageCurve
    ece: float


def selective_retrieval(
    query: EmbeddingStore,
    gallery: EmbeddingStore,
    s: MatchScalars,
    direction: str,
    K: int,
    source: str = "match_prob",
    metric: str = "csd",
    seed: int = 0,
) -> SelectiveResult:
    D = store_distances(query, gallery, metric)
    correct = (gt_ranks(D, ground_truth(query.ids, gallery.ids)) < K).astype(np.float64)
    _, q_lv = query.as_float64()
    conf = query_confidence(D, s, source, q_lv, np.random.default_rng(seed))
    top1 = gt_ranks(D, ground_truth(query.ids, gallery.ids)) < 1
    probs = expit(-s.a * np.min(D, axis=1) + s.b)
    return SelectiveResult(direction, K, risk_coverage(conf, correct, source), ece(probs, top1))


# ---------------------------------------------------------------------------
# Robustness
# ---------------------------------------------------------------------------


@dataclass
class RobustnessEntry:
    kind: str
    severity: int
    K: int
    ratio: float | None


@dataclass
class RobustnessReport:
    entries: list[RobustnessEntry] = field(default_factory=list)

    def ratio(self, kind: str, severity: int, K: int) -> float | None:
        for e in self.entries:
            if (e.kind, e.severity, e.K) == (kind, severity, K):
                return e.ratio
        raise KeyError((kind, severity, K))


def relative_recall(clean: float, perturbed: float) -> float | None:
    return None if clean == 0 else perturbed / clean


def mean_direction_recall(D, ks: Sequence[int]) -> dict[int, float]:
    """R@K averaged over i2t (rows) and t2i (columns) with diagonal ground truth."""
    gt = np.arange(D.shape[0])
    i2t = retrieval_report(D, gt, "i2t", ks).recall_at
    t2i = retrieval_report(D.T, gt, "t2i", ks).recall_at
    return {K: 0.5 * (i2t[K] + t2i[K]) for K in ks}


def robustness_report(
    text_mu,
    text_lv,
    clean_image_encodings: tuple[np.ndarray, np.ndarray],
    perturbed_image_encodings: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]],
    ks: Sequence[int] = K_VALUES,
    metric: str = "csd",
) -> RobustnessReport:
    """Relative R@K of perturbed image encodings against clean ones.

    Row ``i`` of the image and text encodings belong to the same study.
    """
    ks = tuple(ks)
    D_clean = distance_matrix(*clean_image_encodings, text_mu, text_lv, metric)
    clean = mean_direction_recall(D_clean, ks)
    report = RobustnessReport()
    for (kind, severity), (mu, lv) in sorted(perturbed_image_encodings.items()):
        pert = mean_direction_recall(distance_matrix(mu, lv, text_mu, text_lv, metric), ks)
        for K in ks:
            report.entries.append(RobustnessEntry(kind, severity, K, relative_recall(clean[K], pert[K])))
    return report
