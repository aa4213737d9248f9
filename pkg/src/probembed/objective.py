"""Batch-level training objectives.

The probabilistic objective combines an inter-modal matching loss averaged
over the four (view, section) pairings, intra-modal view/view and
section/section matching losses, and per-modality VIB penalties.  A
deterministic bidirectional InfoNCE loss is provided as the comparison
baseline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .prob_core import (
    BCE_MODES,
    GaussianEmbedding,
    InvalidInputError,
    MatchScalars,
    bce_arrays,
    pairwise_csd_arrays,
    pairwise_csd_backward,
    vib_kl_arrays,
)

INTER_PAIRINGS = (("V1", "T1"), ("V1", "T2"), ("V2", "T1"), ("V2", "T2"))


@dataclass(frozen=True)
class LossConfig:
    lambda_I: float = 0.1
    lambda_T: float = 0.1
    beta_I: float = 1e-4
    beta_T: float = 1e-4
    mode: str = "standard"
    positive_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_I", "lambda_T", "beta_I", "beta_T"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
        if not (np.isfinite(self.positive_weight) and self.positive_weight > 0):
            raise InvalidInputError(f"positive_weight must be > 0, got {self.positive_weight}")
        if self.mode not in BCE_MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}")


@dataclass
class LossBreakdown:
    inter: float
    intra_img: float
    intra_txt: float
    kl_img: float
    kl_txt: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, items: Sequence[LossBreakdown]) -> LossBreakdown:
        keys = ("inter", "intra_img", "intra_txt", "kl_img", "kl_txt", "total")
        return cls(**{k: float(np.mean([getattr(it, k) for it in items])) for k in keys})


@dataclass
class GaussianBatch:
    """Stacked means and clamped log-variances, each ``(B, D)``."""

    mu: np.ndarray
    log_var: np.ndarray

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def from_embeddings(cls, zs: Sequence[GaussianEmbedding]) -> GaussianBatch:
        if len(zs) == 0:
            raise InvalidInputError("empty batch")
        return cls(np.stack([z.mu for z in zs]), np.stack([z.log_var for z in zs]))


BatchLike = Union[GaussianBatch, Sequence[GaussianEmbedding]]


def _as_batch(x: BatchLike) -> GaussianBatch:
    return x if isinstance(x, GaussianBatch) else GaussianBatch.from_embeddings(x)


def identity_matches(batch_size: int) -> np.ndarray:
    return np.eye(batch_size)


def _check_matches(Y, shape) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != shape:
        raise InvalidInputError(f"match matrix shape {Y.shape} does not match distances {shape}")
    if not np.all((Y == 0) | (Y == 1)):
        raise InvalidInputError("match matrix entries must be 0 or 1")
    return Y


def batch_match_loss_grad(D, Y, a: float, b: float, cfg: LossConfig):
    """Weighted mean BCE over a distance matrix plus ``(dL/dD, dL/da, dL/db)``."""
    D = np.asarray(D, dtype=np.float64)
    Y = _check_matches(Y, D.shape)
    w = np.where(Y == 1, cfg.positive_weight, 1.0)
    w_total = w.sum()
    loss, dl_dd, dl_da, dl_db = bce_arrays(D, Y, a, b, cfg.mode)
    return (
        float(np.sum(w * loss) / w_total),
        w * dl_dd / w_total,
        float(np.sum(w * dl_da) / w_total),
        float(np.sum(w * dl_db) / w_total),
    )


def batch_match_loss(D, Y, s: MatchScalars, cfg: LossConfig) -> float:
    return batch_match_loss_grad(D, Y, s.a, s.b, cfg)[0]


def _pair_loss(A: GaussianBatch, B: GaussianBatch, Y, s: MatchScalars, cfg: LossConfig) -> float:
    D = pairwise_csd_arrays(A.mu, A.log_var, B.mu, B.log_var)
    return batch_match_loss(D, Y, s, cfg)


def _check_sizes(*batches: GaussianBatch):
    sizes = {len(x) for x in batches}
    dims = {x.mu.shape[1] for x in batches}
    if len(sizes) != 1:
        raise InvalidInputError(f"batch sizes differ: {sorted(sizes)}")
    if len(dims) != 1:
        raise InvalidInputError(f"embedding dimensions differ: {sorted(dims)}")


def inter_modal_loss(V1, V2, T1, T2, Y, s: MatchScalars, cfg: LossConfig) -> float:
    batches = {"V1": _as_batch(V1), "V2": _as_batch(V2), "T1": _as_batch(T1), "T2": _as_batch(T2)}
    _check_sizes(*batches.values())
    terms = [_pair_loss(batches[v], batches[t], Y, s, cfg) for v, t in INTER_PAIRINGS]
    return float(np.mean(terms))


def intra_modal_loss(A1, A2, s: MatchScalars, cfg: LossConfig) -> float:
    A1, A2 = _as_batch(A1), _as_batch(A2)
    _check_sizes(A1, A2)
    return _pair_loss(A1, A2, identity_matches(len(A1)), s, cfg)


def _compose(inter, intra_img, intra_txt, kl_img, kl_txt, cfg: LossConfig) -> LossBreakdown:
    total = (
        inter
        + cfg.lambda_I * intra_img
        + cfg.lambda_T * intra_txt
        + cfg.beta_I * kl_img
        + cfg.beta_T * kl_txt
    )
    return LossBreakdown(inter, intra_img, intra_txt, kl_img, kl_txt, total)


def total_loss(V1, V2, T1, T2, Y, s: MatchScalars, cfg: LossConfig) -> LossBreakdown:
    return total_loss_and_grads(V1, V2, T1, T2, Y, s, cfg, need_grads=False)[0]


def total_loss_and_grads(V1, V2, T1, T2, Y, s: MatchScalars, cfg: LossConfig, need_grads: bool = True):
    """Full objective and, optionally, gradients.

    Returns ``(breakdown, grads)``.  ``grads`` maps ``"V1" .. "T2"`` to
    ``(d_mu, d_log_var)`` pairs and ``"a"``, ``"b"`` to floats (partial
    w.r.t. ``a`` itself).  ``grads`` is ``None`` when ``need_grads`` is false.
    """
    batches = {"V1": _as_batch(V1), "V2": _as_batch(V2), "T1": _as_batch(T1), "T2": _as_batch(T2)}
    _check_sizes(*batches.values())
    B = len(batches["V1"])
    Y = _check_matches(Y, (B, B))
    a, b = s.a, s.b

    grads = {k: [np.zeros_like(x.mu), np.zeros_like(x.log_var)] for k, x in batches.items()}
    g_ab = np.zeros(2)

    def pair(k1, k2, labels, scale):
        x1, x2 = batches[k1], batches[k2]
        D = pairwise_csd_arrays(x1.mu, x1.log_var, x2.mu, x2.log_var)
        loss, dD, da, db = batch_match_loss_grad(D, labels, a, b, cfg)
        if need_grads and scale != 0.0:
            d_mu1, d_lv1, d_mu2, d_lv2 = pairwise_csd_backward(
                x1.mu, x1.log_var, x2.mu, x2.log_var, scale * dD
            )
            grads[k1][0] += d_mu1
            grads[k1][1] += d_lv1
            grads[k2][0] += d_mu2
            grads[k2][1] += d_lv2
            g_ab[0] += scale * da
            g_ab[1] += scale * db
        return loss

    inter = float(np.mean([pair(v, t, Y, 0.25) for v, t in INTER_PAIRINGS]))
    eye = identity_matches(B)
    intra_img = pair("V1", "V2", eye, cfg.lambda_I)
    intra_txt = pair("T1", "T2", eye, cfg.lambda_T)

    kl = {}
    for modality, keys, beta in (("img", ("V1", "V2"), cfg.beta_I), ("txt", ("T1", "T2"), cfg.beta_T)):
        per = [vib_kl_arrays(batches[k].mu, batches[k].log_var) for k in keys]
        kl[modality] = float(np.mean(np.concatenate(per)))
        if need_grads and beta != 0.0:
            scale = beta / (2 * B)
            for k in keys:
                grads[k][0] += scale * batches[k].mu
                grads[k][1] += scale * 0.5 * np.expm1(batches[k].log_var)

    breakdown = _compose(inter, intra_img, intra_txt, kl["img"], kl["txt"], cfg)
    if not need_grads:
        return breakdown, None
    out = {k: tuple(v) for k, v in grads.items()}
    out["a"] = float(g_ab[0])
    out["b"] = float(g_ab[1])
    return breakdown, out


# ---------------------------------------------------------------------------
# Deterministic baseline
# ---------------------------------------------------------------------------


def infonce_loss_grad(S, temperature: float) -> tuple[float, np.ndarray]:
    """Bidirectional InfoNCE against the diagonal, and ``dL/dS``."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidInputError(f"similarity matrix must be square, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidInputError("similarity matrix contains non-finite entries")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0, got {temperature}")
    B = S.shape[0]
    logits = S / temperature
    diag = np.diag(logits)
    row = np.mean(logsumexp(logits, axis=1) - diag)
    col = np.mean(logsumexp(logits, axis=0) - diag)
    eye = np.eye(B)
    d_logits = 0.5 * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye)) / B
    return float(0.5 * (row + col)), d_logits / temperature


def infonce_loss(S, temperature: float) -> float:
    return infonce_loss_grad(S, temperature)[0]


def cosine_similarity_grad(A: np.ndarray, B: np.ndarray):
    """Cosine similarity matrix of the rows of ``A`` and ``B`` plus a backward closure."""
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    ua, ub = A / na, B / nb
    S = ua @ ub.T

    def backward(dS):
        d_ua = dS @ ub
        d_ub = dS.T @ ua
        d_A = (d_ua - ua * np.sum(d_ua * ua, axis=1, keepdims=True)) / na
        d_B = (d_ub - ub * np.sum(d_ub * ub, axis=1, keepdims=True)) / nb
        return d_A, d_B

    return S, backward


def multiview_infonce_loss_and_grads(V1, V2, T1, T2, temperature: float):
    """InfoNCE on cosine similarity of means, averaged over the four pairings.

    Takes ``(B, D)`` mean arrays; returns ``(loss, {"V1": d_mu, ...})``.
    """
    means = {"V1": V1, "V2": V2, "T1": T1, "T2": T2}
    grads = {k: np.zeros_like(v) for k, v in means.items()}
    losses = []
    for v, t in INTER_PAIRINGS:
        S, backward = cosine_similarity_grad(means[v], means[t])
        loss, dS = infonce_loss_grad(S, temperature)
        d_v, d_t = backward(0.25 * dS)
        grads[v] += d_v
        grads[t] += d_t
        losses.append(loss)
    return float(np.mean(losses)), grads
