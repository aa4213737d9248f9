"""Closed-form math for diagonal Gaussian embeddings.

Everything here is computed in float64.  Functions come in two flavours:
embedding-level helpers that take :class:`GaussianEmbedding` objects, and
array-level kernels (``*_arrays``) that work on stacked ``(N, D)`` means and
log-variances and are what the batch objective uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit, log_expit

LOG_VAR_MIN = -6.0
LOG_VAR_MAX = 6.0

BceMode = Literal["standard", "paper_literal"]
BCE_MODES = ("standard", "paper_literal")


class InvalidInputError(ValueError):
    """Raised for malformed numeric input (non-finite values, bad shapes, bad labels)."""


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def clamp_log_var(raw) -> np.ndarray:
    """Clamp raw log-variances to ``[LOG_VAR_MIN, LOG_VAR_MAX]``."""
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("log-variance contains non-finite entries")
    return np.clip(arr, LOG_VAR_MIN, LOG_VAR_MAX)


def clamp_grad_mask(raw) -> np.ndarray:
    """Subgradient of the clamp: 1 inside the closed interval, 0 outside."""
    arr = np.asarray(raw, dtype=np.float64)
    return ((arr >= LOG_VAR_MIN) & (arr <= LOG_VAR_MAX)).astype(np.float64)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class GaussianEmbedding:
    """A diagonal Gaussian: mean vector and (clamped) log-variance vector."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = _as_vector(self.mu, "mu")
        log_var = clamp_log_var(_as_vector(self.log_var, "log_var"))
        if mu.shape[0] == 0:
            raise InvalidInputError("embedding dimension must be at least 1")
        if mu.shape != log_var.shape:
            raise InvalidInputError(
                f"mu and log_var lengths differ: {mu.shape[0]} vs {log_var.shape[0]}"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def standard_normal(cls, dim: int) -> GaussianEmbedding:
        return cls(np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class MatchScalars:
    """Scale ``a`` and offset ``b`` of the match logit ``-a*d + b``.

    ``a`` is stored through a softplus of ``a_raw`` so it stays positive
    under unconstrained updates.  The default is ``a = 1, b = 0``.
    """

    a_raw: float = field(default_factory=lambda: softplus_inv(1.0))
    b: float = 0.0

    @property
    def a(self) -> float:
        return float(softplus(self.a_raw))

    @classmethod
    def from_ab(cls, a: float, b: float) -> MatchScalars:
        if not a > 0:
            raise InvalidInputError(f"a must be positive, got {a}")
        return cls(a_raw=softplus_inv(a), b=float(b))


@dataclass
class GradBundle:
    d_mu1: np.ndarray
    d_mu2: np.ndarray
    d_logvar1: np.ndarray
    d_logvar2: np.ndarray
    d_a: float | None = None
    d_b: float | None = None


def _check_same_dim(d1: int, d2: int):
    if d1 != d2:
        raise InvalidInputError(f"dimension mismatch: {d1} vs {d2}")


# ---------------------------------------------------------------------------
# CSD
# ---------------------------------------------------------------------------


def csd_arrays(mu1, lv1, mu2, lv2) -> np.ndarray:
    """Elementwise-broadcast CSD; the last axis is the embedding dimension."""
    gap = mu1 - mu2
    s = np.exp(lv1) + np.exp(lv2)
    return 0.5 * np.sum(gap * gap / s + np.log(s), axis=-1)


def csd(z1: GaussianEmbedding, z2: GaussianEmbedding) -> float:
    _check_same_dim(z1.dim, z2.dim)
    return float(csd_arrays(z1.mu, z1.log_var, z2.mu, z2.log_var))


def _stack(batch: Sequence[GaussianEmbedding]) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    dims = {z.dim for z in batch}
    if len(dims) != 1:
        raise InvalidInputError(f"non-uniform dimensions in batch: {sorted(dims)}")
    return np.stack([z.mu for z in batch]), np.stack([z.log_var for z in batch])


def pairwise_csd_arrays(mu1, lv1, mu2, lv2) -> np.ndarray:
    """``(M, D)`` x ``(N, D)`` -> ``(M, N)`` CSD matrix."""
    _check_same_dim(mu1.shape[-1], mu2.shape[-1])
    return csd_arrays(mu1[:, None, :], lv1[:, None, :], mu2[None, :, :], lv2[None, :, :])


def pairwise_csd_backward(mu1, lv1, mu2, lv2, upstream):
    """Pull ``dL/dD`` (shape ``(M, N)``) back to both batches' means and log-variances."""
    v1 = np.exp(lv1)
    v2 = np.exp(lv2)
    gap = mu1[:, None, :] - mu2[None, :, :]
    s = v1[:, None, :] + v2[None, :, :]
    w = upstream[:, :, None]
    g_over_s = gap / s
    d_s = w * 0.5 * (1.0 / s - g_over_s * g_over_s)
    d_mu1 = np.sum(w * g_over_s, axis=1)
    d_mu2 = -np.sum(w * g_over_s, axis=0)
    d_lv1 = np.sum(d_s, axis=1) * v1
    d_lv2 = np.sum(d_s, axis=0) * v2
    return d_mu1, d_lv1, d_mu2, d_lv2


def pairwise_csd(batch1: Sequence[GaussianEmbedding], batch2: Sequence[GaussianEmbedding]) -> np.ndarray:
    mu1, lv1 = _stack(batch1)
    mu2, lv2 = _stack(batch2)
    return pairwise_csd_arrays(mu1, lv1, mu2, lv2)


# ---------------------------------------------------------------------------
# Match probability and BCE
# ---------------------------------------------------------------------------


def match_prob(d, s: MatchScalars):
    """``logistic(-a*d + b)``; returns a float for scalar ``d``."""
    d_arr = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d_arr)):
        raise InvalidInputError("distance must be finite")
    p = expit(-s.a * d_arr + s.b)
    return float(p) if p.ndim == 0 else p


def _check_labels(y) -> np.ndarray:
    y_arr = np.asarray(y, dtype=np.float64)
    if not np.all((y_arr == 0.0) | (y_arr == 1.0)):
        raise InvalidInputError("match labels must be 0 or 1")
    return y_arr


def _check_mode(mode: str):
    if mode not in BCE_MODES:
        raise InvalidInputError(f"unknown BCE mode {mode!r}; expected one of {BCE_MODES}")


def bce_arrays(d, y, a: float, b: float, mode: BceMode = "standard"):
    """Elementwise BCE and its partials w.r.t. ``d``, ``a`` and ``b``.

    Returns ``(loss, dl_dd, dl_da, dl_db)``, all with the broadcast shape of
    ``d`` and ``y``.
    """
    _check_mode(mode)
    if mode == "standard":
        z = -a * d + b
        loss = y * softplus(-z) + (1.0 - y) * softplus(z)
        dl_dz = expit(z) - y
        return loss, -a * dl_dz, -d * dl_dz, dl_dz
    # y * softplus(a*d - b) + (1-y) * softplus(a*d + b)
    z_pos = a * d - b
    z_neg = a * d + b
    loss = y * softplus(z_pos) + (1.0 - y) * softplus(z_neg)
    g_pos = y * expit(z_pos)
    g_neg = (1.0 - y) * expit(z_neg)
    return loss, a * (g_pos + g_neg), d * (g_pos + g_neg), -g_pos + g_neg


def match_bce(d, y, s: MatchScalars, mode: BceMode = "standard"):
    d_arr = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d_arr)):
        raise InvalidInputError("distance must be finite")
    y_arr = _check_labels(y)
    _check_mode(mode)
    a, b = s.a, s.b
    if mode == "standard":
        z = -a * d_arr + b
        loss = -(y_arr * log_expit(z) + (1.0 - y_arr) * log_expit(-z))
    else:
        loss = -(y_arr * log_expit(-a * d_arr + b) + (1.0 - y_arr) * log_expit(-a * d_arr - b))
    return float(loss) if loss.ndim == 0 else loss


# ---------------------------------------------------------------------------
# VIB KL
# ---------------------------------------------------------------------------


def vib_kl_arrays(mu, lv) -> np.ndarray:
    """KL to N(0, I) summed over the last axis."""
    # expm1 keeps exp(lv) - 1 - lv exact (and nonnegative) for tiny lv
    return 0.5 * np.sum(np.expm1(lv) - lv + mu * mu, axis=-1)


def vib_kl(z: GaussianEmbedding) -> float:
    return float(vib_kl_arrays(z.mu, z.log_var))


def vib_kl_grad(z: GaussianEmbedding) -> tuple[np.ndarray, np.ndarray]:
    """Partials of :func:`vib_kl` w.r.t. ``mu`` and ``log_var``."""
    return z.mu.copy(), 0.5 * np.expm1(z.log_var)


# ---------------------------------------------------------------------------
# Pair gradient
# ---------------------------------------------------------------------------


def analytic_grads(
    z1: GaussianEmbedding,
    z2: GaussianEmbedding,
    y: int,
    s: MatchScalars,
    mode: BceMode = "standard",
) -> tuple[float, GradBundle]:
    """Loss ``match_bce(csd(z1, z2), y)`` and its exact partial derivatives.

    Gradients flow into both embeddings.  ``d_a`` is the partial w.r.t. the
    positive scale ``a`` itself, not its softplus pre-image.
    """
    _check_same_dim(z1.dim, z2.dim)
    y_arr = _check_labels(y)
    d = csd(z1, z2)
    loss, dl_dd, dl_da, dl_db = bce_arrays(np.float64(d), y_arr, s.a, s.b, mode)
    d_mu1, d_lv1, d_mu2, d_lv2 = pairwise_csd_backward(
        z1.mu[None], z1.log_var[None], z2.mu[None], z2.log_var[None], np.array([[dl_dd]])
    )
    return float(loss), GradBundle(
        d_mu1=d_mu1[0],
        d_mu2=d_mu2[0],
        d_logvar1=d_lv1[0],
        d_logvar2=d_lv2[0],
        d_a=float(dl_da),
        d_b=float(dl_db),
    )
