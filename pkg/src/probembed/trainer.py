"""Toy dual-encoder training with hand-written backpropagation.

Image and text encoders are two-hidden-layer tanh MLPs whose last hidden
layer feeds two linear heads, one for the mean and one for the (clamped)
log-variance.  Both views share the image encoder and both sections share
the text encoder.  Optimisation is AdamW with global-norm gradient clipping
and an optional cosine learning-rate schedule.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .objective import (
    GaussianBatch,
    LossBreakdown,
    LossConfig,
    identity_matches,
    multiview_infonce_loss_and_grads,
    total_loss_and_grads,
)
from .prob_core import (
    GaussianEmbedding,
    InvalidInputError,
    MatchScalars,
    clamp_grad_mask,
    clamp_log_var,
    softplus_inv,
)
from .store import EmbeddingStore
from .synth_data import SynthStudy, stack_studies

log = logging.getLogger(__name__)

OBJECTIVES = ("probabilistic", "infonce")
SCHEDULES = ("constant", "cosine")


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 5e-5
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    clip_max_norm: float = 1.0
    schedule: str = "cosine"
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    embedding_dim: int = 16
    hidden_sizes: tuple[int, int] = (64, 64)
    objective: str = "probabilistic"
    temperature: float = 0.1
    logvar_bias_init: float = -1.0
    init_a: float = 1.0
    init_b: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InvalidInputError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidInputError(f"epochs must be >= 0, got {self.epochs}")
        if self.schedule not in SCHEDULES:
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"unknown objective {self.objective!r}")
        if not self.init_a > 0:
            raise InvalidInputError(f"init_a must be positive, got {self.init_a}")
        if len(self.hidden_sizes) != 2:
            raise InvalidInputError("encoders have exactly two hidden layers")


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

ENCODER_FIELDS = ("W1", "b1", "W2", "b2", "W_mu", "b_mu", "W_lv", "b_lv")


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_lv: np.ndarray
    b_lv: np.ndarray

    @classmethod
    def init(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        dim: int,
        rng: np.random.Generator,
        logvar_bias: float = -1.0,
    ) -> EncoderParams:
        def uniform(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        h1, h2 = hidden
        return cls(
            W1=uniform(in_dim, h1),
            b1=np.zeros(h1),
            W2=uniform(h1, h2),
            b2=np.zeros(h2),
            W_mu=uniform(h2, dim),
            b_mu=np.zeros(dim),
            W_lv=uniform(h2, dim),
            b_lv=np.full(dim, float(logvar_bias)),
        )

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W_mu.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ENCODER_FIELDS}

    def copy(self) -> EncoderParams:
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class _EncoderCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    raw_lv: np.ndarray


def encoder_forward_batch(params: EncoderParams, X: np.ndarray):
    """Encode rows of ``X``; returns ``(mu, log_var, cache)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise InvalidInputError(f"input shape {X.shape} does not match encoder input {params.in_dim}")
    h1 = np.tanh(X @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    mu = h2 @ params.W_mu + params.b_mu
    raw_lv = h2 @ params.W_lv + params.b_lv
    return mu, clamp_log_var(raw_lv), _EncoderCache(X, h1, h2, raw_lv)


def encoder_forward(params: EncoderParams, x) -> GaussianEmbedding:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mu, lv, _ = encoder_forward_batch(params, x)
    return GaussianEmbedding(mu[0], lv[0])


def encoder_backward(params: EncoderParams, cache: _EncoderCache, d_mu, d_lv) -> dict[str, np.ndarray]:
    """Gradients of the encoder parameters given upstream ``dL/dmu`` and ``dL/dlog_var``."""
    d_raw = d_lv * clamp_grad_mask(cache.raw_lv)
    grads = {
        "W_mu": cache.h2.T @ d_mu,
        "b_mu": d_mu.sum(axis=0),
        "W_lv": cache.h2.T @ d_raw,
        "b_lv": d_raw.sum(axis=0),
    }
    d_h2 = d_mu @ params.W_mu.T + d_raw @ params.W_lv.T
    d_a2 = d_h2 * (1.0 - cache.h2**2)
    grads["W2"] = cache.h1.T @ d_a2
    grads["b2"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ params.W2.T) * (1.0 - cache.h1**2)
    grads["W1"] = cache.x.T @ d_a1
    grads["b1"] = d_a1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Model and optimizer state
# ---------------------------------------------------------------------------


@dataclass
class Model:
    img: EncoderParams
    txt: EncoderParams
    a_raw: np.ndarray = field(default_factory=lambda: np.array(softplus_inv(1.0)))
    b: np.ndarray = field(default_factory=lambda: np.array(0.0))

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All trainable arrays in a fixed order; values alias the model's storage."""
        out = {f"img.{k}": v for k, v in self.img.arrays().items()}
        out.update({f"txt.{k}": v for k, v in self.txt.arrays().items()})
        out["match.a_raw"] = self.a_raw
        out["match.b"] = self.b
        return out

    @property
    def scalars(self) -> MatchScalars:
        return MatchScalars(a_raw=float(self.a_raw), b=float(self.b))

    def copy(self) -> Model:
        return Model(self.img.copy(), self.txt.copy(), self.a_raw.copy(), self.b.copy())

    @classmethod
    def from_named_arrays(cls, arrays: dict[str, np.ndarray]) -> Model:
        img = EncoderParams(**{k: np.array(arrays[f"img.{k}"]) for k in ENCODER_FIELDS})
        txt = EncoderParams(**{k: np.array(arrays[f"txt.{k}"]) for k in ENCODER_FIELDS})
        return cls(img, txt, np.array(arrays["match.a_raw"]), np.array(arrays["match.b"]))

    def n_params(self) -> int:
        return sum(v.size for v in self.named_arrays().values())


def init_model(image_dim: int, text_dim: int, cfg: TrainConfig) -> Model:
    rng = np.random.default_rng([cfg.seed, 1])
    img = EncoderParams.init(image_dim, cfg.hidden_sizes, cfg.embedding_dim, rng, cfg.logvar_bias_init)
    txt = EncoderParams.init(text_dim, cfg.hidden_sizes, cfg.embedding_dim, rng, cfg.logvar_bias_init)
    return Model(img, txt, np.array(softplus_inv(cfg.init_a)), np.array(float(cfg.init_b)))


@dataclass
class TrainState:
    model: Model
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    total_steps: int = 1

    @classmethod
    def fresh(cls, model: Model, total_steps: int) -> TrainState:
        zeros = {k: np.zeros_like(v) for k, v in model.named_arrays().items()}
        return cls(model, zeros, {k: z.copy() for k, z in zeros.items()}, 0, total_steps)

    def copy(self) -> TrainState:
        return TrainState(
            self.model.copy(),
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
            self.total_steps,
        )


# ---------------------------------------------------------------------------
# Forward / backward over a batch
# ---------------------------------------------------------------------------

_INPUT_KEYS = {"V1": ("img", "view1"), "V2": ("img", "view2"), "T1": ("txt", "sect1"), "T2": ("txt", "sect2")}


def batch_inputs(batch) -> dict[str, np.ndarray]:
    """Accept a list of studies or an already stacked dict."""
    if isinstance(batch, dict):
        return batch
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    return stack_studies(batch)


def loss_and_grads(model: Model, inputs: dict, loss_cfg: LossConfig, cfg: TrainConfig, need_grads: bool = True):
    """Forward all four inputs, evaluate the objective and backpropagate.

    Returns ``(breakdown, grads)`` with ``grads`` keyed like
    :meth:`Model.named_arrays` (``None`` when ``need_grads`` is false).
    """
    encoders = {"img": model.img, "txt": model.txt}
    fwd = {}
    for key, (enc, col) in _INPUT_KEYS.items():
        fwd[key] = encoder_forward_batch(encoders[enc], inputs[col])

    if cfg.objective == "infonce":
        loss, mu_grads = multiview_infonce_loss_and_grads(
            fwd["V1"][0], fwd["V2"][0], fwd["T1"][0], fwd["T2"][0], cfg.temperature
        )
        breakdown = LossBreakdown(loss, 0.0, 0.0, 0.0, 0.0, loss)
        upstream = {k: (mu_grads[k], np.zeros_like(fwd[k][1])) for k in fwd}
        g_a = g_b = 0.0
    else:
        batches = {k: GaussianBatch(mu, lv) for k, (mu, lv, _) in fwd.items()}
        B = len(batches["V1"])
        breakdown, g = total_loss_and_grads(
            batches["V1"], batches["V2"], batches["T1"], batches["T2"],
            identity_matches(B), model.scalars, loss_cfg, need_grads=need_grads,
        )
        if not need_grads:
            return breakdown, None
        upstream = {k: g[k] for k in fwd}
        g_a, g_b = g["a"], g["b"]
    if not need_grads:
        return breakdown, None

    grads = {k: np.zeros_like(v) for k, v in model.named_arrays().items()}
    for key, (enc, _) in _INPUT_KEYS.items():
        _, _, cache = fwd[key]
        d_mu, d_lv = upstream[key]
        for name, g_arr in encoder_backward(encoders[enc], cache, d_mu, d_lv).items():
            grads[f"{enc}.{name}"] += g_arr
    # a = softplus(a_raw)
    sig = 1.0 / (1.0 + math.exp(-float(model.a_raw)))
    grads["match.a_raw"] = np.array(g_a * sig)
    grads["match.b"] = np.array(g_b)
    return breakdown, grads


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    if cfg.schedule == "constant":
        return cfg.base_lr
    if total_steps == 0:
        return cfg.base_lr
    return cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_update(state: TrainState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW step with decoupled weight decay."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in state.model.named_arrays().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def train_step(state: TrainState, batch, cfg: TrainConfig, loss_cfg: LossConfig) -> tuple[TrainState, LossBreakdown]:
    """Return an updated copy of ``state`` and the loss measured before the update."""
    return _train_step_inplace(state.copy(), batch_inputs(batch), cfg, loss_cfg)


def fit(
    dataset: Sequence[SynthStudy],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    *,
    on_epoch: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[Model, list[LossBreakdown]]:
    """Train from a fresh init; returns the final model and per-epoch mean losses."""
    state, history = fit_state(dataset, cfg, loss_cfg, on_epoch=on_epoch)
    return state.model, history


def fit_state(
    dataset: Sequence[SynthStudy],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    *,
    on_epoch: Callable[[int, LossBreakdown], None] | None = None,
) -> tuple[TrainState, list[LossBreakdown]]:
    """Like :func:`fit` but keeps the optimizer moments, e.g. for checkpointing."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    data = stack_studies(dataset)
    n = len(dataset)
    model = init_model(data["view1"].shape[1], data["sect1"].shape[1], cfg)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    state = TrainState.fresh(model, max(cfg.epochs * steps_per_epoch, 1))
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = {k: data[k][idx] for k in ("view1", "view2", "sect1", "sect2")}
            state, breakdown = _train_step_inplace(state, batch, cfg, loss_cfg)
            losses.append(breakdown)
        mean = LossBreakdown.mean(losses)
        history.append(mean)
        log.info("epoch %d total=%.6f inter=%.6f", epoch, mean.total, mean.inter)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return state, history


def _train_step_inplace(state: TrainState, batch, cfg: TrainConfig, loss_cfg: LossConfig):
    breakdown, grads = loss_and_grads(state.model, batch, loss_cfg, cfg)
    if not math.isfinite(breakdown.total):
        raise TrainingError(f"non-finite loss at step {state.step}: {breakdown}")
    grads, norm = clip_gradients(grads, cfg.clip_max_norm)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    adamw_update(state, grads, lr_schedule(state.step, state.total_steps, cfg), cfg)
    state.step += 1
    return state, breakdown


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def encode_images(model: Model, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, lv, _ = encoder_forward_batch(model.img, np.asarray(images).reshape(len(images), -1))
    return mu, lv


def encode_texts(model: Model, texts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, lv, _ = encoder_forward_batch(model.txt, np.asarray(texts))
    return mu, lv


def encode_corpus(model: Model, dataset: Sequence[SynthStudy]) -> tuple[EmbeddingStore, EmbeddingStore]:
    """Single-input inference: view 1 and section 1 of every study."""
    ids = [s.id for s in dataset]
    if not dataset:
        empty = np.zeros((0, model.img.dim))
        return EmbeddingStore([], empty, empty), EmbeddingStore([], empty, empty)
    img_mu, img_lv = encode_images(model, np.stack([s.view1 for s in dataset]))
    txt_mu, txt_lv = encode_texts(model, np.stack([s.sect1 for s in dataset]))
    return EmbeddingStore(ids, img_mu, img_lv), EmbeddingStore(ids, txt_mu, txt_lv)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_grads(model: Model, inputs: dict, loss_cfg: LossConfig, cfg: TrainConfig, h: float = 1e-5):
    """Central differences of the total loss w.r.t. every trainable scalar."""
    work = model.copy()
    out = {}
    for name, arr in work.named_arrays().items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_and_grads(work, inputs, loss_cfg, cfg, need_grads=False)[0].total
            flat[i] = orig - h
            minus = loss_and_grads(work, inputs, loss_cfg, cfg, need_grads=False)[0].total
            flat[i] = orig
            g_flat[i] = (plus - minus) / (2 * h)
        out[name] = g
    return out


GRADCHECK_FLOOR = 1e-5


def gradient_check(
    model: Model,
    inputs: dict,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    h: float = 1e-5,
    floor: float = GRADCHECK_FLOOR,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, analytic = loss_and_grads(model, inputs, loss_cfg, cfg)
    numeric = finite_difference_grads(model, inputs, loss_cfg, cfg, h)
    return max(float(relative_error(analytic[k], numeric[k], floor).max()) for k in analytic)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout, little-endian:
#   magic b"PGCK" | version u32 | step u64 | total_steps u64 | n_entries u32
#   then n_entries records:
#     name_len u32 | name UTF-8 | kind u8 (0 param, 1 first moment, 2 second moment)
#     ndim u32 | ndim x u64 shape | float64 data, row-major

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQQI")


class CheckpointError(Exception):
    pass


def save_checkpoint(state: TrainState, path) -> None:
    entries = []
    for kind, source in enumerate((state.model.named_arrays(), state.m, state.v)):
        for name, arr in source.items():
            entries.append((name, kind, np.asarray(arr, dtype=np.float64)))
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, state.step, state.total_steps, len(entries))]
    for name, kind, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> TrainState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic, version, step, total_steps, n_entries = _CKPT_HEADER.unpack(take(_CKPT_HEADER.size))
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    sections: list[dict[str, np.ndarray]] = [{}, {}, {}]
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        kind, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        sections[kind][name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint entries")
    model = Model.from_named_arrays(sections[0])
    names = list(model.named_arrays())
    if set(sections[1]) != set(names) or set(sections[2]) != set(names):
        raise CheckpointError(f"{path}: optimizer moments do not match parameters")
    return TrainState(
        model,
        {k: sections[1][k].copy() for k in names},
        {k: sections[2][k].copy() for k in names},
        int(step),
        int(total_steps),
    )
