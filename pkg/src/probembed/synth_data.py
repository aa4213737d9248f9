"""Synthetic multi-view image/text studies with controllable ambiguity.

Each study has a latent vector drawn around its class prototype.  Two
image-like views are noisy renderings of that latent on a small grid; two
text-like sections are noisy linear read-outs of it.  With probability
``ambiguity`` a study's text is re-drawn around the midpoint of its own and
a neighbouring class prototype (classes sit on a ring).  Such a report fits
many images of either class equally well, which creates plausible but
unannotated matches across the batch.

Also hosts the image perturbation operators used by the robustness harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import expit

PERTURB_KINDS = ("blur", "noise", "brightness_contrast", "rotation")

# index 0 is unused: severity 0 is always the identity
SEVERITY_TABLE = {
    "blur": (None, 0.5, 1.0, 1.5, 2.0, 3.0),  # gaussian sigma, pixels
    "noise": (None, 0.02, 0.05, 0.1, 0.2, 0.4),  # std, fraction of [0, 1] range
    "brightness_contrast": (None, 0.05, 0.10, 0.20, 0.35, 0.50),  # relative contrast change
    "rotation": (None, 5.0, 10.0, 15.0, 25.0, 45.0),  # degrees
}

_WORLD_TAG = 0x5EED
_STUDY_TAG = 0x57D7


@dataclass(frozen=True)
class SynthConfig:
    height: int = 8
    width: int = 8
    text_dim: int = 32
    latent_dim: int = 8
    proto_scale: float = 1.5
    instance_scale: float = 0.6
    pixel_noise: float = 0.02
    text_noise: float = 0.05
    neighbor_weight: float = 0.5
    missing_view_rate: float = 0.0
    missing_section_rate: float = 0.0
    jitter_amplitude: float = 0.1
    max_shift: int = 1


@dataclass
class SynthStudy:
    id: str
    view1: np.ndarray
    view2: np.ndarray | None
    sect1: np.ndarray
    sect2: np.ndarray | None
    class_label: int
    text_class: int
    ambiguity: float

    def __post_init__(self):
        if self.view2 is not None and self.view1.shape != self.view2.shape:
            raise ValueError(f"study {self.id}: views differ in shape")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError(f"study {self.id}: ambiguity {self.ambiguity} outside [0, 1]")

    @property
    def is_ambiguous(self) -> bool:
        return self.ambiguity > 0.0


@dataclass(frozen=True)
class SynthWorld:
    """Fixed generative maps shared by every split drawn from the same seed."""

    prototypes: np.ndarray  # (C, L)
    image_basis: np.ndarray  # (L, H, W)
    text_map: np.ndarray  # (L, T)
    cfg: SynthConfig

    @classmethod
    def build(cls, n_classes: int, seed: int, cfg: SynthConfig = SynthConfig()) -> SynthWorld:
        rng = np.random.default_rng([seed, _WORLD_TAG])
        L, H, W = cfg.latent_dim, cfg.height, cfg.width
        prototypes = cfg.proto_scale * rng.standard_normal((n_classes, L))
        fields = rng.standard_normal((L, H, W))
        basis = np.stack([_gaussian_blur(f, 1.0) for f in fields])
        basis /= basis.std(axis=(1, 2), keepdims=True) * math.sqrt(L)
        text_map = rng.standard_normal((L, cfg.text_dim)) / math.sqrt(L)
        return cls(prototypes, basis, text_map, cfg)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def render_image(self, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = expit(2.0 * np.tensordot(latent, self.image_basis, axes=1))
        noisy = clean + self.cfg.pixel_noise * rng.standard_normal(clean.shape)
        return np.clip(noisy, 0.0, 1.0)

    def render_text(self, latent: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        feat = latent @ self.text_map
        if rng is not None:
            feat = feat + self.cfg.text_noise * rng.standard_normal(feat.shape)
        return feat

    def class_prompts(self) -> np.ndarray:
        """Noise-free text features of each class prototype, ``(C, T)``."""
        return self.render_text(self.prototypes, None)


def _check_seed(seed: int):
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")


def generate_dataset(
    n: int,
    n_classes: int,
    ambiguity: float,
    seed: int,
    *,
    split: int = 0,
    cfg: SynthConfig = SynthConfig(),
) -> list[SynthStudy]:
    """Draw ``n`` studies.  Different ``split`` values share the same world."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if not 0.0 <= ambiguity <= 1.0:
        raise ValueError(f"ambiguity must lie in [0, 1], got {ambiguity}")
    _check_seed(seed)
    world = SynthWorld.build(n_classes, seed, cfg)
    return [_draw_study(world, ambiguity, seed, split, i) for i in range(n)]


def _draw_study(world: SynthWorld, ambiguity: float, seed: int, split: int, index: int) -> SynthStudy:
    cfg = world.cfg
    rng = np.random.default_rng([seed, _STUDY_TAG, split, index])
    C, L = world.prototypes.shape
    label = int(rng.integers(C))
    latent = world.prototypes[label] + cfg.instance_scale * rng.standard_normal(L)

    injected = rng.random() < ambiguity
    neighbor = int((label + (1 if rng.random() < 0.5 else -1)) % C)
    redraw = cfg.instance_scale * rng.standard_normal(L)
    if injected:
        # fresh draw around the blended prototypes: no instance information survives
        w = cfg.neighbor_weight
        text_latent = (1.0 - w) * world.prototypes[label] + w * world.prototypes[neighbor] + redraw
        text_class, level = neighbor, w
    else:
        text_latent, text_class, level = latent, label, 0.0

    drop_view = rng.random() < cfg.missing_view_rate
    drop_sect = rng.random() < cfg.missing_section_rate
    aug_seed = int(rng.integers(2**31))

    study = SynthStudy(
        id=f"s{split}-{index:06d}",
        view1=world.render_image(latent, rng),
        view2=world.render_image(latent, rng),
        sect1=world.render_text(text_latent, rng),
        sect2=world.render_text(text_latent, rng),
        class_label=label,
        text_class=text_class,
        ambiguity=level,
    )
    if drop_view:
        study = synthesize_missing_view(
            replace(study, view2=None), aug_seed, cfg.jitter_amplitude, cfg.max_shift
        )
    if drop_sect:
        study = synthesize_missing_section(replace(study, sect2=None), aug_seed, cfg.text_noise)
    return study


def synthesize_missing_view(
    study: SynthStudy, seed: int, amplitude: float = 0.1, max_shift: int = 1
) -> SynthStudy:
    """Fill ``view2`` from ``view1`` by a crop-and-pad shift plus noise.

    The total per-pixel change is limited to ``amplitude``, so the mean
    absolute difference to ``view1`` never exceeds it.
    """
    rng = np.random.default_rng([seed])
    img = study.view1
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    padded = np.pad(img, max_shift, mode="edge")
    H, W = img.shape
    shifted = padded[max_shift + dy : max_shift + dy + H, max_shift + dx : max_shift + dx + W]
    delta = shifted - img + rng.uniform(-amplitude, amplitude, size=img.shape)
    view2 = np.clip(img + np.clip(delta, -amplitude, amplitude), 0.0, 1.0)
    return replace(study, view2=view2)


def synthesize_missing_section(study: SynthStudy, seed: int, noise: float = 0.2) -> SynthStudy:
    rng = np.random.default_rng([seed, 1])
    return replace(study, sect2=study.sect1 + noise * rng.standard_normal(study.sect1.shape))


def class_prompt_features(n_classes: int, seed: int, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    return SynthWorld.build(n_classes, seed, cfg).class_prompts()


def stack_studies(studies: Sequence[SynthStudy]) -> dict[str, np.ndarray]:
    """Flattened model inputs: ``view1``/``view2`` as ``(N, H*W)``, sections as ``(N, T)``."""
    missing = [s.id for s in studies if s.view2 is None or s.sect2 is None]
    if missing:
        raise ValueError(f"studies with missing inputs must be augmented first: {missing[:3]}")
    n = len(studies)
    return {
        "view1": np.stack([s.view1 for s in studies]).reshape(n, -1),
        "view2": np.stack([s.view2 for s in studies]).reshape(n, -1),
        "sect1": np.stack([s.sect1 for s in studies]),
        "sect2": np.stack([s.sect2 for s in studies]),
        "class_label": np.array([s.class_label for s in studies], dtype=np.int64),
        "ambiguity": np.array([s.ambiguity for s in studies], dtype=np.float64),
    }


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {PERTURB_KINDS}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in [0, 5], got {self.severity}")


def gaussian_kernel(sigma: float) -> np.ndarray:
    half = math.ceil(2 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    half = (len(k) - 1) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (half, half)
        padded = np.pad(out, pad, mode="edge")
        out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), axis, padded)
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the grid centre; bilinear with zero fill, exact for quarter turns."""
    if degrees % 90 == 0:
        return np.rot90(img, k=int(degrees // 90) % 4).copy()
    H, W = img.shape
    theta = math.radians(degrees)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    src_y = math.cos(theta) * yy - math.sin(theta) * xx + cy
    src_x = math.sin(theta) * yy + math.cos(theta) * xx + cx
    return map_coordinates(img, [src_y, src_x], order=1, mode="constant", cval=0.0)


def perturb_image(img: np.ndarray, spec: PerturbSpec) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if spec.severity == 0:
        return img.copy()
    level = SEVERITY_TABLE[spec.kind][spec.severity]
    rng = np.random.default_rng([spec.seed])
    if spec.kind == "blur":
        out = _gaussian_blur(img, level)
    elif spec.kind == "noise":
        out = img + level * rng.standard_normal(img.shape)
    elif spec.kind == "brightness_contrast":
        s_contrast, s_bright = rng.choice((-1.0, 1.0), size=2)
        alpha = 1.0 + s_contrast * level
        beta = s_bright * level / 2.0
        out = alpha * (img - 0.5) + 0.5 + beta
    else:
        out = rotate(img, level)
    return np.clip(out, 0.0, 1.0)


def perturb_images(images: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Apply one (kind, severity) to a stack of ``(N, H, W)`` images with per-image seeds."""
    out = np.empty_like(images, dtype=np.float64)
    for i, img in enumerate(images):
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out[i] = perturb_image(img, PerturbSpec(kind, severity, sub_seed))
    return out
