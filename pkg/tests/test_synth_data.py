from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probembed.synth_data import (
    PERTURB_KINDS,
    SEVERITY_TABLE,
    PerturbSpec,
    SynthConfig,
    SynthWorld,
    class_prompt_features,
    gaussian_kernel,
    generate_dataset,
    perturb_image,
    perturb_images,
    rotate,
    stack_studies,
    synthesize_missing_section,
    synthesize_missing_view,
)

grids = arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0))


def test_generate_dataset_cardinality_and_ids():
    studies = generate_dataset(100, 5, 0.3, seed=1)
    assert len(studies) == 100
    assert len({s.id for s in studies}) == 100
    cfg = SynthConfig()
    for s in studies:
        assert s.view1.shape == s.view2.shape == (cfg.height, cfg.width)
        assert s.sect1.shape == s.sect2.shape == (cfg.text_dim,)
        assert 0.0 <= s.view1.min() and s.view1.max() <= 1.0
        assert 0 <= s.class_label < 5
        assert 0.0 <= s.ambiguity <= 1.0


def test_no_ambiguity_keeps_text_class():
    for s in generate_dataset(200, 6, 0.0, seed=2):
        assert s.text_class == s.class_label
        assert s.ambiguity == 0.0


def test_ambiguous_text_comes_from_ring_neighbour():
    studies = generate_dataset(300, 7, 1.0, seed=3)
    for s in studies:
        assert s.is_ambiguous
        assert (s.text_class - s.class_label) % 7 in (1, 6)


def test_generation_is_pure():
    a = generate_dataset(20, 4, 0.5, seed=9)
    b = generate_dataset(20, 4, 0.5, seed=9)
    for x, y in zip(a, b):
        assert x.id == y.id and x.class_label == y.class_label and x.ambiguity == y.ambiguity
        for key in ("view1", "view2", "sect1", "sect2"):
            assert getattr(x, key).tobytes() == getattr(y, key).tobytes()
    c = generate_dataset(20, 4, 0.5, seed=10)
    assert any(x.view1.tobytes() != z.view1.tobytes() for x, z in zip(a, c))


def test_splits_share_world_but_not_studies():
    train = generate_dataset(10, 4, 0.3, seed=5, split=0)
    test = generate_dataset(10, 4, 0.3, seed=5, split=1)
    assert train[0].id != test[0].id
    assert train[0].view1.tobytes() != test[0].view1.tobytes()


def test_injection_rate_within_three_sigma():
    rate, n = 0.3, 10_000
    cfg = SynthConfig(height=2, width=2, text_dim=2, latent_dim=2)
    flags = np.array([s.is_ambiguous for s in generate_dataset(n, 10, rate, seed=11, cfg=cfg)])
    sigma = math.sqrt(rate * (1 - rate) / n)
    assert abs(flags.mean() - rate) < 3 * sigma


@pytest.mark.parametrize(
    "args",
    [(0, 4, 0.1, 0), (10, 1, 0.1, 0), (10, 4, 1.5, 0), (10, 4, -0.1, 0), (10, 4, 0.1, -1)],
)
def test_generate_dataset_argument_errors(args):
    with pytest.raises(ValueError):
        generate_dataset(*args)


def test_missing_inputs_are_synthesised():
    cfg = SynthConfig(missing_view_rate=1.0, missing_section_rate=1.0)
    studies = generate_dataset(20, 4, 0.2, seed=4, cfg=cfg)
    for s in studies:
        assert s.view2 is not None and s.sect2 is not None
        assert np.mean(np.abs(s.view2 - s.view1)) <= cfg.jitter_amplitude


def test_synthesize_missing_view_contract():
    study = generate_dataset(1, 3, 0.0, seed=0)[0]
    from dataclasses import replace

    bare = replace(study, view2=None)
    out = synthesize_missing_view(bare, seed=7, amplitude=0.05)
    again = synthesize_missing_view(bare, seed=7, amplitude=0.05)
    assert out.view2.shape == study.view1.shape
    assert out.view2.tobytes() == again.view2.tobytes()
    assert np.mean(np.abs(out.view2 - study.view1)) <= 0.05
    assert np.max(np.abs(out.view2 - study.view1)) <= 0.05 + 1e-15
    sect = synthesize_missing_section(replace(study, sect2=None), seed=7)
    assert sect.sect2.shape == study.sect1.shape


def test_stack_studies_refuses_incomplete_studies():
    from dataclasses import replace

    study = generate_dataset(1, 3, 0.0, seed=0)[0]
    with pytest.raises(ValueError):
        stack_studies([replace(study, view2=None)])
    stacked = stack_studies([study, study])
    assert stacked["view1"].shape == (2, 64)


def test_class_prompts_are_noise_free_prototype_readouts():
    world = SynthWorld.build(4, seed=3)
    prompts = class_prompt_features(4, 3)
    np.testing.assert_array_equal(prompts, world.prototypes @ world.text_map)


# -- perturbations ----------------------------------------------------------------


def test_severity_table():
    assert SEVERITY_TABLE["blur"][1:] == (0.5, 1.0, 1.5, 2.0, 3.0)
    assert SEVERITY_TABLE["noise"][1:] == (0.02, 0.05, 0.1, 0.2, 0.4)
    assert SEVERITY_TABLE["brightness_contrast"][1:] == (0.05, 0.10, 0.20, 0.35, 0.50)
    assert SEVERITY_TABLE["rotation"][1:] == (5.0, 10.0, 15.0, 25.0, 45.0)


@given(grids, st.sampled_from(PERTURB_KINDS), st.integers(0, 2**31))
def test_severity_zero_is_identity(img, kind, seed):
    assert np.array_equal(perturb_image(img, PerturbSpec(kind, 0, seed)), img)


@given(grids, st.sampled_from(PERTURB_KINDS), st.integers(1, 5), st.integers(0, 2**31))
def test_perturbations_stay_in_range_and_are_reproducible(img, kind, severity, seed):
    spec = PerturbSpec(kind, severity, seed)
    out = perturb_image(img, spec)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert perturb_image(img, spec).tobytes() == out.tobytes()


def test_quarter_turns_compose_exactly():
    img = np.random.default_rng(0).random((5, 7))
    out = img
    for _ in range(4):
        out = rotate(out, 90)
    assert np.array_equal(out, img)
    assert np.array_equal(rotate(img, 0), img)


def test_rotation_zero_fills_corners():
    img = np.ones((8, 8))
    out = rotate(img, 45)
    assert out[0, 0] == 0.0 and out[4, 4] == pytest.approx(1.0)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5, 2.0, 3.0])
def test_blur_kernel_normalised(sigma):
    k = gaussian_kernel(sigma)
    assert len(k) == 2 * math.ceil(2 * sigma) + 1
    assert abs(k.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("severity", [1, 3, 5])
def test_blur_preserves_constant_grid(severity):
    img = np.full((6, 6), 0.37)
    np.testing.assert_allclose(perturb_image(img, PerturbSpec("blur", severity)), img, atol=1e-12)


def test_noise_std_follows_table():
    img = np.full((200, 200), 0.5)
    out = perturb_image(img, PerturbSpec("noise", 2, seed=1))
    assert np.std(out - img) == pytest.approx(0.05, rel=0.05)


def test_brightness_contrast_is_affine():
    img = np.linspace(0.3, 0.7, 16).reshape(4, 4)
    out = perturb_image(img, PerturbSpec("brightness_contrast", 1, seed=2))
    alpha = np.polyfit(img.ravel(), out.ravel(), 1)[0]
    assert abs(alpha) == pytest.approx(1.0 + math.copysign(0.05, alpha - 1.0), abs=1e-9)


def test_perturb_spec_validation():
    with pytest.raises(ValueError):
        PerturbSpec("jpeg", 1)
    with pytest.raises(ValueError):
        PerturbSpec("blur", 6)
    with pytest.raises(ValueError):
        perturb_image(np.array([[np.nan]]), PerturbSpec("blur", 1))


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_perturb_images_uses_independent_per_image_seeds(seed):
    imgs = np.full((3, 6, 6), 0.5)
    out = perturb_images(imgs, "noise", 3, seed)
    assert out[0].tobytes() != out[1].tobytes()
    assert perturb_images(imgs, "noise", 3, seed).tobytes() == out.tobytes()
