"""Augmentations, parameter recording and view-pair construction."""

import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from eqrecon.views import (
    DEFAULT_RANGES,
    FAMILIES,
    PARAM_NAMES,
    SpecError,
    TransformParams,
    TransformSpec,
    apply,
    bilinear_sample,
    color_jitter,
    gaussian_blur,
    hflip,
    hsv_to_rgb,
    make_view_pair,
    rgb_to_hsv,
    rotate,
    sample_params,
)


@pytest.fixture
def images():
    return np.random.default_rng(3).uniform(0, 1, (6, 3, 12, 12)).astype(np.float32)


def identity_ranges():
    return {
        "rotation.angle": (0.0, 0.0),
        "color.brightness": (1.0, 1.0),
        "color.contrast": (1.0, 1.0),
        "color.saturation": (1.0, 1.0),
        "color.hue": (0.0, 0.0),
        "blur.sigma": (0.0, 0.0),
        "translation.dx": (0.0, 0.0),
        "translation.dy": (0.0, 0.0),
        "crop.scale": (1.0, 1.0),
        "crop.cx": (0.5, 0.5),
        "crop.cy": (0.5, 0.5),
    }


class TestSpec:
    def test_rejects_empty(self):
        with pytest.raises(SpecError):
            TransformSpec(())

    def test_rejects_inverted_range(self):
        with pytest.raises(SpecError):
            TransformSpec(("rotation",), {"rotation.angle": (10.0, -10.0)})

    def test_rejects_unknown_family(self):
        with pytest.raises(SpecError):
            TransformSpec(("shear",))

    def test_families_in_canonical_order(self):
        assert TransformSpec(("color", "rotation")).families == ("rotation", "color")

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_normalization_round_trip(self, seed):
        spec = TransformSpec(FAMILIES)
        p = sample_params(spec, seed)
        z = spec.normalize(p)
        assert np.all(z >= -1.0) and np.all(z <= 1.0)
        back = spec.denormalize(z)
        np.testing.assert_allclose(back.vector(), p.vector(), atol=1e-6)


class TestSampleParams:
    def test_flip_only_deterministic(self):
        spec = TransformSpec(("flip",))
        a = sample_params(spec, 11)
        assert a.values["flip"][0] in (0.0, 1.0)
        assert sample_params(spec, 11) == a

    def test_rotation_uniform(self):
        spec = TransformSpec(("rotation",))
        draws = np.array([sample_params(spec, (5, i)).values["rotation"][0] for i in range(10_000)])
        assert draws.min() >= -90.0 and draws.max() <= 90.0
        assert abs(draws.mean()) < 3.0

    def test_all_families(self):
        p = sample_params(TransformSpec(FAMILIES), 0)
        assert len(p.values) == 6
        for fam in FAMILIES:
            assert len(p.values[fam]) == len(PARAM_NAMES[fam])

    def test_within_ranges(self):
        spec = TransformSpec(FAMILIES)
        for s in range(200):
            p = sample_params(spec, s)
            for key, v in zip(spec.param_keys(), p.vector()):
                if key != "flip.flip":
                    lo, hi = DEFAULT_RANGES[key]
                    assert lo <= v <= hi


class TestApply:
    def test_identity_is_exact(self, images):
        out = apply(images, TransformParams.identity())
        assert np.array_equal(out, images)

    def test_rot90_permutation(self):
        img = np.arange(48, dtype=np.float32).reshape(3, 4, 4) / 48.0
        out = rotate(img, 90.0)
        n = 4
        for i in range(n):
            for j in range(n):
                assert np.array_equal(out[:, i, j], img[:, j, n - 1 - i])

    def test_rot90_interpolation_agrees_with_permutation(self):
        img = np.random.default_rng(0).uniform(0, 1, (3, 9, 9)).astype(np.float32)
        exact = rotate(img, 90.0)
        interp = rotate(img, 90.0, exact_right_angles=False)
        np.testing.assert_allclose(interp, exact, atol=1e-5)

    def test_hflip_row(self):
        img = np.zeros((3, 1, 4), np.float32)
        img[:] = [0.1, 0.2, 0.3, 0.4]
        np.testing.assert_array_equal(hflip(img)[0, 0], np.float32([0.4, 0.3, 0.2, 0.1]))

    def test_two_flips_compose_to_identity(self, images):
        flip = TransformParams({"flip": (1.0,)})
        assert np.array_equal(apply(apply(images, flip), flip), images)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_output_in_unit_range(self, seed):
        img = np.random.default_rng(seed).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        p = sample_params(TransformSpec(FAMILIES), seed)
        out = apply(img, p)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_small_blur_is_noop(self, images):
        assert np.array_equal(gaussian_blur(images[0], 0.05), images[0])

    def test_blur_keeps_constant_image(self):
        img = np.full((3, 8, 8), 0.3)
        np.testing.assert_allclose(gaussian_blur(img, 1.5), 0.3)

    def test_brightness_scales(self, images):
        out = color_jitter(images, 0.5, 1.0, 1.0, 0.0)
        np.testing.assert_allclose(out, images * 0.5, atol=1e-6)

    def test_color_order_brightness_before_contrast(self):
        img = np.full((1, 3, 2, 2), 0.4, np.float32)
        img[0, :, 0, 0] = 0.8
        # contrast pulls towards the mean luma of the already-brightened image
        out = color_jitter(img, 1.2, 0.5, 1.0, 0.0)
        b = img * 1.2
        mean = b.mean()
        np.testing.assert_allclose(out, np.clip((b - mean) * 0.5 + mean, 0, 1), atol=1e-6)


class TestColorSpace:
    def test_against_colorsys(self):
        rgb = np.random.default_rng(1).uniform(0, 1, (3, 5, 7))
        hsv = rgb_to_hsv(rgb)
        for i in range(5):
            for j in range(7):
                ref = colorsys.rgb_to_hsv(*rgb[:, i, j])
                np.testing.assert_allclose(hsv[:, i, j], ref, atol=1e-9)
        np.testing.assert_allclose(hsv_to_rgb(hsv), rgb, atol=1e-9)


class TestBilinear:
    def test_matches_scipy_with_zero_fill(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (1, 3, 10, 10)).astype(np.float32)
        sy = rng.uniform(-2, 11, (1, 10, 10))
        sx = rng.uniform(-2, 11, (1, 10, 10))
        out = bilinear_sample(img, sy, sx)
        for c in range(3):
            ref = ndimage.map_coordinates(img[0, c].astype(np.float64), [sy[0], sx[0]], order=1, mode="grid-constant", cval=0.0)
            np.testing.assert_allclose(out[0, c], ref, atol=1e-5)


class TestViewPair:
    def test_identity_relative(self, images):
        spec = TransformSpec(FAMILIES[:-1], identity_ranges())
        first = TransformSpec(("rotation", "color"))
        pair = make_view_pair(images, spec, seed=4, first_spec=first)
        assert np.array_equal(pair.v1, pair.v2)
        np.testing.assert_array_equal(pair.targets(), 0.0)

    def test_flip_only(self, images):
        spec = TransformSpec(("flip",), flip_prob=1.0)
        pair = make_view_pair(images, spec, seed=0, first_spec=TransformSpec(("rotation",)))
        assert np.array_equal(pair.v2, pair.v1[..., ::-1])
        np.testing.assert_array_equal(pair.targets(), 1.0)

    def test_deterministic(self, images):
        spec = TransformSpec(("rotation", "color"))
        a = make_view_pair(images, spec, seed=9, epoch=2)
        b = make_view_pair(images, spec, seed=9, epoch=2)
        assert a.v1.tobytes() == b.v1.tobytes() and a.v2.tobytes() == b.v2.tobytes()
        assert a.params == b.params

    def test_batching_does_not_change_pairs(self, images):
        spec = TransformSpec(("rotation", "color", "crop"))
        full = make_view_pair(images, spec, seed=1, epoch=3)
        part = make_view_pair(images[2:4], spec, seed=1, epoch=3, indices=[2, 3])
        assert np.array_equal(full.v2[2:4], part.v2)

    def test_epoch_changes_pairs(self, images):
        spec = TransformSpec(("rotation",))
        a = make_view_pair(images, spec, seed=1, epoch=1)
        b = make_view_pair(images, spec, seed=1, epoch=2)
        assert a.params != b.params

    def test_shapes_and_families(self, images):
        spec = TransformSpec(("rotation", "blur", "flip"))
        pair = make_view_pair(images, spec, seed=0)
        assert pair.v1.shape == pair.v2.shape == images.shape
        assert all(p.families == spec.families for p in pair.params)
        assert pair.targets().shape == (len(images), spec.dim)
