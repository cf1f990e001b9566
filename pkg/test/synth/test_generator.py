#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from math import pi

import numpy as np
import pytest
from scipy.ndimage import binary_fill_holes
from skimage.measure import label as connected_components, regionprops

from model import DEFAULT_CLASSES, GOOD_CLASS
from numerics.errors import ConfigError
from synth.generator import (
    BACKGROUND_STYLES,
    IMAGE_SIZE,
    add_banner,
    generate_background,
    generate_defect,
    generate_sample,
    grating_params,
    stripe_centers,
    stroke_coverage
)


def bounding_box(mask: np.ndarray):
    rows, columns = np.nonzero(mask)
    return rows.max() - rows.min() + 1, columns.max() - columns.min() + 1


def first_period(profile: np.ndarray) -> int:
    """Lag of the first strong autocorrelation peak after the first negative lobe"""
    centered = profile - profile.mean()
    variance = float(np.mean(centered * centered))
    lags = np.arange(1, 40)
    r = np.array([np.mean(centered[:-lag] * centered[lag:]) / variance for lag in lags])
    seen_negative = False
    for i in range(1, len(lags) - 1):
        seen_negative = seen_negative or r[i - 1] < 0
        if seen_negative and r[i] > 0.5 and r[i] >= r[i - 1] and r[i] >= r[i + 1]:
            return int(lags[i])
    raise AssertionError('no periodic peak found')


def test_samples_are_deterministic():
    for class_name in DEFAULT_CLASSES:
        first = generate_sample(class_name, seed=17, banner=True)
        second = generate_sample(class_name, seed=17, banner=True)
        assert first.image.tobytes() == second.image.tobytes()
        assert first.mask.tobytes() == second.mask.tobytes()
        assert first.label == second.label == DEFAULT_CLASSES.index(class_name)


def test_backgrounds():
    for style in BACKGROUND_STYLES:
        background = generate_background(3, style)
        assert background.shape == (IMAGE_SIZE, IMAGE_SIZE)
        assert background.dtype == np.float32
        assert 0.0 <= float(background.min()) <= float(background.max()) <= 1.0

    with pytest.raises(expected_exception=ConfigError):
        generate_background(3, 'checkerboard')


def test_plain_background():
    for seed in range(5):
        background = generate_background(seed, 'plain')
        assert float(background.mean()) == pytest.approx(0.5, abs=0.01)
        assert float(background.std()) <= 0.03


def test_grating_period():
    for seed in range(10):
        params = grating_params(seed)
        background = generate_background(seed, 'grating')
        profile = background.mean(axis=0) if params.vertical else background.mean(axis=1)
        assert abs(first_period(profile) - params.period) <= 1


def test_scratches_are_long_connected_strokes():
    for seed in range(20):
        sample = generate_sample('scratch', seed)
        components = connected_components(sample.mask, connectivity=2)
        assert components.max() == 1
        height, width = bounding_box(sample.mask)
        assert max(height, width) / min(height, width) >= 4


def test_holes_are_filled_disks():
    for seed in range(20):
        mask = generate_sample('hole', seed).mask.astype(bool)
        assert connected_components(mask, connectivity=2).max() == 1
        assert int(binary_fill_holes(mask).sum()) == int(mask.sum())

        height, width = bounding_box(mask)
        assert height == width
        radius = (height + 1) / 2
        assert int(mask.sum()) == pytest.approx(pi * radius ** 2, rel=0.15)


def test_mask_fraction_and_contrast():
    for class_name in DEFAULT_CLASSES[1:]:
        for style in BACKGROUND_STYLES:
            for seed in range(8):
                background = generate_background(seed, style)
                sample = generate_defect(class_name, background, seed)  # SUT
                mask = sample.mask.astype(bool)

                assert 0.0005 <= float(mask.mean()) <= 0.25
                contrast = float(np.mean(np.abs(sample.image[mask] - background[mask])))
                assert contrast >= (0.03 if class_name == 'infilm' else 0.1)


def test_scratches_follow_the_stripes():
    for seed in range(20):
        params = grating_params(seed)
        mask = generate_sample('scratch', seed, style='grating').mask
        (region,) = regionprops(mask.astype(np.int32))
        # orientation is measured from the row axis
        deviation = abs(region.orientation) if params.vertical else pi / 2 - abs(region.orientation)
        assert deviation <= np.deg2rad(8.0)


def test_scratch_strokes_are_anti_aliased():
    coverage = stroke_coverage(IMAGE_SIZE, (20, 5), (25, 55), 3)
    assert float(coverage.max()) == 1.0
    assert np.any((coverage > 0.0) & (coverage < 1.0))
    assert connected_components(coverage >= 0.5, connectivity=2).max() == 1


def test_bridges_join_neighbouring_stripes():
    for seed in range(20):
        params = grating_params(seed)
        mask = generate_sample('bridge', seed, style='grating').mask
        height, width = bounding_box(mask)
        span, thickness = (width, height) if params.vertical else (height, width)
        assert span == params.period + 1
        assert 4 <= thickness <= 7

        start = int(np.nonzero(mask.any(axis=0) if params.vertical else mask.any(axis=1))[0][0])
        assert start in stripe_centers(params, 0, IMAGE_SIZE)


def test_defect_samples_carry_a_mask():
    for class_name in DEFAULT_CLASSES[1:]:
        for seed in range(5):
            sample = generate_sample(class_name, seed)
            assert sample.label != DEFAULT_CLASSES.index(GOOD_CLASS)
            assert sample.mask.dtype == np.uint8
            assert set(np.unique(sample.mask).tolist()) == {0, 1}

    good = generate_sample(GOOD_CLASS, 0)
    assert not np.any(good.mask)


def test_defects_stay_clear_of_the_banner():
    for class_name in DEFAULT_CLASSES[1:]:
        for seed in range(10):
            sample = generate_sample(class_name, seed, banner=True)
            assert not np.any(sample.mask[:5])
            assert not np.any(sample.mask[-5:])


def test_banner():
    background = generate_background(0, 'plain')
    image = add_banner(background, 0)
    assert np.any(image[:3] != background[:3])
    assert np.any(image[-3:] != background[-3:])
    np.testing.assert_array_equal(image[3:-3], background[3:-3])


def test_unknown_classes():
    background = generate_background(0, 'plain')
    with pytest.raises(expected_exception=ConfigError):
        generate_defect(GOOD_CLASS, background, 0)
    with pytest.raises(expected_exception=ConfigError):
        generate_defect('crack', background, 0)
    with pytest.raises(expected_exception=ConfigError):
        generate_sample('crack', 0)
