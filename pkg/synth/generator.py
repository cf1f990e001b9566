#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Procedural SEM-like images: periodic wafer backgrounds plus one rendered
defect per image, with a pixel-exact mask. Every function is a pure function
of its seed.
"""


from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from skimage.draw import disk, ellipse, line_aa

from model import DEFAULT_CLASSES, GOOD_CLASS
from numerics import Tensor
from numerics.errors import ConfigError

IMAGE_SIZE = 64
BACKGROUND_STYLES = ('grating', 'grid', 'dots', 'plain')

NOISE_STD = 0.02
BACKGROUND_LOW = 0.2
BACKGROUND_HIGH = 0.75
PLAIN_LEVEL = 0.5

# Defects stay clear of the rows used by the banner artifact.
BANNER_ROWS = 4
PLACEMENT_MARGIN = 10

# Scratches follow the stripe direction within this angle.
MAX_SCRATCH_ANGLE = np.deg2rad(6.0)
SCRATCH_LENGTH = (46, 52)
SCRATCH_WIDTH = (3, 4)

RenderResult = Tuple[np.ndarray, Tensor]  # (bool mask, rendered image)


class SemSample(NamedTuple):
    image: Tensor  # H×W in [0, 1]
    mask: np.ndarray  # H×W uint8 in {0, 1}
    label: int  # index into DEFAULT_CLASSES
    seed: int


class GratingParams(NamedTuple):
    period: int
    phase: float
    vertical: bool  # stripes run top to bottom, intensity varies along columns


def grating_params(seed: int) -> GratingParams:
    rng = np.random.default_rng([seed, 10])
    return GratingParams(
        period=int(rng.integers(4, 17)),
        phase=float(rng.uniform(0.0, 1.0)),
        vertical=bool(rng.integers(2) == 0)
    )


def _wave(coordinates: np.ndarray, period: int, phase: float) -> np.ndarray:
    return 0.5 + 0.5 * np.cos(2.0 * np.pi * (coordinates / period + phase))


def generate_background(seed: int, style: str, size: int = IMAGE_SIZE) -> Tensor:
    if style not in BACKGROUND_STYLES:
        raise ConfigError(f'unknown background style {style!r}, expected one of {BACKGROUND_STYLES}')

    params = grating_params(seed)
    rows, columns = np.mgrid[0:size, 0:size].astype(np.float64)
    along = columns if params.vertical else rows

    if style == 'plain':
        clean: np.ndarray = np.full((size, size), PLAIN_LEVEL)
    else:
        if style == 'grating':
            pattern = _wave(along, params.period, params.phase)
        elif style == 'grid':
            pattern = np.maximum(
                _wave(rows, params.period, params.phase), _wave(columns, params.period, params.phase)
            ) ** 4
        else:
            pattern = (_wave(rows, params.period, params.phase) * _wave(columns, params.period, params.phase)) ** 2
        clean = BACKGROUND_LOW + (BACKGROUND_HIGH - BACKGROUND_LOW) * pattern

    noise = np.random.default_rng([seed, 11]).normal(0.0, NOISE_STD, size=(size, size))
    return np.clip(clean + noise, 0.0, 1.0).astype(np.float32)


def _center(rng: np.random.Generator, size: int, radius: int) -> Tuple[int, int]:
    low = max(PLACEMENT_MARGIN, radius + BANNER_ROWS + 1)
    return int(rng.integers(low, size - low)), int(rng.integers(low, size - low))


def _paint(background: Tensor, mask: np.ndarray, value: float, rng: np.random.Generator) -> Tensor:
    image = background.copy()
    image[mask] = np.clip(value + rng.normal(0.0, NOISE_STD, size=int(mask.sum())), 0.0, 1.0)
    return image


def _blend(background: Tensor, coverage: Tensor, value: float, rng: np.random.Generator) -> Tensor:
    """Mixes `value` into the background with per-pixel weights in [0, 1]"""
    paint = np.clip(value + rng.normal(0.0, NOISE_STD, size=background.shape), 0.0, 1.0)
    return np.clip(background * (1.0 - coverage) + paint * coverage, 0.0, 1.0)


def _oriented(frame: np.ndarray, pattern: GratingParams) -> np.ndarray:
    """Frames are indexed [across, along]; `along` follows the grating stripes."""
    return frame.T if pattern.vertical else frame


def stroke_coverage(size: int, start: Tuple[int, int], end: Tuple[int, int], width: int) -> Tensor:
    """
    Coverage of an anti-aliased stroke `width` pixels thick, in [across, along]
    coordinates: parallel Wu lines one pixel apart, summed and clipped.
    """
    assert width >= 1
    coverage = np.zeros((size, size), dtype=np.float64)
    for offset in range(width):
        rr, cc, weights = line_aa(start[0] + offset, start[1], end[0] + offset, end[1])
        inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        np.add.at(coverage, (rr[inside], cc[inside]), weights[inside])
    return np.clip(coverage, 0.0, 1.0)


def _render_linear_scratch(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    size = background.shape[0]
    length = int(rng.integers(SCRATCH_LENGTH[0], SCRATCH_LENGTH[1] + 1))
    width = int(rng.integers(SCRATCH_WIDTH[0], SCRATCH_WIDTH[1] + 1))
    drift = int(round(length * np.tan(rng.uniform(-MAX_SCRATCH_ANGLE, MAX_SCRATCH_ANGLE))))

    start_along = int(rng.integers(BANNER_ROWS + 1, size - BANNER_ROWS - 1 - length))
    start_across = int(rng.integers(PLACEMENT_MARGIN + 6, size - PLACEMENT_MARGIN - 6 - width))
    coverage = _oriented(
        stroke_coverage(size, (start_across, start_along), (start_across + drift, start_along + length), width),
        pattern
    )
    return coverage >= 0.5, _blend(background, coverage, 0.97, rng)


def _render_fish_scale_scratch(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    size = background.shape[0]
    scales = int(rng.integers(6, 9))
    spacing = 6
    # first and last scale centers stay inside the banner-free rows
    start_along = int(rng.integers(BANNER_ROWS + 5, size - BANNER_ROWS - 5 - spacing * (scales - 1)))
    across = int(rng.integers(PLACEMENT_MARGIN, size - PLACEMENT_MARGIN))

    frame = np.zeros(background.shape, dtype=bool)
    for index in range(scales):
        rr, cc = ellipse(across, start_along + index * spacing, 3, 5, shape=frame.shape)
        frame[rr, cc] = True
    mask = _oriented(frame, pattern)
    return mask, _paint(background, mask, 0.92, rng)


def _render_scratch(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    if rng.uniform() < 0.5:
        return _render_linear_scratch(background, rng, pattern)
    return _render_fish_scale_scratch(background, rng, pattern)


def _render_disk(background: Tensor, rng: np.random.Generator, radii: Tuple[int, int]) -> np.ndarray:
    radius = int(rng.integers(radii[0], radii[1] + 1))
    mask = np.zeros(background.shape, dtype=bool)
    rr, cc = disk(_center(rng, background.shape[0], radius), radius, shape=mask.shape)
    mask[rr, cc] = True
    return mask


def _render_particle(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    mask = _render_disk(background, rng, (5, 8))
    return mask, _paint(background, mask, 0.95, rng)


def _render_hole(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    mask = _render_disk(background, rng, (6, 10))
    return mask, _paint(background, mask, 0.04, rng)


def _render_infilm(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    mask = _render_disk(background, rng, (4, 6))
    image = background.copy()
    image[mask] = np.clip(image[mask] + rng.uniform(0.1, 0.14), 0.0, 1.0)
    return mask, image


def stripe_centers(pattern: GratingParams, low: int, high: int) -> List[int]:
    """Pixel positions in [low, high] of the bright stripe centers of a grating"""
    first = int(np.ceil(low / pattern.period + pattern.phase))
    last = int(np.floor(high / pattern.period + pattern.phase))
    return [int(round((k - pattern.phase) * pattern.period)) for k in range(first, last + 1)]


def _render_bridge(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    """A bar across the stripes, from one bright stripe center to the next"""
    size = background.shape[0]
    period = pattern.period
    candidates = [
        position for position in stripe_centers(pattern, PLACEMENT_MARGIN, size - PLACEMENT_MARGIN - period)
        if PLACEMENT_MARGIN <= position <= size - PLACEMENT_MARGIN - period
    ]
    start = candidates[int(rng.integers(len(candidates)))]
    thickness = int(rng.integers(4, 8))
    offset = int(rng.integers(PLACEMENT_MARGIN, size - PLACEMENT_MARGIN - thickness))

    frame = np.zeros(background.shape, dtype=bool)
    frame[start:start + period + 1, offset:offset + thickness] = True
    mask = _oriented(frame, pattern)
    return mask, _paint(background, mask, 0.9, rng)


def _render_copper_residue(background: Tensor, rng: np.random.Generator, pattern: GratingParams) -> RenderResult:
    center_row, center_column = _center(rng, background.shape[0], 12)
    mask = np.zeros(background.shape, dtype=bool)
    for _ in range(int(rng.integers(4, 8))):
        offset = rng.integers(-6, 7, size=2)
        rr, cc = disk(
            (center_row + int(offset[0]), center_column + int(offset[1])),
            int(rng.integers(3, 7)),
            shape=mask.shape
        )
        mask[rr, cc] = True
    return mask, _paint(background, mask, 0.97, rng)


_RENDERERS: Dict[str, Callable[[Tensor, np.random.Generator, GratingParams], RenderResult]] = {
    'bridge': _render_bridge,
    'copper_residue': _render_copper_residue,
    'hole': _render_hole,
    'infilm': _render_infilm,
    'particle': _render_particle,
    'scratch': _render_scratch,
}


def generate_defect(class_name: str, background: Tensor, seed: int) -> SemSample:
    if class_name == GOOD_CLASS or class_name not in _RENDERERS:
        raise ConfigError(f'{class_name!r} is not a defect class')
    mask, image = _RENDERERS[class_name](background, np.random.default_rng([seed, 20]), grating_params(seed))
    return SemSample(
        image=image.astype(np.float32),
        mask=mask.astype(np.uint8),
        label=DEFAULT_CLASSES.index(class_name),
        seed=seed
    )


def add_banner(image: Tensor, seed: int) -> Tensor:
    """Bright text-like dashes along the top and bottom rows"""
    rng = np.random.default_rng([seed, 40])
    result = image.copy()
    size = image.shape[1]
    for rows in (slice(0, BANNER_ROWS - 1), slice(image.shape[0] - BANNER_ROWS + 1, image.shape[0])):
        column = int(rng.integers(0, 3))
        while column < size:
            width = int(rng.integers(1, 4))
            result[rows, column:column + width] = 0.95
            column += width + int(rng.integers(1, 3))
    return result


def generate_sample(
        class_name: str,
        seed: int,
        style: Optional[str] = None,
        banner: bool = False,
        size: int = IMAGE_SIZE
) -> SemSample:
    if class_name not in DEFAULT_CLASSES:
        raise ConfigError(f'unknown class {class_name!r}')
    if style is None:
        style = BACKGROUND_STYLES[int(np.random.default_rng([seed, 12]).integers(len(BACKGROUND_STYLES)))]

    background = generate_background(seed, style, size)
    if class_name == GOOD_CLASS:
        sample = SemSample(
            image=background,
            mask=np.zeros(background.shape, dtype=np.uint8),
            label=DEFAULT_CLASSES.index(GOOD_CLASS),
            seed=seed
        )
    else:
        sample = generate_defect(class_name, background, seed)

    if banner:
        sample = sample._replace(image=add_banner(sample.image, seed))
    return sample
