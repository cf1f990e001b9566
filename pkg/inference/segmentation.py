#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Pixel-level defect maps.

F path: the patch tokens of every level go through a trainable linear map
into the joint space and are compared against the class embeddings by cosine
similarity. V path: the accumulated V-V features are multiplied channel-wise
with every class embedding, the class-mean of the product (shared, redundant
activation) is removed and the rest is summed over channels. Both paths give
per-level class distributions that are summed and reduced to an anomaly score
per token: the non-good probability mass.
"""


from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from skimage.transform import resize

from inference import DEFAULT_TAU
from model.text import TextEmbeddingSet
from model.vit import EncodedImage
from numerics import Tensor, TensorMap
from numerics.errors import ShapeError
from numerics.kernels import cosine_matrix, l2_normalize, linear, softmax

TRANSFORM_INIT_STD = 0.01


class TransformationLayer(NamedTuple):
    weights: List[Tensor]  # m × (C×D)
    biases: List[Tensor]  # m × D
    trainable: bool = True

    @property
    def num_levels(self) -> int:
        return len(self.weights)

    @staticmethod
    def identity(num_levels: int, width: int) -> 'TransformationLayer':
        """The untrained map, used when the transformation is ablated"""
        return TransformationLayer(
            weights=[np.eye(width, dtype=np.float32) for _ in range(num_levels)],
            biases=[np.zeros(width, dtype=np.float32) for _ in range(num_levels)],
            trainable=False
        )

    @staticmethod
    def initial(num_levels: int, width: int, seed: int) -> 'TransformationLayer':
        rng = np.random.default_rng([seed, 2])
        return TransformationLayer(
            weights=[
                (np.eye(width) + rng.normal(0.0, TRANSFORM_INIT_STD, size=(width, width))).astype(np.float32)
                for _ in range(num_levels)
            ],
            biases=[np.zeros(width, dtype=np.float32) for _ in range(num_levels)]
        )

    def select(self, indices: Sequence[int]) -> 'TransformationLayer':
        return TransformationLayer(
            weights=[self.weights[i] for i in indices],
            biases=[self.biases[i] for i in indices],
            trainable=self.trainable
        )

    def to_params(self) -> TensorMap:
        params: TensorMap = {}
        for j, (weight, bias) in enumerate(zip(self.weights, self.biases), start=1):
            params[f'seg.transform.{j}.w'] = weight
            params[f'seg.transform.{j}.b'] = bias
        return params

    @staticmethod
    def from_params(params: TensorMap, num_levels: int) -> 'TransformationLayer':
        return TransformationLayer(
            weights=[np.array(params[f'seg.transform.{j}.w']) for j in range(1, num_levels + 1)],
            biases=[np.array(params[f'seg.transform.{j}.b']) for j in range(1, num_levels + 1)]
        )


class DefectMap(NamedTuple):
    per_level_F: List[Tensor]  # m × (T×N)
    per_level_V: List[Tensor]  # m × (T×N)
    fused_grid: Tensor  # T
    fused_pixels: Tensor  # H×W, in [0, 1]


def restrict_levels(enc: EncodedImage, indices: Sequence[int]) -> EncodedImage:
    return EncodedImage(
        levels=[enc.levels[i] for i in indices],
        cls=[enc.cls[i] for i in indices]
    )


def apply_transformation(levels: EncodedImage, tl: TransformationLayer) -> List[Tensor]:
    if len(levels.levels) != tl.num_levels:
        raise ShapeError(f'{len(levels.levels)} feature levels for {tl.num_levels} transformations')
    return [
        linear(level.F[1:], weight, bias)
        for level, weight, bias in zip(levels.levels, tl.weights, tl.biases)
    ]


def _check_dimension(tokens: Tensor, t: TextEmbeddingSet):
    if tokens.ndim != 2 or tokens.shape[1] != t.embeddings.shape[1]:
        raise ShapeError(
            f'token width {tokens.shape[-1]} does not match joint dimension {t.embeddings.shape[1]}'
        )


def defect_map_F(
        F_primes: Sequence[Tensor],
        t: TextEmbeddingSet,
        tau: float = DEFAULT_TAU
) -> Tuple[List[Tensor], Tensor]:
    assert tau > 0
    per_level: List[Tensor] = []
    for tokens in F_primes:
        _check_dimension(tokens, t)
        per_level.append(softmax(cosine_matrix(tokens, t.embeddings) / tau, axis=1))
    return per_level, np.sum(per_level, axis=0)


def value_path_scores(V_tokens: Tensor, text: Tensor) -> Tensor:
    """Redundancy-free class scores of one level, T×N, rows summing to zero"""
    normalized = l2_normalize(V_tokens, axis=1)
    multiplied = normalized[:, None, :] * l2_normalize(text, axis=1)[None, :, :]
    redundant = np.mean(multiplied, axis=1, keepdims=True)
    return np.sum(multiplied - redundant, axis=2)


def defect_map_V(
        levels: EncodedImage,
        t: TextEmbeddingSet,
        tau: float = DEFAULT_TAU
) -> Tuple[List[Tensor], Tensor]:
    assert tau > 0
    per_level: List[Tensor] = []
    for level in levels.levels:
        tokens = level.V[1:]
        _check_dimension(tokens, t)
        per_level.append(softmax(value_path_scores(tokens, t.embeddings) / tau, axis=1))
    return per_level, np.sum(per_level, axis=0)


def fuse_maps(A_F: Tensor, A_V: Tensor, good_index: int, num_levels: int) -> Tuple[Tensor, Tensor]:
    """
    Returns the fused class map A = A_F + A_V and the anomaly grid, the
    non-good mass of A divided by its maximum 2·num_levels.
    """
    if A_F.shape != A_V.shape or A_F.ndim != 2:
        raise ShapeError(f'cannot fuse maps of shapes {A_F.shape} and {A_V.shape}')
    if not 0 <= good_index < A_F.shape[1]:
        raise ShapeError(f'good index {good_index} out of {A_F.shape[1]} classes')
    assert num_levels >= 1

    fused = A_F + A_V
    defect_mass = np.sum(fused, axis=1) - fused[:, good_index]
    return fused, np.clip(defect_mass / (2 * num_levels), 0.0, 1.0)


def upsample_to_pixels(grid: Tensor, image_size: int) -> Tensor:
    side = int(round(np.sqrt(grid.shape[0])))
    if grid.ndim != 1 or side * side != grid.shape[0]:
        raise ShapeError(f'{grid.shape} is not a square token grid')
    # order=1 is bilinear; edge mode keeps values inside [min, max] of the grid
    pixels = resize(
        grid.reshape(side, side).astype(np.float64),
        (image_size, image_size),
        order=1,
        mode='edge',
        anti_aliasing=False,
        preserve_range=True
    )
    return np.clip(pixels, grid.min(), grid.max()).astype(np.float32)


def segment_image(
        enc: EncodedImage,
        tl: TransformationLayer,
        t: TextEmbeddingSet,
        image_size: int,
        tau: float = DEFAULT_TAU
) -> DefectMap:
    per_level_F, A_F = defect_map_F(apply_transformation(enc, tl), t, tau)
    per_level_V, A_V = defect_map_V(enc, t, tau)
    _, grid = fuse_maps(A_F, A_V, t.good_index, len(enc.levels))
    return DefectMap(
        per_level_F=per_level_F,
        per_level_V=per_level_V,
        fused_grid=grid,
        fused_pixels=upsample_to_pixels(grid, image_size)
    )
