#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Image-level classification: a similarity-based probability (max token score
over levels, per class), a linear head over the concatenated CLS tokens, and
their convex fusion.
"""


from typing import NamedTuple, Sequence

import numpy as np

from inference import DEFAULT_ALPHA, DEFAULT_TAU
from inference.segmentation import TransformationLayer, apply_transformation
from model.text import TextEmbeddingSet
from model.vit import EncodedImage
from numerics import Tensor, TensorMap
from numerics.errors import ConfigError, DataError, ShapeError
from numerics.kernels import cosine_matrix, linear, softmax

PS_SOURCES = ('patches', 'cls')

SIMPLEX_TOLERANCE = 1e-3
HEAD_INIT_STD = 0.01


class ClassifierHead(NamedTuple):
    W: Tensor  # (m·C)×N
    b: Tensor  # N

    @staticmethod
    def initial(input_dim: int, num_classes: int, seed: int) -> 'ClassifierHead':
        rng = np.random.default_rng([seed, 3])
        return ClassifierHead(
            W=rng.normal(0.0, HEAD_INIT_STD, size=(input_dim, num_classes)).astype(np.float32),
            b=np.zeros(num_classes, dtype=np.float32)
        )

    def to_params(self) -> TensorMap:
        return {'cls.head.w': self.W, 'cls.head.b': self.b}

    @staticmethod
    def from_params(params: TensorMap) -> 'ClassifierHead':
        return ClassifierHead(W=np.array(params['cls.head.w']), b=np.array(params['cls.head.b']))


class FusionConfig(NamedTuple):
    alpha: float = DEFAULT_ALPHA

    def validate(self) -> 'FusionConfig':
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f'alpha must lie in [0, 1], got {self.alpha}')
        return self


class ClassProbabilities(NamedTuple):
    p_s: Tensor
    p_c: Tensor
    p: Tensor
    predicted: int


def similarity_probability(
        enc: EncodedImage,
        tl: TransformationLayer,
        t: TextEmbeddingSet,
        tau: float = DEFAULT_TAU,
        ps_source: str = 'patches'
) -> Tensor:
    """
    With ps_source='patches' the score of a class at one level is its best
    cosine similarity over the transformed patch tokens; with 'cls' it is the
    cosine similarity of the transformed CLS token. The image score is the
    maximum over levels.
    """
    if ps_source not in PS_SOURCES:
        raise ConfigError(f'ps-source must be one of {PS_SOURCES}, got {ps_source!r}')
    assert tau > 0

    if ps_source == 'patches':
        level_tokens = apply_transformation(enc, tl)
    else:
        if len(enc.levels) != tl.num_levels:
            raise ShapeError(f'{len(enc.levels)} feature levels for {tl.num_levels} transformations')
        level_tokens = [
            linear(level.F[:1], weight, bias) for level, weight, bias in zip(enc.levels, tl.weights, tl.biases)
        ]

    level_scores = [np.max(cosine_matrix(tokens, t.embeddings), axis=0) for tokens in level_tokens]
    return softmax(np.max(level_scores, axis=0) / tau)


def concatenate_cls(cls_tokens: Sequence[Tensor]) -> Tensor:
    return np.concatenate([np.ravel(token) for token in cls_tokens])


def head_probability(cls_tokens: Sequence[Tensor], head: ClassifierHead) -> Tensor:
    features = concatenate_cls(cls_tokens)
    if features.shape[0] != head.W.shape[0]:
        raise ShapeError(f'head expects {head.W.shape[0]} features, got {features.shape[0]}')
    return softmax(linear(features, head.W, head.b))


def _check_simplex(p: Tensor, name: str):
    if p.ndim != 1 or np.any(p < -SIMPLEX_TOLERANCE) or abs(float(np.sum(p)) - 1.0) > SIMPLEX_TOLERANCE:
        raise DataError(f'{name} is not a probability vector')


def fuse_probability(p_s: Tensor, p_c: Tensor, cfg: FusionConfig) -> ClassProbabilities:
    if p_s.shape != p_c.shape:
        raise ShapeError(f'cannot fuse probabilities of shapes {p_s.shape} and {p_c.shape}')
    _check_simplex(p_s, 'P_S')
    _check_simplex(p_c, 'P_C')
    cfg.validate()

    if cfg.alpha == 1.0:
        p = p_c.copy()
    elif cfg.alpha == 0.0:
        p = p_s.copy()
    else:
        p = (1.0 - cfg.alpha) * p_s + cfg.alpha * p_c
    # np.argmax keeps the first maximum: ties go to the lowest class index
    return ClassProbabilities(p_s=p_s, p_c=p_c, p=p, predicted=int(np.argmax(p)))


def classify_image(
        enc: EncodedImage,
        tl: TransformationLayer,
        head: ClassifierHead,
        t: TextEmbeddingSet,
        fusion: FusionConfig,
        tau: float = DEFAULT_TAU,
        ps_source: str = 'patches'
) -> ClassProbabilities:
    return fuse_probability(
        similarity_probability(enc, tl, t, tau, ps_source),
        head_probability(enc.cls, head),
        fusion
    )
