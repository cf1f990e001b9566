#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Few-shot fine-tuning of the two trainable parameter groups.

The backbone and the text encoder are frozen, so every support image is
encoded once into a FeatureCache and the losses below only differentiate
through the transformation layer (cosine similarity + softmax + linear map)
and through the classification head (softmax + linear map). Training is
full-batch Adam.
"""


from concurrent.futures import Executor
from logging import getLogger
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from sklearn.preprocessing import StandardScaler

from inference import DEFAULT_TAU
from inference.classification import ClassifierHead
from inference.segmentation import TransformationLayer
from model.config import VitConfig
from model.text import TextEmbeddingSet
from model.vit import EncodedImage, encode_image
from numerics import Tensor, TensorMap
from numerics.errors import ConfigError, DataError, NumericError, ShapeError
from synth.episodes import Episode
from training.adam import AdamConfig, AdamState, adam_step
from training.stats import LossCurveCollector, NullLossCurveCollector

# Patches with at least this fraction of defect pixels take the image label.
DEFECT_PATCH_FRACTION = 0.5

NORM_EPS = 1e-8

logger = getLogger('semshot.training')


class TrainConfig(NamedTuple):
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seg_loss_weight: float = 1.0

    def validate(self) -> 'TrainConfig':
        if self.lr < 0 or self.epochs < 1 or self.seg_loss_weight <= 0:
            raise ConfigError(f'invalid training configuration: {self}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError(f'invalid Adam hyperparameters: {self}')
        return self

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


class FeatureCache(NamedTuple):
    F_tokens: Tensor  # S×m×T×C, CLS dropped
    V_tokens: Tensor  # S×m×T×C, CLS dropped
    cls: Tensor  # S×m×C
    labels: Tensor  # S, class indices
    token_labels: Tensor  # S×T, class indices

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def num_levels(self) -> int:
        return self.F_tokens.shape[1]

    def select_levels(self, indices: Sequence[int]) -> 'FeatureCache':
        chosen = list(indices)
        return FeatureCache(
            F_tokens=self.F_tokens[:, chosen],
            V_tokens=self.V_tokens[:, chosen],
            cls=self.cls[:, chosen],
            labels=self.labels,
            token_labels=self.token_labels
        )

    def head_features(self) -> Tensor:
        return self.cls.reshape(self.size, -1)


def patch_labels(mask: Tensor, label: int, good_index: int, cfg: VitConfig) -> Tensor:
    grid, patch = cfg.grid_size, cfg.patch_size
    fractions = (mask > 0).reshape(grid, patch, grid, patch).mean(axis=(1, 3)).ravel()
    return np.where(fractions >= DEFECT_PATCH_FRACTION, label, good_index).astype(np.int64)


def build_cache(
        episode: Episode,
        params: TensorMap,
        cfg: VitConfig,
        executor: Optional[Executor] = None
) -> FeatureCache:
    if len(episode.support) == 0:
        raise DataError('the episode has no support samples')
    expected = (cfg.image_size, cfg.image_size)
    for sample in episode.support:
        if sample.image.shape != expected or sample.mask.shape != expected:
            raise ShapeError(
                f'sample {sample.seed}: image {sample.image.shape} / mask {sample.mask.shape}, expected {expected}'
            )

    def forward(image: Tensor) -> EncodedImage:
        return encode_image(image, params, cfg)

    images = [sample.image for sample in episode.support]
    if executor is not None:
        encoded: List[EncodedImage] = list(executor.map(forward, images))
    else:
        encoded = [forward(image) for image in images]

    good_index = episode.good_index
    cache = FeatureCache(
        F_tokens=np.stack([np.stack([level.F[1:] for level in enc.levels]) for enc in encoded]),
        V_tokens=np.stack([np.stack([level.V[1:] for level in enc.levels]) for enc in encoded]),
        cls=np.stack([np.stack(enc.cls) for enc in encoded]),
        labels=np.array([sample.label for sample in episode.support], dtype=np.int64),
        token_labels=np.stack([
            patch_labels(sample.mask, sample.label, good_index, cfg) for sample in episode.support
        ])
    )
    logger.info('Cached features of %d support images over %d levels', cache.size, cache.num_levels)
    return cache


class FeatureScaler(NamedTuple):
    """
    Per-feature mean and spread of the head inputs. The head is still the
    plain linear map over raw features, but its Adam steps are taken in
    standardized coordinates, z = (x - mean) / scale, and mapped back.
    """
    mean: Tensor
    scale: Tensor

    @staticmethod
    def fit(features: Tensor) -> 'FeatureScaler':
        scaler = StandardScaler().fit(features.astype(np.float64))
        return FeatureScaler(mean=scaler.mean_, scale=scaler.scale_)

    def standardized_grads(self, weight_grad: Tensor, bias_grad: Tensor) -> TensorMap:
        weight = (weight_grad.astype(np.float64) - np.outer(self.mean, bias_grad)) / self.scale[:, None]
        return {'cls.head.w': weight, 'cls.head.b': bias_grad.astype(np.float64)}

    def apply(self, head: ClassifierHead, steps: TensorMap) -> ClassifierHead:
        weight_delta = steps['cls.head.w'] / self.scale[:, None]
        bias_delta = steps['cls.head.b'] - self.mean @ weight_delta
        return ClassifierHead(
            W=(head.W + weight_delta).astype(head.W.dtype),
            b=(head.b + bias_delta).astype(head.b.dtype)
        )


def _check_finite(loss: float, what: str):
    if not np.isfinite(loss):
        raise NumericError(f'{what} loss became non-finite ({loss})')


def transformation_loss(
        F_tokens: Tensor,
        token_labels: Tensor,
        text: Tensor,
        tl: TransformationLayer,
        tau: float = DEFAULT_TAU
) -> Tuple[float, List[Tensor], List[Tensor]]:
    """
    Token-level cross-entropy of the per-level F maps against the patch
    labels: mean over tokens, summed over levels. Returns the loss and the
    analytic gradients with respect to every W_j and b_j.
    """
    if F_tokens.ndim != 4 or F_tokens.shape[1] != tl.num_levels:
        raise ShapeError(f'feature tensor {F_tokens.shape} does not match {tl.num_levels} levels')
    assert tau > 0
    labels = token_labels.ravel()
    num_rows = labels.shape[0]
    text_unit = text.astype(np.float64)
    text_unit = text_unit / np.linalg.norm(text_unit, axis=1, keepdims=True)

    loss = 0.0
    weight_grads: List[Tensor] = []
    bias_grads: List[Tensor] = []
    for j in range(tl.num_levels):
        inputs = F_tokens[:, j].reshape(num_rows, -1).astype(np.float64)
        projected = inputs @ tl.weights[j].astype(np.float64) + tl.biases[j].astype(np.float64)
        norms = np.linalg.norm(projected, axis=1, keepdims=True)
        # zero projections stay zero, like l2_normalize
        norms = np.where(norms < NORM_EPS, 1.0, norms)
        unit = projected / norms

        logits = unit @ text_unit.T / tau
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        loss += -float(np.mean(log_probs[np.arange(num_rows), labels]))

        d_logits = np.exp(log_probs)
        d_logits[np.arange(num_rows), labels] -= 1.0
        d_unit = (d_logits / (num_rows * tau)) @ text_unit
        d_projected = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norms

        weight_grads.append((inputs.T @ d_projected).astype(tl.weights[j].dtype))
        bias_grads.append(np.sum(d_projected, axis=0).astype(tl.biases[j].dtype))

    return loss, weight_grads, bias_grads


def head_loss(features: Tensor, labels: Tensor, head: ClassifierHead) -> Tuple[float, Tensor, Tensor]:
    """Mean softmax cross-entropy of the head over the concatenated CLS features"""
    if features.ndim != 2 or features.shape[1] != head.W.shape[0]:
        raise ShapeError(f'head expects {head.W.shape[0]} features, got {features.shape}')
    num_rows = features.shape[0]
    inputs = features.astype(np.float64)

    logits = inputs @ head.W.astype(np.float64) + head.b.astype(np.float64)
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = -float(np.mean(log_probs[np.arange(num_rows), labels]))

    d_logits = np.exp(log_probs)
    d_logits[np.arange(num_rows), labels] -= 1.0
    d_logits /= num_rows
    return loss, (inputs.T @ d_logits).astype(head.W.dtype), np.sum(d_logits, axis=0).astype(head.b.dtype)


def train_transformation(
        cache: FeatureCache,
        t: TextEmbeddingSet,
        tl: TransformationLayer,
        cfg: TrainConfig,
        tau: float = DEFAULT_TAU,
        collector: Optional[LossCurveCollector] = None
) -> Tuple[TransformationLayer, List[float]]:
    if cache.size == 0:
        raise DataError('cannot train on an empty feature cache')
    cfg.validate()
    collector = collector if collector is not None else NullLossCurveCollector()
    logger.info('Training the transformation layer: %d levels, %d epochs', tl.num_levels, cfg.epochs)

    params = tl.to_params()
    state = AdamState.zeros_like(params)
    curve: List[float] = []
    for epoch in range(1, cfg.epochs + 1):
        current = TransformationLayer.from_params(params, tl.num_levels)
        loss, weight_grads, bias_grads = transformation_loss(
            cache.F_tokens, cache.token_labels, t.embeddings, current, tau
        )
        loss *= cfg.seg_loss_weight
        _check_finite(loss, 'transformation')
        curve.append(loss)
        collector.register_epoch(epoch, loss)
        logger.debug('transformation epoch %d: loss %.6f', epoch, loss)

        grads: TensorMap = {}
        for j, (weight_grad, bias_grad) in enumerate(zip(weight_grads, bias_grads), start=1):
            grads[f'seg.transform.{j}.w'] = cfg.seg_loss_weight * weight_grad
            grads[f'seg.transform.{j}.b'] = cfg.seg_loss_weight * bias_grad
        params, state = adam_step(params, grads, state, cfg.adam)

    trained = TransformationLayer.from_params(params, tl.num_levels)
    logger.info('Transformation layer trained, final loss %.6f', curve[-1])
    return trained, curve


def train_head(
        cache: FeatureCache,
        head: ClassifierHead,
        cfg: TrainConfig,
        collector: Optional[LossCurveCollector] = None
) -> Tuple[ClassifierHead, List[float]]:
    if cache.size == 0:
        raise DataError('cannot train on an empty feature cache')
    cfg.validate()
    collector = collector if collector is not None else NullLossCurveCollector()
    logger.info('Training the classification head: %d samples, %d epochs', cache.size, cfg.epochs)

    features = cache.head_features()
    scaler = FeatureScaler.fit(features)
    origin: TensorMap = {name: np.zeros(value.shape) for name, value in head.to_params().items()}
    state = AdamState.zeros_like(origin)
    curve: List[float] = []
    for epoch in range(1, cfg.epochs + 1):
        loss, weight_grad, bias_grad = head_loss(features, cache.labels, head)
        _check_finite(loss, 'head')
        curve.append(loss)
        collector.register_epoch(epoch, loss)
        logger.debug('head epoch %d: loss %.6f', epoch, loss)
        steps, state = adam_step(origin, scaler.standardized_grads(weight_grad, bias_grad), state, cfg.adam)
        head = scaler.apply(head, steps)

    logger.info('Classification head trained, final loss %.6f', curve[-1])
    return head, curve
