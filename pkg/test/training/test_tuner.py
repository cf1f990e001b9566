#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from typing import Callable

import numpy as np
import pytest

from inference.classification import ClassifierHead
from inference.segmentation import TransformationLayer
from model.checkpoint import Checkpoint, surgery_copy_qkv_to_vvv
from model.config import VitConfig
from model.text import TextEmbeddingSet
from model.weights import init_backbone
from numerics.errors import ConfigError, NumericError
from synth.episodes import Episode
from synth.generator import SemSample
from training.tuner import (
    FeatureCache,
    TrainConfig,
    build_cache,
    head_loss,
    patch_labels,
    train_head,
    train_transformation,
    transformation_loss
)

STEP = 1e-3


def numeric_gradient(loss: Callable[[], float], tensor: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(tensor)
    for index in np.ndindex(*tensor.shape):
        original = tensor[index]
        tensor[index] = original + STEP
        plus = loss()
        tensor[index] = original - STEP
        minus = loss()
        tensor[index] = original
        grad[index] = (plus - minus) / (2 * STEP)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(float(np.linalg.norm(numeric)), 1e-12))


def toy_cache(
        rng: np.random.Generator,
        samples: int = 2,
        levels: int = 2,
        tokens: int = 4,
        width: int = 8
) -> FeatureCache:
    return FeatureCache(
        F_tokens=rng.normal(size=(samples, levels, tokens, width)),
        V_tokens=rng.normal(size=(samples, levels, tokens, width)),
        cls=rng.normal(size=(samples, levels, width)),
        labels=rng.integers(0, 3, size=samples),
        token_labels=rng.integers(0, 3, size=(samples, tokens))
    )


def toy_text(rng: np.random.Generator, width: int = 8) -> TextEmbeddingSet:
    embeddings = rng.normal(size=(3, width))
    return TextEmbeddingSet(
        class_names=['good', 'hole', 'scratch'],
        embeddings=embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    )


def toy_transformation(rng: np.random.Generator, levels: int = 2, width: int = 8) -> TransformationLayer:
    return TransformationLayer(
        weights=[np.eye(width) + rng.normal(0.0, 0.3, size=(width, width)) for _ in range(levels)],
        biases=[rng.normal(0.0, 0.3, size=width) for _ in range(levels)]
    )


def test_transformation_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    cache, text, tl = toy_cache(rng), toy_text(rng), toy_transformation(rng)

    def loss() -> float:
        return transformation_loss(cache.F_tokens, cache.token_labels, text.embeddings, tl, tau=0.5)[0]

    _, weight_grads, bias_grads = transformation_loss(cache.F_tokens, cache.token_labels, text.embeddings, tl, tau=0.5)
    for j in range(tl.num_levels):
        assert relative_error(weight_grads[j], numeric_gradient(loss, tl.weights[j])) < 1e-3
        assert relative_error(bias_grads[j], numeric_gradient(loss, tl.biases[j])) < 1e-3


def test_transformation_loss_with_a_zero_token():
    rng = np.random.default_rng(10)
    cache = toy_cache(rng, levels=1)
    cache.F_tokens[0, 0, 2] = 0.0
    tl = TransformationLayer.identity(num_levels=1, width=8)

    loss, weight_grads, bias_grads = transformation_loss(  # SUT
        cache.F_tokens, cache.token_labels, toy_text(rng).embeddings, tl
    )

    assert np.isfinite(loss)
    assert np.all(np.isfinite(weight_grads[0]))
    assert np.all(np.isfinite(bias_grads[0]))


def test_head_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    cache = toy_cache(rng, samples=5)
    head = ClassifierHead(W=rng.normal(0.0, 0.5, size=(16, 3)), b=rng.normal(size=3))
    features = cache.head_features()

    def loss() -> float:
        return head_loss(features, cache.labels, head)[0]

    _, weight_grad, bias_grad = head_loss(features, cache.labels, head)
    assert relative_error(weight_grad, numeric_gradient(loss, head.W)) < 1e-3
    assert relative_error(bias_grad, numeric_gradient(loss, head.b)) < 1e-3


def test_zero_learning_rate_keeps_parameters():
    rng = np.random.default_rng(2)
    cache, text, tl = toy_cache(rng), toy_text(rng), toy_transformation(rng)
    cfg = TrainConfig(lr=0.0, epochs=5)

    trained, curve = train_transformation(cache, text, tl, cfg, tau=0.5)
    for before, after in zip(tl.weights + tl.biases, trained.weights + trained.biases):
        assert before.tobytes() == after.tobytes()
    assert len(set(curve)) == 1

    head = ClassifierHead(W=rng.normal(size=(16, 3)), b=np.zeros(3))
    trained_head, head_curve = train_head(cache, head, cfg)
    assert trained_head.W.tobytes() == head.W.tobytes()
    assert len(set(head_curve)) == 1


def test_training_is_deterministic():
    cache, text = toy_cache(np.random.default_rng(3)), toy_text(np.random.default_rng(4))
    tl = toy_transformation(np.random.default_rng(5))

    _, one_epoch = train_transformation(cache, text, tl, TrainConfig(epochs=1))
    first, two_epochs = train_transformation(cache, text, tl, TrainConfig(epochs=2))
    second, _ = train_transformation(cache, text, tl, TrainConfig(epochs=2))

    assert one_epoch[0] == two_epochs[0]
    for a, b in zip(first.weights + first.biases, second.weights + second.biases):
        assert a.tobytes() == b.tobytes()


def test_transformation_learns_a_separable_toy():
    rng = np.random.default_rng(6)
    text = TextEmbeddingSet(class_names=['good', 'hole'], embeddings=np.eye(2, 4))
    labels = np.array([0, 1, 0, 1])
    # every token sits next to the embedding of the other class
    centers = np.eye(2, 4)[1 - labels]
    F_tokens = centers[:, None, None, :] + rng.normal(0.0, 0.05, size=(4, 1, 6, 4))
    cache = FeatureCache(
        F_tokens=F_tokens,
        V_tokens=np.zeros_like(F_tokens),
        cls=F_tokens[:, :, 0],
        labels=labels,
        token_labels=np.repeat(labels[:, None], 6, axis=1)
    )
    tl = TransformationLayer(weights=[np.eye(4)], biases=[np.zeros(4)])

    _, curve = train_transformation(cache, text, tl, TrainConfig(lr=0.05, epochs=100))

    assert len(curve) == 100
    assert curve[-1] < 0.1 * curve[0]


def test_head_separates_two_points():
    features = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    cache = FeatureCache(
        F_tokens=np.zeros((2, 1, 1, 2)),
        V_tokens=np.zeros((2, 1, 1, 2)),
        cls=features,
        labels=np.array([0, 1]),
        token_labels=np.zeros((2, 1), dtype=np.int64)
    )
    head, curve = train_head(cache, ClassifierHead.initial(2, 2, seed=0), TrainConfig(lr=0.1, epochs=100))

    logits = cache.head_features() @ head.W + head.b
    np.testing.assert_array_equal(np.argmax(logits, axis=1), [0, 1])
    assert curve[-1] < curve[0]


def head_cache(features: np.ndarray, labels: np.ndarray) -> FeatureCache:
    samples = features.shape[0]
    return FeatureCache(
        F_tokens=np.zeros((samples, 1, 1, 2)),
        V_tokens=np.zeros((samples, 1, 1, 2)),
        cls=features[:, None, :],
        labels=labels,
        token_labels=np.zeros((samples, 1), dtype=np.int64)
    )


def test_head_training_ignores_a_common_offset():
    rng = np.random.default_rng(11)
    labels = np.repeat(np.arange(3), 10)
    features = rng.normal(0.0, 0.1, size=(30, 12))
    features[np.arange(30), labels] += 1.0
    start = ClassifierHead(W=np.zeros((12, 3)), b=np.zeros(3))

    head, _ = train_head(head_cache(features, labels), start, TrainConfig())  # SUT
    shifted, _ = train_head(head_cache(features + 50.0, labels), start, TrainConfig())  # SUT

    logits = features @ head.W + head.b
    np.testing.assert_array_equal(np.argmax(logits, axis=1), labels)
    np.testing.assert_allclose((features + 50.0) @ shifted.W + shifted.b, logits, atol=1e-6)


def test_head_training_is_invariant_to_duplication():
    rng = np.random.default_rng(7)
    cache = toy_cache(rng, samples=4)
    doubled = FeatureCache(*(np.concatenate([field, field]) for field in cache))
    head = ClassifierHead(W=rng.normal(0.0, 0.1, size=(16, 3)), b=np.zeros(3))
    cfg = TrainConfig(lr=0.01, epochs=20)

    original, original_curve = train_head(cache, head, cfg)
    duplicated, duplicated_curve = train_head(doubled, head, cfg)

    np.testing.assert_allclose(duplicated_curve, original_curve, rtol=1e-7)
    np.testing.assert_allclose(duplicated.W, original.W, atol=1e-7)


def test_non_finite_loss_is_reported():
    rng = np.random.default_rng(8)
    cache = toy_cache(rng)
    cache = cache._replace(F_tokens=np.full_like(cache.F_tokens, np.nan))
    with pytest.raises(expected_exception=NumericError):
        train_transformation(cache, toy_text(rng), toy_transformation(rng), TrainConfig(epochs=1))


def test_train_config_validation():
    assert TrainConfig().validate().adam.lr == 1e-3
    for bad in (TrainConfig(lr=-1.0), TrainConfig(epochs=0), TrainConfig(beta1=1.0), TrainConfig(eps=0.0)):
        with pytest.raises(expected_exception=ConfigError):
            bad.validate()


def test_patch_labels():
    cfg = VitConfig()
    assert not np.any(patch_labels(np.zeros((64, 64)), 6, 0, cfg))
    np.testing.assert_array_equal(patch_labels(np.ones((64, 64)), 6, 0, cfg), 6)

    mask = np.zeros((64, 64))
    mask[8:16, 24:32] = 1
    labels = patch_labels(mask, 3, 0, cfg)
    assert labels.shape == (64,)
    assert np.flatnonzero(labels).tolist() == [11]

    mask[0:8, 0:4] = 1  # half a patch counts as defective
    assert np.flatnonzero(patch_labels(mask, 3, 0, cfg)).tolist() == [0, 11]


def test_build_cache():
    cfg = VitConfig(image_size=16, patch_size=8, width=8, heads=2, m=2, n=2, mlp_ratio=2)
    ckpt, _ = surgery_copy_qkv_to_vvv(Checkpoint(tensors=init_backbone(cfg, 0), metadata={}))
    rng = np.random.default_rng(9)
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:8, 8:] = 1
    support = [
        SemSample(image=rng.uniform(size=(16, 16)).astype(np.float32), mask=np.zeros_like(mask), label=0, seed=0),
        SemSample(image=rng.uniform(size=(16, 16)).astype(np.float32), mask=mask, label=1, seed=1),
    ]
    episode = Episode(classes=['good', 'hole'], support=support, query=[])

    cache = build_cache(episode, ckpt.tensors, cfg)  # SUT

    assert cache.size == 2
    assert cache.num_levels == 2
    assert cache.F_tokens.shape == cache.V_tokens.shape == (2, 2, 4, 8)
    assert cache.cls.shape == (2, 2, 8)
    assert cache.head_features().shape == (2, 16)
    np.testing.assert_array_equal(cache.token_labels, [[0, 0, 0, 0], [0, 1, 0, 0]])

    last = cache.select_levels([1])
    assert last.num_levels == 1
    np.testing.assert_array_equal(last.F_tokens[:, 0], cache.F_tokens[:, 1])
