#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Dense kernels shared by the backbone, the text encoder and the map/score
computations. All of them are pure functions: they never mutate their inputs
and they keep the floating dtype they receive (float32 for model paths,
float64 when an oracle or a finite-difference check calls them).
"""


from math import pi, sqrt
from typing import NamedTuple

import numpy as np

from numerics import MAX_RANK, Tensor
from numerics.errors import ConfigError, ShapeError


class AttentionConfig(NamedTuple):
    d_k: int
    heads: int

    @staticmethod
    def for_width(width: int, heads: int) -> 'AttentionConfig':
        if heads < 1 or width < 1:
            raise ConfigError('width and heads must be positive')
        if width % heads != 0:
            raise ConfigError(f'width {width} is not divisible by {heads} heads')
        return AttentionConfig(d_k=width // heads, heads=heads)


def as_tensor(x, dtype=np.float32) -> Tensor:
    """Converts x into a contiguous tensor, checking the rank/extent contract."""
    tensor = np.ascontiguousarray(x, dtype=dtype)
    if not 1 <= tensor.ndim <= MAX_RANK:
        raise ShapeError(f'tensor rank must be in [1, {MAX_RANK}], got {tensor.ndim}')
    if min(tensor.shape) < 1:
        raise ShapeError(f'tensor extents must be positive, got {tensor.shape}')
    return tensor


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f'axis {axis} out of range for rank {x.ndim}')
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=axis, keepdims=True)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """
    Scales every slice along `axis` to unit L2 norm. Slices whose norm is below
    eps are returned as they are (zero patches are legal input).
    """
    assert eps > 0
    axis = _check_axis(x, axis)
    norms = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.where(norms < eps, np.ones_like(norms), norms)


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f'cosine similarity needs equal-length rows, got {a.shape} and {b.shape}')
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    denominator = sqrt(float(a64 @ a64)) * sqrt(float(b64 @ b64))
    if denominator == 0.0:
        return 0.0
    return float(np.clip(float(a64 @ b64) / denominator, -1.0, 1.0))


def cosine_matrix(rows: Tensor, columns: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows[T×D] and columns[N×D] -> T×N."""
    if rows.ndim != 2 or columns.ndim != 2 or rows.shape[1] != columns.shape[1]:
        raise ShapeError(f'cannot compare {rows.shape} against {columns.shape}')
    return np.clip(l2_normalize(rows, axis=1) @ l2_normalize(columns, axis=1).T, -1.0, 1.0)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f'linear map {w.shape} + {b.shape} cannot consume {x.shape}')
    return x @ w + b


def attention(
        q: Tensor,
        k: Tensor,
        v: Tensor,
        cfg: AttentionConfig,
        causal: bool = False
) -> Tensor:
    """
    Multi-head scaled dot-product attention over T×C inputs. Heads split the
    channel axis into `cfg.heads` groups of `cfg.d_k` channels and are
    concatenated back in the same order.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f'attention needs equal T×C inputs, got {q.shape}, {k.shape}, {v.shape}')
    num_tokens, width = q.shape
    if cfg.heads * cfg.d_k != width:
        raise ShapeError(f'{cfg.heads} heads of {cfg.d_k} channels do not cover width {width}')

    def split(x: Tensor) -> Tensor:
        return x.reshape(num_tokens, cfg.heads, cfg.d_k).transpose(1, 0, 2)

    scores = (split(q) @ split(k).transpose(0, 2, 1)) / np.sqrt(q.dtype.type(cfg.d_k))
    if causal:
        future = np.triu(np.ones((num_tokens, num_tokens), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    mixed = softmax(scores, axis=-1) @ split(v)
    return mixed.transpose(1, 0, 2).reshape(num_tokens, width)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    assert eps > 0
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f'layer norm over {x.shape[-1]} channels got {gamma.shape}/{beta.shape}')
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(variance + x.dtype.type(eps)) * gamma + beta


_GELU_SCALE = sqrt(2.0 / pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_SCALE * (x + 0.044715 * x * x * x)))
