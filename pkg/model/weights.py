#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Seeded parameter initialization for the vision backbone and the text encoder.
Parameter maps follow the model-store naming scheme; the VVV tensors are not
created here, they come from `surgery_copy_qkv_to_vvv`.
"""


from typing import Tuple

import numpy as np

from model.checkpoint import layer_prefix
from model.config import TextConfig, VitConfig
from numerics import TensorMap

EMBEDDING_STD = 0.02
# Keeps the raw patch intensity visible through the first layer norm.
PATCH_BIAS_STD = 1.0


def _linear(
        rng: np.random.Generator,
        fan_in: int,
        fan_out: int,
        gain: float = 1.0
) -> Tuple[np.ndarray, np.ndarray]:
    weight = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(np.float32)
    return weight, np.zeros(fan_out, dtype=np.float32)


def residual_gain(depth: int) -> float:
    """Scale of the projections writing into the residual stream, 1/sqrt(2·depth)"""
    return 1.0 / np.sqrt(2.0 * max(depth, 1))


def _transformer_layer(
        rng: np.random.Generator,
        prefix: str,
        attention_name: str,
        width: int,
        mlp_ratio: int,
        depth: int
) -> TensorMap:
    params: TensorMap = {}
    for norm in ('ln1', 'ln2'):
        params[f'{prefix}.{norm}.gamma'] = np.ones(width, dtype=np.float32)
        params[f'{prefix}.{norm}.beta'] = np.zeros(width, dtype=np.float32)

    for projection in ('q', 'k', 'v', 'out'):
        gain = residual_gain(depth) if projection == 'out' else 1.0
        weight, bias = _linear(rng, width, width, gain)
        params[f'{prefix}.{attention_name}.w_{projection}'] = weight
        params[f'{prefix}.{attention_name}.b_{projection}'] = bias

    hidden = width * mlp_ratio
    params[f'{prefix}.mlp.w_fc'], params[f'{prefix}.mlp.b_fc'] = _linear(rng, width, hidden)
    params[f'{prefix}.mlp.w_proj'], params[f'{prefix}.mlp.b_proj'] = _linear(rng, hidden, width, residual_gain(depth))
    return params


def init_backbone(cfg: VitConfig, seed: int) -> TensorMap:
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    patch_dim = cfg.patch_size ** 2

    params: TensorMap = {}
    params['vision.patch.w'], _ = _linear(rng, patch_dim, cfg.width)
    params['vision.patch.b'] = rng.normal(0.0, PATCH_BIAS_STD, size=cfg.width).astype(np.float32)
    params['vision.cls'] = rng.normal(0.0, EMBEDDING_STD, size=cfg.width).astype(np.float32)
    params['vision.pos'] = rng.normal(
        0.0, EMBEDDING_STD, size=(cfg.num_tokens + 1, cfg.width)
    ).astype(np.float32)

    for block in range(1, cfg.m + 1):
        for layer in range(1, cfg.n + 1):
            params.update(_transformer_layer(
                rng, layer_prefix(block, layer), 'qkv', cfg.width, cfg.mlp_ratio, cfg.depth
            ))
    return params


def init_text_encoder(cfg: TextConfig, seed: int) -> TensorMap:
    cfg.validate()
    rng = np.random.default_rng([seed, 1])

    params: TensorMap = {}
    params['text.token_embedding'] = rng.normal(
        0.0, EMBEDDING_STD, size=(cfg.vocab_size, cfg.width)
    ).astype(np.float32)
    params['text.pos'] = rng.normal(
        0.0, EMBEDDING_STD, size=(cfg.context_length, cfg.width)
    ).astype(np.float32)
    for layer in range(1, cfg.depth + 1):
        params.update(_transformer_layer(rng, f'text.layer{layer}', 'attn', cfg.width, cfg.mlp_ratio, cfg.depth))
    params['text.proj'] = rng.normal(
        0.0, 1.0 / np.sqrt(cfg.width), size=(cfg.width, cfg.embed_dim)
    ).astype(np.float32)
    return params
