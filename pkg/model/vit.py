#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Dual-path vision transformer.

The backbone is a stack of m encoding blocks with n dual-path blocks each.
Every dual-path block runs the vanilla pre-LN transformer layer (the QKV path,
which carries the residual stream) and, as a side branch, a V-V attention over
the value projection of the same input (the VVV path, no MLP and no residual).
After each encoding block we record the running vanilla stream F_j and the sum
V_j of the n side-branch outputs produced inside it.
"""


from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from model.checkpoint import MissingTensorError, layer_prefix
from model.config import VitConfig
from numerics import Tensor, TensorMap
from numerics.errors import ShapeError
from numerics.kernels import AttentionConfig, attention, gelu, layer_norm, linear


class LevelEmbeddings(NamedTuple):
    F: Tensor  # (T+1)×C, CLS at row 0
    V: Tensor  # (T+1)×C


class EncodedImage(NamedTuple):
    levels: List[LevelEmbeddings]
    cls: List[Tensor]

    @property
    def grid_size(self) -> int:
        num_tokens = self.levels[0].F.shape[0] - 1
        side = int(round(np.sqrt(num_tokens)))
        assert side * side == num_tokens
        return side


class AttentionWeights(NamedTuple):
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor


class ValueWeights(NamedTuple):
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor


class LayerWeights(NamedTuple):
    """Weights of one pre-LN transformer layer (shared by the text encoder)"""
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionWeights
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w_fc: Tensor
    b_fc: Tensor
    w_proj: Tensor
    b_proj: Tensor
    vvv: Optional[ValueWeights] = None


def _get(params: TensorMap, name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise MissingTensorError(f'missing weights: {name}') from None


def read_layer(params: TensorMap, prefix: str, attention_name: str, with_vvv: bool) -> LayerWeights:
    attn = AttentionWeights(*[
        _get(params, f'{prefix}.{attention_name}.{field}') for field in AttentionWeights._fields
    ])
    vvv = None
    if with_vvv:
        vvv = ValueWeights(*[_get(params, f'{prefix}.vvv.{field}') for field in ValueWeights._fields])
    return LayerWeights(
        ln1_gamma=_get(params, f'{prefix}.ln1.gamma'),
        ln1_beta=_get(params, f'{prefix}.ln1.beta'),
        attn=attn,
        ln2_gamma=_get(params, f'{prefix}.ln2.gamma'),
        ln2_beta=_get(params, f'{prefix}.ln2.beta'),
        w_fc=_get(params, f'{prefix}.mlp.w_fc'),
        b_fc=_get(params, f'{prefix}.mlp.b_fc'),
        w_proj=_get(params, f'{prefix}.mlp.w_proj'),
        b_proj=_get(params, f'{prefix}.mlp.b_proj'),
        vvv=vvv
    )


def vanilla_layer(
        x: Tensor,
        layer: LayerWeights,
        cfg: AttentionConfig,
        causal: bool = False
) -> Tensor:
    """LN -> MHSA (+residual) -> LN -> MLP (+residual)"""
    normed = layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
    attn = layer.attn
    mixed = attention(
        linear(normed, attn.w_q, attn.b_q),
        linear(normed, attn.w_k, attn.b_k),
        linear(normed, attn.w_v, attn.b_v),
        cfg,
        causal=causal
    )
    x = x + linear(mixed, attn.w_out, attn.b_out)

    hidden = gelu(linear(layer_norm(x, layer.ln2_gamma, layer.ln2_beta), layer.w_fc, layer.b_fc))
    return x + linear(hidden, layer.w_proj, layer.b_proj)


def value_value_branch(x: Tensor, layer: LayerWeights, cfg: AttentionConfig) -> Tensor:
    assert layer.vvv is not None
    values = linear(layer_norm(x, layer.ln1_gamma, layer.ln1_beta), layer.vvv.w_v, layer.vvv.b_v)
    return linear(attention(values, values, values, cfg), layer.vvv.w_out, layer.vvv.b_out)


def dual_path_block(x: Tensor, layer: LayerWeights, cfg: AttentionConfig) -> Tuple[Tensor, Tensor]:
    if x.ndim != 2 or x.shape[1] != layer.ln1_gamma.shape[0]:
        raise ShapeError(f'dual-path block of width {layer.ln1_gamma.shape[0]} cannot take {x.shape}')
    return vanilla_layer(x, layer, cfg), value_value_branch(x, layer, cfg)


def patch_embed(image: Tensor, params: TensorMap, cfg: VitConfig) -> Tensor:
    if image.shape != (cfg.image_size, cfg.image_size):
        raise ShapeError(f'expected a {cfg.image_size}×{cfg.image_size} image, got {image.shape}')
    grid, patch = cfg.grid_size, cfg.patch_size

    patches = image.astype(np.float32).reshape(grid, patch, grid, patch).transpose(0, 2, 1, 3)
    tokens = linear(
        patches.reshape(grid * grid, patch * patch),
        _get(params, 'vision.patch.w'),
        _get(params, 'vision.patch.b')
    )
    tokens = np.concatenate([_get(params, 'vision.cls')[None, :], tokens], axis=0)
    return tokens + _get(params, 'vision.pos')


def encode_image(
        image: Tensor,
        params: TensorMap,
        cfg: VitConfig,
        with_v_path: bool = True
) -> EncodedImage:
    """
    with_v_path=False skips the side branch entirely (every V_j is then zero);
    the vanilla stream does not depend on it.
    """
    attention_cfg = cfg.attention
    stream = patch_embed(image, params, cfg)

    levels: List[LevelEmbeddings] = []
    for block in range(1, cfg.m + 1):
        accumulated = np.zeros_like(stream)
        for layer_index in range(1, cfg.n + 1):
            layer = read_layer(params, layer_prefix(block, layer_index), 'qkv', with_vvv=with_v_path)
            if with_v_path:
                accumulated = accumulated + value_value_branch(stream, layer, attention_cfg)
            stream = vanilla_layer(stream, layer, attention_cfg)
        levels.append(LevelEmbeddings(F=stream, V=accumulated))

    return EncodedImage(levels=levels, cls=[level.F[0].copy() for level in levels])
