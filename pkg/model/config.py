#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from json import dumps as json_dumps, loads as json_loads
from typing import NamedTuple

from numerics.errors import ConfigError
from numerics.kernels import AttentionConfig


class VitConfig(NamedTuple):
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    heads: int = 4
    m: int = 4  # Encoding blocks (feature levels)
    n: int = 3  # Dual-path blocks per encoding block
    mlp_ratio: int = 4

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        """Patch tokens, CLS excluded"""
        return self.grid_size ** 2

    @property
    def depth(self) -> int:
        return self.m * self.n

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig.for_width(self.width, self.heads)

    def validate(self) -> 'VitConfig':
        if min(self) < 1:
            raise ConfigError(f'every VitConfig field must be positive: {self}')
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f'image size {self.image_size} is not divisible by patch size {self.patch_size}'
            )
        AttentionConfig.for_width(self.width, self.heads)
        return self

    def to_json(self) -> str:
        return json_dumps(self._asdict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> 'VitConfig':
        try:
            return VitConfig(**json_loads(text)).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f'invalid vit config {text!r}: {e}') from e


class TextConfig(NamedTuple):
    vocab_size: int = 4096
    width: int = 64
    depth: int = 2
    heads: int = 4
    context_length: int = 77
    embed_dim: int = 64
    mlp_ratio: int = 4

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig.for_width(self.width, self.heads)

    def validate(self) -> 'TextConfig':
        positive = (self.vocab_size, self.width, self.heads, self.context_length, self.embed_dim, self.mlp_ratio)
        if self.depth < 0 or min(positive) < 1:
            raise ConfigError(f'invalid TextConfig: {self}')
        if self.vocab_size < 256:
            raise ConfigError('vocab_size must be at least 256')
        if self.context_length < 2:
            raise ConfigError('context_length must hold BOS and EOS')
        AttentionConfig.for_width(self.width, self.heads)
        return self

    def to_json(self) -> str:
        return json_dumps(self._asdict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> 'TextConfig':
        try:
            return TextConfig(**json_loads(text)).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f'invalid text config {text!r}: {e}') from e


def check_joint_width(vit_cfg: VitConfig, text_cfg: TextConfig):
    """The V path multiplies image and text features channel by channel."""
    if vit_cfg.width != text_cfg.embed_dim:
        raise ConfigError(
            f'image width {vit_cfg.width} must equal joint dimension {text_cfg.embed_dim}'
        )
