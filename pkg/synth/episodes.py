#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from logging import getLogger
from typing import List, NamedTuple

import numpy as np

from model import DEFAULT_CLASSES, GOOD_CLASS
from numerics.errors import ConfigError
from synth.generator import SemSample, generate_sample

# Sample seeds are episode_seed * SEED_STRIDE + sample index.
SEED_STRIDE = 1_000_000

MIN_QUERY_RATIO = 10

logger = getLogger('semshot.synth')


class Episode(NamedTuple):
    classes: List[str]
    support: List[SemSample]
    query: List[SemSample]

    @property
    def good_index(self) -> int:
        return self.classes.index(GOOD_CLASS)

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def k_shot(self) -> int:
        return len(self.support) // len(self.classes)


def check_episode_sizes(n_way: int, k_shot: int, m_query: int):
    if not 2 <= n_way <= len(DEFAULT_CLASSES):
        raise ConfigError(f'n_way must lie in [2, {len(DEFAULT_CLASSES)}], got {n_way}')
    if k_shot < 1:
        raise ConfigError(f'k_shot must be positive, got {k_shot}')
    if m_query < MIN_QUERY_RATIO * k_shot:
        raise ConfigError(f'the query set needs at least {MIN_QUERY_RATIO * k_shot} images, got {m_query}')
    if n_way * k_shot + m_query >= SEED_STRIDE:
        raise ConfigError('episode too large for disjoint sample seeds')


def sample_episode(n_way: int, k_shot: int, m_query: int, seed: int, banner: bool = False) -> Episode:
    """
    Support: k_shot samples of each of the first n_way classes ("good" is
    always among them). Query: classes assigned round-robin then shuffled.
    """
    check_episode_sizes(n_way, k_shot, m_query)
    classes = list(DEFAULT_CLASSES[:n_way])
    base_seed = seed * SEED_STRIDE

    support = [
        generate_sample(classes[index // k_shot], base_seed + index, banner=banner)
        for index in range(n_way * k_shot)
    ]

    offset = n_way * k_shot
    order = np.random.default_rng([seed, 30]).permutation(m_query)
    query = [
        generate_sample(classes[int(position) % n_way], base_seed + offset + index, banner=banner)
        for index, position in enumerate(order)
    ]

    logger.info('Sampled a %d-way %d-shot episode with %d queries (seed %d)', n_way, k_shot, m_query, seed)
    return Episode(classes=classes, support=support, query=query)
