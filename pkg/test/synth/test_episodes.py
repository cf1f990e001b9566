#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from collections import Counter

import pytest

from model import DEFAULT_CLASSES
from numerics.errors import ConfigError
from synth.episodes import check_episode_sizes, sample_episode


def test_episode_sizes():
    episode = sample_episode(n_way=7, k_shot=10, m_query=100, seed=0)
    assert len(episode.support) == 70
    assert len(episode.query) == 100
    assert episode.n_way == 7
    assert episode.k_shot == 10

    assert len(sample_episode(n_way=7, k_shot=1, m_query=10, seed=0).support) == 7


def test_support_is_class_major():
    episode = sample_episode(n_way=3, k_shot=2, m_query=20, seed=1)
    assert episode.classes == list(DEFAULT_CLASSES[:3])
    assert episode.good_index == 0
    assert [sample.label for sample in episode.support] == [0, 0, 1, 1, 2, 2]


def test_query_classes_are_balanced():
    episode = sample_episode(n_way=7, k_shot=1, m_query=200, seed=2)
    counts = Counter(sample.label for sample in episode.query)
    assert set(counts) == set(range(7))
    assert max(counts.values()) - min(counts.values()) <= 1


def test_sample_seeds_are_distinct():
    episode = sample_episode(n_way=4, k_shot=3, m_query=30, seed=3)
    seeds = [sample.seed for sample in episode.support + episode.query]
    assert len(set(seeds)) == len(seeds)


def test_episodes_are_deterministic():
    first = sample_episode(n_way=3, k_shot=1, m_query=12, seed=4, banner=True)
    second = sample_episode(n_way=3, k_shot=1, m_query=12, seed=4, banner=True)
    for a, b in zip(first.support + first.query, second.support + second.query):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.label == b.label

    other = sample_episode(n_way=3, k_shot=1, m_query=12, seed=5)
    assert other.support[0].image.tobytes() != first.support[0].image.tobytes()


def test_episode_size_checks():
    for n_way, k_shot, m_query in ((1, 1, 10), (8, 1, 10), (7, 0, 10), (7, 10, 99)):
        with pytest.raises(expected_exception=ConfigError):
            check_episode_sizes(n_way, k_shot, m_query)
    check_episode_sizes(2, 1, 10)
