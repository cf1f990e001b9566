#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from concurrent.futures import ThreadPoolExecutor
from os import listdir, path as os_path
from typing import Optional

import numpy as np
import pytest

from experiments.config import RunConfig
from experiments.pipeline import (
    HEAD_LOSS_FILE,
    TRANSFORMATION_LOSS_FILE,
    SemShotPipeline,
    initialize_model,
    metadata_classes
)
from model.config import TextConfig, VitConfig
from numerics.errors import ConfigError, DataError
from synth.episodes import sample_episode
from training.tuner import TrainConfig

TINY_RUN = RunConfig(
    seed=3,
    n_way=3,
    k_shot=1,
    m_query=10,
    vit=VitConfig(image_size=64, patch_size=16, width=16, heads=2, m=2, n=1, mlp_ratio=2),
    text=TextConfig(vocab_size=256, width=16, depth=1, heads=2, context_length=16, embed_dim=16, mlp_ratio=2),
    train=TrainConfig(epochs=3, seed=3)
)

BENCHMARK_RUN = RunConfig(seed=42, n_way=7, k_shot=10, m_query=200)


def run_pipeline(cfg: RunConfig, out_dir: Optional[str], executor=None):
    episode = sample_episode(cfg.n_way, cfg.k_shot, cfg.m_query, cfg.seed)
    ckpt, _ = initialize_model(cfg)
    pipeline = SemShotPipeline(config=cfg, params=ckpt.tensors, classes=episode.classes, executor=executor)
    curves = pipeline.finetune(episode, out_dir)
    return pipeline, curves, pipeline.evaluate(episode.query, out_dir)


def test_initialize_model():
    ckpt, report = initialize_model(TINY_RUN)
    assert report.checksum_before == report.checksum_after
    assert len(report.copied_pairs) == TINY_RUN.vit.m * TINY_RUN.vit.n * 4
    assert metadata_classes(ckpt.metadata) == ['good', 'bridge', 'copper_residue']

    qkv_layers = {name.rsplit('.', 2)[0] for name in ckpt.tensors if '.qkv.' in name}
    assert len(qkv_layers) == TINY_RUN.vit.depth

    again, _ = initialize_model(TINY_RUN)
    for name, tensor in ckpt.tensors.items():
        assert again.tensors[name].tobytes() == tensor.tobytes()


def test_default_model_has_twelve_attention_layers():
    ckpt, _ = initialize_model(RunConfig())
    assert len({name.rsplit('.', 2)[0] for name in ckpt.tensors if '.qkv.' in name}) == 12


def test_end_to_end_run(tmp_path):
    out_dir = str(tmp_path / 'run')
    pipeline, curves, report = run_pipeline(TINY_RUN, out_dir)  # SUT

    assert len(curves.transformation) == len(curves.head) == 3
    for file_name in (TRANSFORMATION_LOSS_FILE, HEAD_LOSS_FILE, 'metrics.json', 'metrics.csv', 'confusion.csv'):
        assert os_path.isfile(os_path.join(out_dir, file_name))
    with open(os_path.join(out_dir, 'classification.csv'), 'r', encoding='utf-8') as input_file:
        assert len(input_file.read().splitlines()) == 1 + TINY_RUN.m_query
    assert len([name for name in listdir(os_path.join(out_dir, 'maps')) if name.endswith('.f32')]) == 10

    for value in (report.iauroc, report.pauroc, report.f1_max, report.accuracy, report.macro_f1):
        assert 0.0 <= value <= 1.0
    assert int(report.confusion.sum()) == TINY_RUN.m_query


def test_runs_are_reproducible(tmp_path):
    first, second = str(tmp_path / 'first'), str(tmp_path / 'second')
    run_pipeline(TINY_RUN, first)
    with ThreadPoolExecutor(max_workers=2) as executor:
        run_pipeline(TINY_RUN, second, executor)

    with open(os_path.join(first, 'metrics.json'), 'rb') as a, open(os_path.join(second, 'metrics.json'), 'rb') as b:
        assert a.read() == b.read()


def test_transformation_ablation(tmp_path):
    cfg = TINY_RUN._replace(ablations=('no_transform',))
    pipeline, curves, _ = run_pipeline(cfg, str(tmp_path))

    assert curves.transformation == []
    assert not os_path.exists(tmp_path / TRANSFORMATION_LOSS_FILE)
    assert os_path.isfile(tmp_path / HEAD_LOSS_FILE)
    for weight in pipeline.transformation.weights:
        np.testing.assert_array_equal(weight, np.eye(16))


def test_last_layer_ablation():
    cfg = TINY_RUN._replace(ablations=('last_layer_only',))
    pipeline, _, _ = run_pipeline(cfg, None)

    assert pipeline.transformation.num_levels == 1
    assert pipeline.head is not None
    assert pipeline.head.W.shape == (16, 3)
    defect_map, _ = pipeline.analyze(sample_episode(3, 1, 10, 0).query[0].image)
    assert len(defect_map.per_level_F) == 1


def test_trained_parameters_reload():
    pipeline, _, _ = run_pipeline(TINY_RUN, None)
    ckpt, _ = initialize_model(TINY_RUN)
    params = dict(ckpt.tensors)
    params.update(pipeline.trained_params())

    reloaded = SemShotPipeline(config=TINY_RUN, params=params, classes=pipeline.classes)
    reloaded.load_trained(params, pipeline.trained_metadata())

    image = sample_episode(3, 1, 10, 9).query[1].image
    expected_map, expected_probabilities = pipeline.analyze(image)
    defect_map, probabilities = reloaded.analyze(image)
    np.testing.assert_array_equal(defect_map.fused_pixels, expected_map.fused_pixels)
    np.testing.assert_array_equal(probabilities.p, expected_probabilities.p)

    with pytest.raises(expected_exception=ConfigError):
        SemShotPipeline(
            config=TINY_RUN._replace(ablations=('last_layer_only',)), params=params, classes=pipeline.classes
        ).load_trained(params, pipeline.trained_metadata())


def test_pipeline_errors():
    ckpt, _ = initialize_model(TINY_RUN)
    with pytest.raises(expected_exception=ConfigError):
        SemShotPipeline(config=TINY_RUN, params=ckpt.tensors, classes=['bridge', 'hole'])

    pipeline = SemShotPipeline(config=TINY_RUN, params=ckpt.tensors, classes=['good', 'bridge', 'copper_residue'])
    with pytest.raises(expected_exception=DataError):
        pipeline.trained_params()
    with pytest.raises(expected_exception=DataError):
        pipeline.load_trained(ckpt.tensors, ckpt.metadata)
    with pytest.raises(expected_exception=DataError):
        pipeline.finetune(sample_episode(2, 1, 10, 0))


def benchmark_report(cfg: RunConfig):
    with ThreadPoolExecutor(max_workers=cfg.worker_count) as executor:
        return run_pipeline(cfg, None, executor)[2]


@pytest.fixture(scope='module')
def default_benchmark():
    return benchmark_report(BENCHMARK_RUN)


def test_synthetic_benchmark(default_benchmark):
    assert default_benchmark.pauroc >= 0.85
    assert default_benchmark.iauroc >= 0.80
    assert default_benchmark.accuracy >= 4 / 7


def test_ablations_do_not_beat_the_full_model(default_benchmark):
    untransformed = benchmark_report(BENCHMARK_RUN._replace(ablations=('no_transform',)))
    last_layer = benchmark_report(BENCHMARK_RUN._replace(ablations=('last_layer_only',)))
    similarity_only = benchmark_report(BENCHMARK_RUN._replace(ablations=('ps_only',)))

    assert untransformed.pauroc < default_benchmark.pauroc
    assert last_layer.pauroc <= default_benchmark.pauroc
    assert last_layer.f1_max <= default_benchmark.f1_max
    assert similarity_only.accuracy < default_benchmark.accuracy
