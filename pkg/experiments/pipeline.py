#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
End-to-end orchestration: model initialization, few-shot fine-tuning,
inference over a query set and evaluation. Model state is immutable while
images are processed, so per-image work is handed to a worker pool.
"""


from concurrent.futures import Executor
from json import dumps as json_dumps, loads as json_loads
from logging import getLogger
from os import makedirs, path as os_path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from evaluation.metrics import MetricsReport, ScoredSet, auroc, classification_metrics, f1_max, image_score
from evaluation.report import (
    build_report,
    write_classification_csv,
    write_confusion_csv,
    write_metrics_csv,
    write_metrics_json
)
from experiments.config import RunConfig
from inference.classification import ClassifierHead, ClassProbabilities, FusionConfig, classify_image
from inference.export import write_heatmap_pgm, write_raw_map
from inference.segmentation import DefectMap, TransformationLayer, restrict_levels, segment_image
from model import GOOD_CLASS
from model.checkpoint import Checkpoint, SurgeryReport, surgery_copy_qkv_to_vvv
from model.config import TextConfig, VitConfig
from model.text import (
    PromptLibrary,
    build_class_embeddings,
    default_prompt_library,
    generic_prompt_library,
    load_prompt_library
)
from model.vit import EncodedImage, encode_image
from model.weights import init_backbone, init_text_encoder
from numerics import Tensor, TensorMap
from numerics.errors import ConfigError, DataError
from synth.episodes import Episode
from synth.generator import SemSample
from training.stats import CsvLossCurveCollector, LossCurveCollector, NullLossCurveCollector
from training.tuner import build_cache, train_head, train_transformation

TRANSFORMATION_LOSS_FILE = 'transformation_loss.csv'
HEAD_LOSS_FILE = 'head_loss.csv'


class ImageResult(NamedTuple):
    image_id: str
    defect_map: DefectMap
    probabilities: ClassProbabilities


class FinetuneCurves(NamedTuple):
    transformation: List[float]
    head: List[float]


def model_metadata(cfg: RunConfig, classes: Sequence[str]) -> Dict[str, str]:
    return {
        'vit_config': cfg.vit.to_json(),
        'text_config': cfg.text.to_json(),
        'seed': str(cfg.seed),
        'classes': json_dumps(list(classes)),
        'levels': json_dumps(cfg.level_indices),
        'ablations': ','.join(cfg.ablations),
    }


def initialize_model(cfg: RunConfig) -> Tuple[Checkpoint, SurgeryReport]:
    """Seeded backbone and text encoder, with the V-V branch built by surgery"""
    params = init_backbone(cfg.vit, cfg.seed)
    params.update(init_text_encoder(cfg.text, cfg.seed))
    return surgery_copy_qkv_to_vvv(Checkpoint(tensors=params, metadata=model_metadata(cfg, cfg.classes)))


def configs_from_metadata(cfg: RunConfig, metadata: Dict[str, str]) -> RunConfig:
    """The architecture stored in a checkpoint wins over the run configuration"""
    try:
        return cfg._replace(
            vit=VitConfig.from_json(metadata['vit_config']),
            text=TextConfig.from_json(metadata['text_config'])
        )
    except KeyError as e:
        raise DataError(f'checkpoint metadata lacks {e}') from e


def metadata_classes(metadata: Dict[str, str]) -> List[str]:
    try:
        return [str(name) for name in json_loads(metadata['classes'])]
    except (KeyError, ValueError, TypeError) as e:
        raise DataError('checkpoint metadata holds no valid class list') from e


def check_classes(expected: Sequence[str], found: Sequence[str], where: str):
    if list(expected) != list(found):
        raise DataError(f'class list mismatch: checkpoint has {list(expected)}, {where} has {list(found)}')


def sample_id(index: int, sample: SemSample, classes: Sequence[str]) -> str:
    return f'{index:05d}_{classes[sample.label]}'


class SemShotPipeline:
    def __init__(
            self, *,
            config: RunConfig,
            params: TensorMap,
            classes: Sequence[str],
            executor: Optional[Executor] = None
    ):
        if GOOD_CLASS not in classes:
            raise ConfigError(f'the class list must contain {GOOD_CLASS!r}')

        self.logger = getLogger('SemShotPipeline')

        self.config = config.validate()
        self.params = params
        self.classes = list(classes)
        self.executor = executor
        self.levels = config.level_indices
        self.fusion = FusionConfig(alpha=config.effective_alpha).validate()

        self.text_embeddings = build_class_embeddings(
            self.prompt_library(), self.classes, params, config.text
        )
        self.transformation = self.untrained_transformation()
        self.head: Optional[ClassifierHead] = None

    @property
    def ablated_transform(self) -> bool:
        return 'no_transform' in self.config.ablations

    def prompt_library(self) -> PromptLibrary:
        if 'generic_prompts' in self.config.ablations:
            return generic_prompt_library(self.classes)
        if self.config.prompts:
            return load_prompt_library(self.config.prompts)
        return default_prompt_library()

    def untrained_transformation(self) -> TransformationLayer:
        width = self.config.vit.width
        if self.ablated_transform:
            return TransformationLayer.identity(len(self.levels), width)
        return TransformationLayer.initial(self.config.vit.m, width, self.config.seed).select(self.levels)

    def _map(self, function, items: Sequence) -> list:
        if self.executor is None:
            return [function(item) for item in items]
        return list(self.executor.map(function, items))

    def _collector(self, out_dir: Optional[str], file_name: str) -> LossCurveCollector:
        if out_dir is None:
            return NullLossCurveCollector()
        makedirs(out_dir, exist_ok=True)
        return CsvLossCurveCollector(output_file=open(file=os_path.join(out_dir, file_name), mode='wb'))

    def finetune(self, episode: Episode, out_dir: Optional[str] = None) -> FinetuneCurves:
        check_classes(self.classes, episode.classes, 'the episode')
        self.logger.info(
            'Fine-tuning on %d support images (%d-way %d-shot)',
            len(episode.support), episode.n_way, episode.k_shot
        )
        cache = build_cache(episode, self.params, self.config.vit, self.executor).select_levels(self.levels)

        transformation_curve: List[float] = []
        if self.ablated_transform:
            self.logger.info('Transformation layer ablated, keeping the identity map')
            self.transformation = self.untrained_transformation()
        else:
            collector = self._collector(out_dir, TRANSFORMATION_LOSS_FILE)
            try:
                self.transformation, transformation_curve = train_transformation(
                    cache, self.text_embeddings, self.untrained_transformation(), self.config.train,
                    tau=self.config.tau, collector=collector
                )
            finally:
                collector.close()

        head = ClassifierHead.initial(len(self.levels) * self.config.vit.width, len(self.classes), self.config.seed)
        collector = self._collector(out_dir, HEAD_LOSS_FILE)
        try:
            self.head, head_curve = train_head(cache, head, self.config.train, collector=collector)
        finally:
            collector.close()

        return FinetuneCurves(transformation=transformation_curve, head=head_curve)

    def trained_params(self) -> TensorMap:
        if self.head is None:
            raise DataError('the pipeline has not been fine-tuned')
        params = self.transformation.to_params()
        params.update(self.head.to_params())
        return params

    def trained_metadata(self) -> Dict[str, str]:
        return model_metadata(self.config, self.classes)

    def load_trained(self, params: TensorMap, metadata: Dict[str, str]):
        stored_levels = json_loads(metadata.get('levels', '[]'))
        if 'cls.head.w' in params and stored_levels != self.levels:
            raise ConfigError(
                f'the checkpoint was fine-tuned on levels {stored_levels}, this run uses {self.levels}'
            )

        if self.ablated_transform:
            self.transformation = self.untrained_transformation()
        elif 'seg.transform.1.w' in params:
            self.transformation = TransformationLayer.from_params(params, len(self.levels))
        else:
            raise DataError('the checkpoint holds no fine-tuned transformation layer')

        if 'cls.head.w' in params:
            self.head = ClassifierHead.from_params(params)
        elif self.fusion.alpha == 0.0:
            # alpha = 0: P_C is ignored
            self.head = ClassifierHead(
                W=np.zeros((len(self.levels) * self.config.vit.width, len(self.classes)), dtype=np.float32),
                b=np.zeros(len(self.classes), dtype=np.float32)
            )
        else:
            raise DataError('the checkpoint holds no fine-tuned classification head')

    def encode(self, image: Tensor) -> EncodedImage:
        return restrict_levels(encode_image(image, self.params, self.config.vit), self.levels)

    def analyze(self, image: Tensor) -> Tuple[DefectMap, ClassProbabilities]:
        if self.head is None:
            raise DataError('the pipeline has no classification head')
        enc = self.encode(image)
        defect_map = segment_image(
            enc, self.transformation, self.text_embeddings, self.config.vit.image_size, self.config.tau
        )
        probabilities = classify_image(
            enc, self.transformation, self.head, self.text_embeddings, self.fusion,
            tau=self.config.tau, ps_source=self.config.ps_source
        )
        return defect_map, probabilities

    def infer(self, samples: Sequence[SemSample]) -> List[ImageResult]:
        self.logger.info('Running inference on %d images', len(samples))
        analyzed = self._map(self.analyze, [sample.image for sample in samples])
        return [
            ImageResult(
                image_id=sample_id(index, sample, self.classes),
                defect_map=result[0],
                probabilities=result[1]
            )
            for index, (sample, result) in enumerate(zip(samples, analyzed))
        ]

    def evaluate(self, samples: Sequence[SemSample], out_dir: Optional[str] = None) -> MetricsReport:
        results = self.infer(samples)
        good_index = self.classes.index(GOOD_CLASS)
        pixel_maps = [result.defect_map.fused_pixels for result in results]
        masks = [sample.mask for sample in samples]

        iauroc = auroc(ScoredSet(
            scores=[image_score(pixels) for pixels in pixel_maps],
            labels=[int(sample.label != good_index) for sample in samples]
        ))
        pauroc = auroc(ScoredSet(
            scores=np.concatenate([pixels.ravel() for pixels in pixel_maps]),
            labels=np.concatenate([(mask.ravel() > 0).astype(np.int64) for mask in masks])
        ))
        classification = classification_metrics(
            [result.probabilities.predicted for result in results],
            [sample.label for sample in samples],
            len(self.classes)
        )
        report = build_report(iauroc, pauroc, f1_max(pixel_maps, masks), classification)
        self.logger.info(
            'iAUROC %.4f, pAUROC %.4f, F1-max %.4f, accuracy %.4f, macro F1 %.4f',
            report.iauroc, report.pauroc, report.f1_max, report.accuracy, report.macro_f1
        )

        if out_dir is not None:
            self.write_evaluation(report, results, out_dir)
        return report

    def write_evaluation(self, report: MetricsReport, results: Sequence[ImageResult], out_dir: str):
        makedirs(out_dir, exist_ok=True)
        write_metrics_json(report, os_path.join(out_dir, 'metrics.json'))
        write_metrics_csv(report, os_path.join(out_dir, 'metrics.csv'))
        write_confusion_csv(report, self.classes, os_path.join(out_dir, 'confusion.csv'))
        self.write_classifications(results, out_dir)
        self.write_maps(results, os_path.join(out_dir, 'maps'))

    def write_classifications(self, results: Sequence[ImageResult], out_dir: str):
        makedirs(out_dir, exist_ok=True)
        write_classification_csv(
            [(result.image_id, result.probabilities) for result in results],
            self.classes,
            os_path.join(out_dir, 'classification.csv')
        )

    def write_maps(self, results: Sequence[ImageResult], maps_dir: str):
        makedirs(maps_dir, exist_ok=True)
        for result in results:
            write_raw_map(result.defect_map.fused_pixels, os_path.join(maps_dir, f'{result.image_id}.f32'))
            write_heatmap_pgm(result.defect_map.fused_pixels, os_path.join(maps_dir, f'{result.image_id}.pgm'))
        self.logger.debug('Wrote %d defect maps to %s', len(results), maps_dir)
