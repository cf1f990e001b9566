#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from typing import List, NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from numerics import Tensor
from numerics.errors import DataError, ShapeError

F1_THRESHOLDS = 256


class ScoredSet(NamedTuple):
    scores: ArrayLike
    labels: ArrayLike


class ClassificationMetrics(NamedTuple):
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray


class MetricsReport(NamedTuple):
    iauroc: float
    pauroc: float
    f1_max: float
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney statistic over midranks: ties count as half a win."""
    scores = np.asarray(s.scores, dtype=np.float64).ravel()
    labels = np.asarray(s.labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f'{scores.shape[0]} scores for {labels.shape[0]} labels')
    positives = labels == 1
    num_positive = int(np.sum(positives))
    num_negative = int(np.sum(labels == 0))
    if num_positive + num_negative != labels.shape[0]:
        raise DataError('labels must be 0 or 1')
    if num_positive == 0 or num_negative == 0:
        raise DataError('AUROC needs both positive and negative samples')

    ranks = rankdata(scores, method='average')
    wins = float(np.sum(ranks[positives])) - num_positive * (num_positive + 1) / 2.0
    return wins / (num_positive * num_negative)


def image_score(pixels: Tensor) -> float:
    return float(np.max(pixels))


def f1_max(pixel_scores: Sequence[Tensor], masks: Sequence[np.ndarray]) -> float:
    """
    Best pooled F1 over F1_THRESHOLDS evenly spaced thresholds in [0, 1]; a
    pixel is predicted defective when its score reaches the threshold.
    """
    if len(pixel_scores) != len(masks) or len(masks) == 0:
        raise ShapeError(f'{len(pixel_scores)} score maps for {len(masks)} masks')
    for scores, mask in zip(pixel_scores, masks):
        if np.shape(scores) != np.shape(mask):
            raise ShapeError(f'score map {np.shape(scores)} does not match mask {np.shape(mask)}')

    scores = np.concatenate([np.ravel(map_) for map_ in pixel_scores]).astype(np.float64)
    truth = np.concatenate([np.ravel(mask) for mask in masks]) > 0
    num_positive = int(np.sum(truth))
    if num_positive == 0:
        raise DataError('F1-max needs at least one defect pixel')

    thresholds = np.linspace(0.0, 1.0, F1_THRESHOLDS)
    all_sorted = np.sort(scores)
    positive_sorted = np.sort(scores[truth])
    predicted = scores.shape[0] - np.searchsorted(all_sorted, thresholds, side='left')
    true_positive = num_positive - np.searchsorted(positive_sorted, thresholds, side='left')

    f1 = 2.0 * true_positive / (predicted + num_positive)
    return float(np.max(f1))


def classification_metrics(
        predicted: Sequence[int],
        truth: Sequence[int],
        n_classes: int
) -> ClassificationMetrics:
    """Macro averages skip classes absent from both truth and prediction."""
    if len(predicted) != len(truth):
        raise ShapeError(f'{len(predicted)} predictions for {len(truth)} labels')
    if len(truth) == 0:
        raise DataError('no predictions to evaluate')

    all_labels = list(range(n_classes))
    present: List[int] = sorted(set(predicted) | set(truth))
    confusion = confusion_matrix(truth, predicted, labels=all_labels)
    precision, recall, f1, _ = precision_recall_fscore_support(
        truth, predicted, labels=present, average='macro', zero_division=0
    )
    return ClassificationMetrics(
        accuracy=float(np.trace(confusion)) / len(truth),
        macro_precision=float(precision),
        macro_recall=float(recall),
        macro_f1=float(f1),
        confusion=confusion
    )
