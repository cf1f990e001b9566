#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from csv import writer as csv_writer
from json import dump as json_dump
from typing import Any, Dict, List, Sequence, Tuple

from evaluation.metrics import ClassificationMetrics, MetricsReport
from inference.classification import ClassProbabilities

# Segmentation triple first, then the classification quadruple.
METRIC_COLUMNS = ('iauroc', 'pauroc', 'f1max', 'accuracy', 'precision', 'recall', 'f1')


def build_report(iauroc: float, pauroc: float, f1_max: float, classification: ClassificationMetrics) -> MetricsReport:
    return MetricsReport(
        iauroc=iauroc,
        pauroc=pauroc,
        f1_max=f1_max,
        accuracy=classification.accuracy,
        macro_precision=classification.macro_precision,
        macro_recall=classification.macro_recall,
        macro_f1=classification.macro_f1,
        confusion=classification.confusion
    )


def metric_values(report: MetricsReport) -> List[float]:
    return [
        report.iauroc,
        report.pauroc,
        report.f1_max,
        report.accuracy,
        report.macro_precision,
        report.macro_recall,
        report.macro_f1,
    ]


def report_document(report: MetricsReport) -> Dict[str, Any]:
    document: Dict[str, Any] = dict(zip(METRIC_COLUMNS, (float(value) for value in metric_values(report))))
    document['confusion'] = [[int(count) for count in row] for row in report.confusion]
    return document


def write_metrics_json(report: MetricsReport, path: str):
    with open(path, 'w', encoding='utf-8') as output_file:
        json_dump(report_document(report), output_file, indent=2, sort_keys=True)
        output_file.write('\n')


def write_metrics_csv(report: MetricsReport, path: str):
    with open(path, 'w', newline='', encoding='utf-8') as output_file:
        rows = csv_writer(output_file)
        rows.writerow(METRIC_COLUMNS)
        rows.writerow([f'{value:.6f}' for value in metric_values(report)])


def write_metrics_table(path: str, key_column: str, entries: Sequence[Tuple[Any, MetricsReport]]):
    """One metrics row per run, e.g. per shot count or per ablation variant"""
    with open(path, 'w', newline='', encoding='utf-8') as output_file:
        rows = csv_writer(output_file)
        rows.writerow((key_column,) + METRIC_COLUMNS)
        for key, report in entries:
            rows.writerow([key] + [f'{value:.6f}' for value in metric_values(report)])


def write_confusion_csv(report: MetricsReport, class_names: Sequence[str], path: str):
    """Rows are true classes, columns predicted classes"""
    with open(path, 'w', newline='', encoding='utf-8') as output_file:
        rows = csv_writer(output_file)
        rows.writerow([''] + list(class_names))
        for name, counts in zip(class_names, report.confusion):
            rows.writerow([name] + [int(count) for count in counts])


def write_classification_csv(
        results: Sequence[Tuple[str, ClassProbabilities]],
        class_names: Sequence[str],
        path: str
):
    with open(path, 'w', newline='', encoding='utf-8') as output_file:
        rows = csv_writer(output_file)
        rows.writerow(['image_id', 'predicted_class'] + [f'p_{name}' for name in class_names])
        for image_id, probabilities in results:
            rows.writerow(
                [image_id, class_names[probabilities.predicted]] + [f'{p:.6f}' for p in probabilities.p]
            )
