#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
On-disk episodes: `support/` and `query/` directories holding 8-bit PGM
images, `<name>.mask.pgm` masks (0/255) and a `manifest.csv` with the
`file,label,seed` columns, plus an `episode.json` with the class list.
"""


from csv import DictReader, writer as csv_writer
from json import dump as json_dump, load as json_load
from logging import getLogger
from os import makedirs, path as os_path
from typing import Any, Dict, List, Sequence

import numpy as np
from PIL import Image

from numerics import Tensor
from numerics.errors import DataError
from synth.episodes import Episode
from synth.generator import SemSample

MANIFEST_NAME = 'manifest.csv'
EPISODE_NAME = 'episode.json'
MANIFEST_COLUMNS = ('file', 'label', 'seed')

logger = getLogger('semshot.dataset')


def write_pgm(image: Tensor, path: str):
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def read_pgm(path: str) -> Tensor:
    try:
        with Image.open(path) as picture:
            pixels = np.asarray(picture.convert('L'), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f'cannot read image {path}: {e}') from e
    return pixels / 255.0


def mask_name(image_name: str) -> str:
    stem, _ = os_path.splitext(image_name)
    return f'{stem}.mask.pgm'


def write_split(samples: Sequence[SemSample], classes: Sequence[str], directory: str):
    makedirs(directory, exist_ok=True)
    with open(os_path.join(directory, MANIFEST_NAME), 'w', newline='', encoding='utf-8') as manifest:
        rows = csv_writer(manifest)
        rows.writerow(MANIFEST_COLUMNS)
        for index, sample in enumerate(samples):
            class_name = classes[sample.label]
            file_name = f'{index:05d}_{class_name}.pgm'
            write_pgm(sample.image, os_path.join(directory, file_name))
            write_pgm(sample.mask.astype(np.float32), os_path.join(directory, mask_name(file_name)))
            rows.writerow((file_name, class_name, sample.seed))


def read_split(directory: str, classes: Sequence[str]) -> List[SemSample]:
    manifest_path = os_path.join(directory, MANIFEST_NAME)
    if not os_path.isfile(manifest_path):
        raise DataError(f'missing manifest {manifest_path}')

    samples: List[SemSample] = []
    with open(manifest_path, 'r', newline='', encoding='utf-8') as manifest:
        for row in DictReader(manifest):
            try:
                file_name, class_name, seed = row['file'], row['label'], int(row['seed'])
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f'malformed manifest row in {manifest_path}: {row}') from e
            if class_name not in classes:
                raise DataError(f'{file_name}: class {class_name!r} is not one of {list(classes)}')

            image = read_pgm(os_path.join(directory, file_name))
            mask_path = os_path.join(directory, mask_name(file_name))
            if os_path.isfile(mask_path):
                mask = (read_pgm(mask_path) > 0.5).astype(np.uint8)
            else:
                mask = np.zeros(image.shape, dtype=np.uint8)
            if mask.shape != image.shape:
                raise DataError(f'{file_name}: mask {mask.shape} does not match image {image.shape}')
            samples.append(SemSample(image=image, mask=mask, label=classes.index(class_name), seed=seed))

    logger.debug('Read %d samples from %s', len(samples), directory)
    return samples


def write_episode(episode: Episode, directory: str, **details: Any):
    makedirs(directory, exist_ok=True)
    write_split(episode.support, episode.classes, os_path.join(directory, 'support'))
    write_split(episode.query, episode.classes, os_path.join(directory, 'query'))

    document: Dict[str, Any] = {'classes': episode.classes, 'k_shot': episode.k_shot, 'm_query': len(episode.query)}
    document.update(details)
    with open(os_path.join(directory, EPISODE_NAME), 'w', encoding='utf-8') as output_file:
        json_dump(document, output_file, indent=2, sort_keys=True)
    logger.info('Wrote episode (%d support, %d query) to %s', len(episode.support), len(episode.query), directory)


def read_classes(directory: str) -> List[str]:
    episode_path = os_path.join(directory, EPISODE_NAME)
    try:
        with open(episode_path, 'r', encoding='utf-8') as input_file:
            classes = json_load(input_file)['classes']
    except OSError as e:
        raise DataError(f'missing episode description {episode_path}') from e
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f'malformed episode description {episode_path}: {e}') from e
    return [str(name) for name in classes]


def read_episode(directory: str) -> Episode:
    classes = read_classes(directory)
    return Episode(
        classes=classes,
        support=read_split(os_path.join(directory, 'support'), classes),
        query=read_split(os_path.join(directory, 'query'), classes)
    )
