#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Prompt composition and the text side of the joint embedding space.

Prompts are built from template-level strings (acquisition conditions of the
microscope: blur, brightness, ...) with a single `{state}` slot, filled by
state-level strings describing what each class looks like. Every prompt goes
through a small causal transformer; the embedding of a class is the
normalized mean of its prompt ensemble.
"""


from json import load as json_load
from logging import getLogger
from re import compile as re_compile
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from model import DEFAULT_CLASSES, GOOD_CLASS
from model.config import TextConfig
from model.vit import read_layer, vanilla_layer
from numerics import Tensor, TensorMap
from numerics.errors import ConfigError, DataError, ShapeError
from numerics.kernels import l2_normalize

STATE_SLOT = '{state}'

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_RESERVED_IDS = 3

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_WORD_RE = re_compile(r'[^\W_]+')

logger = getLogger('semshot.text')


class PromptLibrary(NamedTuple):
    templates: List[str]
    states: Dict[str, List[str]]

    def validate(self) -> 'PromptLibrary':
        for template in self.templates:
            if template.count(STATE_SLOT) != 1:
                raise ConfigError(f'template {template!r} must contain {STATE_SLOT} exactly once')
        if len(self.templates) == 0:
            raise ConfigError('prompt library has no templates')
        for class_name, states in self.states.items():
            if len(states) == 0:
                raise ConfigError(f'class {class_name!r} has no state prompts')
        if GOOD_CLASS not in self.states:
            raise ConfigError(f'prompt library must describe the {GOOD_CLASS!r} class')
        return self


class TokenSequence(NamedTuple):
    ids: Tuple[int, ...]

    @property
    def eos_position(self) -> int:
        return self.ids.index(EOS_ID)


class TextEmbeddingSet(NamedTuple):
    class_names: List[str]
    embeddings: Tensor  # N×D, unit rows

    @property
    def good_index(self) -> int:
        return self.class_names.index(GOOD_CLASS)


DEFAULT_TEMPLATES = [
    'a photo of the {state}',
    'a blurry photo of the {state}',
    'a dark photo of a {state}',
    'a bright photo of the {state}',
    'an sem image of the {state}',
]

DEFAULT_STATES = {
    GOOD_CLASS: [
        'flawless wafer surface',
        'image with a regular background pattern',
        'clean surface without defects',
    ],
    'bridge': [
        'image with a short bar bridging two lines',
        'image with a bridge shorting neighbouring patterns',
    ],
    'copper_residue': [
        'image with irregular copper residue',
        'image with clustered residue blobs',
    ],
    'hole': [
        'image with a dark round hole',
        'image with a circular pit in the surface',
    ],
    'infilm': [
        'image with a faint particle embedded within the film',
        'image with a low contrast infilm defect',
    ],
    'particle': [
        'image with a bright particle',
        'image with a small round particle on the surface',
    ],
    'scratch': [
        'image with a linear scratch',
        'image with fish scale-shaped scratches',
        'image with a fine long linear mark',
    ],
}


def default_prompt_library() -> PromptLibrary:
    return PromptLibrary(
        templates=list(DEFAULT_TEMPLATES),
        states={name: list(states) for name, states in DEFAULT_STATES.items()}
    )


def generic_prompt_library(classes: Sequence[str] = DEFAULT_CLASSES) -> PromptLibrary:
    """Coarse prompts without morphology knowledge (the prompt ablation)"""
    return PromptLibrary(
        templates=['a photo of a {state}'],
        states={name: ['good surface' if name == GOOD_CLASS else 'defect'] for name in classes}
    )


def load_prompt_library(path: str) -> PromptLibrary:
    try:
        with open(path, 'r', encoding='utf-8') as input_file:
            document = json_load(input_file)
        library = PromptLibrary(
            templates=[str(t) for t in document['templates']],
            states={str(k): [str(s) for s in v] for k, v in document['states'].items()}
        )
    except (KeyError, TypeError, AttributeError, ValueError) as e:
        raise DataError(f'malformed prompt library {path}: {e}') from e
    return library.validate()


def compose_prompts(lib: PromptLibrary, class_name: str) -> List[str]:
    if class_name not in lib.states:
        raise ConfigError(f'unknown class {class_name!r}')
    return [
        template.replace(STATE_SLOT, state)
        for template in lib.templates
        for state in lib.states[class_name]
    ]


def _fnv1a_64(word: str) -> int:
    value = _FNV_OFFSET
    for byte in word.encode('utf-8'):
        value = ((value ^ byte) * _FNV_PRIME) & 0xffffffffffffffff
    return value


def tokenize(text: str, vocab_size: int, context_length: int = 77) -> TokenSequence:
    assert vocab_size >= 256
    words = _WORD_RE.findall(text.lower())[:context_length - 2]
    ids = [BOS_ID] + [
        NUM_RESERVED_IDS + _fnv1a_64(word) % (vocab_size - NUM_RESERVED_IDS) for word in words
    ] + [EOS_ID]
    return TokenSequence(ids=tuple(ids + [PAD_ID] * (context_length - len(ids))))


def encode_text(tokens: Sequence[TokenSequence], params: TensorMap, cfg: TextConfig) -> Tensor:
    """
    Encodes every sequence independently: embeddings + learned positions,
    `cfg.depth` causal pre-LN layers, the hidden state at EOS projected into
    the joint space and L2-normalized.
    """
    token_table = params['text.token_embedding']
    positions = params['text.pos']
    projection = params['text.proj']
    layers = [
        read_layer(params, f'text.layer{i}', 'attn', with_vvv=False) for i in range(1, cfg.depth + 1)
    ]

    rows: List[Tensor] = []
    for sequence in tokens:
        ids = np.asarray(sequence.ids, dtype=np.int64)
        if len(ids) != positions.shape[0]:
            raise ShapeError(f'sequence length {len(ids)} does not match context {positions.shape[0]}')
        if ids.min() < 0 or ids.max() >= token_table.shape[0]:
            raise DataError(f'token id out of vocabulary range [0, {token_table.shape[0]})')

        hidden = token_table[ids] + positions
        for layer in layers:
            hidden = vanilla_layer(hidden, layer, cfg.attention, causal=True)
        rows.append(hidden[sequence.eos_position] @ projection)

    if len(rows) == 0:
        return np.zeros((0, projection.shape[1]), dtype=np.float32)
    return l2_normalize(np.stack(rows).astype(np.float32), axis=1)


def build_class_embeddings(
        lib: PromptLibrary,
        classes: Sequence[str],
        params: TensorMap,
        cfg: TextConfig
) -> TextEmbeddingSet:
    if len(classes) < 2 or classes[0] != GOOD_CLASS:
        raise ConfigError(f'class list needs {GOOD_CLASS!r} first and at least one defect class, got {list(classes)}')

    rows: List[Tensor] = []
    for class_name in classes:
        prompts = compose_prompts(lib, class_name)
        embeddings = encode_text(
            [tokenize(prompt, cfg.vocab_size, cfg.context_length) for prompt in prompts], params, cfg
        )
        rows.append(np.mean(embeddings.astype(np.float64), axis=0))
        logger.debug('Encoded %d prompts for class %s', len(prompts), class_name)

    return TextEmbeddingSet(
        class_names=list(classes),
        embeddings=l2_normalize(np.stack(rows), axis=1).astype(np.float32)
    )
