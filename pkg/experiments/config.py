#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Run configuration: a flat `key = value` file (with `#` comments) parsed into
a RunConfig, later overridden by command line flags. Keys accept `-` or `_`.
Backbone keys are the VitConfig field names (`width`, `m`, ...), text
encoder keys carry a `text_` prefix and training keys are the TrainConfig
field names (`lr`, `epochs`, ...).
"""


from configparser import ConfigParser, Error as ConfigParserError, SectionProxy
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import psutil

from inference import DEFAULT_ALPHA, DEFAULT_TAU
from inference.classification import PS_SOURCES
from model import DEFAULT_CLASSES
from model.config import TextConfig, VitConfig, check_joint_width
from numerics.errors import ConfigError
from synth.episodes import check_episode_sizes
from training.tuner import TrainConfig

ABLATIONS = ('no_transform', 'generic_prompts', 'last_layer_only', 'ps_only', 'pc_only')

_SECTION = 'semshot'


class RunConfig(NamedTuple):
    checkpoint: str = 'semshot.ckpt'
    prompts: Optional[str] = None
    data_dir: str = 'episode'
    out_dir: str = 'results'
    seed: int = 42
    n_way: int = len(DEFAULT_CLASSES)
    k_shot: int = 10
    m_query: int = 200
    banner: bool = False
    vit: VitConfig = VitConfig()
    text: TextConfig = TextConfig()
    train: TrainConfig = TrainConfig()
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    ps_source: str = 'patches'
    ablations: Tuple[str, ...] = ()
    threads: int = 0  # 0: one worker per logical core

    @property
    def classes(self) -> List[str]:
        return list(DEFAULT_CLASSES[:self.n_way])

    @property
    def effective_alpha(self) -> float:
        if 'pc_only' in self.ablations:
            return 1.0
        if 'ps_only' in self.ablations:
            return 0.0
        return self.alpha

    @property
    def level_indices(self) -> List[int]:
        if 'last_layer_only' in self.ablations:
            return [self.vit.m - 1]
        return list(range(self.vit.m))

    @property
    def worker_count(self) -> int:
        if self.threads > 0:
            return self.threads
        return psutil.cpu_count(logical=True) or 1

    def validate(self) -> 'RunConfig':
        unknown = [flag for flag in self.ablations if flag not in ABLATIONS]
        if len(unknown) > 0:
            raise ConfigError(f'unknown ablation flags {unknown}, expected some of {ABLATIONS}')
        if 'ps_only' in self.ablations and 'pc_only' in self.ablations:
            raise ConfigError('ps_only and pc_only cannot be combined')
        if self.tau <= 0:
            raise ConfigError(f'tau must be positive, got {self.tau}')
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f'alpha must lie in [0, 1], got {self.alpha}')
        if self.ps_source not in PS_SOURCES:
            raise ConfigError(f'ps-source must be one of {PS_SOURCES}, got {self.ps_source!r}')
        if self.threads < 0:
            raise ConfigError('threads cannot be negative')
        check_episode_sizes(self.n_way, self.k_shot, self.m_query)
        self.vit.validate()
        self.text.validate()
        self.train.validate()
        check_joint_width(self.vit, self.text)
        return self


def _parse_bool(section: SectionProxy, key: str) -> bool:
    value = section.getboolean(key)
    assert value is not None
    return value


def _split_flags(text: str) -> Tuple[str, ...]:
    return tuple(flag.strip().replace('-', '_') for flag in text.split(',') if flag.strip() != '')


_Getter = Callable[[SectionProxy, str], Any]


def _text(section: SectionProxy, key: str) -> str:
    return section[key].strip()


def _int(section: SectionProxy, key: str) -> int:
    return int(section[key])


def _float(section: SectionProxy, key: str) -> float:
    return float(section[key])


_RUN_KEYS: Dict[str, _Getter] = {
    'checkpoint': _text,
    'prompts': _text,
    'data_dir': _text,
    'out_dir': _text,
    'seed': _int,
    'n_way': _int,
    'k_shot': _int,
    'm_query': _int,
    'banner': _parse_bool,
    'tau': _float,
    'alpha': _float,
    'ps_source': _text,
    'threads': _int,
}

_TRAIN_KEYS: Dict[str, _Getter] = {
    'lr': _float,
    'epochs': _int,
    'beta1': _float,
    'beta2': _float,
    'eps': _float,
    'seg_loss_weight': _float,
}


def read_config_file(path: str) -> SectionProxy:
    parser = ConfigParser(interpolation=None)
    parser.optionxform = lambda key: key.strip().lower().replace('-', '_')  # type: ignore
    try:
        with open(path, 'r', encoding='utf-8') as input_file:
            parser.read_string(f'[{_SECTION}]\n' + input_file.read(), source=path)
    except ConfigParserError as e:
        raise ConfigError(f'cannot parse {path}: {e}') from e
    return parser[_SECTION]


def config_from_section(section: SectionProxy, base: RunConfig = RunConfig()) -> RunConfig:
    run_values: Dict[str, Any] = {}
    vit_values: Dict[str, Any] = {}
    text_values: Dict[str, Any] = {}
    train_values: Dict[str, Any] = {}

    try:
        for key in section:
            if key in _RUN_KEYS:
                run_values[key] = _RUN_KEYS[key](section, key)
            elif key in _TRAIN_KEYS:
                train_values[key] = _TRAIN_KEYS[key](section, key)
            elif key in VitConfig._fields:
                vit_values[key] = _int(section, key)
            elif key.startswith('text_') and key[len('text_'):] in TextConfig._fields:
                text_values[key[len('text_'):]] = _int(section, key)
            elif key == 'ablate':
                run_values['ablations'] = _split_flags(section[key])
            else:
                raise ConfigError(f'unknown configuration key {key!r}')
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f'invalid configuration value: {e}') from e

    seed = run_values.get('seed', base.seed)
    return base._replace(
        vit=base.vit._replace(**vit_values),
        text=base.text._replace(**text_values),
        train=base.train._replace(seed=seed, **train_values),
        **run_values
    )


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any], ablations: Sequence[str] = ()) -> RunConfig:
    """Command line values win over file values; None means "not given"."""
    given = {key: value for key, value in overrides.items() if value is not None}
    train_values = {key: given.pop(key) for key in list(given) if key in _TRAIN_KEYS}

    flags = tuple(cfg.ablations) + tuple(flag.replace('-', '_') for flag in ablations)
    cfg = cfg._replace(ablations=tuple(dict.fromkeys(flags)), **given)
    return cfg._replace(train=cfg.train._replace(seed=cfg.seed, **train_values))
