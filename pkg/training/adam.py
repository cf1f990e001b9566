#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from typing import NamedTuple, Tuple

import numpy as np

from numerics import TensorMap
from numerics.errors import ShapeError


class AdamConfig(NamedTuple):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState(NamedTuple):
    first_moments: TensorMap
    second_moments: TensorMap
    step: int = 0

    @staticmethod
    def zeros_like(params: TensorMap) -> 'AdamState':
        return AdamState(
            first_moments={name: np.zeros_like(value) for name, value in params.items()},
            second_moments={name: np.zeros_like(value) for name, value in params.items()},
            step=0
        )


def adam_step(
        params: TensorMap,
        grads: TensorMap,
        state: AdamState,
        cfg: AdamConfig
) -> Tuple[TensorMap, AdamState]:
    """
    One bias-corrected Adam update. Inputs are left untouched; parameters
    with no gradient entry keep their value (and moments).
    """
    for name, grad in grads.items():
        if name not in params or params[name].shape != grad.shape:
            raise ShapeError(f'gradient {name} {grad.shape} does not match its parameter')

    step = state.step + 1
    correction1 = 1.0 - cfg.beta1 ** step
    correction2 = 1.0 - cfg.beta2 ** step

    new_params: TensorMap = dict(params)
    first_moments: TensorMap = dict(state.first_moments)
    second_moments: TensorMap = dict(state.second_moments)
    for name, grad in grads.items():
        m = cfg.beta1 * state.first_moments[name] + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.second_moments[name] + (1.0 - cfg.beta2) * grad * grad
        update = cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        new_params[name] = (params[name] - update).astype(params[name].dtype)
        first_moments[name] = m
        second_moments[name] = v

    return new_params, AdamState(first_moments=first_moments, second_moments=second_moments, step=step)
