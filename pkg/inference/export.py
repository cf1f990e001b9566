#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


from struct import pack, unpack

import numpy as np
from PIL import Image

from numerics import Tensor
from numerics.errors import DataError, ShapeError

RAW_HEADER_SIZE = 8


def write_raw_map(pixels: Tensor, path: str):
    """Little-endian float32 payload after a {u32 H, u32 W} header"""
    if pixels.ndim != 2:
        raise ShapeError(f'a pixel map must be 2-D, got {pixels.shape}')
    height, width = pixels.shape
    with open(path, 'wb') as output_file:
        output_file.write(pack('<II', height, width))
        output_file.write(np.ascontiguousarray(pixels, dtype='<f4').tobytes())


def read_raw_map(path: str) -> Tensor:
    with open(path, 'rb') as input_file:
        buffer = input_file.read()
    if len(buffer) < RAW_HEADER_SIZE:
        raise DataError(f'truncated map {path}')
    height, width = unpack('<II', buffer[:RAW_HEADER_SIZE])
    if len(buffer) != RAW_HEADER_SIZE + 4 * height * width:
        raise DataError(f'map {path} does not hold {height}×{width} values')
    return np.frombuffer(buffer, dtype='<f4', offset=RAW_HEADER_SIZE).astype(np.float32).reshape(height, width)


def heatmap_bytes(pixels: Tensor) -> np.ndarray:
    low, high = float(np.min(pixels)), float(np.max(pixels))
    if high - low <= 0.0:
        return np.zeros(pixels.shape, dtype=np.uint8)
    return np.round(255.0 * (pixels - low) / (high - low)).astype(np.uint8)


def write_heatmap_pgm(pixels: Tensor, path: str):
    """Min-max normalized 8-bit heatmap (binary PGM)"""
    if pixels.ndim != 2:
        raise ShapeError(f'a pixel map must be 2-D, got {pixels.shape}')
    Image.fromarray(heatmap_bytes(pixels)).save(path, format='PPM')
