#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.


import numpy as np
import pytest
from PIL import Image

from inference.export import heatmap_bytes, read_raw_map, write_heatmap_pgm, write_raw_map
from numerics.errors import DataError, ShapeError


def test_raw_map_file(tmp_path):
    pixels = np.random.default_rng(0).uniform(size=(6, 4)).astype(np.float32)
    path = tmp_path / 'map.f32'
    write_raw_map(pixels, str(path))

    assert path.stat().st_size == 8 + 4 * 24
    assert path.read_bytes()[:8] == b'\x06\x00\x00\x00\x04\x00\x00\x00'
    assert read_raw_map(str(path)).tobytes() == pixels.tobytes()


def test_raw_map_errors(tmp_path):
    with pytest.raises(expected_exception=ShapeError):
        write_raw_map(np.zeros(4, dtype=np.float32), str(tmp_path / 'flat.f32'))

    path = tmp_path / 'short.f32'
    write_raw_map(np.zeros((2, 2), dtype=np.float32), str(path))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(expected_exception=DataError):
        read_raw_map(str(path))


def test_heatmap_bytes():
    np.testing.assert_array_equal(heatmap_bytes(np.array([[0.0, 0.2], [0.6, 1.0]])), [[0, 51], [153, 255]])
    np.testing.assert_array_equal(heatmap_bytes(np.full((2, 2), 0.3)), np.zeros((2, 2)))


def test_heatmap_pgm(tmp_path):
    path = str(tmp_path / 'map.pgm')
    write_heatmap_pgm(np.linspace(0.0, 1.0, 16).reshape(4, 4), path)
    with Image.open(path) as picture:
        assert picture.mode == 'L'
        assert picture.size == (4, 4)
        pixels = np.asarray(picture)
    assert pixels[0, 0] == 0
    assert pixels[3, 3] == 255
