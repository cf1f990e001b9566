#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Binary checkpoint store and the QKV -> VVV weight surgery.

File layout (all integers little-endian):
  - magic b'SEMC', u32 version, u32 entry count
  - per entry: u16 name length, UTF-8 name, u8 rank, u32 extents, u64 offset
  - u32 metadata count, per item: u32 key length, key, u32 value length, value
  - payload: contiguous float32 data, offsets are relative to its start
"""


from hashlib import blake2b
from logging import getLogger
from re import compile as re_compile
from struct import error as StructError, pack, unpack_from
from typing import Dict, Iterable, List, NamedTuple, Tuple

import numpy as np

from model.config import VitConfig
from numerics import MAX_RANK, TensorMap
from numerics.errors import DataError, ShapeError

MAGIC = b'SEMC'
VERSION = 1

VVV_COPIED_TENSORS = ('w_v', 'b_v', 'w_out', 'b_out')

_LAYER_NAME_RE = re_compile(r'^vision\.block(\d+)\.layer(\d+)\.qkv\.')

logger = getLogger('semshot.checkpoint')


class BadMagicError(DataError):
    pass


class TruncatedCheckpointError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class MissingTensorError(DataError):
    pass


class Checkpoint(NamedTuple):
    tensors: TensorMap
    metadata: Dict[str, str]


class SurgeryReport(NamedTuple):
    copied_pairs: List[Tuple[str, str]]
    checksum_before: int
    checksum_after: int


def layer_prefix(block: int, layer: int) -> str:
    """block and layer are 1-based, as in the naming scheme"""
    return f'vision.block{block}.layer{layer}'


def save_checkpoint(params: TensorMap, meta: Dict[str, str], path: str):
    header = MAGIC + pack('<II', VERSION, len(params))
    payload_chunks: List[bytes] = []
    offset = 0

    for name, tensor in params.items():
        if not 1 <= tensor.ndim <= MAX_RANK:
            raise ShapeError(f'{name}: rank {tensor.ndim} is not storable')
        encoded_name = name.encode('utf-8')
        header += pack('<H', len(encoded_name)) + encoded_name
        header += pack(f'<B{tensor.ndim}I', tensor.ndim, *tensor.shape)
        header += pack('<Q', offset)

        chunk = np.ascontiguousarray(tensor, dtype='<f4').tobytes()
        payload_chunks.append(chunk)
        offset += len(chunk)

    header += pack('<I', len(meta))
    for key, value in meta.items():
        encoded_key, encoded_value = key.encode('utf-8'), value.encode('utf-8')
        header += pack('<I', len(encoded_key)) + encoded_key
        header += pack('<I', len(encoded_value)) + encoded_value

    with open(path, 'wb') as output_file:
        output_file.write(header)
        for chunk in payload_chunks:
            output_file.write(chunk)

    logger.info('Saved %d tensors (%d payload bytes) to %s', len(params), offset, path)


class _Cursor:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.position = 0

    def take(self, fmt: str) -> tuple:
        try:
            values = unpack_from(fmt, self.buffer, self.position)
        except StructError as e:
            raise TruncatedCheckpointError(f'truncated header at byte {self.position}') from e
        self.position += len(pack(fmt, *values))
        return values

    def take_bytes(self, length: int) -> bytes:
        if self.position + length > len(self.buffer):
            raise TruncatedCheckpointError(f'truncated header at byte {self.position}')
        chunk = self.buffer[self.position:self.position + length]
        self.position += length
        return chunk


def load_checkpoint(path: str) -> Tuple[TensorMap, Dict[str, str]]:
    with open(path, 'rb') as input_file:
        buffer = input_file.read()

    if len(buffer) < len(MAGIC):
        raise TruncatedCheckpointError(f'truncated file {path}')
    if buffer[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f'bad magic in {path}: {buffer[:len(MAGIC)]!r}')

    cursor = _Cursor(buffer)
    cursor.position = len(MAGIC)
    version, num_entries = cursor.take('<II')
    if version != VERSION:
        raise VersionMismatchError(f'checkpoint version {version}, expected {VERSION}')

    entries: List[Tuple[str, Tuple[int, ...], int]] = []
    for _ in range(num_entries):
        name_length, = cursor.take('<H')
        name = cursor.take_bytes(name_length).decode('utf-8')
        rank, = cursor.take('<B')
        shape = cursor.take(f'<{rank}I')
        offset, = cursor.take('<Q')
        entries.append((name, shape, offset))

    metadata: Dict[str, str] = {}
    num_meta, = cursor.take('<I')
    for _ in range(num_meta):
        key_length, = cursor.take('<I')
        key = cursor.take_bytes(key_length).decode('utf-8')
        value_length, = cursor.take('<I')
        metadata[key] = cursor.take_bytes(value_length).decode('utf-8')

    payload = buffer[cursor.position:]
    tensors = _materialize(entries, payload, path)

    logger.info('Loaded %d tensors from %s', len(tensors), path)
    return tensors, metadata


def _materialize(
        entries: Iterable[Tuple[str, Tuple[int, ...], int]],
        payload: bytes,
        path: str
) -> TensorMap:
    tensors: TensorMap = {}
    claimed: List[Tuple[int, int]] = []

    for name, shape, offset in entries:
        if name in tensors:
            raise DataError(f'duplicated tensor {name} in {path}')
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(payload):
            raise TruncatedCheckpointError(f'truncated payload in {path} ({name})')
        claimed.append((offset, end))

        tensor = np.frombuffer(payload, dtype='<f4', count=count, offset=offset)
        tensor = tensor.astype(np.float32).reshape(shape)
        tensor.setflags(write=False)
        tensors[name] = tensor

    claimed.sort()
    for (_, previous_end), (start, _) in zip(claimed, claimed[1:]):
        if start < previous_end:
            raise DataError(f'overlapping tensors in {path}')

    return tensors


def _surgery_layers(ckpt: Checkpoint) -> List[Tuple[int, int]]:
    if 'vit_config' in ckpt.metadata:
        cfg = VitConfig.from_json(ckpt.metadata['vit_config'])
        return [(j, i) for j in range(1, cfg.m + 1) for i in range(1, cfg.n + 1)]

    layers = set()
    for name in ckpt.tensors:
        match = _LAYER_NAME_RE.match(name)
        if match is not None:
            layers.add((int(match.group(1)), int(match.group(2))))
    return sorted(layers)


def _checksum(tensors: TensorMap, excluded: Iterable[str]) -> int:
    skip = set(excluded)
    digest = blake2b(digest_size=8)
    for name in sorted(tensors):
        if name in skip:
            continue
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(tensors[name], dtype='<f4').tobytes())
    return int.from_bytes(digest.digest(), 'little')


def surgery_copy_qkv_to_vvv(ckpt: Checkpoint) -> Tuple[Checkpoint, SurgeryReport]:
    """
    Builds the V-V branch of every dual-path block by copying the value and
    output projections of its QKV attention. Nothing else is touched, and no
    retraining is involved.
    """
    layers = _surgery_layers(ckpt)
    if len(layers) == 0:
        raise MissingTensorError('checkpoint holds no QKV attention layers')

    copied_pairs: List[Tuple[str, str]] = []
    for block, layer in layers:
        prefix = layer_prefix(block, layer)
        for suffix in VVV_COPIED_TENSORS:
            source = f'{prefix}.qkv.{suffix}'
            if source not in ckpt.tensors:
                raise MissingTensorError(f'missing {source} for surgery of block {block} layer {layer}')
            copied_pairs.append((source, f'{prefix}.vvv.{suffix}'))

    destinations = [destination for _, destination in copied_pairs]
    checksum_before = _checksum(ckpt.tensors, destinations)

    tensors = dict(ckpt.tensors)
    for source, destination in copied_pairs:
        copied = np.array(ckpt.tensors[source], dtype=np.float32, copy=True)
        copied.setflags(write=False)
        tensors[destination] = copied

    report = SurgeryReport(
        copied_pairs=copied_pairs,
        checksum_before=checksum_before,
        checksum_after=_checksum(tensors, destinations)
    )
    logger.info('Surgery copied %d tensors over %d dual-path blocks', len(copied_pairs), len(layers))
    return Checkpoint(tensors=tensors, metadata=dict(ckpt.metadata)), report
