"""CDT1 tensor container files.

Layout, all little-endian:

    magic     4 bytes  b'CDT1'
    version   u32      1
    dtype     u32      1 = float32
    rank      u32
    dims      u64 * rank
    payload   float32 * prod(dims), row-major
"""
import logging
import os
import struct
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch

from difftok.errors import TensorFormatError
from difftok.record_utils import fields

logger = logging.getLogger(__name__)

MAGIC = b'CDT1'
FORMAT_VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct('<4sIII')

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class TensorContainer:
    dims: Tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if tuple(self.data.shape) != tuple(self.dims):
            raise TensorFormatError('container dims do not match data', dims=self.dims, shape=self.data.shape)

    @property
    def nbytes(self) -> int:
        return HEADER.size + 8 * len(self.dims) + self.data.size * 4

    def to_bytes(self) -> bytes:
        header = HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, len(self.dims))
        dims = struct.pack(f'<{len(self.dims)}Q', *self.dims)
        return header + dims + np.ascontiguousarray(self.data, dtype='<f4').tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> 'TensorContainer':
        if len(raw) < HEADER.size:
            raise TensorFormatError('container shorter than its header', size=len(raw))
        magic, version, dtype, rank = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise TensorFormatError(f'bad magic {magic!r}', expected=MAGIC.decode())
        if version != FORMAT_VERSION:
            raise TensorFormatError(f'unsupported container version {version}')
        if dtype != DTYPE_F32:
            raise TensorFormatError(f'unsupported dtype code {dtype}')

        offset = HEADER.size + 8 * rank
        if len(raw) < offset:
            raise TensorFormatError('container truncated inside dims', rank=rank, size=len(raw))
        dims = struct.unpack_from(f'<{rank}Q', raw, HEADER.size)
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if len(raw) != offset + 4 * count:
            raise TensorFormatError('payload length does not match dims',
                                    dims=dims, expected=offset + 4 * count, size=len(raw))

        data = np.frombuffer(raw, dtype='<f4', count=count, offset=offset).reshape(dims).astype(np.float32)
        return cls(tuple(int(d) for d in dims), data)


class TensorStore:
    def write(self, path: str, value: ArrayLike) -> TensorContainer:
        if isinstance(value, torch.Tensor):
            if value.dtype != torch.float32:
                raise TensorFormatError(f'only float32 tensors can be stored, got {value.dtype}', path=path)
            value = value.detach().cpu().numpy()
        if value.dtype != np.float32:
            raise TensorFormatError(f'only float32 arrays can be stored, got {value.dtype}', path=path)

        container = TensorContainer(tuple(value.shape), value)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'wb') as fh:
            fh.write(container.to_bytes())
        logger.debug('tensor written', extra=fields(path=path, dims=container.dims))
        return container

    def read(self, path: str) -> TensorContainer:
        try:
            with open(path, 'rb') as fh:
                raw = fh.read()
        except OSError as e:
            raise TensorFormatError(f'cannot read tensor file {path}: {e}', path=path) from e
        try:
            return TensorContainer.from_bytes(raw)
        except TensorFormatError as e:
            e.details.setdefault('path', path)
            raise

    def read_tensor(self, path: str) -> torch.Tensor:
        return torch.from_numpy(self.read(path).data.copy())


tensor_store = TensorStore()


def write_tensor(path: str, value: ArrayLike) -> TensorContainer:
    return tensor_store.write(path, value)


def read_tensor(path: str) -> TensorContainer:
    return tensor_store.read(path)
