"""Dense NCHW / NCTHW arrays.

Tensors are plain C-contiguous numpy arrays; this module adds the shape
contract, deterministic fills, the flat-offset formula, the grouped channel
view and the ``NKT1`` binary dump format.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import DivisibilityError, ShapeError

MAGIC = b"NKT1"
_KIND_TAGS = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_TAG_KINDS = {tag: dt for dt, tag in _KIND_TAGS.items()}


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    """Validate a (N, C, H, W) or (N, C, T, H, W) shape and return it as a tuple."""
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (4, 5):
        raise ShapeError(f"expected rank 4 or 5, got shape {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {dims}")
    return dims


def spatial_size(shape: Sequence[int]) -> int:
    return prod(shape[2:])


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


@dataclass(frozen=True)
class Uniform:
    seed: int
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class Normal:
    seed: int
    mean: float = 0.0
    std: float = 1.0


FillSpec = Union[Constant, Uniform, Normal]


def new(shape: Sequence[int], fill: FillSpec = Constant(), dtype=np.float64) -> np.ndarray:
    """Allocate a tensor and fill it deterministically.

    Random fills are always drawn in double precision from a PCG64 stream and
    then cast, so a float32 tensor is the rounded copy of the float64 one.
    """
    shape = check_shape(shape)
    dtype = np.dtype(dtype)
    if dtype not in _KIND_TAGS:
        raise TypeError(f"unsupported scalar kind {dtype}")
    if isinstance(fill, Constant):
        return np.full(shape, fill.value, dtype=dtype)
    rng = np.random.Generator(np.random.PCG64(fill.seed))
    if isinstance(fill, Uniform):
        data = rng.uniform(fill.lo, fill.hi, size=shape)
    elif isinstance(fill, Normal):
        data = rng.normal(fill.mean, fill.std, size=shape)
    else:
        raise TypeError(f"unknown fill spec {fill!r}")
    return np.ascontiguousarray(data, dtype=dtype)


def flat_index(shape: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major offset of a multi-index, e.g. ((n*C + c)*H + h)*W + w."""
    shape = check_shape(shape)
    if len(idx) != len(shape):
        raise IndexError(f"index {tuple(idx)} has rank {len(idx)}, shape has rank {len(shape)}")
    offset = 0
    for i, extent in zip(idx, shape):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(idx)} out of range for shape {shape}")
        offset = offset * extent + int(i)
    return offset


def unravel(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    shape = check_shape(shape)
    if not 0 <= offset < prod(shape):
        raise IndexError(f"offset {offset} out of range for shape {shape}")
    out = []
    for extent in reversed(shape):
        offset, r = divmod(offset, extent)
        out.append(r)
    return tuple(reversed(out))


def grouped_view(x: np.ndarray, groups: int) -> np.ndarray:
    """Reshape (N, C, ...) to (N, G, C // G, ...) without copying.

    View index (n, g, c', ...) addresses channel g * (C // G) + c'.
    """
    check_shape(x.shape)
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise DivisibilityError(f"C={c} is not divisible by G={groups}")
    if not x.flags.c_contiguous:
        raise ShapeError("grouped_view needs a C-contiguous tensor")
    v = x.reshape(n, groups, c // groups, *x.shape[2:])
    assert np.shares_memory(v, x)
    return v


def ungrouped_view(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`grouped_view`."""
    n, g, cpg = v.shape[:3]
    return v.reshape(n, g * cpg, *v.shape[3:])


# -- NKT1 dump format -------------------------------------------------------
# magic "NKT1" | u8 rank | rank x u32 LE extents | u8 kind (4=f32, 8=f64) | LE data


def dump(x: np.ndarray, fp: BinaryIO) -> None:
    arr = np.asarray(x)
    if arr.dtype not in _KIND_TAGS:
        raise TypeError(f"unsupported scalar kind {arr.dtype}")
    if not 1 <= arr.ndim <= 255:
        raise ShapeError(f"cannot dump rank {arr.ndim}")
    fp.write(MAGIC)
    fp.write(struct.pack("<B", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(struct.pack("<B", _KIND_TAGS[arr.dtype]))
    fp.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load(fp: BinaryIO) -> np.ndarray:
    if fp.read(4) != MAGIC:
        raise ValueError("not an NKT1 tensor dump")
    (rank,) = struct.unpack("<B", _read_exact(fp, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank))
    (tag,) = struct.unpack("<B", _read_exact(fp, 1))
    if tag not in _TAG_KINDS:
        raise ValueError(f"unknown scalar-kind tag {tag}")
    dtype = _TAG_KINDS[tag]
    raw = _read_exact(fp, prod(dims) * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)


def dumps(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    dump(x, buf)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return load(io.BytesIO(data))


def save(x: np.ndarray, path: Union[str, Path]) -> None:
    with open(path, "wb") as fp:
        dump(x, fp)


def read(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fp:
        return load(fp)


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise ValueError("truncated NKT1 tensor dump")
    return data
