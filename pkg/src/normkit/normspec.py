"""Normalization-set geometry for BN, LN, IN and GN.

Every method partitions the elements of an (N, C, *spatial) tensor into sets
that share one mean and one variance.  The set of an element depends only on
its batch and channel coordinates:

    BN  id = c                      m = N * spatial
    LN  id = n                      m = C * spatial
    IN  id = n * C + c              m = spatial
    GN  id = n * G + c // (C // G)  m = (C // G) * spatial

Within a group, channels are consecutive along C.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from math import prod
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, PolicyError
from .tensor import check_shape


class Method(enum.Enum):
    BATCH = "bn"
    LAYER = "ln"
    INSTANCE = "in"
    GROUP = "gn"

    @classmethod
    def parse(cls, name: str) -> "Method":
        aliases = {
            "bn": cls.BATCH, "batchnorm": cls.BATCH,
            "ln": cls.LAYER, "layernorm": cls.LAYER,
            "in": cls.INSTANCE, "instancenorm": cls.INSTANCE,
            "gn": cls.GROUP, "groupnorm": cls.GROUP,
        }
        try:
            return aliases[name.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown normalization method {name!r}") from None


@dataclass(frozen=True)
class GroupPolicy:
    """Either a fixed group count or a fixed number of channels per group."""

    groups: Optional[int] = None
    channels_per_group: Optional[int] = None

    def __post_init__(self):
        if (self.groups is None) == (self.channels_per_group is None):
            raise PolicyError("set exactly one of groups / channels_per_group")
        value = self.groups if self.groups is not None else self.channels_per_group
        if value < 1:
            raise PolicyError(f"group policy value must be >= 1, got {value}")

    @classmethod
    def fixed_groups(cls, groups: int) -> "GroupPolicy":
        return cls(groups=groups)

    @classmethod
    def fixed_channels(cls, channels_per_group: int) -> "GroupPolicy":
        return cls(channels_per_group=channels_per_group)

    def describe(self) -> str:
        if self.groups is not None:
            return f"G={self.groups}"
        return f"C/G={self.channels_per_group}"


DEFAULT_POLICY = GroupPolicy.fixed_groups(32)


def resolve_group_count(policy: GroupPolicy, channels: int) -> int:
    if policy.groups is not None:
        if channels % policy.groups:
            raise PolicyError(f"C={channels} is not divisible by G={policy.groups}")
        return policy.groups
    cpg = policy.channels_per_group
    if channels % cpg:
        raise PolicyError(f"C={channels} is not divisible by {cpg} channels per group")
    return channels // cpg


def _groups_for(method: Method, policy: GroupPolicy, channels: int) -> int:
    if method is Method.GROUP:
        return resolve_group_count(policy, channels)
    if method is Method.INSTANCE:
        return channels
    return 1


def set_id(method: Method, policy: GroupPolicy, shape: Sequence[int], idx: Sequence[int]) -> int:
    shape = check_shape(shape)
    if len(idx) != len(shape) or any(not 0 <= i < e for i, e in zip(idx, shape)):
        raise IndexError(f"index {tuple(idx)} out of range for shape {shape}")
    n, c = idx[0], idx[1]
    C = shape[1]
    if method is Method.BATCH:
        return c
    if method is Method.LAYER:
        return n
    if method is Method.INSTANCE:
        return n * C + c
    G = resolve_group_count(policy, C)
    return n * G + c // (C // G)


@dataclass(frozen=True)
class Partition:
    """Disjoint, equal-size normalization sets over one tensor shape.

    ``rows`` / ``unrows`` move between the tensor layout and a contiguous
    (set_count, set_size) matrix whose rows list each set's elements in
    ascending flat-index order.  That ordering is the canonical reduction
    order used by the moment kernels.
    """

    method: Method
    shape: tuple
    groups: int
    set_count: int
    set_size: int

    @property
    def spatial(self) -> int:
        return prod(self.shape[2:])

    @cached_property
    def set_of(self) -> np.ndarray:
        """Set id of every element, indexed by flat offset."""
        N, C = self.shape[:2]
        n = np.arange(N)[:, None]
        c = np.arange(C)[None, :]
        if self.method is Method.BATCH:
            ids = np.broadcast_to(c, (N, C))
        elif self.method is Method.LAYER:
            ids = np.broadcast_to(n, (N, C))
        elif self.method is Method.INSTANCE:
            ids = n * C + c
        else:
            ids = n * self.groups + c // (C // self.groups)
        return np.repeat(ids.reshape(-1), self.spatial)

    @cached_property
    def members(self) -> np.ndarray:
        """(set_count, set_size) matrix of flat offsets, ascending per row."""
        return self.rows(np.arange(prod(self.shape)).reshape(self.shape))

    def rows(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.shape:
            raise ContractError(f"tensor shape {x.shape} does not match partition shape {self.shape}")
        N, C = self.shape[:2]
        x3 = x.reshape(N, C, self.spatial)
        if self.method is Method.BATCH:
            return np.ascontiguousarray(x3.transpose(1, 0, 2)).reshape(C, N * self.spatial)
        return x3.reshape(self.set_count, self.set_size)

    def unrows(self, r: np.ndarray) -> np.ndarray:
        N, C = self.shape[:2]
        if self.method is Method.BATCH:
            r = np.ascontiguousarray(r.reshape(C, N, self.spatial).transpose(1, 0, 2))
        return r.reshape(self.shape)


def build_partition(method: Method, policy: GroupPolicy, shape: Sequence[int]) -> Partition:
    shape = check_shape(shape)
    N, C = shape[:2]
    spatial = prod(shape[2:])
    G = _groups_for(method, policy, C)
    if method is Method.BATCH:
        count, size = C, N * spatial
    elif method is Method.LAYER:
        count, size = N, C * spatial
    else:
        count, size = N * G, (C // G) * spatial
    return Partition(method, shape, G, count, size)
