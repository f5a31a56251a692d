"""Forward and backward passes of the normalization family.

All four methods share one kernel: gather the partition's sets into a
(set_count, m) matrix, take per-row moments in float64, normalize, and apply
the per-channel affine ``y = gamma * x_hat + beta``.  Only the partition
differs between BN, LN, IN and GN.

BatchNorm additionally has ``eval`` and ``frozen`` modes that replace batch
moments by running statistics; both reduce to the per-channel linear map
``y = (gamma / sigma) * (x - mu) + beta``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, StateError
from .normspec import DEFAULT_POLICY, GroupPolicy, Method, Partition, build_partition
from .tensor import check_shape

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.9
MODES = ("train", "eval", "frozen")


@dataclass(frozen=True)
class NormScheme:
    method: Method
    policy: GroupPolicy = DEFAULT_POLICY
    eps: float = DEFAULT_EPS
    mode: str = "train"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.eps < 0:
            raise ContractError(f"eps must be non-negative, got {self.eps}")

    @property
    def uses_running_stats(self) -> bool:
        return self.method is Method.BATCH and self.mode != "train"

    def with_mode(self, mode: str) -> "NormScheme":
        return replace(self, mode=mode)


@dataclass
class NormParams:
    """Per-channel affine parameters, plus running moments for BatchNorm."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ContractError("gamma and beta must be vectors of equal length")
        if not 0.0 < self.momentum < 1.0:
            raise ContractError(f"momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def create(cls, channels: int, *, running: bool = False, zero_gamma: bool = False,
               momentum: float = DEFAULT_MOMENTUM, dtype=np.float64) -> "NormParams":
        gamma = (np.zeros if zero_gamma else np.ones)(channels, dtype=dtype)
        beta = np.zeros(channels, dtype=dtype)
        rm = np.zeros(channels, dtype=np.float64) if running else None
        rv = np.ones(channels, dtype=np.float64) if running else None
        return cls(gamma, beta, rm, rv, momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def has_running_stats(self) -> bool:
        return self.running_mean is not None and self.running_var is not None


@dataclass(frozen=True)
class MomentSet:
    mu: np.ndarray
    sigma2: np.ndarray
    set_size: int
    method: Method


@dataclass(frozen=True)
class ForwardCache:
    x_hat: np.ndarray  # accumulation precision, input layout
    inv_std: np.ndarray  # per set (train) or per channel (running stats)
    moments: MomentSet
    partition: Partition
    scheme: NormScheme
    dtype: np.dtype = field(default=np.dtype(np.float64))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("NORMKIT_THREADS", "1")))
    except ValueError:
        return 1


def _row_chunks(count: int, threads: int) -> list[slice]:
    threads = max(1, min(threads, count))
    bounds = np.linspace(0, count, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map_rows(fn, rows: np.ndarray, threads: int, *extra):
    """Apply ``fn`` to disjoint row blocks; each row is reduced independently,
    so the result does not depend on how rows are split across threads."""
    chunks = _row_chunks(rows.shape[0], threads)
    if len(chunks) == 1:
        return [fn(rows, *extra)]
    with ThreadPoolExecutor(len(chunks)) as pool:
        return list(pool.map(lambda s: fn(rows[s], *(e[s] for e in extra)), chunks))


def _moments_block(r: np.ndarray):
    m = r.shape[1]
    mu = r.sum(axis=1) / m
    d = r - mu[:, None]
    return mu, (d * d).sum(axis=1) / m


def compute_moments(x: np.ndarray, partition: Partition, threads: int = 1) -> MomentSet:
    """Per-set mean and biased variance (divisor m), accumulated in float64."""
    return _row_moments(partition.rows(x).astype(_acc(x.dtype), copy=False), partition, threads)


def _row_moments(rows: np.ndarray, partition: Partition, threads: int) -> MomentSet:
    parts = _map_rows(_moments_block, rows, threads)
    mu = np.concatenate([p[0] for p in parts])
    var = np.concatenate([p[1] for p in parts])
    return MomentSet(mu, var, partition.set_size, partition.method)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_sum(a: np.ndarray) -> np.ndarray:
    # fixed order: per channel, ascending flat index
    C = a.shape[1]
    return np.ascontiguousarray(np.moveaxis(a, 1, 0)).reshape(C, -1).sum(axis=1)


def _acc(dtype) -> np.dtype:
    # float64 accumulation, or wider when the input already is
    return np.promote_types(dtype, np.float64)


def _check_params(x: np.ndarray, params: NormParams) -> None:
    check_shape(x.shape)
    if params.channels != x.shape[1]:
        raise ContractError(f"params sized for C={params.channels}, tensor has C={x.shape[1]}")


def _running_affine(x: np.ndarray, params: NormParams, eps: float):
    if not params.has_running_stats:
        raise StateError("BatchNorm running statistics are missing")
    acc = _acc(x.dtype)
    inv_std = 1.0 / np.sqrt(params.running_var.astype(acc) + eps)
    scale = params.gamma.astype(acc) * inv_std
    shift = params.beta.astype(acc) - params.running_mean.astype(acc) * scale
    y = x.astype(acc) * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)
    return y.astype(x.dtype), inv_std


def forward(x: np.ndarray, scheme: NormScheme, params: NormParams,
            threads: Optional[int] = None) -> tuple[np.ndarray, ForwardCache]:
    """Normalize ``x`` (4D or 5D) and apply the per-channel affine.

    Train mode never touches running statistics; call
    :func:`update_running_stats` with ``cache.moments`` to do so.
    """
    _check_params(x, params)
    threads = default_threads() if threads is None else threads
    part = build_partition(scheme.method, scheme.policy, x.shape)
    acc = _acc(x.dtype)
    x64 = x.astype(acc, copy=False)

    if scheme.uses_running_stats:
        y, inv_std = _running_affine(x, params, scheme.eps)
        x_hat = (x64 - _channel_view(params.running_mean.astype(acc), x.ndim)) \
            * _channel_view(inv_std, x.ndim)
        moments = MomentSet(params.running_mean.copy(), params.running_var.copy(),
                            part.set_size, part.method)
        return y, ForwardCache(x_hat, inv_std, moments, part, scheme, x.dtype)

    rows = part.rows(x64)
    moments = _row_moments(rows, part, threads)
    inv_std = 1.0 / np.sqrt(moments.sigma2 + scheme.eps)
    xhat_rows = (rows - moments.mu[:, None]) * inv_std[:, None]
    x_hat = part.unrows(xhat_rows)
    y = x_hat * _channel_view(params.gamma.astype(acc), x.ndim) \
        + _channel_view(params.beta.astype(acc), x.ndim)
    cache = ForwardCache(x_hat, inv_std, moments, part, scheme, x.dtype)
    return y.astype(x.dtype), cache


def forward_5d(x: np.ndarray, scheme: NormScheme, params: NormParams,
               threads: Optional[int] = None) -> tuple[np.ndarray, ForwardCache]:
    """Same as :func:`forward`, restricted to (N, C, T, H, W) input."""
    if x.ndim != 5:
        raise ContractError(f"forward_5d expects a 5D tensor, got shape {x.shape}")
    return forward(x, scheme, params, threads)


def _dx_block(g: np.ndarray, xh: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    m = g.shape[1]
    mean_g = g.sum(axis=1) / m
    mean_gx = (g * xh).sum(axis=1) / m
    return inv_std[:, None] * (g - mean_g[:, None] - xh * mean_gx[:, None])


def backward(cache: ForwardCache, dy: np.ndarray, params: NormParams,
             threads: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dgamma, dbeta) for an upstream gradient ``dy``.

    With statistics from the batch, mu and sigma depend on x; within each set

        dx = (1/sigma) * (g - mean(g) - x_hat * mean(g * x_hat)),  g = gamma * dy.

    With running statistics they are constants and dx = gamma * dy / sigma.
    """
    if dy.shape != cache.x_hat.shape:
        raise ContractError(f"dy shape {dy.shape} does not match cached shape {cache.x_hat.shape}")
    threads = default_threads() if threads is None else threads
    ndim = dy.ndim
    acc = np.promote_types(_acc(dy.dtype), cache.x_hat.dtype)
    dy64 = dy.astype(acc, copy=False)
    dbeta = _channel_sum(dy64)
    dgamma = _channel_sum(dy64 * cache.x_hat)
    g = dy64 * _channel_view(params.gamma.astype(acc), ndim)

    if cache.scheme.uses_running_stats:
        dx = g * _channel_view(cache.inv_std, ndim)
    else:
        part = cache.partition
        blocks = _map_rows(_dx_block, part.rows(g), threads, part.rows(cache.x_hat), cache.inv_std)
        dx = part.unrows(np.concatenate(blocks))
    dt = cache.dtype
    return dx.astype(dt), dgamma.astype(params.gamma.dtype), dbeta.astype(params.beta.dtype)


def update_running_stats(params: NormParams, moments: MomentSet) -> NormParams:
    """running <- momentum * running + (1 - momentum) * batch, in place.

    The batch variance is the biased one used for normalization.
    """
    if moments.method is not Method.BATCH:
        raise ContractError(f"running statistics only exist for BatchNorm, not {moments.method.value}")
    if not params.has_running_stats:
        raise StateError("params carry no running statistics")
    if moments.mu.shape != params.running_mean.shape:
        raise ContractError("moment vectors do not match the channel count")
    k = params.momentum
    params.running_mean = k * params.running_mean + (1.0 - k) * moments.mu
    params.running_var = k * params.running_var + (1.0 - k) * moments.sigma2
    return params


def frozen_bn_forward(x: np.ndarray, params: NormParams, scheme: NormScheme) -> np.ndarray:
    """BatchNorm collapsed to ``y = (gamma / sigma) * (x - mu) + beta`` with frozen mu, sigma."""
    if scheme.method is not Method.BATCH or scheme.mode != "frozen":
        raise ContractError("frozen_bn_forward needs a BatchNorm scheme in frozen mode")
    _check_params(x, params)
    y, _ = _running_affine(x, params, scheme.eps)
    return y


def merge_moments(moments: list[MomentSet]) -> MomentSet:
    """Average per-worker BN moments (means of means, means of variances)."""
    if not moments:
        raise ContractError("no moments to merge")
    mu = np.mean([m.mu for m in moments], axis=0)
    var = np.mean([m.sigma2 for m in moments], axis=0)
    return MomentSet(mu, var, moments[0].set_size * len(moments), moments[0].method)
