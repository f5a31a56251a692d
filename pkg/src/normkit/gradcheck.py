"""Finite-difference oracle for the normalization backward passes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError
from .normlayer import NormParams, NormScheme, backward, forward
from .normspec import Method
from .tensor import Normal, Uniform, check_shape, new

EXHAUSTIVE_LIMIT = 512
SAMPLED_COORDS = 256
MAX_ELEMENTS = 5000


def rel_error(a, b) -> np.ndarray:
    """|a - b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def default_step(value: float) -> float:
    return 1e-5 * max(1.0, abs(float(value)))


def central_diff(f: Callable[[np.ndarray], object], x: np.ndarray, coord: Sequence[int],
                 h: Optional[float] = None) -> float:
    """(f(x + h e) - f(x - h e)) / 2h at one coordinate.

    ``f`` may return a scalar or an array of loss terms whose sum is the
    scalar.  Terms are differenced before summing, which keeps round-off
    proportional to the terms that actually move rather than to the total.
    ``x`` is restored before returning.
    """
    coord = tuple(coord)
    orig = x[coord]
    h = default_step(orig) if h is None else h
    if h <= 0:
        raise ValueError("step must be positive")
    try:
        x[coord] = orig + h
        plus = np.asarray(f(x))
        x[coord] = orig - h
        minus = np.asarray(f(x))
    finally:
        x[coord] = orig
    with np.errstate(invalid="ignore"):
        diff = plus - minus
    if not np.all(np.isfinite(diff)):
        raise NumericError(f"non-finite function value at coordinate {coord}")
    return float(np.sum(diff) / (2 * h))


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst: tuple  # (parameter, coordinate)
    per_param: dict
    tolerance: float
    coords_checked: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_json(self) -> str:
        return json.dumps({
            "check": "gradcheck",
            "name": self.name,
            "pass": self.passed,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "worst": {"param": self.worst[0], "coord": list(self.worst[1])},
            "per_param": self.per_param,
            "coords_checked": self.coords_checked,
            **self.extra,
        })


def pick_coords(shape: Sequence[int], rng: np.random.Generator) -> list[tuple]:
    """All coordinates of small arrays, otherwise a seeded sample of 256."""
    size = int(np.prod(shape))
    if size <= EXHAUSTIVE_LIMIT:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, SAMPLED_COORDS, replace=False))
    return [tuple(int(i) for i in np.unravel_index(k, shape)) for k in flat]


def compare(named: dict, analytic: dict, loss_terms: Callable[[], np.ndarray],
            rng: np.random.Generator) -> tuple[float, tuple, dict, int]:
    """Check ``analytic[name]`` against central differences of ``loss_terms``.

    ``named`` maps names to the arrays that ``loss_terms`` reads; they are
    perturbed in place.
    """
    worst_err, worst = 0.0, ("", ())
    per_param, total = {}, 0
    for name, arr in named.items():
        grad = analytic[name]
        if not np.all(np.isfinite(grad)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(grad))[0])
            raise NumericError(f"non-finite analytic gradient {name}{bad}")
        errs = []
        for coord in pick_coords(arr.shape, rng):
            num = central_diff(lambda _: loss_terms(), arr, coord)
            e = float(rel_error(grad[coord], num))
            errs.append(e)
            if not worst[0] or e > worst_err:
                worst_err, worst = e, (name, coord)
        total += len(errs)
        per_param[name] = max(errs) if errs else 0.0
    return worst_err, worst, per_param, total


def make_layer_inputs(scheme: NormScheme, shape: Sequence[int], seed: int):
    """Seeded double-precision input, affine parameters and loss weights."""
    shape = check_shape(shape)
    C = shape[1]
    rng = np.random.Generator(np.random.PCG64(seed))
    x = new(shape, Normal(int(rng.integers(2**63)), 0.5, 1.5))
    gamma = rng.uniform(0.5, 1.5, C)
    beta = rng.uniform(-0.5, 0.5, C)
    params = NormParams(gamma, beta)
    if scheme.method is Method.BATCH:
        params.running_mean = rng.uniform(-0.5, 0.5, C)
        params.running_var = rng.uniform(0.5, 2.0, C)
    weights = new(shape, Uniform(int(rng.integers(2**63)), 0.5, 1.5))
    return x, params, weights, rng


def check_layer(scheme: NormScheme, shape: Sequence[int], seed: int = 0,
                tolerance: float = 1e-6, name: Optional[str] = None,
                fd_dtype=np.longdouble) -> GradReport:
    """Compare backward against central differences for dx, dgamma, dbeta.

    The loss is the weighted sum of squares L = sum(w * y**2) with seeded
    weights w in [0.5, 1.5].  With unit weights, sum(y**2) over a BN or IN
    set is m * gamma**2 * s / (s + eps) + m * beta**2 which is flat in x up to
    eps, so its gradient is too small for a meaningful relative check.

    The analytic pass runs in float64.  The difference quotients are evaluated
    in ``fd_dtype`` (x87 extended precision where the platform has it): in
    float64 the shared mean/std round-off alone puts ~1e-9 absolute noise on
    each quotient, which is 1e-6 relative for gradients near 1e-3.
    """
    shape = check_shape(shape)
    if int(np.prod(shape)) > MAX_ELEMENTS:
        raise ValueError(f"shape {shape} exceeds {MAX_ELEMENTS} elements")
    x, params, w, rng = make_layer_inputs(scheme, shape, seed)

    y, cache = forward(x, scheme, params)
    if not np.all(np.isfinite(y)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(y))[0])
        raise NumericError(f"non-finite forward output at {bad}")
    dx, dgamma, dbeta = backward(cache, 2.0 * w * y, params)

    xe = x.astype(fd_dtype)
    pe = NormParams(params.gamma.astype(fd_dtype), params.beta.astype(fd_dtype))
    if params.has_running_stats:
        pe.running_mean = params.running_mean.astype(fd_dtype)
        pe.running_var = params.running_var.astype(fd_dtype)
    we = w.astype(fd_dtype)

    def loss_terms():
        out, _ = forward(xe, scheme, pe)
        return we * out * out

    worst_err, worst, per_param, total = compare(
        {"dx": xe, "dgamma": pe.gamma, "dbeta": pe.beta},
        {"dx": dx, "dgamma": dgamma, "dbeta": dbeta},
        loss_terms, rng)
    label = name or _label(scheme, shape)
    return GradReport(label, worst_err, worst, per_param, tolerance, total)


def _label(scheme: NormScheme, shape) -> str:
    parts = [scheme.method.value, scheme.mode]
    if scheme.method is Method.GROUP:
        parts.append(scheme.policy.describe())
    parts.append("x".join(map(str, shape)))
    return "/".join(parts)
