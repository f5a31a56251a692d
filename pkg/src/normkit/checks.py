"""Invariant suite behind ``normkit check``: equivalences, moments and gradient checks.

Every check returns a JSON-ready dict with at least ``check``, ``name`` and ``pass``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gradcheck import check_layer
from .normlayer import NormParams, NormScheme, compute_moments, forward
from .normspec import GroupPolicy, Method, build_partition
from .seeding import derive_seed
from .tensor import Normal, new

EQUIV_TOL = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-12}
GRAD_SHAPES = ((2, 4, 3, 3), (2, 4, 2, 3, 3))


@dataclass(frozen=True)
class Check:
    name: str
    method: Method
    groups: Optional[int]  # GN group count the check exercises, if any
    run: Callable[[], dict]


def random_shape(rng: np.random.Generator, channels_multiple: int = 1) -> tuple:
    """Small 4D or 5D shape; C is a multiple of ``channels_multiple``."""
    n = int(rng.integers(1, 4))
    c = channels_multiple * int(rng.integers(1, 5))
    spatial = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 4)))]
    return (n, c, *spatial)


def _affine(rng: np.random.Generator, channels: int, dtype) -> NormParams:
    return NormParams(rng.uniform(0.5, 1.5, channels).astype(dtype),
                      rng.uniform(-0.5, 0.5, channels).astype(dtype))


def equivalence(kind: str, shape: tuple, seed: int, dtype=np.float64) -> dict:
    """GN(G=1) vs LN, GN(G=C) vs IN, or train-mode BN at N=1 vs IN."""
    dtype = np.dtype(dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "bn_n1_in":
        shape = (1,) + tuple(shape[1:])
    x = new(shape, Normal(int(rng.integers(2**63)), 0.3, 2.0), dtype)
    params = _affine(rng, shape[1], dtype)
    if kind == "gn1_ln":
        a = NormScheme(Method.GROUP, GroupPolicy.fixed_groups(1))
        b = NormScheme(Method.LAYER)
    elif kind == "gnc_in":
        a = NormScheme(Method.GROUP, GroupPolicy.fixed_groups(shape[1]))
        b = NormScheme(Method.INSTANCE)
    elif kind == "bn_n1_in":
        a = NormScheme(Method.BATCH)
        b = NormScheme(Method.INSTANCE)
    else:
        raise ValueError(f"unknown equivalence {kind!r}")
    ya, _ = forward(x, a, params)
    yb, _ = forward(x, b, params)
    diff = float(np.max(np.abs(ya.astype(np.float64) - yb.astype(np.float64))))
    tol = EQUIV_TOL[dtype]
    return {"check": "equivalence", "name": f"{kind}/{dtype.name}/{'x'.join(map(str, shape))}",
            "pass": diff <= tol, "max_abs_diff": diff, "tolerance": tol}


def moments(method: Method, policy: GroupPolicy, shape: tuple, seed: int) -> dict:
    """With gamma=1, beta=0 every set of the output has mean 0 and variance s/(s+eps)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = new(shape, Normal(int(rng.integers(2**63)), 1.0, 3.0))
    scheme = NormScheme(method, policy)
    y, _ = forward(x, scheme, NormParams.create(shape[1]))
    part = build_partition(method, policy, shape)
    ref = compute_moments(x, part)
    out = part.rows(y)
    mean_err = float(np.max(np.abs(out.mean(axis=1))))
    expected = ref.sigma2 / (ref.sigma2 + scheme.eps)
    var_err = float(np.max(np.abs(out.var(axis=1) - expected) / expected))
    label = method.value if method is not Method.GROUP else f"gn/{policy.describe()}"
    return {"check": "moments", "name": f"{label}/{'x'.join(map(str, shape))}",
            "pass": mean_err <= 1e-5 and var_err <= 1e-4,
            "max_abs_mean": mean_err, "max_rel_var_error": var_err}


def grad_schemes(channels: int) -> list[NormScheme]:
    """BN in all three modes, LN, IN and GN with G in {1, 2, C/2, C}."""
    schemes = [NormScheme(Method.BATCH, mode=m) for m in ("train", "eval", "frozen")]
    schemes += [NormScheme(Method.LAYER), NormScheme(Method.INSTANCE)]
    for g in sorted({1, 2, max(1, channels // 2), channels}):
        if channels % g == 0:
            schemes.append(NormScheme(Method.GROUP, GroupPolicy.fixed_groups(g)))
    return schemes


def build_suite(quick: bool = False, seed: int = 0) -> list[Check]:
    base = derive_seed(seed, "check")
    rng = np.random.Generator(np.random.PCG64(base))
    checks: list[Check] = []

    cases = 20 if quick else 100
    for i in range(cases):
        dtype = np.float64 if i % 2 == 0 else np.float32
        shape = random_shape(rng)
        case_seed = int(rng.integers(2**63))
        for kind, method, groups in (("gn1_ln", Method.GROUP, 1),
                                     ("gnc_in", Method.GROUP, shape[1]),
                                     ("bn_n1_in", Method.BATCH, None)):
            checks.append(Check(f"equivalence/{kind}/{i}", method, groups,
                                lambda k=kind, s=shape, c=case_seed, d=dtype: equivalence(k, s, c, d)))

    for i in range(4 if quick else 12):
        shape = random_shape(rng, channels_multiple=2)
        case_seed = int(rng.integers(2**63))
        for method in Method:
            policies = [GroupPolicy.fixed_groups(1)]
            if method is Method.GROUP:
                policies = [GroupPolicy.fixed_groups(g) for g in sorted({1, 2, shape[1]})]
            for pol in policies:
                groups = pol.groups if method is Method.GROUP else None
                checks.append(Check(f"moments/{method.value}/{i}", method, groups,
                                    lambda m=method, p=pol, s=shape, c=case_seed: moments(m, p, s, c)))

    seeds = (0,) if quick else (0, 1, 2)
    for shape in GRAD_SHAPES:
        for scheme in grad_schemes(shape[1]):
            groups = scheme.policy.groups if scheme.method is Method.GROUP else None
            for s in seeds:
                checks.append(Check(f"gradcheck/{scheme.method.value}", scheme.method, groups,
                                    lambda sc=scheme, sh=shape, k=base + s:
                                    json.loads(check_layer(sc, sh, seed=k % 2**63).to_json())))
    return checks


def select(checks: list[Check], method: Optional[Method] = None,
           groups: Optional[int] = None) -> list[Check]:
    """Keep checks of ``method``; ``groups`` keeps only GN checks with that G."""
    out = checks
    if method is not None:
        out = [c for c in out if c.method is method]
    if groups is not None:
        out = [c for c in out if c.method is Method.GROUP and c.groups == groups]
    return out


def run_checks(checks: list[Check]) -> list[dict]:
    """Run every check; an exception becomes a failing report rather than a crash."""
    reports = []
    for c in checks:
        try:
            rep = c.run()
        except Exception as exc:  # noqa: BLE001 - a broken check is a failed check
            rep = {"check": c.name.split("/")[0], "name": c.name, "pass": False,
                   "error": f"{type(exc).__name__}: {exc}"}
        reports.append(rep)
    return reports
