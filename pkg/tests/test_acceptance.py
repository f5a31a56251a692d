"""Acceptance gate: one PASS/FAIL line per criterion, printed in the session summary.

The toy-training criteria share runs through a session cache, so the whole file
trains 22 small models (roughly ten minutes on one core).
"""
import itertools
import json
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from normkit.checks import equivalence, grad_schemes, moments, random_shape
from normkit.cli import main
from normkit.gradcheck import check_layer
from normkit.normlayer import (NormParams, NormScheme, compute_moments, forward, frozen_bn_forward)
from normkit.normspec import GroupPolicy, Method, build_partition
from normkit.toymodel import build_model
from normkit.trainer import Experiment, TrainConfig, run_experiment, sgd_step

GOLDEN = Path(__file__).parent / "golden" / "toy_errors.json"
SEEDS = (0, 1, 2)


# -- 1. equivalences ------------------------------------------------------------------

def test_c1_equivalences(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    reports, ranks = [], set()
    for i in range(100):
        shape = random_shape(rng)
        ranks.add(len(shape))
        seed = int(rng.integers(2**63))
        for dtype in (np.float64, np.float32):
            for kind in ("gn1_ln", "gnc_in", "bn_n1_in"):
                reports.append(equivalence(kind, shape, seed, dtype))
    elapsed = time.perf_counter() - t0
    worst = max(r["max_abs_diff"] / r["tolerance"] for r in reports)
    ok = all(r["pass"] for r in reports) and ranks == {4, 5} and elapsed < 10
    criterion(1, "GN(1)=LN, GN(C)=IN, BN(N=1)=IN", ok,
              f"{len(reports)} cases, worst diff/tol {worst:.2g}, {elapsed:.1f}s")
    assert ok


# -- 2. moments ----------------------------------------------------------------------------

def naive_set_moments(x, method, groups):
    """Mean and biased variance per set from explicit loops over every element."""
    N, C = x.shape[:2]
    spatial = list(itertools.product(*(range(e) for e in x.shape[2:])))
    sums: dict = {}
    for n in range(N):
        for c in range(C):
            key = {Method.BATCH: c, Method.LAYER: n, Method.INSTANCE: n * C + c,
                   Method.GROUP: n * groups + c // (C // groups)}[method]
            for s in spatial:
                sums.setdefault(key, []).append(float(x[(n, c) + s]))
    mu, var = [], []
    for key in sorted(sums):
        vals = sums[key]
        m = sum(vals) / len(vals)
        mu.append(m)
        var.append(sum((v - m) ** 2 for v in vals) / len(vals))
    return np.array(mu), np.array(var)


def test_c2_moments(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    oracle_err, reports = 0.0, []
    for _ in range(12):
        shape = random_shape(rng, channels_multiple=2)
        seed = int(rng.integers(2**63))
        x = np.random.default_rng(seed).normal(1.0, 3.0, shape)
        for method in Method:
            for g in (sorted({1, 2, shape[1]}) if method is Method.GROUP else [1]):
                pol = GroupPolicy.fixed_groups(g)
                reports.append(moments(method, pol, shape, seed))
                got = compute_moments(x, build_partition(method, pol, shape))
                mu, var = naive_set_moments(x, method, g)
                scale = np.maximum(np.abs(mu), 1.0)
                oracle_err = max(oracle_err, float(np.max(np.abs(got.mu - mu) / scale)),
                                 float(np.max(np.abs(got.sigma2 - var) / var)))
    elapsed = time.perf_counter() - t0
    ok = all(r["pass"] for r in reports) and oracle_err <= 1e-12 and elapsed < 10
    worst_mean = max(r["max_abs_mean"] for r in reports)
    worst_var = max(r["max_rel_var_error"] for r in reports)
    criterion(2, "per-set output moments and loop oracle", ok,
              f"|mean| {worst_mean:.1e}, var rel {worst_var:.1e}, oracle rel {oracle_err:.1e}, "
              f"{elapsed:.1f}s")
    assert ok


# -- 3. gradients ----------------------------------------------------------------------------

def test_c3_gradients(criterion):
    t0 = time.perf_counter()
    results = []
    for shape in ((2, 8, 3, 3), (2, 8, 2, 3, 3)):
        for scheme in grad_schemes(shape[1]):
            rep = check_layer(scheme, shape, tolerance=1e-6, seed=7)
            results.append((scheme, shape, rep))
    elapsed = time.perf_counter() - t0
    groups = {s.policy.groups for s, _, _ in results if s.method is Method.GROUP}
    ok = (all(r.passed for _, _, r in results) and groups == {1, 2, 4, 8}
          and all(set(r.per_param) == {"dx", "dgamma", "dbeta"} for _, _, r in results)
          and elapsed < 60)
    worst = max(r.max_rel_error for _, _, r in results)
    criterion(3, "gradient check, all layers, 4D and 5D", ok,
              f"{len(results)} layers, worst rel err {worst:.1e}, {elapsed:.1f}s")
    assert ok


# -- 4. partitions ------------------------------------------------------------------------------

def expected_set_size(method, shape, groups):
    N, C = shape[:2]
    spatial = int(np.prod(shape[2:]))
    return {Method.BATCH: N * spatial, Method.LAYER: C * spatial, Method.INSTANCE: spatial,
            Method.GROUP: C // groups * spatial}[method]


def test_c4_partitions(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    shapes = []
    while len(shapes) < 50:
        shape = tuple(int(v) for v in rng.integers(1, 9, size=int(rng.integers(4, 6))))
        if np.prod(shape) <= 2000:
            shapes.append(shape)
    bad, built = [], 0
    for shape in shapes:
        total = int(np.prod(shape))
        for method in Method:
            gs = [g for g in range(1, shape[1] + 1) if shape[1] % g == 0] if method is Method.GROUP else [1]
            for g in gs:
                part = build_partition(method, GroupPolicy.fixed_groups(g), shape)
                built += 1
                flat = np.sort(part.members.ravel())
                if not (np.array_equal(flat, np.arange(total))
                        and part.members.shape == (part.set_count, part.set_size)
                        and part.set_size == expected_set_size(method, shape, g)
                        and part.set_count * part.set_size == total):
                    bad.append((shape, method.value, g))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 5
    criterion(4, "partitions are disjoint uniform covers with the right set size", ok,
              f"{built} partitions over 50 shapes, {len(bad)} bad, {elapsed:.2f}s")
    assert ok


# -- toy training runs shared by 5, 6 and 9 ---------------------------------------------------------

_RUNS: dict = {}


def toy(method, batch, seed, groups=32):
    key = (method, batch, seed, groups)
    if key not in _RUNS:
        scheme = None if method == "none" else NormScheme(Method.parse(method),
                                                          GroupPolicy.fixed_groups(groups))
        exp = Experiment(scheme, replace(TrainConfig(), batch_size=batch, seed=seed))
        t0 = time.perf_counter()
        res = run_experiment(exp)
        assert not res.diverged, res.message
        last = [r for r in res.records if r.layer][-1].percentiles
        _RUNS[key] = {"error": res.final_error, "spread": last[3] - last[0],
                      "seconds": time.perf_counter() - t0}
    return _RUNS[key]


def mean_error(*key):
    return statistics.fmean(toy(*key[:1], key[1], s, *key[2:])["error"] for s in SEEDS)


def test_c5_batch_size_sensitivity(criterion):
    t0 = time.perf_counter()
    bn32, bn2 = mean_error("bn", 32), mean_error("bn", 2)
    gn32, gn2 = mean_error("gn", 32), mean_error("gn", 2)
    elapsed = time.perf_counter() - t0
    bn_gap, gn_gap = bn2 - bn32, abs(gn2 - gn32)
    ok = bn_gap > 0.03 and gn_gap < bn_gap / 2 and elapsed < 20 * 60
    criterion(5, "BN degrades at batch 2, GN does not", ok,
              f"BN 32/2 {bn32:.3f}/{bn2:.3f} gap {bn_gap:.3f}; GN 32/2 {gn32:.3f}/{gn2:.3f} "
              f"gap {gn_gap:.3f}; {elapsed:.0f}s")
    assert ok


def test_c6_group_division(criterion):
    errs = {g: mean_error("gn", 32, g) for g in (1, 2, 8, 32)}
    best = min(errs.values())
    ok = all(e - best <= 0.05 for e in errs.values()) and errs[1] > min(errs[g] for g in (2, 8, 32))
    criterion(6, "every G converges and G=1 is not the best", ok,
              ", ".join(f"G={g} {e:.3f}" for g, e in errs.items()))
    assert ok


def test_c7_frozen_bn(criterion):
    rng = np.random.default_rng(7)
    x = rng.normal(2.0, 3.0, (4, 6, 5, 5))
    params = NormParams(rng.uniform(0.5, 1.5, 6), rng.uniform(-1, 1, 6),
                        rng.normal(size=6), rng.uniform(0.5, 2.0, 6))
    y_eval, _ = forward(x, NormScheme(Method.BATCH, mode="eval"), params)
    y_frozen, _ = forward(x, NormScheme(Method.BATCH, mode="frozen"), params)
    y_direct = frozen_bn_forward(x, params, NormScheme(Method.BATCH, mode="frozen"))
    bitwise = np.array_equal(y_eval, y_frozen) and np.array_equal(y_eval, y_direct)

    model = build_model(Experiment(None).arch, NormScheme(Method.BATCH, mode="frozen"), init_seed=3)
    for name, p in model.parameters().items():
        p[...] = np.random.default_rng(len(name)).uniform(0.5, 1.5, p.shape)
    before = {k: v.copy() for k, v in model.parameters().items()}
    zero = {k: np.zeros_like(v) for k, v in before.items()}
    sgd_step(model, zero, 0.1, TrainConfig(weight_decay=0.01, decay_gamma_beta=False))
    norm_keys = [k for k in before if model.is_norm_param(k)]
    undecayed = bool(norm_keys) and all(np.array_equal(model.parameters()[k], before[k]) for k in norm_keys)
    others_decayed = all(not np.array_equal(model.parameters()[k], before[k])
                         for k in before if k not in norm_keys)
    ok = bitwise and undecayed and others_decayed
    criterion(7, "frozen BN equals eval bitwise; gamma/beta excluded from decay", ok,
              f"bitwise={bitwise}, {len(norm_keys)} norm params undecayed={undecayed}")
    assert ok


def test_c8_determinism(criterion, tmp_path, capsys):
    small = ["--set", "data.samples_per_class=12", "--epochs", "3", "--batch-size", "8",
             "--set", "train.eval_batch=60"]
    csvs = []
    for name in ("a", "b"):
        out = tmp_path / f"train-{name}"
        assert main(["train", "--out", str(out), *small]) == 0
        csvs.append((out / "metrics.csv").read_bytes())
    sums = []
    for name in ("a", "b"):
        out = tmp_path / f"bench-{name}"
        code = main(["bench", "--out", str(out), "--threads", "1", "--threads", "8",
                     "--shape", "4x16x6x6", "--shape", "2x16x3x6x6", "--repeats", "1"])
        doc = json.loads((out / "bench.json").read_text())
        sums.append((code, doc["deterministic"], [r["checksum"] for r in doc["results"]],
                     {r["threads"] for r in doc["results"]}))
    capsys.readouterr()
    same_csv = csvs[0] == csvs[1]
    bench_ok = all(c == 0 and det and th == {1, 8} for c, det, _, th in sums) and sums[0][2] == sums[1][2]
    ok = same_csv and bench_ok
    criterion(8, "identical metrics.csv and bench checksums across runs and thread counts", ok,
              f"metrics.csv identical={same_csv}, bench 1/8 threads identical={bench_ok}")
    assert ok


def test_c9_percentile_spread(criterion):
    spread = {m: statistics.fmean(toy(m, 32, s)["spread"] for s in SEEDS) for m in ("none", "bn", "gn")}
    ratio = max(spread["bn"], spread["gn"]) / min(spread["bn"], spread["gn"])
    ok = spread["none"] > spread["bn"] and spread["none"] > spread["gn"] and ratio <= 2
    criterion(9, "unnormalized p99-p1 spread exceeds BN and GN, which agree within 2x", ok,
              ", ".join(f"{m} {v:.2f}" for m, v in spread.items()) + f", BN/GN ratio {ratio:.2f}")
    assert ok


def test_toy_errors_near_reference():
    """Mean final errors stay close to the frozen reference run (loose: BLAS differences)."""
    reference = json.loads(GOLDEN.read_text())
    for key, ref in reference.items():
        method, batch, groups = key.split("/")
        got = mean_error(method, int(batch), int(groups))
        assert abs(got - ref) <= 0.05, (key, got, ref)
