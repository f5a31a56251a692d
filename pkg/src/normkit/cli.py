"""normkit command line: check, train, sweep and bench.

Every option lives under a dotted config key (``norm.method = gn``).  Values
come from the built-in defaults, then ``--config FILE``, then flags, then
``--set key=value``; the merged result is written to ``effective_config``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .checks import build_suite, run_checks, select
from .errors import ArchitectureError, ConfigError, ContractError, NormkitError, PolicyError
from .normlayer import NormParams, NormScheme, backward, default_threads, forward
from .normspec import GroupPolicy, Method, resolve_group_count
from .seeding import derive_seed
from .tensor import Normal, new
from .toymodel import SynthDatasetSpec, build_model, save_checkpoint
from .trainer import (DEFAULT_MONITOR, Experiment, TrainConfig, run_experiment,
                      write_metrics_csv)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SWEEP_AXES = ("batch_size", "groups", "channels_per_group", "method")
DEFAULT_BENCH_SHAPES = ((32, 64, 56, 56), (8, 64, 8, 56, 56))


# -- value parsers -----------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none") else int(s)


def _list(item: Callable) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        return tuple(item(p.strip()) for p in s.split(",") if p.strip())
    return parse


def _method(s: str) -> str:
    s = s.strip().lower()
    return "none" if s == "none" else Method.parse(s).value


def _shape(s: str) -> tuple:
    dims = tuple(int(p) for p in s.lower().split("x"))
    if len(dims) not in (4, 5) or min(dims) < 1:
        raise ValueError(f"shape must be 4 or 5 positive extents like 2x4x3x3, got {s!r}")
    return dims


def _dtype(s: str) -> str:
    name = np.dtype(s.strip()).name
    if name not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {s!r}")
    return name


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_fmt_item(v) for v in value)
    return str(value)


def _fmt_item(v) -> str:
    return "x".join(map(str, v)) if isinstance(v, tuple) else str(v)


_TC = TrainConfig()
_DS = SynthDatasetSpec()
_EX = Experiment(None)

# key -> (parser, default)
KEYS: dict[str, tuple[Callable, object]] = {
    "seed": (int, 0),
    "norm.method": (_method, "gn"),
    "norm.groups": (int, 32),
    "norm.channels_per_group": (_opt_int, None),
    "norm.eps": (float, 1e-5),
    "train.batch_size": (int, _TC.batch_size),
    "train.workers": (int, _TC.workers),
    "train.base_lr": (float, _TC.base_lr),
    "train.lr_reference_batch": (int, _TC.lr_reference_batch),
    "train.momentum": (float, _TC.momentum),
    "train.weight_decay": (float, _TC.weight_decay),
    "train.decay_gamma_beta": (_bool, _TC.decay_gamma_beta),
    "train.epochs": (int, _TC.epochs),
    "train.lr_drops": (_list(float), tuple(_TC.lr_drops)),
    "train.eval_batch": (int, _TC.eval_batch),
    "train.probe_size": (int, _TC.probe_size),
    "data.classes": (int, _DS.classes),
    "data.samples_per_class": (int, _DS.samples_per_class),
    "data.channels": (int, _DS.image_shape[0]),
    "data.height": (int, _DS.image_shape[1]),
    "data.width": (int, _DS.image_shape[2]),
    "data.noise_sigma": (float, _DS.noise_sigma),
    "data.max_shift": (int, _DS.max_shift),
    "data.gain_spread": (float, _DS.gain_spread),
    "data.offset_sigma": (float, _DS.offset_sigma),
    "model.zero_gamma_last": (_bool, _EX.zero_gamma_last),
    "model.dtype": (_dtype, _EX.dtype),
    "model.monitor": (_list(str), DEFAULT_MONITOR),
    "sweep.axis": (str, "batch_size"),
    "sweep.values": (_list(str), ()),
    "sweep.seeds": (_list(int), (0,)),
    "sweep.methods": (_list(_method), ()),
    "check.quick": (_bool, False),
    "check.method": (lambda s: None if s.lower() == "none" else _method(s), None),
    "check.groups": (_opt_int, None),
    "bench.threads": (_list(int), (1,)),
    "bench.shapes": (_list(_shape), DEFAULT_BENCH_SHAPES),
    "bench.methods": (_list(_method), ("bn", "ln", "in", "gn")),
    "bench.repeats": (int, 5),
    "bench.dtype": (_dtype, "float64"),
}

# Options that are not dotted keys of their own but map onto one.
_APPEND_KEYS = {"bench.threads", "bench.shapes"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(overrides: list[dict[str, str]]) -> dict[str, object]:
    """Apply string overrides in order on top of the defaults and parse every value."""
    merged: dict[str, object] = dict((k, d) for k, (_, d) in KEYS.items())
    for layer in overrides:
        for key, raw in layer.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            try:
                merged[key] = KEYS[key][0](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    return merged


def render_config(values: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(values[k])}\n" for k in sorted(values))


# -- run configuration -------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    values: dict
    out: Path

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def scheme(self, method: Optional[str] = None, groups: Optional[int] = None,
               channels_per_group: Optional[int] = None) -> Optional[NormScheme]:
        v = self.values
        method = method or v["norm.method"]
        if method == "none":
            return None
        cpg = channels_per_group if channels_per_group is not None else (
            None if groups is not None else v["norm.channels_per_group"])
        try:
            policy = (GroupPolicy.fixed_channels(cpg) if cpg is not None
                      else GroupPolicy.fixed_groups(groups if groups is not None else v["norm.groups"]))
            return NormScheme(Method.parse(method), policy, v["norm.eps"])
        except (PolicyError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, **changes) -> TrainConfig:
        v = self.values
        kw = {f.name: v[f"train.{f.name}"] for f in fields(TrainConfig) if f"train.{f.name}" in v}
        kw["seed"] = v["seed"]
        kw.update(changes)
        return TrainConfig(**kw)

    def dataset(self) -> SynthDatasetSpec:
        v = self.values
        try:
            return SynthDatasetSpec(v["data.classes"], v["data.samples_per_class"],
                                    (v["data.channels"], v["data.height"], v["data.width"]),
                                    v["seed"], v["data.noise_sigma"], v["data.max_shift"],
                                    v["data.gain_spread"], v["data.offset_sigma"])
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def experiment(self, scheme: Optional[NormScheme], config: TrainConfig) -> Experiment:
        v = self.values
        return Experiment(scheme, config, self.dataset(), zero_gamma_last=v["model.zero_gamma_last"],
                          dtype=v["model.dtype"], monitor=tuple(v["model.monitor"]))


def _validate(rc: RunConfig) -> None:
    """Build every object a run needs so that bad settings fail before any work starts."""
    rc.train_config()
    rc.dataset()
    rc.scheme()


def _validate_experiment(exp: Experiment) -> None:
    try:
        model = build_model(exp.arch, exp.scheme, exp.zero_gamma_last,
                            in_channels=exp.data.image_shape[0])
    except ArchitectureError as exc:
        raise ConfigError(str(exc)) from None
    unknown = sorted(set(exp.monitor) - set(model.monitor_sites()))
    if unknown:
        raise ConfigError(f"unknown monitor site(s) {unknown}; available: {model.monitor_sites()}")


def _prepare_out(rc: RunConfig) -> None:
    try:
        rc.out.mkdir(parents=True, exist_ok=True)
        (rc.out / "effective_config").write_text(render_config(rc.values), encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write to {rc.out}: {exc}") from None


# -- commands ----------------------------------------------------------------

def cmd_check(rc: RunConfig) -> int:
    v = rc.values
    method = Method.parse(v["check.method"]) if v["check.method"] else None
    checks = select(build_suite(v["check.quick"], rc.seed), method, v["check.groups"])
    if not checks:
        print("no checks match the filters", file=sys.stderr)
        return EXIT_USAGE
    reports = run_checks(checks)
    passed = [r for r in reports if r["pass"]]
    failed = [r for r in reports if not r["pass"]]
    for r in passed + failed:
        print(json.dumps(r))
    print(f"{len(passed)}/{len(reports)} checks passed", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_train(rc: RunConfig) -> int:
    _validate(rc)
    _prepare_out(rc)
    exp = rc.experiment(rc.scheme(), rc.train_config())
    _validate_experiment(exp)
    result = run_experiment(exp)
    write_metrics_csv(result.records, rc.out / "metrics.csv")
    if result.diverged:
        print(f"diverged: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result.model, rc.out / "model.ckpt")
    print(f"final error (median of last 5 eval epochs): {result.final_error:.4f}")
    return EXIT_OK


def sweep_runs(rc: RunConfig) -> list[tuple[str, str, str, dict]]:
    """(axis label, value label, method, run settings) for every sweep point."""
    v = rc.values
    axis = v["sweep.axis"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = v["sweep.values"]
    if not values:
        raise ConfigError("sweep.values is empty")
    if not v["sweep.seeds"]:
        raise ConfigError("sweep.seeds is empty")
    methods = v["sweep.methods"]
    if axis == "method" and methods:
        raise ConfigError("sweep.methods cannot be combined with the method axis")
    runs = []
    for m in methods or (None,):
        for raw in values:
            settings: dict = {"method": m}
            try:
                if axis == "method":
                    settings["method"] = _method(raw)
                    label = settings["method"]
                else:
                    settings[axis] = int(raw)
                    if settings[axis] < 1:
                        raise ValueError("must be >= 1")
                    label = str(settings[axis])
            except ValueError as exc:
                raise ConfigError(f"bad sweep value {raw!r} for axis {axis}: {exc}") from None
            if m is not None:
                runs.append((f"method/{axis}", f"{m}/{label}", m, settings))
            else:
                runs.append((axis, label, settings["method"], settings))
    return runs


def _sweep_point(rc: RunConfig, settings: dict, seed: int):
    v = rc.values
    groups = settings.get("groups")
    cpg = settings.get("channels_per_group")
    method = settings.get("method") or v["norm.method"]
    if (groups is not None or cpg is not None) and method != "gn":
        method = "gn"
    scheme = rc.scheme(method, groups, cpg)
    changes = {"seed": seed}
    if "batch_size" in settings:
        changes["batch_size"] = settings["batch_size"]
    return rc.experiment(scheme, rc.train_config(**changes))


def cmd_sweep(rc: RunConfig) -> int:
    runs = sweep_runs(rc)
    _validate(rc)
    seeds = rc.values["sweep.seeds"]
    points = [(axis, label, settings, seed) for axis, label, _, settings in runs for seed in seeds]
    experiments = [_sweep_point(rc, settings, seed) for _, _, settings, seed in points]
    for exp in experiments:
        _validate_experiment(exp)
    _prepare_out(rc)
    rows, any_diverged = [], False
    for (axis, label, _, seed), exp in zip(points, experiments):
        run_dir = rc.out / "runs" / label.replace("/", "-") / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            result = run_experiment(exp)
        except NormkitError as exc:
            print(f"{axis}={label} seed={seed}: {type(exc).__name__}: {exc}", file=sys.stderr)
            rows.append((axis, label, seed, float("nan")))
            any_diverged = True
            continue
        write_metrics_csv(result.records, run_dir / "metrics.csv")
        if result.diverged:
            print(f"{axis}={label} seed={seed}: diverged: {result.message}", file=sys.stderr)
            any_diverged = True
        rows.append((axis, label, seed, result.final_error))
        print(f"{axis}={label} seed={seed} final_error={result.final_error:.4f}", file=sys.stderr)
    with open(rc.out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fp:
        fp.write("axis,value,seed,final_error\n")
        for axis, label, seed, err in rows:
            fp.write(f"{axis},{label},{seed},{format(err, '.9g')}\n")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


BENCH_SCHEMA = {
    "type": "object",
    "required": ["normkit_version", "seed", "dtype", "repeats", "deterministic", "results"],
    "properties": {
        "normkit_version": {"type": "string"},
        "seed": {"type": "integer"},
        "dtype": {"enum": ["float32", "float64"]},
        "repeats": {"type": "integer", "minimum": 1},
        "deterministic": {"type": "boolean"},
        "results": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["method", "groups", "shape", "threads", "elements", "checksum",
                             "matches_single_thread", "forward_seconds",
                             "forward_backward_seconds", "forward_elements_per_second",
                             "forward_backward_elements_per_second"],
                "properties": {
                    "method": {"enum": ["bn", "ln", "in", "gn"]},
                    "groups": {"type": ["integer", "null"], "minimum": 1},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                              "minItems": 4, "maxItems": 5},
                    "threads": {"type": "integer", "minimum": 1},
                    "elements": {"type": "integer", "minimum": 1},
                    "checksum": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                    "matches_single_thread": {"type": "boolean"},
                    "forward_seconds": {"type": "number", "minimum": 0},
                    "forward_backward_seconds": {"type": "number", "minimum": 0},
                    "forward_elements_per_second": {"type": "number", "minimum": 0},
                    "forward_backward_elements_per_second": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


def _bench_scheme(rc: RunConfig, method: str, channels: int) -> NormScheme:
    m = Method.parse(method)
    if m is not Method.GROUP:
        return NormScheme(m, eps=rc.values["norm.eps"])
    cpg = rc.values["norm.channels_per_group"]
    policy = (GroupPolicy.fixed_channels(cpg) if cpg is not None
              else GroupPolicy.fixed_groups(min(rc.values["norm.groups"], channels)))
    try:
        resolve_group_count(policy, channels)
    except PolicyError as exc:
        raise ConfigError(str(exc)) from None
    return NormScheme(m, policy, rc.values["norm.eps"])


def _pass_outputs(x, dy, scheme, params, threads):
    y, cache = forward(x, scheme, params, threads)
    dx, dg, db = backward(cache, dy, params, threads)
    return y, dx, dg, db


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(rc: RunConfig) -> int:
    v = rc.values
    cap = default_threads() if "NORMKIT_THREADS" in os.environ else None
    thread_counts = [min(t, cap) if cap else t for t in v["bench.threads"]]
    if any(t < 1 for t in thread_counts) or v["bench.repeats"] < 1:
        raise ConfigError("bench.threads and bench.repeats must be >= 1")
    dtype = np.dtype(v["bench.dtype"])
    jobs = [(m, shape, _bench_scheme(rc, m, shape[1]))
            for shape in v["bench.shapes"] for m in v["bench.methods"]]
    _prepare_out(rc)
    rng_seed = derive_seed(rc.seed, "bench")
    results, deterministic = [], True
    for method, shape, scheme in jobs:
        rng = np.random.Generator(np.random.PCG64(rng_seed))
        x = new(shape, Normal(int(rng.integers(2**63)), 0.0, 1.0), dtype)
        dy = new(shape, Normal(int(rng.integers(2**63)), 0.0, 1.0), dtype)
        params = NormParams(rng.uniform(0.5, 1.5, shape[1]).astype(dtype),
                            rng.uniform(-0.5, 0.5, shape[1]).astype(dtype))
        if scheme.method is Method.BATCH:
            params.running_mean = np.zeros(shape[1])
            params.running_var = np.ones(shape[1])
        reference = _checksum(_pass_outputs(x, dy, scheme, params, 1))
        for threads in thread_counts:
            outs = _pass_outputs(x, dy, scheme, params, threads)
            checksum = _checksum(outs)
            same = checksum == reference
            deterministic &= same
            t_fwd = _median_time(lambda: forward(x, scheme, params, threads), v["bench.repeats"])
            t_all = _median_time(lambda: _pass_outputs(x, dy, scheme, params, threads),
                                 v["bench.repeats"])
            size = int(np.prod(shape))
            results.append({
                "method": method,
                "groups": (resolve_group_count(scheme.policy, shape[1])
                           if scheme.method is Method.GROUP else None),
                "shape": list(shape), "threads": threads, "elements": size,
                "checksum": checksum, "matches_single_thread": same,
                "forward_seconds": t_fwd, "forward_backward_seconds": t_all,
                "forward_elements_per_second": size / t_fwd if t_fwd > 0 else 0.0,
                "forward_backward_elements_per_second": size / t_all if t_all > 0 else 0.0,
            })
            print(f"{method:>2} {'x'.join(map(str, shape)):>16} threads={threads:<2} "
                  f"fwd {size / max(t_fwd, 1e-12):.3g} el/s  fwd+bwd {size / max(t_all, 1e-12):.3g} el/s"
                  f"  {'ok' if same else 'MISMATCH'}", file=sys.stderr)
    doc = {"normkit_version": __version__, "seed": rc.seed, "dtype": dtype.name,
           "repeats": v["bench.repeats"], "deterministic": deterministic, "results": results}
    (rc.out / "bench.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if not deterministic:
        print("parallel output differs from single-thread output", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"check": cmd_check, "train": cmd_train, "sweep": cmd_sweep, "bench": cmd_bench}


# -- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, default=Path("normkit-out"), help="output directory")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", dest="seed")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--norm", dest="norm.method", help="bn, ln, in, gn or none")
    p.add_argument("--groups", dest="norm.groups")
    p.add_argument("--channels-per-group", dest="norm.channels_per_group")
    p.add_argument("--eps", dest="norm.eps")
    p.add_argument("--batch-size", dest="train.batch_size")
    p.add_argument("--workers", dest="train.workers")
    p.add_argument("--lr", dest="train.base_lr")
    p.add_argument("--epochs", dest="train.epochs")
    p.add_argument("--weight-decay", dest="train.weight_decay")
    p.add_argument("--momentum", dest="train.momentum")
    p.add_argument("--decay-gamma-beta", dest="train.decay_gamma_beta")
    p.add_argument("--lr-drops", dest="train.lr_drops")
    p.add_argument("--noise-sigma", dest="data.noise_sigma")
    p.add_argument("--dtype", dest="model.dtype")
    p.add_argument("--monitor", dest="model.monitor")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="normkit", description="Normalization-layer toolkit.")
    parser.add_argument("--version", action="version", version=f"normkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("check", help="run the invariant and gradient suite")
    _add_common(p)
    p.add_argument("--quick", dest="check.quick", action="store_const", const="true")
    p.add_argument("--method", dest="check.method")
    p.add_argument("--groups", dest="check.groups")

    p = sub.add_parser("train", help="train the toy model")
    _add_common(p)
    _add_model_flags(p)

    p = sub.add_parser("sweep", help="train over one axis of settings and seeds")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--axis", dest="sweep.axis", help=", ".join(SWEEP_AXES))
    p.add_argument("--values", dest="sweep.values", help="comma-separated axis values")
    p.add_argument("--seeds", dest="sweep.seeds", help="comma-separated seeds")
    p.add_argument("--methods", dest="sweep.methods", help="cross the axis with these methods")

    p = sub.add_parser("bench", help="time forward and backward passes")
    _add_common(p)
    p.add_argument("--threads", dest="bench.threads", action="append")
    p.add_argument("--shape", dest="bench.shapes", action="append")
    p.add_argument("--methods", dest="bench.methods")
    p.add_argument("--repeats", dest="bench.repeats")
    p.add_argument("--dtype", dest="bench.dtype")
    p.add_argument("--groups", dest="norm.groups")
    p.add_argument("--channels-per-group", dest="norm.channels_per_group")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    layers = []
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        layers.append(parse_config_text(text, str(args.config)))
    flags = {}
    for key, value in vars(args).items():
        if key in KEYS and value is not None:
            flags[key] = ",".join(value) if key in _APPEND_KEYS else value
    layers.append(flags)
    sets = {}
    for item in args.sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, val = item.split("=", 1)
        sets[k.strip()] = val.strip()
    layers.append(sets)
    return RunConfig(resolve(layers), args.out)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_run_config(args)
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        print(f"normkit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
