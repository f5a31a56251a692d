"""SGD training loop with the step schedule, linear LR scaling and metric logging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .normlayer import NormScheme
from .seeding import derive_seed
from .toymodel import (DEFAULT_ARCH, Model, Split, SynthDatasetSpec, build_model,
                       generate_dataset, softmax_cross_entropy)

PERCENTILES = (1, 20, 80, 99)
CSV_HEADER = "epoch,split,loss,error,layer,p1,p20,p80,p99"
DEFAULT_MONITOR = ("block2.conv2",)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32  # per worker
    workers: int = 1
    base_lr: float = 0.1
    lr_reference_batch: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_gamma_beta: bool = True
    epochs: int = 30
    lr_drops: tuple = (0.5, 0.75)
    seed: int = 0
    eval_batch: int = 200
    probe_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        drops = tuple(self.lr_drops)
        if any(not 0.0 < d < 1.0 for d in drops) or any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"lr_drops must be strictly increasing in (0, 1), got {drops}")
        if self.lr_reference_batch < 1 or self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0 and lr_reference_batch >= 1")

    @property
    def global_batch(self) -> int:
        return self.batch_size * self.workers


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: Optional[float] = None
    error: Optional[float] = None
    layer: Optional[str] = None
    percentiles: Optional[tuple] = None

    def csv_row(self) -> str:
        def f(v):
            return "" if v is None else format(float(v), ".9g")
        ps = self.percentiles or (None,) * 4
        return ",".join([str(self.epoch), self.split, f(self.loss), f(self.error),
                         self.layer or "", *(f(p) for p in ps)])


@dataclass
class TrainResult:
    records: list
    model: Model
    final_error: float
    diverged: bool = False
    message: str = ""
    eval_errors: list = field(default_factory=list)


def scaled_lr(config: TrainConfig) -> float:
    """Linear scaling rule: base_lr * batch / reference batch (per worker)."""
    return config.base_lr * config.batch_size / config.lr_reference_batch


def lr_at(config: TrainConfig, epoch: float) -> float:
    """Learning rate for ``epoch``, divided by 10 at every drop fraction reached."""
    frac = epoch / config.epochs if config.epochs else 0.0
    drops = sum(1 for d in config.lr_drops if frac >= d)
    return scaled_lr(config) / 10 ** drops


def sgd_step(model: Model, grads: dict, lr: float, config: TrainConfig) -> Model:
    """Momentum SGD with L2 weight decay folded into the velocity.

    v <- momentum * v + grad + wd * param ;  param <- param - lr * v
    gamma/beta skip the decay term when ``config.decay_gamma_beta`` is false.
    """
    params = model.parameters()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for {name}")
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        step = g.astype(p.dtype, copy=True)
        if config.weight_decay and (config.decay_gamma_beta or not model.is_norm_param(name)):
            step += config.weight_decay * p
        v = model.velocity.get(name)
        if v is not None and config.momentum:
            v *= config.momentum
            v += step
        else:
            v = step
        model.velocity[name] = v
        p -= lr * v
    return model


def percentiles(values: np.ndarray, qs: Sequence[float] = PERCENTILES) -> tuple:
    """Nearest-rank percentiles from one full sort: the value at rank ceil(q/100 * n)."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return tuple(float(flat[max(1, math.ceil(q / 100.0 * flat.size)) - 1]) for q in qs)


def log_percentiles(model: Model, probe: np.ndarray, layer_ids: Sequence[str]) -> list:
    """(layer, (p1, p20, p80, p99)) of each site's activations over ``probe``."""
    sites = set(model.monitor_sites())
    unknown = [s for s in layer_ids if s not in sites]
    if unknown:
        raise ConfigError(f"unknown monitor site(s) {unknown}; available: {sorted(sites)}")
    _, tape = model.forward(probe, "eval", record=layer_ids, update_stats=False)
    return [(site, percentiles(tape.records[site])) for site in layer_ids]


def evaluate(model: Model, split: Split, batch: int = 200) -> tuple[float, float]:
    """Mean loss and error rate in eval mode (BN uses running statistics)."""
    total_loss, wrong = 0.0, 0
    n = len(split.labels)
    for start in range(0, n, batch):
        x = split.images[start:start + batch]
        y = split.labels[start:start + batch]
        logits, _ = model.forward(x, "eval", update_stats=False)
        _, _, per = softmax_cross_entropy(logits.astype(np.float64), y)
        total_loss += float(per.sum())
        wrong += int((logits.argmax(axis=1) != y).sum())
    return total_loss / n, wrong / n


def median_final(errors: Sequence[float], k: int = 5) -> float:
    tail = list(errors)[-k:]
    return float(np.median(tail)) if tail else float("nan")


def train(model: Model, dataset: tuple, config: TrainConfig,
          monitor: Sequence[str] = DEFAULT_MONITOR,
          on_epoch: Optional[Callable[[int, list], None]] = None) -> TrainResult:
    """Train ``model`` in place and return per-epoch metrics.

    Each epoch visits the training split in a fresh seeded permutation, in
    global batches of ``batch_size * workers``; BN statistics are taken per
    worker shard of ``batch_size``.  An incomplete trailing batch is dropped.
    """
    train_split, eval_split = dataset
    records: list = []
    eval_errors: list = []
    if config.epochs == 0:
        return TrainResult(records, model, float("nan"))
    if monitor:
        log_percentiles(model, eval_split.images[:1], monitor)  # validate site names up front

    shuffle_rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "shuffle")))
    probe = eval_split.images[:config.probe_size]
    n = len(train_split.labels)
    gb = config.global_batch
    steps = n // gb
    if steps == 0:
        raise ConfigError(f"global batch {gb} exceeds the {n} training samples")

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = shuffle_rng.permutation(n)
        loss_sum, wrong = 0.0, 0
        try:
            for s in range(steps):
                idx = order[s * gb:(s + 1) * gb]
                x, y = train_split.images[idx], train_split.labels[idx]
                logits, tape = model.forward(x, "train", shard=config.batch_size)
                loss, dlogits, _ = softmax_cross_entropy(logits.astype(np.float64), y)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {s}")
                grads = model.backward(tape, dlogits.astype(model.dtype))
                sgd_step(model, grads, lr, config)
                loss_sum += loss * len(y)
                wrong += int((logits.argmax(axis=1) != y).sum())
        except DivergenceError as exc:
            return TrainResult(records, model, median_final(eval_errors), True, str(exc), eval_errors)
        seen = steps * gb
        epoch_records = [MetricsRecord(epoch, "train", loss_sum / seen, wrong / seen)]
        ev_loss, ev_err = evaluate(model, eval_split, config.eval_batch)
        if not math.isfinite(ev_loss):
            records.extend(epoch_records)
            return TrainResult(records, model, median_final(eval_errors), True,
                               f"non-finite eval loss at epoch {epoch}", eval_errors)
        eval_errors.append(ev_err)
        epoch_records.append(MetricsRecord(epoch, "eval", ev_loss, ev_err))
        if monitor:
            for site, ps in log_percentiles(model, probe, monitor):
                epoch_records.append(MetricsRecord(epoch, "eval", layer=site, percentiles=ps))
        records.extend(epoch_records)
        if on_epoch is not None:
            on_epoch(epoch, epoch_records)
    return TrainResult(records, model, median_final(eval_errors), False, "", eval_errors)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    return "".join(line + "\n" for line in [CSV_HEADER, *(r.csv_row() for r in records)])


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(metrics_csv(records))


@dataclass(frozen=True)
class Experiment:
    """Everything one toy training run depends on.  ``scheme=None`` trains without normalization."""

    scheme: Optional[NormScheme]
    config: TrainConfig = TrainConfig()
    data: SynthDatasetSpec = SynthDatasetSpec()
    arch: tuple = DEFAULT_ARCH
    zero_gamma_last: bool = False
    dtype: str = "float32"
    monitor: tuple = DEFAULT_MONITOR


def run_experiment(exp: Experiment, on_epoch=None) -> TrainResult:
    """Build data and model from the config seed, then train.

    Data and weight-init seeds are derived from ``config.seed``.
    """
    seed = exp.config.seed
    data = generate_dataset(replace(exp.data, seed=derive_seed(seed, "data")))
    model = build_model(exp.arch, exp.scheme, exp.zero_gamma_last, derive_seed(seed, "init"),
                        in_channels=exp.data.image_shape[0], dtype=np.dtype(exp.dtype))
    return train(model, data, exp.config, exp.monitor, on_epoch)
