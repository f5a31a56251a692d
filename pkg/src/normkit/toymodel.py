"""Small residual CNN with a pluggable normalization layer, and a synthetic dataset.

The network stands in for ResNet: every normalization site is
filled with the same :class:`NormScheme` (or left empty for the
unnormalized variant), so swapping BN for GN changes no parameter shapes.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from . import normlayer
from . import tensor as T
from .errors import ArchitectureError, ContractError, StateError
from .normlayer import NormParams, NormScheme
from .normspec import GroupPolicy, Method, resolve_group_count


# -- architecture description ----------------------------------------------

@dataclass(frozen=True)
class Conv3x3:
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class Norm:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    """x + norm(conv(relu(norm(conv(x))))); no activation after the sum."""

    channels: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    classes: int


LayerSpec = Union[Conv3x3, Norm, ReLU, ResidualBlock, GlobalAvgPool, Linear]

DEFAULT_ARCH: tuple = (
    Conv3x3(16), Norm(), ReLU(),
    ResidualBlock(16), ReLU(),
    Conv3x3(32, stride=2), Norm(), ReLU(),
    ResidualBlock(32), ReLU(),
    GlobalAvgPool(),
    Linear(10),
)

_SPEC_TYPES = {cls.__name__: cls for cls in (Conv3x3, Norm, ReLU, ResidualBlock, GlobalAvgPool, Linear)}


def arch_to_json(arch: Sequence[LayerSpec]) -> list:
    return [{"kind": type(s).__name__, **asdict(s)} for s in arch]


def arch_from_json(items: list) -> tuple:
    out = []
    for item in items:
        item = dict(item)
        out.append(_SPEC_TYPES[item.pop("kind")](**item))
    return tuple(out)


# -- primitive kernels -------------------------------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """3x3 convolution with zero padding 1, via a (C*9, N*Ho*Wo) column matrix."""
    N, C, H, W = x.shape
    cout = w.shape[0]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, N, Ho, Wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xt[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    cols = cols.reshape(C * 9, N * Ho * Wo)
    out = w.reshape(cout, -1) @ cols
    out = np.ascontiguousarray(out.reshape(cout, N, Ho, Wo).transpose(1, 0, 2, 3))
    return out, (cols, x.shape)


def conv3x3_backward(dy: np.ndarray, cache, w: np.ndarray, stride: int = 1):
    cols, (N, C, H, W) = cache
    cout, _, _, _ = w.shape
    Ho, Wo = dy.shape[2:]
    dy2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(cout, -1).T @ dy2).reshape(C, 3, 3, N, Ho, Wo)
    dxp = np.zeros((C, N, H + 2, W + 2), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dcols[:, i, j]
    dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
    return dx, dw


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy, its gradient, and the per-sample losses."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    per_sample = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return per_sample.mean(), grad / n, per_sample


# -- runtime units -----------------------------------------------------------

class Tape:
    """Per-forward caches plus any recorded pre-normalization activations."""

    def __init__(self, record=()):
        self.caches: list = []
        self.record = set(record)
        self.records: dict = {}


class _Conv:
    def __init__(self, name, w, stride):
        self.name, self.w, self.stride = name, w, stride

    def params(self):
        return {f"{self.name}.weight": self.w}

    def forward(self, x, ctx, tape):
        y, cache = conv3x3_forward(x, self.w, self.stride)
        if self.name in tape.record:
            tape.records[self.name] = y.copy()
        tape.caches.append(cache)
        return y

    def backward(self, dy, tape, grads):
        dx, dw = conv3x3_backward(dy, tape.caches.pop(), self.w, self.stride)
        grads[f"{self.name}.weight"] = dw
        return dx


class _Norm:
    def __init__(self, name, scheme: Optional[NormScheme], params: Optional[NormParams]):
        self.name, self.scheme, self.p = name, scheme, params

    def params(self):
        if self.scheme is None:
            return {}
        return {f"{self.name}.gamma": self.p.gamma, f"{self.name}.beta": self.p.beta}

    def buffers(self):
        if self.scheme is None or not self.p.has_running_stats:
            return {}
        return {f"{self.name}.running_mean": self.p.running_mean,
                f"{self.name}.running_var": self.p.running_var}

    def forward(self, x, ctx, tape):
        if self.scheme is None:
            tape.caches.append(None)
            return x
        scheme = self.scheme.with_mode(ctx["mode"]) if self.scheme.method is Method.BATCH else self.scheme
        shard = ctx.get("shard")
        if scheme.uses_running_stats and not self.p.has_running_stats:
            raise StateError(f"{self.name}: eval-mode BatchNorm without running statistics")
        if scheme.method is Method.BATCH and scheme.mode == "train" and shard and shard < x.shape[0]:
            # per-worker statistics: shards never see each other's samples
            outs, caches = [], []
            for start in range(0, x.shape[0], shard):
                y, c = normlayer.forward(x[start:start + shard], scheme, self.p)
                outs.append(y)
                caches.append(c)
            y = np.concatenate(outs)
            moments = normlayer.merge_moments([c.moments for c in caches])
        else:
            y, c = normlayer.forward(x, scheme, self.p)
            caches, moments = [c], c.moments
        if ctx.get("update_stats") and scheme.method is Method.BATCH and scheme.mode == "train":
            normlayer.update_running_stats(self.p, moments)
        tape.caches.append(caches)
        return y

    def backward(self, dy, tape, grads):
        caches = tape.caches.pop()
        if caches is None:
            return dy
        dxs, dg, db, start = [], 0.0, 0.0, 0
        for c in caches:
            n = c.x_hat.shape[0]
            dx, g, b = normlayer.backward(c, dy[start:start + n], self.p)
            dxs.append(dx)
            dg, db, start = dg + g, db + b, start + n
        grads[f"{self.name}.gamma"] = dg
        grads[f"{self.name}.beta"] = db
        return dxs[0] if len(dxs) == 1 else np.concatenate(dxs)


class _ReLU:
    def params(self):
        return {}

    def forward(self, x, ctx, tape):
        mask = x > 0
        tape.caches.append(mask)
        return x * mask

    def backward(self, dy, tape, grads):
        return dy * tape.caches.pop()


class _Block:
    def __init__(self, name, units):
        self.name, self.units = name, units

    def params(self):
        out = {}
        for u in self.units:
            out.update(u.params())
        return out

    def forward(self, x, ctx, tape):
        h = x
        for u in self.units:
            h = u.forward(h, ctx, tape)
        return x + h

    def backward(self, dy, tape, grads):
        d = dy
        for u in reversed(self.units):
            d = u.backward(d, tape, grads)
        return dy + d


class _Pool:
    def params(self):
        return {}

    def forward(self, x, ctx, tape):
        tape.caches.append(x.shape)
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)

    def backward(self, dy, tape, grads):
        shape = tape.caches.pop()
        spatial = int(np.prod(shape[2:]))
        return np.broadcast_to((dy / spatial)[:, :, None, None], shape).copy()


class _Linear:
    def __init__(self, name, w, b):
        self.name, self.w, self.b = name, w, b

    def params(self):
        return {f"{self.name}.weight": self.w, f"{self.name}.bias": self.b}

    def forward(self, x, ctx, tape):
        tape.caches.append(x)
        return x @ self.w.T + self.b

    def backward(self, dy, tape, grads):
        x = tape.caches.pop()
        grads[f"{self.name}.weight"] = dy.T @ x
        grads[f"{self.name}.bias"] = dy.sum(axis=0)
        return dy @ self.w


# -- model -------------------------------------------------------------------

class Model:
    """Sequential network built by :func:`build_model`.

    ``parameters()`` returns the live arrays; optimizers update them in place.
    """

    def __init__(self, arch, scheme, units, in_channels, zero_gamma_last, init_seed, dtype):
        self.arch = tuple(arch)
        self.scheme = scheme
        self.units = units
        self.in_channels = in_channels
        self.zero_gamma_last = zero_gamma_last
        self.init_seed = init_seed
        self.dtype = dtype
        self.velocity: dict = {}

    def _walk(self):
        for u in self.units:
            yield u
            if isinstance(u, _Block):
                yield from u.units

    def parameters(self) -> dict:
        out = {}
        for u in self.units:
            out.update(u.params())
        return out

    def buffers(self) -> dict:
        out = {}
        for u in self._walk():
            if isinstance(u, _Norm):
                out.update(u.buffers())
        return out

    def norm_units(self) -> list:
        return [u for u in self._walk() if isinstance(u, _Norm)]

    def monitor_sites(self) -> list[str]:
        """Names of conv outputs, i.e. activations before normalization and ReLU."""
        return [u.name for u in self._walk() if isinstance(u, _Conv)]

    @staticmethod
    def is_norm_param(name: str) -> bool:
        return name.endswith(".gamma") or name.endswith(".beta")

    def forward(self, x: np.ndarray, mode: str = "train", shard: Optional[int] = None,
                record: Sequence[str] = (), update_stats: bool = True):
        """Return (logits, tape).  ``shard`` is the per-worker batch for BN statistics."""
        if mode not in ("train", "eval", "frozen"):
            raise ContractError(f"unknown mode {mode!r}")
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ContractError(f"expected (N, {self.in_channels}, H, W) input, got {x.shape}")
        ctx = {"mode": mode, "shard": shard, "update_stats": update_stats and mode == "train"}
        tape = Tape(record)
        h = x.astype(self.dtype, copy=False)
        for u in self.units:
            h = u.forward(h, ctx, tape)
        return h, tape

    def backward(self, tape: Tape, dlogits: np.ndarray) -> dict:
        grads: dict = {}
        d = dlogits
        for u in reversed(self.units):
            d = u.backward(d, tape, grads)
        return grads

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        clone.velocity = {}
        clone.dtype = np.dtype(dtype)
        for u in clone._walk():
            if isinstance(u, _Conv):
                u.w = u.w.astype(dtype)
            elif isinstance(u, _Linear):
                u.w, u.b = u.w.astype(dtype), u.b.astype(dtype)
            elif isinstance(u, _Norm) and u.scheme is not None:
                for attr in ("gamma", "beta", "running_mean", "running_var"):
                    v = getattr(u.p, attr)
                    if v is not None:
                        setattr(u.p, attr, v.astype(dtype))
        return clone


def _norm_scheme_for(scheme: Optional[NormScheme], channels: int) -> Optional[NormScheme]:
    if scheme is None or scheme.method is not Method.GROUP:
        return scheme
    policy = scheme.policy
    if policy.groups is not None and policy.groups > channels:
        # a fixed G larger than the layer width is capped to one channel per group
        policy = GroupPolicy.fixed_groups(channels)
    try:
        resolve_group_count(policy, channels)
    except ValueError as exc:
        raise ArchitectureError(str(exc)) from None
    return NormScheme(scheme.method, policy, scheme.eps, scheme.mode)


def build_model(arch: Sequence[LayerSpec] = DEFAULT_ARCH, scheme: Optional[NormScheme] = None,
                zero_gamma_last: bool = True, init_seed: int = 0, in_channels: int = 3,
                momentum: float = normlayer.DEFAULT_MOMENTUM, dtype=np.float64) -> Model:
    """Instantiate ``arch`` with He-initialized convolutions.

    ``scheme=None`` builds the unnormalized variant (norm sites become identity).
    Weights are drawn in float64 and then cast, so float32 and float64 models
    built from one seed hold the same values up to rounding.
    """
    rng = np.random.Generator(np.random.PCG64(init_seed))
    units: list = []
    channels = in_channels
    counters = {"conv": 0, "norm": 0, "block": 0}
    last_conv_seen = False

    def conv(name, cin, cout, stride):
        std = np.sqrt(2.0 / (cin * 9))
        return _Conv(name, rng.normal(0.0, std, (cout, cin, 3, 3)).astype(dtype), stride)

    def norm(name, c, zero_gamma=False):
        s = _norm_scheme_for(scheme, c)
        if s is None:
            return _Norm(name, None, None)
        p = NormParams.create(c, running=s.method is Method.BATCH, zero_gamma=zero_gamma,
                              momentum=momentum, dtype=dtype)
        return _Norm(name, s, p)

    for spec in arch:
        if isinstance(spec, Conv3x3):
            counters["conv"] += 1
            units.append(conv(f"conv{counters['conv']}", channels, spec.out_channels, spec.stride))
            channels = spec.out_channels
            last_conv_seen = True
        elif isinstance(spec, Norm):
            if not last_conv_seen:
                raise ArchitectureError("a Norm site must follow a convolution")
            counters["norm"] += 1
            units.append(norm(f"norm{counters['norm']}", channels))
        elif isinstance(spec, ReLU):
            units.append(_ReLU())
        elif isinstance(spec, ResidualBlock):
            if spec.channels != channels:
                raise ArchitectureError(
                    f"residual block expects {spec.channels} channels, input has {channels}")
            counters["block"] += 1
            b = f"block{counters['block']}"
            units.append(_Block(b, [
                conv(f"{b}.conv1", channels, channels, 1), norm(f"{b}.norm1", channels), _ReLU(),
                conv(f"{b}.conv2", channels, channels, 1),
                norm(f"{b}.norm2", channels, zero_gamma=zero_gamma_last),
            ]))
        elif isinstance(spec, GlobalAvgPool):
            units.append(_Pool())
        elif isinstance(spec, Linear):
            w = rng.normal(0.0, 0.01, (spec.classes, channels)).astype(dtype)
            units.append(_Linear("fc", w, np.zeros(spec.classes, dtype=dtype)))
            channels = spec.classes
        else:
            raise ArchitectureError(f"unknown layer spec {spec!r}")
    if not units or not isinstance(arch[-1], Linear):
        raise ArchitectureError("architecture must end with a Linear classifier")
    return Model(arch, scheme, units, in_channels, zero_gamma_last, init_seed, np.dtype(dtype))


# -- checkpoints -------------------------------------------------------------
# magic "NKM1" | u32 LE manifest length | UTF-8 JSON manifest | NKT1 tensors in manifest order

CKPT_MAGIC = b"NKM1"


def _scheme_json(scheme: Optional[NormScheme]):
    if scheme is None:
        return None
    return {"method": scheme.method.value, "groups": scheme.policy.groups,
            "channels_per_group": scheme.policy.channels_per_group, "eps": scheme.eps}


def save_checkpoint(model: Model, path) -> None:
    tensors = {**model.parameters(), **model.buffers()}
    manifest = {
        "arch": arch_to_json(model.arch),
        "norm": _scheme_json(model.scheme),
        "in_channels": model.in_channels,
        "zero_gamma_last": model.zero_gamma_last,
        "init_seed": model.init_seed,
        "dtype": model.dtype.name,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<I", len(blob)))
        fp.write(blob)
        for arr in tensors.values():
            T.dump(np.asarray(arr), fp)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fp:
        if fp.read(4) != CKPT_MAGIC:
            raise ValueError("not an NKM1 checkpoint")
        (length,) = struct.unpack("<I", fp.read(4))
        manifest = json.loads(fp.read(length).decode("utf-8"))
        arrays = {t["name"]: T.load(fp) for t in manifest["tensors"]}
    norm = manifest["norm"]
    scheme = None
    if norm is not None:
        policy = GroupPolicy(norm["groups"], norm["channels_per_group"])
        scheme = NormScheme(Method(norm["method"]), policy, norm["eps"])
    model = build_model(arch_from_json(manifest["arch"]), scheme, manifest["zero_gamma_last"],
                        manifest["init_seed"], in_channels=manifest["in_channels"],
                        dtype=np.dtype(manifest.get("dtype", "float64")))
    for name, arr in model.parameters().items():
        arr[...] = arrays[name]
    for u in model.norm_units():
        if u.scheme is not None and u.p.has_running_stats:
            u.p.running_mean = arrays[f"{u.name}.running_mean"].copy()
            u.p.running_var = arrays[f"{u.name}.running_var"].copy()
    return model


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SynthDatasetSpec:
    classes: int = 10
    samples_per_class: int = 100
    image_shape: tuple = (3, 8, 8)
    seed: int = 0
    noise_sigma: float = 2.0
    max_shift: int = 2
    gain_spread: float = 0.0  # per-image gain is 2**u, u ~ U[-gain_spread, gain_spread]
    offset_sigma: float = 0.0  # per-image, per-channel additive offset
    offset_shared: bool = False  # one offset per image for all channels

    def __post_init__(self):
        if self.noise_sigma < 0 or self.gain_spread < 0 or self.offset_sigma < 0 or self.max_shift < 0:
            raise ContractError("noise, gain, offset and shift settings must be non-negative")
        if self.classes < 2:
            raise ContractError("need at least two classes")
        if self.samples_per_class < 2:
            raise ContractError("need at least two samples per class")


class Split(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


def class_templates(spec: SynthDatasetSpec) -> np.ndarray:
    """One smooth template image per class, zero-mean in every channel, unit variance.

    Zero channel means put the class signal in spatial structure only, so no
    normalization method gets an advantage from discarding or keeping the mean.
    """
    rng = np.random.Generator(np.random.PCG64([spec.seed, 0x7E3]))
    C, H, W = spec.image_shape
    coarse = rng.normal(size=(spec.classes, C, (H + 2) // 3, (W + 2) // 3))
    up = np.kron(coarse, np.ones((1, 1, 3, 3)))[:, :, :H, :W]
    # 3x3 box blur with wrap-around keeps the templates smooth but not blocky
    blur = sum(np.roll(np.roll(up, a, axis=2), b, axis=3) for a in (-1, 0, 1) for b in (-1, 0, 1)) / 9.0
    blur -= blur.mean(axis=(2, 3), keepdims=True)
    blur /= blur.std(axis=(1, 2, 3), keepdims=True)
    return blur


def generate_dataset(spec: SynthDatasetSpec) -> tuple[Split, Split]:
    """Template + random circular translation (<= max_shift px) + Gaussian noise,
    then a per-image gain and per-channel offset ("lighting").

    The first 80% of each class's samples go to the train split.
    """
    templates = class_templates(spec)
    rng = np.random.Generator(np.random.PCG64([spec.seed, 0xDA7A]))
    k, spc = spec.classes, spec.samples_per_class
    images = np.empty((k, spc) + tuple(spec.image_shape))
    s = spec.max_shift
    for c in range(k):
        shifts = rng.integers(-s, s + 1, size=(spc, 2)) if s > 0 else np.zeros((spc, 2), int)
        noise = rng.normal(0.0, 1.0, size=(spc,) + tuple(spec.image_shape))
        for i, (dy, dx) in enumerate(shifts):
            images[c, i] = np.roll(templates[c], (dy, dx), axis=(1, 2))
        images[c] += spec.noise_sigma * noise
        gain = 2.0 ** rng.uniform(-spec.gain_spread, spec.gain_spread, size=(spc, 1, 1, 1))
        offset = spec.offset_sigma * rng.normal(size=(spc, spec.image_shape[0], 1, 1))
        if spec.offset_shared:
            offset[:] = offset[:, :1]
        images[c] = gain * images[c] + offset
    n_train = max(1, min(spc - 1, int(round(0.8 * spc))))
    labels = np.repeat(np.arange(k), spc).reshape(k, spc)
    # interleave classes so that contiguous slices are balanced
    train = Split(images[:, :n_train].transpose(1, 0, 2, 3, 4).reshape(-1, *spec.image_shape),
                  labels[:, :n_train].T.reshape(-1))
    ev = Split(images[:, n_train:].transpose(1, 0, 2, 3, 4).reshape(-1, *spec.image_shape),
               labels[:, n_train:].T.reshape(-1))
    return Split(np.ascontiguousarray(train.images), train.labels), \
        Split(np.ascontiguousarray(ev.images), ev.labels)


def nearest_template_accuracy(spec: SynthDatasetSpec, split: Split) -> float:
    """Accuracy of picking the template with the highest correlation.

    Images are centred per channel first, which undoes the offsets; the gain
    does not change which template correlates best.
    """
    templates = class_templates(spec).reshape(spec.classes, -1)
    centred = split.images - split.images.mean(axis=(2, 3), keepdims=True)
    score = centred.reshape(len(split.labels), -1) @ templates.T
    return float((score.argmax(axis=1) == split.labels).mean())


def load_image_batch(images_path, labels_path) -> Split:
    """Read an external (N, C, H, W) image tensor and a label vector, both NKT1 dumps."""
    images = T.read(images_path)
    labels = T.read(labels_path)
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise ContractError("expected (N, C, H, W) images and N labels")
    return Split(images.astype(np.float64), labels.astype(np.int64))
