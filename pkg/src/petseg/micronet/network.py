"""Configurable 3D UNet executed as a flat list of layer steps.

Encoder stage ``s`` holds two [conv 3^3 -> instance norm -> leaky ReLU]
units, the first with stride 2 for ``s >= 1``. Each decoder level upsamples
with a stride-2 transposed convolution, concatenates the matching encoder
output and applies two more conv units. A 1x1x1 convolution maps to class
logits; softmax is taken over the class axis.

Convolutions that feed an instance norm carry no bias: the norm subtracts
the per-channel mean, so such a bias has no effect and a zero gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import Concat, Conv3, InstanceNorm, LeakyReLU, Pointwise, UpConv, softmax


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    num_classes: int = 10
    base_features: int = 32
    num_downsamples: int = 5
    feature_cap: int = 1024
    leaky_slope: float = 0.01
    norm_epsilon: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.in_channels, self.base_features, self.feature_cap) < 1 or self.num_classes < 2:
            raise ConfigError(f"invalid channel counts in {self}")
        if self.num_downsamples < 0:
            raise ConfigError("num_downsamples must be >= 0")
        if self.leaky_slope < 0 or self.norm_epsilon <= 0:
            raise ConfigError("leaky_slope must be >= 0 and norm_epsilon > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def features(self) -> list:
        return [min(self.base_features * 2**s, self.feature_cap) for s in range(self.num_downsamples + 1)]

    @property
    def divisor(self) -> int:
        return 2**self.num_downsamples

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Step:
    layer: object
    inputs: tuple
    output: str


def _conv_unit(steps, name, src, cin, cout, stride, cfg):
    steps.append(Step(Conv3(f"{name}.conv", cin, cout, stride), (src,), f"{name}.conv"))
    steps.append(Step(InstanceNorm(f"{name}.norm", cout, cfg.norm_epsilon), (f"{name}.conv",), f"{name}.norm"))
    steps.append(Step(LeakyReLU(cfg.leaky_slope), (f"{name}.norm",), f"{name}.act"))
    return f"{name}.act"


def build_steps(cfg: NetConfig) -> list:
    feats = cfg.features()
    steps = []
    src, cin = "input", cfg.in_channels
    skips = []
    for s, f in enumerate(feats):
        src = _conv_unit(steps, f"enc{s}.0", src, cin, f, 2 if s > 0 else 1, cfg)
        src = _conv_unit(steps, f"enc{s}.1", src, f, f, 1, cfg)
        skips.append(src)
        cin = f
    for s in range(cfg.num_downsamples - 1, -1, -1):
        f = feats[s]
        steps.append(Step(UpConv(f"dec{s}.up", cin, f), (src,), f"dec{s}.up"))
        steps.append(Step(Concat(), (f"dec{s}.up", skips[s]), f"dec{s}.cat"))
        src = _conv_unit(steps, f"dec{s}.0", f"dec{s}.cat", 2 * f, f, 1, cfg)
        src = _conv_unit(steps, f"dec{s}.1", src, f, f, 1, cfg)
        cin = f
    steps.append(Step(Pointwise("head", cin, cfg.num_classes), (src,), "logits"))
    return steps


class StepNetwork:
    """Any DAG of layer steps ending in ``"logits"``, with shared forward/backward plumbing."""

    def __init__(self, steps, params: dict, in_channels: int, num_classes: int, dtype="float64", divisor: int = 1):
        self.steps = list(steps)
        self.in_channels, self.num_classes, self.divisor = in_channels, num_classes, divisor
        self.dtype = np.dtype(dtype)
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        missing = set(self.param_shapes()) ^ set(self.params)
        if missing:
            raise ConfigError(f"parameter set mismatch: {sorted(missing)}")
        self._cache = None

    def param_shapes(self) -> dict:
        shapes = {}
        for st in self.steps:
            shapes.update(st.layer.param_shapes())
        return shapes

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 5:
            raise ShapeError(f"input must be (N, C, D, H, W), got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        bad = [d for d in x.shape[2:] if d % self.divisor]
        if bad:
            raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by {self.divisor}")

    def run(self, acts: dict, start: int = 0, keep_cache: bool = False) -> dict:
        """Execute steps ``start..end`` in place on ``acts``; returns the per-step caches."""
        caches = {}
        for i in range(start, len(self.steps)):
            st = self.steps[i]
            out, cache = st.layer.forward(self.params, *(acts[k] for k in st.inputs))
            acts[st.output] = out
            if keep_cache:
                caches[i] = cache
        return caches

    def forward_logits(self, x: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        self.check_input(x)
        acts = {"input": np.ascontiguousarray(x, dtype=self.dtype)}
        caches = self.run(acts, keep_cache=keep_cache)
        self._cache = caches if keep_cache else None
        return acts["logits"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities ``(N, num_classes, D, H, W)``."""
        return softmax(self.forward_logits(x, keep_cache=False))

    def backward(self, grad_logits: np.ndarray) -> dict:
        """Parameter gradients for the most recent ``forward_logits`` call."""
        if self._cache is None:
            raise RuntimeError("backward needs a preceding forward_logits(keep_cache=True)")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        pending = {"logits": np.asarray(grad_logits, dtype=self.dtype)}
        for i in range(len(self.steps) - 1, -1, -1):
            st = self.steps[i]
            g = pending.pop(st.output)
            ginputs, gparams = st.layer.backward(self.params, self._cache[i], g)
            for k, v in gparams.items():
                grads[k] += v
            for key, gi in zip(st.inputs, ginputs):
                pending[key] = pending[key] + gi if key in pending else gi
        self._cache = None
        return grads


class UNet3D(StepNetwork):
    def __init__(self, config: NetConfig, params: dict):
        self.config = config
        super().__init__(build_steps(config), params, config.in_channels, config.num_classes,
                         config.dtype, config.divisor)


def init_params(steps, seed: int = 0, slope: float = 0.01) -> dict:
    """He fan-in initialisation from ``np.random.default_rng(seed)``; norms start at identity."""
    rng = np.random.default_rng(seed)
    gain = 2.0 / (1.0 + slope**2)
    params = {}
    for st in steps:
        layer = st.layer
        for key, shape in layer.param_shapes().items():
            kind = key.rsplit(".", 1)[1]
            if kind == "w":
                params[key] = rng.normal(0.0, np.sqrt(gain / layer.fan_in()), size=shape)
            elif kind == "gamma":
                params[key] = np.ones(shape)
            else:
                params[key] = np.zeros(shape)
    return params


def build_network(config: NetConfig, seed: int = 0) -> UNet3D:
    return UNet3D(config, init_params(build_steps(config), seed, config.leaky_slope))
