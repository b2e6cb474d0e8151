"""AddUNet encoder-decoder variants.

Three variants share one parameter layout:

``ae``
    Skipless auto-encoder. The encoder is the subtractive residual encoder of
    the real-additive model; the decoder receives nothing but the upsampled
    deeper state.
``pseudo``
    Encoder features ``e_i`` are pooled straight down and added, ungated, to
    the decoder at the matching level.
``real``
    Each level extracts a residual ``r_i`` and passes ``x_i - r_i`` downward.
    The decoder re-injects ``alpha_i * r_i`` where ``alpha_i = softplus(rho_i)``
    is a nonnegative learned gate (or 1 when ``gated`` is false).

All intermediate feature maps have the same channel count ``C``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Variable

VARIANTS = ("ae", "pseudo", "real")


class ConfigError(ValueError):
    pass


@dataclass
class AddUNetConfig:
    depth: int = 3
    kernels: list[int] = field(default_factory=lambda: [3, 3, 3])
    channels: int = 16
    variant: str = "real"
    gated: bool = True
    with_classifier: bool = False
    num_classes: int = 4
    classifier_hidden: int = 256

    def __post_init__(self):
        self.kernels = [int(k) for k in self.kernels]
        if self.depth < 1:
            raise ConfigError(f"depth must be positive, got {self.depth}")
        if len(self.kernels) != self.depth:
            raise ConfigError(f"kernel schedule {self.kernels} has {len(self.kernels)} entries, depth is {self.depth}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernels}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.with_classifier and (self.num_classes < 2 or self.classifier_hidden < 1):
            raise ConfigError("classifier needs num_classes >= 2 and classifier_hidden >= 1")

    @property
    def has_gates(self) -> bool:
        return self.variant == "real" and self.gated

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AddUNetConfig":
        return cls(**d)


class ModelState:
    """Named parameters plus inference-time gate overrides."""

    def __init__(self, config: AddUNetConfig, params: dict[str, Variable]):
        self.config = config
        self.params = params
        self.gate_overrides: dict[int, float] = {}

    def parameters(self) -> list[Variable]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Variable:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].value = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())


@dataclass
class ForwardArtifacts:
    denoised: Variable
    logits: Variable | None
    residuals: list[Variable]
    encoder_states: list[Variable]
    decoder_states: list[Variable]
    bottleneck: Variable


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _softplus_inverse(a: float) -> float:
    return math.log(math.expm1(a))


def build(config: AddUNetConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Initialise parameters: He-uniform weights, zero biases, gates at 1/depth."""
    rng = np.random.default_rng(seed)
    C, D = config.channels, config.depth
    params: dict[str, Variable] = {}

    def conv(name: str, cout: int, cin: int, k: int):
        params[f"{name}.weight"] = Variable(_he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), True, f"{name}.weight")
        params[f"{name}.bias"] = Variable(np.zeros(cout, dtype=dtype), True, f"{name}.bias")

    conv("stem", C, 1, 3)
    for i, k in enumerate(config.kernels, 1):
        conv(f"enc{i}", C, C, k)
    conv("bottleneck", C, C, 3)
    for i, k in enumerate(config.kernels, 1):
        conv(f"dec{i}", C, C, k)
    conv("out", 1, C, 1)
    # gates draw nothing from rng so gated and skipless builds share weights
    if config.has_gates:
        rho = _softplus_inverse(1.0 / D)
        for i in range(1, D + 1):
            params[f"gate{i}.rho"] = Variable(np.asarray(rho, dtype=dtype), True, f"gate{i}.rho")
    if config.with_classifier:
        h, K = config.classifier_hidden, config.num_classes
        params["cls1.weight"] = Variable(_he_uniform(rng, (h, C), C, dtype), True, "cls1.weight")
        params["cls1.bias"] = Variable(np.zeros(h, dtype=dtype), True, "cls1.bias")
        params["cls2.weight"] = Variable(_he_uniform(rng, (K, h), h, dtype), True, "cls2.weight")
        params["cls2.bias"] = Variable(np.zeros(K, dtype=dtype), True, "cls2.bias")
    return ModelState(config, params)


def _conv(state: ModelState, name: str, x, act: bool = True) -> Variable:
    w = state.params[f"{name}.weight"]
    y = ag.conv2d(x, w, state.params[f"{name}.bias"], 1, w.shape[-1] // 2)
    return ag.relu(y) if act else y


def _gate(state: ModelState, i: int) -> Variable | None:
    """Scalar multiplying the level-i skip, or None for plain addition."""
    cfg = state.config
    if cfg.variant != "real":
        return None
    if i in state.gate_overrides:
        return Variable(np.asarray(state.gate_overrides[i], dtype=state.dtype))
    if not cfg.gated:
        return None
    return ag.softplus(state.params[f"gate{i}.rho"])


def _check_channels(t: Variable, C: int, what: str) -> None:
    if t.shape[1] != C:
        raise AssertionError(f"{what} has {t.shape[1]} channels, expected {C}")


def forward(state: ModelState, x) -> ForwardArtifacts:
    cfg = state.config
    C, D = cfg.channels, cfg.depth
    x = ag.as_variable(x)
    if x.value.ndim != 4 or x.shape[1] != 1:
        raise ag.ShapeError(f"forward: expected input of shape (B, 1, H, W), got {x.shape}")
    mult = 2 ** D
    H, W = x.shape[2:]
    if H % mult or W % mult:
        raise ag.ShapeError(f"forward: spatial size {H}x{W} must be a multiple of {mult} for depth {D}")

    h = _conv(state, "stem", x)
    encoder_states, skips = [h], []
    for i in range(1, D + 1):
        e = _conv(state, f"enc{i}", h)
        _check_channels(e, C, f"encoder level {i}")
        h = ag.avg_pool2(e if cfg.variant == "pseudo" else ag.sub(h, e))
        skips.append(e)
        encoder_states.append(h)
    b = _conv(state, "bottleneck", h)
    _check_channels(b, C, "bottleneck")

    d = b
    decoder_states: list[Variable] = []
    for i in range(D, 0, -1):
        u = ag.upsample_nearest2(d)
        if cfg.variant == "pseudo":
            u = ag.add(u, skips[i - 1])
        elif cfg.variant == "real":
            g = _gate(state, i)
            u = ag.add(u, skips[i - 1] if g is None else ag.scale(skips[i - 1], g))
        d = _conv(state, f"dec{i}", u)
        _check_channels(d, C, f"decoder level {i}")
        decoder_states.append(d)
    decoder_states.reverse()
    out = _conv(state, "out", d, act=False)

    logits = None
    if cfg.with_classifier:
        f = ag.global_avg_pool(b)
        f = ag.relu(ag.dense(f, state.params["cls1.weight"], state.params["cls1.bias"]))
        logits = ag.dense(f, state.params["cls2.weight"], state.params["cls2.bias"])
    return ForwardArtifacts(out, logits, skips, encoder_states, decoder_states, b)


def predict(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Denoised output without recording gradients."""
    with ag.no_grad():
        return forward(state, x).denoised.value


def alpha(state: ModelState) -> list[float]:
    """Current gate values, shallow to deep, including any overrides."""
    cfg = state.config
    if not cfg.has_gates:
        raise ConfigError("alpha() requires a gated real-additive model")
    out = []
    for i in range(1, cfg.depth + 1):
        if i in state.gate_overrides:
            out.append(float(state.gate_overrides[i]))
        else:
            rho = state.params[f"gate{i}.rho"].value
            out.append(float(np.logaddexp(rho.dtype.type(0), rho)))
    return out


def set_alpha(state: ModelState, index: int, value: float) -> None:
    """Override gate ``index`` (1-based) for subsequent forwards.

    Learned parameters are left untouched; :func:`clear_alpha` drops the override.
    """
    cfg = state.config
    if not cfg.has_gates:
        raise ConfigError("set_alpha requires a gated real-additive model")
    if not 1 <= index <= cfg.depth:
        raise ConfigError(f"gate index {index} out of range 1..{cfg.depth}")
    if not value >= 0:
        raise ValueError(f"gate value must be nonnegative, got {value}")
    state.gate_overrides[index] = float(value)


def clear_alpha(state: ModelState, index: int | None = None) -> None:
    if index is None:
        state.gate_overrides.clear()
    else:
        state.gate_overrides.pop(index, None)
