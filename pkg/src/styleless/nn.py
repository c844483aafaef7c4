"""Layers, initialization and the SGD optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradError, Tensor, conv2d, relu, softmax_cross_entropy  # noqa: F401

GROUPS = ("backbone", "styleless")


class Parameter(Tensor):
    """A trainable leaf tensor with a name and a parameter-group tag."""

    def __init__(self, data, name: str = "", group: str = "backbone", decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.group = group
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


class ConvLayer:
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, name: str = "conv",
                 group: str = "backbone", dtype=np.float32):
        if cout < 1 or cin < 1:
            raise ValueError("channel counts must be >= 1")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.name = name
        self.kernel = Parameter(np.zeros((cout, cin, k, k), dtype=dtype), f"{name}.kernel", group)
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias", group, decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride)

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    @property
    def n_params(self) -> int:
        return self.kernel.size + self.bias.size


def init_parameters(layer: ConvLayer, seed: int) -> ConvLayer:
    """Glorot-uniform kernel, zero bias."""
    o, i, k, _ = layer.kernel.shape
    bound = np.sqrt(6.0 / (i * k * k + o * k * k))
    rng = np.random.default_rng(seed)
    dt = layer.kernel.dtype
    layer.kernel.data = rng.uniform(-bound, bound, size=layer.kernel.shape).astype(dt)
    layer.bias.data = np.zeros(layer.bias.shape, dtype=dt)
    return layer


class ResidualBlock:
    """x + conv2(relu(conv1(x))), two 3x3 convs at constant width."""

    def __init__(self, channels: int, name: str = "block", dtype=np.float32):
        self.channels = channels
        self.name = name
        self.conv1 = ConvLayer(channels, channels, 3, name=f"{name}.conv1", dtype=dtype)
        self.conv2 = ConvLayer(channels, channels, 3, name=f"{name}.conv2", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(relu(self.conv1(x)))

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters()

    def layers(self) -> list[ConvLayer]:
        return [self.conv1, self.conv2]


@dataclass
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    total_steps: int | None = None
    group_lr_mult: dict[str, float] = field(default_factory=lambda: {"backbone": 1.0, "styleless": 1.0})

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if any(m <= 0 for m in self.group_lr_mult.values()):
            raise ValueError("lr multipliers must be > 0")


def lr_at(cfg: SgdConfig, step: int) -> float:
    """Polynomial decay lr0 * (1 - step/total)^power; constant when total is None."""
    if cfg.total_steps is None:
        return cfg.lr
    frac = min(max(step / cfg.total_steps, 0.0), 1.0)
    return cfg.lr * (1.0 - frac) ** cfg.power


def sgd_step(params, grads, cfg: SgdConfig, step: int, velocity: dict | None = None):
    """One momentum-SGD update, in place on ``params``.

    v <- momentum*v + g + wd*p ;  p <- p - lr(step) * mult[group] * v.
    ``velocity`` maps parameter name to its buffer and is updated in place.
    """
    if velocity is None:
        velocity = {}
    lr = lr_at(cfg, step)
    for p in params:
        g = grads.get(p)
        if g is None:
            raise GradError(f"missing gradient for {getattr(p, 'name', p)}")
        key = getattr(p, "name", None) or id(p)
        if cfg.weight_decay and getattr(p, "decay", True):
            g = g + cfg.weight_decay * p.data
        v = velocity.get(key)
        v = g if v is None else cfg.momentum * v + g
        velocity[key] = v
        mult = cfg.group_lr_mult.get(getattr(p, "group", "backbone"), 1.0)
        p.data = (p.data - (lr * mult) * v).astype(p.dtype, copy=False)
    return params
