"""The StyleLess residual layer and its insertion into a backbone."""

from __future__ import annotations

import numpy as np

from .nn import ConvLayer, Parameter, init_parameters
from .style import gram
from .tensor import Tensor, as_tensor, relu

BOTTLENECK_RATIO = 8


def bottleneck_width(c: int, ratio: int = BOTTLENECK_RATIO) -> int:
    return max(4, c // ratio)


class StyleLessLayer:
    """F_out = F_in + exit(relu(mid(relu(entry(F_in))))).

    entry/exit are 1x1 convs (c -> c_b -> c), mid is 3x3 at width c_b. The exit
    conv starts at zero, so a fresh layer is an exact identity.
    """

    def __init__(self, channels: int, bottleneck: int | None = None, seed: int = 0,
                 name: str = "styleless", dtype=np.float32):
        cb = bottleneck_width(channels) if bottleneck is None else bottleneck
        self.channels, self.bottleneck, self.name = channels, cb, name
        self.entry = ConvLayer(channels, cb, 1, name=f"{name}.entry", group="styleless", dtype=dtype)
        self.mid = ConvLayer(cb, cb, 3, name=f"{name}.mid", group="styleless", dtype=dtype)
        self.exit = ConvLayer(cb, channels, 1, name=f"{name}.exit", group="styleless", dtype=dtype)
        init_parameters(self.entry, seed)
        init_parameters(self.mid, seed + 1)

    def residual(self, x: Tensor) -> Tensor:
        return self.exit(relu(self.mid(relu(self.entry(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.residual(x)

    def parameters(self) -> list[Parameter]:
        return self.entry.parameters() + self.mid.parameters() + self.exit.parameters()

    def layers(self) -> list[ConvLayer]:
        return [self.entry, self.mid, self.exit]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def styleless_forward(F_in, layer: StyleLessLayer):
    """Returns (F_out, gram(F_in), gram(F_out))."""
    F_in = as_tensor(F_in)
    if F_in.ndim < 3 or F_in.shape[-3] != layer.channels:
        raise ValueError(f"channel mismatch: input {F_in.shape} vs layer width {layer.channels}")
    F_out = layer(F_in)
    return F_out, gram(F_in), gram(F_out)


def insert_styleless(net, seed: int | None = None):
    """Copy of ``net`` with one StyleLess layer after every residual block."""
    if net.styleless:
        raise ValueError("network already carries StyleLess layers")
    out = net.copy()
    base = out.seed if seed is None else seed
    out.styleless = [
        StyleLessLayer(c, seed=10_000 + base * 100 + 2 * i, name=f"styleless{i + 1}", dtype=out.dtype)
        for i, c in enumerate(out.widths)
    ]
    return out
