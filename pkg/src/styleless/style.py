"""Gram-matrix style statistics and the losses built on them."""

from __future__ import annotations

import contextlib
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tape, Tensor, as_tensor, backward, mean, no_grad, reshape, sumsq, swap_last, tmax

EPS_MAX = 1e-12


def gram(F) -> Tensor:
    """Normalized Gram matrix F^T F / (h w c) of a (c,h,w) or (N,c,h,w) feature map.

    Returns (c,c), or (N,c,c) for batched input.
    """
    F = as_tensor(F)
    if F.ndim < 3:
        raise ValueError(f"feature map must be (c,h,w) or (N,c,h,w), got {F.shape}")
    *lead, c, h, w = F.shape
    m = reshape(F, (*lead, c, h * w))
    return (m @ swap_last(m)) / float(h * w * c)


def _as_layers(fm) -> dict:
    if isinstance(fm, Mapping):
        return dict(fm)
    if isinstance(fm, (list, tuple)):
        return dict(enumerate(fm))
    return {0: fm}


def content_loss(F_hat, F) -> Tensor:
    """Sum over layers of ||F_hat - F||_F^2 / (h w c); batched maps are averaged."""
    a, b = _as_layers(F_hat), _as_layers(F)
    if set(a) != set(b):
        raise ValueError(f"layer-set mismatch: {sorted(a)} vs {sorted(b)}")
    total = None
    for key in sorted(a):
        x, y = as_tensor(a[key]), as_tensor(b[key])
        if x.shape != y.shape:
            raise ValueError(f"layer {key}: shape mismatch {x.shape} vs {y.shape}")
        term = sumsq(x - y) / float(x.size)
        total = term if total is None else total + term
    return total


def style_loss(F_hat, F_style) -> Tensor:
    """Sum over layers of ||gram(F_hat) - gram(F_style)||_F^2.

    Spatial sizes may differ between the two sides; channel counts may not.
    """
    a, b = _as_layers(F_hat), _as_layers(F_style)
    if set(a) != set(b):
        raise ValueError(f"layer-set mismatch: {sorted(a)} vs {sorted(b)}")
    total = None
    for key in sorted(a):
        x, y = as_tensor(a[key]), as_tensor(b[key])
        if x.shape[-3] != y.shape[-3]:
            raise ValueError(f"layer {key}: channel-count mismatch {x.shape[-3]} vs {y.shape[-3]}")
        gx, gy = gram(x), gram(y)
        d = gx - gy
        n = d.size // (d.shape[-1] * d.shape[-2])
        term = sumsq(d) / float(n)
        total = term if total is None else total + term
    return total


def style_loss_from_grams(G_hat, G_style) -> Tensor:
    a, b = _as_layers(G_hat), _as_layers(G_style)
    total = None
    for key in sorted(a):
        term = sumsq(as_tensor(a[key]) - as_tensor(b[key]))
        total = term if total is None else total + term
    return total


def gram_loss(pairs: Sequence) -> Tensor:
    """1 - (1/L) sum_l mean(G_in - G_out) / max(G_in) over StyleLess layers.

    Each pair is (G_in, G_out) with shape (c,c) or (N,c,c); batched pairs are
    averaged over N. Layers (or samples) whose max(G_in) <= 1e-12 contribute 0.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("gram_loss needs at least one (G_in, G_out) pair")
    acc = None
    for g_in, g_out in pairs:
        g_in, g_out = as_tensor(g_in), as_tensor(g_out)
        if g_in.shape != g_out.shape:
            raise ValueError(f"Gram shape mismatch {g_in.shape} vs {g_out.shape}")
        *lead, c, _ = g_in.shape
        flat = (*lead, c * c)
        d = mean(reshape(g_in - g_out, flat), axis=-1)
        m = tmax(reshape(g_in, flat), axis=-1)
        live = m.data > EPS_MAX
        guard = Tensor(np.where(live, 0.0, 1.0).astype(m.dtype))
        ratio = (d / (m + guard)) * Tensor(live.astype(m.dtype))
        if lead:
            ratio = mean(ratio)
        acc = ratio if acc is None else acc + ratio
    return 1.0 - acc / float(len(pairs))


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop ``params`` from requiring gradients."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def style_transfer(x, x_style, net, steps: int = 200, step_size: float = 1.0, layers=None):
    """Gradient descent on the image: L = content(x_hat, x) + style(x_hat, x_style).

    ``net`` must provide ``features(x) -> list of feature maps`` and
    ``parameters()``. Returns (x_hat clipped to [0,1], list of losses).
    """
    x = np.asarray(getattr(x, "data", x))
    x_style = np.asarray(getattr(x_style, "data", x_style))
    pick = (lambda fs: fs) if layers is None else (lambda fs: [fs[i] for i in layers])
    with no_grad():
        target_c = [f.data for f in pick(net.features(Tensor(x)))]
        target_g = [gram(f).data for f in pick(net.features(Tensor(x_style)))]
    xh = x.copy()
    losses = []
    with frozen(net.parameters()):
        for step in range(steps + 1):
            xt = Tensor(xh, requires_grad=True)
            with Tape():
                feats = pick(net.features(xt))
                loss = content_loss(feats, [Tensor(t) for t in target_c]) + style_loss_from_grams(
                    [gram(f) for f in feats], [Tensor(g) for g in target_g]
                )
                val = loss.item()
                if not np.isfinite(val):
                    raise FloatingPointError(f"style_transfer: non-finite loss {val} at step {step}")
                losses.append(val)
                if step == steps:
                    break
                backward(loss)
            xh = xh - step_size * xt.grad
    return np.clip(xh, 0.0, 1.0).astype(x.dtype), losses
