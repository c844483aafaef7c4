"""Training-free style-perturbation filters on (c, h, w) feature maps.

All three filters work on plain numpy arrays and return a new array of the
same shape and dtype. :func:`make_hook` adapts them to the network's tap hook.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import Tensor

KINDS = ("remove", "weighting", "noise")


@dataclass(frozen=True)
class FilterConfig:
    kind: str
    p: float = 10.0
    tau: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if not 0 <= self.p <= 100:
            raise ValueError("P must be in [0, 100]")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def gram_np(F: np.ndarray) -> np.ndarray:
    c, h, w = F.shape
    m = F.reshape(c, h * w).astype(np.float64)
    return m @ m.T / (h * w * c)


def select_phi(G: np.ndarray, p: float) -> frozenset[int]:
    """Channels touched by the top-P% Gram entries (ties broken by (row, col))."""
    G = np.asarray(G)
    c = G.shape[0]
    k = math.ceil(Fraction(p) * c * c / 100)  # exact, so P=10 on c=10 gives 10
    if k <= 0:
        return frozenset()
    order = np.lexsort((np.arange(c * c), -G.reshape(-1)))[:k]
    rows, cols = np.divmod(order, c)
    return frozenset(int(i) for i in np.union1d(rows, cols))


def gram_remove(F: np.ndarray, p: float) -> np.ndarray:
    out = np.array(F, copy=True)
    phi = select_phi(gram_np(out), p)
    if phi:
        out[sorted(phi)] = 0
    return out


def gram_weighting(F: np.ndarray) -> np.ndarray:
    """Scale channel i by 1 - diag(G)_i / max(diag(G))."""
    F = np.asarray(F)
    d = np.diag(gram_np(F))
    top = d.max()
    if top <= 1e-12:
        return F.copy()
    w = 1.0 - d / top
    return (F * w[:, None, None]).astype(F.dtype)


def gram_noise(F: np.ndarray, p: float, tau: float, seed: int) -> np.ndarray:
    """Add eps @ G to the phi channels, eps[:, j] ~ N(0, sigma_j^2 / tau)."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    F = np.asarray(F)
    c, h, w = F.shape
    G = gram_np(F)
    phi = select_phi(G, p)
    out = F.copy()
    if not phi:
        return out
    m = F.reshape(c, h * w).astype(np.float64)
    sigma = m.std(axis=1)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((h * w, c)) * (sigma / np.sqrt(tau))
    delta = (eps @ G).T.reshape(c, h, w)
    idx = sorted(phi)
    out[idx] = (F[idx] + delta[idx]).astype(F.dtype)
    return out


def apply_filter(F: np.ndarray, cfg: FilterConfig, seed: int | None = None) -> np.ndarray:
    if cfg.kind == "remove":
        return gram_remove(F, cfg.p)
    if cfg.kind == "weighting":
        return gram_weighting(F)
    return gram_noise(F, cfg.p, cfg.tau, cfg.seed if seed is None else seed)


def make_hook(cfg: FilterConfig, layers=(0, 1, 2, 3)):
    """Tap hook applying ``cfg`` per sample at the given tap indices.

    Noise draws are seeded from (cfg.seed, tap, running sample count), so a
    fixed evaluation order gives identical outputs.
    """
    layers = frozenset(layers)
    counter = {}

    def hook(tap: int, feats: Tensor) -> Tensor:
        if tap not in layers:
            return feats
        x = feats.data
        single = x.ndim == 3
        batch = x[None] if single else x
        out = np.empty_like(batch)
        for n in range(batch.shape[0]):
            k = counter.get(tap, 0)
            counter[tap] = k + 1
            seed = int(np.random.SeedSequence([cfg.seed, tap, k]).generate_state(1)[0])
            out[n] = apply_filter(batch[n], cfg, seed)
        return Tensor(out[0] if single else out)

    return hook
