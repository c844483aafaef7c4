"""Toy driving scenes and severity-graded corruptions.

Scenes are 3x64x64 images in [0, 1] with per-pixel labels
0 background, 1 road, 2 vehicle, 3 vulnerable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import stls

SIZE = 64
CLASSES = ("background", "road", "vehicle", "vulnerable")
GENERATOR = "toyscenes-v1"
CORRUPTIONS = ("haze", "rain", "gauss-noise", "gauss-blur", "contrast")
SPLIT_OFFSET = {"train": 0, "val": 1_000_000_000, "test": 2_000_000_000}
# object counts 0..3; zero is rare so every class shows up in nearly every scene
_COUNT_P = (0.02, 0.30, 0.38, 0.30)


@dataclass
class SegSample:
    image: np.ndarray
    labels: np.ndarray
    seed: int


def _value_noise(rng, cells: int, size: int = SIZE) -> np.ndarray:
    grid = rng.uniform(0, 1, (cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    f = f * f * (3 - 2 * f)
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def generate_scene(seed: int) -> SegSample:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] + 0.5
    img = np.empty((3, SIZE, SIZE))
    base = rng.uniform(0.25, 0.75, 3)
    for ch in range(3):
        img[ch] = base[ch] + 0.35 * (_value_noise(rng, 4) - 0.5) + 0.15 * (_value_noise(rng, 12) - 0.5)
    labels = np.zeros((SIZE, SIZE), np.uint8)

    # road: trapezoid from the bottom edge up to a horizon row
    top = rng.uniform(22, 34)
    bl, br = rng.uniform(-10, 12), rng.uniform(52, 74)
    cx, half = rng.uniform(24, 40), rng.uniform(3, 9)
    t = np.clip((yy - top) / (SIZE - top), 0, 1)
    left = cx - half + t * (bl - cx + half)
    right = cx + half + t * (br - cx - half)
    road = (yy >= top) & (xx >= left) & (xx <= right)
    grey = rng.uniform(0.25, 0.55)
    tint = rng.uniform(-0.04, 0.04, 3)
    tex = 0.08 * (_value_noise(rng, 16) - 0.5)
    for ch in range(3):
        img[ch][road] = (grey + tint[ch] + tex)[road]
    labels[road] = 1

    def edges(y):
        tt = np.clip((y - top) / (SIZE - top), 0, 1)
        return cx - half + tt * (bl - cx + half), cx + half + tt * (br - cx - half), tt

    for _ in range(rng.choice(4, p=_COUNT_P)):
        yb = rng.uniform(top + 6, SIZE - 1)
        lo, hi, tt = edges(yb)
        w = (6 + 12 * tt) * rng.uniform(0.8, 1.2)
        h = w * rng.uniform(0.5, 0.8)
        lo, hi = max(lo, 0), min(hi, SIZE)
        x0 = rng.uniform(lo, max(lo, hi - w))
        m = (xx >= x0) & (xx <= x0 + w) & (yy >= yb - h) & (yy <= yb)
        col = rng.uniform(0, 1, 3)
        shade = 1.0 - 0.5 * np.clip((yy - (yb - h)) / max(h, 1), 0, 1)
        for ch in range(3):
            img[ch][m] = (col[ch] * shade)[m]
        labels[m] = 2

    for _ in range(rng.choice(4, p=_COUNT_P)):
        yb = rng.uniform(top + 4, SIZE - 2)
        lo, hi, tt = edges(yb)
        edge = lo if rng.uniform() < 0.5 else hi
        x = float(np.clip(edge + rng.uniform(-4, 4), 3, SIZE - 3))
        ry = (2.0 + 4.0 * tt) * rng.uniform(0.8, 1.2)
        rx = ry * rng.uniform(0.4, 0.6)
        m = ((xx - x) / rx) ** 2 + ((yy - (yb - ry)) / ry) ** 2 <= 1
        col = rng.uniform(0, 1, 3)
        for ch in range(3):
            img[ch][m] = col[ch]
        labels[m] = 3

    return SegSample(np.clip(img, 0, 1).astype(np.float32), labels, int(seed))


# ---------------------------------------------------------------------------
# corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in [1, 5], got {self.severity}")

    @property
    def tag(self) -> str:
        return f"{self.kind}-{self.severity}"


def haze_alpha(severity: float, height: int = SIZE) -> np.ndarray:
    """Per-row blend weight toward white; row 0 (top) is the farthest."""
    if severity == 0:
        return np.zeros(height)
    depth = 1.0 - np.arange(height) / (height - 1)
    return 0.15 * severity + 0.1 * depth


MAX_RAIN_LINES = 100


def rain_layer(rng, n: int, shape) -> np.ndarray:
    """Coverage in [0, 1] of the first ``n`` anti-aliased streaks.

    Parameters for all MAX_RAIN_LINES streaks are always drawn, so for a fixed
    seed a lower severity renders a subset of a higher one.
    """
    h, w = shape
    cy = rng.uniform(0, h, MAX_RAIN_LINES)
    cx = rng.uniform(0, w, MAX_RAIN_LINES)
    ang = np.deg2rad(rng.uniform(70, 110, MAX_RAIN_LINES))
    length = rng.uniform(6, 14, MAX_RAIN_LINES)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cov = np.zeros(shape)
    for i in range(n):
        dx, dy = np.cos(ang[i]), np.sin(ang[i])
        px, py = xx - cx[i], yy - cy[i]
        along = np.clip(px * dx + py * dy, -length[i] / 2, length[i] / 2)
        dist = np.hypot(px - along * dx, py - along * dy)
        cov = np.maximum(cov, np.clip(1.0 - dist, 0, 1))
    return cov


def apply_corruption(image: np.ndarray, kind: str, severity: float, seed: int = 0) -> np.ndarray:
    """Raw operator; ``severity`` may be any value >= 0 (0 is the identity)."""
    rng = np.random.default_rng(seed)
    x = image.astype(np.float64)
    s = severity
    if kind == "haze":
        a = haze_alpha(s, x.shape[-2])[None, :, None]
        out = (1 - a) * x + a
    elif kind == "rain":
        n = 20 * int(round(s))
        if n == 0:
            out = x
        else:
            layer = rain_layer(rng, n, x.shape[-2:])
            out = gaussian_filter(x + 0.5 * layer[None], sigma=(0, 0.5, 0.5), mode="nearest")
    elif kind == "gauss-noise":
        out = x + 0.04 * s * rng.standard_normal(x.shape)
    elif kind == "gauss-blur":
        out = gaussian_filter(x, sigma=(0, 0.5 * s, 0.5 * s), mode="nearest") if s > 0 else x
    elif kind == "contrast":
        out = 0.5 + (x - 0.5) * (1 - 0.15 * s)
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(out, 0, 1).astype(image.dtype)


def corrupt(image, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt a (3,H,W) image; labels are never touched. Deterministic in spec.seed."""
    image = np.asarray(getattr(image, "data", image))
    return apply_corruption(image, spec.kind, spec.severity, spec.seed)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    seeds: np.ndarray  # scene seeds
    split: str = "train"
    corruption: CorruptionSpec | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def name(self) -> str:
        return f"{self.split}/" + (self.corruption.tag if self.corruption else "clean")


def scene_seeds(n: int, seed: int, split: str) -> np.ndarray:
    if split not in SPLIT_OFFSET:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= n <= 100_000:
        raise ValueError("n must be in [0, 100000]")
    return SPLIT_OFFSET[split] + seed * 100_000 + np.arange(n, dtype=np.int64)


def make_dataset(n: int, seed: int = 0, split: str = "train") -> Dataset:
    seeds = scene_seeds(n, seed, split)
    samples = [generate_scene(int(s)) for s in seeds]
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, SIZE, SIZE), np.float32)
    labels = np.stack([s.labels for s in samples]) if samples else np.zeros((0, SIZE, SIZE), np.uint8)
    return Dataset(images, labels, seeds, split)


def corrupt_dataset(ds: Dataset, kind: str, severity: int, seed: int = 0) -> Dataset:
    spec = CorruptionSpec(kind, severity, seed)
    imgs = np.empty_like(ds.images)
    for i, (img, sseed) in enumerate(zip(ds.images, ds.seeds)):
        sample_seed = int(np.random.SeedSequence([seed, int(sseed)]).generate_state(1)[0])
        imgs[i] = apply_corruption(img, kind, severity, sample_seed)
    return Dataset(imgs, ds.labels.copy(), ds.seeds.copy(), ds.split, spec)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "labels").mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(len(ds)):
        img_f, lab_f = f"images/{i:05d}.stls", f"labels/{i:05d}.stls"
        stls.save(path / img_f, ds.images[i])
        stls.save(path / lab_f, ds.labels[i])
        samples.append({"seed": int(ds.seeds[i]), "image": img_f, "labels": lab_f})
    man = {
        "generator": GENERATOR,
        "classes": list(CLASSES),
        "split": ds.split,
        "corruption": asdict(ds.corruption) if ds.corruption else None,
        "samples": samples,
    }
    (path / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    man = json.loads(mf.read_text())
    if man.get("generator") != GENERATOR:
        raise ValueError(f"unknown dataset generator {man.get('generator')!r}")
    samples = man["samples"]
    images = np.stack([stls.load(path / s["image"]) for s in samples]) if samples else np.zeros((0, 3, SIZE, SIZE), np.float32)
    labels = np.stack([stls.load(path / s["labels"]) for s in samples]) if samples else np.zeros((0, SIZE, SIZE), np.uint8)
    corr = CorruptionSpec(**man["corruption"]) if man.get("corruption") else None
    return Dataset(images, labels, np.array([s["seed"] for s in samples], np.int64), man["split"], corr)
