"""toyseg-v1: a small residual encoder with a bilinear decoder, plus checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import stls
from .layer import StyleLessLayer
from .nn import ConvLayer, Parameter, ResidualBlock, init_parameters
from .style import gram
from .tensor import ShapeError, Tensor, matmul, relu

ARCH_ID = "toyseg-v1"
DEFAULT_WIDTHS = (16, 32, 32, 64)
DOWNSAMPLE_AFTER = (0, 2)
N_CLASSES = 4


class CheckpointError(RuntimeError):
    pass


@lru_cache(maxsize=32)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel-centre bilinear weights, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    h, w = x.shape[-2:]
    uh = Tensor(_interp_matrix(h * factor, h).astype(x.dtype))
    uwt = Tensor(_interp_matrix(w * factor, w).T.astype(x.dtype))
    return matmul(matmul(uh, x), uwt)


@dataclass
class ForwardOut:
    logits: Tensor
    features: list = field(default_factory=list)
    gram_pairs: list = field(default_factory=list)


class ToySegNet:
    """stem -> 4 residual blocks (taps after each) -> 1x1 head -> 4x bilinear upsample.

    Stride-2 3x3 convs after blocks 1 and 3 halve the resolution and change
    width; a 1x1 conv bridges any other width change.
    """

    arch = ARCH_ID

    def __init__(self, widths=DEFAULT_WIDTHS, n_classes: int = N_CLASSES, seed: int = 0,
                 dtype=np.float32):
        widths = tuple(int(w) for w in widths)
        if len(widths) != 4:
            raise ValueError("toyseg-v1 has exactly 4 residual blocks")
        self.widths, self.n_classes, self.seed = widths, n_classes, seed
        self.dtype = np.dtype(dtype)
        self.stem = ConvLayer(3, widths[0], 3, name="stem", dtype=dtype)
        self.blocks = [ResidualBlock(w, name=f"block{i + 1}", dtype=dtype) for i, w in enumerate(widths)]
        self.transitions: list[ConvLayer | None] = []
        for i in range(3):
            if i in DOWNSAMPLE_AFTER:
                t = ConvLayer(widths[i], widths[i + 1], 3, stride=2, name=f"down{i + 1}", dtype=dtype)
            elif widths[i] != widths[i + 1]:
                t = ConvLayer(widths[i], widths[i + 1], 1, name=f"proj{i + 1}", dtype=dtype)
            else:
                t = None
            self.transitions.append(t)
        self.head = ConvLayer(widths[-1], n_classes, 1, name="head", dtype=dtype)
        self.styleless: list[StyleLessLayer] = []
        for j, layer in enumerate(self.backbone_layers()):
            init_parameters(layer, seed * 1000 + j)

    def backbone_layers(self) -> list[ConvLayer]:
        out = [self.stem]
        for i, b in enumerate(self.blocks):
            out += b.layers()
            if i < 3 and self.transitions[i] is not None:
                out.append(self.transitions[i])
        out.append(self.head)
        return out

    def layers(self) -> list[ConvLayer]:
        out = self.backbone_layers()
        for s in self.styleless:
            out += s.layers()
        return out

    def parameters(self, group: str = "all") -> list[Parameter]:
        ps = [p for layer in self.layers() for p in layer.parameters()]
        if group == "all":
            return ps
        if group not in ("backbone", "styleless"):
            raise ValueError(f"unknown parameter group {group!r}")
        return [p for p in ps if p.group == group]

    def copy(self) -> "ToySegNet":
        return copy.deepcopy(self)

    @property
    def insertion_map(self) -> dict[str, str]:
        return {f"block{i + 1}": s.name for i, s in enumerate(self.styleless)}

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim not in (3, 4) or x.shape[-3] != 3 or x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"expected 3xHxW input with H, W divisible by 4, got {x.shape}")
        return x

    def forward(self, x, taps: bool = False, hook=None, grams: bool = False) -> ForwardOut:
        """Run the network.

        ``hook(tap_index, features) -> features`` rewrites the feature map at a
        tap before it continues (used for the inference-time filters).
        ``grams`` collects (G_in, G_out) for every StyleLess layer.
        """
        x = self._check_input(x)
        h = relu(self.stem(x))
        feats, pairs = [], []
        for i, block in enumerate(self.blocks):
            h = block(h)
            if hook is not None:
                h = hook(i, h)
            if taps:
                feats.append(h)
            if self.styleless:
                h_out = self.styleless[i](h)
                if grams:
                    pairs.append((gram(h), gram(h_out)))
                h = h_out
            if i < 3 and self.transitions[i] is not None:
                h = self.transitions[i](h)
                if i in DOWNSAMPLE_AFTER:
                    h = relu(h)
        # the 1x1 head commutes with bilinear upsampling (weights sum to 1), so
        # it runs at low resolution
        logits = upsample_bilinear(self.head(relu(h)), 4)
        return ForwardOut(logits, feats, pairs)

    def __call__(self, x) -> Tensor:
        return self.forward(x).logits

    def features(self, x) -> list[Tensor]:
        return self.forward(x, taps=True).features

    def predict(self, images: np.ndarray, batch: int = 16, hook=None) -> np.ndarray:
        from .tensor import no_grad

        preds = []
        with no_grad():
            for s in range(0, len(images), batch):
                logits = self.forward(images[s : s + batch], hook=hook).logits.data
                preds.append(np.argmax(logits, axis=1).astype(np.uint8))
        return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[2:], np.uint8)


def count_parameters(net: ToySegNet, group: str = "all") -> int:
    return int(sum(p.size for p in net.parameters(group)))


# ---------------------------------------------------------------------------
# checkpoints


def _manifest(net: ToySegNet, meta: dict) -> dict:
    params = []
    for p in net.parameters():
        params.append({
            "name": p.name,
            "shape": list(p.shape),
            "dtype": str(p.dtype),
            "group": p.group,
            "file": f"params/{p.name}.stls",
        })
    return {
        "arch": net.arch,
        "widths": list(net.widths),
        "n_classes": net.n_classes,
        "dtype": str(net.dtype),
        "init_seed": net.seed,
        "layers": [{"name": layer.name, "kernel": list(layer.kernel.shape), "stride": layer.stride}
                   for layer in net.layers()],
        "parameters": params,
        "insertion_map": net.insertion_map,
        "styleless_bottlenecks": [s.bottleneck for s in net.styleless],
        "stage": meta.get("stage", 1),
        "seed": meta.get("seed", net.seed),
        "config_hash": meta.get("config_hash", ""),
    }


def save_checkpoint(net: ToySegNet, path, **meta) -> Path:
    """Write manifest.json plus one STLS1 file per parameter tensor."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    man = _manifest(net, meta)
    for p, entry in zip(net.parameters(), man["parameters"]):
        stls.save(path / entry["file"], p.data)
    (path / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    f = Path(path) / "manifest.json"
    if not f.is_file():
        raise CheckpointError(f"no manifest.json in {path}")
    try:
        return json.loads(f.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}: {e}") from None


def load_checkpoint(path) -> tuple[ToySegNet, dict]:
    path = Path(path)
    man = read_manifest(path)
    if man.get("arch") != ARCH_ID:
        raise CheckpointError(f"architecture {man.get('arch')!r} is not {ARCH_ID!r}")
    net = ToySegNet(man["widths"], man["n_classes"], seed=man["init_seed"], dtype=man["dtype"])
    if man["insertion_map"]:
        bns = man.get("styleless_bottlenecks") or [None] * 4
        net.styleless = [
            StyleLessLayer(c, bottleneck=bn, name=f"styleless{i + 1}", dtype=net.dtype)
            for i, (c, bn) in enumerate(zip(net.widths, bns))
        ]
    by_name = {p.name: p for p in net.parameters()}
    if set(by_name) != {e["name"] for e in man["parameters"]}:
        raise CheckpointError("parameter list does not match the architecture")
    for e in man["parameters"]:
        try:
            arr = stls.load(path / e["file"])
        except (OSError, stls.FormatError) as err:
            raise CheckpointError(f"cannot read {e['file']}: {err}") from None
        p = by_name[e["name"]]
        if arr.shape != p.shape or str(arr.dtype) != e["dtype"]:
            raise CheckpointError(f"{e['name']}: stored {arr.shape} does not match {p.shape}")
        p.data = arr
    return net, man


def checkpoint_hash(path) -> str:
    path = Path(path)
    man = read_manifest(path)
    h = hashlib.sha256((path / "manifest.json").read_bytes())
    for e in man["parameters"]:
        h.update((path / e["file"]).read_bytes())
    return h.hexdigest()


def net_hash(net: ToySegNet) -> str:
    h = hashlib.sha256(json.dumps(_manifest(net, {}), sort_keys=True).encode())
    for p in net.parameters():
        h.update(stls.encode(p.data))
    return h.hexdigest()
