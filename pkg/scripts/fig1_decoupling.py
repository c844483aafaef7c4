"""Style/content decoupling in a trained toy network.

Compares content and style distances of (clean, corrupted) feature pairs with
(clean, other scene) and (clean, same scene) pairs, then runs a short style
transfer from a clean scene toward its hazy version.

    python3 scripts/fig1_decoupling.py --model runs/table1/seed1/baseline
"""

import argparse
from pathlib import Path

import numpy as np

from styleless.data import CORRUPTIONS, corrupt_dataset, make_dataset
from styleless.evalkit import decoupling_analysis
from styleless.model import ToySegNet, load_checkpoint
from styleless.style import style_transfer
from styleless.train import TrainConfig, train_stage1


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", default=None, help="stage-1 checkpoint (trains a small one if omitted)")
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--severity", type=int, default=3)
    ap.add_argument("--png", default="runs/fig1_transfer.png")
    a = ap.parse_args()
    if a.model:
        net, _ = load_checkpoint(a.model)
    else:
        net = train_stage1(ToySegNet(seed=0), TrainConfig(epochs=8), make_dataset(128, 0)).net

    stats = decoupling_analysis(net, n_pairs=a.pairs, severity=a.severity)
    m = stats.medians()
    print(f"median normalized content loss: corrupted {m['content_corrupt']:.3f}, other scene {m['content_cross']:.3f}")
    print(f"median style loss: corrupted {m['style_corrupt']:.3e}, identical {m['style_identical']:.1e}")
    for i, kind in enumerate(CORRUPTIONS):
        c = np.median(stats.content_corrupt[i :: len(CORRUPTIONS)])
        s = np.median(stats.style_corrupt[i :: len(CORRUPTIONS)])
        print(f"  {kind:12s} content {c:.3f}  style {s:.3e}")

    ds = make_dataset(1, 3, "val")
    hazy = corrupt_dataset(ds, "haze", a.severity).images[0]
    out, losses = style_transfer(ds.images[0], hazy, net, steps=200)
    print(f"style transfer loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    from PIL import Image
    strip = np.concatenate([ds.images[0], hazy, out], axis=2).transpose(1, 2, 0)
    Path(a.png).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((strip * 255).round().astype(np.uint8)).resize((strip.shape[1] * 3, strip.shape[0] * 3)).save(a.png)
    print(f"wrote {a.png} (clean | hazy | stylized)")


if __name__ == "__main__":
    main()
