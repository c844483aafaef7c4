"""Command-line entry point: ``styleless <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .evalkit import PROTOCOLS, ExperimentConfig, evaluate, run_experiment
from .filters import KINDS, FilterConfig, make_hook
from .model import CheckpointError, ToySegNet, checkpoint_hash, load_checkpoint
from .nn import SgdConfig
from .style import gram
from .tensor import no_grad
from .train import TrainConfig, TrainingError, train_stage1, train_stage2


def _csv_ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_gen_data(a) -> int:
    ds = D.make_dataset(a.n, a.seed, a.split)
    D.save_dataset(ds, a.out)
    print(f"wrote {len(ds)} {a.split} scenes to {a.out}")
    return 0


def cmd_corrupt(a) -> int:
    ds = D.load_dataset(a.inp)
    if ds.corruption is not None:
        raise ValueError(f"{a.inp} is already corrupted ({ds.corruption.tag})")
    out = D.corrupt_dataset(ds, a.kind, a.severity, a.seed)
    D.save_dataset(out, a.out)
    print(f"wrote {out.name} ({len(out)} scenes) to {a.out}")
    return 0


def _sgd(a) -> SgdConfig:
    return SgdConfig(lr=a.lr)


def cmd_train(a) -> int:
    cfg = TrainConfig(stage=1, epochs=a.epochs, batch_size=a.batch_size, sgd=_sgd(a), seed=a.seed,
                      data=str(a.data))
    res = train_stage1(ToySegNet(seed=a.seed), cfg, a.data)
    res.save(a.out)
    print(f"stage 1: final L_task {res.log.final['L_task']:.4f} in {res.log.wall_clock:.0f}s -> {a.out}")
    return 0


def cmd_finetune(a) -> int:
    epochs = a.epochs
    if epochs is None:
        prev = Path(a.model) / "config.json"
        epochs = max(1, json.loads(prev.read_text())["epochs"] // 2) if prev.is_file() else 10
    cfg = TrainConfig(stage=2, epochs=epochs, batch_size=a.batch_size, sgd=_sgd(a), alpha=a.alpha,
                      styleless_lr_mult=a.sl_lr_mult, seed=a.seed, data=str(a.data))
    res = train_stage2(a.model, cfg, a.data)
    res.save(a.out)
    f = res.log.final
    print(f"stage 2: final L_task {f['L_task']:.4f}, L_Gram {f['L_gram']:.4f} in {res.log.wall_clock:.0f}s -> {a.out}")
    return 0


def _report(a, hook=None, model=""):
    net, man = load_checkpoint(a.model)
    ds = D.load_dataset(a.data)
    rep = evaluate(net, ds, model_hash=checkpoint_hash(a.model), seed=a.seed, hook=hook,
                   model=model or f"stage{man.get('stage')}")
    return rep


def cmd_eval(a) -> int:
    rep = _report(a)
    _write_json(rep.to_dict(), a.report)
    print(f"{rep.dataset}: mIoU {rep.miou_points:.2f}", file=sys.stderr)
    return 0


def cmd_filter_apply(a) -> int:
    fc = FilterConfig(a.filter, p=a.p, tau=a.tau, seed=a.seed)
    rep = _report(a, hook=make_hook(fc, _csv_ints(a.layers)), model=f"filter-{a.filter}")
    d = rep.to_dict()
    d["filter"] = {"kind": fc.kind, "p": fc.p, "tau": fc.tau, "seed": fc.seed, "layers": _csv_ints(a.layers)}
    _write_json(d, a.report)
    print(f"{rep.dataset} with {a.filter}: mIoU {rep.miou_points:.2f}", file=sys.stderr)
    return 0


def gram_summary(G: np.ndarray, top_k: int = 5) -> dict:
    flat = G.reshape(-1)
    c = G.shape[0]
    order = np.lexsort((np.arange(flat.size), -flat))[:top_k]
    return {
        "channels": c,
        "min": float(G.min()),
        "max": float(G.max()),
        "mean": float(G.mean()),
        "diagonal": [float(v) for v in np.diag(G)],
        "top_k": [{"row": int(i // c), "col": int(i % c), "value": float(flat[i])} for i in order],
    }


def cmd_gram_analyze(a) -> int:
    net, _ = load_checkpoint(a.model)
    ds = D.load_dataset(a.data)
    images = ds.images[: a.n] if a.n else ds.images
    with no_grad():
        feats = net.features(images)
    layers = {f"block{i + 1}": gram_summary(gram(f).data.astype(np.float64).mean(axis=0), a.top_k)
              for i, f in enumerate(feats)}
    _write_json({"model": str(a.model), "dataset": ds.name, "n_images": int(len(images)), "layers": layers}, a.out)
    return 0


def cmd_experiment(a) -> int:
    cfg = ExperimentConfig(n_train=a.n_train, n_test=a.n_test, epochs=a.epochs,
                           train_data=a.train_data, test_data=a.test_data)
    res = run_experiment(a.protocol, _csv_ints(a.seeds), cfg, out=a.out)
    for model, row in res.medians.items():
        cells = ", ".join(f"{d.split('/')[-1]} {v:.1f}" for d, v in row.items())
        print(f"{model}: {cells}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styleless", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a toy-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=sorted(D.SPLIT_OFFSET), default="train")
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=D.CORRUPTIONS, required=True)
    g.add_argument("--severity", type=int, choices=range(1, 6), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_corrupt)

    for name, fn in (("train", cmd_train), ("finetune", cmd_finetune)):
        g = sub.add_parser(name, help="stage-1 training" if name == "train" else "stage-2 StyleLess fine-tuning")
        if name == "finetune":
            g.add_argument("--model", required=True, help="stage-1 checkpoint")
            g.add_argument("--alpha", type=float, default=0.1)
            g.add_argument("--sl-lr-mult", type=float, default=10.0)
            g.add_argument("--epochs", type=int, default=None, help="default: half the stage-1 epochs")
        else:
            g.add_argument("--epochs", type=int, default=20)
        g.add_argument("--data", required=True)
        g.add_argument("--seed", type=int, default=0)
        g.add_argument("--batch-size", type=int, default=8)
        g.add_argument("--lr", type=float, default=0.01)
        g.add_argument("--out", required=True)
        g.set_defaults(fn=fn)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--report", default="-")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("filter-apply", help="evaluate with a style-perturbation filter")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--filter", choices=KINDS, required=True)
    g.add_argument("--p", type=float, default=10.0)
    g.add_argument("--tau", type=float, default=4.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layers", default="0,1,2,3", help="comma-separated tap indices")
    g.add_argument("--report", default="-")
    g.set_defaults(fn=cmd_filter_apply)

    g = sub.add_parser("gram-analyze", help="per-layer Gram statistics as JSON")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--n", type=int, default=8, help="images to average over (0 = all)")
    g.add_argument("--top-k", type=int, default=5)
    g.add_argument("--out", default="-")
    g.set_defaults(fn=cmd_gram_analyze)

    g = sub.add_parser("experiment", help="run an experiment protocol")
    g.add_argument("--protocol", choices=PROTOCOLS, required=True)
    g.add_argument("--seeds", default="1,2,3")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=ExperimentConfig.n_train)
    g.add_argument("--n-test", type=int, default=ExperimentConfig.n_test)
    g.add_argument("--epochs", type=int, default=ExperimentConfig.epochs)
    g.add_argument("--train-data", default=None)
    g.add_argument("--test-data", default=None)
    g.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CheckpointError, TrainingError, ValueError, FileNotFoundError) as e:
        print(f"styleless {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
