"""Segmentation metrics, reports and the experiment driver."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import CLASSES, CORRUPTIONS, Dataset, corrupt_dataset, load_dataset, make_dataset
from .filters import FilterConfig, make_hook
from .layer import insert_styleless
from .model import DEFAULT_WIDTHS, ToySegNet, count_parameters, load_checkpoint, net_hash, read_manifest
from .train import TrainConfig, TrainResult, train_stage1, train_stage2

FOREGROUND = (1, 2, 3)


class ConfusionMatrix:
    """Dataset-level confusion counts; rows are labels, columns predictions."""

    def __init__(self, n_classes: int = len(CLASSES), ignore_index: int = 255):
        self.n = n_classes
        self.ignore = ignore_index
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def add(self, preds, labels) -> "ConfusionMatrix":
        preds, labels = np.asarray(preds), np.asarray(labels)
        if preds.shape != labels.shape:
            raise ValueError(f"shape mismatch: preds {preds.shape} vs labels {labels.shape}")
        keep = labels != self.ignore
        idx = labels[keep].astype(np.int64) * self.n + preds[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both labels and predictions."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(preds, labels, classes=FOREGROUND, n_classes: int = len(CLASSES)) -> tuple[dict, float]:
    """Per-class IoU over ``classes`` and their mean (absent classes skipped)."""
    cm = ConfusionMatrix(n_classes).add(preds, labels)
    return _summarize(cm, classes)


def _summarize(cm: ConfusionMatrix, classes) -> tuple[dict, float]:
    ious = cm.iou()
    per = {int(c): (None if np.isnan(ious[c]) else float(ious[c])) for c in classes}
    present = [v for v in per.values() if v is not None]
    return per, (float(np.mean(present)) if present else float("nan"))


@dataclass
class MetricsReport:
    iou: dict  # class name -> IoU or None
    miou: float  # mean over foreground classes, in [0, 1]
    dataset: str
    corruption: dict | None
    model_hash: str
    seed: int
    model: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    @property
    def miou_points(self) -> float:
        return 100.0 * self.miou


def evaluate(net, ds: Dataset, model_hash: str = "", seed: int = 0, hook=None, model: str = "",
             batch: int = 16) -> MetricsReport:
    t0 = time.perf_counter()
    cm = ConfusionMatrix()
    preds = net.predict(ds.images, batch=batch, hook=hook)
    cm.add(preds, ds.labels)
    all_iou, _ = _summarize(cm, range(len(CLASSES)))
    _, m = _summarize(cm, FOREGROUND)
    return MetricsReport(
        iou={CLASSES[c]: v for c, v in all_iou.items()},
        miou=m,
        dataset=ds.name,
        corruption=asdict(ds.corruption) if ds.corruption else None,
        model_hash=model_hash,
        seed=seed,
        model=model,
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# experiment driver

PROTOCOLS = ("baseline-vs-styleless", "filters-ablation", "capacity-ablation")
WEATHER = tuple(f"{k}-{s}" for k in ("haze", "rain") for s in (3, 4, 5))
SEVERE = tuple(f"{k}-5" for k in CORRUPTIONS)


@dataclass
class ExperimentConfig:
    n_train: int = 512
    n_test: int = 64
    n_val: int = 32
    epochs: int = 18
    stage2_epochs: int | None = None  # default: half of ``epochs``
    batch_size: int = 8
    alpha: float = 0.1
    styleless_lr_mult: float = 10.0
    test_seed: int = 0
    corruption_seed: int = 7
    kinds: tuple = CORRUPTIONS
    severities: tuple = (1, 2, 3, 4, 5)
    filter_p: tuple = (5.0, 10.0, 20.0)
    filter_tau: tuple = (2.0, 4.0, 8.0)
    filter_layers: tuple = (0,)
    filter_select: tuple = WEATHER  # val datasets used to pick each filter's config
    train_data: str | None = None  # optional dataset directory instead of generated scenes
    test_data: str | None = None
    grids: bool = True

    def __post_init__(self):
        for name in ("kinds", "severities", "filter_p", "filter_tau", "filter_layers", "filter_select"):
            setattr(self, name, tuple(getattr(self, name)))
        for p in (self.train_data, self.test_data):
            if p is not None and not (Path(p) / "manifest.json").is_file():
                raise FileNotFoundError(f"dataset {p} named in the experiment config does not exist")

    @property
    def epochs2(self) -> int:
        return max(1, self.epochs // 2) if self.stage2_epochs is None else self.stage2_epochs


@dataclass
class ExperimentResult:
    protocol: str
    seeds: list
    reports: list
    medians: dict  # model -> dataset -> median mIoU points
    out: Path | None = None
    filter_choice: dict = field(default_factory=dict)  # seed -> kind -> FilterConfig

    def select(self, model: str, dataset: str | None = None, seed: int | None = None) -> list:
        return [r for r in self.reports if r.model == model
                and (dataset is None or r.dataset == dataset) and (seed is None or r.seed == seed)]

    def miou(self, model: str, dataset: str, seed: int) -> float:
        (r,) = self.select(model, dataset, seed)
        return r.miou_points

    def seed_median(self, model: str, datasets) -> float:
        """Mean mIoU points over ``datasets`` for each seed, then the median over seeds."""
        per_seed = [np.mean([self.miou(model, d, s) for d in datasets]) for s in self.seeds]
        return float(np.median(per_seed))


def _test_name(tag: str) -> str:
    return f"test/{tag}"


def eval_suite(cfg: ExperimentConfig, split: str = "test", n: int | None = None) -> dict[str, Dataset]:
    """Clean set plus every kind x severity corruption of it, keyed by dataset name."""
    if split == "test" and cfg.test_data is not None:
        base = load_dataset(cfg.test_data)
    else:
        base = make_dataset(cfg.n_test if n is None else n, cfg.test_seed, split)
    out = {base.name: base}
    for kind, sev in itertools.product(cfg.kinds, cfg.severities):
        ds = corrupt_dataset(base, kind, sev, cfg.corruption_seed)
        out[ds.name] = ds
    return out


def matched_widths(target: int, base=DEFAULT_WIDTHS, max_extra: int = 8) -> tuple[int, ...]:
    """Widths >= ``base`` (the two middle blocks kept equal) whose backbone
    parameter count is closest to ``target``; ties go to the narrower net."""
    best = None
    for d0, d1, d3 in itertools.product(range(max_extra + 1), repeat=3):
        w = (base[0] + d0, base[1] + d1, base[2] + d1, base[3] + d3)
        n = count_parameters(ToySegNet(w))
        key = (abs(n - target), sum(w))
        if best is None or key < best[0]:
            best = (key, w)
    return best[1]


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path | None, log=print):
        self.cfg, self.out, self.log = cfg, out, log
        self._train_sets: dict[int, Dataset] = {}

    def train_set(self, seed: int) -> Dataset:
        if seed not in self._train_sets:
            c = self.cfg
            self._train_sets[seed] = load_dataset(c.train_data) if c.train_data else make_dataset(c.n_train, seed, "train")
        return self._train_sets[seed]

    def _data_tag(self, seed: int) -> str:
        c = self.cfg
        return c.train_data if c.train_data else f"toyscenes-v1:train:n{c.n_train}:seed{seed}"

    def train_cfg(self, seed: int, stage: int, epochs: int) -> TrainConfig:
        c = self.cfg
        return TrainConfig(stage=stage, epochs=epochs, batch_size=c.batch_size, alpha=c.alpha,
                           styleless_lr_mult=c.styleless_lr_mult, seed=seed, data=self._data_tag(seed))

    def _cached(self, name: str, seed: int, tcfg: TrainConfig):
        if self.out is None:
            return None
        path = self.out / f"seed{seed}" / name
        if (path / "manifest.json").is_file() and read_manifest(path).get("config_hash") == tcfg.digest():
            return path
        return None

    def _save(self, res: TrainResult, name: str, seed: int):
        if self.out is not None:
            return res.save(self.out / f"seed{seed}" / name)
        return None

    def baseline(self, seed: int) -> tuple[ToySegNet, object]:
        tcfg = self.train_cfg(seed, 1, self.cfg.epochs)
        path = self._cached("baseline", seed, tcfg)
        if path is not None:
            return load_checkpoint(path)[0], path
        t0 = time.perf_counter()
        res = train_stage1(ToySegNet(seed=seed), tcfg, self.train_set(seed))
        self.log(f"seed {seed}: baseline trained in {time.perf_counter() - t0:.0f}s")
        path = self._save(res, "baseline", seed)
        return res.net, (path if path is not None else res)

    def styleless(self, seed: int) -> ToySegNet:
        base_net, src = self.baseline(seed)
        tcfg = self.train_cfg(seed, 2, self.cfg.epochs2)
        path = self._cached("styleless", seed, tcfg)
        if path is not None:
            return load_checkpoint(path)[0]
        if isinstance(src, TrainResult):
            src = TrainResult(base_net.copy(), src.log, src.config, 1)
        t0 = time.perf_counter()
        res = train_stage2(src, tcfg, self.train_set(seed))
        self.log(f"seed {seed}: styleless fine-tuned in {time.perf_counter() - t0:.0f}s")
        self._save(res, "styleless", seed)
        return res.net

    def widened(self, seed: int) -> ToySegNet:
        target = count_parameters(insert_styleless(ToySegNet()), "all")
        widths = matched_widths(target)
        # same number of optimizer steps as stage 1 + stage 2
        tcfg = self.train_cfg(seed, 1, self.cfg.epochs + self.cfg.epochs2)
        path = self._cached("widened", seed, tcfg)
        if path is not None:
            return load_checkpoint(path)[0]
        t0 = time.perf_counter()
        res = train_stage1(ToySegNet(widths, seed=seed), tcfg, self.train_set(seed))
        self.log(f"seed {seed}: widened {widths} trained in {time.perf_counter() - t0:.0f}s")
        self._save(res, "widened", seed)
        return res.net


def _evaluate_all(net, model: str, suite: dict, seed: int, hook_factory=None) -> list[MetricsReport]:
    h = net_hash(net)
    return [evaluate(net, ds, model_hash=h, seed=seed, model=model,
                     hook=hook_factory() if hook_factory else None) for ds in suite.values()]


def best_filter(net, kind: str, cfg: ExperimentConfig, val: dict, seed: int = 0) -> FilterConfig:
    """Grid-search one filter's (P, tau) on the val datasets named in cfg.filter_select."""
    if kind == "weighting":
        grid = [FilterConfig("weighting", seed=seed)]
    elif kind == "remove":
        grid = [FilterConfig("remove", p=p, seed=seed) for p in cfg.filter_p]
    else:
        grid = [FilterConfig("noise", p=p, tau=t, seed=seed) for p in cfg.filter_p for t in cfg.filter_tau]
    if len(grid) == 1:
        return grid[0]
    names = [f"val/{tag}" for tag in cfg.filter_select]
    scores = []
    for fc in grid:
        scores.append(np.mean([evaluate(net, val[n], hook=make_hook(fc, cfg.filter_layers)).miou for n in names]))
    return grid[int(np.argmax(scores))]  # first best on ties


def run_experiment(protocol: str, seeds, config: ExperimentConfig | None = None, out=None,
                   log=print) -> ExperimentResult:
    """Train, evaluate and aggregate one protocol over ``seeds``.

    With ``out`` set, checkpoints, per-report JSON, a summary, a CSV table
    (rows = models, columns = datasets) and PNG prediction grids are written
    there; existing checkpoints with a matching config hash are reused.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    cfg = config or ExperimentConfig()
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    out = Path(out) if out is not None else None
    runner = _Runner(cfg, out, log)
    suite = eval_suite(cfg)
    val = eval_suite(replace(cfg, kinds=tuple(sorted({t.rsplit("-", 1)[0] for t in cfg.filter_select})),
                             test_data=None), split="val", n=cfg.n_val) if protocol == "filters-ablation" else None
    reports: list[MetricsReport] = []
    choices: dict = {}
    grids: dict = {}
    for seed in seeds:
        base_net, _ = runner.baseline(seed)
        nets = {"baseline": base_net}
        reports += _evaluate_all(base_net, "baseline", suite, seed)
        if protocol in ("baseline-vs-styleless", "capacity-ablation"):
            nets["styleless"] = runner.styleless(seed)
            reports += _evaluate_all(nets["styleless"], "styleless", suite, seed)
        if protocol == "capacity-ablation":
            nets["widened"] = runner.widened(seed)
            reports += _evaluate_all(nets["widened"], "widened", suite, seed)
        hooks = {}
        if protocol == "filters-ablation":
            choices[seed] = {}
            for kind in ("remove", "weighting", "noise"):
                fc = best_filter(base_net, kind, cfg, val, seed)
                choices[seed][kind] = fc
                hooks[f"filter-{kind}"] = (base_net, fc)
                reports += _evaluate_all(base_net, f"filter-{kind}", suite, seed,
                                         hook_factory=lambda fc=fc: make_hook(fc, cfg.filter_layers))
                log(f"seed {seed}: filter {kind} uses " + ("no parameters" if kind == "weighting" else
                    f"p={fc.p}" + (f" tau={fc.tau}" if kind == "noise" else "")))
        grids[seed] = (nets, hooks)
    result = ExperimentResult(protocol, seeds, reports, _medians(reports), out, choices)
    if out is not None:
        _write_bundle(result, cfg, suite, grids)
    return result


def _medians(reports: list[MetricsReport]) -> dict:
    acc: dict = {}
    for r in reports:
        acc.setdefault(r.model, {}).setdefault(r.dataset, []).append(r.miou_points)
    return {m: {d: float(np.median(v)) for d, v in ds.items()} for m, ds in acc.items()}


def _write_bundle(result: ExperimentResult, cfg: ExperimentConfig, suite: dict, grids: dict) -> None:
    out = result.out
    rdir = out / "reports" / result.protocol
    for r in result.reports:
        f = rdir / f"seed{r.seed}" / f"{r.model}__{r.dataset.replace('/', '_')}.json"
        f.parent.mkdir(parents=True, exist_ok=True)
        f.write_text(r.to_json() + "\n")
    summary = {
        "protocol": result.protocol,
        "seeds": result.seeds,
        "config": asdict(cfg),
        "median_miou": result.medians,
        "filters": {str(s): {k: asdict(v) for k, v in c.items()} for s, c in result.filter_choice.items()},
    }
    (out / f"{result.protocol}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_table(result.medians, list(suite), out / f"{result.protocol}_table.csv")
    if cfg.grids:
        for seed, (nets, hooks) in grids.items():
            save_prediction_grid(out / "grids" / f"{result.protocol}_seed{seed}.png", suite, nets, hooks,
                                 filter_layers=cfg.filter_layers)


def write_table(medians: dict, datasets: list, path) -> Path:
    """Results CSV: one row per model, one column per dataset (median mIoU points)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model"] + list(datasets))
        for model, row in medians.items():
            w.writerow([model] + [f"{row[d]:.2f}" if d in row else "" for d in datasets])
    return path


PALETTE = np.array([[40, 40, 40], [128, 64, 128], [0, 0, 230], [220, 20, 60]], np.uint8)


def save_prediction_grid(path, suite: dict, nets: dict, hooks: dict | None = None, sample: int = 0,
                         rows=("clean", "haze-4", "rain-4", "gauss-noise-4", "contrast-4"),
                         filter_layers=(0,), scale: int = 2) -> Path | None:
    """PNG grid: one row per dataset; columns are input, ground truth, then each model."""
    from PIL import Image

    hooks = hooks or {}
    names = [n for n in (_test_name(r) for r in rows) if n in suite]
    if not names:
        return None
    tiles = []
    for n in names:
        ds = suite[n]
        img = ds.images[sample : sample + 1]
        row = [np.clip(img[0].transpose(1, 2, 0) * 255, 0, 255).astype(np.uint8), PALETTE[ds.labels[sample]]]
        for net in nets.values():
            row.append(PALETTE[net.predict(img)[0]])
        for net, fc in hooks.values():
            row.append(PALETTE[net.predict(img, hook=make_hook(fc, filter_layers))[0]])
        tiles.append(np.concatenate(row, axis=1))
    grid = np.concatenate(tiles, axis=0).repeat(scale, 0).repeat(scale, 1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


# ---------------------------------------------------------------------------
# style / content decoupling


@dataclass
class DecouplingStats:
    content_corrupt: np.ndarray  # normalized content loss, (clean, corrupted) pairs
    content_cross: np.ndarray  # normalized content loss, (clean, other clean scene) pairs
    style_corrupt: np.ndarray  # style loss, (clean, corrupted) pairs
    style_identical: np.ndarray  # style loss, (clean, same clean) pairs

    def medians(self) -> dict:
        return {k: float(np.median(v)) for k, v in asdict(self).items()}


def normalized_content_loss(fa: list, fb: list) -> float:
    """content_loss divided by the pair's mean feature energy, so it is scale free."""
    num = sum(float(((a - b) ** 2).sum()) / a.size for a, b in zip(fa, fb))
    den = sum(0.5 * float((a**2).sum() + (b**2).sum()) / a.size for a, b in zip(fa, fb))
    return num / den if den > 0 else 0.0


def decoupling_analysis(net, n_pairs: int = 100, severity: int = 3, kinds=CORRUPTIONS, seed: int = 0,
                        split: str = "val") -> DecouplingStats:
    """Content and style distances between feature maps of image pairs.

    Corruption pairs cycle through ``kinds``; cross-scene pairs match scene i
    with scene i+1.
    """
    from .style import style_loss
    from .tensor import no_grad

    ds = make_dataset(n_pairs + 1, seed, split)
    out = {k: [] for k in ("content_corrupt", "content_cross", "style_corrupt", "style_identical")}
    with no_grad():
        feats = [[f.data for f in net.features(ds.images[i : i + 1])] for i in range(n_pairs + 1)]
        for i in range(n_pairs):
            kind = kinds[i % len(kinds)]
            sub = Dataset(ds.images[i : i + 1], ds.labels[i : i + 1], ds.seeds[i : i + 1], split)
            corr = corrupt_dataset(sub, kind, severity, seed)
            fc = [f.data for f in net.features(corr.images)]
            fa, fb = feats[i], feats[i + 1]
            out["content_corrupt"].append(normalized_content_loss(fa, fc))
            out["content_cross"].append(normalized_content_loss(fa, fb))
            out["style_corrupt"].append(style_loss(fa, fc).item())
            out["style_identical"].append(style_loss(fa, fa).item())
    return DecouplingStats(**{k: np.array(v) for k, v in out.items()})
