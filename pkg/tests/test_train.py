import numpy as np
import pytest

from styleless.data import Dataset, make_dataset
from styleless.layer import insert_styleless
from styleless.model import ToySegNet, checkpoint_hash, save_checkpoint
from styleless.nn import lr_at
from styleless.tensor import no_grad, softmax_cross_entropy
from styleless.train import TrainConfig, TrainingError, TrainLog, _fit, train_stage1, train_stage2


@pytest.fixture(scope="module")
def tiny():
    return make_dataset(16, seed=3)


@pytest.fixture(scope="module")
def stage1(tiny):
    return train_stage1(ToySegNet(seed=1), TrainConfig(epochs=2, seed=1), tiny)


def _full_loss(net, ds):
    with no_grad():
        return softmax_cross_entropy(net(ds.images), ds.labels).item()


def test_one_epoch_reduces_task_loss(tiny):
    net = ToySegNet(seed=0)
    before = _full_loss(net, tiny)
    train_stage1(net, TrainConfig(epochs=1, seed=0), tiny)
    assert _full_loss(net, tiny) < before


def test_schedule_ends_at_zero(stage1):
    lrs = stage1.log.column("lr")
    assert np.all(np.diff(lrs) < 0)
    total = stage1.log.final["steps"]
    assert lr_at(_sgd_for(stage1, total), total) == 0.0


def _sgd_for(res, total):
    from dataclasses import replace
    return replace(res.config.sgd, total_steps=total)


def test_same_seed_same_checkpoint(tiny, tmp_path):
    paths = []
    for k in range(2):
        res = train_stage1(ToySegNet(seed=5), TrainConfig(epochs=1, seed=5), tiny)
        paths.append(res.save(tmp_path / f"run{k}"))
    assert checkpoint_hash(paths[0]) == checkpoint_hash(paths[1])


def test_stage2_gram_loss_starts_at_one(stage1, tiny):
    res = train_stage2(stage1, TrainConfig(epochs=2, seed=1), tiny)
    assert res.log.records[0]["L_gram"] == 1.0
    total = res.log.column("L_task") + 0.1 * res.log.column("L_gram")
    np.testing.assert_allclose(res.log.column("L_total"), total, rtol=0, atol=1e-6)
    assert {p.group for p in res.net.parameters()} == {"backbone", "styleless"}
    # the stage-1 network itself is untouched
    assert not stage1.net.styleless


def test_alpha_zero_is_plain_finetuning(stage1, tiny):
    cfg = TrainConfig(stage=2, epochs=1, seed=1, alpha=0.0)
    with_gram = train_stage2(stage1, cfg, tiny)
    plain = insert_styleless(stage1.net, seed=1)
    log = _fit(plain, tiny, cfg, 2, use_gram=False)
    np.testing.assert_allclose(with_gram.log.column("L_task"), log.column("L_task"), rtol=1e-6)


def test_stage2_requires_stage1(tiny, tmp_path, stage1):
    with pytest.raises(TrainingError, match="from scratch"):
        train_stage2(ToySegNet(), TrainConfig(stage=2), tiny)
    with pytest.raises(Exception):
        train_stage2(tmp_path / "missing", TrainConfig(stage=2), tiny)
    sl = save_checkpoint(insert_styleless(stage1.net), tmp_path / "sl", stage=2)
    with pytest.raises(TrainingError, match="already"):
        train_stage2(sl, TrainConfig(stage=2), tiny)
    with pytest.raises(TrainingError):
        train_stage1(insert_styleless(ToySegNet()), TrainConfig(), tiny)


def test_stage2_from_checkpoint_path(stage1, tiny, tmp_path):
    path = stage1.save(tmp_path / "s1")
    a = train_stage2(path, TrainConfig(epochs=1, seed=2), tiny)
    b = train_stage2(stage1, TrainConfig(epochs=1, seed=2), tiny)
    assert a.log.column("L_total").tobytes() == b.log.column("L_total").tobytes()


def test_non_finite_loss_aborts(tiny):
    bad = Dataset(tiny.images.copy(), tiny.labels, tiny.seeds)
    bad.images[:] = np.nan
    with pytest.raises(TrainingError, match="step 0") as info:
        train_stage1(ToySegNet(), TrainConfig(epochs=1), bad)
    assert info.value.step == 0


def test_config_validation_and_log_order():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(stage=3)
    assert TrainConfig(seed=1).digest() != TrainConfig(seed=2).digest()
    log = TrainLog()
    log.append({"step": 0})
    with pytest.raises(ValueError):
        log.append({"step": 0})


@pytest.mark.slow
def test_stage2_gram_loss_drops_on_trained_models(experiment_dir, bvs):
    import json
    for seed in bvs.seeds:
        lines = (experiment_dir / f"seed{seed}" / "styleless" / "trainlog.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines[:-1]]
        assert recs[0]["L_gram"] == 1.0
        last = max(r["epoch"] for r in recs)
        assert np.mean([r["L_gram"] for r in recs if r["epoch"] == last]) < 1.0
