import numpy as np
import pytest

from styleless.data import (
    CORRUPTIONS,
    CorruptionSpec,
    apply_corruption,
    corrupt,
    corrupt_dataset,
    generate_scene,
    haze_alpha,
    load_dataset,
    make_dataset,
    save_dataset,
    scene_seeds,
)


def test_scene_deterministic_and_in_range():
    a, b = generate_scene(17), generate_scene(17)
    assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.image.shape == (3, 64, 64) and a.labels.shape == (64, 64)
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert set(np.unique(a.labels)) <= {0, 1, 2, 3}


@pytest.mark.slow
def test_every_class_in_95_percent_of_scenes():
    present = np.zeros(4)
    for s in range(1000):
        present += np.isin(np.arange(4), generate_scene(s).labels)
    assert (present / 1000 > 0.95).all(), present


def test_splits_disjoint():
    tr, va, te = (set(scene_seeds(100_000, 9, s)) for s in ("train", "val", "test"))
    assert not (tr & va) and not (tr & te) and not (va & te)


def test_haze_top_row_alpha():
    assert haze_alpha(5)[0] == pytest.approx(0.85)
    assert haze_alpha(5)[-1] == pytest.approx(0.75)
    img = np.zeros((3, 64, 64), np.float32)
    out = apply_corruption(img, "haze", 5)
    assert out[:, 0].mean() == pytest.approx(0.85, abs=1e-6)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_severity_zero_is_identity(kind):
    img = generate_scene(3).image
    assert np.array_equal(apply_corruption(img, kind, 0, seed=1), img)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corrupt_contract(kind):
    s = generate_scene(5)
    spec = CorruptionSpec(kind, 3, seed=2)
    out = corrupt(s.image, spec)
    assert out.shape == s.image.shape and out.dtype == s.image.dtype
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, corrupt(s.image, spec))
    ds = make_dataset(2, 0)
    cd = corrupt_dataset(ds, kind, 3)
    assert np.array_equal(cd.labels, ds.labels) and cd.name == f"train/{kind}-3"


@pytest.mark.parametrize("kw", [{"kind": "snow", "severity": 1}, {"kind": "haze", "severity": 0},
                                {"kind": "rain", "severity": 6}])
def test_corruption_spec_validation(kw):
    with pytest.raises(ValueError):
        CorruptionSpec(**kw)


@pytest.mark.slow
@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_monotone_in_severity(kind):
    for seed in range(100):
        img = generate_scene(seed).image
        change = [np.abs(apply_corruption(img, kind, s, seed).astype(np.float64) - img).mean() for s in range(6)]
        assert all(b >= a - 1e-12 for a, b in zip(change, change[1:])), (seed, change)


def test_haze_brightens_contrast_flattens():
    ds = make_dataset(100, 0, "val")
    haze = corrupt_dataset(ds, "haze", 2)
    con = corrupt_dataset(ds, "contrast", 2)
    assert haze.images.mean() > ds.images.mean()
    assert con.images.var(axis=(1, 2, 3)).mean() < ds.images.var(axis=(1, 2, 3)).mean()


def test_dataset_roundtrip(tmp_path):
    ds = corrupt_dataset(make_dataset(3, 1, "test"), "rain", 2, seed=4)
    back = load_dataset(save_dataset(ds, tmp_path / "d"))
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert back.corruption == ds.corruption and back.split == "test"
    assert np.array_equal(back.seeds, ds.seeds)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
