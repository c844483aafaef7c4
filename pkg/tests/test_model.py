import numpy as np
import pytest

from styleless.layer import insert_styleless
from styleless.model import (
    CheckpointError,
    ToySegNet,
    checkpoint_hash,
    count_parameters,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    upsample_bilinear,
)
from styleless.tensor import ShapeError, Tensor, gradcheck, softmax_cross_entropy


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)).astype(np.float32)


def test_output_shape_and_taps(batch):
    net = ToySegNet()
    out = net.forward(batch, taps=True)
    assert out.logits.shape == (2, 4, 64, 64)
    assert len(out.features) == 4
    assert [f.shape[1] for f in out.features] == [16, 32, 32, 64]
    assert net(batch[0]).shape == (4, 64, 64)


def test_taps_do_not_change_output(batch):
    net = ToySegNet(seed=2)
    a = net.forward(batch).logits.data
    b = net.forward(batch, taps=True).logits.data
    assert a.tobytes() == b.tobytes()


def test_forward_deterministic(batch):
    assert ToySegNet(seed=4)(batch).data.tobytes() == ToySegNet(seed=4)(batch).data.tobytes()


def test_zero_head_gives_ln4():
    net = ToySegNet()
    net.head.kernel.data[:] = 0
    x = np.zeros((3, 64, 64), np.float32)
    loss = softmax_cross_entropy(net(x), np.zeros((64, 64), np.int64))
    assert loss.item() == pytest.approx(np.log(4), abs=1e-6)


def test_wrong_input_shape():
    net = ToySegNet()
    with pytest.raises(ShapeError):
        net(np.zeros((1, 64, 64), np.float32))
    with pytest.raises(ShapeError):
        net(np.zeros((3, 62, 64), np.float32))


def test_count_parameters():
    net = ToySegNet()
    assert count_parameters(net, "styleless") == 0
    assert count_parameters(net, "all") == count_parameters(net, "backbone") == 139_332
    with pytest.raises(ValueError):
        count_parameters(net, "head")


def test_upsample_matches_scipy_zoom_free_oracle():
    # bilinear with half-pixel centres: interior output pixels interpolate their two neighbours
    x = np.arange(4.0).reshape(1, 1, 4)
    x = np.broadcast_to(x, (1, 4, 4)).copy()
    out = upsample_bilinear(Tensor(x), 2).data[0, 0]
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3])


def test_upsample_gradcheck():
    for seed in range(20):
        x = Tensor(np.random.default_rng(seed).normal(size=(2, 3, 3)))
        wt = Tensor(np.random.default_rng(seed + 50).normal(size=(2, 12, 12)))
        assert gradcheck(lambda t: (upsample_bilinear(t, 4) * wt).sum(), x) < 1e-6


def test_checkpoint_roundtrip_bit_exact(tmp_path, batch):
    net = insert_styleless(ToySegNet(seed=7))
    for s in net.styleless:
        s.exit.kernel.data[:] = 0.01
    p1 = save_checkpoint(net, tmp_path / "a", stage=2, seed=7, config_hash="abc")
    back, man = load_checkpoint(p1)
    assert man["stage"] == 2 and man["insertion_map"]["block3"] == "styleless3"
    assert {e["group"] for e in man["parameters"]} == {"backbone", "styleless"}
    assert back(batch).data.tobytes() == net(batch).data.tobytes()
    p2 = save_checkpoint(back, tmp_path / "b", stage=2, seed=7, config_hash="abc")
    assert checkpoint_hash(p1) == checkpoint_hash(p2)
    for f in sorted(p1.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (p2 / f.relative_to(p1)).read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path)
    path = save_checkpoint(ToySegNet(), tmp_path / "c")
    man = (path / "manifest.json").read_text()
    (path / "manifest.json").write_text(man.replace("toyseg-v1", "toyseg-v0"))
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path)
    (path / "manifest.json").write_text(man)
    (path / "params" / "head.bias.stls").write_bytes(b"STLSjunk")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
