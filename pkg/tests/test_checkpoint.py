import numpy as np
import pytest

from convformer.checkpoint import (
    HEADER,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from convformer.errors import DataError
from convformer.model import ConvFormer, build_variant

TINY = dict(stage_channels=(4, 8, 12, 16), encoder_dim=8, encoder_layers=1, stem_conv_blocks=1, points=2)


@pytest.fixture
def model():
    m = ConvFormer(build_variant("full", **TINY), seed=2)
    # make buffers differ from their initial values so the round trip is meaningful
    m(np.random.default_rng(0).normal(size=(2, 1, 32, 32)).astype(np.float32))
    return m


def test_round_trip_is_bitwise(tmp_path, model):
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    a, b = list(model.store.state_items()), list(back.store.state_items())
    assert [n for n, _ in a] == [n for n, _ in b]
    for (_, x), (_, y) in zip(a, b):
        assert x.shape == y.shape and x.tobytes() == y.tobytes()
    img = np.ones((1, 1, 32, 32), dtype=np.float32)
    assert np.array_equal(model.eval()(img).data, back.eval()(img).data)


def test_header_layout(tmp_path, model):
    save_checkpoint(tmp_path / "m.ckpt", model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(HEADER)
    lines = raw[len(HEADER):].split(b"\n")
    assert b"num_classes=2" in lines and lines[0] == b"in_channels=1"
    count = next(line for line in lines if line.startswith(b"tensors="))
    assert int(count.split(b"=")[1]) == len(list(model.store.state_items()))


def test_parameters_precede_buffers(tmp_path, model):
    save_checkpoint(tmp_path / "m.ckpt", model)
    _, state = read_checkpoint(tmp_path / "m.ckpt")
    names = list(state)
    params = [n for n, _ in model.store.named_parameters()]
    assert names[:len(params)] == params and len(names) > len(params)


@pytest.mark.parametrize("mangle", [
    lambda raw: b"NOT-A-CKPT\n" + raw[len(HEADER):],
    lambda raw: raw[:len(raw) // 2],
    lambda raw: raw[:-1],
    lambda raw: raw + b"\0",
    lambda raw: raw.replace(b"use_epe=true", b"use_epe=maybe"),
])
def test_corrupt_files_raise(tmp_path, model, mangle):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(DataError):
        read_checkpoint(path)
