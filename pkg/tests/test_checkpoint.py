import numpy as np
import pytest

from app.errors import FormatError
from app.models.training import TrainConfig
from app.services import checkpoint_service, packed_format
from app.services.checkpoint_service import load_checkpoint, save_checkpoint
from app.services.datasets import make_two_gaussians
from app.services.training_service import network_from_checkpoint, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    config = TrainConfig(hidden=[8, 8], epochs=2, batch_size=32, synthetic_samples=128, synthetic_dim=4, seed=3)
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    result = train(config, checkpoint_path=path)
    return result, path


def test_save_load_save_is_byte_identical(trained, tmp_path):
    _, path = trained
    first = path.read_bytes()
    again = save_checkpoint(load_checkpoint(path), tmp_path / "again.ckpt")
    assert again.read_bytes() == first


def test_checkpoint_contents(trained):
    result, path = trained
    ckpt = load_checkpoint(path)
    assert ckpt.step == result.checkpoint.step == 2 * 4
    assert ckpt.seed == 3
    assert ckpt.config == result.checkpoint.config
    assert set(ckpt.adam_m) == set(ckpt.tensors) == set(ckpt.adam_v)
    assert all(t.dtype == np.float32 for t in ckpt.tensors.values())


def test_corrupt_checkpoints(trained):
    _, path = trained
    raw = path.read_bytes()
    with pytest.raises(FormatError) as err:
        checkpoint_service.loads(b"NOTACKPT" + raw[8:])
    assert err.value.offset == 0
    with pytest.raises(FormatError):
        checkpoint_service.loads(raw[:-3])
    with pytest.raises(FormatError):
        checkpoint_service.loads(raw + b"\x00")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(path.parent / "missing.ckpt")


def test_packed_round_trip(trained, tmp_path):
    _, path = trained
    net = network_from_checkpoint(load_checkpoint(path))
    packed = packed_format.export_network(net)
    raw = packed_format.dumps(packed)
    reloaded = packed_format.loads(raw)
    assert packed_format.dumps(reloaded) == raw

    # checkpoint tensors are float32, so the packed copy reproduces them exactly
    x = make_two_gaussians(64, 4, seed=11).x
    np.testing.assert_allclose(reloaded.forward(x), packed.forward(x), atol=1e-9)

    written = packed_format.write_packed(packed, tmp_path / "model.n2uq")
    assert packed_format.read_packed(written).layers[1].packed is not None


def test_packed_format_errors(trained):
    _, path = trained
    raw = packed_format.dumps(packed_format.export_network(network_from_checkpoint(load_checkpoint(path))))
    with pytest.raises(FormatError) as err:
        packed_format.loads(b"XXXXXXXX" + raw[8:])
    assert err.value.offset == 0
    with pytest.raises(FormatError):
        packed_format.loads(raw[:40])
    with pytest.raises(FormatError):
        packed_format.loads(raw + b"\x00\x00")
