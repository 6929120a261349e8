import gzip
import struct

import numpy as np
import pytest

from app.errors import ContractError, FormatError
from app.models.training import TrainConfig
from app.services.datasets import (
    load_csv,
    load_idx,
    load_idx_dataset,
    make_two_gaussians,
    write_idx,
)
from app.services.training_service import load_datasets


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
    labels = np.array([0, 3, 1, 3], dtype=np.uint8)
    return write_idx(tmp_path / "images.idx", images), write_idx(tmp_path / "labels.idx", labels), images


def test_idx_round_trip(idx_pair):
    images_path, labels_path, images = idx_pair
    assert np.array_equal(load_idx(images_path), images)
    data = load_idx_dataset(images_path, labels_path)
    assert data.x.shape == (4, 28, 28)
    assert data.feature_shape == (28, 28)
    assert data.y.tolist() == [0, 3, 1, 3]
    assert data.classes == 4
    assert data.x.max() <= 1.0 and data.x.min() >= 0.0


def test_idx_gzip(tmp_path, rng):
    images = rng.integers(0, 256, size=(2, 5, 5)).astype(np.uint8)
    path = write_idx(tmp_path / "images.idx.gz", images)
    assert path.read_bytes()[:2] == b"\x1f\x8b"
    assert np.array_equal(load_idx(path), images)
    assert gzip.decompress(path.read_bytes())[:4] == b"\x00\x00\x08\x03"


def test_idx_count_mismatch(tmp_path, idx_pair):
    images_path, _, _ = idx_pair
    short = write_idx(tmp_path / "short.idx", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError) as err:
        load_idx_dataset(images_path, short)
    assert err.value.offset == 4


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">I", 0x0804) + b"\x00" * 8)
    with pytest.raises(FormatError) as err:
        load_idx(path)
    assert err.value.offset == 0
    assert "offset=0" in str(err.value)


def test_idx_truncated_body(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">II", 0x801, 10) + b"\x01\x02")
    with pytest.raises(FormatError) as err:
        load_idx(path)
    assert err.value.offset == 8 + 2


def test_idx_swapped_files(idx_pair):
    images_path, labels_path, _ = idx_pair
    with pytest.raises(FormatError):
        load_idx_dataset(labels_path, images_path)


def test_csv_scaling_and_header(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("label,f1,f2,f3\n0,10,5,7\n1,20,5,9\n1,15,5,8\n")
    data = load_csv(path)
    assert data.y.tolist() == [0, 1, 1]
    np.testing.assert_allclose(data.x[:, 0], [0.0, 1.0, 0.5])
    np.testing.assert_allclose(data.x[:, 1], [0.0, 0.0, 0.0])
    assert data.classes == 2


def test_held_out_csv_reuses_training_scale(tmp_path):
    train_path = tmp_path / "train.csv"
    train_path.write_text("0,0,3\n1,10,3\n0,5,3\n")
    eval_path = tmp_path / "eval.csv"
    eval_path.write_text("0,0,1\n1,5,9\n1,20,3\n")

    train = load_csv(train_path)
    held_out = load_csv(eval_path, scale=train.scale)
    # raw 5 -> 0.5 in both files; out-of-range 20 -> 2.0; constant column stays 0
    assert train.x[2, 0] == pytest.approx(0.5)
    np.testing.assert_allclose(held_out.x[:, 0], [0.0, 0.5, 2.0])
    np.testing.assert_allclose(held_out.x[:, 1], [0.0, 0.0, 0.0])
    assert load_csv(eval_path).x[1, 0] == pytest.approx(0.25)

    config = TrainConfig(dataset="csv", train_data=str(train_path), eval_data=str(eval_path))
    _, wired = load_datasets(config)
    np.testing.assert_allclose(wired.x, held_out.x)

    narrow = tmp_path / "narrow.csv"
    narrow.write_text("0,1\n1,2\n")
    with pytest.raises(FormatError):
        load_csv(narrow, scale=train.scale)


def test_empty_csv_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    data = load_csv(path)
    assert len(data) == 0
    with pytest.raises(ContractError):
        data.require_nonempty()


def test_csv_bad_rows(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1.0\n1,abc\n")
    with pytest.raises(FormatError) as err:
        load_csv(bad)
    assert err.value.offset == 1

    negative = tmp_path / "neg.csv"
    negative.write_text("0,1.0\n-1,2.0\n")
    with pytest.raises(FormatError):
        load_csv(negative)

    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")


def test_two_gaussians_is_balanced_and_seeded():
    a = make_two_gaussians(100, 3, seed=7)
    b = make_two_gaussians(100, 3, seed=7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert int(a.y.sum()) == 50
    assert a.x.shape == (100, 3)
    with pytest.raises(ContractError):
        make_two_gaussians(1, 3, seed=0)
