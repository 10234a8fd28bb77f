import gzip

import numpy as np
import pytest

from muxformer.data import (
    CIFAR_RECORD,
    DataFormatError,
    Dataset,
    default_mnist_path,
    denormalize,
    load_dataset,
    make_mux_batches,
    normalize,
    read_cifar_binary,
    read_idx_images,
    write_idx,
)
from muxformer.nn import ConfigError


def write_small_idx(tmp_path, count=6, size=4, gz=False):
    r = np.random.default_rng(0)
    images = r.integers(0, 256, (count, size, size), dtype=np.uint8)
    labels = np.arange(count) % 10
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"t-images-idx3-ubyte{suffix}", tmp_path / f"t-labels-idx1-ubyte{suffix}"
    write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


def test_idx_header_layout(tmp_path):
    images, _, ip, _ = write_small_idx(tmp_path)
    blob = ip.read_bytes()
    assert blob[:4] == b"\x00\x00\x08\x03"
    assert int.from_bytes(blob[4:8], "big") == 6
    np.testing.assert_array_equal(read_idx_images(ip), images)


@pytest.mark.parametrize("gz", [False, True])
def test_idx_roundtrip_scaling(tmp_path, gz):
    images, labels, ip, _ = write_small_idx(tmp_path, gz=gz)
    d = load_dataset(ip)
    assert d.images.shape == (6, 1, 4, 4) and d.images.dtype == np.float32
    np.testing.assert_allclose(d.images[:, 0], images / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(d.labels, labels)
    np.testing.assert_array_equal(d.ids, np.arange(6))


def test_idx_bad_magic_reports_offset(tmp_path):
    _, _, ip, _ = write_small_idx(tmp_path)
    blob = bytearray(ip.read_bytes())
    blob[3] = 0x01
    ip.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="offset 0"):
        read_idx_images(ip)


def test_idx_truncated_is_rejected_whole(tmp_path):
    _, _, ip, _ = write_small_idx(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(DataFormatError) as info:
        load_dataset(ip)
    assert info.value.offset == 16 + 5 * 16


def test_pad_and_normalise(tmp_path):
    _, _, ip, _ = write_small_idx(tmp_path)
    d = load_dataset(ip, pad_to=8, mean=[0.5], std=[0.25])
    assert d.images.shape == (6, 1, 8, 8)
    np.testing.assert_allclose(d.images[:, 0, 0, 0], -2.0)
    with pytest.raises(ConfigError):
        load_dataset(ip, pad_to=2)


def test_offset_and_limit_keep_source_ids(tmp_path):
    _, labels, ip, _ = write_small_idx(tmp_path)
    d = load_dataset(ip, offset=2, limit=3)
    np.testing.assert_array_equal(d.ids, [2, 3, 4])
    np.testing.assert_array_equal(d.labels, labels[2:5])


def make_cifar(path, count):
    r = np.random.default_rng(1)
    rec = r.integers(0, 256, (count, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.arange(count) % 10
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_records(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    rec = make_cifar(p, 10)
    assert p.stat().st_size == 10 * 3073
    images, labels = read_cifar_binary(p)
    assert images.shape == (10, 3, 32, 32)
    np.testing.assert_array_equal(labels, np.arange(10))
    np.testing.assert_array_equal(images[3].reshape(-1), rec[3, 1:])
    d = load_dataset(tmp_path, "cifar-binary")
    assert len(d) == 10 and d.labels.max() < 10


def test_cifar_truncated(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    make_cifar(p, 3)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(DataFormatError) as info:
        load_dataset(p, "cifar-binary")
    assert info.value.offset == 2 * CIFAR_RECORD


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        load_dataset(tmp_path, "jpeg")


def toy(count):
    return Dataset(np.zeros((count, 1, 2, 2), np.float32), np.arange(count) % 3,
                   np.arange(count), num_classes=3)


def test_batches_arithmetic():
    batches = list(make_mux_batches(toy(8), 2, 4, seed=0))
    assert len(batches) == 2
    assert all(b.n_mux == 2 and b.group_size == 2 for b in batches)


def test_unshuffled_groups_are_contiguous():
    b = next(make_mux_batches(toy(8), 2, 4, shuffle=False))
    assert [g.tolist() for g in b.ids] == [[0, 1], [2, 3]]


def test_same_seed_same_stream():
    ids = lambda s: [b.flat_ids().tolist() for b in make_mux_batches(toy(50), 2, 8, seed=s)]
    assert ids(3) == ids(3)
    assert ids(3) != ids(4)


def test_each_id_once_and_bounded_remainder():
    d = toy(53)
    seen = np.concatenate([b.flat_ids() for b in make_mux_batches(d, 4, 8, seed=1)])
    assert len(seen) == len(set(seen.tolist()))
    assert len(d) - len(seen) < 4 * 8


def test_labels_stay_aligned_with_ids():
    d = toy(20)
    for b in make_mux_batches(d, 2, 4, seed=2):
        np.testing.assert_array_equal(b.flat_labels(), d.labels[b.flat_ids()])


def test_indivisible_batch_is_config_error():
    with pytest.raises(ConfigError):
        list(make_mux_batches(toy(8), 3, 4))


def test_flip_is_seeded():
    r = np.random.default_rng(0)
    d = Dataset(r.standard_normal((16, 1, 2, 2)).astype(np.float32), np.zeros(16, np.int64), np.arange(16), 1)
    a = [b.flat_images() for b in make_mux_batches(d, 2, 8, seed=5, flip=True)]
    b = [b.flat_images() for b in make_mux_batches(d, 2, 8, seed=5, flip=True)]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_normalise_roundtrip():
    x = np.random.default_rng(0).random((4, 3, 5, 5)).astype(np.float32)
    mean, std = (0.4, 0.5, 0.6), (0.2, 0.3, 0.25)
    np.testing.assert_allclose(denormalize(normalize(x, mean, std), mean, std), x, atol=1e-6)


def test_bundled_mnist_subset():
    path = default_mnist_path()
    assert path is not None and path.exists()
    d = load_dataset(path, pad_to=32)
    assert d.images.shape == (5000, 1, 32, 32)
    assert set(np.unique(d.labels).tolist()) == set(range(10))
    with gzip.open(path) as fh:
        assert fh.read(4) == b"\x00\x00\x08\x03"
