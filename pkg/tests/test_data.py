import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linleak.data import (ImageBatch, brightness, calibrate, load_cifar_binary, load_idx,
                          synth_batch, write_cifar_binary, write_idx)
from linleak.errors import BadMagic, DimensionMismatch, TruncatedFile


def _naive_mean(img):
    total, count = 0.0, 0
    for v in np.asarray(img).ravel().tolist():
        total += v
        count += 1
    return total / count


def test_idx_round_trip(tmp_path, rng):
    pix = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    write_idx(tmp_path / "img", pix, tmp_path / "lab", labels)
    b = load_idx(tmp_path / "img", tmp_path / "lab")
    assert b.images.shape == (4, 1, 28, 28)
    assert np.array_equal(np.rint(b.images[:, 0] * 255).astype(np.uint8), pix)
    assert b.labels.tolist() == [3, 1, 4, 1]


def test_idx_pixel_scaling_endpoint(tmp_path):
    write_idx(tmp_path / "img", np.full((1, 2, 2), 255, dtype=np.uint8))
    b = load_idx(tmp_path / "img")
    assert b.images.max() == 1.0
    assert b.labels.tolist() == [0]


def test_idx_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0, 1, 2, 2) + bytes(4))
    with pytest.raises(BadMagic):
        load_idx(tmp_path / "img")


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", np.zeros((3, 2, 2), np.uint8), tmp_path / "lab", [0, 1])
    with pytest.raises(DimensionMismatch):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_at_every_byte(tmp_path, rng):
    write_idx(tmp_path / "img", rng.integers(0, 256, (2, 3, 3), dtype=np.uint8))
    full = (tmp_path / "img").read_bytes()
    for cut in range(len(full)):
        (tmp_path / "cut").write_bytes(full[:cut])
        with pytest.raises(TruncatedFile):
            load_idx(tmp_path / "cut")


def test_idx_labels_truncated_at_every_byte(tmp_path):
    write_idx(tmp_path / "img", np.zeros((3, 2, 2), np.uint8), tmp_path / "lab", [0, 1, 2])
    full = (tmp_path / "lab").read_bytes()
    for cut in range(len(full)):
        (tmp_path / "cut").write_bytes(full[:cut])
        with pytest.raises(TruncatedFile):
            load_idx(tmp_path / "img", tmp_path / "cut")


def test_cifar_single_black_record(tmp_path):
    (tmp_path / "c.bin").write_bytes(bytes([7]) + bytes(3072))
    b = load_cifar_binary(tmp_path / "c.bin")
    assert len(b) == 1 and b.labels[0] == 7
    assert b.images.shape == (1, 3, 32, 32) and b.images.max() == 0.0


def test_cifar_round_trip_and_record_count(tmp_path, rng):
    pix = rng.integers(0, 256, size=(5, 3, 32, 32), dtype=np.uint8)
    write_cifar_binary(tmp_path / "c.bin", pix, [0, 1, 2, 3, 4])
    assert (tmp_path / "c.bin").stat().st_size // 3073 == 5
    b = load_cifar_binary(tmp_path / "c.bin")
    assert np.array_equal(np.rint(b.images * 255).astype(np.uint8), pix)
    # channel planes stay in R, G, B order
    assert np.array_equal(np.rint(b.images[2, 1] * 255), pix[2, 1])


def test_cifar100_two_label_bytes(tmp_path, rng):
    pix = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    write_cifar_binary(tmp_path / "c.bin", pix, [42, 99], label_bytes=2)
    b = load_cifar_binary(tmp_path / "c.bin", label_bytes=2)
    assert b.labels.tolist() == [42, 99]


def test_cifar_truncated_at_every_byte(tmp_path):
    full = bytes([1]) + bytes(range(256)) * 12 + bytes([2]) + bytes(3072)
    for cut in list(range(0, 40)) + list(range(3070, len(full))):
        if cut and cut % 3073 == 0:
            continue    # whole records are a valid shorter file
        (tmp_path / "cut").write_bytes(full[:cut])
        with pytest.raises(TruncatedFile):
            load_cifar_binary(tmp_path / "cut")


def test_synth_determinism_and_range():
    a = synth_batch(5, 8)
    b = synth_batch(5, 8)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not np.array_equal(a.images, synth_batch(6, 8).images)


def test_synth_force_max_pixel():
    b = synth_batch(3, 6, force_max_pixel=True)
    assert np.all(b.images.reshape(6, -1).max(axis=1) == 1.0)


def test_synth_brightness_roughly_uniform():
    vals = np.sort(brightness(synth_batch(11, 320).images))
    q = np.linspace(0.05, 0.95, 19)
    expected = 0.1 + 0.8 * q
    assert np.max(np.abs(np.quantile(vals, q) - expected)) < 0.05


def test_brightness_examples(rng):
    assert brightness(np.full((3, 4, 4), 0.5)) == 0.5
    half = np.zeros((1, 4, 4))
    half[0, :2] = 1.0
    assert brightness(half) == 0.5
    img = rng.random((3, 5, 5))
    assert brightness(img) == pytest.approx(_naive_mean(img), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_brightness_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    img = r.random((3, 4, 4))
    perm = r.permutation(img.size)
    assert brightness(img) == pytest.approx(brightness(img.ravel()[perm].reshape(img.shape)), abs=1e-15)


def test_calibrate_sorts():
    imgs = np.stack([np.full((1, 2, 2), v) for v in (0.7, 0.1, 0.4)])
    assert calibrate(imgs).brightness_values.tolist() == pytest.approx([0.1, 0.4, 0.7])


def test_image_batch_validation():
    with pytest.raises(ValueError):
        ImageBatch(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(ValueError):
        ImageBatch(np.zeros((1, 2, 2, 2)), [0])
    with pytest.raises(DimensionMismatch):
        ImageBatch(np.zeros((2, 1, 2, 2)), [0])
