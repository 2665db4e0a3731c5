import gzip
import struct

import numpy as np
import pytest

from flowcert.datasets import (
    IDXFormatError,
    array_digest,
    batch_schedule,
    format_manifest,
    gaussian_clusters,
    load_idx,
    parse_key_values,
    to_pixels,
    write_idx,
)


@pytest.fixture(scope="module")
def toy():
    return gaussian_clusters(0)


def test_toy_sizes_and_norms(toy):
    train, test = toy
    assert train.m == 500 and test.m == 39500
    assert train.inputs.shape == (500, 5)
    for part in (train, test):
        np.testing.assert_allclose(np.linalg.norm(part.inputs, axis=1), 1.0, atol=1e-12)
        assert part.is_binary


def test_toy_class_balance(toy):
    labels = np.concatenate([toy[0].labels, toy[1].labels])
    assert (labels == -1).sum() == 20000 and (labels == 1).sum() == 20000
    # the constant predictor is right about half the time on the test set
    assert abs(np.mean(toy[1].labels == 1) - 0.5) < 0.02


def test_toy_is_reproducible(toy):
    again = gaussian_clusters(0)
    for a, b in zip(toy, again):
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)
    other = gaussian_clusters(1)
    assert not np.array_equal(other[0].inputs, toy[0].inputs)
    assert toy[0].manifest["sha256"] == again[0].manifest["sha256"]
    assert toy[0].manifest["sha256"] != other[0].manifest["sha256"]


def test_toy_train_and_test_disjoint(toy):
    train = {row.tobytes() for row in toy[0].inputs}
    assert not any(row.tobytes() in train for row in toy[1].inputs)


def test_toy_multiclass_and_small_sizes():
    train, test = gaussian_clusters(3, cluster_size=100, n_train=50, n_classes=4)
    labels = np.concatenate([train.labels, test.labels])
    assert sorted(np.unique(labels)) == [0, 1, 2, 3]
    assert np.bincount(labels).tolist() == [200] * 4
    with pytest.raises(ValueError):
        gaussian_clusters(0, cluster_size=10, n_train=80)


def test_toy_clusters_have_requested_spread():
    # before projection each cluster has per-coordinate variance 0.1; check the raw draw
    rng = np.random.Generator(np.random.PCG64(7))
    means = rng.standard_normal((8, 5))
    pts = means[:, None, :] + np.sqrt(0.1) * rng.standard_normal((8, 5000, 5))
    assert pts[0].var(axis=0).mean() == pytest.approx(0.1, rel=0.05)
    train, test = gaussian_clusters(7)
    combined = np.concatenate([train.inputs, test.inputs])
    raw = pts.reshape(-1, 5)
    expected = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    assert {r.tobytes() for r in combined} == {r.tobytes() for r in expected}


# -- IDX ---------------------------------------------------------------------


def _idx_bytes(n=2, rows=28, cols=28, fill=7):
    header = struct.pack(">IIII", 0x803, n, rows, cols)
    return header + bytes([fill]) * (n * rows * cols)


def _labels_bytes(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def test_load_idx_header_example(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(fill=255))
    (tmp_path / "lab").write_bytes(_labels_bytes([3, 9]))
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert data.inputs.shape == (2, 784)
    assert np.all(data.inputs == 1.0)
    assert data.labels.tolist() == [3, 9]
    assert len(data.manifest["images_sha256"]) == 64


def test_load_idx_gzip(tmp_path):
    (tmp_path / "img.gz").write_bytes(gzip.compress(_idx_bytes(fill=51)))
    (tmp_path / "lab.gz").write_bytes(gzip.compress(_labels_bytes([1, 2])))
    data = load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")
    np.testing.assert_allclose(data.inputs, 0.2)


def test_load_idx_errors(tmp_path):
    good_img, good_lab = tmp_path / "img", tmp_path / "lab"
    good_img.write_bytes(_idx_bytes())
    good_lab.write_bytes(_labels_bytes([1, 2]))
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x04" + _idx_bytes()[4:])
    with pytest.raises(IDXFormatError, match="magic"):
        load_idx(bad, good_lab)
    bad.write_bytes(_idx_bytes()[:-1])
    with pytest.raises(IDXFormatError, match="truncated"):
        load_idx(bad, good_lab)
    bad.write_bytes(_labels_bytes([1, 2, 3]))
    with pytest.raises(IDXFormatError, match="mismatch"):
        load_idx(good_img, bad)
    bad.write_bytes(b"\x00\x00")
    with pytest.raises(IDXFormatError):
        load_idx(good_img, bad)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5)
    write_idx(tmp_path / "i", tmp_path / "l", images, labels)
    data = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(to_pixels(data.inputs), images)
    np.testing.assert_array_equal(data.labels, labels)


# -- batches and manifests ---------------------------------------------------


def test_full_batch_schedule_degenerates():
    sched = batch_schedule(500, 500, 1e-3, 7, seed=0)
    assert len(sched.segments) == 7
    for b in sched.batches:
        np.testing.assert_array_equal(b, np.arange(500))


def test_schedule_segments_cover_horizon():
    sched = batch_schedule(100, 30, 0.01, 25, seed=1)
    assert len(sched.segments) == 25
    assert sched.total_time == pytest.approx(0.25)
    for k, (a, b, i) in enumerate(sched.segments):
        assert i == k
        assert b - a == pytest.approx(0.01)


def test_schedule_epochs_partition_indices():
    sched = batch_schedule(100, 25, 0.01, 12, seed=2)
    for epoch in range(3):
        chunk = sched.batches[4 * epoch:4 * epoch + 4]
        joined = np.concatenate(chunk)
        assert sorted(joined.tolist()) == list(range(100))
        for b in chunk:
            assert np.all(np.diff(b) > 0)
    assert not np.array_equal(np.concatenate(sched.batches[:4]), np.concatenate(sched.batches[4:8]))


def test_schedule_holds_batches_and_is_seeded():
    sched = batch_schedule(60, 20, 0.5, 10, seed=3, steps_per_batch=4)
    assert [s[2] for s in sched.segments] == [0, 1, 2]
    assert sched.segments[-1] == (4.0, 5.0, 2)
    again = batch_schedule(60, 20, 0.5, 10, seed=3, steps_per_batch=4)
    for a, b in zip(sched.batches, again.batches):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        batch_schedule(10, 11, 0.1, 3, seed=0)


def test_manifest_round_trip():
    entries = {"seed": 3, "name": "toy", "path": "a=b"}
    parsed = parse_key_values("# comment\n\n" + format_manifest(entries))
    assert parsed == {"seed": "3", "name": "toy", "path": "a=b"}
    with pytest.raises(ValueError):
        parse_key_values("novalue\n")


def test_array_digest_sensitivity():
    a = np.arange(6.0)
    assert array_digest(a) == array_digest(a.copy())
    assert array_digest(a) != array_digest(a.reshape(2, 3))
    assert array_digest(a) != array_digest(a.astype(np.float32))
