"""Toy Gaussian clusters, IDX (MNIST) ingestion and batch schedules."""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow_engine import BatchSchedule

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be an (m, d_in) matrix")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels disagree on m")
        if len(self.labels) == 0:
            raise ValueError("empty dataset")

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.labels, (-1, 1))))

    def subset(self, idx: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], split or self.split,
                              dict(self.manifest))


def array_digest(*arrays: np.ndarray) -> str:
    sha = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        sha.update(str(a.dtype).encode())
        sha.update(str(a.shape).encode())
        sha.update(a.tobytes())
    return sha.hexdigest()


def gaussian_clusters(seed: int, cluster_size: int = 5000, n_train: int = 500,
                      n_clusters: int = 8, dim: int = 5, variance: float = 0.1,
                      n_classes: int = 2) -> tuple[LabeledDataset, LabeledDataset]:
    """Clustered points on the unit sphere, split uniformly into train and test.

    Cluster means are standard normal in R^dim and each cluster is isotropic
    with the given variance. With ``n_classes == 2`` the first half of the
    clusters is labelled -1 and the rest +1; otherwise cluster ``k`` gets
    class id ``k % n_classes``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    means = rng.standard_normal((n_clusters, dim))
    points = means[:, None, :] + math.sqrt(variance) * rng.standard_normal((n_clusters, cluster_size, dim))
    points = points.reshape(-1, dim)
    cluster_id = np.repeat(np.arange(n_clusters), cluster_size)
    if n_classes == 2:
        labels = np.where(cluster_id < n_clusters // 2, -1, 1)
    else:
        labels = cluster_id % n_classes
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    total = len(points)
    if not 1 <= n_train < total:
        raise ValueError(f"n_train must lie in [1, {total})")
    perm = rng.permutation(total)
    manifest = {
        "generator": "gaussian_clusters/PCG64",
        "seed": seed,
        "n_clusters": n_clusters,
        "cluster_size": cluster_size,
        "dim": dim,
        "variance": variance,
        "n_classes": n_classes,
        "label_rule": "first half of clusters -> -1" if n_classes == 2 else "cluster mod n_classes",
        "n_train": n_train,
        "n_test": total - n_train,
        "sha256": array_digest(points, labels, perm),
    }
    train = LabeledDataset(points[perm[:n_train]], labels[perm[:n_train]], "train", manifest)
    test = LabeledDataset(points[perm[n_train:]], labels[perm[n_train:]], "test", manifest)
    return train, test


# -- IDX -----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IDXFormatError(f"{what}: file too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < size:
        raise IDXFormatError(f"{what}: truncated payload ({len(payload)} of {size} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=size).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    images = _parse_idx(img_raw, IMAGE_MAGIC, "images")
    labels = _parse_idx(lab_raw, LABEL_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    inputs = images.reshape(images.shape[0], -1).astype(float) / 255.0
    manifest = {
        "images": str(images_path),
        "labels": str(labels_path),
        "images_sha256": hashlib.sha256(img_raw).hexdigest(),
        "labels_sha256": hashlib.sha256(lab_raw).hexdigest(),
    }
    return LabeledDataset(inputs, labels.astype(np.int64), split, manifest)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def to_pixels(inputs: np.ndarray, side: int = 28) -> np.ndarray:
    return np.rint(np.asarray(inputs) * 255.0).astype(np.uint8).reshape(-1, side, side)


# -- batches -----------------------------------------------------------------


def batch_schedule(m: int | LabeledDataset, batch_size: int, dt: float, total_steps: int,
                   seed: int, steps_per_batch: int = 1) -> BatchSchedule:
    """Cycle through reshuffled epochs, holding each batch for ``steps_per_batch`` steps.

    Indices inside a batch are sorted so a batch covering the whole dataset
    reproduces the full-batch objective exactly.
    """
    if isinstance(m, LabeledDataset):
        m = m.m
    if not 1 <= batch_size:
        raise ValueError("batch_size must be positive")
    if batch_size > m:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {m}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_batches = -(-total_steps // steps_per_batch)
    batches: list[np.ndarray] = []
    full = np.arange(m)
    while len(batches) < n_batches:
        if batch_size == m:
            batches.append(full)
            continue
        perm = rng.permutation(m)
        for start in range(0, m, batch_size):
            batches.append(np.sort(perm[start:start + batch_size]))
            if len(batches) == n_batches:
                break
    segments = []
    for k in range(n_batches):
        a = k * steps_per_batch
        b = min((k + 1) * steps_per_batch, total_steps)
        segments.append((a * dt, b * dt, k))
    return BatchSchedule(tuple(segments), tuple(batches))


# -- manifests ---------------------------------------------------------------


def format_manifest(entries: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in entries.items())


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
