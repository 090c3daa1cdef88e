"""Deterministic synthetic fixtures: small models plus matching datasets.

Everything here is generated from a single seed so fixture containers
are byte-identical across runs; no downloads, no training loops.  The
mlp fixture stands in for a trained classifier: class-template
structure (what training would have produced) is superposed with
seeded Gaussian perturbations, giving the concentrated weight and
activation distributions that importance sampling relies on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .container import Dataset, save_dataset, save_model
from .model import Layer, ModelGraph, validate_model

FIXTURE_KINDS = ("mlp-blobs", "cnn-blobs")

_MLP_DIMS = (16, 32, 32, 4)
_N_EVAL_POINTS = 2000
_MEAN_NORM = 4.0  # distance of each blob mean from the origin, in noise sigmas


def _blob_means(dim: int, n_classes: int) -> np.ndarray:
    """One axis-aligned mean per class, each at norm _MEAN_NORM."""
    means = np.zeros((n_classes, dim))
    for c in range(n_classes):
        means[c, c] = _MEAN_NORM
    return means


def _blob_points(rng: np.random.Generator, means: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    n_classes, dim = means.shape
    labels = np.arange(count, dtype=np.int32) % n_classes
    inputs = means[labels] + rng.standard_normal((count, dim))
    return inputs.astype(np.float32), labels


def make_mlp_blobs(seed: int) -> tuple[ModelGraph, Dataset]:
    """Three-layer ReLU MLP over well-separated 16-d Gaussian blobs.

    Layer 1 holds several noisy matched-filter columns per class,
    layer 2 pools the copies of each class block, and the readout
    averages each block into one logit.  Gaussian perturbations scaled
    by 1/sqrt(fan_in) are superposed on all of it.
    """
    rng = np.random.default_rng(seed)
    d_in, h1, h2, n_classes = _MLP_DIMS
    copies = h1 // n_classes
    means = _blob_means(d_in, n_classes)

    templates = means / np.linalg.norm(means, axis=1, keepdims=True)
    w1 = np.empty((d_in, h1))
    for j in range(h1):
        w1[:, j] = templates[j // copies] + 0.25 * rng.standard_normal(d_in) / np.sqrt(d_in)

    w2 = np.zeros((h1, h2))
    for j in range(h2):
        block = j // copies
        w2[block * copies : (block + 1) * copies, j] = 1.0 / copies
    w2 += 0.1 * rng.standard_normal((h1, h2)) / np.sqrt(h1)

    w3 = np.zeros((h2, n_classes))
    for c in range(n_classes):
        w3[c * copies : (c + 1) * copies, c] = 1.0 / copies
    w3 += 0.02 * rng.standard_normal((h2, n_classes)) / np.sqrt(h2)

    eval_x, eval_y = _blob_points(rng, means, _N_EVAL_POINTS)

    model = ModelGraph(
        layers=(
            Layer(
                kind="dense",
                name="dense_0",
                weights=w1.astype(np.float32),
                bias=np.zeros(h1, dtype=np.float32),
            ),
            Layer(kind="relu", name="relu_0"),
            Layer(
                kind="dense",
                name="dense_1",
                weights=w2.astype(np.float32),
                bias=np.zeros(h2, dtype=np.float32),
            ),
            Layer(kind="relu", name="relu_1"),
            Layer(
                kind="dense",
                name="dense_2",
                weights=w3.astype(np.float32),
                bias=np.zeros(n_classes, dtype=np.float32),
            ),
        ),
        input_shape=(d_in,),
    )
    validate_model(model)
    dataset = Dataset(
        name="mlp-blobs-eval", inputs=eval_x, labels=eval_y, num_classes=n_classes
    )
    return model, dataset


_CNN_IMAGE = 8
_CNN_CHANNELS = 8
_N_CNN_POINTS = 512


def _cnn_templates() -> np.ndarray:
    """Four 8x8 patterns: horizontal / vertical stripes, checker, blob."""
    y, x = np.mgrid[0:_CNN_IMAGE, 0:_CNN_IMAGE]
    horizontal = np.sin(y * np.pi / 2.0)
    vertical = np.sin(x * np.pi / 2.0)
    checker = ((x + y) % 2) * 2.0 - 1.0
    center = np.exp(-((x - 3.5) ** 2 + (y - 3.5) ** 2) / 8.0) * 2.0 - 0.5
    return np.stack([horizontal, vertical, checker, center]).astype(np.float64)


def make_cnn_blobs(seed: int) -> tuple[ModelGraph, Dataset]:
    """Small conv net over noisy 8x8 pattern images."""
    rng = np.random.default_rng(seed)
    n_classes = 4

    wc = (rng.standard_normal((_CNN_CHANNELS, 1, 3, 3)) / 3.0).astype(np.float32)
    bc = (rng.standard_normal(_CNN_CHANNELS) * 0.1).astype(np.float32)
    flat_dim = _CNN_CHANNELS * (_CNN_IMAGE // 2) ** 2
    wd = (rng.standard_normal((flat_dim, n_classes)) / np.sqrt(flat_dim)).astype(
        np.float32
    )
    bd = (rng.standard_normal(n_classes) * 0.1).astype(np.float32)

    templates = _cnn_templates()
    labels = np.arange(_N_CNN_POINTS, dtype=np.int32) % n_classes
    images = templates[labels] + 0.3 * rng.standard_normal(
        (_N_CNN_POINTS, _CNN_IMAGE, _CNN_IMAGE)
    )
    inputs = images[:, np.newaxis, :, :].astype(np.float32)

    model = ModelGraph(
        layers=(
            Layer(
                kind="conv2d",
                name="conv_0",
                weights=wc,
                bias=bc,
                attrs={"stride": 1, "padding": 1},
            ),
            Layer(kind="relu", name="relu_0"),
            Layer(kind="maxpool2d", name="pool_0", attrs={"window": 2, "stride": 2}),
            Layer(kind="flatten", name="flatten_0"),
            Layer(kind="dense", name="dense_0", weights=wd, bias=bd),
        ),
        input_shape=(1, _CNN_IMAGE, _CNN_IMAGE),
    )
    validate_model(model)
    dataset = Dataset(
        name="cnn-blobs-eval", inputs=inputs, labels=labels, num_classes=n_classes
    )
    return model, dataset


def make_fixture(kind: str, seed: int) -> tuple[ModelGraph, Dataset]:
    if kind == "mlp-blobs":
        return make_mlp_blobs(seed)
    if kind == "cnn-blobs":
        return make_cnn_blobs(seed)
    raise ValueError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")


def write_fixture(kind: str, seed: int, out_dir: str | Path) -> tuple[Path, Path]:
    """Write <kind>.mcqm and <kind>-data.mcqd containers under out_dir."""
    model, dataset = make_fixture(kind, seed)
    out_dir = Path(out_dir)
    model_path = out_dir / f"{kind}.mcqm"
    dataset_path = out_dir / f"{kind}-data.mcqd"
    save_model(model, model_path)
    save_dataset(dataset, dataset_path)
    return model_path, dataset_path
