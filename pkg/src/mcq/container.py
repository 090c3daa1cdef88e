"""On-disk container format for models and datasets.

A model container is a directory (or zip archive) holding a
manifest.json plus one raw little-endian binary blob per tensor.
Manifest layer entries carry name, kind, attrs, and per-tensor
records {file, dtype, shape} with dtype tag "f32" or "i32".
Quantized layers additionally carry scale_f (decimal string preserving
full precision), N, and bit_width.  Containers are written with stable
key order and fixed float formatting so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    BATCHNORM,
    LAYER_KINDS,
    Layer,
    ModelFormatError,
    ModelGraph,
    QuantizedTensor,
    validate_model,
)

MODEL_FORMAT = "mcq-model"
DATASET_FORMAT = "mcq-dataset"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}

_BN_PARAMS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class Dataset:
    """Evaluation inputs with integer class labels."""

    name: str
    inputs: np.ndarray  # (count, *input_shape) float32
    labels: np.ndarray  # (count,) int32
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ModelFormatError("dataset inputs and labels differ in length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ModelFormatError("dataset labels exceed the class count")

    def __len__(self) -> int:
        return len(self.inputs)


class _Source:
    """Uniform byte access over a container directory or zip archive."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if self.path.is_dir():
            self._zip = None
        elif self.path.is_file() and zipfile.is_zipfile(self.path):
            self._zip = zipfile.ZipFile(self.path)
        elif not self.path.exists():
            raise FileNotFoundError(f"container not found: {self.path}")
        else:
            raise ModelFormatError(f"not a container directory or zip: {self.path}")

    def read(self, name: str) -> bytes:
        if self._zip is not None:
            try:
                return self._zip.read(name)
            except KeyError:
                raise ModelFormatError(f"missing blob {name!r} in {self.path}")
        blob = self.path / name
        if not blob.is_file():
            raise ModelFormatError(f"missing blob {name!r} in {self.path}")
        return blob.read_bytes()


def _read_manifest(src: _Source, expected_format: str) -> dict:
    try:
        raw = src.read("manifest.json")
    except ModelFormatError:
        raise ModelFormatError(f"malformed manifest: no manifest.json in {src.path}")
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"malformed manifest: {e}")
    if not isinstance(manifest, dict) or manifest.get("format") != expected_format:
        raise ModelFormatError(
            f"malformed manifest: expected format {expected_format!r}"
        )
    return manifest


def _read_tensor(src: _Source, record: dict, context: str) -> np.ndarray:
    try:
        fname = record["file"]
        dtype_tag = record["dtype"]
        shape = tuple(int(d) for d in record["shape"])
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"malformed manifest: {context}: {e}")
    if dtype_tag not in _DTYPES:
        raise ModelFormatError(f"{context}: unknown dtype tag {dtype_tag!r}")
    raw = src.read(fname)
    expected = int(np.prod(shape)) * _DTYPES[dtype_tag].itemsize
    if len(raw) != expected:
        raise ModelFormatError(
            f"blob length mismatch for {fname!r}: "
            f"expected {expected} bytes, found {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype_tag]).reshape(shape)
    if dtype_tag == "f32" and not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"non-finite values in blob {fname!r}")
    return arr.copy()


def _tensor_record(name: str, arr: np.ndarray, dtype_tag: str) -> tuple[dict, bytes]:
    record = {
        "file": name,
        "dtype": dtype_tag,
        "shape": [int(d) for d in arr.shape],
    }
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_tag]).tobytes()
    return record, data


def _parse_scales(value, context: str) -> np.ndarray:
    values = value if isinstance(value, list) else [value]
    try:
        return np.array([float(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{context}: malformed scale_f")


def _format_scales(scales: np.ndarray):
    strings = [repr(float(s)) for s in scales]
    return strings[0] if len(strings) == 1 else strings


def load_model(path: str | Path) -> ModelGraph:
    """Load and validate a model container (directory or zip)."""
    src = _Source(Path(path))
    manifest = _read_manifest(src, MODEL_FORMAT)
    if "input_shape" not in manifest or "layers" not in manifest:
        raise ModelFormatError("malformed manifest: input_shape and layers required")
    layers = []
    for entry in manifest["layers"]:
        kind = entry.get("kind")
        name = entry.get("name", f"layer_{len(layers)}")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"{name}: unknown layer kind {kind!r}")
        attrs = dict(entry.get("attrs", {}))
        weights = bias = None
        quantized = None
        if "weights" in entry:
            weights = _read_tensor(src, entry["weights"], f"{name}.weights")
            if weights.dtype == _DTYPES["i32"]:
                counts = weights.astype(np.int64)
                for key in ("scale_f", "N", "bit_width"):
                    if key not in entry:
                        raise ModelFormatError(
                            f"{name}: quantized layer missing {key!r}"
                        )
                scales = _parse_scales(entry["scale_f"], name)
                n_raw = entry["N"]
                sample_counts = np.array(
                    n_raw if isinstance(n_raw, list) else [n_raw], dtype=np.int64
                )
                if len(sample_counts) != len(scales):
                    raise ModelFormatError(f"{name}: scale_f and N length mismatch")
                offsets = entry.get("group_offsets")
                quantized = QuantizedTensor(
                    shape=tuple(counts.shape),
                    counts=counts,
                    scales=scales,
                    sample_counts=sample_counts,
                    bit_width=int(entry["bit_width"]),
                    group_offsets=(
                        np.array(offsets, dtype=np.intp) if offsets else None
                    ),
                )
                _check_quantized(quantized, name)
                # Placeholder full-precision view for shape inference.
                weights = quantized.dequantize().astype(np.float32)
        if "bias" in entry:
            bias = _read_tensor(src, entry["bias"], f"{name}.bias")
        if kind == BATCHNORM:
            for key in _BN_PARAMS:
                if key not in entry:
                    raise ModelFormatError(f"{name}: batchnorm missing {key!r}")
                attrs[key] = _read_tensor(src, entry[key], f"{name}.{key}")
        layers.append(
            Layer(
                kind=kind,
                name=name,
                weights=weights,
                bias=bias,
                attrs=attrs,
                quantized=quantized,
            )
        )
    model = ModelGraph(
        layers=tuple(layers),
        input_shape=tuple(int(d) for d in manifest["input_shape"]),
    )
    validate_model(model)
    return model


def _check_quantized(qt: QuantizedTensor, name: str) -> None:
    total = int(np.abs(qt.counts).sum())
    if total != qt.total_samples:
        raise ModelFormatError(
            f"{name}: hit counts sum to {total}, expected {qt.total_samples}"
        )
    if not np.all(qt.scales > 0):
        raise ModelFormatError(f"{name}: scale_f must be positive")


def _write_entries(entries: dict[str, bytes], path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for name, data in entries.items():
        (path / name).write_bytes(data)


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2) + "\n").encode()


def save_model(model: ModelGraph, path: str | Path) -> None:
    """Write a model container; quantized layers keep their counts.

    Every quantized layer is serialized as i32 counts plus scale_f, N,
    and bit_width; full-precision layers as f32 blobs.  Repeated saves
    of the same graph produce byte-identical files.
    """
    entries: dict[str, bytes] = {}
    layer_entries = []
    for layer in model.layers:
        entry: dict = {"name": layer.name, "kind": layer.kind}
        if layer.quantized is not None:
            qt = layer.quantized
            _check_quantized(qt, layer.name)
            record, data = _tensor_record(
                f"{layer.name}.counts.i32", qt.counts.reshape(qt.shape), "i32"
            )
            entries[record["file"]] = data
            entry["weights"] = record
            entry["scale_f"] = _format_scales(qt.scales)
            n_values = [int(n) for n in qt.sample_counts]
            entry["N"] = n_values[0] if len(n_values) == 1 else n_values
            entry["bit_width"] = int(qt.bit_width)
            if qt.n_groups > 1:
                entry["group_offsets"] = [int(o) for o in qt.group_offsets]
        elif layer.weights is not None:
            record, data = _tensor_record(f"{layer.name}.weights.f32", layer.weights, "f32")
            entries[record["file"]] = data
            entry["weights"] = record
        if layer.bias is not None:
            record, data = _tensor_record(f"{layer.name}.bias.f32", layer.bias, "f32")
            entries[record["file"]] = data
            entry["bias"] = record
        attrs = {k: v for k, v in layer.attrs.items() if not isinstance(v, np.ndarray)}
        if layer.kind == BATCHNORM:
            for key in _BN_PARAMS:
                record, data = _tensor_record(
                    f"{layer.name}.{key}.f32", layer.attrs[key], "f32"
                )
                entries[record["file"]] = data
                entry[key] = record
        if attrs:
            entry["attrs"] = attrs
        layer_entries.append(entry)
    manifest = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "input_shape": [int(d) for d in model.input_shape],
        "layers": layer_entries,
    }
    entries_out = {"manifest.json": _manifest_bytes(manifest)}
    entries_out.update(entries)
    _write_entries(entries_out, Path(path))


def save_quantized(model: ModelGraph, path: str | Path) -> None:
    """Write a quantized model container.

    Every quantizable layer must carry hit counts unless it was
    deliberately skipped and keeps full-precision weights.
    """
    for layer in model.layers:
        if layer.is_quantizable and layer.quantized is None and layer.weights is None:
            raise ModelFormatError(f"{layer.name}: no weights to serialize")
    save_model(model, path)


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset container (directory or zip)."""
    src = _Source(Path(path))
    manifest = _read_manifest(src, DATASET_FORMAT)
    try:
        inputs = _read_tensor(src, manifest["inputs"], "dataset.inputs")
        labels = _read_tensor(src, manifest["labels"], "dataset.labels")
        num_classes = int(manifest["num_classes"])
        name = str(manifest.get("name", "dataset"))
    except KeyError as e:
        raise ModelFormatError(f"malformed manifest: dataset missing {e}")
    return Dataset(
        name=name,
        inputs=inputs.astype(np.float32),
        labels=labels.reshape(-1).astype(np.int32),
        num_classes=num_classes,
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    inputs_record, inputs_data = _tensor_record("inputs.f32", dataset.inputs, "f32")
    labels_record, labels_data = _tensor_record("labels.i32", dataset.labels, "i32")
    manifest = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "name": dataset.name,
        "num_classes": int(dataset.num_classes),
        "count": len(dataset),
        "inputs": inputs_record,
        "labels": labels_record,
    }
    _write_entries(
        {
            "manifest.json": _manifest_bytes(manifest),
            "inputs.f32": inputs_data,
            "labels.i32": labels_data,
        },
        Path(path),
    )
