"""Flat binary weight files: a JSON header, then raw little-endian arrays.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then each array's bytes in declaration order (C order). The header
records the model config, the array manifest (name, shape, dtype), and, for
adapter files, the adapter spec. Identical inputs produce identical bytes,
which is what the reproducibility checks diff.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdapterSpec, adapter_state_layout, spec_from_dict, spec_to_dict
from .errors import DataError, ShapeError
from .model import BaseWeights, ModelConfig, weight_layout
from .tensor import Tensor

MAGIC = b"PFORGE\x00\x01"
VERSION = 1

_DTYPE_TAGS = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


def _pack(path: Path, kind: str, config: ModelConfig, arrays: list[tuple[str, np.ndarray]],
          extra: dict | None = None) -> None:
    manifest = []
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        tag = arr.dtype.newbyteorder("<").str
        if tag not in _DTYPE_TAGS:
            raise ShapeError(f"array {name} has unsupported dtype {arr.dtype}")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        blobs.append(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())
    header = {"kind": kind, "config": config.as_dict(), "arrays": manifest}
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def _unpack(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a weight file (bad magic)")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt header ({exc})") from None
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = _DTYPE_TAGS.get(entry["dtype"])
            if dtype is None:
                raise DataError(f"{path}: unsupported dtype {entry['dtype']!r}")
            shape = tuple(entry["shape"])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise DataError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header, arrays


def save_weights(path, weights: BaseWeights) -> None:
    _pack(Path(path), "base", weights.config,
          [(name, t.data) for name, t in weights.named()])


def load_weights(path) -> BaseWeights:
    path = Path(path)
    header, arrays = _unpack(path)
    if header.get("kind") != "base":
        raise DataError(f"{path}: expected a base-weight file, found kind {header.get('kind')!r}")
    config = ModelConfig.from_dict(header["config"])
    expected = [name for name, _ in weight_layout(config)]
    if list(arrays.keys()) != expected:
        raise DataError(f"{path}: array names do not match the layout for its config")
    tensors = {name: Tensor(arr, name=name) for name, arr in arrays.items()}
    return BaseWeights(config, tensors)


def save_adapter(path, config: ModelConfig, spec: AdapterSpec,
                 state: Mapping[str, Tensor]) -> None:
    _pack(Path(path), "adapter", config,
          [(name, t.data) for name, t in state.items()],
          extra={"adapter": spec_to_dict(spec)})


def load_adapter(path) -> tuple[ModelConfig, AdapterSpec, dict[str, Tensor]]:
    path = Path(path)
    header, arrays = _unpack(path)
    if header.get("kind") != "adapter":
        raise DataError(f"{path}: expected an adapter file, found kind {header.get('kind')!r}")
    config = ModelConfig.from_dict(header["config"])
    spec = spec_from_dict(header.get("adapter", {}))
    expected = [name for name, _ in adapter_state_layout(config, spec)]
    if list(arrays.keys()) != expected:
        raise DataError(f"{path}: adapter arrays do not match the spec layout")
    state = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected}
    return config, spec, state
