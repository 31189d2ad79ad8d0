"""File formats: tensor images, PPM previews, model checkpoints, metrics CSV.

Tensor image files are a single JSON header line (dims, label, provenance)
followed by the raw pixel buffer as little-endian 32-bit floats. Checkpoints
use the same layout with the layer schema in the header. PPM/PGM export
clamps to [0, 255] at write time only; stored tensors keep their raw values.
"""

from __future__ import annotations

import json
import os
from typing import Sequence

import numpy as np

from . import training
from .datasets import LabeledImage, Provenance

TENSOR_SUFFIX = ".timg"


class FormatError(ValueError):
    pass


def save_tensor_image(path: str, image: LabeledImage) -> None:
    h, w, c = image.pixels.shape
    header = {
        "dims": [h, w, c],
        "label": int(image.label) if image.label >= 0 else None,
        "provenance": image.provenance.value,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes())


def load_tensor_image(path: str) -> LabeledImage:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad tensor header") from exc
        dims = header["dims"]
        count = int(np.prod(dims))
        raw = fh.read()
    if len(raw) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} payload bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    label = header.get("label")
    provenance = Provenance(header.get("provenance", "real"))
    return LabeledImage(pixels, -1 if label is None else int(label), provenance)


def save_ppm(path: str, pixels: np.ndarray) -> None:
    """Binary PPM (3-channel) or PGM (1-channel) preview, clamped to [0, 255]."""
    h, w, c = pixels.shape
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        if c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        elif c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data[..., 0].tobytes())
        else:
            raise FormatError(f"PPM export supports 1 or 3 channels, got {c}")


_LAYER_NAMES = {
    "dense": training.Dense,
    "conv3x3": training.Conv3x3,
    "maxpool2": training.MaxPool2,
    "relu": training.ReLU,
    "softmax": training.Softmax,
}


def _layer_to_json(layer) -> list:
    if isinstance(layer, training.Dense):
        return ["dense", layer.in_features, layer.out_features]
    if isinstance(layer, training.Conv3x3):
        return ["conv3x3", layer.in_channels, layer.out_channels]
    if isinstance(layer, training.MaxPool2):
        return ["maxpool2"]
    if isinstance(layer, training.ReLU):
        return ["relu"]
    if isinstance(layer, training.Softmax):
        return ["softmax"]
    raise FormatError(f"unknown layer {layer!r}")


def _layer_from_json(entry: Sequence) -> object:
    name, *args = entry
    try:
        return _LAYER_NAMES[name](*args)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad layer entry {entry!r}") from exc


def save_checkpoint(path: str, params: training.ModelParams) -> None:
    header = {"schema": [_layer_to_json(layer) for layer in params.schema]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(params.flat, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> training.ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        raw = fh.read()
    schema = tuple(_layer_from_json(e) for e in header["schema"])
    expected = training.schema_param_count(schema)
    if len(raw) != 4 * expected:
        raise FormatError(f"{path}: {len(raw)} payload bytes for {expected} params")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return training.ModelParams(schema, flat)


def list_tensor_images(directory: str) -> list[str]:
    names = sorted(n for n in os.listdir(directory) if n.endswith(TENSOR_SUFFIX))
    return [os.path.join(directory, n) for n in names]
