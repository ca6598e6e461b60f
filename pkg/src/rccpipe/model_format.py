"""Portable serialized-network format and its numpy forward evaluator.

A model file is a ``.npz`` archive holding named float32 weight arrays plus a
``__architecture__`` entry: a JSON document listing the layer sequence. The
evaluator supports the small op set the trainer exports (conv2d, relu,
maxpool2d, global_avg_pool, flatten, dense, softmax) and runs entirely on
numpy, so models are framework-neutral and bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInput

ARCHITECTURE_KEY = "__architecture__"


@dataclass(frozen=True)
class NetworkModel:
    architecture: dict
    weights: dict[str, np.ndarray]

    @property
    def input_size(self) -> int:
        return int(self.architecture["input"]["size"])

    @property
    def num_outputs(self) -> int:
        return int(self.architecture["num_classes"])

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Run one (H, W, 3) uint8 image through the network; returns the output vector."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise InvalidInput("expected an (h, w, 3) image")
        x = image.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)  # (C, H, W)
        for layer in self.architecture["layers"]:
            kind = layer["type"]
            if kind == "conv2d":
                x = _conv2d(x, self.weights[layer["weight"]], self.weights[layer["bias"]],
                            int(layer.get("stride", 1)), int(layer.get("padding", 0)))
            elif kind == "relu":
                x = np.maximum(x, 0.0)
            elif kind == "maxpool2d":
                x = _maxpool2d(x, int(layer["size"]), int(layer.get("stride", layer["size"])))
            elif kind == "global_avg_pool":
                x = x.reshape(x.shape[0], -1).mean(axis=1)
            elif kind == "flatten":
                x = x.reshape(-1)
            elif kind == "dense":
                x = self.weights[layer["weight"]] @ x + self.weights[layer["bias"]]
            elif kind == "softmax":
                z = x - x.max()
                e = np.exp(z)
                x = e / e.sum()
            else:
                raise InvalidInput(f"unsupported layer type: {kind}")
        return np.asarray(x, dtype=np.float64).ravel()


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2], w.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # windows: (C_in, H_out, W_out, kh, kw); w: (C_out, C_in, kh, kw)
    out = np.einsum("cxyhw,ochw->oxy", windows, w, optimize=True)
    return out + b[:, None, None]


def _maxpool2d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    windows = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    return windows.max(axis=(3, 4))


def save_model(path: str | Path, architecture: dict, weights: dict[str, np.ndarray]) -> None:
    arrays = {name: np.asarray(arr, dtype=np.float32) for name, arr in weights.items()}
    arrays[ARCHITECTURE_KEY] = np.frombuffer(
        json.dumps(architecture, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> NetworkModel:
    path = Path(path)
    if not path.is_file():
        raise InvalidInput(f"model file not found: {path}")
    with np.load(path) as data:
        if ARCHITECTURE_KEY not in data:
            raise InvalidInput(f"{path} is not a model file (missing architecture entry)")
        architecture = json.loads(bytes(data[ARCHITECTURE_KEY]).decode())
        weights = {k: data[k] for k in data.files if k != ARCHITECTURE_KEY}
    for layer in architecture["layers"]:
        for key in ("weight", "bias"):
            if key in layer and layer[key] not in weights:
                raise InvalidInput(f"model missing weight array {layer[key]!r}")
    return NetworkModel(architecture=architecture, weights=weights)
