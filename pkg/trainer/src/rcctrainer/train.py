"""Toy CNN training and export to the engine's model interchange format.

The exported file is a .npz archive of float32 weight arrays plus a
``__architecture__`` JSON entry describing the layer sequence, with a sidecar
JSON descriptor; this is exactly what the pipeline's model_file backend loads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidInput, TrainingFailed
from .schedule import decayed_learning_rate

ARCHITECTURE_KEY = "__architecture__"

TASK_ARITY = {"tumor2": 2, "subtype3": 3, "g4binary": 2, "grade3": 3}


@dataclass(frozen=True)
class ScheduleParams:
    lr0: float = 0.1
    decay_rate: float = 0.9
    decay_steps: int = 50
    staircase: bool = False


@dataclass
class Dataset:
    labels: list[str]
    patch_size: int
    train_x: np.ndarray  # (N, H, W, 3) uint8
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def load_dataset(dataset_dir: str | Path) -> Dataset:
    root = Path(dataset_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.is_file():
        raise InvalidInput(f"not a fixture dataset (missing dataset.json): {root}")
    manifest = json.loads(manifest_path.read_text())
    labels = manifest["labels"]

    def load_part(part):
        xs, ys = [], []
        for yi, label in enumerate(labels):
            part_dir = root / label / part
            for path in sorted(part_dir.glob("patch_*.npy")):
                xs.append(np.load(path))
                ys.append(yi)
        if not xs:
            raise InvalidInput(f"dataset has no {part} patches")
        return np.stack(xs), np.array(ys, dtype=np.int64)

    train_x, train_y = load_part("train")
    val_x, val_y = load_part("val")
    return Dataset(labels=labels, patch_size=int(manifest["patch_size"]),
                   train_x=train_x, train_y=train_y, val_x=val_x, val_y=val_y)


class _ToyNet(nn.Module):
    """Two conv blocks, global average pooling, linear head."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.c1 = nn.Conv2d(3, 8, 3, padding=1)
        self.c2 = nn.Conv2d(8, 16, 3, padding=1)
        self.head = nn.Linear(16, num_classes)

    def forward(self, x):
        x = torch.relu(self.c1(x))
        x = torch.max_pool2d(x, 2)
        x = torch.relu(self.c2(x))
        x = x.mean(dim=(2, 3))
        return self.head(x)


def _architecture(patch_size: int, num_classes: int) -> dict:
    return {
        "input": {"size": patch_size, "channels": 3},
        "num_classes": num_classes,
        "layers": [
            {"type": "conv2d", "weight": "c1.w", "bias": "c1.b", "stride": 1, "padding": 1},
            {"type": "relu"},
            {"type": "maxpool2d", "size": 2},
            {"type": "conv2d", "weight": "c2.w", "bias": "c2.b", "stride": 1, "padding": 1},
            {"type": "relu"},
            {"type": "global_avg_pool"},
            {"type": "dense", "weight": "d1.w", "bias": "d1.b"},
            {"type": "softmax"},
        ],
    }


def _export(model: _ToyNet, patch_size: int, num_classes: int, task: str,
            out_path: Path) -> Path:
    weights = {
        "c1.w": model.c1.weight.detach().numpy(),
        "c1.b": model.c1.bias.detach().numpy(),
        "c2.w": model.c2.weight.detach().numpy(),
        "c2.b": model.c2.bias.detach().numpy(),
        "d1.w": model.head.weight.detach().numpy(),
        "d1.b": model.head.bias.detach().numpy(),
    }
    arrays = {name: np.asarray(arr, dtype=np.float32) for name, arr in weights.items()}
    arch = _architecture(patch_size, num_classes)
    arrays[ARCHITECTURE_KEY] = np.frombuffer(
        json.dumps(arch, sort_keys=True).encode(), dtype=np.uint8)
    with open(out_path, "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "backend": "model_file",
        "task": task,
        "input_size": patch_size,
        "model": out_path.name,
    }, sort_keys=True, indent=2) + "\n")
    return sidecar


def train_and_export(
    dataset_dir: str | Path,
    task: str,
    out_path: str | Path,
    schedule: ScheduleParams = ScheduleParams(),
    epochs: int = 30,
    batch_size: int = 32,
    seed: int = 0,
) -> dict:
    """Train the toy classifier and export model + sidecar; returns a summary."""
    if task not in TASK_ARITY:
        raise InvalidInput(f"unknown task {task!r}")
    data = load_dataset(dataset_dir)
    num_classes = TASK_ARITY[task]
    if len(data.labels) != num_classes:
        raise InvalidInput(
            f"dataset has {len(data.labels)} labels but task {task} needs {num_classes}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = _ToyNet(num_classes)
    optimizer = torch.optim.SGD(model.parameters(), lr=schedule.lr0)
    loss_fn = nn.CrossEntropyLoss()

    def to_tensor(x):
        return torch.from_numpy(x.astype(np.float32).transpose(0, 3, 1, 2) / 255.0)

    train_x = to_tensor(data.train_x)
    train_y = torch.from_numpy(data.train_y)
    n = len(train_y)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            lr = decayed_learning_rate(schedule.lr0, schedule.decay_rate, step,
                                       schedule.decay_steps, schedule.staircase)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = loss_fn(model(train_x[idx]), train_y[idx])
            if not math.isfinite(loss.detach().item()):
                raise TrainingFailed(f"non-finite loss at step {step}")
            loss.backward()
            optimizer.step()
            step += 1

    model.eval()
    with torch.no_grad():
        logits = model(to_tensor(data.val_x))
        predictions = logits.argmax(dim=1).numpy()
    accuracy = float((predictions == data.val_y).mean())

    out_path = Path(out_path)
    sidecar = _export(model, data.patch_size, num_classes, task, out_path)
    return {
        "task": task,
        "labels": data.labels,
        "val_accuracy": accuracy,
        "steps": step,
        "final_lr": decayed_learning_rate(schedule.lr0, schedule.decay_rate, step,
                                          schedule.decay_steps, schedule.staircase),
        "model": str(out_path),
        "sidecar": str(sidecar),
    }
