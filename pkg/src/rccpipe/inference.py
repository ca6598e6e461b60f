"""Patch-classifier abstraction with interchangeable backends.

Three backends sit behind one ``predict`` contract: serialized-network model
files (see model_format), coordinate-lookup oracles (JSON-lines fixtures),
and procedural stubs computing probabilities from simple pixel statistics.
Handles are immutable and safe to share across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import model_format
from .errors import BackendError, InvalidInput, NotFound, SchemaMismatch
from .slide import Patch

TASK_LABELS = {
    "tumor2": ["non_tumor", "tumor"],
    "subtype3": ["ccRCC", "pRCC", "chRCC"],
    "g4binary": ["non_g4", "g4"],
    "grade3": ["G1", "G2", "G3"],
}

_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LabelSchema:
    task: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise InvalidInput("label names must be unique")
        expected = TASK_LABELS.get(self.task)
        if expected is not None and len(self.labels) != len(expected):
            raise InvalidInput(f"task {self.task} requires {len(expected)} labels")

    @property
    def arity(self) -> int:
        return len(self.labels)

    @classmethod
    def for_task(cls, task: str) -> "LabelSchema":
        if task not in TASK_LABELS:
            raise InvalidInput(f"unknown task {task!r}")
        return cls(task=task, labels=tuple(TASK_LABELS[task]))


@dataclass(frozen=True)
class LabelProbs:
    schema: LabelSchema
    values: np.ndarray
    renormalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.schema.arity,):
            raise InvalidInput("probability vector length must match schema arity")
        object.__setattr__(self, "values", v)


def _finalize_probs(schema: LabelSchema, values: np.ndarray) -> LabelProbs:
    """Enforce the LabelProbs invariants, renormalizing (and flagging) drifted outputs."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (schema.arity,):
        raise SchemaMismatch(f"backend produced {v.shape[0] if v.ndim == 1 else v.shape} values for arity {schema.arity}")
    if np.any(~np.isfinite(v)):
        raise BackendError("backend produced non-finite probabilities")
    drift = np.any(v < -_SUM_TOLERANCE) or np.any(v > 1 + _SUM_TOLERANCE) or abs(v.sum() - 1.0) > _SUM_TOLERANCE
    if drift:
        v = np.clip(v, 0.0, None)
        total = v.sum()
        if total <= 0:
            raise BackendError("backend produced a degenerate probability vector")
        v = v / total
    return LabelProbs(schema=schema, values=v, renormalized=bool(drift))


@dataclass(frozen=True)
class ClassifierHandle:
    schema: LabelSchema
    input_size: int
    expected_mpp: Optional[float]
    backend: str  # model_file | lookup_table | procedural_stub
    version: str
    normalization: str = "none"  # none | macenko
    predict_fn: Callable[[Patch], np.ndarray] = field(repr=False, compare=False, default=None)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(z)):
        raise InvalidInput("NaN in logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def argmax_label(probs: LabelProbs) -> int:
    """Index of the maximum probability; ties break to the lowest index."""
    return int(np.argmax(probs.values))


def predict(handle: ClassifierHandle, patch: Patch) -> LabelProbs:
    if handle.backend != "lookup_table":
        if patch.width != handle.input_size or patch.height != handle.input_size:
            raise InvalidInput(
                f"patch is {patch.width}x{patch.height}, classifier expects {handle.input_size}"
            )
    try:
        values = handle.predict_fn(patch)
    except (InvalidInput, BackendError, SchemaMismatch):
        raise
    except Exception as exc:  # backend execution failure
        raise BackendError(f"{handle.backend} backend failed: {exc}") from exc
    return _finalize_probs(handle.schema, values)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _load_lookup(descriptor: dict, base_dir: Path) -> ClassifierHandle:
    schema = LabelSchema.for_task(descriptor["task"])
    fixture_path = base_dir / descriptor["fixture"]
    if not fixture_path.is_file():
        raise NotFound(f"lookup fixture not found: {fixture_path}")
    raw = fixture_path.read_bytes()
    table: dict[tuple[int, int, int], np.ndarray] = {}
    default = None
    for line in raw.decode().splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.shape != (schema.arity,):
            raise SchemaMismatch(
                f"fixture record has {values.shape[0]} values, task {schema.task} needs {schema.arity}"
            )
        if rec.get("default"):
            default = values
        else:
            table[(int(rec["level"]), int(rec["x"]), int(rec["y"]))] = values

    def lookup_predict(patch: Patch) -> np.ndarray:
        key = tuple(patch.origin)
        if key in table:
            return table[key]
        if default is not None:
            return default
        raise BackendError(f"no fixture entry for coordinate {key}")

    return ClassifierHandle(
        schema=schema,
        input_size=int(descriptor.get("input_size", 512)),
        expected_mpp=descriptor.get("expected_mpp"),
        backend="lookup_table",
        version=_digest(raw),
        predict_fn=lookup_predict,
    )


_STUB_KINDS = {}


def _stub(name):
    def register(fn):
        _STUB_KINDS[name] = fn
        return fn
    return register


@_stub("constant")
def _stub_constant(schema: LabelSchema, params: dict):
    values = np.asarray(params["values"], dtype=np.float64)
    if values.shape != (schema.arity,):
        raise SchemaMismatch("constant stub values do not match task arity")
    return lambda patch: values


@_stub("mean_red")
def _stub_mean_red(schema: LabelSchema, params: dict):
    # p_tumor ramps linearly from 0.02 (no red) to 0.98 (saturated red)
    if schema.arity != 2:
        raise SchemaMismatch("mean_red stub requires a 2-class task")

    def fn(patch: Patch) -> np.ndarray:
        p = 0.02 + 0.96 * float(np.mean(patch.pixels[:, :, 0])) / 255.0
        return np.array([1.0 - p, p])

    return fn


@_stub("mean_intensity")
def _stub_mean_intensity(schema: LabelSchema, params: dict):
    # dihedral-invariant: depends only on the pixel multiset
    if schema.arity != 2:
        raise SchemaMismatch("mean_intensity stub requires a 2-class task")

    def fn(patch: Patch) -> np.ndarray:
        p = float(np.mean(patch.pixels)) / 255.0
        return np.array([1.0 - p, p])

    return fn


@_stub("channel_fractions")
def _stub_channel_fractions(schema: LabelSchema, params: dict):
    if schema.arity != 3:
        raise SchemaMismatch("channel_fractions stub requires a 3-class task")

    def fn(patch: Patch) -> np.ndarray:
        means = patch.pixels.reshape(-1, 3).mean(axis=0) + 1e-9
        return means / means.sum()

    return fn


def _load_stub(descriptor: dict) -> ClassifierHandle:
    schema = LabelSchema.for_task(descriptor["task"])
    stub = descriptor["stub"]
    kind = stub.get("kind")
    if kind not in _STUB_KINDS:
        raise NotFound(f"unknown procedural stub kind {kind!r}")
    fn = _STUB_KINDS[kind](schema, stub.get("params", {}))
    return ClassifierHandle(
        schema=schema,
        input_size=int(descriptor.get("input_size", 512)),
        expected_mpp=descriptor.get("expected_mpp"),
        backend="procedural_stub",
        version=_digest(json.dumps(stub, sort_keys=True).encode()),
        normalization=descriptor.get("normalization", "none"),
        predict_fn=fn,
    )


def _load_model_file(descriptor: dict, base_dir: Path) -> ClassifierHandle:
    schema = LabelSchema.for_task(descriptor["task"])
    model_path = base_dir / descriptor["model"]
    if not model_path.is_file():
        raise NotFound(f"model file not found: {model_path}")
    model = model_format.load_model(model_path)
    if model.num_outputs != schema.arity:
        raise SchemaMismatch(
            f"model has {model.num_outputs} outputs, task {schema.task} needs {schema.arity}"
        )
    input_size = int(descriptor["input_size"])
    if model.input_size != input_size:
        raise SchemaMismatch(
            f"model input size {model.input_size} != declared input_size {input_size}"
        )

    def model_predict(patch: Patch) -> np.ndarray:
        return model.forward(patch.pixels)

    return ClassifierHandle(
        schema=schema,
        input_size=input_size,
        expected_mpp=descriptor.get("expected_mpp"),
        backend="model_file",
        version=_digest(model_path.read_bytes()),
        normalization=descriptor.get("normalization", "none"),
        predict_fn=model_predict,
    )


def load_classifier(source: str | Path | dict, base_dir: str | Path | None = None) -> ClassifierHandle:
    """Build a handle from a backend descriptor (sidecar JSON path or dict).

    Model files are refused without their sidecar: pass the sidecar JSON, not
    the raw model archive.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.suffix == ".npz":
            raise InvalidInput("model files require a sidecar JSON descriptor; pass the sidecar path")
        if not path.is_file():
            raise NotFound(f"descriptor not found: {path}")
        descriptor = json.loads(path.read_text())
        base = path.parent
    else:
        descriptor = dict(source)
        base = Path(base_dir) if base_dir is not None else Path(".")

    backend = descriptor.get("backend")
    if "task" not in descriptor:
        raise SchemaMismatch("descriptor missing task declaration")
    if backend == "lookup_table":
        return _load_lookup(descriptor, base)
    if backend == "procedural_stub":
        return _load_stub(descriptor)
    if backend == "model_file":
        return _load_model_file(descriptor, base)
    raise InvalidInput(f"unknown backend {backend!r}")
