import json

import numpy as np
import pytest

from rccpipe.slide import Patch, ingest_base_image

WHITE = (255, 255, 255)
STAIN = (150, 100, 140)  # mean OD ~0.3, comfortably above the 0.15 tissue cutoff


def make_patch(pixels, origin=(0, 0, 0), mpp=0.5):
    return Patch(pixels=np.asarray(pixels, dtype=np.uint8), origin=tuple(origin), mpp=mpp)


def flat_slide(width, height, color=WHITE, rects=()):
    """Flat RGB image: solid background plus (x, y, w, h, color) rectangles."""
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[:] = color
    for x, y, w, h, c in rects:
        image[y:y + h, x:x + w] = c
    return image


@pytest.fixture
def tissue_pyramid():
    """1024x1024 slide, fully stained, two levels (1024, 512)."""
    image = flat_slide(1024, 1024, color=STAIN)
    return ingest_base_image(image, mpp_base=0.5, magnification_base=40, tile_size=512)


def write_lookup_descriptor(tmp_path, task, entries, default=None, name="oracle",
                            input_size=128):
    """Write a lookup fixture (JSONL) plus its sidecar descriptor; returns the sidecar path."""
    fixture = tmp_path / f"{name}.jsonl"
    lines = []
    for (level, x, y), values in entries:
        lines.append(json.dumps({"level": level, "x": x, "y": y, "values": list(values)}))
    if default is not None:
        lines.append(json.dumps({"default": True, "values": list(default)}))
    fixture.write_text("\n".join(lines) + "\n")
    descriptor = tmp_path / f"{name}.json"
    descriptor.write_text(json.dumps({
        "backend": "lookup_table",
        "task": task,
        "input_size": input_size,
        "fixture": fixture.name,
    }))
    return descriptor


def write_stub_descriptor(tmp_path, task, kind, params=None, name=None, input_size=128):
    name = name or f"stub_{kind}"
    descriptor = tmp_path / f"{name}.json"
    descriptor.write_text(json.dumps({
        "backend": "procedural_stub",
        "task": task,
        "input_size": input_size,
        "stub": {"kind": kind, "params": params or {}},
    }))
    return descriptor
