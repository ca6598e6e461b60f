"""Secondary validation for low-confidence tumor patches.

Patches whose tumor probability falls strictly inside the (low, high) band get
a second opinion from three strategies: the dihedral rotation/flip ensemble
(median of 8), a finer-magnification re-read at the same physical center, and
the four-neighbor context ensemble (mean of 4). A majority vote over the
strategy verdicts decides; a two-way tie defers to the rotation/flip result.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInput, StrategyUnavailable, TriageFailed
from .inference import ClassifierHandle, predict
from .slide import Patch, PatchCoordinate, SlidePyramid, read_region

Preprocess = Callable[[Patch], Patch]


@dataclass(frozen=True)
class TriageConfig:
    low: float = 0.2
    high: float = 0.8
    decision_threshold: float = 0.5
    magnification_factor: int = 2
    neighbor_count: int = 4
    enable_rotation_flip: bool = True
    enable_magnification: bool = True
    enable_neighbor: bool = True

    def __post_init__(self):
        if not (0 <= self.low < self.decision_threshold < self.high <= 1):
            raise InvalidInput("triage thresholds must satisfy 0 <= low < decision_threshold < high <= 1")
        if self.magnification_factor < 2 or self.magnification_factor & (self.magnification_factor - 1):
            raise InvalidInput("magnification_factor must be a power of two >= 2")
        if self.neighbor_count != 4:
            raise InvalidInput("neighbor_count is fixed at 4")


@dataclass(frozen=True)
class Verdict:
    is_tumor: bool
    probability: float
    provenance: str  # base | rotation_flip | magnification | neighbor | vote


def needs_secondary(p_tumor: float, cfg: TriageConfig) -> bool:
    """True iff the probability falls strictly inside the trigger band."""
    if not (0 <= p_tumor <= 1):
        raise InvalidInput("probability must be in [0, 1]")
    return cfg.low < p_tumor < cfg.high


def dihedral_variants(patch: Patch) -> list[Patch]:
    """The 8 symmetries of a square patch: identity, 3 rotations, 4 reflections."""
    px = patch.pixels
    if px.shape[0] != px.shape[1]:
        raise InvalidInput("dihedral variants require a square patch")
    variants = [
        px,
        np.rot90(px, -1),           # 90 deg clockwise
        np.rot90(px, 2),            # 180 deg
        np.rot90(px, 1),            # 270 deg clockwise
        px[:, ::-1],                # horizontal reflection
        px[::-1, :],                # vertical reflection
        px.transpose(1, 0, 2),      # main diagonal
        px[::-1, ::-1].transpose(1, 0, 2),  # anti-diagonal
    ]
    return [dataclasses.replace(patch, pixels=np.ascontiguousarray(v)) for v in variants]


def _p_tumor(handle: ClassifierHandle, patch: Patch, preprocess: Optional[Preprocess]) -> float:
    if preprocess is not None:
        patch = preprocess(patch)
    return float(predict(handle, patch).values[1])


def rotation_flip_verdict(
    handle: ClassifierHandle,
    patch: Patch,
    cfg: TriageConfig,
    preprocess: Optional[Preprocess] = None,
) -> Verdict:
    """Median tumor probability over the 8 dihedral variants."""
    probs = [_p_tumor(handle, v, preprocess) for v in dihedral_variants(patch)]
    median = float(np.median(probs))
    return Verdict(is_tumor=median >= cfg.decision_threshold, probability=median,
                   provenance="rotation_flip")


def magnification_verdict(
    handles: dict[str, ClassifierHandle],
    pyramid: SlidePyramid,
    coord: PatchCoordinate,
    cfg: TriageConfig,
    preprocess: Optional[Preprocess] = None,
) -> Verdict:
    """Re-read the same physical center one pyramid step finer and re-classify.

    Uses the magnification-matched handle when the map provides one, else the
    base handle. Raises StrategyUnavailable when no finer level exists.
    """
    steps = int(np.log2(cfg.magnification_factor))
    finer = coord.level - steps
    if finer < 0:
        raise StrategyUnavailable("no finer pyramid level for magnification strategy")
    factor = 2 ** steps
    fx = factor * coord.x + (factor * coord.size - coord.size) // 2
    fy = factor * coord.y + (factor * coord.size - coord.size) // 2
    patch = read_region(pyramid, PatchCoordinate(level=finer, x=fx, y=fy, size=coord.size))
    handle = handles.get("magnification") or handles["base"]
    p = _p_tumor(handle, patch, preprocess)
    return Verdict(is_tumor=p >= cfg.decision_threshold, probability=p, provenance="magnification")


def neighbor_verdict(
    handle: ClassifierHandle,
    pyramid: SlidePyramid,
    coord: PatchCoordinate,
    cfg: TriageConfig,
    preprocess: Optional[Preprocess] = None,
) -> Verdict:
    """Mean tumor probability over the four diagonally half-offset context patches."""
    half = coord.size // 2
    probs = []
    for dy in (-half, half):
        for dx in (-half, half):
            patch = read_region(
                pyramid, PatchCoordinate(level=coord.level, x=coord.x + dx, y=coord.y + dy, size=coord.size)
            )
            probs.append(_p_tumor(handle, patch, preprocess))
    mean = float(np.mean(probs))
    return Verdict(is_tumor=mean >= cfg.decision_threshold, probability=mean, provenance="neighbor")


def majority_vote(
    v1: Optional[Verdict],
    v2: Optional[Verdict],
    v3: Optional[Verdict],
) -> Verdict:
    """Majority of strategy verdicts; a 1-1 split defers to rotation_flip.

    Unavailable strategies are passed as None; at least two valid verdicts
    are required.
    """
    valid = [v for v in (v1, v2, v3) if v is not None]
    if len(valid) < 2:
        raise TriageFailed(f"only {len(valid)} valid strategy verdicts (need >= 2)")
    # sorted fsum keeps the mean independent of argument order
    mean_p = math.fsum(sorted(v.probability for v in valid)) / len(valid)
    tumor_votes = sum(v.is_tumor for v in valid)
    if tumor_votes * 2 == len(valid):
        # exactly two valid verdicts that disagree: defer to rotation_flip
        preferred = next((v for v in valid if v.provenance == "rotation_flip"), valid[0])
        decision = preferred.is_tumor
    else:
        decision = tumor_votes * 2 > len(valid)
    return Verdict(is_tumor=decision, probability=mean_p, provenance="vote")


def triage_patch(
    handles: dict[str, ClassifierHandle],
    pyramid: SlidePyramid,
    coord: PatchCoordinate,
    patch: Patch,
    cfg: TriageConfig,
    preprocess: Optional[Preprocess] = None,
) -> tuple[Verdict, dict]:
    """Run the enabled strategies for one band-interior patch and vote.

    Returns the vote verdict and an audit record of per-strategy statistics.
    """
    base = handles["base"]
    verdicts: list[Optional[Verdict]] = []
    audit: dict = {}
    if cfg.enable_rotation_flip:
        v = rotation_flip_verdict(base, patch, cfg, preprocess)
        verdicts.append(v)
        audit["rotation_flip"] = v.probability
    else:
        verdicts.append(None)
    if cfg.enable_magnification:
        try:
            v = magnification_verdict(handles, pyramid, coord, cfg, preprocess)
            verdicts.append(v)
            audit["magnification"] = v.probability
        except StrategyUnavailable:
            verdicts.append(None)
            audit["magnification"] = None
    else:
        verdicts.append(None)
    if cfg.enable_neighbor:
        v = neighbor_verdict(base, pyramid, coord, cfg, preprocess)
        verdicts.append(v)
        audit["neighbor"] = v.probability
    else:
        verdicts.append(None)
    vote = majority_vote(*verdicts)
    audit["vote"] = vote.probability
    return vote, audit
