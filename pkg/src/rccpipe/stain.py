"""Optical-density transforms and Macenko reference-based stain normalization.

The OD transform uses a plus-one guard, OD = -log10((v+1)/(io+1)), so the
rgb -> OD -> rgb round-trip is exact for every 8-bit value. Stain vectors are
estimated from the principal plane of the OD point cloud with percentile
angular extremes (Macenko), and patches are recomposed against a reference
profile after per-stain concentration rescaling.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .errors import DegenerateStain, InsufficientTissue, InvalidInput

DEFAULT_BETA = 0.15          # OD transparency cutoff
DEFAULT_ALPHA = 1.0          # angular percentile
CONCENTRATION_PERCENTILE = 99
MIN_STAINED_PIXELS = 100
_RANK_RATIO = 0.01           # second singular value below this ratio => rank-1 cloud


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray       # (3, 2), column 0 hematoxylin, column 1 eosin
    max_concentrations: np.ndarray  # (2,)
    io: int = 255

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2):
            raise InvalidInput("stain_matrix must be 3x2")
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6) or np.any(m < 0):
            raise InvalidInput("stain_matrix columns must be non-negative unit vectors")
        if np.any(c <= 0):
            raise InvalidInput("max_concentrations must be strictly positive")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    def to_json(self) -> str:
        return json.dumps(
            {
                "stain_matrix": {"shape": [3, 2], "data": [float(v) for v in self.stain_matrix.ravel()]},
                "max_concentrations": [float(v) for v in self.max_concentrations],
                "io": self.io,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        obj = json.loads(text)
        m = np.array(obj["stain_matrix"]["data"], dtype=np.float64).reshape(obj["stain_matrix"]["shape"])
        return cls(stain_matrix=m, max_concentrations=np.array(obj["max_concentrations"]), io=int(obj["io"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "StainProfile":
        return cls.from_json(Path(path).read_text())


def od_lookup_table(io: int = 255) -> np.ndarray:
    """Per-channel OD for each of the 256 8-bit values."""
    v = np.arange(256, dtype=np.float64)
    return -np.log10((v + 1.0) / (io + 1.0))


def rgb_to_od(pixels: np.ndarray, io: int = 255) -> np.ndarray:
    """OD = -log10((v+1)/(io+1)) per channel."""
    if io <= 0:
        raise InvalidInput("io must be positive")
    v = np.asarray(pixels, dtype=np.float64)
    return -np.log10((v + 1.0) / (io + 1.0))


def od_to_rgb(od: np.ndarray, io: int = 255) -> np.ndarray:
    """Inverse OD transform: v = clamp(round((io+1) * 10^-OD - 1), 0, 255)."""
    od = np.asarray(od, dtype=np.float64)
    v = (io + 1.0) * np.power(10.0, -od) - 1.0
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def _stained_od(pixels: np.ndarray, io: int, beta: float) -> np.ndarray:
    """(N, 3) OD rows for pixels whose channel-mean OD passes the transparency cutoff."""
    od = rgb_to_od(pixels.reshape(-1, 3), io=io)
    return od[od.mean(axis=1) >= beta]


def estimate_stain_profile(
    patch,
    beta: float = DEFAULT_BETA,
    alpha: float = DEFAULT_ALPHA,
    io: int = 255,
) -> StainProfile:
    """Macenko stain-vector estimation from a patch's OD point cloud."""
    od = _stained_od(np.asarray(patch.pixels), io, beta)
    if od.shape[0] < MIN_STAINED_PIXELS:
        raise InsufficientTissue(f"only {od.shape[0]} stained pixels (need >= {MIN_STAINED_PIXELS})")

    # principal directions of the (uncentered) OD cloud
    _, s, vt = np.linalg.svd(od, full_matrices=False)
    if s[1] < _RANK_RATIO * s[0]:
        raise DegenerateStain("OD point cloud has rank < 2")
    plane = vt[:2].T.copy()  # (3, 2)
    # orient the first principal direction toward the cloud so projected
    # angles stay in (-90, 90) and never wrap at +-180
    if np.mean(od @ plane[:, 0]) < 0:
        plane[:, 0] = -plane[:, 0]

    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    phi_min = np.percentile(phi, alpha)
    phi_max = np.percentile(phi, 100 - alpha)
    v1 = plane @ np.array([np.cos(phi_min), np.sin(phi_min)])
    v2 = plane @ np.array([np.cos(phi_max), np.sin(phi_max)])

    def clean(v):
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        n = np.linalg.norm(v)
        if n == 0:
            raise DegenerateStain("degenerate stain direction")
        return v / n

    v1, v2 = clean(v1), clean(v2)
    # hematoxylin = column with the larger blue-channel OD component
    if v1[2] >= v2[2]:
        matrix = np.column_stack([v1, v2])
    else:
        matrix = np.column_stack([v2, v1])

    conc = unmix_concentrations(od, matrix)
    max_c = np.percentile(conc, CONCENTRATION_PERCENTILE, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateStain("non-positive concentration scale")
    return StainProfile(stain_matrix=matrix, max_concentrations=max_c, io=io)


def unmix_concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Per-pixel non-negative stain concentrations for (N, 3) OD rows.

    The unconstrained least-squares solution equals the NNLS solution wherever
    it is already non-negative; only the remaining pixels get an NNLS solve.
    """
    od = np.asarray(od, dtype=np.float64)
    c, *_ = np.linalg.lstsq(stain_matrix, od.T, rcond=None)
    c = c.T  # (N, 2)
    bad = np.any(c < 0, axis=1)
    if np.any(bad):
        for i in np.flatnonzero(bad):
            c[i], _ = nnls(stain_matrix, od[i])
    return c


def normalize_patch(patch, reference: StainProfile, beta: float = DEFAULT_BETA,
                    alpha: float = DEFAULT_ALPHA):
    """Normalize a patch's stains against a reference profile.

    Returns (patch, pass_through). Patches where stain estimation fails
    (insufficient tissue or degenerate stain) are returned unchanged with
    pass_through=True; the pipeline never aborts on them.
    """
    pixels = np.asarray(patch.pixels)
    try:
        source = estimate_stain_profile(patch, beta=beta, alpha=alpha, io=reference.io)
    except (InsufficientTissue, DegenerateStain):
        return patch, True

    od = rgb_to_od(pixels.reshape(-1, 3), io=reference.io)
    conc = unmix_concentrations(od, source.stain_matrix)
    conc *= reference.max_concentrations / source.max_concentrations
    od_new = conc @ reference.stain_matrix.T
    out = od_to_rgb(od_new, io=reference.io).reshape(pixels.shape)
    return dataclasses.replace(patch, pixels=out), False
