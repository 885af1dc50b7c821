"""Normal-map accuracy metrics and angular error maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyMaskError, ShapeMismatchError

# Error map lookup table: entry k is (R, G, B) = (k, 0, 255 - k), so index 0
# is pure blue and index 255 pure red. An error e maps to
# round(255 * min(e / max_degrees, 1)).
COLORMAP = np.stack([np.arange(256), np.zeros(256, int), 255 - np.arange(256)], axis=1).astype(np.uint8)


@dataclass
class MetricReport:
    aae: float
    mabse: float
    pixel_count: int
    per_press: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _arrays(pred, gt, mask):
    p = getattr(pred, "n", pred)
    g = getattr(gt, "n", gt)
    p = np.asarray(p, float)
    g = np.asarray(g, float)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ShapeMismatchError(f"normal arrays disagree: {p.shape} vs {g.shape}")
    if mask is None:
        m = np.ones(p.shape[:-1], bool)
    else:
        m = np.asarray(mask, bool)
        if m.shape != p.shape[:-1]:
            raise ShapeMismatchError("mask does not match the normal maps")
    if not m.any():
        raise EmptyMaskError("metric mask is empty")
    return p[m], g[m]


def angular_errors(pred, gt) -> np.ndarray:
    """Per-normal angle in degrees.

    For unit vectors this is ``arccos(clamp(p . g, -1, 1))``; it is evaluated
    as ``atan2(|p x g|, p . g)``, which stays exact near 0 and 180 degrees
    where the arccos form loses about 1e-6 degrees to rounding.
    """
    p = np.asarray(pred, float)
    g = np.asarray(gt, float)
    dots = np.sum(p * g, axis=-1)
    cross = np.linalg.norm(np.cross(p, g), axis=-1)
    return np.degrees(np.arctan2(cross, dots))


def aae(pred, gt, mask=None) -> float:
    """Average angular error in degrees over ``mask``.

    ``pred``/``gt`` may be NormalMaps or ``... x 3`` arrays of unit vectors.
    """
    p, g = _arrays(pred, gt, mask)
    return float(np.mean(angular_errors(p, g)))


def mabse(pred, gt, mask=None) -> float:
    """Mean absolute error of the normal components, ``sum |n - n'|_1 / (3 |M|)``."""
    p, g = _arrays(pred, gt, mask)
    return float(np.sum(np.abs(p - g)) / (3.0 * p.shape[0]))


def error_map(pred, gt, mask=None, max_degrees: float = 25.0) -> np.ndarray:
    """H x W x 3 uint8 RGB image of angular error; pixels outside ``mask`` are black."""
    p = np.asarray(getattr(pred, "n", pred), float)
    g = np.asarray(getattr(gt, "n", gt), float)
    if p.shape != g.shape:
        raise ShapeMismatchError("normal maps disagree in shape")
    m = np.ones(p.shape[:-1], bool) if mask is None else np.asarray(mask, bool)
    err = angular_errors(p, g)
    idx = np.round(255.0 * np.clip(err / max_degrees, 0.0, 1.0)).astype(int)
    img = COLORMAP[idx]
    img[~m] = 0
    return img


def report(pred, gt, mask=None, per_press=None) -> MetricReport:
    p, _ = _arrays(pred, gt, mask)
    return MetricReport(aae=aae(pred, gt, mask), mabse=mabse(pred, gt, mask),
                        pixel_count=int(p.shape[0]), per_press=list(per_press or []))
