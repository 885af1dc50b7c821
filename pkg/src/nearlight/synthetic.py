"""Standard synthetic sensor: camera, LED ring, dome membranes and indenters."""

from __future__ import annotations

import numpy as np

from .scene import CameraModel, make_synthetic_surface, ring_lights

PIXEL_PITCH = 0.12  # mm/px at 128 px
FIELD_OF_VIEW = 128 * PIXEL_PITCH
NOMINAL_DISTANCE = 15.0
LED_RING_RADIUS = 6.0
LED_PSI = (55.0, 52.0, 57.0)
LED_MU = 1.0
LED_TILT_DEG = 20.0
ALBEDO = (0.8, 0.78, 0.82)

# three membrane shapes: spherical, flatter spherical, elliptical
DOMES = {
    "sphere40": {"radius": 40.0},
    "sphere25": {"radius": 25.0},
    "ellipse": {"radius_u": 30.0, "radius_v": 55.0, "radius_z": 35.0},
}
INDENTERS = ("sphere", "cube", "ridge")


def standard_camera(resolution: int = 128) -> CameraModel:
    return CameraModel.centered(resolution, resolution, FIELD_OF_VIEW / resolution, NOMINAL_DISTANCE)


def standard_lights(count: int = 12):
    return ring_lights(count, radius=LED_RING_RADIUS, height=0.0, tilt_deg=LED_TILT_DEG,
                       mu=LED_MU, psi=LED_PSI)


def standard_scene(camera: CameraModel, dome: str = "sphere40", center=(1.0, -0.5),
                   radius: float = 4.0, indent: float = 1.0):
    """Sphere pressed into a dome membrane."""
    return make_synthetic_surface("sphere_indent", camera, albedo=ALBEDO, base="dome",
                                  dome=DOMES[dome], center=tuple(center), radius=radius,
                                  indent=indent)


def press_scene(camera: CameraModel, indenter: str, center, rng: np.random.Generator,
                dome: str = "sphere40"):
    """One randomized press of one of the three training indenters."""
    center = tuple(float(c) for c in center)
    base = dict(albedo=ALBEDO, base="dome", dome=DOMES[dome], center=center)
    if indenter == "sphere":
        return make_synthetic_surface("sphere_indent", camera, radius=float(rng.uniform(2.5, 4.0)),
                                      indent=float(rng.uniform(0.6, 1.2)), **base)
    if indenter == "cube":
        return make_synthetic_surface("cube_indent", camera,
                                      half_width=float(rng.uniform(1.0, 1.8)),
                                      indent=float(rng.uniform(0.4, 0.8)),
                                      wall_slope=float(rng.uniform(0.6, 1.0)),
                                      angle_deg=float(rng.uniform(0, 90)), **base)
    if indenter == "ridge":
        # large, shallow sphere: a gentle contact patch
        return make_synthetic_surface("sphere_indent", camera, radius=float(rng.uniform(7.0, 9.0)),
                                      indent=float(rng.uniform(0.4, 0.7)), **base)
    raise ValueError(f"unknown indenter {indenter!r}")
