"""Near-light image formation.

The predicted intensity of surface point ``x`` with normal ``n`` lit by LED
``i`` in channel ``c`` is::

    Psi[i,c] * rho[c] * max(n_s . (x - x_s) / |x - x_s|, 0) ** mu
                      * max((x_s - x) . n, 0) / |x_s - x| ** 3

The same model serves as the solver's residual engine and as the synthetic
ground-truth generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InsufficientLightsError,
    ParameterError,
    ShapeMismatchError,
    SingularityError,
)
from .scene import (
    CHANNELS,
    CameraModel,
    CaptureSet,
    LightSource,
    SurfaceState,
    normals_from_depth,
    shading_normals,
)

MIN_LIGHTS = 3


@dataclass(frozen=True)
class RenderOptions:
    noise_sigma: float = 0.0
    dark_level: float = 0.0
    quantization_bits: Optional[int] = None
    saturation_cap: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not 0 < self.saturation_cap <= 1:
            raise ParameterError("saturation_cap must lie in (0, 1]")
        if self.quantization_bits is not None and not 1 <= self.quantization_bits <= 32:
            raise ParameterError("quantization_bits must be between 1 and 32")


def shade_pixel(x, n, rho_c: float, light: LightSource, channel) -> float:
    """Intensity of one surface point under one light in one channel."""
    c = CHANNELS.index(channel) if isinstance(channel, str) else int(channel)
    xs = light.position
    lx, ly, lz = xs[0] - x[0], xs[1] - x[1], xs[2] - x[2]
    d = math.sqrt(lx * lx + ly * ly + lz * lz)
    if d == 0.0:
        raise SingularityError("surface point coincides with the light position")
    ns = light.principal_direction
    cos_emit = -(ns[0] * lx + ns[1] * ly + ns[2] * lz) / d
    aniso = max(cos_emit, 0.0) ** light.mu
    shade = max(lx * n[0] + ly * n[1] + lz * n[2], 0.0) / d ** 3
    return float(light.psi[c] * rho_c * aniso * shade)


def unit_shading(points: np.ndarray, normals: np.ndarray, light: LightSource) -> np.ndarray:
    """Shading at unit albedo and unit intensity, vectorized over ``N x 3`` inputs.

    ``normals`` must already be in the shading orientation.
    """
    L = light.position - points
    d = np.sqrt(np.einsum("...k,...k->...", L, L))
    if np.any(d == 0.0):
        raise SingularityError("surface point coincides with the light position")
    cos_emit = -(L @ light.principal_direction) / d
    aniso = np.maximum(cos_emit, 0.0) ** light.mu
    g = np.maximum(np.einsum("...k,...k->...", L, normals), 0.0)
    return aniso * g / d ** 3


def _surface_geometry(surface: SurfaceState, camera: CameraModel):
    if surface.shape != camera.shape:
        raise ShapeMismatchError(
            f"surface grid {surface.shape} does not match camera {camera.shape}")
    nm = normals_from_depth(surface.depth, camera)
    U, V = camera.metric_grid()
    pts = np.stack([U, V, surface.depth.z], axis=-1)
    return pts, shading_normals(nm.n), nm.mask


def _light_contribution(pts, m, valid, rho, light):
    sh = np.zeros(valid.shape)
    sh[valid] = unit_shading(pts[valid], m[valid], light)
    return sh[..., None] * rho * light.psi


def _noise_stream(seed: int, image_index: int, shape) -> np.ndarray:
    bitgen = np.random.Philox(np.random.SeedSequence([int(seed), int(image_index)]))
    return np.random.Generator(bitgen).standard_normal(int(np.prod(shape))).reshape(shape)


def _finish(clean: np.ndarray, valid: np.ndarray, opts: RenderOptions, image_index: int):
    img = clean + opts.dark_level
    if opts.noise_sigma > 0:
        img = img + opts.noise_sigma * _noise_stream(opts.rng_seed, image_index, img.shape)
    img = np.clip(img, 0.0, opts.saturation_cap)
    if opts.quantization_bits is not None:
        levels = float(2 ** opts.quantization_bits - 1)
        img = np.round(img * levels) / levels
    img[~valid] = 0.0
    return img


def render_single_light(surface: SurfaceState, light: LightSource, camera: CameraModel,
                        opts: RenderOptions = RenderOptions(), image_index: int = 0) -> np.ndarray:
    """H x W x 3 image of ``surface`` lit by one LED.

    Normals are always recomputed from the surface's own depth map so the
    image is consistent with what the solver can represent. ``image_index``
    selects the noise stream.
    """
    pts, m, valid = _surface_geometry(surface, camera)
    clean = _light_contribution(pts, m, valid, surface.albedo.rho, light)
    return _finish(clean, valid, opts, image_index)


def render_capture_set(surface: SurfaceState, lights: Sequence[LightSource], camera: CameraModel,
                       opts: RenderOptions = RenderOptions()) -> CaptureSet:
    """Single-light images, dark frame and colour-multiplexed trichrome image."""
    lights = list(lights)
    if len(lights) < MIN_LIGHTS:
        raise InsufficientLightsError(
            f"at least {MIN_LIGHTS} lights are required, got {len(lights)}")
    pts, m, valid = _surface_geometry(surface, camera)
    K = len(lights)
    singles = np.empty((K,) + camera.shape + (3,))
    tri = np.zeros(camera.shape + (3,))
    for i, light in enumerate(lights):
        clean = _light_contribution(pts, m, valid, surface.albedo.rho, light)
        singles[i] = _finish(clean, valid, opts, i)
        g = light.group_index
        tri[..., g] += clean[..., g]
    dark = _finish(np.zeros(camera.shape + (3,)), np.ones(camera.shape, bool), opts, K)
    trichrome = _finish(tri, valid, opts, K + 1)
    return CaptureSet(singles, dark, trichrome, lights, camera)
