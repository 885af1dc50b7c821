"""Cameras, lights, surfaces and capture sets.

Geometry lives in the camera frame, in millimetres. The projection is
orthographic with a metric pixel pitch: pixel ``(u_p, v_p)`` with depth ``z``
maps to ``((u_p - cu) * pitch_u, (v_p - cv) * pitch_v, z)``. Image arrays are
indexed ``[row, col] = [v, u]``.

Normal maps store ``normalize(-dz/du, -dz/dv, 1)`` (``n_z > 0``). The
reflective side of the membrane faces the camera and the LEDs, so shading
uses the opposite orientation; see :func:`shading_normals`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    EmptyMaskError,
    InvalidDepthError,
    ParameterError,
    ShapeMismatchError,
)

CHANNELS = ("R", "G", "B")
STENCILS = ("central", "forward")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraModel:
    image_width: int
    image_height: int
    pixel_pitch_u: float
    pixel_pitch_v: float
    cu: float
    cv: float
    nominal_distance: float

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ParameterError("image dimensions must be positive")
        if not (self.pixel_pitch_u > 0 and self.pixel_pitch_v > 0):
            raise ParameterError("pixel pitch must be > 0")
        if not self.nominal_distance > 0:
            raise ParameterError("nominal_distance must be > 0")
        if not (0 <= self.cu < self.image_width and 0 <= self.cv < self.image_height):
            raise ParameterError("principal point must lie inside the image")

    @classmethod
    def centered(cls, width: int, height: int, pitch: float, nominal_distance: float):
        """Camera with square pixels and the principal point at the image centre."""
        return cls(width, height, pitch, pitch, (width - 1) / 2.0, (height - 1) / 2.0,
                   nominal_distance)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    def metric_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (u, v) coordinates of every pixel centre, each H x W."""
        cols = (np.arange(self.image_width) - self.cu) * self.pixel_pitch_u
        rows = (np.arange(self.image_height) - self.cv) * self.pixel_pitch_v
        return np.meshgrid(cols, rows)

    def resized(self, factor: int) -> "CameraModel":
        """Camera after ``factor`` x ``factor`` area-average downsampling."""
        w, h = self.image_width // factor, self.image_height // factor
        cu = (self.cu + 0.5) / factor - 0.5
        cv = (self.cv + 0.5) / factor - 0.5
        return CameraModel(w, h, self.pixel_pitch_u * factor, self.pixel_pitch_v * factor,
                           min(max(cu, 0.0), w - 1), min(max(cv, 0.0), h - 1),
                           self.nominal_distance)


@dataclass(frozen=True)
class LightSource:
    position: np.ndarray
    principal_direction: np.ndarray
    mu: float
    psi: np.ndarray
    color_group: str

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "principal_direction", _frozen(self.principal_direction))
        object.__setattr__(self, "psi", _frozen(self.psi))
        if self.position.shape != (3,) or self.principal_direction.shape != (3,):
            raise ParameterError("position and principal_direction must be 3-vectors")
        if abs(np.linalg.norm(self.principal_direction) - 1.0) > 1e-9:
            raise ParameterError("principal_direction must be unit length")
        if self.mu < 0:
            raise ParameterError("anisotropy mu must be >= 0")
        if self.psi.shape != (3,) or np.any(self.psi < 0):
            raise ParameterError("psi must be a non-negative 3-vector")
        if self.color_group not in CHANNELS:
            raise ParameterError(f"color_group must be one of {CHANNELS}")

    @property
    def group_index(self) -> int:
        return CHANNELS.index(self.color_group)


@dataclass(frozen=True)
class DepthMap:
    z: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z))
        object.__setattr__(self, "mask", _frozen(self.mask, bool))
        if self.z.shape != self.mask.shape or self.z.ndim != 2:
            raise ShapeMismatchError("depth and mask must be matching 2-D grids")
        zv = self.z[self.mask]
        if not np.all(np.isfinite(zv)) or np.any(zv <= 0):
            raise InvalidDepthError("depth must be finite and > 0 on valid pixels")


@dataclass(frozen=True)
class LogDepthMap:
    zt: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "zt", _frozen(self.zt))
        object.__setattr__(self, "mask", _frozen(self.mask, bool))

    @classmethod
    def from_depth(cls, d: DepthMap) -> "LogDepthMap":
        zt = np.zeros_like(d.z)
        zt[d.mask] = np.log(d.z[d.mask])
        return cls(zt, d.mask)

    def to_depth(self) -> DepthMap:
        z = np.ones_like(self.zt)
        z[self.mask] = np.exp(self.zt[self.mask])
        return DepthMap(z, self.mask)


@dataclass(frozen=True)
class NormalMap:
    n: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", _frozen(self.n))
        object.__setattr__(self, "mask", _frozen(self.mask, bool))
        if self.n.shape != self.mask.shape + (3,):
            raise ShapeMismatchError("normal map must be H x W x 3 matching its mask")


@dataclass(frozen=True)
class AlbedoMap:
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _frozen(self.rho))
        if self.rho.ndim != 3 or self.rho.shape[2] != 3:
            raise ShapeMismatchError("albedo must be H x W x 3")
        if np.any(self.rho < 0):
            raise ParameterError("albedo must be non-negative")


@dataclass(frozen=True)
class SurfaceState:
    depth: DepthMap
    albedo: AlbedoMap
    normals: NormalMap
    analytic_normals: Optional[NormalMap] = None
    contact_mask: Optional[np.ndarray] = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.z.shape


@dataclass(frozen=True)
class CaptureSet:
    single_light_images: np.ndarray  # K x H x W x 3
    dark_image: np.ndarray
    trichrome_image: np.ndarray
    lights: tuple
    camera: CameraModel

    def __post_init__(self):
        imgs = _frozen(self.single_light_images)
        object.__setattr__(self, "single_light_images", imgs)
        object.__setattr__(self, "dark_image", _frozen(self.dark_image))
        object.__setattr__(self, "trichrome_image", _frozen(self.trichrome_image))
        object.__setattr__(self, "lights", tuple(self.lights))
        hw = self.camera.shape + (3,)
        if imgs.ndim != 4 or imgs.shape[1:] != hw:
            raise ShapeMismatchError(f"single-light images must be K x {hw}, got {imgs.shape}")
        if self.dark_image.shape != hw or self.trichrome_image.shape != hw:
            raise ShapeMismatchError("dark/trichrome images must match the camera dims")
        if imgs.shape[0] != len(self.lights):
            raise ShapeMismatchError("one single-light image per light is required")
        for a in (imgs, self.dark_image, self.trichrome_image):
            if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
                raise ParameterError("capture intensities must lie in [0, 1]")

    @property
    def num_lights(self) -> int:
        return len(self.lights)

    def subset(self, indices: Sequence[int]) -> "CaptureSet":
        idx = list(indices)
        return CaptureSet(self.single_light_images[idx], self.dark_image,
                          self.trichrome_image, [self.lights[i] for i in idx], self.camera)


def backproject(p, z: float, camera: CameraModel) -> np.ndarray:
    """Metric surface point for pixel ``p = (u_p, v_p)`` at depth ``z``."""
    if not z > 0:
        raise InvalidDepthError(f"depth must be > 0, got {z}")
    up, vp = p
    return np.array([(up - camera.cu) * camera.pixel_pitch_u,
                     (vp - camera.cv) * camera.pixel_pitch_v, float(z)])


def gradient_operators(mask: np.ndarray, camera: CameraModel, stencil: str = "central"):
    """Sparse d/du and d/dv operators over the valid pixels of ``mask``.

    Unknowns are the valid pixels in row-major order. Returns ``(Du, Dv,
    defined)`` where ``defined`` is the H x W mask of pixels whose derivative
    exists in both directions (at least one valid neighbour along each axis).
    With the central stencil interior pixels use central differences and mask
    boundaries fall back to one-sided first-order differences; the forward
    stencil prefers the forward neighbour.
    """
    if stencil not in STENCILS:
        raise ParameterError(f"unknown stencil {stencil!r}")
    mask = np.asarray(mask, bool)
    H, W = mask.shape
    idx = -np.ones((H, W), dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    P = int(mask.sum())

    def axis_operator(axis, h):
        fwd = np.zeros_like(mask)
        bwd = np.zeros_like(mask)
        if axis == 1:
            fwd[:, :-1] = mask[:, 1:]
            bwd[:, 1:] = mask[:, :-1]
            step = (0, 1)
        else:
            fwd[:-1, :] = mask[1:, :]
            bwd[1:, :] = mask[:-1, :]
            step = (1, 0)
        fwd &= mask
        bwd &= mask
        if stencil == "central":
            use_c = fwd & bwd
            use_f = fwd & ~bwd
            use_b = bwd & ~fwd
        else:
            use_c = np.zeros_like(mask)
            use_f = fwd
            use_b = bwd & ~fwd
        rows, cols, vals = [], [], []
        rr, cc = np.nonzero(use_c)
        me = idx[rr, cc]
        for sgn in (1, -1):
            rows.append(me)
            cols.append(idx[rr + sgn * step[0], cc + sgn * step[1]])
            vals.append(np.full(me.size, sgn / (2.0 * h)))
        rr, cc = np.nonzero(use_f)
        me = idx[rr, cc]
        rows += [me, me]
        cols += [idx[rr + step[0], cc + step[1]], me]
        vals += [np.full(me.size, 1.0 / h), np.full(me.size, -1.0 / h)]
        rr, cc = np.nonzero(use_b)
        me = idx[rr, cc]
        rows += [me, me]
        cols += [me, idx[rr - step[0], cc - step[1]]]
        vals += [np.full(me.size, 1.0 / h), np.full(me.size, -1.0 / h)]
        D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(P, P))
        return D, fwd | bwd

    Du, has_u = axis_operator(1, camera.pixel_pitch_u)
    Dv, has_v = axis_operator(0, camera.pixel_pitch_v)
    return Du, Dv, mask & has_u & has_v


def normals_from_gradients(zu: np.ndarray, zv: np.ndarray) -> np.ndarray:
    """Unit normals ``normalize(-zu, -zv, 1)`` stacked on the last axis."""
    q = np.sqrt(1.0 + zu * zu + zv * zv)
    return np.stack([-zu / q, -zv / q, 1.0 / q], axis=-1)


def normals_from_depth(d: DepthMap, camera: CameraModel, stencil: str = "central") -> NormalMap:
    if d.z.shape != camera.shape:
        raise ShapeMismatchError("depth map does not match camera dims")
    if not d.mask.any():
        raise EmptyMaskError("depth map has no valid pixels")
    Du, Dv, defined = gradient_operators(d.mask, camera, stencil)
    zval = d.z[d.mask]
    n = np.zeros(d.z.shape + (3,))
    nv = normals_from_gradients(Du @ zval, Dv @ zval)
    n[d.mask] = nv
    n[~defined] = 0.0
    return NormalMap(n, defined)


def shading_normals(n: np.ndarray) -> np.ndarray:
    """Orientation used by the image-formation model: towards the camera side."""
    return -n


def export_point_cloud(d: DepthMap, camera: CameraModel) -> np.ndarray:
    """One metric 3-D point per valid pixel, row-major order, as an N x 3 array."""
    if not d.mask.any():
        raise EmptyMaskError("cannot export a point cloud from an empty mask")
    U, V = camera.metric_grid()
    return np.stack([U[d.mask], V[d.mask], d.z[d.mask]], axis=1)


# --- synthetic scenes -------------------------------------------------------

SURFACE_KINDS = ("flat", "dome", "sinusoid", "sphere_indent", "cube_indent")


def _dome(U, V, p):
    """Ellipsoidal cap bulging away from the camera; apex at ``apex``."""
    a = p.get("radius_u", p.get("radius", 40.0))
    b = p.get("radius_v", p.get("radius", 40.0))
    c = p.get("radius_z", p.get("radius", 40.0))
    u0, v0 = p.get("center", (0.0, 0.0))
    apex = p["apex"]
    if min(a, b, c) <= 0:
        raise ParameterError("dome radii must be > 0")
    x, y = U - u0, V - v0
    q = (x / a) ** 2 + (y / b) ** 2
    if np.any(q >= 1.0):
        raise ParameterError("dome radius too small for the field of view")
    s = np.sqrt(1.0 - q)
    z = apex - c + c * s
    zu = -c * x / (a * a * s)
    zv = -c * y / (b * b * s)
    return z, zu, zv


def _base(U, V, p):
    base = p.get("base", "flat")
    if base == "flat":
        return np.full_like(U, p["z0"]), np.zeros_like(U), np.zeros_like(U)
    if base == "dome":
        return _dome(U, V, {**p.get("dome", {}), "apex": p["z0"]})
    raise ParameterError(f"unknown base surface {base!r}")


def _sphere_cap(U, V, base_at_center, p):
    R = p["radius"]
    delta = p["indent"]
    if not R > 0:
        raise ParameterError("sphere radius must be > 0")
    if not 0 < delta < R:
        raise ParameterError("indent depth must satisfy 0 < indent < radius")
    u0, v0 = p.get("center", (0.0, 0.0))
    zc = base_at_center - delta + R
    r2 = (U - u0) ** 2 + (V - v0) ** 2
    inside = r2 < R * R
    s = np.sqrt(np.where(inside, R * R - r2, 1.0))
    zs = np.where(inside, zc - s, np.inf)
    zu = np.where(inside, (U - u0) / s, 0.0)
    zv = np.where(inside, (V - v0) / s, 0.0)
    return zs, zu, zv


def _cube_face(U, V, base_at_center, p):
    w = p["half_width"]
    delta = p["indent"]
    slope = p.get("wall_slope", 1.0)
    if not w > 0 or not delta > 0 or not slope > 0:
        raise ParameterError("cube half_width, indent and wall_slope must be > 0")
    u0, v0 = p.get("center", (0.0, 0.0))
    th = math.radians(p.get("angle_deg", 0.0))
    ct, st = math.cos(th), math.sin(th)
    x = ct * (U - u0) + st * (V - v0)
    y = -st * (U - u0) + ct * (V - v0)
    ex = np.maximum(np.abs(x) - w, 0.0)
    ey = np.maximum(np.abs(y) - w, 0.0)
    dist = np.hypot(ex, ey)
    zf = base_at_center - delta + slope * dist
    safe = np.where(dist > 0, dist, 1.0)
    gx = np.where(dist > 0, np.sign(x) * ex / safe, 0.0) * slope
    gy = np.where(dist > 0, np.sign(y) * ey / safe, 0.0) * slope
    return zf, ct * gx - st * gy, st * gx + ct * gy


def make_synthetic_surface(kind: str, camera: CameraModel, albedo=(0.8, 0.8, 0.8),
                           **params) -> SurfaceState:
    """Analytic depth map with exact normals kept alongside for oracle comparison.

    ``kind`` is one of ``flat``, ``dome``, ``sinusoid``, ``sphere_indent`` and
    ``cube_indent``. Lengths are millimetres; ``z0`` (or the dome ``apex``)
    defaults to ``camera.nominal_distance``. Indents take ``base`` (``flat`` or
    ``dome`` with a nested ``dome`` parameter dict), ``center`` and ``indent``
    plus ``radius`` (sphere) or ``half_width``/``wall_slope``/``angle_deg``
    (cube). The sinusoid takes ``amplitude`` and ``wavelength``.
    """
    if kind not in SURFACE_KINDS:
        raise ParameterError(f"unknown surface kind {kind!r}")
    U, V = camera.metric_grid()
    p = dict(params)
    p.setdefault("z0", camera.nominal_distance)
    contact = None
    if kind == "flat":
        z, zu, zv = _base(U, V, {"z0": p["z0"]})
    elif kind == "dome":
        z, zu, zv = _dome(U, V, {**p, "apex": p.get("apex", p["z0"])})
    elif kind == "sinusoid":
        A = p.get("amplitude", 0.5)
        lam = p.get("wavelength", 5.0)
        if not lam > 0:
            raise ParameterError("wavelength must be > 0")
        k = 2 * math.pi / lam
        z = p["z0"] + A * np.sin(k * U) * np.sin(k * V)
        zu = A * k * np.cos(k * U) * np.sin(k * V)
        zv = A * k * np.sin(k * U) * np.cos(k * V)
    else:
        zb, zbu, zbv = _base(U, V, p)
        u0, v0 = p.get("center", (0.0, 0.0))
        bc = _base(np.array([[u0]]), np.array([[v0]]), p)[0][0, 0]
        if kind == "sphere_indent":
            zi, ziu, ziv = _sphere_cap(U, V, bc, p)
        else:
            zi, ziu, ziv = _cube_face(U, V, bc, p)
        contact = zi < zb
        z = np.where(contact, zi, zb)
        zu = np.where(contact, ziu, zbu)
        zv = np.where(contact, ziv, zbv)
    if np.any(z <= 0):
        raise ParameterError("surface crosses the camera plane (z <= 0)")
    mask = np.ones(camera.shape, bool)
    depth = DepthMap(z, mask)
    rho = np.broadcast_to(np.asarray(albedo, float), camera.shape + (3,))
    return SurfaceState(
        depth=depth,
        albedo=AlbedoMap(rho),
        normals=normals_from_depth(depth, camera),
        analytic_normals=NormalMap(normals_from_gradients(zu, zv), mask),
        contact_mask=None if contact is None else _frozen(contact, bool),
        kind=kind,
        params=p,
    )


def ring_lights(count: int, radius: float = 6.0, height: float = 0.0, tilt_deg: float = 20.0,
                mu: float = 1.0, psi=(1.0, 1.0, 1.0), phase_deg: float = 0.0) -> list[LightSource]:
    """LEDs on a ring around the optical axis, tilted inwards by ``tilt_deg``.

    Colour groups are contiguous index blocks: the first third red, then
    green, then blue.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    t = math.radians(tilt_deg)
    lights = []
    for k in range(count):
        phi = math.radians(phase_deg) + 2 * math.pi * k / count
        pos = (radius * math.cos(phi), radius * math.sin(phi), height)
        nd = np.array([-math.sin(t) * math.cos(phi), -math.sin(t) * math.sin(phi), math.cos(t)])
        lights.append(LightSource(pos, nd / np.linalg.norm(nd), mu, psi,
                                  CHANNELS[min(3 * k // count, 2)]))
    return lights
