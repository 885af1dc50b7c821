"""File formats: PFM grids, 16-bit linear PNG images, masks and ``scene.json``."""

from __future__ import annotations

import json
import os

import cv2
import numpy as np

from .errors import FormatError, MissingFileError, ParameterError, UnitMismatchError
from .scene import CameraModel, LightSource

SCENE_FORMAT = "nearlight-scene"
SCENE_VERSION = 1
UNITS = {"length": "mm", "pixel": "px", "pixel_pitch": "mm/px", "intensity": "linear"}


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian 32-bit float PFM; 2-D arrays become greyscale ``Pf``."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM needs H x W or H x W x 3 data, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {path}")
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii").split()
        scale = float(f.readline().decode("ascii").strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if tag == b"PF" else 1
        raw = np.frombuffer(f.read(), dtype=dtype)
    if raw.size != w * h * ch:
        raise FormatError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return raw.reshape(shape)[::-1].astype(np.float32)


def write_image(path, img: np.ndarray) -> None:
    """Linear image in [0, 1]; ``.png`` is 16-bit (full scale 1.0), ``.pfm`` float."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        write_pfm(path, img)
        return
    a = np.clip(np.asarray(img, float), 0.0, 1.0)
    q = np.round(a * 65535.0).astype(np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(path, q):
        raise FormatError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    path = str(path)
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {os.path.basename(path)} ({path})")
    if path.lower().endswith(".pfm"):
        return read_pfm(path).astype(np.float64)
    q = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if q is None:
        raise FormatError(f"could not decode image {path}")
    if q.dtype == np.uint16:
        a = q.astype(np.float64) / 65535.0
    elif q.dtype == np.uint8:
        a = q.astype(np.float64) / 255.0
    else:
        raise FormatError(f"{path}: unsupported sample type {q.dtype}")
    if a.ndim == 3:
        a = a[..., 2::-1]
    return a


def quantize16(img: np.ndarray) -> np.ndarray:
    """The exact values a 16-bit PNG round trip produces."""
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def write_mask(path, mask: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8)):
        raise FormatError(f"could not write {path}")


def read_mask(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: {os.path.basename(str(path))} ({path})")
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise FormatError(f"could not decode mask {path}")
    return m > 127


def scene_to_dict(camera: CameraModel, lights) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "units": dict(UNITS),
        "camera": {
            "image_width": camera.image_width,
            "image_height": camera.image_height,
            "pixel_pitch_u": camera.pixel_pitch_u,
            "pixel_pitch_v": camera.pixel_pitch_v,
            "principal_point": [camera.cu, camera.cv],
            "nominal_distance": camera.nominal_distance,
        },
        "lights": [
            {
                "position": [float(x) for x in l.position],
                "principal_direction": [float(x) for x in l.principal_direction],
                "mu": float(l.mu),
                "psi": [float(x) for x in l.psi],
                "color_group": l.color_group,
            }
            for l in lights
        ],
    }


def scene_from_dict(d: dict):
    if d.get("format") != SCENE_FORMAT:
        raise FormatError(f"scene.json: expected format {SCENE_FORMAT!r}")
    units = d.get("units", {})
    for key, want in UNITS.items():
        if units.get(key) != want:
            raise UnitMismatchError(
                f"scene.json: unit {key!r} is {units.get(key)!r}, expected {want!r}")
    try:
        c = d["camera"]
        camera = CameraModel(int(c["image_width"]), int(c["image_height"]),
                             float(c["pixel_pitch_u"]), float(c["pixel_pitch_v"]),
                             float(c["principal_point"][0]), float(c["principal_point"][1]),
                             float(c["nominal_distance"]))
        lights = [LightSource(l["position"], l["principal_direction"], float(l["mu"]),
                              l["psi"], l["color_group"]) for l in d["lights"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"scene.json: malformed entry ({exc!r})") from exc
    except ParameterError as exc:
        raise FormatError(f"scene.json: invalid value ({exc})") from exc
    return camera, lights


def write_scene(path, camera, lights) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(camera, lights), f, indent=2)
        f.write("\n")


def read_scene(path):
    if not os.path.exists(path):
        raise MissingFileError(f"missing file: scene.json ({path})")
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"scene.json: parse error: {exc}") from exc
    return scene_from_dict(d)


def light_filename(i: int) -> str:
    return f"light_{i:02d}.png"
