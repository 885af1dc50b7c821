"""Capture directories, dark subtraction, contact masks and training datasets.

A capture directory holds ``light_00.png ... light_{K-1}.png``, ``dark.png``,
``trichrome.png`` (16-bit linear PNG) and ``scene.json``.

Dataset file layout (little-endian): magic ``b"NLPS"``, version ``u16``,
record count ``u64``, then ``count`` records of eight ``float32`` values
``(u, v, r, g, b, nx, ny, nz)``. The companion JSON file lists the blocks of
records (capture id, press id, image size, count) in file order.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, FormatError, ParameterError, ShapeMismatchError
from .io import light_filename, read_image, read_scene, write_image, write_scene
from .scene import CaptureSet, NormalMap

log = logging.getLogger(__name__)

DATASET_MAGIC = b"NLPS"
DATASET_VERSION = 1
RECORD_FIELDS = ("u", "v", "r", "g", "b", "nx", "ny", "nz")


@dataclass(frozen=True)
class CalibSample:
    u: float
    v: float
    r: float
    g: float
    b: float
    nx: float
    ny: float
    nz: float


@dataclass
class SampleSet:
    """Samples from one press, stored column-wise as float32.

    ``records`` is N x 8 in :data:`RECORD_FIELDS` order; ``pixels`` holds the
    (row, col) each record came from.
    """
    records: np.ndarray
    pixels: np.ndarray
    capture_id: str
    press_id: int
    image_shape: tuple

    def __len__(self):
        return self.records.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self.records[:, :5]

    @property
    def normals(self) -> np.ndarray:
        return self.records[:, 5:]

    def __iter__(self):
        for rec in self.records:
            yield CalibSample(*map(float, rec))


@dataclass
class CalibDataset:
    blocks: list = field(default_factory=list)  # list of SampleSet
    split_seed: int = 0

    def __len__(self):
        return sum(len(b) for b in self.blocks)

    @property
    def records(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros((0, 8), np.float32)
        return np.concatenate([b.records for b in self.blocks])

    @property
    def inputs(self) -> np.ndarray:
        return self.records[:, :5]

    @property
    def normals(self) -> np.ndarray:
        return self.records[:, 5:]

    @property
    def provenance(self) -> list:
        return [(b.capture_id, b.press_id) for b in self.blocks]

    @property
    def press_ids(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, int)
        return np.concatenate([np.full(len(b), b.press_id) for b in self.blocks])


# --- capture directories -----------------------------------------------------------


def save_capture(capture: CaptureSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(capture.single_light_images):
        write_image(d / light_filename(i), img)
    write_image(d / "dark.png", capture.dark_image)
    write_image(d / "trichrome.png", capture.trichrome_image)
    write_scene(d / "scene.json", capture.camera, capture.lights)


def load_capture(directory) -> CaptureSet:
    """Read and validate a capture directory."""
    d = Path(directory)
    camera, lights = read_scene(d / "scene.json")
    expect = camera.shape + (3,)

    def load(name):
        img = read_image(d / name)
        if img.shape != expect:
            raise ShapeMismatchError(f"{name}: image is {img.shape}, scene.json says {expect}")
        return img

    singles = np.stack([load(light_filename(i)) for i in range(len(lights))])
    return CaptureSet(singles, load("dark.png"), load("trichrome.png"), lights, camera)


def preprocess(capture: CaptureSet) -> CaptureSet:
    """Dark-subtract every image (clamped to [0, 1]) and zero the dark frame."""
    dark = capture.dark_image
    singles = np.clip(capture.single_light_images - dark[None], 0.0, 1.0)
    tri = np.clip(capture.trichrome_image - dark, 0.0, 1.0)
    return CaptureSet(singles, np.zeros_like(dark), tri, capture.lights, capture.camera)


def downsample_capture(capture: CaptureSet, max_side: int) -> CaptureSet:
    """Area-average by the smallest integer factor bringing both sides to <= ``max_side``."""
    H, W = capture.camera.shape
    factor = int(np.ceil(max(H, W) / float(max_side)))
    if factor <= 1:
        return capture
    h, w = H // factor, W // factor

    def pool(a):
        a = a[..., : h * factor, : w * factor, :]
        shp = a.shape[:-3] + (h, factor, w, factor, a.shape[-1])
        return a.reshape(shp).mean(axis=(-4, -2))

    return CaptureSet(pool(capture.single_light_images), pool(capture.dark_image),
                      pool(capture.trichrome_image), capture.lights,
                      capture.camera.resized(factor))


# --- masks and samples ---------------------------------------------------------------


def contact_mask(reference: np.ndarray, pressed: np.ndarray, tau: float = 0.03,
                 min_blob: int = 16) -> np.ndarray:
    """Pixels whose appearance changed under contact.

    Thresholds the max-channel absolute difference at ``tau``, drops
    8-connected blobs smaller than ``min_blob`` pixels, then applies one 3x3
    morphological closing.
    """
    reference = np.asarray(reference, float)
    pressed = np.asarray(pressed, float)
    if reference.shape != pressed.shape:
        raise ShapeMismatchError("reference and pressed images differ in shape")
    diff = np.abs(pressed - reference)
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    m = diff > tau
    labels, n = ndimage.label(m, structure=np.ones((3, 3)))
    if n:
        sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
        keep = np.concatenate([[False], sizes >= min_blob])
        m = keep[labels]
    padded = np.pad(m, 1)
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3)))
    return closed[1:-1, 1:-1]


def normalized_coords(shape) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates scaled to [-1, 1] along each axis (H x W each)."""
    H, W = shape
    u = 2.0 * np.arange(W) / max(W - 1, 1) - 1.0
    v = 2.0 * np.arange(H) / max(H - 1, 1) - 1.0
    return np.meshgrid(u, v)


def build_samples(capture: CaptureSet, normals: NormalMap, mask: np.ndarray,
                  capture_id: str = "capture", press_id: int = 0,
                  max_samples: int | None = None, seed: int = 0) -> SampleSet:
    """Pair trichrome pixels with solver normals inside ``mask``.

    ``max_samples`` optionally caps the count with a seeded subsample that
    keeps row-major order.
    """
    mask = np.asarray(mask, bool)
    shape = capture.camera.shape
    if mask.shape != shape or normals.n.shape[:2] != shape:
        raise ShapeMismatchError("mask, normals and capture dims disagree")
    if np.any(mask & ~normals.mask):
        raise ParameterError("mask must be a subset of the normal map's valid pixels")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        warnings.warn(f"{capture_id}: empty contact mask, no samples", RuntimeWarning, stacklevel=2)
    if max_samples is not None and rows.size > max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(rows.size, max_samples, replace=False))
        rows, cols = rows[keep], cols[keep]
    U, V = normalized_coords(shape)
    rgb = capture.trichrome_image[rows, cols]
    n = normals.n[rows, cols]
    rec = np.column_stack([U[rows, cols], V[rows, cols], rgb, n]).astype(np.float32)
    return SampleSet(rec, np.column_stack([rows, cols]), str(capture_id), int(press_id),
                     tuple(shape))


def merge_datasets(sample_sets: Sequence[SampleSet], fractions=(0.8, 0.2), seed: int = 0):
    """Split presses (not pixels) into train and validation datasets.

    Presses are shuffled with ``seed``; each split keeps its presses in
    ascending press-id order.
    """
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ParameterError("fractions must be two non-negative numbers summing to 1")
    seen = set()
    for s in sample_sets:
        for r, c in s.pixels:
            key = (s.capture_id, int(r), int(c))
            if key in seen:
                raise ParameterError(f"duplicate sample for {key}")
            seen.add(key)
    by_press = {}
    for s in sample_sets:
        by_press.setdefault(s.press_id, []).append(s)
    presses = sorted(by_press)
    n_train = int(round(fractions[0] * len(presses)))
    if n_train < 1 or n_train >= len(presses):
        raise ParameterError(
            f"{len(presses)} presses cannot fill both splits at fractions {tuple(fractions)}")
    order = np.random.default_rng(seed).permutation(len(presses))
    train_ids = sorted(presses[i] for i in order[:n_train])
    val_ids = sorted(presses[i] for i in order[n_train:])
    train = CalibDataset([b for p in train_ids for b in by_press[p]], seed)
    val = CalibDataset([b for p in val_ids for b in by_press[p]], seed)
    return train, val


# --- dataset files ------------------------------------------------------------


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_dataset(path, dataset: CalibDataset, extra: dict | None = None) -> None:
    rec = np.ascontiguousarray(dataset.records, dtype="<f4")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HQ", DATASET_VERSION, rec.shape[0]))
        f.write(rec.tobytes())
    meta = {
        "format": "NLPS",
        "version": DATASET_VERSION,
        "fields": list(RECORD_FIELDS),
        "split_seed": dataset.split_seed,
        "count": int(rec.shape[0]),
        "blocks": [
            {"capture_id": b.capture_id, "press_id": b.press_id,
             "image_shape": list(b.image_shape), "count": len(b),
             "pixels": b.pixels.tolist()}
            for b in dataset.blocks
        ],
    }
    if extra:
        meta.update(extra)
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=1)
        f.write("\n")


def read_dataset(path) -> CalibDataset:
    with open(path, "rb") as f:
        head = f.read(14)
        if len(head) < 14 or head[:4] != DATASET_MAGIC:
            raise FormatError(f"{path}: not an NLPS dataset file")
        version, count = struct.unpack("<HQ", head[4:])
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        payload = f.read()
    if len(payload) != count * 8 * 4:
        raise FormatError(f"{path}: expected {count} records, payload has {len(payload)} bytes")
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, 8).astype(np.float32)
    side = _sidecar(path)
    if not os.path.exists(side):
        blocks = [SampleSet(rec, np.zeros((count, 2), int), "unknown", 0, (0, 0))]
        return CalibDataset(blocks, 0)
    with open(side) as f:
        meta = json.load(f)
    blocks, start = [], 0
    for b in meta["blocks"]:
        n = int(b["count"])
        pix = np.asarray(b.get("pixels", []), dtype=int).reshape(n, 2)
        blocks.append(SampleSet(rec[start:start + n], pix, b["capture_id"], int(b["press_id"]),
                                tuple(b["image_shape"])))
        start += n
    if start != count:
        raise FormatError(f"{side}: block counts do not add up to {count}")
    return CalibDataset(blocks, int(meta.get("split_seed", 0)))


def export_csv(path, dataset: CalibDataset) -> None:
    rec = dataset.records
    press = dataset.press_ids
    with open(path, "w") as f:
        f.write("press_id," + ",".join(RECORD_FIELDS) + "\n")
        for pid, row in zip(press, rec):
            f.write(f"{pid}," + ",".join(repr(float(x)) for x in row) + "\n")


def normal_coverage(normals: np.ndarray, bins: int = 9) -> dict:
    """Histogram of normal tilt (degrees from the optical axis) and azimuth."""
    n = np.asarray(normals, float).reshape(-1, 3)
    if n.size == 0:
        raise EmptyMaskError("no normals to summarise")
    tilt = np.degrees(np.arccos(np.clip(n[:, 2], -1, 1)))
    azim = np.degrees(np.arctan2(n[:, 1], n[:, 0])) % 360.0
    t_hist, t_edges = np.histogram(tilt, bins=bins, range=(0.0, 45.0))
    a_hist, a_edges = np.histogram(azim, bins=8, range=(0.0, 360.0))
    return {
        "tilt_edges_deg": t_edges.tolist(),
        "tilt_counts": t_hist.tolist(),
        "tilt_beyond_45": int(np.sum(tilt > 45.0)),
        "azimuth_edges_deg": a_edges.tolist(),
        "azimuth_counts": a_hist.tolist(),
        "max_tilt_deg": float(tilt.max()),
    }
