"""Per-pixel MLP mapping ``(u, v, r, g, b)`` to a unit surface normal.

Hidden layers are affine -> batch-norm -> ReLU -> dropout; the output layer
is affine to 3 values followed by normalization to unit length. Everything,
including backpropagation and the optimizers, is plain numpy.

Weight file layout (little-endian): magic ``b"NLNW"``, version ``u16``,
layer count ``u16``, the layer widths as ``u32``, dropout rate ``f32``, mode
byte (0 train, 1 eval), then ``float32`` arrays in order: for every hidden
layer ``W`` (in x out, row-major), ``b``, ``gamma``, ``beta``,
``running_mean``, ``running_var``; then the output layer ``W`` and ``b``.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DivergenceError, EmptyMaskError, FormatError, NumericError, ParameterError
from .metrics import angular_errors
from .scene import NormalMap

log = logging.getLogger(__name__)

DEFAULT_DIMS = (5, 256, 256, 128, 3)
WEIGHTS_MAGIC = b"NLNW"
WEIGHTS_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
NORM_EPS = 1e-8
CHUNK = 1024


class MlpModel:
    def __init__(self, dims=DEFAULT_DIMS, dropout: float = 0.2, seed: int = 0,
                 dtype=np.float32):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 3 or dims[-1] != 3:
            raise ParameterError("need at least one hidden layer and 3 outputs")
        if not 0 <= dropout < 1:
            raise ParameterError("dropout must lie in [0, 1)")
        self.dims = dims
        self.dropout = float(dropout)
        self.dtype = np.dtype(dtype)
        self.mode = "train"
        rng = np.random.default_rng(seed)
        self.layers = []
        for i, (fin, fout) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fin)
            layer = {
                "W": rng.uniform(-bound, bound, (fin, fout)).astype(self.dtype),
                "b": rng.uniform(-bound, bound, fout).astype(self.dtype),
            }
            if i < len(dims) - 2:
                layer.update(
                    gamma=np.ones(fout, self.dtype), beta=np.zeros(fout, self.dtype),
                    running_mean=np.zeros(fout, self.dtype),
                    running_var=np.ones(fout, self.dtype))
            self.layers.append(layer)

    # parameters that receive gradients, in a fixed order
    def param_keys(self):
        keys = []
        for i, layer in enumerate(self.layers):
            for k in ("W", "b", "gamma", "beta"):
                if k in layer:
                    keys.append((i, k))
        return keys

    def train_mode(self):
        self.mode = "train"
        return self

    def eval_mode(self):
        self.mode = "eval"
        return self

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "MlpModel":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        for layer in m.layers:
            for k in layer:
                layer[k] = layer[k].astype(m.dtype)
        return m


def _normalize(y):
    norm = np.maximum(np.sqrt(np.sum(y * y, axis=1, keepdims=True)), NORM_EPS)
    return y / norm, norm


def forward(model: MlpModel, x: np.ndarray, rng: Optional[np.random.Generator] = None,
            cache: Optional[list] = None) -> np.ndarray:
    """Unit normals (N x 3) for inputs (N x 5).

    In train mode batch statistics are used and, when ``rng`` is given,
    inverted dropout masks are drawn from it; pass a list as ``cache`` to
    keep the intermediates needed by :func:`backward`. Eval-mode calls run
    in fixed-size zero-padded chunks, so a pixel's output does not depend on
    how many other pixels share the call.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ParameterError(f"expected N x {model.dims[0]} inputs, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    if model.mode == "eval":
        return _forward_eval(model, x)
    if x.shape[0] < 2:
        raise ParameterError("batch size must be >= 2 in train mode")
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        a = h @ layer["W"] + layer["b"]
        if i == last:
            out, norm = _normalize(a)
            if cache is not None:
                cache.append({"h": h, "y": a, "norm": norm, "out": out})
            return out
        mean = a.mean(axis=0)
        var = a.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mean) * inv_std
        bn = layer["gamma"] * xhat + layer["beta"]
        n = a.shape[0]
        layer["running_mean"] = (BN_MOMENTUM * layer["running_mean"]
                                 + (1 - BN_MOMENTUM) * mean).astype(model.dtype)
        layer["running_var"] = (BN_MOMENTUM * layer["running_var"]
                                + (1 - BN_MOMENTUM) * var * n / max(n - 1, 1)).astype(model.dtype)
        r = np.maximum(bn, 0)
        drop = None
        if rng is not None and model.dropout > 0:
            keep = 1.0 - model.dropout
            drop = (rng.random(r.shape) < keep).astype(model.dtype) / keep
            r = r * drop
        if cache is not None:
            cache.append({"h": h, "xhat": xhat, "inv_std": inv_std, "bn": bn, "drop": drop})
        h = r


def _forward_eval_chunk(model, x):
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        a = h @ layer["W"] + layer["b"]
        if i == last:
            return _normalize(a)[0]
        inv_std = 1.0 / np.sqrt(layer["running_var"] + BN_EPS)
        h = np.maximum(layer["gamma"] * ((a - layer["running_mean"]) * inv_std) + layer["beta"], 0)


def _forward_eval(model, x):
    n = x.shape[0]
    out = np.empty((n, 3), model.dtype)
    for s in range(0, n, CHUNK):
        block = x[s:s + CHUNK]
        if block.shape[0] < CHUNK:
            pad = np.zeros((CHUNK, x.shape[1]), model.dtype)
            pad[:block.shape[0]] = block
            out[s:s + block.shape[0]] = _forward_eval_chunk(model, pad)[:block.shape[0]]
        else:
            out[s:s + CHUNK] = _forward_eval_chunk(model, block)
    return out


def loss_cos(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean of ``1 - cos(pred, target)`` over the valid entries."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    m = np.ones(pred.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise EmptyMaskError("loss mask is empty")
    p, t = pred[m], target[m]
    cos = np.sum(p * t, axis=1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(t, axis=1))
    return float(np.mean(1.0 - cos))


def backward(model: MlpModel, cache: list, target: np.ndarray,
             mask: Optional[np.ndarray] = None) -> dict:
    """Gradients of :func:`loss_cos` for the batch recorded in ``cache``.

    Returns ``{(layer_index, name): array}`` for every trainable parameter.
    """
    out = cache[-1]
    y, norm, nh = out["y"], out["norm"], out["out"]
    N = y.shape[0]
    m = np.ones(N, bool) if mask is None else np.asarray(mask, bool)
    M = int(m.sum())
    if M == 0:
        raise EmptyMaskError("loss mask is empty")
    t = np.asarray(target, dtype=y.dtype)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    that = t / tn
    pn = np.linalg.norm(nh, axis=1, keepdims=True)
    c = np.sum(nh * that, axis=1, keepdims=True)
    # d loss / d n_hat, then through n_hat = y / max(|y|, eps)
    g_nh = -(that / pn - c * nh / pn ** 3) * m[:, None] / M
    unit = y / norm
    clipped = (np.sqrt(np.sum(y * y, axis=1, keepdims=True)) < NORM_EPS)
    g_y = np.where(clipped, g_nh / norm,
                   (g_nh - unit * np.sum(unit * g_nh, axis=1, keepdims=True)) / norm)

    grads = {}
    last = len(model.layers) - 1
    g = g_y
    for i in range(last, -1, -1):
        layer, c_i = model.layers[i], cache[i]
        if i < last:
            if c_i["drop"] is not None:
                g = g * c_i["drop"]
            g = g * (c_i["bn"] > 0)
            xhat = c_i["xhat"]
            grads[(i, "gamma")] = np.sum(g * xhat, axis=0)
            grads[(i, "beta")] = np.sum(g, axis=0)
            dxhat = g * layer["gamma"]
            n = dxhat.shape[0]
            g = (c_i["inv_std"] / n) * (n * dxhat - dxhat.sum(axis=0)
                                        - xhat * np.sum(dxhat * xhat, axis=0))
        grads[(i, "W")] = c_i["h"].T @ g
        grads[(i, "b")] = g.sum(axis=0)
        if i > 0:
            g = g @ layer["W"].T
    return grads


# --- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    rng_seed: int = 0
    validation_interval: int = 1
    dropout: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 for batch normalization")
        if self.epochs < 0 or self.validation_interval < 1:
            raise ParameterError("epochs must be >= 0 and validation_interval >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ParameterError("optimizer must be 'adam' or 'sgd_momentum'")

    def to_dict(self):
        return asdict(self)


class _Optimizer:
    def __init__(self, model: MlpModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(model.layers[k[0]][k[1]]) for k in model.param_keys()}
        self.v = {k: np.zeros_like(v) for k, v in self.m.items()}

    def step(self, model: MlpModel, grads: dict):
        cfg = self.cfg
        self.t += 1
        for key, g in grads.items():
            p = model.layers[key[0]]
            if cfg.optimizer == "adam":
                self.m[key] = cfg.beta1 * self.m[key] + (1 - cfg.beta1) * g
                self.v[key] = cfg.beta2 * self.v[key] + (1 - cfg.beta2) * g * g
                mh = self.m[key] / (1 - cfg.beta1 ** self.t)
                vh = self.v[key] / (1 - cfg.beta2 ** self.t)
                upd = cfg.learning_rate * mh / (np.sqrt(vh) + cfg.adam_eps)
            else:
                self.m[key] = cfg.momentum * self.m[key] + g
                upd = cfg.learning_rate * self.m[key]
            p[key[1]] = (p[key[1]] - upd).astype(model.dtype)


def evaluate(model: MlpModel, inputs: np.ndarray, targets: np.ndarray):
    """Cosine loss and mean angular error (degrees) in eval mode."""
    mode = model.mode
    model.eval_mode()
    pred = forward(model, inputs).astype(float)
    model.mode = mode
    t = np.asarray(targets, float)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    cos = np.sum(pred * t, axis=1)
    return float(np.mean(1 - cos)), float(np.mean(angular_errors(pred, t)))


def train(train_set, val_set, cfg: TrainConfig = TrainConfig(), dims=DEFAULT_DIMS,
          dtype=np.float32, progress=None):
    """Mini-batch training with the cosine loss.

    ``train_set``/``val_set`` are CalibDatasets or ``(inputs, normals)``
    tuples. Returns the eval-mode snapshot with the best validation loss and
    the per-epoch history.
    """
    xtr, ytr = _xy(train_set)
    xva, yva = _xy(val_set)
    if xtr.shape[0] < 2:
        raise ParameterError("training set needs at least 2 samples")
    model = MlpModel(dims, cfg.dropout, cfg.rng_seed, dtype)
    history = []
    if cfg.epochs == 0:
        return model.eval_mode(), history
    rng = np.random.default_rng(cfg.rng_seed + 1)
    opt = _Optimizer(model, cfg)
    xtr = xtr.astype(dtype)
    ytr = ytr.astype(dtype)
    best, best_loss = None, np.inf
    n = xtr.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        model.train_mode()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if idx.size < 2:
                continue
            cache = []
            pred = forward(model, xtr[idx], rng=rng, cache=cache)
            loss = loss_cos(pred, ytr[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}")
            opt.step(model, backward(model, cache, ytr[idx]))
            total += loss * idx.size
            seen += idx.size
        rec = {"epoch": epoch, "train_loss": total / seen}
        if epoch % cfg.validation_interval == 0 or epoch == cfg.epochs:
            vl, va = evaluate(model, xva, yva)
            if not np.isfinite(vl):
                raise DivergenceError(f"validation loss became {vl} at epoch {epoch}")
            rec.update(val_loss=vl, val_aae=va)
            if vl < best_loss:
                best_loss, best = vl, model.copy()
        history.append(rec)
        if progress:
            progress(rec)
        log.info("epoch %d %s", epoch, rec)
    return best.eval_mode(), history


def _xy(ds):
    if isinstance(ds, tuple):
        x, y = ds
    else:
        x, y = ds.inputs, ds.normals
    return np.asarray(x), np.asarray(y)


# --- inference --------------------------------------------------------------------


def infer_image(model: MlpModel, trichrome: np.ndarray, mask: np.ndarray, shape=None) -> NormalMap:
    """Normal map from one trichrome image; pixels outside ``mask`` are invalid."""
    from .calibration import normalized_coords

    mask = np.asarray(mask, bool)
    hw = tuple(shape) if shape is not None else mask.shape
    if trichrome.shape[:2] != hw or mask.shape != hw:
        raise ParameterError(f"image {trichrome.shape[:2]} / mask {mask.shape} do not match {hw}")
    if model.mode != "eval":
        raise ParameterError("infer_image needs an eval-mode model")
    n = np.zeros(hw + (3,))
    if mask.any():
        U, V = normalized_coords(hw)
        x = np.column_stack([U[mask], V[mask], trichrome[mask]]).astype(model.dtype)
        n[mask] = forward(model, x)
    return NormalMap(n, mask)


# --- persistence ----------------------------------------------------------------


def save_model(model: MlpModel, path, metadata: Optional[dict] = None) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<HH", WEIGHTS_VERSION, len(model.dims)))
        f.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        f.write(struct.pack("<fB", model.dropout, 1 if model.mode == "eval" else 0))
        for layer in model.layers:
            for k in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
                if k in layer:
                    f.write(np.ascontiguousarray(layer[k], dtype="<f4").tobytes())
    if metadata is not None:
        with open(Path(path).with_suffix(".json"), "w") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)
            f.write("\n")


def load_model(path, expected_dims=None) -> MlpModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic, not a weight file")
    version, nd = struct.unpack_from("<HH", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    off = 8
    dims = struct.unpack_from(f"<{nd}I", data, off)
    off += 4 * nd
    if expected_dims is not None and tuple(expected_dims) != tuple(dims):
        raise FormatError(f"{path}: layer dims {dims} differ from expected {tuple(expected_dims)}")
    dropout, mode = struct.unpack_from("<fB", data, off)
    off += 5
    model = MlpModel(dims, float(np.float32(dropout)), 0, np.float32)
    model.dropout = float(dropout)
    for layer in model.layers:
        for k in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
            if k in layer:
                shape = layer[k].shape
                count = int(np.prod(shape))
                if off + 4 * count > len(data):
                    raise FormatError(f"{path}: truncated weight file")
                layer[k] = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float32)
                off += 4 * count
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    model.mode = "eval" if mode == 1 else "train"
    return model
