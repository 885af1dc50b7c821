"""Command-line entry point: ``nearlight <command> [options]``.

Every command writes ``config.echo.json`` (the fully resolved configuration
plus the command arguments) into its output directory. Exit codes: 0
success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import calibration as calib
from . import config as config_mod
from . import metrics, plotting
from .errors import (
    DivergenceError,
    EmptyMaskError,
    FormatError,
    InsufficientLightsError,
    InvalidDepthError,
    MissingFileError,
    NearlightError,
    NumericError,
    ParameterError,
    ShapeMismatchError,
    SingularityError,
    UnitMismatchError,
)
from .io import read_mask, read_pfm, write_mask, write_pfm
from .net import infer_image, load_model, save_model, train
from .render import render_capture_set
from .scene import make_synthetic_surface, normals_from_depth, ring_lights
from .solver import solve
from .synthetic import DOMES, INDENTERS, press_scene, standard_camera

log = logging.getLogger("nearlight")

INPUT_ERRORS = (ParameterError, FormatError, MissingFileError, UnitMismatchError,
                ShapeMismatchError, InsufficientLightsError, InvalidDepthError, EmptyMaskError)
RUNTIME_ERRORS = (DivergenceError, NumericError, SingularityError)


class _Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p


def _echo(out_dir: Path, cfg: dict, command: str, args: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config_mod.dump({**cfg, "command": {"name": command, **args}}, out_dir / "config.echo.json")


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# --- render -------------------------------------------------------------------


def make_lights(cfg: dict, count: int | None = None):
    led = cfg["render"]["led"]
    return ring_lights(count or cfg["render"]["lights"], radius=led["ring_radius"],
                       height=led["height"], tilt_deg=led["tilt_deg"], mu=led["mu"],
                       psi=tuple(led["psi"]))


def make_surface(cfg: dict, camera):
    s = dict(cfg["render"]["surface"])
    kind = s.pop("kind")
    if "center" in s:
        s["center"] = tuple(s["center"])
    return make_synthetic_surface(kind, camera, albedo=tuple(cfg["render"]["albedo"]), **s)


def write_groundtruth(surface, camera, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(directory / "depth.pfm", surface.depth.z)
    write_pfm(directory / "normals.pfm", surface.analytic_normals.n)
    write_mask(directory / "mask.png", surface.analytic_normals.mask)
    if surface.contact_mask is not None:
        write_mask(directory / "contact.png", surface.contact_mask)


def render_to_dir(cfg: dict, out: Path, surface=None, seed_offset: int = 0):
    res = cfg["render"]["resolution"]
    camera = standard_camera(res)
    if surface is None:
        surface = make_surface(cfg, camera)
    lights = make_lights(cfg)
    capture = render_capture_set(surface, lights, camera, config_mod.render_options(cfg, seed_offset))
    calib.save_capture(capture, out)
    write_groundtruth(surface, camera, out / "groundtruth")
    return capture, surface


def cmd_render(cfg, args, wd):
    out = wd(args.out)
    render_to_dir(cfg, out)
    _echo(out, cfg, "render", {"out": str(args.out)})
    log.info("wrote capture set to %s", out)


# --- solve --------------------------------------------------------------------


def prepare_capture(directory: Path, cfg: dict, full_resolution: bool = False):
    capture = calib.preprocess(calib.load_capture(directory))
    if not full_resolution:
        capture = calib.downsample_capture(capture, cfg["resolution"])
    return capture


def solve_to_dir(capture, cfg: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = solve(capture, config_mod.solver_config(cfg))
    write_pfm(out / "depth.pfm", result.depth.z)
    write_pfm(out / "normals.pfm", result.normals.n)
    write_pfm(out / "albedo.pfm", result.physical_albedo.rho)
    write_mask(out / "mask.png", result.normals.mask)
    with open(out / "energy.csv", "w") as f:
        f.write("iteration,energy\n")
        for i, e in enumerate(result.energy_history):
            f.write(f"{i},{_fmt(e)}\n")
    _write_json(out / "result.json", {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "final_energy": float(result.energy_history[-1]),
        "pcg_warnings": int(result.pcg_warnings),
        "image_shape": list(capture.camera.shape),
        "lights": capture.num_lights,
        "config": cfg["solver"],
    })
    plotting.plot_energy(result.energy_history, out / "energy.png")
    return result


def cmd_solve(cfg, args, wd):
    out = wd(args.out)
    capture = prepare_capture(wd(args.capture), cfg, args.full_resolution)
    result = solve_to_dir(capture, cfg, out)
    _echo(out, cfg, "solve", {"capture": str(args.capture), "out": str(args.out),
                              "full_resolution": bool(args.full_resolution)})
    log.info("solve: %d iterations, converged=%s, energy %.4g", result.iterations,
             result.converged, result.energy_history[-1])


# --- dataset --------------------------------------------------------------------


def _solution_normals(directory: Path):
    from .scene import NormalMap

    n = read_pfm(directory / "normals.pfm").astype(np.float64)
    m = read_mask(directory / "mask.png")
    if n.shape[:2] != m.shape:
        raise ShapeMismatchError(f"{directory}: normals and mask sizes differ")
    return NormalMap(n, m)


def build_dataset(reference: Path, captures, solutions, cfg: dict, full_resolution=False):
    if len(captures) != len(solutions):
        raise ParameterError("need one solution directory per capture directory")
    d = cfg["dataset"]
    ref = prepare_capture(reference, cfg, full_resolution)
    blocks = []
    for press_id, (cdir, sdir) in enumerate(zip(captures, solutions)):
        cap = prepare_capture(cdir, cfg, full_resolution)
        normals = _solution_normals(sdir)
        if normals.n.shape[:2] != cap.camera.shape or ref.camera.shape != cap.camera.shape:
            raise ShapeMismatchError(f"{cdir}: capture, reference and solution sizes differ")
        mask = calib.contact_mask(ref.trichrome_image, cap.trichrome_image, d["tau"],
                                  d["min_blob"]) & normals.mask
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            blocks.append(calib.build_samples(cap, normals, mask, Path(cdir).name, press_id,
                                              d["max_per_press"], seed=cfg["seed"] + press_id))
    return calib.CalibDataset(blocks, cfg["seed"])


def cmd_build_dataset(cfg, args, wd):
    out = wd(args.out)
    out.mkdir(parents=True, exist_ok=True)
    caps = [wd(c) for c in args.captures]
    sols = [wd(s) for s in args.solutions] if args.solutions else [c / "solution" for c in caps]
    ds = build_dataset(wd(args.reference), caps, sols, cfg, args.full_resolution)
    if len(ds) == 0:
        raise EmptyMaskError("no samples were collected from any press")
    calib.write_dataset(out / "dataset.nlps", ds)
    if args.csv:
        calib.export_csv(out / "dataset.csv", ds)
    _write_json(out / "coverage.json", calib.normal_coverage(ds.normals))
    _echo(out, cfg, "build-dataset", {"reference": str(args.reference),
                                      "captures": [str(c) for c in args.captures],
                                      "solutions": [str(s) for s in sols], "out": str(args.out)})
    log.info("dataset: %d samples from %d presses", len(ds), len(ds.blocks))


# --- train -----------------------------------------------------------------------


def train_to_dir(dataset, cfg: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    tr, va = calib.merge_datasets(dataset.blocks, tuple(cfg["train"]["split"]), cfg["seed"])
    tcfg = config_mod.train_config(cfg)
    model, history = train(tr, va, tcfg)
    meta = {
        "seed": tcfg.rng_seed,
        "epochs": tcfg.epochs,
        "train_presses": [b.press_id for b in tr.blocks],
        "val_presses": [b.press_id for b in va.blocks],
        "train_samples": len(tr),
        "val_samples": len(va),
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "final_val_loss": history[-1].get("val_loss") if history else None,
        "best_val_loss": min((h["val_loss"] for h in history if "val_loss" in h), default=None),
        "best_val_aae": min((h["val_aae"] for h in history if "val_aae" in h), default=None),
        "config": tcfg.to_dict(),
    }
    save_model(model, out / "model.nlnw", meta)
    with open(out / "history.csv", "w") as f:
        f.write("epoch,train_loss,val_loss,val_aae_deg\n")
        for h in history:
            f.write(f"{h['epoch']},{_fmt(h['train_loss'])},{_fmt(h.get('val_loss', float('nan')))},"
                    f"{_fmt(h.get('val_aae', float('nan')))}\n")
    if history:
        plotting.plot_history(history, out / "history.png")
    return model, history, tr, va


def cmd_train(cfg, args, wd):
    out = wd(args.out)
    ds = calib.read_dataset(wd(args.dataset))
    _, history, _, _ = train_to_dir(ds, cfg, out)
    _echo(out, cfg, "train", {"dataset": str(args.dataset), "out": str(args.out)})
    if history:
        log.info("train: final val loss %.5f", history[-1].get("val_loss", float("nan")))


# --- infer / eval -------------------------------------------------------------------


def infer_to_dir(model, capture, mask, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    nm = infer_image(model, capture.trichrome_image, mask)
    write_pfm(out / "normals.pfm", nm.n)
    write_mask(out / "mask.png", nm.mask)
    return nm


def cmd_infer(cfg, args, wd):
    out = wd(args.out)
    model = load_model(wd(args.model))
    model.eval_mode()
    capture = prepare_capture(wd(args.capture), cfg, args.full_resolution)
    if args.mask:
        mask = read_mask(wd(args.mask))
    elif args.reference:
        ref = prepare_capture(wd(args.reference), cfg, args.full_resolution)
        mask = calib.contact_mask(ref.trichrome_image, capture.trichrome_image,
                                  cfg["dataset"]["tau"], cfg["dataset"]["min_blob"])
    else:
        mask = np.ones(capture.camera.shape, bool)
    infer_to_dir(model, capture, mask, out)
    _echo(out, cfg, "infer", {"model": str(args.model), "capture": str(args.capture),
                              "mask": args.mask, "reference": args.reference, "out": str(args.out)})


def _load_normal_dir(path: Path):
    if path.is_dir():
        n = read_pfm(path / "normals.pfm").astype(np.float64)
        m = read_mask(path / "mask.png") if (path / "mask.png").exists() else None
    else:
        n = read_pfm(path).astype(np.float64)
        m = None
    return n, m


def evaluate_to_dir(pred, gt, mask, out: Path, max_degrees: float = 25.0, per_press=None):
    out.mkdir(parents=True, exist_ok=True)
    rep = metrics.report(pred, gt, mask, per_press)
    _write_json(out / "report.json", rep.to_dict())
    err = metrics.error_map(pred, gt, mask, max_degrees)
    import cv2

    cv2.imwrite(str(out / "errmap.png"), err[..., ::-1])
    plotting.plot_comparison(pred, gt, mask, err, out / "comparison.png",
                             title=f"AAE {rep.aae:.3f} deg, MabsE {rep.mabse:.4f}")
    return rep


def cmd_eval(cfg, args, wd):
    out = wd(args.out)
    pred, pm = _load_normal_dir(wd(args.pred))
    gt, gm = _load_normal_dir(wd(args.gt))
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and reference {gt.shape} differ")
    mask = np.ones(pred.shape[:2], bool)
    for m in (pm, gm):
        if m is not None:
            mask &= m
    if args.mask:
        mask &= read_mask(wd(args.mask))
    rep = evaluate_to_dir(pred, gt, mask, out, args.max_degrees)
    _echo(out, cfg, "eval", {"pred": str(args.pred), "gt": str(args.gt), "mask": args.mask,
                             "max_degrees": args.max_degrees, "out": str(args.out)})
    log.info("eval: AAE %.4f deg, MabsE %.5f over %d px", rep.aae, rep.mabse, rep.pixel_count)


# --- ablation -------------------------------------------------------------------------


def ablate(capture, gt_normals, region, counts, cfg):
    rows = []
    scfg = config_mod.solver_config(cfg)
    for k in counts:
        if k > capture.num_lights:
            raise ParameterError(f"capture has {capture.num_lights} lights, cannot use {k}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = solve(capture.subset(range(k)), scfg)
        m = region & res.normals.mask
        rows.append((int(k), metrics.aae(res.normals, gt_normals, m),
                     metrics.mabse(res.normals, gt_normals, m)))
        log.info("ablation: %d LEDs -> AAE %.4f", k, rows[-1][1])
    return rows


def cmd_ablate(cfg, args, wd):
    out = wd(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cdir = wd(args.capture)
    capture = prepare_capture(cdir, cfg, args.full_resolution)
    gdir = wd(args.gt) if args.gt else cdir / "groundtruth"
    gt = read_pfm(gdir / "normals.pfm").astype(np.float64)
    if gt.shape[:2] != capture.camera.shape:
        raise ShapeMismatchError("ground-truth normals do not match the solve resolution")
    region = read_mask(gdir / "mask.png")
    if cfg["ablation"]["region"] == "contact" and (gdir / "contact.png").exists():
        region &= read_mask(gdir / "contact.png")
    counts = args.counts or cfg["ablation"]["counts"]
    rows = ablate(capture, gt, region, counts, cfg)
    with open(out / "ablation.csv", "w") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["led_count", "aae_deg", "mabse"])
        for k, a, m in rows:
            w.writerow([k, _fmt(a), _fmt(m)])
    plotting.plot_ablation(rows, out / "ablation.png")
    _echo(out, cfg, "ablate", {"capture": str(args.capture), "gt": str(gdir),
                               "counts": list(counts), "out": str(args.out)})


# --- full synthetic pipeline ------------------------------------------------------------


def press_plan(n: int, seed: int, location_range: float):
    rng = np.random.default_rng(seed)
    plan = []
    for k in range(n):
        center = rng.uniform(-location_range, location_range, 2)
        plan.append((INDENTERS[k % len(INDENTERS)], (float(center[0]), float(center[1])),
                     int(rng.integers(2**31))))
    return plan


def run_pipeline(cfg: dict, out: Path, progress=None) -> dict:
    """Render presses, solve, build the dataset, train, then infer and evaluate
    on the held-out presses. Returns the evaluation summary."""
    p = cfg["pipeline"]
    pcfg = config_mod.load_config(overrides={**{k: v for k, v in cfg.items() if k != "command"},
                                             "render": {**cfg["render"],
                                                        "resolution": p["resolution"],
                                                        "noise_sigma": p["noise_sigma"],
                                                        "dark_level": p["dark_level"]}})
    camera = standard_camera(p["resolution"])
    dome = DOMES[p["dome"]]
    reference = make_synthetic_surface("dome", camera, albedo=tuple(cfg["render"]["albedo"]),
                                       **dome)
    ref_dir = out / "reference"
    render_to_dir(pcfg, ref_dir, reference, seed_offset=0)
    captures, solutions = [], []
    for k, (indenter, center, sub_seed) in enumerate(press_plan(p["presses"], cfg["seed"],
                                                                p["location_range"])):
        surf = press_scene(camera, indenter, center, np.random.default_rng(sub_seed), p["dome"])
        cdir = out / "presses" / f"press_{k:02d}"
        render_to_dir(pcfg, cdir, surf, seed_offset=1000 * (k + 1))
        capture = prepare_capture(cdir, pcfg)
        solve_to_dir(capture, pcfg, cdir / "solution")
        captures.append(cdir)
        solutions.append(cdir / "solution")
        if progress:
            progress(f"press {k}: {indenter} at {center}")
    ds = build_dataset(ref_dir, captures, solutions, pcfg)
    ddir = out / "dataset"
    ddir.mkdir(parents=True, exist_ok=True)
    calib.write_dataset(ddir / "dataset.nlps", ds)
    _write_json(ddir / "coverage.json", calib.normal_coverage(ds.normals))
    model, history, tr, va = train_to_dir(ds, pcfg, out / "model")

    per_press, preds, gts, masks = [], [], [], []
    ref = prepare_capture(ref_dir, pcfg)
    for block in va.blocks:
        cdir = captures[block.press_id]
        cap = prepare_capture(cdir, pcfg)
        sol = _solution_normals(cdir / "solution")
        mask = np.zeros(cap.camera.shape, bool)
        mask[block.pixels[:, 0], block.pixels[:, 1]] = True
        nm = infer_to_dir(model, cap, mask, out / "eval" / cdir.name)
        per_press.append({"press_id": block.press_id, "pixels": int(mask.sum()),
                          "aae": metrics.aae(nm, sol, mask), "mabse": metrics.mabse(nm, sol, mask)})
        preds.append(nm.n[mask])
        gts.append(sol.n[mask])
        masks.append(mask)
    del ref
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    rep = metrics.report(pred, gt, None, per_press)
    _write_json(out / "eval" / "report.json", rep.to_dict())
    if history:
        with open(out / "eval" / "summary.csv", "w") as f:
            f.write("press_id,pixels,aae_deg,mabse\n")
            for r in per_press:
                f.write(f"{r['press_id']},{r['pixels']},{_fmt(r['aae'])},{_fmt(r['mabse'])}\n")
    return {"aae": rep.aae, "mabse": rep.mabse, "pixel_count": rep.pixel_count,
            "samples": len(ds), "history": history}


def cmd_pipeline(cfg, args, wd):
    out = wd(args.out)
    summary = run_pipeline(cfg, out, progress=lambda m: log.info(m))
    _echo(out, cfg, "pipeline", {"out": str(args.out)})
    log.info("pipeline: held-out AAE %.4f deg over %d px", summary["aae"], summary["pixel_count"])


# --- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults: see README)")
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("--log-level", default="INFO")

    ap = argparse.ArgumentParser(prog="nearlight",
                                 description="Near-light photometric stereo calibration toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render a synthetic capture set")
    p.add_argument("--out", required=True)
    p.add_argument("--lights", type=int, help="number of LEDs on the ring (default 12)")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma (default 0)")
    p.add_argument("--resolution", type=int, help="rendered image side in pixels (default 128)")
    p.add_argument("--dome", choices=sorted(DOMES), help="membrane shape under the indenter")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("solve", parents=[common], help="recover depth and normals from a capture")
    p.add_argument("capture")
    p.add_argument("--out", required=True)
    p.add_argument("--zeta", type=float, help="prior weight (default 1e-6)")
    p.add_argument("--max-iters", type=int, help="outer iterations (default 50)")
    p.add_argument("--channel-mode", choices=("rgb", "luminance"))
    p.add_argument("--solve-resolution", type=int, help="max image side for solving (default 512)")
    p.add_argument("--full-resolution", action="store_true", help="skip downsampling")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("build-dataset", parents=[common], help="pair trichrome pixels with normals")
    p.add_argument("--reference", required=True, help="press-free capture directory")
    p.add_argument("--captures", nargs="+", required=True)
    p.add_argument("--solutions", nargs="+", help="solve outputs (default <capture>/solution)")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true", help="also export dataset.csv")
    p.add_argument("--full-resolution", action="store_true")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train the per-pixel normal network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="normal map from a trichrome image")
    p.add_argument("--model", required=True)
    p.add_argument("--capture", required=True)
    p.add_argument("--mask", help="mask PNG restricting inference")
    p.add_argument("--reference", help="press-free capture; infer on the contact mask")
    p.add_argument("--out", required=True)
    p.add_argument("--full-resolution", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="AAE/MabsE report and error map")
    p.add_argument("--pred", required=True, help="directory with normals.pfm [+ mask.png] or a PFM")
    p.add_argument("--gt", required=True, help="directory with normals.pfm [+ mask.png] or a PFM")
    p.add_argument("--mask")
    p.add_argument("--max-degrees", type=float, default=25.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="accuracy versus number of active LEDs")
    p.add_argument("capture")
    p.add_argument("--counts", type=int, nargs="+", help="LED counts (default 3 6 12)")
    p.add_argument("--gt", help="ground-truth directory (default <capture>/groundtruth)")
    p.add_argument("--out", required=True)
    p.add_argument("--full-resolution", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", parents=[common],
                       help="render presses, solve, build dataset, train, infer, evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--presses", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    r = {}
    for flag, key in (("lights", "lights"), ("noise", "noise_sigma"), ("resolution", "resolution")):
        v = getattr(args, flag, None)
        if v is not None:
            r[key] = v
    if r:
        o["render"] = r
    if getattr(args, "dome", None):
        o.setdefault("render", {})["surface"] = {**config_mod.DEFAULTS["render"]["surface"],
                                                 "dome": dict(DOMES[args.dome])}
    s = {}
    for flag, key in (("zeta", "zeta"), ("max_iters", "max_outer_iters"),
                      ("channel_mode", "channel_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            s[key] = v
    if s:
        o["solver"] = s
    if getattr(args, "solve_resolution", None) is not None:
        o["resolution"] = args.solve_resolution
    if getattr(args, "epochs", None) is not None:
        o["train"] = {"epochs": args.epochs}
    if getattr(args, "presses", None) is not None:
        o["pipeline"] = {"presses": args.presses}
    return o


def _resolve_config(args) -> dict:
    base = None
    if args.config:
        path = Path(args.config)
        if not path.is_absolute():
            path = Path(args.workdir) / path
        base = path
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = _load_with_command(base)
    over = _overrides(args)
    return config_mod.load_config(overrides={**_strip(cfg), **_deep(over, cfg)}) if over else cfg


def _load_with_command(path):
    if path is None:
        return config_mod.load_config()
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: config parse error: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"{path}: cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    raw.pop("command", None)
    raw.pop("_comment", None)
    return config_mod.load_config(overrides=raw)


def _strip(cfg):
    return {k: v for k, v in cfg.items() if k != "command"}


def _deep(over: dict, base: dict) -> dict:
    out = {}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "surface":
            out[k] = {**base[k], **_deep(v, base[k])}
        else:
            out[k] = v
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        limit = nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(args.threads)
        with limit:
            args.func(cfg, args, _Workdir(args.workdir))
    except INPUT_ERRORS as exc:
        print(f"nearlight {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RUNTIME_ERRORS + (NearlightError,)) as exc:
        print(f"nearlight {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"nearlight {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
