"""Alternating least-squares recovery of log-depth and effective albedo.

The energy over log-depth ``zt`` and effective albedo ``rho`` is::

    E = sum_{p,i,c} (I_obs[i,c,p] - rho[c,p] * Psi[i,c] * sh_i(p; zt))**2
        + zeta * sum_p (zt[p] - zt0[p])**2

where ``sh_i`` is the unit-albedo shading of light ``i`` with the normal
taken from finite differences of ``z = exp(zt)``. Each outer iteration solves
the albedo in closed form per pixel, then takes one Gauss-Newton step on
``zt`` (normal equations solved by Jacobi-preconditioned CG) guarded by a
backtracking line search, so the recorded energy never increases.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .errors import EmptyMaskError, InsufficientLightsError, NumericError, ParameterError
from .render import MIN_LIGHTS
from .scene import (
    STENCILS,
    AlbedoMap,
    CaptureSet,
    DepthMap,
    LogDepthMap,
    NormalMap,
    gradient_operators,
    normals_from_depth,
)

log = logging.getLogger(__name__)

LUMINANCE = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class SolverConfig:
    zeta: float = 1e-6
    prior: Union[None, float, np.ndarray] = None
    max_outer_iters: int = 50
    energy_rel_tol: float = 1e-6
    pcg_tol: float = 1e-8
    pcg_max_iters: int = 2000
    backtracking_max_halvings: int = 20
    channel_mode: str = "rgb"
    saturation_threshold: float = 0.98
    stencil: str = "central"
    preconditioner: str = "jacobi"
    depth_step: str = "projected"

    def __post_init__(self):
        if self.zeta < 0:
            raise ParameterError("zeta must be >= 0")
        if not (self.energy_rel_tol > 0 and self.pcg_tol > 0):
            raise ParameterError("tolerances must be > 0")
        if self.max_outer_iters < 0 or self.pcg_max_iters < 1 or self.backtracking_max_halvings < 0:
            raise ParameterError("iteration limits must be non-negative")
        if self.channel_mode not in ("rgb", "luminance"):
            raise ParameterError("channel_mode must be 'rgb' or 'luminance'")
        if self.stencil not in STENCILS:
            raise ParameterError(f"stencil must be one of {STENCILS}")
        if self.depth_step not in ("projected", "fixed_albedo"):
            raise ParameterError("depth_step must be 'projected' or 'fixed_albedo'")
        if self.preconditioner not in ("jacobi", "none"):
            raise ParameterError("preconditioner must be 'jacobi' or 'none'")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if isinstance(d["prior"], np.ndarray):
            d["prior"] = "map"
        return d


@dataclass(frozen=True)
class EffectiveAlbedoMap:
    rho: np.ndarray  # H x W x 3
    degenerate: np.ndarray  # H x W, pixels whose albedo system was empty


@dataclass
class SolverResult:
    log_depth: LogDepthMap
    depth: DepthMap
    normals: NormalMap
    effective_albedo: EffectiveAlbedoMap
    physical_albedo: AlbedoMap
    energy_history: list
    converged: bool
    iterations: int
    pcg_warnings: int = 0
    step_log: list = field(default_factory=list)


class Problem:
    """Everything about a capture that stays fixed during a solve.

    Unknowns are the masked pixels in row-major order. Observations are
    dark-subtracted once here; per-light saturated samples and pixels without
    a defined normal carry zero weight.
    """

    def __init__(self, capture: CaptureSet, cfg: SolverConfig, mask: Optional[np.ndarray] = None):
        if capture.num_lights < MIN_LIGHTS:
            raise InsufficientLightsError(
                f"at least {MIN_LIGHTS} lights are required, got {capture.num_lights}")
        cam = capture.camera
        self.camera = cam
        self.cfg = cfg
        self.mask = np.ones(cam.shape, bool) if mask is None else np.asarray(mask, bool)
        if self.mask.shape != cam.shape:
            raise ParameterError("mask does not match the capture dims")
        if not self.mask.any():
            raise EmptyMaskError("solver mask is empty")
        self.Du, self.Dv, defined = gradient_operators(self.mask, cam, cfg.stencil)
        U, V = cam.metric_grid()
        self.U = U[self.mask]
        self.V = V[self.mask]
        self.P = self.U.size

        raw = capture.single_light_images[:, self.mask, :]  # K x P x 3
        if not np.all(np.isfinite(raw)):
            raise NumericError("capture contains non-finite values")
        obs = np.clip(raw - capture.dark_image[self.mask][None], 0.0, 1.0)
        ok = raw < cfg.saturation_threshold
        psi = np.array([l.psi for l in capture.lights])  # K x 3
        if cfg.channel_mode == "luminance":
            obs = (obs @ LUMINANCE)[..., None]
            ok = ok.all(axis=2, keepdims=True)
            psi = (psi @ LUMINANCE)[:, None]
        self.obs = np.ascontiguousarray(obs.transpose(0, 2, 1))  # K x C x P
        self.weight = (ok.transpose(0, 2, 1) & defined[self.mask][None, None, :]).astype(float)
        if not self.weight.any():
            raise EmptyMaskError("every observation is saturated or invalid")
        self.psi = psi  # K x C
        self.C = psi.shape[1]

        self.src = np.array([l.position for l in capture.lights])
        self.ns = np.array([l.principal_direction for l in capture.lights])
        self.mu = np.array([l.mu for l in capture.lights], dtype=float)

        prior = cfg.prior
        if prior is None:
            prior = np.log(cam.nominal_distance)
        if isinstance(prior, LogDepthMap):
            prior = prior.zt
        prior = np.asarray(prior, float)
        self.zt0 = np.full(self.P, float(prior)) if prior.ndim == 0 else prior[self.mask].copy()

    # -- model evaluation ----------------------------------------------------

    def shading(self, zt: np.ndarray, jac: bool = False):
        """Unit shading per light (K x P) and, optionally, its derivatives.

        The derivatives are w.r.t. the depth itself at each pixel and w.r.t.
        the two metric depth gradients; terms clamped by the shadow or
        emission cut-off get zero derivative.
        """
        z = np.exp(zt)
        zu = self.Du @ z
        zv = self.Dv @ z
        Q = np.sqrt(1.0 + zu * zu + zv * zv)
        Lx = self.src[:, 0:1] - self.U
        Ly = self.src[:, 1:2] - self.V
        Lz = self.src[:, 2:3] - z
        d = np.sqrt(Lx * Lx + Ly * Ly + Lz * Lz)
        a = -(self.ns[:, 0:1] * Lx + self.ns[:, 1:2] * Ly + self.ns[:, 2:3] * Lz) / d
        mu = self.mu[:, None]
        apos = np.maximum(a, 0.0)
        A = apos ** mu
        g = (Lx * zu + Ly * zv - Lz) / Q
        lit = g > 0
        gpos = np.where(lit, g, 0.0)
        d3 = d ** 3
        S = gpos / d3
        sh = A * S
        if not jac:
            return sh, z
        dd = -Lz / d
        da = (self.ns[:, 2:3] - a * dd) / d
        with np.errstate(divide="ignore", invalid="ignore"):
            dA = np.where(apos > 0, mu * apos ** (mu - 1.0) * da, 0.0)
        dA = np.where(mu == 0, 0.0, dA)
        dS = np.where(lit, (1.0 / Q) / d3 - 3.0 * gpos * dd / (d3 * d), 0.0)
        dsh_dz = dA * S + A * dS
        Ad3 = np.where(lit, A / d3, 0.0)
        dsh_du = Ad3 * (Lx / Q - gpos * zu / (Q * Q))
        dsh_dv = Ad3 * (Ly / Q - gpos * zv / (Q * Q))
        return sh, z, dsh_dz, dsh_du, dsh_dv

    def light_jacobians(self, zt: np.ndarray):
        """Shading and the sparse d(shading_i)/d(zt) matrix for every light."""
        sh, z, dz, du, dv = self.shading(zt, jac=True)
        Zd = sp.diags(z)
        DuZ = (self.Du @ Zd).tocsr()
        DvZ = (self.Dv @ Zd).tocsr()
        G = [
            (sp.diags(dz[i] * z) + sp.diags(du[i]) @ DuZ + sp.diags(dv[i]) @ DvZ).tocsr()
            for i in range(sh.shape[0])
        ]
        return sh, G

    def predicted(self, sh: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """K x C x P predicted intensities for shading ``sh`` and albedo ``rho`` (C x P)."""
        return self.psi[:, :, None] * rho[None] * sh[:, None, :]

    def data_residual(self, sh, rho):
        return self.weight * (self.obs - self.predicted(sh, rho))

    def energy(self, zt: np.ndarray, rho: np.ndarray, sh: Optional[np.ndarray] = None) -> float:
        if sh is None:
            sh, _ = self.shading(zt)
        r = self.data_residual(sh, rho)
        dz = zt - self.zt0
        return float(np.sum(r * r) + self.cfg.zeta * np.dot(dz, dz))

    def albedo(self, zt: np.ndarray, sh: Optional[np.ndarray] = None):
        """Per-pixel closed-form albedo (C x P) and the degenerate-pixel flags."""
        if sh is None:
            sh, _ = self.shading(zt)
        s = self.psi[:, :, None] * sh[:, None, :]
        num = np.sum(self.weight * s * self.obs, axis=0)
        den = np.sum(self.weight * s * s, axis=0)
        degenerate = den <= 0
        rho = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
        return np.maximum(rho, 0.0), degenerate

    # -- conversions -----------------------------------------------------------

    def to_grid(self, values: np.ndarray, fill=0.0) -> np.ndarray:
        out = np.full(self.mask.shape + values.shape[1:], fill, dtype=float)
        out[self.mask] = values
        return out

    def rho_to_grid(self, rho: np.ndarray) -> np.ndarray:
        r = rho.T if self.C == 3 else np.repeat(rho.T, 3, axis=1)
        return self.to_grid(r)

    def rho_from_grid(self, grid: np.ndarray) -> np.ndarray:
        r = np.asarray(grid, float)[self.mask]  # P x 3
        if self.C == 1:
            r = r[:, :1]
        return np.ascontiguousarray(r.T)


# --- linear algebra -----------------------------------------------------------


def pcg(A, b: np.ndarray, tol: float = 1e-8, max_iters: int = 1000, precond: Optional[np.ndarray] = None,
        x0: Optional[np.ndarray] = None):
    """Conjugate gradients for a symmetric positive (semi-)definite ``A``.

    ``precond`` is the inverse diagonal for a Jacobi preconditioner. Stops
    when ``||b - A x|| <= tol * ||b||``. Returns ``(x, iterations,
    converged)``; on non-convergence the iterate with the smallest residual
    is returned.
    """
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, True
    target = tol * bnorm
    z = r * precond if precond is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    best_x, best_res = x.copy(), np.linalg.norm(r)
    if best_res <= target:
        return x, 0, True
    for k in range(1, max_iters + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= target:
            return x, k, True
        z = r * precond if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return best_x, k if max_iters else 0, False


def _projected_jacobian(prob: Problem, sh, G, coef):
    """Jacobian with the albedo direction projected out, pixel by pixel.

    For each (channel, pixel) the rows over lights are made orthogonal to the
    albedo column ``w * Psi * sh``, so the step accounts for the albedo that
    the next closed-form update will re-fit.
    """
    w = prob.weight
    s = w * prob.psi[:, :, None] * sh[:, None, :]  # K x C x P, d(pred)/d(rho)
    den = np.sum(s * s, axis=0)  # C x P
    inv = np.where(den > 0, 1.0 / np.where(den > 0, den, 1.0), 0.0)
    K, C = len(G), prob.C
    blocks = []
    for c in range(C):
        T = sum(sp.diags(s[j, c] * coef[j, c] * w[j, c]) @ G[j] for j in range(K))
        for i in range(K):
            blocks.append(sp.diags(w[i, c] * coef[i, c]) @ G[i] - sp.diags(s[i, c] * inv[c]) @ T)
    return sp.vstack(blocks).tocsr()


def _depth_step(prob: Problem, zt: np.ndarray, rho: np.ndarray):
    """One guarded Gauss-Newton step on log-depth with albedo held fixed."""
    cfg = prob.cfg
    sh, G = prob.light_jacobians(zt)
    r = prob.data_residual(sh, rho)  # K x C x P, already weighted
    coef = prob.psi[:, :, None] * rho[None]  # K x C x P
    rcoef = np.sum(coef * r, axis=1)  # K x P
    # J^T r = -sum_i G_i^T (sum_c coef * r)
    Jtr = -sum(G[i].T @ rcoef[i] for i in range(len(G)))
    if cfg.depth_step == "projected":
        B = _projected_jacobian(prob, sh, G, coef)
    else:
        omega = np.sum(prob.weight * coef * coef, axis=1)  # K x P
        B = sp.vstack([sp.diags(np.sqrt(omega[i])) @ G[i] for i in range(len(G))]).tocsr()
    H = (B.T @ B).tocsr()
    dz0 = zt - prob.zt0
    rhs = -Jtr - cfg.zeta * dz0
    A = (H + cfg.zeta * sp.identity(prob.P, format="csr")).tocsr()
    precond = None
    if cfg.preconditioner == "jacobi":
        diag = A.diagonal()
        precond = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    delta, iters, ok = pcg(A, rhs, cfg.pcg_tol, cfg.pcg_max_iters, precond)
    if not ok:
        warnings.warn(f"PCG did not converge in {cfg.pcg_max_iters} iterations", RuntimeWarning,
                      stacklevel=3)
    e0 = float(np.sum(r * r) + cfg.zeta * dz0 @ dz0)
    alpha = 1.0
    for _ in range(cfg.backtracking_max_halvings + 1):
        trial = zt + alpha * delta
        if cfg.depth_step == "projected":
            tsh, _ = prob.shading(trial)
            e1 = prob.energy(trial, prob.albedo(trial, tsh)[0], tsh)
        else:
            e1 = prob.energy(trial, rho)
        if np.isfinite(e1) and e1 < e0:
            return trial, dict(accepted=True, alpha=alpha, step_norm=float(np.linalg.norm(delta)),
                               pcg_iters=iters, pcg_converged=ok, energy_before=e0,
                               energy_after=e1)
        alpha *= 0.5
    return zt, dict(accepted=False, alpha=0.0, step_norm=float(np.linalg.norm(delta)),
                    pcg_iters=iters, pcg_converged=ok, energy_before=e0, energy_after=e0)


# --- public operations ----------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite values in solver inputs")


def energy(log_depth: LogDepthMap, albedo: EffectiveAlbedoMap, capture: CaptureSet,
           cfg: SolverConfig = SolverConfig()) -> float:
    prob = Problem(capture, cfg, log_depth.mask)
    zt = log_depth.zt[prob.mask]
    rho = prob.rho_from_grid(albedo.rho)
    _check_finite(zt, rho)
    return prob.energy(zt, rho)


def update_albedo(log_depth: LogDepthMap, capture: CaptureSet,
                  cfg: SolverConfig = SolverConfig()) -> EffectiveAlbedoMap:
    prob = Problem(capture, cfg, log_depth.mask)
    rho, degenerate = prob.albedo(log_depth.zt[prob.mask])
    return EffectiveAlbedoMap(prob.rho_to_grid(rho), prob.to_grid(degenerate.all(axis=0)) > 0)


def residuals_and_jacobian(log_depth: LogDepthMap, albedo: EffectiveAlbedoMap, capture: CaptureSet,
                           cfg: SolverConfig = SolverConfig()):
    """Residual vector and sparse Jacobian w.r.t. the masked log-depths.

    Rows are ordered ``(light, channel, pixel)``; excluded observations
    (saturated, or at pixels without a defined normal) are zero rows.
    """
    prob = Problem(capture, cfg, log_depth.mask)
    zt = log_depth.zt[prob.mask]
    rho = prob.rho_from_grid(albedo.rho)
    _check_finite(zt, rho)
    sh, G = prob.light_jacobians(zt)
    r = prob.data_residual(sh, rho)
    coef = prob.weight * prob.psi[:, :, None] * rho[None]
    blocks = [sp.diags(-coef[i, c]) @ G[i] for i in range(len(G)) for c in range(prob.C)]
    return r.reshape(-1), sp.vstack(blocks).tocsr()


def update_depth(log_depth: LogDepthMap, albedo: EffectiveAlbedoMap, capture: CaptureSet,
                 cfg: SolverConfig = SolverConfig(), return_info: bool = False):
    prob = Problem(capture, cfg, log_depth.mask)
    zt = log_depth.zt[prob.mask]
    rho = prob.rho_from_grid(albedo.rho)
    _check_finite(zt, rho)
    new, info = _depth_step(prob, zt, rho)
    out = LogDepthMap(prob.to_grid(new), prob.mask)
    return (out, info) if return_info else out


def solve(capture: CaptureSet, cfg: SolverConfig = SolverConfig(),
          mask: Optional[np.ndarray] = None) -> SolverResult:
    prob = Problem(capture, cfg, mask)
    zt = prob.zt0.copy()
    rho, degenerate = prob.albedo(zt)
    history = [prob.energy(zt, rho)]
    converged = False
    it = 0
    pcg_warnings = 0
    steps = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        for it in range(1, cfg.max_outer_iters + 1):
            zt, info = _depth_step(prob, zt, rho)
            rho, degenerate = prob.albedo(zt)
            e = prob.energy(zt, rho)
            steps.append(info)
            prev = history[-1]
            history.append(e)
            log.debug("iter %d energy %.6e alpha %.3g pcg %d", it, e, info["alpha"],
                      info["pcg_iters"])
            if prev == 0.0 or (prev - e) <= cfg.energy_rel_tol * prev:
                converged = True
                break
        pcg_warnings = sum(1 for w in caught if "PCG" in str(w.message))
    depth = DepthMap(prob.to_grid(np.exp(zt), fill=1.0), prob.mask)
    ld = LogDepthMap(prob.to_grid(zt), prob.mask)
    rho_grid = prob.rho_to_grid(rho)
    eff = EffectiveAlbedoMap(rho_grid, prob.to_grid(degenerate.all(axis=0)) > 0)
    return SolverResult(
        log_depth=ld,
        depth=depth,
        normals=normals_from_depth(depth, capture.camera, cfg.stencil),
        effective_albedo=eff,
        physical_albedo=AlbedoMap(rho_grid),
        energy_history=history,
        converged=converged,
        iterations=it,
        pcg_warnings=pcg_warnings,
        step_log=steps,
    )
