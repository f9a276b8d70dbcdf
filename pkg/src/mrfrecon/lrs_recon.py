"""Low-rank and subspace (LRS) baseline: least-squares fit of U with V fixed."""

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigurationError, NumericalFailure, ValidationError
from .subspace import SpatialCoefficients

__all__ = ["LsqConfig", "SpatialCoefficients", "lrs_reconstruct", "save_coefficients",
           "load_coefficients"]

DIVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class LsqConfig:
    max_cg_iters: int = 50
    cg_tolerance: float = 1e-6
    tikhonov_lambda: float = 0.0

    def __post_init__(self):
        if self.max_cg_iters < 0:
            raise ConfigurationError("max_cg_iters must be >= 0")
        if not self.cg_tolerance > 0:
            raise ConfigurationError("cg_tolerance must be positive")
        if not self.tikhonov_lambda >= 0:
            raise ConfigurationError("tikhonov_lambda must be nonnegative")


def _dot(a, b):
    return np.vdot(a, b).real


def lrs_reconstruct(data, op, v, sens, cfg=LsqConfig()):
    """Solve ``min_U sum_c ||d_c - Omega(F S_c U V)||^2 + lam ||U||_F^2``.

    Conjugate gradients on the normal equations (CGLS form), started from
    U = 0. The returned coefficients carry ``info`` with the data-residual
    and normal-residual histories (relative to ||d|| and ||A^H d||).

    Raises:
        NumericalFailure: if the data residual grows for
            ``DIVERGENCE_WINDOW`` consecutive iterations or turns non-finite.
    """
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    per_coil = data.per_coil
    if per_coil.shape[0] != sens.n_coils:
        raise ConfigurationError(f"data has {per_coil.shape[0]} coils, maps have {sens.n_coils}")
    if per_coil.shape[1] != op.trajectory.layout[-1]:
        raise ConfigurationError("data length does not match the trajectory")
    lam = cfg.tikhonov_lambda
    rank = v_hat.shape[0]

    def fwd(u):
        return op.apply_full_model(u, v_hat, sens).per_coil

    def adj(r):
        return op.adjoint_full_model(r, v_hat, sens)

    u = np.zeros((op.n, rank), dtype=np.complex128)
    r = per_coil.copy()
    s = adj(r)
    p = s.copy()
    gamma = _dot(s, s)
    d_norm = np.sqrt(_dot(per_coil, per_coil))
    s0_norm = np.sqrt(gamma)
    data_hist = [1.0 if d_norm > 0 else 0.0]
    normal_hist = [1.0 if s0_norm > 0 else 0.0]
    increases = 0
    converged = s0_norm == 0
    it = 0
    while not converged and it < cfg.max_cg_iters:
        q = fwd(p)
        denom = _dot(q, q) + lam * _dot(p, p)
        if denom <= 0:
            break
        alpha = gamma / denom
        u += alpha * p
        r -= alpha * q
        s = adj(r) - lam * u
        gamma_new = _dot(s, s)
        it += 1
        res = np.sqrt(_dot(r, r)) / d_norm
        if not (np.isfinite(res) and np.isfinite(gamma_new)):
            raise NumericalFailure("non-finite residual in CG",
                                   {"iteration": it, "data_residual": data_hist})
        increases = increases + 1 if res > data_hist[-1] else 0
        data_hist.append(res)
        normal_hist.append(np.sqrt(gamma_new) / s0_norm)
        if increases >= DIVERGENCE_WINDOW:
            raise NumericalFailure(
                f"CG diverged: residual increased over {DIVERGENCE_WINDOW} consecutive iterations",
                {"iteration": it, "data_residual": data_hist, "normal_residual": normal_hist})
        if normal_hist[-1] <= cfg.cg_tolerance:
            converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    grid = op.grid
    info = {"iterations": it, "converged": bool(converged),
            "data_residual": np.array(data_hist), "normal_residual": np.array(normal_hist),
            "final_relative_residual": float(data_hist[-1])}
    return SpatialCoefficients(u, grid, info)


def save_coefficients(path, coeffs, extra_meta=None):
    arrays = {"u": coeffs.u, "grid": np.array(coeffs.grid)}
    for key in ("data_residual", "normal_residual"):
        if key in coeffs.info:
            arrays[key] = np.asarray(coeffs.info[key], dtype=float)
    meta = {"kind": "coefficients", "content_hash": container.array_hash(coeffs.u)}
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def load_coefficients(path):
    arrays, meta = container.load(path)
    if "u" not in arrays or "grid" not in arrays:
        raise ValidationError(f"{path}: missing 'u' or 'grid'")
    info = {k: arrays[k] for k in ("data_residual", "normal_residual") if k in arrays}
    return SpatialCoefficients(arrays["u"], tuple(int(g) for g in arrays["grid"]), info), meta
