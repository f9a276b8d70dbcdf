"""Low-rank/subspace reconstruction with an untrained generative prior, by ADMM.

The splitting is ``H_c = S_c U V`` (per coil) and ``U = G_theta(z)``. One
outer iteration performs

(a) H-step: per coil and TR, ``min ||d - F_m h||^2 + mu1/2 ||h - q||^2``
    with ``Q_c = S_c U V - Lambda_c / mu1`` (matrix inversion lemma, cached
    Gram factorizations);
(b) U-step: voxel-wise closed form;
(c) theta-step: Adam fit of ``G_theta(z)`` to ``U + Gamma / mu2``, warm
    started from the previous theta;
(d) multiplier ascent ``Lambda_c += mu1 (H_c - S_c U V)``,
    ``Gamma += mu2 (U - G_theta(z))``.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .errors import ConfigurationError, MRFError, NumericalFailure, ValidationError
from .generative_net import (AdamConfig, AdamState, NetworkParams, init_params, net_fit,
                             net_forward)
from .lrs_recon import LsqConfig, lrs_reconstruct
from .matching import timeseries_nrmse
from .subspace import SpatialCoefficients

U_STEPS = ("lagrangian", "as-written")
METRIC_COLUMNS = ("iter", "aug_lagrangian", "primal_h", "primal_g", "nrmse_opt",
                  "secs_h", "secs_u", "secs_theta")


@dataclass(frozen=True)
class AdmmConfig:
    """Outer-loop settings.

    ``mu1``/``mu2`` default (None) to ``1e-2 * mean(sum_c |S_c|^2)`` and
    ``mu2 = mu1``. ``mu2 = 0`` disables the generative prior: the theta-step
    is skipped and the loop reduces to a splitting of the plain LRS problem.

    ``u_step="lagrangian"`` minimizes the augmented Lagrangian exactly over
    U, which includes ``-Gamma / mu1`` in the right-hand side;
    ``"as-written"`` omits that term. ``persist_adam`` carries Adam moments
    across outer iterations instead of restarting them. ``prefit_iters`` > 0
    fits the randomly initialized generator to the initial U (that many
    Adam steps) before the first outer iteration. ``lr_decay`` < 1 scales
    the Adam learning rate by ``lr_decay**k`` in outer iteration k, so the
    theta-step settles instead of re-perturbing a fitted network with
    full-size steps every iteration.
    """

    mu1: float = None
    mu2: float = None
    max_outer_iters: int = 30
    tolerance: float = 1e-4
    adam: AdamConfig = AdamConfig()
    record_metrics: bool = True
    u_step: str = "lagrangian"
    persist_adam: bool = False
    prefit_iters: int = 0
    lr_decay: float = 1.0
    checkpoint_every: int = 0
    checkpoint_path: str = None

    def __post_init__(self):
        if self.mu1 is not None and not self.mu1 > 0:
            raise ConfigurationError(f"mu1 must be positive, got {self.mu1}")
        if self.mu2 is not None and not self.mu2 >= 0:
            raise ConfigurationError(f"mu2 must be nonnegative, got {self.mu2}")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if self.max_outer_iters < 0:
            raise ConfigurationError("max_outer_iters must be >= 0")
        if self.u_step not in U_STEPS:
            raise ConfigurationError(f"u_step must be one of {U_STEPS}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ConfigurationError("checkpoint_every needs checkpoint_path")

    def resolved(self, sens):
        mu1 = self.mu1 if self.mu1 is not None else 1e-2 * float(np.mean(sens.sum_of_squares()))
        mu2 = self.mu2 if self.mu2 is not None else mu1
        return replace(self, mu1=mu1, mu2=mu2)


@dataclass(eq=False)
class AdmmState:
    """Iterate of the splitting. ``h`` and ``lam`` are (n_coils, N, M)."""

    h: np.ndarray
    u: np.ndarray
    params: NetworkParams
    lam: np.ndarray
    gamma: np.ndarray
    net_u: np.ndarray = None
    adam_state: AdamState = None
    iteration: int = 0

    def check(self):
        for name in ("h", "u", "lam", "gamma"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalFailure(f"non-finite {name} at iteration {self.iteration}",
                                       {"iteration": self.iteration, "variable": name})


@dataclass(eq=False)
class ReconResult:
    u_hat: SpatialCoefficients
    net_u: SpatialCoefficients
    params: NetworkParams
    metrics: dict
    iterations: int
    converged: bool
    state: AdmmState
    init_nrmse: float = None
    timings: dict = field(default_factory=dict)

    def timeseries(self, v):
        v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
        return self.u_hat.u @ v_hat


def _frames(mat, grid):
    # (N, M) -> (M, rows, cols)
    return mat.T.reshape(mat.shape[1], *grid)


def solve_h_subproblem(state, data, op, sens, v, mu1):
    """H-step for every coil; returns the new (n_coils, N, M) array."""
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    uv = state.u @ v_hat
    out = np.empty_like(state.lam)
    smaps = sens.flat()
    for c in range(sens.n_coils):
        q = smaps[c][:, None] * uv - state.lam[c] / mu1
        h = op.regularized_solve_frames(data.per_coil[c], _frames(q, op.grid), mu1)
        out[c] = h.reshape(h.shape[0], -1).T
    return out


def solve_u_subproblem(state, sens, v, mu1, mu2, net_output, u_step="lagrangian"):
    """Voxel-wise closed-form U-step.

    ``U = W / (sum_c |S_c|^2 + mu2/mu1)`` with
    ``W = sum_c conj(S_c) (H_c + Lambda_c/mu1) V^H + (mu2/mu1) G`` and, for
    the exact augmented-Lagrangian minimizer, an extra ``- Gamma/mu1``.
    Relies on V having orthonormal rows.
    """
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    smaps = sens.flat()
    w = np.zeros_like(state.u)
    for c in range(sens.n_coils):
        w += np.conj(smaps[c])[:, None] * ((state.h[c] + state.lam[c] / mu1) @ v_hat.conj().T)
    ratio = mu2 / mu1
    if ratio > 0:
        w += ratio * np.asarray(net_output)
        if u_step == "lagrangian":
            w -= state.gamma / mu1
    denom = sens.sum_of_squares() + ratio
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom[:, None] > 0, w / safe[:, None], 0.0)


def solve_theta_subproblem(state, mu2, arch, z, adam, persist=False):
    """Adam fit of the generator to ``U + Gamma / mu2`` from the current theta."""
    target = state.u + state.gamma / mu2
    fit = net_fit(arch, state.params, z, target, adam, state.adam_state if persist else None)
    return fit


def update_multipliers(state, sens, v, mu1, mu2, net_output):
    """Returns ``(lam, gamma)`` after one dual ascent step."""
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    uv = state.u @ v_hat
    lam = state.lam + mu1 * (state.h - sens.flat()[:, :, None] * uv[None])
    gamma = state.gamma + mu2 * (state.u - net_output) if mu2 > 0 else state.gamma.copy()
    return lam, gamma


def augmented_lagrangian(state, data, op, sens, v, mu1, mu2, net_output):
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    uv = state.u @ v_hat
    total = 0.0
    primal_h = 0.0
    for c in range(sens.n_coils):
        resid = data.per_coil[c] - op.forward_frames(_frames(state.h[c], op.grid))
        gap = state.h[c] - sens.flat()[c][:, None] * uv
        total += np.vdot(resid, resid).real + np.vdot(state.lam[c], gap).real
        total += 0.5 * mu1 * np.vdot(gap, gap).real
        primal_h += np.vdot(gap, gap).real
    gap_g = state.u - net_output
    primal_g = np.vdot(gap_g, gap_g).real
    if mu2 > 0:
        total += np.vdot(state.gamma, gap_g).real + 0.5 * mu2 * primal_g
    return float(total), float(np.sqrt(primal_h)), float(np.sqrt(primal_g))


def initial_state(u0, params0, n_coils, m):
    u0 = np.asarray(u0, dtype=np.complex128)
    n, rank = u0.shape
    return AdmmState(h=np.zeros((n_coils, n, m), dtype=np.complex128), u=u0.copy(),
                     params=params0, lam=np.zeros((n_coils, n, m), dtype=np.complex128),
                     gamma=np.zeros((n, rank), dtype=np.complex128))


def reconstruct(data, op, v, sens, net_arch, z, cfg=AdmmConfig(), init=None, params0=None,
                net_seed=0, lsq=LsqConfig(), truth=None, mask=None, resume=None, log=None):
    """Run the ADMM loop.

    Args:
        data: :class:`KSpaceData`.
        op: :class:`EncodingOperator` whose trajectory matches ``data``.
        v: temporal subspace (L x M).
        sens: coil sensitivities.
        net_arch, z: generator architecture and frozen latent.
        cfg: :class:`AdmmConfig`.
        init: initial U; defaults to the LRS reconstruction.
        params0: initial network parameters (default ``init_params(net_arch, net_seed)``).
        truth, mask: optional ground-truth Casorati matrix and voxel mask, used
            only to record the per-iteration NRMSE trace.
        resume: an :class:`AdmmState` (e.g. from a checkpoint) to continue from.
        log: optional callable receiving one metrics dict per iteration.

    Returns:
        ReconResult; ``u_hat`` is the last U-step solution, ``net_u`` the
        generator output at termination.
    """
    v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
    cfg = cfg.resolved(sens)
    mu1, mu2 = cfg.mu1, cfg.mu2
    m = v_hat.shape[1]
    if op.trajectory.m != m:
        raise ConfigurationError(f"trajectory covers {op.trajectory.m} TRs, subspace {m}")
    if not np.all(np.isfinite(data.per_coil)):
        raise ValidationError("k-space data contains non-finite samples")
    timings = {}
    t0 = time.perf_counter()
    if resume is not None:
        state = resume
    else:
        if init is None:
            init = lrs_reconstruct(data, op, v_hat, sens, lsq)
        u0 = init.u if hasattr(init, "u") else init
        params = params0 if params0 is not None else init_params(net_arch, net_seed)
        state = initial_state(u0, params, sens.n_coils, m)
    timings["init"] = time.perf_counter() - t0
    if resume is None and cfg.prefit_iters > 0 and mu2 > 0 and cfg.max_outer_iters > 0:
        t = time.perf_counter()
        fit = net_fit(net_arch, state.params, z, state.u,
                      replace(cfg.adam, iterations=cfg.prefit_iters, early_stop=None))
        state.params = fit.params
        state.adam_state = fit.adam_state
        timings["prefit"] = time.perf_counter() - t
    if state.net_u is None:
        state.net_u = net_forward(net_arch, state.params, z).u
    truth_c = None if truth is None else (truth.c if hasattr(truth, "c") else np.asarray(truth))
    init_nrmse = None
    if truth_c is not None:
        init_nrmse = timeseries_nrmse(truth_c, state.u @ v_hat, mask)
    metrics = {k: [] for k in METRIC_COLUMNS}
    metrics["rel_change"] = []
    metrics["lambda_norm"] = []
    converged = False
    if cfg.max_outer_iters > 0:
        t = time.perf_counter()
        op.build_gram_cache(mu1)
        timings["gram"] = time.perf_counter() - t
    start = state.iteration
    for k in range(start, cfg.max_outer_iters):
        try:
            t_a = time.perf_counter()
            state.h = solve_h_subproblem(state, data, op, sens, v_hat, mu1)
            t_b = time.perf_counter()
            u_old = state.u
            state.u = solve_u_subproblem(state, sens, v_hat, mu1, mu2, state.net_u, cfg.u_step)
            t_c = time.perf_counter()
            if mu2 > 0:
                adam = cfg.adam
                if cfg.lr_decay != 1.0:
                    adam = replace(adam, learning_rate=adam.learning_rate * cfg.lr_decay ** k)
                fit = solve_theta_subproblem(state, mu2, net_arch, z, adam, cfg.persist_adam)
                state.params = fit.params
                state.adam_state = fit.adam_state
                state.net_u = net_forward(net_arch, state.params, z).u
            t_d = time.perf_counter()
            if cfg.record_metrics:
                aug, p_h, p_g = augmented_lagrangian(state, data, op, sens, v_hat, mu1, mu2,
                                                     state.net_u)
            else:
                aug = p_h = p_g = float("nan")
            state.lam, state.gamma = update_multipliers(state, sens, v_hat, mu1, mu2, state.net_u)
            state.iteration = k + 1
            state.check()
        except MRFError as exc:
            if isinstance(exc, NumericalFailure):
                diag = dict(exc.diagnostics or {}, outer_iteration=k)
                raise NumericalFailure(f"outer iteration {k}: {exc}", diag) from exc
            raise
        denom = np.linalg.norm(u_old)
        rel = float(np.linalg.norm(state.u - u_old) / denom) if denom > 0 else float("inf")
        nr = timeseries_nrmse(truth_c, state.u @ v_hat, mask) if truth_c is not None else float("nan")
        row = {"iter": k + 1, "aug_lagrangian": aug, "primal_h": p_h, "primal_g": p_g,
               "nrmse_opt": nr, "secs_h": t_b - t_a, "secs_u": t_c - t_b, "secs_theta": t_d - t_c}
        for key, val in row.items():
            metrics[key].append(val)
        metrics["rel_change"].append(rel)
        metrics["lambda_norm"].append(float(np.linalg.norm(state.lam)))
        if log is not None:
            log(dict(row, rel_change=rel))
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, state, net_arch, metrics)
        if rel < cfg.tolerance:
            converged = True
            break
    timings["total"] = time.perf_counter() - t0
    grid = op.grid
    return ReconResult(SpatialCoefficients(state.u, grid), SpatialCoefficients(state.net_u, grid),
                       state.params, metrics, state.iteration - start, converged, state,
                       init_nrmse, timings)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for i in range(len(metrics["iter"])):
            writer.writerow([metrics[c][i] if c == "iter" else repr(float(metrics[c][i]))
                             for c in METRIC_COLUMNS])


def save_checkpoint(path, state, arch, metrics=None, extra_meta=None):
    arrays = {"h": state.h, "u": state.u, "lam": state.lam, "gamma": state.gamma}
    for name, arr in state.params.arrays.items():
        arrays[f"theta.{name}"] = arr
    if state.adam_state is not None:
        arrays["adam.m"] = state.adam_state.m
        arrays["adam.v"] = state.adam_state.v
    meta = {"kind": "admm_checkpoint", "iteration": state.iteration,
            "architecture": arch.to_dict(), "init_seed": state.params.init_seed,
            "adam_t": None if state.adam_state is None else state.adam_state.t}
    if metrics is not None:
        meta["metrics"] = {k: [float(x) for x in vals] for k, vals in metrics.items()}
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def load_checkpoint(path, arch):
    arrays, meta = container.load(path)
    if meta.get("kind") != "admm_checkpoint":
        raise ValidationError(f"{path}: not an ADMM checkpoint")
    params = NetworkParams({n: arrays[f"theta.{n}"] for n in arch.param_shapes()},
                           meta.get("init_seed")).check(arch)
    adam_state = None
    if "adam.m" in arrays:
        adam_state = AdamState(arrays["adam.m"], arrays["adam.v"], int(meta.get("adam_t") or 0))
    state = AdmmState(arrays["h"], arrays["u"], params, arrays["lam"], arrays["gamma"],
                      adam_state=adam_state, iteration=int(meta["iteration"]))
    return state, meta
