"""Experiment configuration and the end-to-end simulation pipeline.

A run goes: schedule -> dictionary (cached on disk) -> temporal subspace ->
phantom -> noisy spiral k-space -> reconstruction (LRS and/or the ADMM
method) -> dictionary matching -> masked NRMSE against the ground truth.
Sweeps and penalty tuning are thin loops over :func:`run_experiment`.
"""

import copy
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import (admm_recon, container, encoding, generative_net, lrs_recon, matching, phantom,
               spin_sim, subspace)
from .errors import ConfigurationError, MRFError

METHODS = ("lrs", "dgp")
SWEEP_AXES = {"acquisition_length": "m", "snr": "snr_db"}
SWEEP_COLUMNS = ("value", "method", "nrmse_T1", "nrmse_T2", "nrmse_PD", "nrmse_timeseries",
                 "wall_secs")
TIMING_PREFIXES = ("secs_", "wall_")

DEFAULTS = {
    "grid": [64, 64],
    "m": 200,
    "rank": 6,
    "n_coils": 1,
    "snr_db": 30.0,
    "schedule": {"lobe_length": 100, "fa_min_deg": 5.0, "fa_max_deg": [70.0, 40.0],
                 "tr_ms": 12.0, "te_ms": 2.0, "inversion_delay_ms": 20.0, "file": None},
    "dictionary": {"t1": [[100.0, 1500.0, 10.0], [1520.0, 3000.0, 20.0]],
                   "t2": [[20.0, 200.0, 1.0], [202.0, 350.0, 2.0]],
                   "model": "epg", "n_states": None, "build_m": None},
    "trajectory": {"n_interleaves": 48, "samples_per_interleaf": None, "n_turns": 1.0,
                   "mode": "gridded-nonuniform"},
    "method": "dgp",
    "lsq": {"max_cg_iters": 50, "cg_tolerance": 1e-6, "tikhonov_lambda": 0.0},
    "admm": {"mu1": None, "mu2": None, "max_outer_iters": 30, "tolerance": 1e-4,
             "u_step": "lagrangian", "prefit_iters": 0, "persist_adam": False, "lr_decay": 1.0,
             "learning_rate": 0.01, "adam_iterations": 300, "early_stop_patience": None,
             "early_stop_min_delta": 1e-4},
    "net": {"base_channels": 64, "channels": [64, 64, 32, 32], "kernel": 3},
    "seeds": {"phantom": 0, "noise": 1, "net_init": 2, "latent": 3},
    "out": "mrf_out",
}

PRESETS = {
    # desk-scale reference problem used by the acceptance suite
    # (penalties, learning-rate decay and generator width tuned on this problem)
    "reference": {"grid": [64, 64], "m": 200, "rank": 5, "n_coils": 1, "snr_db": 30.0,
                  "admm": {"mu1": 0.1, "mu2": 0.1, "lr_decay": 0.85, "prefit_iters": 300},
                  "net": {"base_channels": 32, "channels": [32, 32, 16, 16]}},
    # small and fast: end-to-end smoke runs
    "smoke": {"grid": [32, 32], "m": 100, "rank": 4, "n_coils": 1, "snr_db": 30.0,
              "dictionary": {"t1": [[100.0, 3000.0, 50.0]], "t2": [[20.0, 350.0, 10.0]]},
              "admm": {"max_outer_iters": 3, "adam_iterations": 40},
              "net": {"base_channels": 16, "channels": [16, 16, 8]}},
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``data`` is the full nested dict."""

    data: dict

    @classmethod
    def from_dict(cls, over=None, preset=None):
        base = copy.deepcopy(DEFAULTS)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            base = _merge(base, PRESETS[preset])
        cfg = cls(_merge(base, over or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, preset=None):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        preset = raw.pop("preset", preset)
        return cls.from_dict(raw, preset)

    def with_overrides(self, assignments):
        """Apply ``key.sub=value`` strings (values parsed as JSON when possible)."""
        over = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not of the form key=value")
            key, text = item.split("=", 1)
            node = over
            parts = key.strip().split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = _parse_value(text)
        return self.replace(over)

    def replace(self, over):
        cfg = ExperimentConfig(_merge(self.data, over))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self):
        return copy.deepcopy(self.data)

    def hash(self):
        d = self.to_dict()
        d.pop("out", None)
        return container.config_hash(d)

    def validate(self):
        d = self.data
        grid = d["grid"]
        if len(grid) != 2 or min(grid) < 16:
            raise ConfigurationError(f"grid must be two sizes >= 16, got {grid}")
        if int(d["m"]) < 1:
            raise ConfigurationError("m must be >= 1")
        if not 1 <= int(d["rank"]) <= int(d["m"]):
            raise ConfigurationError(f"rank must lie in [1, m], got {d['rank']}")
        if int(d["n_coils"]) < 1:
            raise ConfigurationError("n_coils must be >= 1")
        if d["method"] not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if d["trajectory"]["mode"] not in encoding.MODES:
            raise ConfigurationError(f"trajectory.mode must be one of {encoding.MODES}")
        build_m = d["dictionary"]["build_m"]
        if build_m is not None and int(build_m) < int(d["m"]):
            raise ConfigurationError("dictionary.build_m must be >= m")
        # constructing the typed configs runs their own checks
        self.lsq_config()
        self.admm_config()
        self.net_arch()
        return self

    # typed views ------------------------------------------------------------

    def lsq_config(self):
        return lrs_recon.LsqConfig(**self.data["lsq"])

    def admm_config(self):
        a = self.data["admm"]
        early = None
        if a["early_stop_patience"]:
            early = generative_net.EarlyStop(int(a["early_stop_patience"]),
                                             float(a["early_stop_min_delta"]))
        adam = generative_net.AdamConfig(learning_rate=float(a["learning_rate"]),
                                         iterations=int(a["adam_iterations"]), early_stop=early)
        return admm_recon.AdmmConfig(mu1=a["mu1"], mu2=a["mu2"],
                                     max_outer_iters=int(a["max_outer_iters"]),
                                     tolerance=float(a["tolerance"]), adam=adam,
                                     u_step=a["u_step"], persist_adam=bool(a["persist_adam"]),
                                     prefit_iters=int(a["prefit_iters"]),
                                     lr_decay=float(a["lr_decay"]))

    def net_arch(self):
        n = self.data["net"]
        return generative_net.GeneratorArchitecture.for_grid(
            self.data["grid"], self.data["rank"], base_channels=int(n["base_channels"]),
            channels=tuple(n["channels"]), kernel=int(n["kernel"]))

    def schedule(self, m=None):
        s = self.data["schedule"]
        m = int(self.data["m"] if m is None else m)
        if s["file"]:
            sched = spin_sim.load_schedule(s["file"])
            if sched.m < m:
                raise ConfigurationError(f"schedule file has {sched.m} TRs, need {m}")
            return sched.truncate(m)
        return spin_sim.default_schedule(m, s["lobe_length"], s["fa_min_deg"],
                                         tuple(s["fa_max_deg"]), s["tr_ms"], s["te_ms"],
                                         s["inversion_delay_ms"])


# --- pipeline ----------------------------------------------------------------

def default_cache_dir():
    return os.environ.get("MRF_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "mrfrecon"))


def dictionary_for(cfg, cache_dir=None, build_m=None):
    """Normalized dictionary for ``cfg``'s schedule truncated to ``cfg['m']``.

    The dictionary is simulated once for ``build_m`` TRs (default: the
    config's ``dictionary.build_m`` or ``m``) and cached; shorter schedules
    reuse it by truncation, which is exact because the simulation is causal.
    """
    d = cfg["dictionary"]
    m = int(cfg["m"])
    build_m = int(build_m or d["build_m"] or m)
    sched = cfg.schedule(build_m)
    key = container.config_hash({"schedule": sched.schedule_id, "t1": d["t1"], "t2": d["t2"],
                                 "model": d["model"], "n_states": d["n_states"]})
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"dict-{key}.mrft")
    if path and os.path.exists(path):
        full, _ = spin_sim.load_dictionary(path)
    else:
        sim = spin_sim.SimConfig(d["model"], d["n_states"])
        full = spin_sim.build_dictionary(spin_sim.GridSpec(tuple(map(tuple, d["t1"]))),
                                         spin_sim.GridSpec(tuple(map(tuple, d["t2"]))), sched, sim)
        if path:
            tmp = path + f".tmp{os.getpid()}"
            spin_sim.save_dictionary(tmp, full, {"cache_key": key})
            os.replace(tmp, path)
    if full.m == m:
        return full
    return full.truncate(m, cfg.schedule().schedule_id)


@dataclass(eq=False)
class Setup:
    """Everything a reconstruction needs, plus the ground truth."""

    cfg: ExperimentConfig
    dictionary: spin_sim.Dictionary
    subspace: subspace.TemporalSubspace
    maps: phantom.ParameterMaps
    truth: phantom.CasoratiImage
    trajectory: encoding.Trajectory
    op: encoding.EncodingOperator
    sens: encoding.CoilSensitivities
    data: encoding.KSpaceData


def make_trajectory(cfg):
    t = cfg["trajectory"]
    return encoding.make_spiral_trajectory(tuple(cfg["grid"]), t["n_interleaves"],
                                           t["samples_per_interleaf"], int(cfg["m"]), t["n_turns"])


def acquire(cfg, maps, sched, op, sens):
    """Noiseless time series and noisy multi-coil k-space for ``maps``.

    Every TR frame of every coil image is encoded with its own interleaf;
    the data are therefore not restricted to the rank-L subspace.
    """
    truth = phantom.synthesize_timeseries(maps, sched)
    grid = tuple(cfg["grid"])
    frames = truth.c.T.reshape(truth.m, *grid)
    smaps = sens.maps
    per_coil = np.stack([op.forward_frames(frames * smaps[c][None]) for c in range(sens.n_coils)])
    clean = encoding.KSpaceData(per_coil, op.trajectory.layout, op.trajectory.content_hash())
    ref = phantom.signal_reference(truth, maps)
    data = phantom.add_noise(clean, float(cfg["snr_db"]), ref, int(cfg["seeds"]["noise"]))
    return truth, data


def prepare(cfg, dictionary=None, cache_dir=None):
    if dictionary is None:
        dictionary = dictionary_for(cfg, cache_dir)
    v = subspace.estimate_temporal_subspace(dictionary, int(cfg["rank"]))
    grid = tuple(cfg["grid"])
    maps = phantom.make_phantom(grid, int(cfg["seeds"]["phantom"]))
    traj = make_trajectory(cfg)
    op = encoding.EncodingOperator(grid, traj, cfg["trajectory"]["mode"])
    sens = encoding.make_coil_sensitivities(grid, int(cfg["n_coils"]))
    truth, data = acquire(cfg, maps, cfg.schedule(), op, sens)
    return Setup(cfg, dictionary, v, maps, truth, traj, op, sens, data)


def reconstruct(setup, method, init=None, log=None):
    """Returns ``(SpatialCoefficients, info)`` for ``method`` in ``METHODS``."""
    cfg = setup.cfg
    t0 = time.perf_counter()
    if method == "lrs":
        coeffs = lrs_recon.lrs_reconstruct(setup.data, setup.op, setup.subspace, setup.sens,
                                           cfg.lsq_config())
        return coeffs, {"wall_secs": time.perf_counter() - t0, "lsq": coeffs.info}
    if method != "dgp":
        raise ConfigurationError(f"unknown method {method!r}")
    arch = cfg.net_arch()
    z = generative_net.make_latent(arch, int(cfg["seeds"]["latent"]))
    res = admm_recon.reconstruct(setup.data, setup.op, setup.subspace, setup.sens, arch, z,
                                 cfg.admm_config(), init=init,
                                 net_seed=int(cfg["seeds"]["net_init"]), lsq=cfg.lsq_config(),
                                 truth=setup.truth, mask=setup.maps.mask, log=log)
    info = {"wall_secs": time.perf_counter() - t0, "result": res}
    return res.u_hat, info


def evaluate(setup, coeffs):
    """Match the reconstructed series and score it against the ground truth."""
    ts = coeffs.u @ setup.subspace.v_hat
    mask = setup.maps.mask
    match = matching.dictionary_match(phantom.CasoratiImage(ts, setup.maps.grid),
                                      setup.dictionary, mask)
    err = matching.map_nrmse(setup.maps, match.maps, mask)
    scores = {"nrmse_T1": err["t1"], "nrmse_T2": err["t2"], "nrmse_PD": err["pd"],
              "nrmse_timeseries": matching.timeseries_nrmse(setup.truth, ts, mask)}
    return scores, match


def run_experiment(cfg, methods=METHODS, cache_dir=None, out_dir=None, log=None, setup=None):
    """Paired reconstructions on one simulated data set.

    The ADMM method is initialized from the LRS solution computed in the
    same call when both are requested. Returns ``(rows, artifacts)``; rows
    carry the sweep CSV columns (without ``value``).
    """
    if setup is None:
        setup = prepare(cfg, cache_dir=cache_dir)
    rows, artifacts = [], {"setup": setup}
    lrs_coeffs = None
    for method in methods:
        init = lrs_coeffs if method == "dgp" else None
        coeffs, info = reconstruct(setup, method, init=init, log=log)
        if method == "lrs":
            lrs_coeffs = coeffs
        scores, match = evaluate(setup, coeffs)
        rows.append(dict(method=method, **scores, wall_secs=info["wall_secs"]))
        artifacts[method] = {"coeffs": coeffs, "info": info, "match": match, "scores": scores}
        if out_dir:
            _write_method_outputs(out_dir, cfg, setup, method, coeffs, info, match)
    if out_dir:
        write_rows_csv(os.path.join(out_dir, "results.csv"), rows, SWEEP_COLUMNS[1:])
    return rows, artifacts


def _write_method_outputs(out_dir, cfg, setup, method, coeffs, info, match):
    os.makedirs(out_dir, exist_ok=True)
    meta = lineage_meta(cfg, {"kspace": container.array_hash(setup.data.per_coil),
                              "subspace": setup.subspace.content_hash()})
    lrs_recon.save_coefficients(os.path.join(out_dir, f"coeffs_{method}.mrft"), coeffs,
                                dict(meta, method=method))
    matching.save_match(os.path.join(out_dir, f"maps_{method}.mrft"), match,
                        dict(meta, method=method, phantom_hash=maps_hash(setup.maps)))
    if method == "dgp":
        res = info["result"]
        admm_recon.write_metrics_csv(os.path.join(out_dir, "metrics_dgp.csv"), res.metrics)


def maps_hash(maps):
    return container.array_hash(maps.t1_map, maps.t2_map, maps.pd_map, maps.mask)


def lineage_meta(cfg, inputs=None):
    return {"config": cfg.to_dict(), "config_hash": cfg.hash(), "inputs": dict(inputs or {})}


def _fmt(val):
    if isinstance(val, (float, np.floating)):
        return repr(float(val))
    return val


def write_rows_csv(path, rows, columns):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare_csv(path_a, path_b, tol=1e-10, skip_prefixes=TIMING_PREFIXES):
    """Largest absolute difference over numeric cells of two CSV files.

    Columns whose name starts with one of ``skip_prefixes`` (wall-clock
    timings) are ignored. Raises ConfigurationError on a structural mismatch.
    """
    a, b = read_csv(path_a), read_csv(path_b)
    if len(a) != len(b) or (a and list(a[0]) != list(b[0])):
        raise ConfigurationError("CSV files differ in shape or header")
    worst = 0.0
    for ra, rb in zip(a, b):
        for col in ra:
            if col.startswith(tuple(skip_prefixes)):
                continue
            try:
                xa, xb = float(ra[col]), float(rb[col])
            except ValueError:
                if ra[col] != rb[col]:
                    raise ConfigurationError(f"non-numeric cell {col!r} differs")
                continue
            if np.isnan(xa) and np.isnan(xb):
                continue
            worst = max(worst, abs(xa - xb))
    return worst


# --- sweeps and tuning -----------------------------------------------------

def _sweep_job(args):
    cfg_dict, axis_key, value, methods, cache_dir, out_dir, dictionary = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg = cfg.replace({axis_key: value})
    try:
        setup = None
        if dictionary is not None:
            d = dictionary if dictionary.m == int(cfg["m"]) else dictionary.truncate(
                int(cfg["m"]), cfg.schedule().schedule_id)
            setup = prepare(cfg, dictionary=d)
        rows, _ = run_experiment(cfg, methods, cache_dir, out_dir, setup=setup)
        return [dict(r, value=value) for r in rows], None
    except MRFError as exc:
        return [dict(value=value, method=m, error=str(exc)) for m in methods], str(exc)


def run_sweep(base, axis, values, methods=METHODS, out_dir=None, cache_dir=None, jobs=1):
    """Paired LRS/ADMM runs for each value of ``axis``.

    Failed points produce rows with NaN metrics; the returned flag is True
    when any point failed.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"axis must be one of {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    key = SWEEP_AXES[axis]
    dictionary = None
    build_m = None
    if key == "m":
        build_m = max(int(v) for v in values)
        values = [int(v) for v in values]
    else:
        values = [float(v) for v in values]
    if jobs <= 1:
        # one simulation serves every point (truncated for shorter M)
        dictionary = dictionary_for(base.replace({"m": build_m} if build_m else {}), cache_dir)
    elif build_m:
        base = base.replace({"dictionary": {"build_m": build_m}})
    tasks = []
    for v in values:
        sub = os.path.join(out_dir, f"{axis}_{v}") if out_dir else None
        tasks.append((base.to_dict(), key, v, tuple(methods), cache_dir, sub, dictionary))
    if jobs <= 1:
        results = [_sweep_job(t) for t in tasks]
    else:
        if cache_dir:
            dictionary_for(base, cache_dir)  # warm the cache once
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    rows, failed = [], False
    for r, err in results:
        rows.extend(r)
        failed |= err is not None
    for row in rows:
        for col in SWEEP_COLUMNS[2:]:
            row.setdefault(col, float("nan"))
    if out_dir:
        write_rows_csv(os.path.join(out_dir, "sweep.csv"), rows, SWEEP_COLUMNS)
        plot_sweep(os.path.join(out_dir, "sweep.png"), rows, axis)
    return rows, failed


def plot_sweep(path, rows, axis):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = SWEEP_COLUMNS[2:6]
    fig, axes = plt.subplots(1, len(cols), figsize=(4 * len(cols), 3.2))
    for ax, col in zip(axes, cols):
        for method in METHODS:
            pts = sorted((float(r["value"]), float(r[col])) for r in rows if r["method"] == method)
            if pts:
                ax.plot(*zip(*pts), marker="o", label=method)
        ax.set_xlabel("M" if axis == "acquisition_length" else "SNR (dB)")
        ax.set_title(col)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def improvement_ratios(rows, metric="nrmse_timeseries"):
    """value -> proposed / LRS ratio of ``metric`` (smaller is better)."""
    by = {}
    for r in rows:
        by.setdefault(float(r["value"]), {})[r["method"]] = float(r[metric])
    return {v: d["dgp"] / d["lrs"] for v, d in sorted(by.items()) if "dgp" in d and "lrs" in d}


def run_tune(base, mu1_values, mu2_values, cache_dir=None, out_dir=None, setup=None):
    """Grid search of (mu1, mu2) by time-series NRMSE; returns ranked rows."""
    mu1_values, mu2_values = list(mu1_values), list(mu2_values)
    if not mu1_values or not mu2_values:
        raise ConfigurationError("tuning grid must be non-empty")
    if setup is None:
        setup = prepare(base, cache_dir=cache_dir)
    init, _ = reconstruct(setup, "lrs")
    rows = []
    for mu1 in mu1_values:
        for mu2 in mu2_values:
            cfg = base.replace({"admm": {"mu1": float(mu1), "mu2": float(mu2)}})
            setup.cfg = cfg
            try:
                coeffs, info = reconstruct(setup, "dgp", init=init)
                scores, _ = evaluate(setup, coeffs)
                rows.append(dict(mu1=mu1, mu2=mu2, **scores, wall_secs=info["wall_secs"]))
            except MRFError as exc:
                rows.append(dict(mu1=mu1, mu2=mu2, nrmse_timeseries=float("inf"), error=str(exc)))
    setup.cfg = base
    rows.sort(key=lambda r: (r["nrmse_timeseries"], r["mu1"], r["mu2"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    if out_dir:
        write_rows_csv(os.path.join(out_dir, "tune.csv"), rows,
                       ("rank", "mu1", "mu2", "nrmse_timeseries", "nrmse_T1", "nrmse_T2",
                        "nrmse_PD", "wall_secs"))
    return rows
