"""Command line interface: ``mrf <command> [options]``.

Stage commands read and write tensor-container files in ``--out``; ``run``,
``sweep`` and ``tune`` drive the whole pipeline in one process. Every output
embeds the experiment config and its hash, and consumers refuse inputs whose
recorded lineage does not match.

Exit codes: 0 success, 1 validation/configuration error, 2 numerical
failure, 3 partial sweep failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import (admm_recon, container, encoding, experiment, generative_net, lrs_recon, matching,
               phantom, spin_sim, subspace)
from .errors import LineageError, MRFError, ValidationError
from .experiment import ExperimentConfig

EXIT_PARTIAL = 3


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(experiment.PRESETS), help="start from a preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. admm.mu1=0.05 (repeatable)")
    p.add_argument("--out", help="output directory (default: config 'out')")
    p.add_argument("--seed", type=int, help="base seed: phantom=s, noise=s+1, net=s+2, latent=s+3")
    p.add_argument("--threads", type=int, help="limit BLAS/FFT worker threads")
    p.add_argument("--cache", default=None, help="dictionary cache directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="mrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dict", help="simulate the dictionary")
    _common(p)

    p = sub.add_parser("subspace", help="estimate the temporal subspace")
    _common(p)
    p.add_argument("--dictionary", help="dictionary file (default OUT/dictionary.mrft)")

    p = sub.add_parser("phantom", help="generate ground-truth parameter maps")
    _common(p)

    p = sub.add_parser("acquire", help="simulate noisy spiral k-space")
    _common(p)
    p.add_argument("--phantom", help="phantom file (default OUT/phantom.mrft)")

    p = sub.add_parser("recon", help="reconstruct spatial coefficients")
    _common(p)
    p.add_argument("--method", choices=experiment.METHODS)
    p.add_argument("--kspace")
    p.add_argument("--trajectory")
    p.add_argument("--coils")
    p.add_argument("--subspace")
    p.add_argument("--init", help="initial coefficients for the ADMM method (default: LRS)")
    p.add_argument("--truth", help="ground-truth series, only for the NRMSE trace")
    p.add_argument("--phantom", help="phantom file supplying the evaluation mask")

    p = sub.add_parser("match", help="dictionary matching of reconstructed coefficients")
    _common(p)
    p.add_argument("--coeffs", required=True)
    p.add_argument("--subspace")
    p.add_argument("--dictionary")
    p.add_argument("--no-png", action="store_true")

    p = sub.add_parser("eval", help="masked NRMSE of matched maps against the phantom")
    _common(p)
    p.add_argument("--truth", help="phantom file (default OUT/phantom.mrft)")
    p.add_argument("--estimate", required=True, help="maps file from 'match' or a phantom file")

    p = sub.add_parser("run", help="full paired pipeline on one data set")
    _common(p)
    p.add_argument("--methods", default="lrs,dgp")

    p = sub.add_parser("sweep", help="paired runs along acquisition length or SNR")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(experiment.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--methods", default="lrs,dgp")
    p.add_argument("--jobs", type=int, default=max(1, (os.cpu_count() or 2) // 2))

    p = sub.add_parser("tune", help="log-grid search of the ADMM penalties")
    _common(p)
    p.add_argument("--mu1", default="1e-3,1e-2,1e-1", help="comma separated values")
    p.add_argument("--mu2", default="1e-3,1e-2,1e-1", help="comma separated values")
    return parser


def load_config(args):
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, args.preset)
    else:
        cfg = ExperimentConfig.from_dict(preset=args.preset)
    over = list(args.set)
    if args.seed is not None:
        s = args.seed
        over += [f"seeds.phantom={s}", f"seeds.noise={s + 1}", f"seeds.net_init={s + 2}",
                 f"seeds.latent={s + 3}"]
    if args.out:
        over.append(f"out={json.dumps(args.out)}")
    if getattr(args, "method", None):
        over.append(f"method={json.dumps(args.method)}")
    return cfg.with_overrides(over) if over else cfg


def _path(args, cfg, given, default_name):
    return given or os.path.join(cfg["out"], default_name)


def _check(expected, actual, what):
    if expected and actual and expected != actual:
        raise LineageError(f"{what}: recorded hash {expected} does not match {actual}")


def _save_series(path, c, grid, meta):
    container.save(path, {"c": c, "grid": np.array(grid)}, meta)


def _load_series(path):
    arrays, meta = container.load(path)
    if "c" not in arrays:
        raise ValidationError(f"{path}: missing array 'c'")
    return phantom.CasoratiImage(arrays["c"], tuple(int(g) for g in arrays["grid"])), meta


# --- commands ------------------------------------------------------------------

def cmd_dict(args, cfg):
    d = experiment.dictionary_for(cfg, args.cache)
    out = cfg["out"]
    spin_sim.save_dictionary(os.path.join(out, "dictionary.mrft"), d, experiment.lineage_meta(cfg))
    spin_sim.save_schedule(os.path.join(out, "schedule.txt"), cfg.schedule())
    print(f"dictionary: {d.k} atoms x {d.m} TRs, hash {d.content_hash()}")


def cmd_subspace(args, cfg):
    path = _path(args, cfg, args.dictionary, "dictionary.mrft")
    d, meta = spin_sim.load_dictionary(path)
    if d.m != int(cfg["m"]):
        raise ValidationError(f"{path}: dictionary has {d.m} TRs, config m = {cfg['m']}")
    v = subspace.estimate_temporal_subspace(d, int(cfg["rank"]))
    subspace.save_subspace(os.path.join(cfg["out"], "subspace.mrft"), v,
                           experiment.lineage_meta(cfg, {"dictionary": d.content_hash()}))
    resid = subspace.projection_residual(d.atoms, v)
    print(f"subspace: rank {v.rank}, dictionary projection residual {resid:.4g}")


def cmd_phantom(args, cfg):
    maps = phantom.make_phantom(tuple(cfg["grid"]), int(cfg["seeds"]["phantom"]))
    path = os.path.join(cfg["out"], "phantom.mrft")
    phantom.save_parameter_maps(path, maps, dict(experiment.lineage_meta(cfg),
                                                 phantom_hash=experiment.maps_hash(maps)))
    matching.write_previews(os.path.join(cfg["out"], "phantom"), maps)
    print(f"phantom: {maps.grid}, {int(maps.mask.sum())} evaluated voxels")


def cmd_acquire(args, cfg):
    maps = phantom.load_parameter_maps(_path(args, cfg, args.phantom, "phantom.mrft"))
    grid = tuple(cfg["grid"])
    if maps.grid != grid:
        raise ValidationError(f"phantom grid {maps.grid} != config grid {grid}")
    traj = experiment.make_trajectory(cfg)
    op = encoding.EncodingOperator(grid, traj, cfg["trajectory"]["mode"])
    sens = encoding.make_coil_sensitivities(grid, int(cfg["n_coils"]))
    truth, data = experiment.acquire(cfg, maps, cfg.schedule(), op, sens)
    out = cfg["out"]
    meta = dict(experiment.lineage_meta(cfg), phantom_hash=experiment.maps_hash(maps))
    encoding.save_trajectory(os.path.join(out, "trajectory.mrft"), traj, meta)
    encoding.save_kspace(os.path.join(out, "kspace.mrft"), data, meta)
    container.save(os.path.join(out, "coils.mrft"), {"maps": sens.maps}, meta)
    _save_series(os.path.join(out, "truth_series.mrft"), truth.c, grid, meta)
    print(f"k-space: {data.per_coil.shape[0]} coil(s) x {data.per_coil.shape[1]} samples")


def cmd_recon(args, cfg):
    out = cfg["out"]
    traj, _ = encoding.load_trajectory(_path(args, cfg, args.trajectory, "trajectory.mrft"))
    data, kmeta = encoding.load_kspace(_path(args, cfg, args.kspace, "kspace.mrft"))
    _check(data.trajectory_hash, traj.content_hash(), "k-space trajectory")
    arrays, _ = container.load(_path(args, cfg, args.coils, "coils.mrft"))
    sens = encoding.CoilSensitivities(arrays["maps"])
    v, vmeta = subspace.load_subspace(_path(args, cfg, args.subspace, "subspace.mrft"))
    grid = sens.grid
    op = encoding.EncodingOperator(grid, traj, cfg["trajectory"]["mode"])
    method = cfg["method"]
    inputs = {"kspace": container.array_hash(data.per_coil), "subspace": v.content_hash()}
    meta = dict(experiment.lineage_meta(cfg, inputs), method=method,
                phantom_hash=kmeta.get("phantom_hash"))
    if method == "lrs":
        coeffs = lrs_recon.lrs_reconstruct(data, op, v, sens, cfg.lsq_config())
        lrs_recon.save_coefficients(os.path.join(out, "coeffs_lrs.mrft"), coeffs, meta)
        print(f"lrs: {coeffs.info['iterations']} CG iterations, "
              f"relative residual {coeffs.info['final_relative_residual']:.4g}")
        return
    init = None
    if args.init:
        init, imeta = lrs_recon.load_coefficients(args.init)
        _check(imeta.get("inputs", {}).get("kspace"), inputs["kspace"], "init coefficients")
    truth = mask = None
    if args.truth:
        truth, _ = _load_series(args.truth)
        ph = phantom.load_parameter_maps(_path(args, cfg, args.phantom, "phantom.mrft"))
        mask = ph.mask
    arch = cfg.net_arch()
    z = generative_net.make_latent(arch, int(cfg["seeds"]["latent"]))

    def log(row):
        print(f"iter {row['iter']:3d}  rel_change {row['rel_change']:.3e}  "
              f"nrmse {row['nrmse_opt']:.4f}  aug_lagrangian {row['aug_lagrangian']:.5g}",
              flush=True)

    res = admm_recon.reconstruct(data, op, v, sens, arch, z, cfg.admm_config(), init=init,
                                 net_seed=int(cfg["seeds"]["net_init"]), lsq=cfg.lsq_config(),
                                 truth=truth, mask=mask, log=log)
    lrs_recon.save_coefficients(os.path.join(out, "coeffs_dgp.mrft"), res.u_hat,
                                dict(meta, iterations=res.iterations, converged=res.converged))
    generative_net.save_network(os.path.join(out, "network.mrft"), arch, res.params, z,
                                res.state.adam_state, meta)
    admm_recon.write_metrics_csv(os.path.join(out, "metrics_dgp.csv"), res.metrics)
    print(f"dgp: {res.iterations} outer iterations, converged={res.converged}")


def cmd_match(args, cfg):
    coeffs, cmeta = lrs_recon.load_coefficients(args.coeffs)
    v, vmeta = subspace.load_subspace(_path(args, cfg, args.subspace, "subspace.mrft"))
    d, _ = spin_sim.load_dictionary(_path(args, cfg, args.dictionary, "dictionary.mrft"))
    _check(cmeta.get("inputs", {}).get("subspace"), v.content_hash(), "coefficients subspace")
    _check(vmeta.get("dictionary_hash"), d.content_hash(), "subspace dictionary")
    ts = phantom.CasoratiImage(coeffs.u @ v.v_hat, coeffs.grid)
    method = cmeta.get("method", "est")
    res = matching.dictionary_match(ts, d)
    meta = dict(experiment.lineage_meta(cfg, {"coeffs": container.array_hash(coeffs.u)}),
                method=method, phantom_hash=cmeta.get("phantom_hash"))
    matching.save_match(os.path.join(cfg["out"], f"maps_{method}.mrft"), res, meta)
    if not args.no_png:
        matching.write_previews(os.path.join(cfg["out"], f"maps_{method}"), res.maps)
    print(f"matched {res.maps.n} voxels, mean score {float(np.mean(res.match_scores)):.4f}")


def cmd_eval(args, cfg):
    truth_path = _path(args, cfg, args.truth, "phantom.mrft")
    truth = phantom.load_parameter_maps(truth_path)
    est_arrays, est_meta = container.load(args.estimate)
    est = matching.ParameterMaps(est_arrays["t1_ms"], est_arrays["t2_ms"],
                                 est_arrays["pd_real"] + 1j * est_arrays["pd_imag"],
                                 est_arrays["mask"].astype(bool))
    _check(est_meta.get("phantom_hash"), experiment.maps_hash(truth), "estimate lineage")
    err = matching.map_nrmse(truth, est, truth.mask)
    result = {"nrmse_T1": err["t1"], "nrmse_T2": err["t2"], "nrmse_PD": err["pd"],
              "estimate": os.path.abspath(args.estimate), "method": est_meta.get("method")}
    os.makedirs(cfg["out"], exist_ok=True)
    name = f"eval_{est_meta.get('method') or 'estimate'}.json"
    with open(os.path.join(cfg["out"], name), "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps(result))


def cmd_run(args, cfg):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]

    def log(row):
        print(f"iter {row['iter']:3d}  rel_change {row['rel_change']:.3e}  "
              f"nrmse {row['nrmse_opt']:.4f}", flush=True)

    rows, _ = experiment.run_experiment(cfg, methods, args.cache, cfg["out"], log=log)
    with open(os.path.join(cfg["out"], "config.json"), "w") as fh:
        json.dump(dict(cfg.to_dict(), config_hash=cfg.hash()), fh, indent=2)
    for r in rows:
        print(f"{r['method']}: " + ", ".join(f"{k}={r[k]:.4f}" for k in experiment.SWEEP_COLUMNS[2:]))


def cmd_sweep(args, cfg):
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows, failed = experiment.run_sweep(cfg, args.axis, values, methods, cfg["out"], args.cache,
                                        args.jobs)
    for r in rows:
        print(r["value"], r["method"], f"{float(r['nrmse_timeseries']):.4f}")
    if failed:
        print("some sweep points failed; see sweep.csv", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def cmd_tune(args, cfg):
    mu1 = [float(x) for x in args.mu1.split(",") if x.strip()]
    mu2 = [float(x) for x in args.mu2.split(",") if x.strip()]
    rows = experiment.run_tune(cfg, mu1, mu2, args.cache, cfg["out"])
    print("rank  mu1        mu2        nrmse_timeseries")
    for r in rows:
        print(f"{r['rank']:4d}  {r['mu1']:<9.3g}  {r['mu2']:<9.3g}  {r['nrmse_timeseries']:.4f}")


COMMANDS = {"dict": cmd_dict, "subspace": cmd_subspace, "phantom": cmd_phantom,
            "acquire": cmd_acquire, "recon": cmd_recon, "match": cmd_match, "eval": cmd_eval,
            "run": cmd_run, "sweep": cmd_sweep, "tune": cmd_tune}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        os.makedirs(cfg["out"], exist_ok=True)
        if args.cache is None:
            args.cache = experiment.default_cache_dir()
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                code = COMMANDS[args.command](args, cfg)
        else:
            code = COMMANDS[args.command](args, cfg)
    except MRFError as exc:
        print(f"mrf {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"mrf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
