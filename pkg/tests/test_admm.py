import numpy as np
import pytest

from mrfrecon import admm_recon, encoding, generative_net as gn
from mrfrecon.admm_recon import AdmmConfig, AdmmState
from mrfrecon.encoding import EncodingOperator
from mrfrecon.errors import ConfigurationError, NumericalFailure, ValidationError
from mrfrecon.lrs_recon import LsqConfig, lrs_reconstruct

from conftest import random_complex
from test_encoding import dense_from_operator, orthonormal_rows

GRID, M, RANK = (8, 8), 4, 2
N = GRID[0] * GRID[1]
ARCH = gn.GeneratorArchitecture(16, 16, 2, base_channels=4, channels=(8, 8))


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(20)
    traj = encoding.make_spiral_trajectory(GRID, n_interleaves=4, n_tr=M)
    op = EncodingOperator(GRID, traj, "gridded-nonuniform")
    sens = encoding.make_coil_sensitivities(GRID, 2)
    v = orthonormal_rows(rng, RANK, M)
    data = encoding.KSpaceData(random_complex(rng, 2, traj.layout[-1]), traj.layout)
    return op, sens, v, data, rng


def _random_state(rng, n_coils=2):
    return AdmmState(h=random_complex(rng, n_coils, N, M), u=random_complex(rng, N, RANK),
                     params=None, lam=random_complex(rng, n_coils, N, M),
                     gamma=random_complex(rng, N, RANK))


def test_h_step_matches_dense_solve(tiny):
    op, sens, v, data, rng = tiny
    mu1 = 0.7
    op.build_gram_cache(mu1)
    state = _random_state(rng)
    h = admm_recon.solve_h_subproblem(state, data, op, sens, v, mu1)
    uv = state.u @ v
    for c in range(2):
        q = sens.flat()[c][:, None] * uv - state.lam[c] / mu1
        for t in range(M):
            f = dense_from_operator(op, op.trajectory.assignment[t])
            d = data.per_coil[c][op.trajectory.layout[t]:op.trajectory.layout[t + 1]]
            lhs = f.conj().T @ f + 0.5 * mu1 * np.eye(N)
            rhs = f.conj().T @ d + 0.5 * mu1 * q[:, t]
            ref = np.linalg.solve(lhs, rhs)
            assert np.max(np.abs(h[c][:, t] - ref)) < 1e-8 * np.max(np.abs(ref))
            # normal-equation residual of the returned column
            assert np.linalg.norm(lhs @ h[c][:, t] - rhs) < 1e-8 * np.linalg.norm(rhs)


def test_h_step_limits(tiny):
    op, sens, v, data, rng = tiny
    state = _random_state(rng)
    big = 1e8
    op.build_gram_cache(big)
    h = admm_recon.solve_h_subproblem(state, data, op, sens, v, big)
    q = sens.flat()[:, :, None] * (state.u @ v)[None] - state.lam / big
    assert np.linalg.norm(h - q) < 1e-4 * np.linalg.norm(q)
    op.build_gram_cache(1.0)
    zero = AdmmState(np.zeros((2, N, M), complex), np.zeros((N, RANK), complex), None,
                     np.zeros((2, N, M), complex), np.zeros((N, RANK), complex))
    d0 = encoding.KSpaceData(np.zeros_like(data.per_coil), data.layout)
    assert np.all(admm_recon.solve_h_subproblem(zero, d0, op, sens, v, 1.0) == 0)


@pytest.mark.parametrize("u_step", admm_recon.U_STEPS)
def test_u_step_matches_dense_normal_equations(tiny, u_step):
    _, sens, v, _, rng = tiny
    mu1, mu2 = 0.8, 0.3
    state = _random_state(rng)
    g = random_complex(rng, N, RANK)
    u = admm_recon.solve_u_subproblem(state, sens, v, mu1, mu2, g, u_step)
    # stack sqrt(mu1/2) (S_c U V - (H_c + Lam_c/mu1)) and sqrt(mu2/2) (U - target_g)
    rows, rhs = [], []
    for c in range(2):
        rows.append(np.sqrt(mu1 / 2) * np.kron(np.diag(sens.flat()[c]), v.T))
        rhs.append(np.sqrt(mu1 / 2) * (state.h[c] + state.lam[c] / mu1).ravel())
    target_g = g - state.gamma / mu2 if u_step == "lagrangian" else g
    rows.append(np.sqrt(mu2 / 2) * np.eye(N * RANK))
    rhs.append(np.sqrt(mu2 / 2) * target_g.ravel())
    ref = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    assert np.max(np.abs(u.ravel() - ref)) < 1e-10 * np.max(np.abs(ref))


def test_u_step_trivial_cases(tiny):
    _, sens, v, _, rng = tiny
    zero = AdmmState(np.zeros((2, N, M), complex), None, None, np.zeros((2, N, M), complex),
                     np.zeros((N, RANK), complex))
    zero.u = np.zeros((N, RANK), complex)
    assert np.all(admm_recon.solve_u_subproblem(zero, sens, v, 1.0, 1.0, zero.u) == 0)
    # single unit coil, mu2/mu1 -> 0: projection onto the subspace
    one = encoding.make_coil_sensitivities(GRID, 1)
    state = _random_state(rng, 1)
    state.gamma[...] = 0
    u = admm_recon.solve_u_subproblem(state, one, v, 1.0, 1e-12, np.zeros((N, RANK)))
    ref = (state.h[0] + state.lam[0]) @ v.conj().T
    assert np.max(np.abs(u - ref)) < 1e-9


def test_theta_step_stationary_and_monotone():
    params = gn.init_params(ARCH, 0)
    z = gn.make_latent(ARCH, 0)
    own = gn.net_forward(ARCH, params, z).u
    state = AdmmState(None, own.copy(), params, None, np.zeros_like(own))
    fit = admm_recon.solve_theta_subproblem(state, 1.0, ARCH, z, gn.AdamConfig(iterations=5))
    assert np.array_equal(fit.params.flat(), params.flat())
    rng = np.random.default_rng(21)
    state.u = own + 0.3 * random_complex(rng, *own.shape)
    state.gamma = random_complex(rng, *own.shape)
    mu2 = 2.0
    target = state.u + state.gamma / mu2
    before = gn.fit_loss(ARCH, params, z, target)
    fit = admm_recon.solve_theta_subproblem(state, mu2, ARCH, z, gn.AdamConfig(iterations=20))
    assert gn.fit_loss(ARCH, fit.params, z, target) <= before
    assert fit.trace[0] == pytest.approx(before, rel=1e-12)


def test_multiplier_updates(tiny):
    _, sens, v, _, rng = tiny
    state = _random_state(rng)
    state.lam[...] = 0
    state.gamma[...] = 0
    g = random_complex(rng, N, RANK)
    lam, gamma = admm_recon.update_multipliers(state, sens, v, 0.5, 2.0, g)
    resid = state.h - sens.flat()[:, :, None] * (state.u @ v)[None]
    assert np.array_equal(lam, 0.5 * resid)
    assert np.array_equal(gamma, 2.0 * (state.u - g))
    state.lam, state.gamma = lam, gamma
    state.h = sens.flat()[:, :, None] * (state.u @ v)[None]
    lam2, gamma2 = admm_recon.update_multipliers(state, sens, v, 0.5, 2.0, state.u)
    assert np.array_equal(lam2, lam) and np.array_equal(gamma2, gamma)


def _problem16(noiseless=False, m=6, seed=30):
    grid = (16, 16)
    rng = np.random.default_rng(seed)
    v = orthonormal_rows(rng, RANK, m)
    if noiseless:
        traj = encoding.make_cartesian_trajectory(grid, m)
        op = EncodingOperator(grid, traj, "cartesian-exact")
    else:
        traj = encoding.make_spiral_trajectory(grid, n_interleaves=4, n_tr=m)
        op = EncodingOperator(grid, traj)
    sens = encoding.make_coil_sensitivities(grid, 1)
    yy, xx = np.mgrid[-1:1:16j, -1:1:16j]
    u_true = np.stack([np.exp(-(xx ** 2 + yy ** 2) / 0.3).ravel(),
                       (np.hypot(xx, yy) < 0.5).ravel() * 0.5j], axis=1)
    data = op.apply_full_model(u_true, v, sens)
    return op, sens, v, data, u_true


def test_zero_iterations_returns_init():
    op, sens, v, data, u_true = _problem16()
    z = gn.make_latent(ARCH, 0)
    init = u_true * 0.9
    res = admm_recon.reconstruct(data, op, v, sens, ARCH, z, AdmmConfig(max_outer_iters=0), init=init)
    assert np.array_equal(res.u_hat.u, init)
    assert res.iterations == 0 and all(len(x) == 0 for x in res.metrics.values())


def test_without_prior_fixed_point_is_lrs():
    # random k-space samples keep the tiny least-squares problem well conditioned
    grid, m = (8, 8), 6
    rng = np.random.default_rng(31)
    traj = encoding.Trajectory([rng.uniform(-0.5, 0.5, (40, 2)) for _ in range(m)], np.arange(m), m)
    op = EncodingOperator(grid, traj)
    sens = encoding.make_coil_sensitivities(grid, 1)
    v = orthonormal_rows(rng, RANK, m)
    data = encoding.KSpaceData(random_complex(rng, 1, traj.layout[-1]), traj.layout)
    lrs = lrs_reconstruct(data, op, v, sens, LsqConfig(max_cg_iters=500, cg_tolerance=1e-12))
    assert lrs.info["converged"]
    arch = gn.GeneratorArchitecture(8, 8, RANK, base_channels=4, channels=(4,))
    cfg = AdmmConfig(mu1=0.3, mu2=0.0, max_outer_iters=3000, tolerance=1e-10, record_metrics=False)
    res = admm_recon.reconstruct(data, op, v, sens, arch, gn.make_latent(arch, 0), cfg,
                                 init=np.zeros((64, RANK)))
    assert res.converged
    err = np.linalg.norm(res.u_hat.u - lrs.u) / np.linalg.norm(lrs.u)
    assert err < 1e-4


def test_noiseless_full_sampling_keeps_consistency():
    op, sens, v, data, u_true = _problem16(noiseless=True)
    z = gn.make_latent(ARCH, 1)
    # with a decaying theta-step learning rate the loop actually converges
    cfg = AdmmConfig(mu1=1.0, mu2=1.0, max_outer_iters=60, adam=gn.AdamConfig(iterations=50),
                     lr_decay=0.7)
    res = admm_recon.reconstruct(data, op, v, sens, ARCH, z, cfg, init=u_true, truth=u_true @ v)
    assert res.converged
    st = res.state
    suv = sens.flat()[:, :, None] * (st.u @ v)[None]
    assert np.linalg.norm(st.h - suv) / np.linalg.norm(suv) < 1e-3
    lam = np.array(res.metrics["lambda_norm"])
    assert np.all(np.isfinite(lam)) and lam[-1] < 10 * max(lam[0], 1e-12) + 1.0


def test_lr_decay_schedule(monkeypatch):
    op, sens, v, data, u_true = _problem16()
    seen = []
    real = admm_recon.solve_theta_subproblem

    def spy(state, mu2, arch, z, adam, persist=False):
        seen.append(adam.learning_rate)
        return real(state, mu2, arch, z, adam, persist)

    monkeypatch.setattr(admm_recon, "solve_theta_subproblem", spy)
    cfg = AdmmConfig(max_outer_iters=4, adam=gn.AdamConfig(learning_rate=0.02, iterations=2),
                     lr_decay=0.5)
    admm_recon.reconstruct(data, op, v, sens, ARCH, gn.make_latent(ARCH, 0), cfg)
    np.testing.assert_allclose(seen, [0.02, 0.01, 0.005, 0.0025])


def test_metrics_and_csv(tmp_path):
    op, sens, v, data, u_true = _problem16()
    z = gn.make_latent(ARCH, 0)
    cfg = AdmmConfig(max_outer_iters=3, adam=gn.AdamConfig(iterations=5))
    res = admm_recon.reconstruct(data, op, v, sens, ARCH, z, cfg, truth=u_true @ v)
    assert res.iterations == 3
    for key in admm_recon.METRIC_COLUMNS:
        assert len(res.metrics[key]) == 3
    assert res.init_nrmse is not None
    np.testing.assert_array_equal(res.timeseries(v), res.u_hat.u @ v)
    admm_recon.write_metrics_csv(tmp_path / "m.csv", res.metrics)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(admm_recon.METRIC_COLUMNS) and len(lines) == 4


@pytest.mark.parametrize("persist", [False, True])
def test_checkpoint_resume_matches_uninterrupted(tmp_path, persist):
    op, sens, v, data, u_true = _problem16()
    z = gn.make_latent(ARCH, 0)
    adam = gn.AdamConfig(iterations=4)
    full = admm_recon.reconstruct(data, op, v, sens, ARCH, z,
                                  AdmmConfig(max_outer_iters=4, adam=adam, persist_adam=persist))
    ck = tmp_path / "ck.mrft"
    admm_recon.reconstruct(data, op, v, sens, ARCH, z,
                           AdmmConfig(max_outer_iters=2, adam=adam, persist_adam=persist,
                                      checkpoint_every=2, checkpoint_path=str(ck)))
    state, meta = admm_recon.load_checkpoint(ck, ARCH)
    assert state.iteration == 2 and meta["iteration"] == 2
    resumed = admm_recon.reconstruct(data, op, v, sens, ARCH, z,
                                     AdmmConfig(max_outer_iters=4, adam=adam, persist_adam=persist),
                                     resume=state)
    assert resumed.iterations == 2
    assert np.max(np.abs(resumed.u_hat.u - full.u_hat.u)) < 1e-12


def test_non_finite_input_and_state(monkeypatch):
    op, sens, v, data, u_true = _problem16()
    z = gn.make_latent(ARCH, 0)
    bad = encoding.KSpaceData(data.per_coil.copy(), data.layout)
    bad.per_coil[0, 5] = np.nan
    with pytest.raises(ValidationError):
        admm_recon.reconstruct(bad, op, v, sens, ARCH, z, AdmmConfig(max_outer_iters=2), init=u_true)
    real = admm_recon.solve_u_subproblem
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        u = real(*args, **kw)
        return u * np.nan if calls["n"] == 2 else u

    monkeypatch.setattr(admm_recon, "solve_u_subproblem", flaky)
    with pytest.raises(NumericalFailure) as info:
        admm_recon.reconstruct(data, op, v, sens, ARCH, z, AdmmConfig(max_outer_iters=3, mu2=0.0),
                               init=np.zeros_like(u_true))
    assert info.value.diagnostics["outer_iteration"] == 1
    assert info.value.diagnostics["variable"] == "u"


def test_config_validation():
    for bad in ({"mu1": 0.0}, {"mu2": -1.0}, {"tolerance": 0.0}, {"max_outer_iters": -1},
                {"u_step": "other"}, {"checkpoint_every": 2}, {"lr_decay": 0.0},
                {"lr_decay": 1.5}):
        with pytest.raises(ConfigurationError):
            AdmmConfig(**bad)
    sens = encoding.make_coil_sensitivities((8, 8), 2)
    cfg = AdmmConfig().resolved(sens)
    assert cfg.mu1 == pytest.approx(1e-2 * np.mean(sens.sum_of_squares())) and cfg.mu2 == cfg.mu1
