"""Untrained convolutional generator G_theta(z) producing the spatial factor U.

The generator maps a fixed random latent feature map through a stack of
``[nearest-neighbour 2x upsample -> 3x3 conv -> batch norm -> ReLU]`` stages
and a final 1x1 conv to 2L channels; channels (2k, 2k+1) are the real and
imaginary parts of column k of U. Everything runs in float64 numpy with
hand-written backpropagation so gradients can be checked by finite
differences.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .errors import ConfigurationError, NumericalFailure, ValidationError
from .subspace import SpatialCoefficients

BN_EPS = 1e-5


@dataclass(frozen=True)
class GeneratorArchitecture:
    """Shape of the generator.

    ``rows`` and ``cols`` must both be divisible by ``2 ** len(channels)``;
    the latent reshapes to ``(base_channels, rows >> n, cols >> n)``.
    """

    rows: int
    cols: int
    rank: int
    base_channels: int = 64
    channels: tuple = (64, 64, 32, 32)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        n = len(self.channels)
        if n < 1:
            raise ConfigurationError("generator needs at least one upsampling stage")
        if self.rows % (1 << n) or self.cols % (1 << n):
            raise ConfigurationError(
                f"grid {self.rows}x{self.cols} is not divisible by 2^{n} = {1 << n}")
        if self.rank < 1 or self.base_channels < 1 or min(self.channels) < 1:
            raise ConfigurationError("rank and channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be a positive odd number")

    @classmethod
    def for_grid(cls, grid, rank, **kw):
        return cls(int(grid[0]), int(grid[1]), int(rank), **kw)

    @property
    def n_stages(self):
        return len(self.channels)

    @property
    def base_grid(self):
        n = self.n_stages
        return self.rows >> n, self.cols >> n, self.base_channels

    @property
    def latent_dim(self):
        r0, c0, ch0 = self.base_grid
        return r0 * c0 * ch0

    @property
    def out_channels(self):
        return 2 * self.rank

    def param_shapes(self):
        shapes = {}
        c_in = self.base_channels
        k = self.kernel
        for i, c_out in enumerate(self.channels):
            shapes[f"stage{i}.conv_w"] = (c_out, c_in, k, k)
            shapes[f"stage{i}.conv_b"] = (c_out,)
            shapes[f"stage{i}.bn_gamma"] = (c_out,)
            shapes[f"stage{i}.bn_beta"] = (c_out,)
            c_in = c_out
        shapes["out.w"] = (self.out_channels, c_in)
        shapes["out.b"] = (self.out_channels,)
        return shapes

    def to_dict(self):
        return {"rows": self.rows, "cols": self.cols, "rank": self.rank,
                "base_channels": self.base_channels, "channels": list(self.channels),
                "kernel": self.kernel}


@dataclass(eq=False)
class NetworkParams:
    """Named parameter arrays in the fixed order of ``arch.param_shapes()``."""

    arrays: dict
    init_seed: int = None

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    @classmethod
    def from_flat(cls, arch, vec, init_seed=None, copy=True):
        vec = np.array(vec, dtype=float, copy=copy)
        shapes = arch.param_shapes()
        total = sum(int(np.prod(s)) for s in shapes.values())
        if vec.ndim != 1 or vec.size != total:
            raise ConfigurationError(f"parameter vector has {vec.size} entries, expected {total}")
        out = {}
        pos = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            out[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        return cls(out, init_seed)

    def copy(self):
        return NetworkParams({k: v.copy() for k, v in self.arrays.items()}, self.init_seed)

    @property
    def size(self):
        return sum(a.size for a in self.arrays.values())

    def check(self, arch):
        shapes = arch.param_shapes()
        if list(shapes) != list(self.arrays):
            raise ConfigurationError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.arrays[name].shape} != {shape}")
        return self


@dataclass(eq=False)
class LatentVector:
    z: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.z = np.array(self.z, dtype=float).ravel()
        self.z.setflags(write=False)


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 20
    min_delta: float = 1e-4  # relative improvement counted as progress


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.01
    iterations: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop: EarlyStop = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.iterations < 0:
            raise ConfigurationError("learning rate and iterations must be nonnegative")


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass(eq=False)
class FitResult:
    params: NetworkParams
    trace: np.ndarray
    adam_state: AdamState


def init_params(arch, seed):
    """He-scaled Gaussian conv kernels, zero biases, unit BN scale, zero shift."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("conv_w") or name == "out.w":
            fan_in = int(np.prod(shape[1:]))
            out[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith("bn_gamma"):
            out[name] = np.ones(shape)
        else:
            out[name] = np.zeros(shape)
    return NetworkParams(out, seed)


def make_latent(arch, seed):
    """Standard-normal latent of length ``arch.latent_dim``."""
    return LatentVector(np.random.default_rng(seed).standard_normal(arch.latent_dim), seed)


def _im2col(x, k):
    # x: (C, H, W) -> (C*k*k, H*W), zero padded "same" windows
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(cols, c, h, w, k):
    p = k // 2
    g = cols.reshape(c, k, k, h, w)
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w] += g[:, i, j]
    return out[:, p:p + h, p:p + w]


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_adjoint(g):
    c, h, w = g.shape
    return g.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def _forward(arch, params, z, keep=False):
    p = params.arrays
    r0, c0, ch0 = arch.base_grid
    z = z.z if hasattr(z, "z") else np.asarray(z)
    if z.size != arch.latent_dim:
        raise ConfigurationError(f"latent has {z.size} entries, expected {arch.latent_dim}")
    x = z.reshape(ch0, r0, c0)
    caches = []
    for i, c_out in enumerate(arch.channels):
        x = _upsample(x)
        c_in, h, w = x.shape
        cols = _im2col(x, arch.kernel)
        wmat = p[f"stage{i}.conv_w"].reshape(c_out, -1)
        y = wmat @ cols + p[f"stage{i}.conv_b"][:, None]
        mean = y.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(y.var(axis=1, keepdims=True) + BN_EPS)
        xhat = (y - mean) * inv
        a = p[f"stage{i}.bn_gamma"][:, None] * xhat + p[f"stage{i}.bn_beta"][:, None]
        act = np.maximum(a, 0.0)
        if keep:
            caches.append((c_in, h, w, cols, xhat, inv, a > 0))
        x = act.reshape(c_out, h, w)
    feat = x.reshape(x.shape[0], -1)
    out = p["out.w"] @ feat + p["out.b"][:, None]
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite activations in generator output")
    return out, feat, caches


def _to_u(out):
    return (out[0::2] + 1j * out[1::2]).T


def net_forward(arch, params, z):
    """Evaluate ``U = G_theta(z)``; returns :class:`SpatialCoefficients` (N x L)."""
    out, _, _ = _forward(arch, params, z)
    return SpatialCoefficients(_to_u(out), (arch.rows, arch.cols))


def _loss_and_grad(arch, params, z, target):
    out, feat, caches = _forward(arch, params, z, keep=True)
    diff = _to_u(out) - target
    loss = float(np.vdot(diff, diff).real)
    p = params.arrays
    grads = {}
    g_out = np.empty_like(out)
    g_out[0::2] = 2.0 * diff.real.T
    g_out[1::2] = 2.0 * diff.imag.T
    grads["out.w"] = g_out @ feat.T
    grads["out.b"] = g_out.sum(axis=1)
    g = p["out.w"].T @ g_out
    for i in reversed(range(arch.n_stages)):
        c_in, h, w, cols, xhat, inv, mask = caches[i]
        g_a = g.reshape(mask.shape) * mask
        grads[f"stage{i}.bn_gamma"] = (g_a * xhat).sum(axis=1)
        grads[f"stage{i}.bn_beta"] = g_a.sum(axis=1)
        g_xhat = g_a * p[f"stage{i}.bn_gamma"][:, None]
        g_y = inv * (g_xhat - g_xhat.mean(axis=1, keepdims=True)
                     - xhat * (g_xhat * xhat).mean(axis=1, keepdims=True))
        wshape = p[f"stage{i}.conv_w"].shape
        grads[f"stage{i}.conv_w"] = (g_y @ cols.T).reshape(wshape)
        grads[f"stage{i}.conv_b"] = g_y.sum(axis=1)
        if i > 0:
            g_cols = p[f"stage{i}.conv_w"].reshape(wshape[0], -1).T @ g_y
            g = _upsample_adjoint(_col2im(g_cols, c_in, h, w, arch.kernel))
    ordered = {name: grads[name] for name in arch.param_shapes()}
    return loss, ordered


def _check_target(arch, target):
    target = target.u if hasattr(target, "u") else np.asarray(target)
    if target.shape != (arch.rows * arch.cols, arch.rank):
        raise ConfigurationError(f"target shape {target.shape} != {(arch.rows * arch.cols, arch.rank)}")
    if not np.all(np.isfinite(target)):
        raise ValidationError("target contains non-finite values")
    return target


def fit_loss(arch, params, z, target):
    """``||G_theta(z) - T||_F^2``."""
    diff = net_forward(arch, params, z).u - _check_target(arch, target)
    return float(np.vdot(diff, diff).real)


def net_gradient(arch, params, z, target):
    """Gradient of ``||G_theta(z) - T||_F^2`` for every parameter (dict of arrays)."""
    _, grads = _loss_and_grad(arch, params, z, _check_target(arch, target))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name}")
    return grads


def net_fit(arch, params0, z, target, adam=AdamConfig(), state=None):
    """Fit ``G_theta(z)`` to ``target`` with Adam, starting from ``params0``.

    Args:
        state: optional :class:`AdamState` to continue from (moments and step
            count); a fresh state is used when omitted.

    Returns:
        FitResult with final parameters (the best ones if early stopping
        triggered), the loss trace (loss of every visited iterate, length
        steps + 1) and the Adam state.
    """
    target = _check_target(arch, target)
    theta = params0.flat()
    if state is None:
        state = AdamState(np.zeros_like(theta), np.zeros_like(theta), 0)
    else:
        state = AdamState(state.m.copy(), state.v.copy(), state.t)
    b1, b2, lr, eps = adam.beta1, adam.beta2, adam.learning_rate, adam.eps
    trace = []
    best = (np.inf, theta.copy())
    stale = 0
    es = adam.early_stop
    for _ in range(adam.iterations + 1):
        loss, grads = _loss_and_grad(arch, NetworkParams.from_flat(arch, theta, copy=False), z, target)
        trace.append(loss)
        if not np.isfinite(loss):
            raise NumericalFailure("Adam fit diverged (non-finite loss)", {"trace": trace})
        if es is not None:
            if loss < best[0] * (1.0 - es.min_delta):
                best = (loss, theta.copy())
                stale = 0
            else:
                stale += 1
                if stale >= es.patience:
                    theta = best[1]
                    break
        if len(trace) > adam.iterations:
            break
        g = np.concatenate([a.ravel() for a in grads.values()])
        state.t += 1
        state.m *= b1
        state.m += (1 - b1) * g
        state.v *= b2
        state.v += (1 - b2) * g * g
        m_hat = state.m / (1 - b1 ** state.t)
        v_hat = state.v / (1 - b2 ** state.t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    params = NetworkParams.from_flat(arch, theta, params0.init_seed)
    return FitResult(params, np.array(trace), state)


def save_network(path, arch, params, z, adam_state=None, extra_meta=None):
    arrays = dict(params.arrays)
    arrays["latent"] = z.z if hasattr(z, "z") else np.asarray(z)
    if adam_state is not None:
        arrays["adam.m"] = adam_state.m
        arrays["adam.v"] = adam_state.v
    meta = {"kind": "generator", "architecture": arch.to_dict(), "init_seed": params.init_seed,
            "latent_seed": getattr(z, "seed", None),
            "adam_t": None if adam_state is None else adam_state.t}
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def load_network(path):
    """Returns ``(arch, params, latent, adam_state_or_None, meta)``."""
    arrays, meta = container.load(path)
    if meta.get("kind") != "generator":
        raise ValidationError(f"{path}: not a generator file")
    a = meta["architecture"]
    arch = GeneratorArchitecture(a["rows"], a["cols"], a["rank"], a["base_channels"],
                                 tuple(a["channels"]), a["kernel"])
    params = NetworkParams({k: arrays[k] for k in arch.param_shapes()}, meta.get("init_seed"))
    params.check(arch)
    z = LatentVector(arrays["latent"], meta.get("latent_seed"))
    state = None
    if "adam.m" in arrays:
        state = AdamState(arrays["adam.m"], arrays["adam.v"], int(meta.get("adam_t") or 0))
    return arch, params, z, state, meta
