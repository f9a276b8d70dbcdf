"""Undersampled multi-coil Fourier encoding of MRF time series.

Conventions:

* k-space coordinates are in cycles/pixel, columns ``(kx, ky)``, inside the
  disc of radius 0.5. Pixel coordinates run over ``-n//2 .. n - n//2 - 1``
  along each axis (image arrays are indexed ``[row = y, col = x]``).
* The Fourier transform is unitary: ``F x[p] = N**-0.5 * sum_r x[r]
  exp(-2i pi k_p . r)``, so a full Cartesian sampling gives ``F F^H = I``.
* ``"cartesian-exact"`` evaluates that sum exactly (separable in x and y);
  ``"gridded-nonuniform"`` uses a 2x oversampled FFT with Kaiser-Bessel
  interpolation. The gridded adjoint is the exact adjoint of the gridded
  forward operator (same interpolation matrix, transposed).
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse
from scipy.special import i0

from . import container
from .errors import ConfigurationError, NumericalFailure, ValidationError

MODES = ("cartesian-exact", "gridded-nonuniform")


@dataclass(eq=False)
class Trajectory:
    """Sample coordinates per interleaf and the TR -> interleaf assignment."""

    interleaves: list
    assignment: np.ndarray
    full_set_size: int

    def __post_init__(self):
        self.interleaves = [np.asarray(c, dtype=float).reshape(-1, 2) for c in self.interleaves]
        self.assignment = np.asarray(self.assignment, dtype=np.int64).ravel()
        if not self.interleaves:
            raise ConfigurationError("trajectory needs at least one interleaf")
        for c in self.interleaves:
            if np.any(np.abs(c) > 0.5 + 1e-12):
                raise ConfigurationError("k-space coordinates must lie in [-0.5, 0.5]")
        if self.assignment.size < 1:
            raise ConfigurationError("assignment must cover at least one TR")
        if self.assignment.min() < 0 or self.assignment.max() >= len(self.interleaves):
            raise ConfigurationError("assignment refers to a missing interleaf")
        if np.unique(self.assignment).size > max(self.full_set_size, 1):
            raise ConfigurationError("more distinct interleaves than the full set size")

    @property
    def m(self):
        return self.assignment.size

    @property
    def samples_per_tr(self):
        return np.array([self.interleaves[j].shape[0] for j in self.assignment])

    @property
    def layout(self):
        return np.concatenate([[0], np.cumsum(self.samples_per_tr)]).astype(np.int64)

    def for_length(self, m):
        """Same interleaves, assignment cycled over ``m`` TRs."""
        n = len(self.interleaves)
        return Trajectory(self.interleaves, np.arange(m) % n, self.full_set_size)

    def content_hash(self):
        return container.array_hash(np.concatenate(self.interleaves), self.assignment)


def make_spiral_trajectory(grid, n_interleaves=48, samples_per_interleaf=None, n_tr=None,
                           n_turns=1.0, rotation_rule="cyclic"):
    """Uniform-density Archimedean spiral, one interleaf per TR.

    The radius grows linearly from 0 to 0.5 over the interleaf and the angle
    increases by ``2 pi n_turns``. Interleaf j is the first one rotated by
    ``2 pi j / n_interleaves``; a half-step angular offset keeps every end
    point off the +kx axis so coordinates stay inside [-0.5, 0.5).
    """
    if n_interleaves < 1:
        raise ConfigurationError("n_interleaves must be >= 1")
    if rotation_rule != "cyclic":
        raise ConfigurationError(f"unknown rotation rule {rotation_rule!r}")
    size = max(grid)
    p = 2 * size if samples_per_interleaf is None else int(samples_per_interleaf)
    if p < 2:
        raise ConfigurationError("samples_per_interleaf must be >= 2")
    t = np.arange(p) / (p - 1)
    r = 0.5 * t
    theta0 = 2 * np.pi * n_turns * t + np.pi / n_interleaves
    arms = []
    for j in range(n_interleaves):
        th = theta0 + 2 * np.pi * j / n_interleaves
        arms.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
    n_tr = n_interleaves if n_tr is None else n_tr
    return Trajectory(arms, np.arange(n_tr) % n_interleaves, n_interleaves)


def fully_sampled(traj, n_tr=None):
    """Every TR acquires the union of all interleaves."""
    n_tr = traj.m if n_tr is None else n_tr
    return Trajectory([np.concatenate(traj.interleaves)], np.zeros(n_tr, dtype=np.int64), 1)


def make_cartesian_trajectory(grid, n_tr=1):
    """All Cartesian frequencies of ``grid`` acquired at every TR."""
    rows, cols = grid
    ky, kx = np.meshgrid((np.arange(rows) - rows // 2) / rows,
                         (np.arange(cols) - cols // 2) / cols, indexing="ij")
    coords = np.stack([kx.ravel(), ky.ravel()], axis=1)
    return Trajectory([coords], np.zeros(n_tr, dtype=np.int64), 1)


def max_coverage_gap(coords, oversample=4):
    """Largest distance from any point of the k-space disc to its nearest sample.

    Evaluated on a ``1 / (oversample * 64)`` lattice covering |k| <= 0.5.
    """
    from scipy.spatial import cKDTree

    step = 1.0 / (oversample * 64)
    ax = np.arange(-0.5, 0.5 + step / 2, step)
    gx, gy = np.meshgrid(ax, ax)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= 0.5]
    dist, _ = cKDTree(coords).query(pts)
    return float(dist.max())


@dataclass(eq=False)
class CoilSensitivities:
    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.complex128)
        if self.maps.ndim == 2:
            self.maps = self.maps[None]
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ConfigurationError("coil maps must have shape (n_coils, rows, cols)")
        if not np.all(np.isfinite(self.maps)):
            raise ConfigurationError("coil maps contain non-finite values")

    @property
    def n_coils(self):
        return self.maps.shape[0]

    @property
    def grid(self):
        return self.maps.shape[1:]

    def flat(self):
        return self.maps.reshape(self.n_coils, -1)

    def sum_of_squares(self):
        return np.sum(np.abs(self.flat()) ** 2, axis=0)


def make_coil_sensitivities(grid, n_coils=1, normalize=True, width=0.9):
    """Smooth synthetic receive profiles.

    One coil gives a uniform unit map. Several coils are Gaussian blobs
    centred on a ring just outside the field of view, each with a gentle
    linear phase, optionally normalized to unit sum of squares.
    """
    if n_coils < 1:
        raise ConfigurationError("need at least one coil")
    rows, cols = grid
    if n_coils == 1:
        return CoilSensitivities(np.ones((1, rows, cols), dtype=np.complex128))
    y, x = np.meshgrid(np.linspace(-1, 1, rows), np.linspace(-1, 1, cols), indexing="ij")
    maps = []
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils
        cx, cy = 1.2 * np.cos(ang), 1.2 * np.sin(ang)
        mag = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))
        phase = np.pi / 4 * (np.cos(ang) * x + np.sin(ang) * y) + ang
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    if normalize:
        maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))[None]
    return CoilSensitivities(maps)


@dataclass(eq=False)
class KSpaceData:
    """Measured samples: ``per_coil`` is (n_coils, P), TR m occupies
    ``per_coil[:, layout[m]:layout[m + 1]]``."""

    per_coil: np.ndarray
    layout: np.ndarray
    trajectory_hash: str = ""

    def __post_init__(self):
        self.per_coil = np.atleast_2d(np.asarray(self.per_coil, dtype=np.complex128))
        self.layout = np.asarray(self.layout, dtype=np.int64)
        if self.layout[0] != 0 or self.layout[-1] != self.per_coil.shape[1]:
            raise ConfigurationError("layout does not match the data length")
        if np.any(np.diff(self.layout) < 0):
            raise ConfigurationError("layout offsets must be non-decreasing")

    @property
    def n_coils(self):
        return self.per_coil.shape[0]

    @property
    def m(self):
        return self.layout.size - 1

    def block(self, m):
        return self.per_coil[:, self.layout[m]:self.layout[m + 1]]


def kaiser_bessel_beta(width, oversampling):
    return np.pi * np.sqrt((width / oversampling) ** 2 * (oversampling - 0.5) ** 2 - 0.8)


class EncodingOperator:
    """Per-TR Fourier encoding ``F_m`` for a grid and a trajectory.

    Args:
        grid: image shape (rows, cols).
        trajectory: :class:`Trajectory`.
        mode: ``"cartesian-exact"`` or ``"gridded-nonuniform"``.
        oversampling: grid oversampling factor of the gridded mode.
        kernel_width: Kaiser-Bessel width in oversampled grid points.
    """

    def __init__(self, grid, trajectory, mode="gridded-nonuniform", oversampling=2.0,
                 kernel_width=4):
        if mode not in MODES:
            raise ConfigurationError(f"unknown encoding mode {mode!r}")
        self.grid = tuple(int(g) for g in grid)
        self.trajectory = trajectory
        self.mode = mode
        self.n = self.grid[0] * self.grid[1]
        self.scale = 1.0 / np.sqrt(self.n)
        self.gram_cache = {}
        self._grams = {}
        rows, cols = self.grid
        self._ry = np.arange(rows) - rows // 2
        self._rx = np.arange(cols) - cols // 2
        self._groups = [(j, np.flatnonzero(trajectory.assignment == j))
                        for j in np.unique(trajectory.assignment)]
        layout = trajectory.layout
        self._uniform = np.all(np.diff(layout) == layout[1] - layout[0])
        if mode == "cartesian-exact":
            self._ex = {}
            self._ey = {}
        else:
            self.oversampling = float(oversampling)
            self.kernel_width = int(kernel_width)
            self.beta = kaiser_bessel_beta(self.kernel_width, self.oversampling)
            self.os_grid = tuple(int(2 * np.ceil(oversampling * g / 2)) for g in self.grid)
            gy, gx = self.os_grid
            self._iy = np.mod(self._ry, gy)
            self._ix = np.mod(self._rx, gx)
            self.deapod = np.outer(self._deapod_1d(self._ry, gy), self._deapod_1d(self._rx, gx))
            self._interp = {}

    # -- per-interleaf primitives ------------------------------------------

    def _exact_factors(self, j):
        if j not in self._ex:
            k = self.trajectory.interleaves[j]
            self._ex[j] = np.exp(-2j * np.pi * np.outer(k[:, 0], self._rx))
            self._ey[j] = np.exp(-2j * np.pi * np.outer(k[:, 1], self._ry))
        return self._ex[j], self._ey[j]

    def _kb(self, dist):
        w = self.kernel_width
        arg = np.clip(1.0 - (2.0 * dist / w) ** 2, 0.0, None)
        return np.where(np.abs(dist) <= w / 2, i0(self.beta * np.sqrt(arg)), 0.0)

    def _deapod_1d(self, r, g):
        # continuous Fourier transform of the KB kernel evaluated at pixel r
        w = self.kernel_width
        x = (np.pi * w * r / g) ** 2
        arg = np.sqrt(self.beta ** 2 - x + 0j)
        ft = (w * np.sinh(arg) / arg).real
        return 1.0 / ft

    def _interp_matrix(self, j):
        if j not in self._interp:
            k = self.trajectory.interleaves[j]
            gy, gx = self.os_grid
            w = self.kernel_width
            offs = np.arange(w)
            ux = np.floor(k[:, 0] * gx - w / 2).astype(np.int64)[:, None] + 1 + offs
            uy = np.floor(k[:, 1] * gy - w / 2).astype(np.int64)[:, None] + 1 + offs
            wx = self._kb(k[:, 0, None] * gx - ux)
            wy = self._kb(k[:, 1, None] * gy - uy)
            cols = (np.mod(uy, gy)[:, :, None] * gx + np.mod(ux, gx)[:, None, :]).reshape(len(k), -1)
            vals = (wy[:, :, None] * wx[:, None, :]).reshape(len(k), -1)
            rows = np.repeat(np.arange(len(k)), w * w)
            mat = scipy.sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())),
                                          shape=(len(k), gy * gx))
            self._interp[j] = (mat, mat.T.tocsr())
        return self._interp[j]

    def _check_images(self, images):
        images = np.asarray(images)
        if images.shape[-2:] != self.grid:
            raise ConfigurationError(f"image shape {images.shape[-2:]} does not match grid {self.grid}")
        return images

    def _grid_fft(self, images):
        """Deapodize, zero-pad and FFT a stack (B, rows, cols) -> (B, gy*gx)."""
        gy, gx = self.os_grid
        buf = np.zeros((images.shape[0], gy, gx), dtype=np.complex128)
        buf[:, self._iy[:, None], self._ix[None, :]] = images * self.deapod
        return scipy.fft.fft2(buf, axes=(-2, -1)).reshape(images.shape[0], -1)

    def _grid_fft_adjoint(self, kgrid):
        """Adjoint of :meth:`_grid_fft`: (B, gy*gx) -> (B, rows, cols)."""
        gy, gx = self.os_grid
        img = scipy.fft.ifft2(kgrid.reshape(-1, gy, gx), axes=(-2, -1), norm="forward")
        return img[:, self._iy[:, None], self._ix[None, :]] * self.deapod

    def forward_interleaf(self, images, j):
        """Encode a stack (B, rows, cols) with interleaf j -> (B, P_j)."""
        images = self._check_images(images)
        stack = images.reshape(-1, *self.grid)
        if self.mode == "cartesian-exact":
            ex, ey = self._exact_factors(j)
            tmp = stack @ ex.T  # (B, rows, P)
            out = np.einsum("py,byp->bp", ey, tmp)
        else:
            mat, _ = self._interp_matrix(j)
            out = (mat @ self._grid_fft(stack).T).T
        return (out * self.scale).reshape(*images.shape[:-2], -1)

    def adjoint_interleaf(self, samples, j):
        """Adjoint of :meth:`forward_interleaf`: (B, P_j) -> (B, rows, cols)."""
        samples = np.asarray(samples, dtype=np.complex128)
        p = self.trajectory.interleaves[j].shape[0]
        if samples.shape[-1] != p:
            raise ConfigurationError(f"expected {p} samples for interleaf {j}, got {samples.shape[-1]}")
        stack = samples.reshape(-1, p)
        if self.mode == "cartesian-exact":
            ex, ey = self._exact_factors(j)
            tmp = np.conj(ey).T[None, :, :] * stack[:, None, :]  # (B, rows, P)
            out = tmp @ np.conj(ex)
        else:
            _, mat_t = self._interp_matrix(j)
            out = self._grid_fft_adjoint((mat_t @ stack.T).T)
        return (out * self.scale).reshape(*samples.shape[:-1], *self.grid)

    # -- per-TR interface ---------------------------------------------------

    def forward(self, image, m):
        return self.forward_interleaf(image, int(self.trajectory.assignment[m]))

    def adjoint(self, samples, m):
        return self.adjoint_interleaf(samples, int(self.trajectory.assignment[m]))

    def forward_frames(self, frames):
        """Encode every TR frame of a (M, rows, cols) stack -> data (M-block list as (P,) array)."""
        frames = self._check_images(frames)
        if frames.shape[0] != self.trajectory.m:
            raise ConfigurationError(f"{frames.shape[0]} frames for a {self.trajectory.m}-TR trajectory")
        layout = self.trajectory.layout
        out = np.empty(layout[-1], dtype=np.complex128)
        for j, ms in self._groups:
            enc = self.forward_interleaf(frames[ms], j)
            for row, m in zip(enc, ms):
                out[layout[m]:layout[m + 1]] = row
        return out

    def adjoint_frames(self, data):
        """Adjoint of :meth:`forward_frames`: (P,) -> (M, rows, cols)."""
        layout = self.trajectory.layout
        out = np.empty((self.trajectory.m, *self.grid), dtype=np.complex128)
        for j, ms in self._groups:
            blocks = self._gather(data[None], ms)[0]
            out[ms] = self.adjoint_interleaf(blocks, j)
        return out

    def _gather(self, per_coil, ms):
        """Blocks of TRs ``ms`` from (C, P) data -> (C, len(ms), P_j)."""
        layout = self.trajectory.layout
        if self._uniform:
            p = layout[1] - layout[0]
            return per_coil.reshape(per_coil.shape[0], -1, p)[:, ms]
        return np.stack([per_coil[:, layout[m]:layout[m + 1]] for m in ms], axis=1)

    def _scatter(self, out, blocks, ms):
        layout = self.trajectory.layout
        if self._uniform:
            p = layout[1] - layout[0]
            out.reshape(out.shape[0], -1, p)[:, ms] = blocks
        else:
            for i, m in enumerate(ms):
                out[:, layout[m]:layout[m + 1]] = blocks[:, i]

    # -- low-rank model -----------------------------------------------------

    def _check_model(self, u, v, sens):
        u = u.u if hasattr(u, "u") else np.asarray(u)
        v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
        if u.shape[0] != self.n or u.shape[1] != v_hat.shape[0]:
            raise ConfigurationError(f"U {u.shape} incompatible with grid {self.grid} / rank {v_hat.shape[0]}")
        if v_hat.shape[1] != self.trajectory.m:
            raise ConfigurationError(f"subspace length {v_hat.shape[1]} != trajectory length {self.trajectory.m}")
        if tuple(sens.grid) != self.grid:
            raise ConfigurationError("coil maps do not match the image grid")
        return u, v_hat

    def apply_full_model(self, u, v, sens):
        """Data of ``Omega(F S_c U V)`` for every coil -> :class:`KSpaceData`.

        Uses linearity: only the L coefficient images are transformed and the
        per-TR samples are combined with the columns of V afterwards.
        """
        u, v_hat = self._check_model(u, v, sens)
        rank = v_hat.shape[0]
        layout = self.trajectory.layout
        out = np.empty((sens.n_coils, layout[-1]), dtype=np.complex128)
        coeff_imgs = u.T.reshape(rank, *self.grid)
        for c in range(sens.n_coils):
            imgs = coeff_imgs * sens.maps[c]
            kgrid = self._grid_fft(imgs) if self.mode != "cartesian-exact" else None
            for j, ms in self._groups:
                if kgrid is None:
                    samp = self.forward_interleaf(imgs, j)
                else:
                    samp = (self._interp_matrix(j)[0] @ kgrid.T).T * self.scale
                blocks = v_hat[:, ms].T @ samp  # (len(ms), P_j)
                self._scatter(out[c:c + 1], blocks[None], ms)
        return KSpaceData(out, layout, self.trajectory.content_hash())

    def adjoint_full_model(self, data, v, sens):
        """Adjoint of :meth:`apply_full_model`; returns an (N, L) array."""
        v_hat = v.v_hat if hasattr(v, "v_hat") else np.asarray(v)
        per_coil = data.per_coil if hasattr(data, "per_coil") else np.atleast_2d(data)
        rank = v_hat.shape[0]
        acc = np.zeros((rank, *self.grid), dtype=np.complex128)
        gy_gx = None if self.mode == "cartesian-exact" else int(np.prod(self.os_grid))
        for c in range(per_coil.shape[0]):
            blocks_all = per_coil[c:c + 1]
            if gy_gx is None:
                imgs = np.zeros((rank, *self.grid), dtype=np.complex128)
            else:
                kgrid = np.zeros((rank, gy_gx), dtype=np.complex128)
            for j, ms in self._groups:
                blocks = self._gather(blocks_all, ms)[0]  # (len(ms), P_j)
                comb = np.conj(v_hat[:, ms]) @ blocks  # (L, P_j)
                if gy_gx is None:
                    imgs += self.adjoint_interleaf(comb, j)
                else:
                    kgrid += (self._interp_matrix(j)[1] @ comb.T).T
            if gy_gx is not None:
                imgs = self._grid_fft_adjoint(kgrid) * self.scale
            acc += np.conj(sens.maps[c]) * imgs
        return acc.reshape(rank, -1).T

    # -- Gram matrices and the matrix-inversion-lemma solve ------------------

    def gram(self, j):
        """``F_j F_j^H`` (P_j x P_j) for interleaf j."""
        if j not in self._grams:
            if self.mode == "cartesian-exact":
                ex, ey = self._exact_factors(j)
                g = (ex @ ex.conj().T) * (ey @ ey.conj().T) / self.n
            else:
                p = self.trajectory.interleaves[j].shape[0]
                g = self.forward_interleaf(self.adjoint_interleaf(np.eye(p), j), j).T
            self._grams[j] = g
        return self._grams[j]

    def build_gram_cache(self, mu1):
        """Factorize ``(mu1/2)^2 I + (mu1/2) F_j F_j^H`` for every used interleaf."""
        if not mu1 > 0:
            raise ConfigurationError(f"mu1 must be positive, got {mu1}")
        a = 0.5 * mu1
        for j, _ in self._groups:
            key = (int(j), float(mu1))
            if key in self.gram_cache:
                continue
            g = self.gram(j)
            mat = a * a * np.eye(g.shape[0]) + a * g
            try:
                self.gram_cache[key] = scipy.linalg.cho_factor(mat, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailure(f"Cholesky of the interleaf-{j} Gram system failed: {exc}") from exc
        return self

    def _factor(self, j, mu1):
        key = (int(j), float(mu1))
        if key not in self.gram_cache:
            raise ConfigurationError(f"Gram cache missing for interleaf {j}, mu1={mu1}; call build_gram_cache")
        return self.gram_cache[key]

    def woodbury_solve(self, rhs, m, mu1):
        """Solve ``(F_m^H F_m + mu1/2 I) h = rhs`` with the matrix inversion lemma.

        ``h = (2/mu1) rhs - F_m^H K^{-1} F_m rhs`` with K the cached matrix.
        Accepts a single image or a stack sharing TR m's interleaf.
        """
        j = int(self.trajectory.assignment[m])
        fac = self._factor(j, mu1)
        rhs = np.asarray(rhs, dtype=np.complex128)
        stack = rhs.reshape(-1, *self.grid)
        y = self.forward_interleaf(stack, j)
        y = scipy.linalg.cho_solve(fac, y.T).T
        out = (2.0 / mu1) * stack - self.adjoint_interleaf(y, j)
        return out.reshape(rhs.shape)

    def regularized_solve_frames(self, data, q, mu1):
        """Per-TR minimizers of ``||d_m - F_m h||^2 + mu1/2 ||h - q_m||^2``.

        ``data`` is (P,) for one coil, ``q`` is (M, rows, cols). Uses
        ``h = q + (mu1/2) F^H K^{-1} (d - F q)``, which equals the
        matrix-inversion-lemma solution applied to ``F^H d + (mu1/2) q`` but
        needs one forward and one adjoint transform per TR.
        """
        a = 0.5 * mu1
        out = np.empty_like(q, dtype=np.complex128)
        for j, ms in self._groups:
            fac = self._factor(j, mu1)
            resid = self._gather(data[None], ms)[0] - self.forward_interleaf(q[ms], j)
            y = scipy.linalg.cho_solve(fac, resid.T).T
            out[ms] = q[ms] + a * self.adjoint_interleaf(y, j)
        return out

    def cg_solve(self, rhs, m, mu1, tol=1e-12, max_iter=500):
        """Matrix-free CG for ``(F_m^H F_m + mu1/2 I) h = rhs`` (cross-check path)."""
        a = 0.5 * mu1
        b = np.asarray(rhs, dtype=np.complex128)

        def normal(x):
            return self.adjoint(self.forward(x, m), m) + a * x

        x = np.zeros_like(b)
        r = b.copy()
        p = r.copy()
        rr = np.vdot(r, r).real
        b_norm = np.sqrt(np.vdot(b, b).real)
        for _ in range(max_iter):
            if np.sqrt(rr) <= tol * max(b_norm, 1e-300):
                break
            ap = normal(p)
            alpha = rr / np.vdot(p, ap).real
            x += alpha * p
            r -= alpha * ap
            rr_new = np.vdot(r, r).real
            p = r + (rr_new / rr) * p
            rr = rr_new
        return x


def save_trajectory(path, traj, extra_meta=None):
    coords = np.concatenate(traj.interleaves)
    offsets = np.concatenate([[0], np.cumsum([c.shape[0] for c in traj.interleaves])])
    meta = {"kind": "trajectory", "content_hash": traj.content_hash()}
    meta.update(extra_meta or {})
    container.save(path, {"coords": coords, "interleaf_offsets": offsets,
                          "assignment": traj.assignment,
                          "full_set_size": np.array([traj.full_set_size])}, meta)


def load_trajectory(path):
    arrays, meta = container.load(path)
    for key in ("coords", "assignment", "full_set_size"):
        if key not in arrays:
            raise ValidationError(f"{path}: missing array {key!r}")
    coords = arrays["coords"]
    offsets = arrays.get("interleaf_offsets", np.array([0, coords.shape[0]]))
    arms = [coords[a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    return Trajectory(arms, arrays["assignment"], int(arrays["full_set_size"][0])), meta


def save_kspace(path, data, extra_meta=None):
    meta = {"kind": "kspace", "trajectory_hash": data.trajectory_hash,
            "content_hash": container.array_hash(data.per_coil)}
    meta.update(extra_meta or {})
    container.save(path, {"data": data.per_coil, "layout": data.layout}, meta)


def load_kspace(path):
    arrays, meta = container.load(path)
    for key in ("data", "layout"):
        if key not in arrays:
            raise ValidationError(f"{path}: missing array {key!r}")
    return KSpaceData(arrays["data"], arrays["layout"], meta.get("trajectory_hash", "")), meta
