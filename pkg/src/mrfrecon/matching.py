"""Voxel-wise dictionary matching and masked error metrics."""

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ConfigurationError, ValidationError
from .phantom import ParameterMaps

# fixed display windows for PNG previews (min, max)
PREVIEW_WINDOWS = {"t1": (0.0, 3000.0), "t2": (0.0, 350.0), "pd": (0.0, 1.2)}


@dataclass(eq=False)
class MatchResult:
    """Matched maps plus per-voxel diagnostics.

    ``maps.pd_map`` is the physical (complex) proton density: the
    least-squares scale against the normalized atom divided by the atom's
    pre-normalization norm. ``pd_atom`` keeps the scale relative to the
    normalized atom itself.
    """

    maps: ParameterMaps
    match_scores: np.ndarray
    atom_index: np.ndarray
    pd_atom: np.ndarray


def dictionary_match(timeseries, dictionary, mask=None, block=64):
    """Best-correlation atom per voxel.

    For each masked voxel signal s the index ``argmax_k |<d_k, s>|`` is
    selected (first maximum wins, so ties go to the smallest index). Scores
    are ``|<d_k, s>| / ||s||`` (0 for an all-zero voxel).
    """
    c = timeseries.c if hasattr(timeseries, "c") else np.asarray(timeseries)
    grid = getattr(timeseries, "grid", (c.shape[0], 1))
    if not dictionary.normalized:
        raise ConfigurationError("dictionary must be normalized before matching")
    if c.shape[1] != dictionary.m:
        raise ConfigurationError(f"time series has {c.shape[1]} frames, dictionary {dictionary.m}")
    n = c.shape[0]
    sel = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if sel.size != n:
        raise ConfigurationError("mask size does not match the number of voxels")
    idx = np.zeros(n, dtype=np.int64)
    score = np.zeros(n)
    inner = np.zeros(n, dtype=np.complex128)
    conj_atoms_t = np.ascontiguousarray(dictionary.atoms.conj().T)  # (M, K)
    voxels = np.flatnonzero(sel)
    for start in range(0, voxels.size, block):
        vox = voxels[start:start + block]
        ip = c[vox] @ conj_atoms_t  # <d_k, s> for each voxel/atom
        mag = np.abs(ip)
        best = np.argmax(mag, axis=1)
        idx[vox] = best
        inner[vox] = ip[np.arange(vox.size), best]
    s_norm = np.linalg.norm(c, axis=1)
    nz = sel & (s_norm > 0)
    score[nz] = np.minimum(np.abs(inner[nz]) / s_norm[nz], 1.0)
    t1 = np.where(sel, dictionary.t1[idx], 0.0)
    t2 = np.where(sel, dictionary.t2[idx], 0.0)
    norms = dictionary.norms if dictionary.norms is not None else np.ones(dictionary.k)
    pd = np.where(sel, inner / norms[idx], 0.0)
    maps = ParameterMaps(t1.reshape(grid), t2.reshape(grid), pd.reshape(grid), sel.reshape(grid))
    return MatchResult(maps, score.reshape(grid), idx.reshape(grid), inner.reshape(grid))


def nrmse(truth, estimate, mask=None):
    """``||(g - g_hat) * mask||_2 / ||g * mask||_2``."""
    g = np.asarray(truth)
    e = np.asarray(estimate)
    if g.shape != e.shape:
        raise ConfigurationError(f"shape mismatch {g.shape} vs {e.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != g.shape[:m.ndim]:
            m = m.reshape(g.shape[:1])
        g = g[m]
        e = e[m]
    denom = np.linalg.norm(g)
    if denom == 0:
        raise ValidationError("masked ground truth is all zero")
    return float(np.linalg.norm(g - e) / denom)


def timeseries_nrmse(c_true, c_est, mask=None):
    """Masked NRMSE over the full N x M matrix (mask is per voxel)."""
    a = c_true.c if hasattr(c_true, "c") else np.asarray(c_true)
    b = c_est.c if hasattr(c_est, "c") else np.asarray(c_est)
    m = None if mask is None else np.asarray(mask, dtype=bool).ravel()
    return nrmse(a, b, m)


def map_nrmse(truth, estimate, mask):
    """NRMSE of T1, T2 and |PD| maps over ``mask``."""
    m = np.asarray(mask, dtype=bool)
    return {"t1": nrmse(truth.t1_map, estimate.t1_map, m),
            "t2": nrmse(truth.t2_map, estimate.t2_map, m),
            "pd": nrmse(np.abs(truth.pd_map), np.abs(estimate.pd_map), m)}


def save_match(path, result, extra_meta=None):
    maps = result.maps
    arrays = {"t1_ms": maps.t1_map, "t2_ms": maps.t2_map, "pd_real": maps.pd_map.real,
              "pd_imag": maps.pd_map.imag, "mask": maps.mask.astype(np.uint8),
              "match_scores": result.match_scores, "atom_index": result.atom_index}
    meta = {"kind": "parameter_maps", "source": "match", "preview_windows": PREVIEW_WINDOWS,
            "content_hash": container.array_hash(maps.t1_map, maps.t2_map, maps.pd_map)}
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def write_previews(prefix, maps):
    """Grayscale PNGs of T1, T2 and |PD| with the fixed windows."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for key, img in (("t1", maps.t1_map), ("t2", maps.t2_map), ("pd", np.abs(maps.pd_map))):
        lo, hi = PREVIEW_WINDOWS[key]
        path = f"{prefix}_{key}.png"
        plt.imsave(path, np.clip(img, lo, hi), cmap="gray", vmin=lo, vmax=hi)
        paths.append(path)
    return paths
