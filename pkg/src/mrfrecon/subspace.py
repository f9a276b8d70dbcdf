"""Temporal subspace estimation and projection onto it."""

from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ConfigurationError, ValidationError


@dataclass(eq=False)
class TemporalSubspace:
    """Top-``rank`` right singular vectors of a dictionary.

    Attributes:
        v_hat: complex (L, M) matrix with orthonormal rows.
        singular_values: all singular values of the atom matrix, descending.
        source_hash: content hash of the dictionary the subspace came from.
    """

    v_hat: np.ndarray
    singular_values: np.ndarray
    source_hash: str = ""

    @property
    def rank(self):
        return self.v_hat.shape[0]

    @property
    def m(self):
        return self.v_hat.shape[1]

    def content_hash(self):
        return container.array_hash(self.v_hat)


@dataclass(eq=False)
class SpatialCoefficients:
    """Spatial factor U (N x L) of the low-rank model on a (rows, cols) grid."""

    u: np.ndarray
    grid: tuple
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.complex128)
        rows, cols = self.grid
        if self.u.ndim != 2 or self.u.shape[0] != rows * cols:
            raise ConfigurationError(f"U of shape {self.u.shape} does not match grid {self.grid}")

    @property
    def rank(self):
        return self.u.shape[1]

    def images(self):
        """U reshaped to (L, rows, cols)."""
        return self.u.T.reshape(self.rank, *self.grid)


def _fix_phase(v):
    # first entry with non-negligible magnitude becomes real-positive
    out = v.copy()
    for i, row in enumerate(out):
        mag = np.abs(row)
        j = int(np.argmax(mag > 1e-12 * mag.max())) if mag.max() > 0 else 0
        if mag[j] > 0:
            out[i] = row * (np.abs(row[j]) / row[j])
    return out


def estimate_temporal_subspace(dictionary, rank):
    """Top-``rank`` right singular subspace of the (K, M) atom matrix.

    The phase of each singular vector is fixed by making its first nonzero
    entry real and positive, so repeated runs return identical matrices.
    """
    atoms = dictionary.atoms if hasattr(dictionary, "atoms") else np.asarray(dictionary)
    k, m = atoms.shape
    if not 1 <= rank <= min(k, m):
        raise ConfigurationError(f"rank {rank} must lie in [1, {min(k, m)}]")
    if not np.all(np.isfinite(atoms)):
        raise ValidationError("dictionary contains non-finite atoms")
    # a tall dictionary is reduced to its R factor first; D and R share the
    # singular values and right singular vectors
    reduced = np.linalg.qr(atoms, mode="r") if k > m else atoms
    _, s, vh = np.linalg.svd(reduced, full_matrices=False)
    v_hat = _fix_phase(vh[:rank])
    src = dictionary.content_hash() if hasattr(dictionary, "content_hash") else ""
    return TemporalSubspace(v_hat, s, src)


def projection_residual(atoms, subspace):
    """Relative Frobenius residual ||D - D V^H V|| / ||D||."""
    v = subspace.v_hat
    resid = atoms - (atoms @ v.conj().T) @ v
    return np.linalg.norm(resid) / np.linalg.norm(atoms)


def project_timeseries(c, subspace):
    """Least-squares spatial coefficients U = C V^H for orthonormal V."""
    data = c.c if hasattr(c, "c") else np.asarray(c)
    if data.ndim != 2 or data.shape[1] != subspace.m:
        raise ConfigurationError(
            f"time series with {data.shape[-1]} frames does not match subspace length {subspace.m}")
    grid = getattr(c, "grid", (data.shape[0], 1))
    return SpatialCoefficients(data @ subspace.v_hat.conj().T, grid)


def save_subspace(path, subspace, extra_meta=None):
    meta = {"kind": "subspace", "rank": subspace.rank, "dictionary_hash": subspace.source_hash,
            "content_hash": subspace.content_hash()}
    meta.update(extra_meta or {})
    container.save(path, {"v_hat": subspace.v_hat, "singular_values": subspace.singular_values},
                   meta)


def load_subspace(path):
    arrays, meta = container.load(path)
    if "v_hat" not in arrays:
        raise ValidationError(f"{path}: missing array 'v_hat'")
    return TemporalSubspace(arrays["v_hat"], arrays.get("singular_values", np.array([])),
                            meta.get("dictionary_hash", "")), meta
