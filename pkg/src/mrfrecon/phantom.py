"""Ground-truth parameter maps, time-series synthesis and calibrated noise."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .errors import ConfigurationError, SimulationFailure, ValidationError
from .spin_sim import SimConfig, simulate_many

# label -> (name, T1 ms, T2 ms, PD, evaluated)
TISSUES = {
    1: ("scalp", 400.0, 60.0, 0.9, False),
    2: ("csf", 2500.0, 300.0, 1.0, False),
    3: ("gm", 1300.0, 90.0, 0.8, True),
    4: ("wm", 800.0, 70.0, 0.7, True),
    5: ("lesion_a", 1100.0, 120.0, 0.85, True),
    6: ("lesion_b", 1600.0, 160.0, 0.9, True),
}
WM_LABEL = 4


@dataclass(eq=False)
class ParameterMaps:
    """Voxel-wise tissue parameters on a (rows, cols) grid.

    ``labels`` (tissue class per voxel, 0 = background) and ``wm_mask``
    (white-matter reference region used for SNR calibration) are optional.
    """

    t1_map: np.ndarray
    t2_map: np.ndarray
    pd_map: np.ndarray
    mask: np.ndarray
    labels: np.ndarray = None
    wm_mask: np.ndarray = None

    def __post_init__(self):
        self.t1_map = np.asarray(self.t1_map, dtype=float)
        self.t2_map = np.asarray(self.t2_map, dtype=float)
        self.pd_map = np.asarray(self.pd_map, dtype=np.complex128)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def grid(self):
        return self.t1_map.shape

    @property
    def n(self):
        return self.t1_map.size

    def validate(self):
        shape = self.t1_map.shape
        for name in ("t2_map", "pd_map", "mask"):
            if getattr(self, name).shape != shape:
                raise ValidationError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("labels", "wm_mask"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr) != shape:
                raise ValidationError(f"{name} has shape {np.shape(arr)}, expected {shape}")
        if not (np.all(np.isfinite(self.t1_map)) and np.all(np.isfinite(self.t2_map))
                and np.all(np.isfinite(self.pd_map))):
            raise ValidationError("parameter maps contain non-finite values")
        need = self.mask | (self.pd_map != 0)
        bad = need & ~((self.t1_map > 0) & (self.t2_map > 0))
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"non-positive T1/T2 at voxel {idx}")
        bad = self.mask & (self.t2_map > self.t1_map)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(
                f"T2 > T1 inside the mask at voxel {idx}: "
                f"T1={self.t1_map[idx]}, T2={self.t2_map[idx]}")
        return self


@dataclass(eq=False)
class CasoratiImage:
    """Time series as an N x M matrix (rows = voxels, columns = TRs)."""

    c: np.ndarray
    grid: tuple

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.complex128)
        if self.c.ndim != 2 or self.c.shape[0] != self.grid[0] * self.grid[1]:
            raise ConfigurationError(f"Casorati matrix {self.c.shape} does not match grid {self.grid}")

    @property
    def m(self):
        return self.c.shape[1]

    def frame(self, m):
        return self.c[:, m].reshape(self.grid)


def make_phantom(grid=(64, 64), seed=0):
    """Procedural piecewise-constant brain-like phantom.

    An elliptical head with scalp, a CSF layer, cortical grey matter with a
    wavy inner boundary, white matter, two ventricles and lesion inserts. PD
    is modulated by a smooth random bilinear field. The evaluation mask
    excludes background, scalp and CSF.
    """
    rows, cols = grid
    if rows < 16 or cols < 16:
        raise ConfigurationError(f"phantom grid must be at least 16x16, got {grid}")
    rng = np.random.default_rng(seed)
    y, x = np.meshgrid(np.linspace(-1, 1, rows, endpoint=False) + 1.0 / rows,
                       np.linspace(-1, 1, cols, endpoint=False) + 1.0 / cols, indexing="ij")
    ay, ax = 0.92 * (1 + 0.03 * rng.uniform(-1, 1)), 0.78 * (1 + 0.03 * rng.uniform(-1, 1))
    r = np.sqrt((x / ax) ** 2 + (y / ay) ** 2)
    phi = np.arctan2(y, x)
    wm_edge = 0.64 + 0.06 * np.cos(6 * phi + rng.uniform(0, 2 * np.pi))

    labels = np.zeros(grid, dtype=np.int64)
    labels[r < 1.0] = 1
    labels[r < 0.88] = 2
    labels[r < 0.81] = 3
    labels[r < wm_edge] = 4
    for sx in (-1, 1):
        cy, cx = 0.05 + 0.04 * rng.uniform(-1, 1), sx * (0.15 + 0.03 * rng.uniform(-1, 1))
        vent = ((x - cx) / 0.09) ** 2 + ((y - cy) / 0.25) ** 2 < 1
        labels[vent] = 2
    lesions = [(5, 0.09), (6, 0.07), (5, 0.06)]
    for lab, rad in lesions:
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.3, 0.45)
        cy, cx = dist * ay * np.sin(ang), dist * ax * np.cos(ang)
        labels[((x - cx) ** 2 + (y - cy) ** 2 < rad ** 2) & (labels >= 3)] = lab

    t1 = np.zeros(grid)
    t2 = np.zeros(grid)
    pd = np.zeros(grid)
    evaluated = np.zeros(grid, dtype=bool)
    for lab, (_, t1v, t2v, pdv, ev) in TISSUES.items():
        sel = labels == lab
        t1[sel], t2[sel], pd[sel] = t1v, t2v, pdv
        evaluated |= sel & ev
    coef = rng.uniform(-0.1, 0.1, size=3)
    pd = pd * (1.0 + coef[0] * x + coef[1] * y + coef[2] * x * y)
    return ParameterMaps(t1, t2, pd.astype(np.complex128), evaluated, labels,
                         labels == WM_LABEL).validate()


def save_parameter_maps(path, maps, extra_meta=None):
    arrays = {"t1_ms": maps.t1_map, "t2_ms": maps.t2_map, "pd_real": maps.pd_map.real,
              "pd_imag": maps.pd_map.imag, "mask": maps.mask.astype(np.uint8)}
    if maps.labels is not None:
        arrays["labels"] = maps.labels
    if maps.wm_mask is not None:
        arrays["wm_mask"] = np.asarray(maps.wm_mask, dtype=np.uint8)
    meta = {"kind": "parameter_maps", "content_hash": container.array_hash(*arrays.values())}
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def load_parameter_maps(path):
    arrays, meta = container.load(path)
    for key in ("t1_ms", "t2_ms", "pd_real", "pd_imag", "mask"):
        if key not in arrays:
            raise ValidationError(f"{path}: missing array {key!r}")
    if arrays["pd_real"].shape != arrays["pd_imag"].shape:
        raise ValidationError(f"{path}: pd_real/pd_imag shape mismatch")
    wm = arrays.get("wm_mask")
    maps = ParameterMaps(arrays["t1_ms"], arrays["t2_ms"],
                         arrays["pd_real"] + 1j * arrays["pd_imag"], arrays["mask"].astype(bool),
                         arrays.get("labels"), None if wm is None else wm.astype(bool))
    return maps.validate()


def synthesize_timeseries(maps, sched, sim_cfg=SimConfig(), decimals=6):
    """Noiseless Casorati matrix: row n is pd[n] * fingerprint(T1[n], T2[n]).

    Voxels sharing (T1, T2) after rounding to ``decimals`` are simulated once.
    """
    t1 = maps.t1_map.ravel()
    t2 = maps.t2_map.ravel()
    pd = maps.pd_map.ravel()
    c = np.zeros((t1.size, sched.m), dtype=np.complex128)
    active = np.flatnonzero(pd != 0)
    if active.size == 0:
        return CasoratiImage(c, maps.grid)
    keys = np.round(np.stack([t1[active], t2[active]], axis=1), decimals)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    try:
        fps = simulate_many(uniq[:, 0], uniq[:, 1], sched, sim_cfg)
    except SimulationFailure as exc:
        i = exc.diagnostics.get("index", 0)
        voxel = int(active[np.flatnonzero(inverse.ravel() == i)[0]])
        raise SimulationFailure(f"{exc} (first affected voxel {np.unravel_index(voxel, maps.grid)})",
                                dict(exc.diagnostics, voxel=voxel)) from exc
    c[active] = pd[active, None] * fps[inverse.ravel()]
    return CasoratiImage(c, maps.grid)


def signal_reference(c, maps):
    """Mean magnitude of the first contrast image over the white-matter region."""
    region = maps.wm_mask if maps.wm_mask is not None else maps.mask
    region = np.asarray(region, dtype=bool).ravel()
    if not np.any(region):
        raise ValidationError("empty reference region for SNR calibration")
    return float(np.mean(np.abs(c.c[region, 0])))


def noise_sigma(snr_db, signal_ref):
    """Complex noise std from SNR = 20 log10(s / sigma)."""
    if not signal_ref > 0:
        raise ConfigurationError(f"signal reference must be positive, got {signal_ref}")
    if np.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(signal_ref * 10.0 ** (-snr_db / 20.0))


def add_noise(data, snr_db, signal_ref, seed):
    """Add i.i.d. circular complex Gaussian noise (per-component std sigma/sqrt 2)."""
    sigma = noise_sigma(snr_db, signal_ref)
    if sigma == 0.0:
        return replace(data, per_coil=data.per_coil.copy())
    rng = np.random.default_rng(seed)
    shape = data.per_coil.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return replace(data, per_coil=data.per_coil + (sigma / np.sqrt(2.0)) * noise)
