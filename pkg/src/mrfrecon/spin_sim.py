"""Transient-state spin simulation and dictionary generation.

Two spin models are available:

``"epg"``
    Extended phase graph simulation of an inversion-recovery FISP sequence
    (one unit of gradient dephasing per TR). The number of configuration
    states kept is ``SimConfig.n_states``; ``None`` keeps every state that
    can be populated, which makes the simulation exact. Only orders that can
    still return to order 0 before the end of the schedule are propagated,
    so the exact mode costs about M**2 / 4 state updates per tissue.
``"ideal-spoiling"``
    Single isochromat whose transverse magnetization is destroyed at the end
    of every TR. Used by the closed-form oracles in the test-suite.

In both models the sequence starts from an ideal inversion (Mz = -M0), waits
``inversion_delay`` and then plays one RF pulse per TR. The signal of TR m is
the transverse magnetization at TE after pulse m, so fingerprints are real
valued (RF phase 90 degrees) but stored as complex arrays.
"""

from dataclasses import dataclass, field
import hashlib

import numpy as np

from . import container
from .errors import ConfigurationError, SimulationFailure, ValidationError


@dataclass(frozen=True)
class TissueParams:
    t1: float
    t2: float
    rho: complex = 1.0 + 0.0j

    def __post_init__(self):
        if not (self.t1 > 0 and self.t2 > 0):
            raise ConfigurationError(f"T1 and T2 must be positive, got {self.t1}, {self.t2}")


@dataclass(frozen=True, eq=False)
class AcquisitionSchedule:
    """Per-TR excitation parameters; angles in radians, times in ms."""

    flip_angles: np.ndarray
    tr: np.ndarray
    te: np.ndarray
    inversion_delay: float = 20.0
    echo_convention: str = "signal-at-TE"

    def __post_init__(self):
        fa = np.asarray(self.flip_angles, dtype=float).ravel()
        tr = np.asarray(self.tr, dtype=float).ravel()
        te = np.asarray(self.te, dtype=float).ravel()
        if fa.size < 1 or not (fa.size == tr.size == te.size):
            raise ConfigurationError("schedule arrays must be non-empty and of equal length")
        if np.any(fa < 0) or np.any(fa > np.pi + 1e-12):
            raise ConfigurationError("flip angles must lie in [0, pi]")
        if np.any(te < 0) or np.any(tr <= te):
            raise ConfigurationError("require tr > te >= 0 for every TR")
        if self.inversion_delay < 0:
            raise ConfigurationError("inversion_delay must be non-negative")
        if self.echo_convention != "signal-at-TE":
            raise ConfigurationError(f"unknown echo convention {self.echo_convention!r}")
        object.__setattr__(self, "flip_angles", fa)
        object.__setattr__(self, "tr", tr)
        object.__setattr__(self, "te", te)

    @property
    def m(self):
        return self.flip_angles.size

    @property
    def schedule_id(self):
        h = hashlib.sha256()
        for a in (self.flip_angles, self.tr, self.te, np.array([self.inversion_delay])):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def truncate(self, m):
        if not 1 <= m <= self.m:
            raise ConfigurationError(f"cannot truncate a {self.m}-TR schedule to {m}")
        return AcquisitionSchedule(self.flip_angles[:m], self.tr[:m], self.te[:m],
                                   self.inversion_delay)


@dataclass(frozen=True)
class SimConfig:
    model: str = "epg"
    n_states: int = None
    m0: float = 1.0

    def __post_init__(self):
        if self.model not in ("epg", "ideal-spoiling"):
            raise ConfigurationError(f"unknown spin model {self.model!r}")
        if self.n_states is not None and self.n_states < 1:
            raise ConfigurationError("n_states must be >= 1")


@dataclass(frozen=True)
class GridSpec:
    """Piecewise-uniform 1D grid: ``segments`` is a list of (start, stop, step).

    Each segment contributes ``start, start + step, ...`` up to and including
    ``stop``. Values are de-duplicated and sorted.
    """

    segments: tuple

    def values(self):
        vals = []
        for start, stop, step in self.segments:
            if step <= 0 or stop < start:
                raise ConfigurationError(f"bad grid segment {(start, stop, step)}")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            vals.append(start + step * np.arange(n))
        if not vals:
            raise ConfigurationError("empty grid specification")
        return np.unique(np.round(np.concatenate(vals), 9))


# Second segments start one step after the first segment's end point
# (1520 ms, 202 ms), i.e. they continue the regular lattice.
DEFAULT_T1_SPEC = GridSpec(((100.0, 1500.0, 10.0), (1520.0, 3000.0, 20.0)))
DEFAULT_T2_SPEC = GridSpec(((20.0, 200.0, 1.0), (202.0, 350.0, 2.0)))


@dataclass(eq=False)
class Dictionary:
    """Simulated fingerprints over a (T1, T2) grid.

    Attributes:
        atoms: complex (K, M) matrix, one fingerprint per row.
        t1, t2: (K,) grid values in ms, row-major over (t1 outer, t2 inner).
        normalized: whether rows have unit norm.
        norms: (K,) norms of the simulated fingerprints before normalization.
        schedule_id: hash of the schedule the atoms were simulated with.
    """

    atoms: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    normalized: bool
    norms: np.ndarray
    schedule_id: str
    sim_model: str = "epg"
    n_states: int = None

    @property
    def grid(self):
        return np.stack([self.t1, self.t2], axis=1)

    @property
    def k(self):
        return self.atoms.shape[0]

    @property
    def m(self):
        return self.atoms.shape[1]

    def content_hash(self):
        return container.array_hash(self.atoms, self.t1, self.t2)

    def truncate(self, m, schedule_id=None):
        """Dictionary for the first ``m`` TRs of the same schedule.

        Simulation is causal, so the prefix of every fingerprint is the
        fingerprint of the truncated schedule; rows are re-normalized.
        """
        raw = self.atoms[:, :m] * (self.norms[:, None] if self.normalized else 1.0)
        norms = np.linalg.norm(raw, axis=1)
        atoms = _normalize_rows(raw, norms) if self.normalized else raw
        return Dictionary(atoms, self.t1.copy(), self.t2.copy(), self.normalized, norms,
                          schedule_id or f"{self.schedule_id}[:{m}]", self.sim_model,
                          self.n_states)


def default_schedule(m=1000, lobe_length=100, fa_min_deg=5.0, fa_max_deg=(70.0, 40.0),
                     tr_ms=12.0, te_ms=2.0, inversion_delay_ms=20.0):
    """Synthetic IR-FISP style schedule.

    Flip angles follow half-sine lobes of ``lobe_length`` TRs between
    ``fa_min_deg`` and alternately each peak in ``fa_max_deg``; the two-lobe
    pattern repeats to cover ``m`` TRs. TR and TE are constant.
    """
    if m < 1 or lobe_length < 1:
        raise ConfigurationError("m and lobe_length must be >= 1")
    idx = np.arange(m)
    lobe = idx // lobe_length
    phase = (idx % lobe_length + 0.5) / lobe_length
    peaks = np.asarray(fa_max_deg, dtype=float)[lobe % len(fa_max_deg)]
    fa_deg = fa_min_deg + (peaks - fa_min_deg) * np.sin(np.pi * phase)
    return AcquisitionSchedule(np.deg2rad(fa_deg), np.full(m, tr_ms), np.full(m, te_ms),
                               inversion_delay_ms)


def simulate_fingerprint(tissue, sched, sim_cfg=SimConfig()):
    """Fingerprint of one tissue, scaled by ``tissue.rho``."""
    sig = simulate_many(np.array([tissue.t1]), np.array([tissue.t2]), sched, sim_cfg)[0]
    return sig * tissue.rho


def simulate_many(t1, t2, sched, sim_cfg=SimConfig(), chunk=4096):
    """Unit-PD fingerprints for arrays of (T1, T2); returns a (K, M) array.

    Work is chunked over tissues and written into a preallocated output, so
    the result does not depend on the chunking.
    """
    t1 = np.asarray(t1, dtype=float).ravel()
    t2 = np.asarray(t2, dtype=float).ravel()
    if t1.shape != t2.shape:
        raise ConfigurationError("t1 and t2 must have the same length")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ConfigurationError("T1 and T2 must be positive")
    out = np.empty((t1.size, sched.m), dtype=np.complex128)
    sim = _simulate_epg if sim_cfg.model == "epg" else _simulate_spoiled
    for start in range(0, t1.size, chunk):
        sl = slice(start, start + chunk)
        with np.errstate(over="ignore", invalid="ignore"):
            out[sl] = sim(t1[sl], t2[sl], sched, sim_cfg)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SimulationFailure(f"non-finite fingerprint for T1={t1[i]} ms, T2={t2[i]} ms",
                                {"index": i, "t1": float(t1[i]), "t2": float(t2[i])})
    return out


def _inversion_start(t1, sched, m0):
    e = np.exp(-sched.inversion_delay / t1)
    return -m0 * e + m0 * (1.0 - e)


def _simulate_spoiled(t1, t2, sched, cfg):
    mz = _inversion_start(t1, sched, cfg.m0)
    out = np.empty((t1.size, sched.m), dtype=np.complex128)
    for m in range(sched.m):
        a = sched.flip_angles[m]
        out[:, m] = mz * np.sin(a) * np.exp(-sched.te[m] / t2)
        e1 = np.exp(-sched.tr[m] / t1)
        mz = mz * np.cos(a) * e1 + cfg.m0 * (1.0 - e1)
    return out


def _simulate_epg(t1, t2, sched, cfg):
    # With a constant 90-degree RF phase and a real initial state every
    # configuration state stays real, so the graph is propagated in float64.
    # Layout is (order, tissue). Dephasing is implemented by moving the
    # origin of the F+ / F- buffers instead of copying: F+ order k lives at
    # fp[op + k] and F- order k at fm[om + k].
    n_tr = sched.m
    cap = n_tr if cfg.n_states is None else min(cfg.n_states, n_tr)
    k = t1.size
    fp = np.zeros((n_tr + cap + 1, k))
    fm = np.zeros((n_tr + cap + 1, k))
    z = np.zeros((cap, k))
    z[0] = _inversion_start(t1, sched, cfg.m0)
    op, om = n_tr, 0
    out = np.empty((k, n_tr), dtype=np.complex128)
    for m in range(n_tr):
        # orders above n_tr - 1 - m can no longer return to order 0
        top = min(m + 1, cap, n_tr - m)
        a = sched.flip_angles[m]
        ca, sa = np.cos(a), np.sin(a)
        p = fp[op:op + top]
        q = fm[om:om + top]
        w = z[:top]
        s = p + q
        d = p - q
        e2 = np.exp(-sched.tr[m] / t2)
        e1 = np.exp(-sched.tr[m] / t1)
        # RF rotation about +y written in the (F+ + F-, F+ - F-) basis
        base = 0.5 * ca * s + sa * w
        d *= 0.5
        out[:, m] = (base[0] + d[0]) * np.exp(-sched.te[m] / t2)
        np.add(base, d, out=p)
        p *= e2
        np.subtract(base, d, out=q)
        q *= e2
        w *= ca
        w -= 0.5 * sa * s
        w *= e1
        w[0] += cfg.m0 * (1.0 - e1)
        op -= 1
        om += 1
        fp[op] = fm[om]
    return out


def grid_pairs(t1_spec=DEFAULT_T1_SPEC, t2_spec=DEFAULT_T2_SPEC):
    """Retained (t1, t2) pairs, row-major (t1 outer, t2 inner), t2 <= t1."""
    t1v, t2v = t1_spec.values(), t2_spec.values()
    t1g, t2g = np.meshgrid(t1v, t2v, indexing="ij")
    keep = t2g <= t1g
    return t1g[keep], t2g[keep]


def build_dictionary(t1_spec, t2_spec, sched, sim_cfg=SimConfig(), normalize=True):
    t1, t2 = grid_pairs(t1_spec, t2_spec)
    if t1.size == 0:
        raise ConfigurationError("no (T1, T2) pair satisfies T2 <= T1")
    raw = simulate_many(t1, t2, sched, sim_cfg)
    norms = np.linalg.norm(raw, axis=1)
    atoms = _normalize_rows(raw, norms) if normalize else raw
    return Dictionary(atoms, t1, t2, bool(normalize), norms, sched.schedule_id,
                      sim_cfg.model, sim_cfg.n_states)


def _normalize_rows(raw, norms):
    safe = np.where(norms > 0, norms, 1.0)
    return raw / safe[:, None]


# --- file interfaces -------------------------------------------------------

def save_schedule(path, sched):
    with open(path, "w") as fh:
        fh.write(f"inversion_delay_ms {float(sched.inversion_delay)!r}\n")
        for a, tr, te in zip(np.rad2deg(sched.flip_angles), sched.tr, sched.te):
            fh.write(f"{float(a)!r} {float(tr)!r} {float(te)!r}\n")


def load_schedule(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0][0] != "inversion_delay_ms" or len(lines[0]) != 2:
        raise ValidationError(f"{path}: first line must be 'inversion_delay_ms <value>'")
    try:
        rows = np.array([[float(v) for v in ln] for ln in lines[1:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if rows.ndim != 2 or rows.shape[1] != 3:
        raise ValidationError(f"{path}: expected 'flip_deg tr_ms te_ms' per line")
    return AcquisitionSchedule(np.deg2rad(rows[:, 0]), rows[:, 1], rows[:, 2],
                               float(lines[0][1]))


def save_dictionary(path, d, extra_meta=None):
    meta = {"kind": "dictionary", "schedule_id": d.schedule_id, "sim_model": d.sim_model,
            "n_states": d.n_states, "normalized": d.normalized,
            "content_hash": d.content_hash()}
    meta.update(extra_meta or {})
    container.save(path, {"atoms": d.atoms, "t1_ms": d.t1, "t2_ms": d.t2, "norms": d.norms},
                   meta)


def load_dictionary(path):
    arrays, meta = container.load(path)
    for key in ("atoms", "t1_ms", "t2_ms"):
        if key not in arrays:
            raise ValidationError(f"{path}: missing array {key!r}")
    atoms = arrays["atoms"].astype(np.complex128)
    norms = arrays.get("norms", np.linalg.norm(atoms, axis=1))
    return Dictionary(atoms, arrays["t1_ms"], arrays["t2_ms"], bool(meta.get("normalized", False)),
                      norms, meta.get("schedule_id", ""), meta.get("sim_model", "epg"),
                      meta.get("n_states")), meta
