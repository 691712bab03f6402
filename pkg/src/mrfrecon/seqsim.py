"""Gradient-spoiled (FISP-type) MRF sequence simulation.

Two independent simulators of the per-voxel transverse response:

* :func:`epg_simulate` - extended phase graph recursion over (F+, F-, Z)
  configuration states, the production path used to build dictionaries.
* :func:`isochromat_oracle` - brute-force ensemble of magnetization vectors
  with uniformly spread intra-voxel dephasing, kept as a validation oracle.

All RF pulses share one fixed phase (rotations about +y), which keeps the
EPG states real; the recorded signal is the F0 state at the echo time and
carries sign (it is not a magnitude).
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

EPG_MAX_ORDERS = 64  # dephasing orders retained; past float precision for L=200


class ParameterError(ValueError):
    pass


def _linear_ramp(start, end, n):
    if n == 1:
        return np.array([float(start)])
    return start + (end - start) * np.arange(n) / (n - 1)


@dataclass
class SequenceParams:
    """Excitation sequence: L repetitions with per-repetition flip angles."""

    L: int = 200
    flip_deg: np.ndarray = None
    tr_ms: float = 10.0
    te_ms: float = 0.46
    tinv_ms: float = 18.0
    inversion: bool = True

    def __post_init__(self):
        if self.flip_deg is None:
            self.flip_deg = _linear_ramp(1.0, 40.0, self.L)
        self.flip_deg = np.asarray(self.flip_deg, dtype=float)
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        if len(self.flip_deg) != self.L:
            raise ParameterError(
                f"flip_deg has length {len(self.flip_deg)}, expected L={self.L}"
            )
        if np.any(self.flip_deg < 0.0) or np.any(self.flip_deg > 180.0):
            raise ParameterError("flip angles must lie in [0, 180] degrees")
        if self.te_ms < 0 or self.tr_ms <= self.te_ms:
            raise ParameterError("require tr_ms > te_ms >= 0")
        if self.tinv_ms < 0:
            raise ParameterError("tinv_ms must be >= 0")


@dataclass
class Fingerprint:
    """Real-valued transverse signal at each echo time (sign-carrying)."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self):
        return len(self.values)


def build_sequence(config=None):
    """Build the default sequence (L=200, flips ramping 1..40 deg, TR=10,
    TE=0.46, Tinv=18, inversion on), with optional overrides.

    `config` accepts the keys {L, flip_start_deg, flip_end_deg, flip_deg,
    tr_ms, te_ms, tinv_ms, inversion}.
    """
    cfg = dict(config or {})
    L = int(cfg.pop("L", 200))
    if L < 1:
        raise ParameterError(f"L must be >= 1, got {L}")
    start = float(cfg.pop("flip_start_deg", 1.0))
    end = float(cfg.pop("flip_end_deg", 40.0))
    flips = cfg.pop("flip_deg", None)
    if flips is None:
        flips = _linear_ramp(start, end, L)
    params = dict(
        tr_ms=float(cfg.pop("tr_ms", 10.0)),
        te_ms=float(cfg.pop("te_ms", 0.46)),
        tinv_ms=float(cfg.pop("tinv_ms", 18.0)),
        inversion=bool(cfg.pop("inversion", True)),
    )
    if cfg:
        raise ParameterError(f"unknown sequence keys: {sorted(cfg)}")
    return SequenceParams(L=L, flip_deg=flips, **params)


def sequence_from_json(path_or_str):
    """Load a sequence from a JSON document (path or literal string)."""
    s = str(path_or_str)
    if s.lstrip().startswith("{"):
        cfg = json.loads(s)
    else:
        with open(s) as f:
            cfg = json.load(f)
    return build_sequence(cfg)


def sequence_to_config(seq):
    cfg = {
        "L": int(seq.L),
        "flip_start_deg": float(seq.flip_deg[0]),
        "flip_end_deg": float(seq.flip_deg[-1]),
        "tr_ms": seq.tr_ms,
        "te_ms": seq.te_ms,
        "tinv_ms": seq.tinv_ms,
        "inversion": seq.inversion,
    }
    return cfg


def _check_relaxation(t1_ms, t2_ms):
    t1 = np.atleast_1d(np.asarray(t1_ms, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2_ms, dtype=float))
    if t1.shape != t2.shape:
        raise ParameterError("t1_ms and t2_ms must have matching shapes")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ParameterError("relaxation times must be positive")
    if np.any(t2 > t1):
        warnings.warn("t2 > t1 is unphysical; simulating anyway", stacklevel=3)
    return t1, t2


def epg_simulate_batch(seq, t1_ms, t2_ms):
    """EPG recursion for a batch of (T1, T2) pairs; returns (batch, L).

    Per repetition: RF rotation about +y by the flip angle, relaxation to
    TE (recording F0), relaxation over TR-TE, then a unit gradient shift
    of the F states (ideal spoiler). Dephasing orders beyond
    EPG_MAX_ORDERS are discarded.
    """
    t1, t2 = _check_relaxation(t1_ms, t2_ms)
    b = t1.size
    L = seq.L
    K = max(2, min(L, EPG_MAX_ORDERS))

    # states[c, k, i]: c in (F+, F-, Z), dephasing order k, batch element i
    states = np.zeros((3, K, b))
    states[2, 0, :] = 1.0
    if seq.inversion:
        e1 = np.exp(-seq.tinv_ms / t1)
        states[2, 0, :] = 1.0 + (-1.0 - 1.0) * e1

    e2_te = np.exp(-seq.te_ms / t2)
    e1_te = np.exp(-seq.te_ms / t1)
    rem = seq.tr_ms - seq.te_ms
    e2_rem = np.exp(-rem / t2)
    e1_rem = np.exp(-rem / t1)

    signal = np.zeros((b, L))
    alphas = np.deg2rad(seq.flip_deg)
    flat = states.reshape(3, K * b)
    scratch = np.empty_like(flat)
    for i, a in enumerate(alphas):
        ca2 = np.cos(a / 2.0) ** 2
        sa2 = np.sin(a / 2.0) ** 2
        ca = np.cos(a)
        sa = np.sin(a)
        # constant-phase rotation (about +y); states stay real
        rot = np.array(
            [
                [ca2, -sa2, sa],
                [-sa2, ca2, sa],
                [-0.5 * sa, -0.5 * sa, ca],
            ]
        )
        np.matmul(rot, flat, out=scratch)
        flat, scratch = scratch, flat
        states = flat.reshape(3, K, b)
        # relax to echo, record F0
        states[0] *= e2_te
        states[1] *= e2_te
        states[2] *= e1_te
        states[2, 0, :] += 1.0 - e1_te
        signal[:, i] = states[0, 0, :]
        # relax over the remainder of TR
        states[0] *= e2_rem
        states[1] *= e2_rem
        states[2] *= e1_rem
        states[2, 0, :] += 1.0 - e1_rem
        # spoiler: shift F+ up, F- down; lowest F+ refills from F-
        states[0, 1:, :] = states[0, :-1, :]
        states[1, :-1, :] = states[1, 1:, :]
        states[1, -1, :] = 0.0
        states[0, 0, :] = states[1, 0, :]
    return signal


def epg_simulate(seq, t1_ms, t2_ms):
    """Simulate one fingerprint with the EPG recursion."""
    return Fingerprint(epg_simulate_batch(seq, [t1_ms], [t2_ms])[0])


def isochromat_oracle(seq, t1_ms, t2_ms, n_spins=2000):
    """Brute-force ensemble simulation, the validation oracle for EPG.

    n_spins magnetization vectors with dephasing angles uniformly spread
    over [0, 2pi) accumulate one full spoiler cycle per TR. Full 3x1
    rotation/relaxation per spin; the recorded value is the ensemble mean
    of Mx at TE (My averages to zero by symmetry and is discarded).
    """
    if n_spins < 100:
        raise ParameterError("n_spins must be >= 100")
    t1, t2 = _check_relaxation(t1_ms, t2_ms)
    t1, t2 = float(t1[0]), float(t2[0])

    phase = 2.0 * np.pi * (np.arange(n_spins) + 0.5) / n_spins
    cph, sph = np.cos(phase), np.sin(phase)
    mx = np.zeros(n_spins)
    my = np.zeros(n_spins)
    mz = np.ones(n_spins)
    if seq.inversion:
        mz = 1.0 + (-mz - 1.0) * np.exp(-seq.tinv_ms / t1)

    e2_te = np.exp(-seq.te_ms / t2)
    e1_te = np.exp(-seq.te_ms / t1)
    rem = seq.tr_ms - seq.te_ms
    e2_rem = np.exp(-rem / t2)
    e1_rem = np.exp(-rem / t1)

    signal = np.zeros(seq.L)
    for i, a in enumerate(np.deg2rad(seq.flip_deg)):
        ca, sa = np.cos(a), np.sin(a)
        mx, mz = ca * mx + sa * mz, -sa * mx + ca * mz
        mx *= e2_te
        my *= e2_te
        mz = 1.0 + (mz - 1.0) * e1_te
        signal[i] = mx.mean()
        mx *= e2_rem
        my *= e2_rem
        mz = 1.0 + (mz - 1.0) * e1_rem
        mx, my = cph * mx - sph * my, sph * mx + cph * my
    return Fingerprint(signal)
