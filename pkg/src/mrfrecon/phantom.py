"""Procedural quantitative phantoms and training-set assembly.

Ellipse-based brain-like slices stand in for gold-standard anatomical
maps: each ellipse carries one tissue class whose nominal (T1, T2, PD)
receives a per-instance jitter, so a slice holds a handful of distinct
tissue values. Augmentation rotates/flips the maps with nearest-neighbor
resampling (quantitative values must never blend across boundaries).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dictionary import make_grid
from .forward import TSMI, add_noise, apply_H
from .seqsim import ParameterError, epg_simulate_batch

# class -> (T1 ms, T2 ms, PD); synthetic stand-ins inside the grid hull
TISSUE_TABLE = {
    "wm": (800.0, 80.0, 0.75),
    "gm": (1300.0, 110.0, 0.85),
    "csf": (3500.0, 500.0, 1.0),
    "skull": (300.0, 40.0, 0.3),
}
JITTER_FRAC = 0.05

T1_HULL = (100.0, 4000.0)
T2_HULL = (20.0, 600.0)


@dataclass
class Ellipse:
    center: tuple  # (row, col) in [0, 1] fractions of the grid
    axes: tuple  # (semi_r, semi_c) fractions
    angle_deg: float
    tissue_class: str


@dataclass
class PhantomSpec:
    grid_n: int
    ellipses: list
    tissue_table: dict = field(default_factory=lambda: dict(TISSUE_TABLE))
    jitter_frac: float = JITTER_FRAC
    seed: int = 0


@dataclass
class QMaps:
    """Per-voxel T1/T2 (ms), PD (a.u.), and the foreground mask."""

    t1_ms: np.ndarray = field(repr=False)
    t2_ms: np.ndarray = field(repr=False)
    pd: np.ndarray = field(repr=False)
    foreground_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.foreground_mask is None:
            self.foreground_mask = self.pd > 0
        self.foreground_mask = np.asarray(self.foreground_mask, dtype=bool)

    @property
    def grid_n(self):
        return self.t1_ms.shape[0]

    def copy(self):
        return QMaps(
            self.t1_ms.copy(),
            self.t2_ms.copy(),
            self.pd.copy(),
            self.foreground_mask.copy(),
        )


def default_head_spec(grid_n=64, seed=0):
    """A skull rim, a brain fill, a few WM lobes, and two CSF ventricles."""
    rng = np.random.default_rng(seed)
    j = lambda lo, hi: float(rng.uniform(lo, hi))
    ellipses = [
        Ellipse((0.5, 0.5), (0.44, 0.38), j(-10, 10), "skull"),
        Ellipse((0.5, 0.5), (0.39, 0.33), j(-10, 10), "gm"),
        Ellipse((j(0.32, 0.4), j(0.34, 0.42)), (0.16, 0.11), j(-30, 30), "wm"),
        Ellipse((j(0.32, 0.4), j(0.58, 0.66)), (0.16, 0.11), j(-30, 30), "wm"),
        Ellipse((j(0.62, 0.7), 0.5), (0.12, 0.17), j(-20, 20), "wm"),
        Ellipse((j(0.42, 0.48), j(0.41, 0.45)), (0.09, 0.035), j(-15, 15), "csf"),
        Ellipse((j(0.42, 0.48), j(0.55, 0.59)), (0.09, 0.035), j(-15, 15), "csf"),
    ]
    return PhantomSpec(grid_n=grid_n, ellipses=ellipses, seed=seed)


def _clamp_to_hull(t1, t2):
    return (
        float(np.clip(t1, *T1_HULL)),
        float(np.clip(t2, *T2_HULL)),
    )


def gen_phantom(spec):
    """Rasterize ellipses back-to-front into QMaps (background PD = 0)."""
    n = spec.grid_n
    t1 = np.zeros((n, n))
    t2 = np.zeros((n, n))
    pd = np.zeros((n, n))
    rng = np.random.default_rng(spec.seed)
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for e in spec.ellipses:
        if e.tissue_class not in spec.tissue_table:
            raise ParameterError(f"unknown tissue class {e.tissue_class!r}")
        nom_t1, nom_t2, nom_pd = spec.tissue_table[e.tissue_class]
        jit = 1.0 + spec.jitter_frac * rng.uniform(-1.0, 1.0, size=3)
        v_t1, v_t2 = _clamp_to_hull(nom_t1 * jit[0], nom_t2 * jit[1])
        v_pd = float(np.clip(nom_pd * jit[2], 0.0, 1.0))
        a = np.deg2rad(e.angle_deg)
        dr = (rr - e.center[0] * n) / n
        dc = (cc - e.center[1] * n) / n
        u = np.cos(a) * dr + np.sin(a) * dc
        v = -np.sin(a) * dr + np.cos(a) * dc
        inside = (u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0
        t1[inside], t2[inside], pd[inside] = v_t1, v_t2, v_pd
    return QMaps(t1, t2, pd)


def snap_to_grid(qmaps, grid):
    """Replace foreground (T1, T2) with the nearest grid entry values."""
    out = qmaps.copy()
    fg = out.foreground_mask
    idx = grid.nearest_index(out.t1_ms[fg], out.t2_ms[fg])
    entries = grid.entries
    out.t1_ms[fg] = entries[idx, 0]
    out.t2_ms[fg] = entries[idx, 1]
    return out


def augment(qmaps, rng):
    """Random rotation (uniform in [-8, 8] deg, nearest-neighbor) plus an
    optional left-right flip, applied jointly to all maps and the mask."""
    angle = float(rng.uniform(-8.0, 8.0))
    flip = bool(rng.integers(0, 2))

    def tx(a, order=0):
        out = ndimage.rotate(a, angle, reshape=False, order=order, mode="constant")
        return out[:, ::-1] if flip else out

    t1 = tx(qmaps.t1_ms)
    t2 = tx(qmaps.t2_ms)
    pd = tx(qmaps.pd)
    fg = tx(qmaps.foreground_mask.astype(np.uint8)).astype(bool)
    return QMaps(t1, t2, pd, fg)


def simulate_tsmi(qmaps, seq, subspace):
    """Ground-truth compressed TSMI: per voxel PD * (V^T fingerprint).

    Fingerprints are simulated once per distinct (T1, T2) value in the
    slice (phantoms carry a handful of tissues), then broadcast.
    """
    n = qmaps.grid_n
    s = subspace.V.shape[1]
    x = np.zeros((n, n, s), dtype=complex)
    fg = qmaps.foreground_mask & (qmaps.pd > 0)
    if not fg.any():
        return TSMI(x)
    pairs = np.stack([qmaps.t1_ms[fg], qmaps.t2_ms[fg]], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    fps = epg_simulate_batch(seq, uniq[:, 0], uniq[:, 1])  # (u, L)
    comp = fps @ subspace.V  # (u, s)
    x[fg] = comp[inverse] * qmaps.pd[fg][:, None]
    return TSMI(x)


@dataclass
class NormalizationSpec:
    """Map values <-> [0, 1] channels (T1/t1_max, T2/t2_max, PD/pd_max)."""

    t1_max: float = 4000.0
    t2_max: float = 600.0
    pd_max: float = 1.0

    def normalize(self, qmaps):
        return np.stack(
            [
                qmaps.t1_ms / self.t1_max,
                qmaps.t2_ms / self.t2_max,
                qmaps.pd / self.pd_max,
            ]
        )

    def denormalize(self, m, foreground_from_pd=True, pd_threshold=0.01):
        t1 = m[0] * self.t1_max
        t2 = m[1] * self.t2_max
        pd = m[2] * self.pd_max
        if foreground_from_pd:
            fg = pd >= pd_threshold * max(pd.max(), 1e-30)
            pd = np.where(fg, pd, 0.0)
        else:
            fg = pd > 0
        return QMaps(t1, t2, pd, fg)


@dataclass
class TrainSample:
    y: object  # KSpaceData (noisy measurement)
    x_target: object  # TSMI (ground-truth fingerprints, not decoder output)
    m_target: np.ndarray = field(repr=False)  # (3, N, N) normalized maps
    seed: int = 0
    y_clean: object = None  # noiseless measurement, for per-epoch noise redraw


def make_dataset(
    model,
    seq,
    subspace,
    n_subjects=8,
    slices_per_subject=16,
    augment_factor=2,
    noise_snr_db=30.0,
    seed=1234,
    norm=None,
):
    """Simulate (y, x_target, m_target) tuples.

    The last subject is held out for testing (no augmentation); training
    slices are replicated `augment_factor`x (original + augmented copies).
    Defaults give 7*16*2 = 224 training and 16 test samples.
    """
    norm = norm or NormalizationSpec()
    train, test = [], []
    rng_master = np.random.default_rng(seed)
    for subject in range(n_subjects):
        is_test = subject == n_subjects - 1
        # disjoint seed streams per subject (test never mixes with train)
        sub_seed = seed + 10_000 * (subject + 1)
        rng = np.random.default_rng(sub_seed)
        for sl in range(slices_per_subject):
            base = gen_phantom(default_head_spec(model.grid_n, seed=sub_seed + sl))
            variants = [base]
            if not is_test:
                for _ in range(augment_factor - 1):
                    variants.append(augment(base, rng))
            for qm in variants:
                x = simulate_tsmi(qm, seq, subspace)
                y_clean = apply_H(x, model)
                sample_seed = int(rng_master.integers(0, 2**31 - 1))
                y = add_noise(y_clean, noise_snr_db, rng_seed=sample_seed)
                sample = TrainSample(
                    y=y,
                    x_target=x,
                    m_target=norm.normalize(qm),
                    seed=sample_seed,
                    y_clean=y_clean,
                )
                (test if is_test else train).append(sample)
    return train, test


def dataset_grid_hull_check(samples, grid=None):
    """All foreground tissue values inside the dictionary hull."""
    grid = grid or make_grid()
    lo1, hi1 = grid.t1_values[0], grid.t1_values[-1]
    lo2, hi2 = grid.t2_values[0], grid.t2_values[-1]
    for s in samples:
        t1 = s.m_target[0] * 4000.0
        t2 = s.m_target[1] * 600.0
        fg = s.m_target[2] > 0
        if fg.any() and (
            t1[fg].min() < lo1 - 1e-6
            or t1[fg].max() > hi1 + 1e-6
            or t2[fg].min() < lo2 - 1e-6
            or t2[fg].max() > hi2 + 1e-6
        ):
            return False
    return True
