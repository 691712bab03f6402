"""Dictionary-matching reconstruction: exhaustive search, fast group
matching (FGM), and the BLIP projected-gradient iteration.

Matching maximizes |<x_v, d_i>| / ||d_i|| over atoms d_i (complex voxel
signal against real atoms); PD is the winning score divided by the atom
energy. Voxels whose PD falls below 1% of the slice maximum are marked
background.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import TSMI, apply_H, data_fidelity, gradient_step
from .phantom import QMaps
from .seqsim import ParameterError

log = logging.getLogger(__name__)

PD_BACKGROUND_FRAC = 0.01
MATCH_CHUNK = 256  # voxels per score-matrix block

DEFAULT_N_GROUPS = 100
DEFAULT_KEEP_FRACTION = 0.1

BLIP_MAX_ITER = 20
BLIP_MAX_HALVINGS = 8
BLIP_REL_TOL = 1e-4


def _as_voxels(x):
    if isinstance(x, TSMI):
        x = x.data
    n = x.shape[0]
    return x.reshape(-1, x.shape[-1]), n


def _apply_background(t1, t2, pd, shape):
    pd_img = pd.reshape(shape)
    fg = pd_img >= PD_BACKGROUND_FRAC * max(pd_img.max(), 1e-300)
    pd_img = np.where(fg, pd_img, 0.0)
    return QMaps(t1.reshape(shape), t2.reshape(shape), pd_img, fg)


def _projection_tsmi(idx, coef, maps, cdict, n):
    """coef_v * atom_v: the per-voxel projection onto the matched atom's
    complex span (keeps the phase that the PD magnitude discards)."""
    x = cdict.atoms_c[idx] * coef[:, None]
    x = x.reshape(n, n, cdict.s)
    x[~maps.foreground_mask] = 0.0
    return TSMI(x)


def _best_match(vox, atoms_c, norms, counter=None):
    """argmax_i |<x_v, d_i>|/||d_i|| per voxel, chunked.

    Returns (idx, pd, coef): pd = |<x, d>|/||d||^2 >= 0 for the maps, and
    coef = <d, x>/||d||^2, the complex projection coefficient whose phase
    BLIP needs to keep its iterate a true projection.
    """
    d = atoms_c.shape[0]
    nv = vox.shape[0]
    best_idx = np.zeros(nv, dtype=np.int64)
    best_score = np.zeros(nv)
    coef = np.zeros(nv, dtype=complex)
    inv = 1.0 / norms
    re, im = np.ascontiguousarray(vox.real), np.ascontiguousarray(vox.imag)
    at = atoms_c.T
    for lo in range(0, nv, MATCH_CHUNK):
        hi = min(lo + MATCH_CHUNK, nv)
        cre = re[lo:hi] @ at
        cim = im[lo:hi] @ at
        sc = cre**2
        sc += cim**2
        sc *= inv**2
        idx = np.argmax(sc, axis=1)
        rows = np.arange(hi - lo)
        best_idx[lo:hi] = idx
        best_score[lo:hi] = np.sqrt(sc[rows, idx])
        coef[lo:hi] = (cre[rows, idx] + 1j * cim[rows, idx]) * inv[idx] ** 2
    if counter is not None:
        counter["evals"] = counter.get("evals", 0) + nv * d
    pd = best_score / norms[best_idx]
    return best_idx, pd, coef


def dm_match(x, cdict, counter=None, _with_projection=False):
    """Exhaustive per-voxel matching over the whole dictionary."""
    if cdict.atoms_c.shape[0] == 0:
        raise ParameterError("empty dictionary")
    vox, n = _as_voxels(x)
    if vox.shape[1] != cdict.s:
        raise ParameterError(f"TSMI has {vox.shape[1]} channels, dictionary {cdict.s}")
    idx, pd, coef = _best_match(vox, cdict.atoms_c, cdict.atom_c_norms, counter)
    entries = cdict.grid.entries
    maps = _apply_background(entries[idx, 0], entries[idx, 1], pd, (n, n))
    if _with_projection:
        return maps, _projection_tsmi(idx, coef, maps, cdict, n)
    return maps


@dataclass
class FGMIndex:
    centroids: np.ndarray = field(repr=False)  # (n_groups, s) unit-norm
    assignment: np.ndarray = field(repr=False)  # atom -> group
    group_members: list = field(repr=False)

    @property
    def n_groups(self):
        return len(self.centroids)


def build_fgm_index(cdict, n_groups=DEFAULT_N_GROUPS, rng_seed=0, max_iter=50):
    """K-means over unit-normalized atoms (cosine geometry), seeded
    k-means++ initialization, fixed iteration cap."""
    if n_groups < 1:
        raise ParameterError("n_groups must be >= 1")
    d = cdict.atoms_c.shape[0]
    if n_groups > d:
        raise ParameterError(f"n_groups={n_groups} exceeds atom count {d}")
    rng = np.random.default_rng(rng_seed)
    units = cdict.atoms_c / np.maximum(cdict.atom_c_norms, 1e-300)[:, None]

    # k-means++ seeding on the unit sphere
    centroids = np.empty((n_groups, units.shape[1]))
    centroids[0] = units[rng.integers(d)]
    d2 = np.sum((units - centroids[0]) ** 2, axis=1)
    for k in range(1, n_groups):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(d, 1.0 / d)
        centroids[k] = units[rng.choice(d, p=p)]
        d2 = np.minimum(d2, np.sum((units - centroids[k]) ** 2, axis=1))

    assignment = np.zeros(d, dtype=np.int64)
    for _ in range(max_iter):
        sims = units @ centroids.T
        new_assignment = np.argmax(sims, axis=1)
        if np.array_equal(new_assignment, assignment) and _ > 0:
            break
        assignment = new_assignment
        for k in range(n_groups):
            members = assignment == k
            if not members.any():  # re-seed empty clusters deterministically
                centroids[k] = units[rng.integers(d)]
                continue
            c = units[members].mean(axis=0)
            nc = np.linalg.norm(c)
            centroids[k] = c / nc if nc > 0 else c
    group_members = [np.flatnonzero(assignment == k) for k in range(n_groups)]
    return FGMIndex(
        centroids=centroids, assignment=assignment, group_members=group_members
    )


def fgm_match(x, index, cdict, keep_fraction=DEFAULT_KEEP_FRACTION, counter=None,
              _with_projection=False):
    """Two-stage search: rank groups by centroid correlation, keep the top
    ceil(keep_fraction * n_groups), match exhaustively inside them."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError("keep_fraction must be in (0, 1]")
    vox, n = _as_voxels(x)
    if vox.shape[1] != cdict.s:
        raise ParameterError(f"TSMI has {vox.shape[1]} channels, dictionary {cdict.s}")
    g = index.n_groups
    keep = int(np.ceil(keep_fraction * g))
    if keep >= g:
        return dm_match(x, cdict, counter, _with_projection)

    ct = index.centroids.T
    scores = (vox.real @ ct) ** 2 + (vox.imag @ ct) ** 2  # (nv, g)
    if counter is not None:
        counter["evals"] = counter.get("evals", 0) + vox.shape[0] * g
    top = np.argpartition(-scores, keep - 1, axis=1)[:, :keep]

    nv = vox.shape[0]
    best_idx = np.zeros(nv, dtype=np.int64)
    best_score = np.full(nv, -1.0)
    best_coef = np.zeros(nv, dtype=complex)
    inv = 1.0 / cdict.atom_c_norms
    # iterate groups; each processes the voxels that kept it
    vox_of_group = [[] for _ in range(g)]
    rows, cols = np.nonzero(top >= 0)
    for r, k in zip(rows, top.ravel()):
        vox_of_group[k].append(r)
    for k in range(g):
        vids = np.asarray(vox_of_group[k], dtype=np.int64)
        members = index.group_members[k]
        if len(vids) == 0 or len(members) == 0:
            continue
        sub = vox[vids]
        at = cdict.atoms_c[members].T
        cre = sub.real @ at
        cim = sub.imag @ at
        sc = cre**2 + cim**2
        sc *= inv[members] ** 2
        if counter is not None:
            counter["evals"] = counter.get("evals", 0) + len(vids) * len(members)
        j = np.argmax(sc, axis=1)
        rows_k = np.arange(len(vids))
        s = np.sqrt(sc[rows_k, j])
        better = s > best_score[vids]
        upd = vids[better]
        win = members[j[better]]
        best_idx[upd] = win
        best_score[upd] = s[better]
        best_coef[upd] = (cre[rows_k, j][better] + 1j * cim[rows_k, j][better]) * inv[win] ** 2
    pd = best_score / cdict.atom_c_norms[best_idx]
    entries = cdict.grid.entries
    maps = _apply_background(entries[best_idx, 0], entries[best_idx, 1], pd, (n, n))
    if _with_projection:
        return maps, _projection_tsmi(best_idx, best_coef, maps, cdict, n)
    return maps


def qmaps_to_tsmi(qmaps, cdict):
    """Per voxel PD * compressed atom of the voxel's grid entry."""
    grid = cdict.grid
    n = qmaps.grid_n
    x = np.zeros((n, n, cdict.s), dtype=complex)
    fg = qmaps.foreground_mask
    if not fg.any():
        return TSMI(x)
    t1, t2 = qmaps.t1_ms[fg], qmaps.t2_ms[fg]
    idx = grid.nearest_index(t1, t2)
    entries = grid.entries
    off = np.max(np.abs(entries[idx, 0] - t1)) + np.max(np.abs(entries[idx, 1] - t2))
    if off > 1e-9:
        log.warning("qmaps_to_tsmi: off-grid values snapped to nearest entry")
    x[fg] = cdict.atoms_c[idx] * qmaps.pd[fg][:, None]
    return TSMI(x)


def blip(
    y,
    model,
    cdict,
    max_iter=BLIP_MAX_ITER,
    alpha0=1.0,
    fgm_index=None,
    keep_fraction=DEFAULT_KEEP_FRACTION,
    counter=None,
):
    """BLIP: alternate a gradient step with dictionary projection.

    The iterate keeps the complex projection coefficient per voxel (the
    reported PD map is its magnitude); projecting through the
    nonnegative PD alone would flip aliased voxels and break descent.
    Backtracking halves alpha (up to BLIP_MAX_HALVINGS) until the data
    fidelity does not increase; if no halving helps, the candidate is
    rejected and iteration stops, keeping the objective trace monotone.
    Early exit when the relative objective change drops below 1e-4.
    Returns (QMaps, TSMI, trace).
    """

    def project(g):
        if fgm_index is not None:
            return fgm_match(g, fgm_index, cdict, keep_fraction, counter,
                             _with_projection=True)
        return dm_match(g, cdict, counter, _with_projection=True)

    x = TSMI(np.zeros((model.grid_n, model.grid_n, model.s), dtype=complex))
    maps = None
    alpha = float(alpha0)
    obj = data_fidelity(y, x, model)
    trace = [{"iter": 0, "alpha": alpha, "objective": obj}]
    for it in range(1, max_iter + 1):
        accepted = False
        for _ in range(BLIP_MAX_HALVINGS + 1):
            g = gradient_step(x, y, alpha, model)
            cand_maps, cand_x = project(g)
            cand_obj = data_fidelity(y, cand_x, model)
            if cand_obj <= obj:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            log.info("blip: backtracking exhausted at iter %d, stopping", it)
            break
        x, maps = cand_x, cand_maps
        rel = abs(obj - cand_obj) / max(obj, 1e-300)
        obj = cand_obj
        trace.append({"iter": it, "alpha": alpha, "objective": obj})
        if rel < BLIP_REL_TOL:
            break
    if maps is None:  # no step ever accepted: match the zero image
        maps = project(x)[0]
    return maps, x, trace
