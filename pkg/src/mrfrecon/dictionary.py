"""MRF dictionary construction and rank-s subspace compression.

The dictionary is the matrix of fingerprints simulated over a dense
(T1, T2) grid; its leading right singular vectors define the temporal
subspace used to compress both atoms and measurements. The SVD is taken
on the raw (un-centered) atoms so that the subspace composes linearly
with the acquisition operator.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .seqsim import ParameterError, epg_simulate_batch

DEFAULT_T1_SPEC = (100.0, 10.0, 4000.0)
DEFAULT_T2_SPEC = (20.0, 2.0, 600.0)
DEFAULT_SUBSPACE_DIM = 10


def _inclusive_range(start, step, stop):
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    if start > stop:
        raise ParameterError(f"empty range: start {start} > stop {stop}")
    n = int(np.floor((stop - start) / step + 0.5)) + 1
    vals = start + step * np.arange(n)
    return vals[vals <= stop + 1e-9]


@dataclass
class TissueGrid:
    t1_values: np.ndarray
    t2_values: np.ndarray

    def __post_init__(self):
        self.t1_values = np.asarray(self.t1_values, dtype=float)
        self.t2_values = np.asarray(self.t2_values, dtype=float)
        for v, name in ((self.t1_values, "t1"), (self.t2_values, "t2")):
            if v.size == 0:
                raise ParameterError(f"empty {name} range")
            if np.any(np.diff(v) <= 0):
                raise ParameterError(f"{name} values must be ascending")

    @property
    def entries(self):
        """All (T1, T2) pairs, row-major: T1 outer, T2 inner."""
        t1 = np.repeat(self.t1_values, len(self.t2_values))
        t2 = np.tile(self.t2_values, len(self.t1_values))
        return np.stack([t1, t2], axis=1)

    def __len__(self):
        return len(self.t1_values) * len(self.t2_values)

    def nearest_index(self, t1, t2):
        """Nearest grid entry index for (arrays of) T1/T2 values in ms."""
        i1 = np.clip(
            np.searchsorted(self.t1_values, np.asarray(t1) - 1e-9),
            0,
            len(self.t1_values) - 1,
        )
        lo = np.clip(i1 - 1, 0, None)
        i1 = np.where(
            np.abs(self.t1_values[lo] - t1) < np.abs(self.t1_values[i1] - t1), lo, i1
        )
        i2 = np.clip(
            np.searchsorted(self.t2_values, np.asarray(t2) - 1e-9),
            0,
            len(self.t2_values) - 1,
        )
        lo = np.clip(i2 - 1, 0, None)
        i2 = np.where(
            np.abs(self.t2_values[lo] - t2) < np.abs(self.t2_values[i2] - t2), lo, i2
        )
        return i1 * len(self.t2_values) + i2

    def spec(self):
        return {
            "t1": [float(self.t1_values[0]), float(self.t1_values[-1])],
            "t2": [float(self.t2_values[0]), float(self.t2_values[-1])],
            "n_t1": len(self.t1_values),
            "n_t2": len(self.t2_values),
        }


@dataclass
class Dictionary:
    atoms: np.ndarray = field(repr=False)  # (d, L) real fingerprints
    grid: TissueGrid = None
    atom_norms: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.atom_norms is None:
            self.atom_norms = np.linalg.norm(self.atoms, axis=1)


@dataclass
class Subspace:
    V: np.ndarray = field(repr=False)  # (L, s), orthonormal columns
    singular_values: np.ndarray = field(repr=False)

    @property
    def s(self):
        return self.V.shape[1]


@dataclass
class CompressedDictionary:
    atoms_c: np.ndarray = field(repr=False)  # (d, s) = atoms @ V
    grid: TissueGrid = None
    atom_c_norms: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.atom_c_norms is None:
            self.atom_c_norms = np.linalg.norm(self.atoms_c, axis=1)

    @property
    def s(self):
        return self.atoms_c.shape[1]


def make_grid(t1_spec=DEFAULT_T1_SPEC, t2_spec=DEFAULT_T2_SPEC):
    """Build the Cartesian (T1, T2) grid from (start, step, stop) specs."""
    return TissueGrid(
        _inclusive_range(*map(float, t1_spec)), _inclusive_range(*map(float, t2_spec))
    )


def decimated_grid(factor=4):
    """Default grid with every `factor`-th value per axis (desk scale)."""
    full = make_grid()
    return TissueGrid(full.t1_values[::factor], full.t2_values[::factor])


def simulate_dictionary(grid, seq, batch=8192):
    """Simulate one fingerprint per grid entry (row i <-> entries[i])."""
    entries = grid.entries
    d = len(entries)
    atoms = np.empty((d, seq.L))
    with warnings.catch_warnings():
        # the default grid is deliberately unpruned, so T2 > T1 pairs occur
        warnings.filterwarnings("ignore", message="t2 > t1")
        for lo in range(0, d, batch):
            hi = min(lo + batch, d)
            atoms[lo:hi] = epg_simulate_batch(seq, entries[lo:hi, 0], entries[lo:hi, 1])
    return Dictionary(atoms=atoms, grid=grid)


def compute_subspace(dictionary, s=DEFAULT_SUBSPACE_DIM):
    """Rank-s subspace of the atoms: leading right singular vectors.

    Computed from the L x L Gram matrix (no mean-centering), which is
    deterministic and avoids materializing the left factor.
    """
    atoms = dictionary.atoms
    d, L = atoms.shape
    if not 1 <= s <= min(d, L):
        raise ParameterError(f"s={s} out of range [1, {min(d, L)}]")
    gram = atoms.T @ atoms
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    V = evecs[:, order[:s]]
    return Subspace(V=np.ascontiguousarray(V), singular_values=np.sqrt(evals[:s]))


def subspace_energy_fractions(dictionary, s_max):
    """Relative Frobenius reconstruction error of the rank-s projection
    for s = 1..s_max, derived from the Gram spectrum."""
    gram = dictionary.atoms.T @ dictionary.atoms
    evals = np.clip(np.sort(np.linalg.eigvalsh(gram))[::-1], 0.0, None)
    total = evals.sum()
    kept = np.cumsum(evals[:s_max])
    return np.sqrt(np.maximum(1.0 - kept / total, 0.0))


def compress(dictionary, subspace):
    """Project atoms onto the subspace: atoms_c = atoms @ V."""
    if subspace.V.shape[0] != dictionary.atoms.shape[1]:
        raise ParameterError(
            f"subspace has {subspace.V.shape[0]} rows, "
            f"dictionary length is {dictionary.atoms.shape[1]}"
        )
    atoms_c = dictionary.atoms @ subspace.V
    return CompressedDictionary(atoms_c=atoms_c, grid=dictionary.grid)
