"""Variable-density spiral readout and per-timeframe Cartesian masks.

One spiral interleaf k(tau) = c * 1.05**(16*pi*tau/1000) * e^(i*16*pi*tau/1000)
(tau = 1..n_points) is quantized to the nearest FFT grid node; the pattern
rotates by 7.5 degrees every repetition, so masks repeat with period 48.

Grid convention: node (0, 0) is the image-center (DC) frequency; flat
indices are row-major over the centered N x N grid. Conversion to FFT
memory layout happens in the forward operator, not here.

The paper-style default normalization places the outermost sample at
radius grid_n/pi, calibrated so one frame quantizes to about 654 unique
nodes on the 128 grid (~4% sampling); pass `final_radius` to override.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .seqsim import ParameterError

log = logging.getLogger(__name__)

GROWTH_BASE = 1.05
SWEEP_TURNS = 8  # total angle 16*pi
DEFAULT_N_POINTS = 1000
DEFAULT_DELTA_DEG = 7.5


@dataclass
class SpiralTrajectory:
    points: np.ndarray = field(repr=False)  # (n_points, 2) continuous coords

    @property
    def n_points(self):
        return len(self.points)

    def radii(self):
        return np.hypot(self.points[:, 0], self.points[:, 1])


@dataclass
class SamplingMask:
    grid_n: int
    frames: list = field(repr=False)  # per-frame unique flat indices (int64)

    @property
    def m_per_frame(self):
        return [len(f) for f in self.frames]

    @property
    def L(self):
        return len(self.frames)


def gen_spiral(n_points=DEFAULT_N_POINTS, grid_n=128, final_radius=None):
    """Generate the spiral; `final_radius` defaults to grid_n/pi."""
    if n_points < 1:
        raise ParameterError("n_points must be >= 1")
    if grid_n < 4:
        raise ParameterError("grid_n must be >= 4")
    if final_radius is None:
        final_radius = grid_n / np.pi
    tau = np.arange(1, n_points + 1)
    theta = 2.0 * np.pi * SWEEP_TURNS * tau / DEFAULT_N_POINTS
    radius = GROWTH_BASE**theta
    radius *= final_radius / radius[-1]
    points = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return SpiralTrajectory(points=points)


def rotate_trajectory(traj, angle_deg):
    """Rotate every point about the origin (radii preserved)."""
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return SpiralTrajectory(points=traj.points @ rot.T)


def _round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(traj, grid_n):
    """Round points to the nearest grid node and return unique flat
    indices in first-occurrence order. Points rounding outside the grid
    are clamped to the boundary (logged)."""
    half = grid_n // 2
    ix = _round_half_away(traj.points[:, 0]).astype(np.int64)
    iy = _round_half_away(traj.points[:, 1]).astype(np.int64)
    lo, hi = -half, half - 1 if grid_n % 2 == 0 else half
    n_clamped = int(np.sum((ix < lo) | (ix > hi) | (iy < lo) | (iy > hi)))
    if n_clamped:
        log.warning("quantize: clamped %d points to the grid boundary", n_clamped)
        ix = np.clip(ix, lo, hi)
        iy = np.clip(iy, lo, hi)
    flat = (iy + half) * grid_n + (ix + half)
    # dedup preserving first occurrence
    _, first = np.unique(flat, return_index=True)
    return flat[np.sort(first)]


def build_masks(traj, L, delta_deg=DEFAULT_DELTA_DEG, grid_n=128):
    """Frame t samples quantize(rotate(traj, t*delta_deg)). Rotations that
    are congruent mod 360 degrees share index sets exactly."""
    if L < 1:
        raise ParameterError("L must be >= 1")
    period = None
    if delta_deg > 0 and (360.0 / delta_deg) == int(360.0 / delta_deg):
        period = int(360.0 / delta_deg)
    frames = []
    for t in range(L):
        if period is not None and t >= period:
            frames.append(frames[t % period])
            continue
        frames.append(quantize(rotate_trajectory(traj, t * delta_deg), grid_n))
    return SamplingMask(grid_n=grid_n, frames=frames)


def mask_union_fraction(mask):
    union = np.unique(np.concatenate(mask.frames))
    return len(union) / mask.grid_n**2
