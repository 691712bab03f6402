"""Evaluation metrics: NRMSE, MAE, SSIM, and report assembly.

T1/T2 metrics are computed over the foreground mask (air carries no
relaxation information); PD metrics over the full slice. Every report
records that masking choice.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricError(ValueError):
    pass


def _masked(est, gt, mask):
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise MetricError(f"shape mismatch: {est.shape} vs {gt.shape}")
    if mask is None:
        return est.ravel(), gt.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise MetricError("mask shape mismatch")
    if not mask.any():
        raise MetricError("empty mask")
    return est[mask], gt[mask]


def nrmse(est, gt, mask=None):
    """||est - gt|| / ||gt|| over the (optional) mask."""
    e, g = _masked(est, gt, mask)
    denom = np.linalg.norm(g)
    if denom == 0:
        raise MetricError("ground truth has zero norm")
    return float(np.linalg.norm(e - g) / denom)


def mae(est, gt, mask=None):
    """Mean absolute deviation in map-native units (msec for T1/T2)."""
    e, g = _masked(est, gt, mask)
    return float(np.mean(np.abs(e - g)))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(est, gt, dynamic_range=None):
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1/K2 standard.

    `dynamic_range` defaults to max(gt); a degenerate identical pair
    returns 1 by convention.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise MetricError(f"shape mismatch: {est.shape} vs {gt.shape}")
    if np.array_equal(est, gt):
        return 1.0
    if dynamic_range is None:
        dynamic_range = float(gt.max())
    if dynamic_range <= 0:
        dynamic_range = max(float(np.abs(gt).max()), float(np.abs(est).max()), 1e-12)
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    w = _gaussian_window()

    def filt(a):
        return convolve2d(a, w, mode="valid")

    mu_e, mu_g = filt(est), filt(gt)
    mu_e2, mu_g2, mu_eg = mu_e**2, mu_g**2, mu_e * mu_g
    var_e = filt(est * est) - mu_e2
    var_g = filt(gt * gt) - mu_g2
    cov = filt(est * gt) - mu_eg
    num = (2 * mu_eg + c1) * (2 * cov + c2)
    den = (mu_e2 + mu_g2 + c1) * (var_e + var_g + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    per_map: dict  # map name -> {nrmse, ssim, mae}
    runtime_s: float = None
    memory_bytes: int = None
    config_hash: str = ""
    notes: dict = field(default_factory=dict)

    def to_json(self):
        payload = {
            "maps": self.per_map,
            "runtime_s": self.runtime_s,
            "memory_bytes": self.memory_bytes,
            "config_hash": self.config_hash,
            "notes": self.notes,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_table(self):
        cols = ["map", "NRMSE", "SSIM", "MAE"]
        rows = [cols, ["-" * len(c) for c in cols]]
        for name, m in self.per_map.items():
            rows.append(
                [name, f"{m['nrmse']:.4f}", f"{m['ssim']:.4f}", f"{m['mae']:.4f}"]
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        extras = []
        if self.runtime_s is not None:
            extras.append(f"runtime: {self.runtime_s:.3f} s/slice")
        if self.memory_bytes is not None:
            extras.append(f"memory: {self.memory_bytes / 2**20:.2f} MB")
        if extras:
            lines.append("  |  ".join(extras))
        return "\n".join(lines)


def evaluate(qmaps_est, qmaps_gt, runtime_s=None, memory_bytes=None, config_hash=""):
    """Assemble NRMSE/SSIM/MAE for T1, T2 (foreground) and PD (full slice)."""
    fg = qmaps_gt.foreground_mask
    per_map = {}
    for name in ("t1_ms", "t2_ms", "pd"):
        est = getattr(qmaps_est, name)
        gt = getattr(qmaps_gt, name)
        m = None if name == "pd" else fg
        per_map[name.replace("_ms", "").upper()] = {
            "nrmse": nrmse(est, gt, m),
            "ssim": ssim(est, gt),
            "mae": mae(est, gt, m),
        }
    return EvalReport(
        per_map=per_map,
        runtime_s=runtime_s,
        memory_bytes=memory_bytes,
        config_hash=config_hash,
        notes={"t1_t2_mask": "PD-threshold foreground", "pd_mask": "full slice"},
    )
