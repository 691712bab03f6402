"""Compressive acquisition operator and its adjoint.

Per timeframe t the operator expands the s-channel image by the subspace
row V[t, :], applies a unitary 2D FFT, and keeps the masked k-space
samples. With orthonormal V and unitary FFTs the composition satisfies
||H^H H|| <= 1, so unit gradient steps are non-expansive.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .seqsim import ParameterError

FFT_WORKERS = 2


def set_fft_workers(n):
    """Cap the worker threads used by the FFT calls in this package."""
    global FFT_WORKERS
    FFT_WORKERS = max(1, int(n))


@dataclass
class TSMI:
    """Subspace-compressed time series of magnetization images (N, N, s)."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ParameterError(f"TSMI must be (N, N, s), got {self.data.shape}")

    @property
    def grid_n(self):
        return self.data.shape[0]

    @property
    def s(self):
        return self.data.shape[2]


@dataclass
class KSpaceData:
    """Per-frame complex samples at the masked k-space locations."""

    frames: list = field(repr=False)

    @property
    def L(self):
        return len(self.frames)

    def norm2(self):
        return float(sum(np.vdot(f, f).real for f in self.frames))

    def total_samples(self):
        return int(sum(len(f) for f in self.frames))


@dataclass
class AcquisitionModel:
    mask: object  # SamplingMask
    V: np.ndarray = field(repr=False)  # (L, s) real, orthonormal columns
    grid_n: int = None

    def __post_init__(self):
        if self.grid_n is None:
            self.grid_n = self.mask.grid_n
        if self.mask.grid_n != self.grid_n:
            raise ParameterError("mask grid does not match model grid")
        if self.mask.L != self.V.shape[0]:
            raise ParameterError(
                f"mask has {self.mask.L} frames, V has {self.V.shape[0]} rows"
            )
        gram = self.V.T @ self.V
        if not np.allclose(gram, np.eye(self.V.shape[1]), atol=1e-8):
            raise ParameterError("V columns must be orthonormal")
        # centered-grid indices -> FFT memory layout indices, once
        n = self.grid_n
        rows, cols = np.arange(n), np.arange(n)
        to_fft = ((rows - n // 2) % n)[:, None] * n + ((cols - n // 2) % n)[None, :]
        flat = to_fft.ravel()
        self._fft_indices = [flat[f] for f in self.mask.frames]

    @property
    def s(self):
        return self.V.shape[1]

    @property
    def L(self):
        return self.V.shape[0]


def _check_tsmi(x, model):
    if x.grid_n != model.grid_n or x.s != model.s:
        raise ParameterError(
            f"TSMI shape {x.data.shape} does not match model "
            f"(N={model.grid_n}, s={model.s})"
        )


def apply_H(x, model):
    """y_t = (unitary FFT of sum_j x[..., j] V[t, j]) at the frame-t mask."""
    _check_tsmi(x, model)
    n = model.grid_n
    flat = x.data.reshape(n * n, model.s)
    # real V applied to real/imag parts separately (avoids complex promotion);
    # contiguous copies keep the GEMM inputs BLAS-friendly
    xre = np.ascontiguousarray(flat.real)
    xim = np.ascontiguousarray(flat.imag)
    imgs = (model.V @ xre.T) + 1j * (model.V @ xim.T)  # (L, N^2)
    spect = sfft.fft2(
        imgs.reshape(model.L, n, n), axes=(-2, -1), norm="ortho", workers=FFT_WORKERS
    )
    flat = spect.reshape(model.L, -1)
    return KSpaceData(frames=[flat[t, idx] for t, idx in enumerate(model._fft_indices)])


def apply_H_adjoint(y, model):
    """Zero-fill each frame, inverse unitary FFT, accumulate along V."""
    if y.L != model.L:
        raise ParameterError(f"data has {y.L} frames, model expects {model.L}")
    n = model.grid_n
    grids = np.zeros((model.L, n * n), dtype=complex)
    for t, (idx, vals) in enumerate(zip(model._fft_indices, y.frames)):
        if len(idx) != len(vals):
            raise ParameterError(f"frame {t}: {len(vals)} samples, mask has {len(idx)}")
        grids[t, idx] = vals
    imgs = sfft.ifft2(
        grids.reshape(model.L, n, n), axes=(-2, -1), norm="ortho", workers=FFT_WORKERS
    ).reshape(model.L, n * n)
    ire = np.ascontiguousarray(imgs.real)
    iim = np.ascontiguousarray(imgs.imag)
    out = (ire.T @ model.V) + 1j * (iim.T @ model.V)  # (N^2, s)
    return TSMI(out.reshape(n, n, model.s))


def add_noise(y, snr_db=30.0, rng_seed=0):
    """Add i.i.d. circular complex Gaussian noise at the given SNR.

    Total noise power is ||y||^2 / 10**(snr_db/10), spread uniformly over
    all samples. snr_db = +inf returns the input unchanged.
    """
    if not (np.isfinite(snr_db) or snr_db == np.inf):
        raise ParameterError("snr_db must be finite or +inf")
    if snr_db == np.inf:
        return KSpaceData(frames=[f.copy() for f in y.frames])
    total = y.total_samples()
    power = y.norm2() / (10.0 ** (snr_db / 10.0)) / total
    sigma = np.sqrt(power / 2.0)
    rng = np.random.default_rng(rng_seed)
    out = []
    for f in y.frames:
        noise = rng.standard_normal(len(f)) + 1j * rng.standard_normal(len(f))
        out.append(f + sigma * noise)
    return KSpaceData(frames=out)


def residual(y, x, model):
    """y - Hx, as KSpaceData."""
    hx = apply_H(x, model)
    return KSpaceData(frames=[a - b for a, b in zip(y.frames, hx.frames)])


def data_fidelity(y, x, model):
    """||y - Hx||^2."""
    return residual(y, x, model).norm2()


def gradient_step(x, y, alpha, model):
    """x + alpha * H^H (y - Hx)."""
    _check_tsmi(x, model)
    back = apply_H_adjoint(residual(y, x, model), model)
    return TSMI(x.data + alpha * back.data)
