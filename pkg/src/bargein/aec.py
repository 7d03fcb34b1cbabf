"""Classical echo-cancellation baselines: STFT-domain NLMS and an oracle Wiener filter.

Both consume a mixture and the known playback reference. NLMS adapts online
and is streaming-causal; the Wiener filter solves a regularized least-squares
fit of the true interferer (mixture minus target, synthetic data only) on
shifted copies of the reference, so it is a non-causal upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.signal import fftconvolve

from .dsp import AudioBuffer, Spectrogram, istft, stft
from .errors import DataError

AEC_WINDOW = 512
AEC_HOP = 128


@dataclass
class NlmsConfig:
    taps_per_bin: int = 32
    step_mu: float = 0.5
    window: int = AEC_WINDOW
    hop: int = AEC_HOP
    window_kind: str = "sqrt-hann"
    eps: float = 1e-10

    def __post_init__(self):
        if not (0.0 < self.step_mu <= 2.0):
            raise DataError(f"step_mu must be in (0, 2], got {self.step_mu}")
        if self.taps_per_bin < 1:
            raise DataError(f"taps_per_bin must be >= 1, got {self.taps_per_bin}")


@dataclass
class WienerConfig:
    taps: int = 512
    regularizer: float = 1e-6

    def __post_init__(self):
        if self.taps < 2 or self.taps % 2 != 0:
            raise DataError(f"taps must be even and >= 2, got {self.taps}")
        if self.regularizer <= 0:
            raise DataError("regularizer must be positive")

    @property
    def lag_range(self) -> tuple[int, int]:
        # lags -taps/2 .. taps/2 - 1 inclusive
        return (-(self.taps // 2), self.taps // 2 - 1)


def _pad_to_common(a: AudioBuffer, b: AudioBuffer) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(a), len(b))
    xa = np.zeros(n)
    xa[: len(a)] = a.samples
    xb = np.zeros(n)
    xb[: len(b)] = b.samples
    return xa, xb


def nlms_cancel(mixture: AudioBuffer, reference: AudioBuffer,
                cfg: NlmsConfig | None = None, adapt: bool = True,
                initial_weights: np.ndarray | None = None) -> AudioBuffer:
    """Per-bin NLMS echo canceller in the STFT domain.

    Each frequency bin keeps a complex weight vector over the most recent
    taps_per_bin reference frames; the output frame is the residual
    e = Y - w^H R. Updates use only past and current frames.

    An all-zero reference cannot drive any update, so the mixture is returned
    unchanged (bit-exactly, skipping the analysis/synthesis round trip).
    Output has the mixture's length; the final samples not covered by a full
    analysis window (< one window) pass through unfiltered.
    """
    if cfg is None:
        cfg = NlmsConfig()
    if not np.any(reference.samples):
        return AudioBuffer(mixture.samples.copy())
    y, r = _pad_to_common(mixture, reference)
    spec_y = stft(AudioBuffer(y), cfg.window, cfg.hop, cfg.window_kind)
    spec_r = stft(AudioBuffer(r), cfg.window, cfg.hop, cfg.window_kind)
    n_frames, n_bins = spec_y.frames.shape

    weights = np.zeros((n_bins, cfg.taps_per_bin), dtype=np.complex128)
    if initial_weights is not None:
        if initial_weights.shape != weights.shape:
            raise DataError(
                f"initial weights shape {initial_weights.shape}, expected {weights.shape}"
            )
        weights = initial_weights.astype(np.complex128).copy()
    history = np.zeros((n_bins, cfg.taps_per_bin), dtype=np.complex128)
    errors = np.empty_like(spec_y.frames)

    for t in range(n_frames):
        history[:, 1:] = history[:, :-1]
        history[:, 0] = spec_r.frames[t]
        estimate = np.sum(np.conj(weights) * history, axis=1)
        err = spec_y.frames[t] - estimate
        errors[t] = err
        if adapt:
            norm = np.sum(np.abs(history) ** 2, axis=1) + cfg.eps
            weights += cfg.step_mu * history * (np.conj(err) / norm)[:, None]

    filtered = istft(Spectrogram(errors, cfg.window, cfg.hop, cfg.window_kind)).samples
    out = y.copy()
    out[: len(filtered)] = filtered
    return AudioBuffer(out[: len(mixture)])


def wiener_oracle_cancel(mixture: AudioBuffer, reference: AudioBuffer,
                         target: AudioBuffer, cfg: WienerConfig | None = None) -> AudioBuffer:
    """Non-causal Wiener cancellation using the oracle interferer y - u.

    Fits a time-domain FIR w over lags [-taps/2, taps/2) minimizing
    ||(y - u) - w * r||^2 with Tikhonov regularization lambda = reg * rho(0),
    solved from the Toeplitz normal equations. Output is y - w * r.
    """
    if cfg is None:
        cfg = WienerConfig()
    if not (len(mixture) == len(reference) == len(target)):
        raise DataError("wiener inputs must share one length")
    y = mixture.samples
    r = reference.samples
    interferer = y - target.samples
    if not np.any(r):
        raise DataError("reference is silent; echo path unidentifiable")

    lo, hi = cfg.lag_range
    # autocorrelation rho(m) for m = 0..taps-1 and cross-correlation at each lag
    auto_full = fftconvolve(r, r[::-1])
    center = len(r) - 1
    rho = auto_full[center : center + cfg.taps].copy()
    cross_full = fftconvolve(interferer, r[::-1])
    b = cross_full[center + lo : center + hi + 1].copy()

    lam = cfg.regularizer * rho[0]
    rho_reg = rho.copy()
    rho_reg[0] += lam
    w = solve_toeplitz(rho_reg, b)

    estimate = fftconvolve(r, w)[-lo : -lo + len(r)]
    return AudioBuffer(y - estimate)


def erle_db(before: AudioBuffer | np.ndarray, after: AudioBuffer | np.ndarray,
            start: int = 0, end: int | None = None) -> float:
    """Echo return loss enhancement over a sample range."""
    xb = before.samples if isinstance(before, AudioBuffer) else np.asarray(before)
    xa = after.samples if isinstance(after, AudioBuffer) else np.asarray(after)
    seg_b = xb[start:end]
    seg_a = xa[start:end]
    pb = float(np.sum(seg_b ** 2))
    pa = float(np.sum(seg_a ** 2))
    if pb <= 0 or pa <= 0:
        raise DataError("ERLE undefined on silent segments")
    return float(10.0 * np.log10(pb / pa))
