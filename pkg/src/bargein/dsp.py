"""Deterministic signal primitives: STFT/iSTFT, Mel filterbank, LFBE features, FIR convolution, WAV I/O.

All audio is mono float64 at 16 kHz. Framing never center-pads: frame t covers
samples [t*hop, t*hop + window_len), so T = floor((len - window_len)/hop) + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import convolve as _sp_convolve

from .errors import AudioFormatError, ColaError, ShortInputError

SAMPLE_RATE = 16000
FEATURE_WINDOW = 400
FEATURE_HOP = 160
N_MELS = 64
ENERGY_FLOOR = 1e-7
INT16_FULL_SCALE = 32767.0

WINDOW_KINDS = ("hann", "sqrt-hann")


@dataclass
class AudioBuffer:
    """Mono sample sequence with a fixed 16 kHz rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("samples contain NaN or Inf")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    """Complex STFT frames, shape (T, window_len//2 + 1)."""

    frames: np.ndarray
    window_len: int
    hop: int
    window_kind: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (T, F_bins), got shape {self.frames.shape}")
        n_bins = self.window_len // 2 + 1
        if self.frames.shape[1] != n_bins:
            raise ValueError(
                f"F_bins {self.frames.shape[1]} inconsistent with window_len {self.window_len}"
            )
        if self.window_kind not in WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.window_kind!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def same_framing(self, other: "Spectrogram") -> bool:
        return (
            self.window_len == other.window_len
            and self.hop == other.hop
            and self.window_kind == other.window_kind
        )


@dataclass
class FeatureSequence:
    """T x F matrix of log Mel-filterbank energies (F = 64)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D (T, F), got shape {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


def make_window(kind: str, n: int) -> np.ndarray:
    """Periodic Hann or its square root."""
    if kind not in WINDOW_KINDS:
        raise ValueError(f"unknown window kind {kind!r}")
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    if kind == "sqrt-hann":
        w = np.sqrt(w)
    return w


def frame_count(n_samples: int, window_len: int, hop: int) -> int:
    if n_samples < window_len:
        return 0
    return (n_samples - window_len) // hop + 1


def stft(audio: AudioBuffer, window_len: int, hop: int, window_kind: str = "sqrt-hann") -> Spectrogram:
    """Forward STFT without center padding."""
    if window_len % 2 != 0:
        raise ValueError(f"window_len must be even, got {window_len}")
    if hop > window_len or hop < 1:
        raise ValueError(f"hop must satisfy 1 <= hop <= window_len, got {hop}")
    x = audio.samples
    if len(x) < window_len:
        raise ShortInputError(
            f"audio has {len(x)} samples, shorter than one {window_len}-sample window"
        )
    t = frame_count(len(x), window_len, hop)
    window = make_window(window_kind, window_len)
    stride = x.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(t, window_len), strides=(hop * stride, stride), writeable=False
    )
    spec = np.fft.rfft(frames * window, axis=1)
    return Spectrogram(frames=spec, window_len=window_len, hop=hop, window_kind=window_kind)


def _ola_normalizer(window_len: int, hop: int, window_kind: str, n_frames: int, n_out: int) -> np.ndarray:
    """Per-sample sum of analysis*synthesis window products over all frames."""
    w2 = make_window(window_kind, window_len) ** 2
    den = np.zeros(n_out)
    for m in range(n_frames):
        den[m * hop : m * hop + window_len] += w2
    return den


def validate_cola(window_len: int, hop: int, window_kind: str, rel_tol: float = 1e-8) -> float:
    """Check that overlapped window products sum to a constant; return that constant."""
    n_frames = 4 * (window_len // hop) + 8
    n_out = window_len + (n_frames - 1) * hop
    den = _ola_normalizer(window_len, hop, window_kind, n_frames, n_out)
    interior = den[window_len : n_out - window_len]
    gain = float(np.median(interior))
    if gain <= 0 or np.max(np.abs(interior - gain)) > rel_tol * gain:
        raise ColaError(
            f"window {window_kind!r} len {window_len} hop {hop} does not satisfy "
            "constant overlap-add; stft/istft round trip undefined"
        )
    return gain


def istft(spec: Spectrogram) -> AudioBuffer:
    """WOLA resynthesis with synthesis window equal to the analysis window."""
    validate_cola(spec.window_len, spec.hop, spec.window_kind)
    window = make_window(spec.window_kind, spec.window_len)
    frames = np.fft.irfft(spec.frames, n=spec.window_len, axis=1) * window
    n_out = spec.window_len + (spec.n_frames - 1) * spec.hop
    out = np.zeros(n_out)
    for m in range(spec.n_frames):
        out[m * spec.hop : m * spec.hop + spec.window_len] += frames[m]
    den = _ola_normalizer(spec.window_len, spec.hop, spec.window_kind, spec.n_frames, n_out)
    covered = den > 1e-12
    out[covered] /= den[covered]
    return AudioBuffer(out)


def mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, window_len: int = FEATURE_WINDOW,
                   f_lo: float = 0.0, f_hi: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular filters on FFT bin frequencies, HTK mel scale, no area normalization.

    Returns (n_mels, window_len//2 + 1). Columns between the first and last
    filter centers sum to 1 (adjacent triangles are complementary).
    """
    n_bins = window_len // 2 + 1
    bin_hz = np.arange(n_bins) * (SAMPLE_RATE / window_len)
    edges_hz = hz_from_mel(np.linspace(mel_from_hz(f_lo), mel_from_hz(f_hi), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def lfbe_from_spectrogram(spec: Spectrogram, filterbank: np.ndarray | None = None,
                          floor: float = ENERGY_FLOOR) -> FeatureSequence:
    if filterbank is None:
        filterbank = mel_filterbank(window_len=spec.window_len)
    power = np.abs(spec.frames) ** 2
    energies = power @ filterbank.T
    return FeatureSequence(np.log(np.maximum(energies, floor)))


def lfbe(audio: AudioBuffer, floor: float = ENERGY_FLOOR) -> FeatureSequence:
    """64-dim log Mel-filterbank energies, 25 ms window / 10 ms hop, periodic Hann."""
    spec = stft(audio, FEATURE_WINDOW, FEATURE_HOP, window_kind="hann")
    return lfbe_from_spectrogram(spec, floor=floor)


def fir_convolve(signal: AudioBuffer, kernel: np.ndarray) -> AudioBuffer:
    """Full linear convolution, output length len(signal) + len(kernel) - 1."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size == 0:
        raise ValueError("kernel must be a nonempty 1-D sequence")
    out = _sp_convolve(signal.samples, kernel, mode="full", method="auto")
    return AudioBuffer(out)


def read_wav(path) -> AudioBuffer:
    """Read mono 16-bit PCM at 16 kHz; anything else is a hard error."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, require {SAMPLE_RATE}")
    if data.dtype != np.int16:
        raise AudioFormatError(f"{path}: sample format {data.dtype}, require 16-bit PCM")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: {data.shape[1]} channels, require mono")
    return AudioBuffer(data.astype(np.float64) / INT16_FULL_SCALE)


def quantize_int16(samples: np.ndarray) -> np.ndarray:
    """Scale by 32767, round to nearest, clip to the int16 range."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * INT16_FULL_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def write_wav(path, audio: AudioBuffer) -> None:
    wavfile.write(path, SAMPLE_RATE, quantize_int16(audio.samples))


def write_wav_int16(path, data: np.ndarray) -> None:
    """Write already-quantized int16 samples unchanged."""
    data = np.asarray(data)
    if data.dtype != np.int16:
        raise AudioFormatError(f"expected int16 samples, got {data.dtype}")
    wavfile.write(path, SAMPLE_RATE, data)


def read_wav_int16(path) -> np.ndarray:
    """Read the raw int16 samples of a valid WAV (validation as read_wav)."""
    read_wav(path)
    _, data = wavfile.read(path)
    return data
