"""Audio-to-feature transforms and the MFCC-distance evaluation metric.

All transforms are pure functions of their inputs.  STFT-family transforms
frame the signal without centering (frame t starts at t*hop), so shifting
audio by one hop shifts the output by one column.  The CQT centers its
much longer kernels on t*hop with zero padding instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import sparse

DEFAULT_CQT_FMIN = 32.70319566257483  # C1


@dataclass
class Spectrogram:
    """Magnitude (or power) spectrogram with its frequency mapping."""

    data: np.ndarray  # (C, K, T), non-negative
    freqs: np.ndarray  # (K,) Hz, strictly increasing
    kind: str  # "stft" | "mel" | "cqt"
    hop: int
    window: int
    bins_per_octave: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("spectrogram data must be (channels, bins, frames)")
        if self.freqs.shape != (self.data.shape[1],):
            raise ValueError("freqs length must match the bin count")

    def freq_map(self, k: int) -> float:
        return float(self.freqs[k])

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    @property
    def num_frames(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CqtConfig:
    f_min: float = DEFAULT_CQT_FMIN
    bins_per_octave: int = 12
    num_octaves: int = 7
    hop: int = 512

    def num_bins(self) -> int:
        return self.bins_per_octave * self.num_octaves


@dataclass
class MfccMatrix:
    coeffs: np.ndarray  # (n_mfcc, T)
    n_mfcc: int
    hop: int
    window: int


@dataclass
class StatTracks:
    """Per-frame scalar tracks: envelope, RMS, zero crossings, spectral flatness."""

    amplitude_envelope: np.ndarray
    rms_energy: np.ndarray
    zero_crossing_rate: np.ndarray
    wiener_entropy: np.ndarray
    frame: int
    hop: int

    def stacked(self) -> np.ndarray:
        return np.stack(
            [
                self.amplitude_envelope,
                self.rms_energy,
                self.zero_crossing_rate,
                self.wiener_entropy,
            ]
        )


def _frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    if x.size < window:
        raise ValueError(f"audio ({x.size} samples) shorter than one window ({window})")
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop]


def _hann(window: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)


def stft_spectrogram(samples: np.ndarray, sample_rate: int, window: int = 1024,
                     hop: int = 256) -> Spectrogram:
    """Hann-windowed magnitude STFT with window/2 + 1 bins."""
    if window & (window - 1) or window < 2:
        raise ValueError(f"window {window} must be a power of two")
    if hop > window or hop < 1:
        raise ValueError("hop must be in 1..window")
    x = np.asarray(samples, dtype=np.float64)
    frames = _frames(x, window, hop) * _hann(window)
    mag = np.abs(np.fft.rfft(frames, axis=1)).T  # (K, T)
    freqs = np.arange(window // 2 + 1) * (sample_rate / window)
    return Spectrogram(mag[None, :, :], freqs, "stft", hop, window)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, window: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None):
    """Triangular filterbank (n_mels, window//2+1) and its center frequencies."""
    if fmax is None:
        fmax = sample_rate / 2.0
    fft_freqs = np.arange(window // 2 + 1) * (sample_rate / window)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for j in range(n_mels):
        left, center, right = edges[j], edges[j + 1], edges[j + 2]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
    return fb, edges[1:-1]


def mel_spectrogram(samples: np.ndarray, sample_rate: int, n_mels: int = 64,
                    window: int = 1024, hop: int = 256) -> Spectrogram:
    """Triangular mel filterbank applied to the STFT power spectrogram."""
    stft = stft_spectrogram(samples, sample_rate, window, hop)
    power = np.square(stft.data[0])
    fb, centers = mel_filterbank(sample_rate, window, n_mels)
    mel = fb @ power
    return Spectrogram(mel[None, :, :], centers, "mel", hop, window)


# CQT kernels are expensive to build; cache per configuration.
_CQT_KERNELS: dict[tuple, tuple] = {}

_CQT_SPARSITY = 1e-4


def _cqt_kernels(sample_rate: int, cfg: CqtConfig):
    key = (sample_rate, cfg.f_min, cfg.bins_per_octave, cfg.num_octaves)
    if key in _CQT_KERNELS:
        return _CQT_KERNELS[key]
    num_bins = cfg.num_bins()
    freqs = cfg.f_min * 2.0 ** (np.arange(num_bins) / cfg.bins_per_octave)
    q = 1.0 / (2.0 ** (1.0 / cfg.bins_per_octave) - 1.0)
    lengths = np.ceil(q * sample_rate / freqs).astype(int)
    n_fft = 1 << int(math.ceil(math.log2(lengths.max())))
    # time-domain kernels: Hann-windowed complex exponentials, centered,
    # unit-normalized by their length
    spec = np.zeros((num_bins, n_fft // 2 + 1), dtype=np.complex128)
    for k in range(num_bins):
        nk = int(lengths[k])
        start = (n_fft - nk) // 2
        n = np.arange(nk)
        kernel = np.zeros(n_fft, dtype=np.complex128)
        kernel[start : start + nk] = (
            _hann(nk) / nk * np.exp(2j * np.pi * freqs[k] * (n - nk / 2) / sample_rate)
        )
        row = np.fft.fft(kernel)[: n_fft // 2 + 1]
        row[np.abs(row) < _CQT_SPARSITY * np.abs(row).max()] = 0.0
        spec[k] = np.conj(row)
    kernel_sparse = sparse.csr_matrix(spec / n_fft)
    _CQT_KERNELS[key] = (kernel_sparse, freqs, n_fft)
    return _CQT_KERNELS[key]


def cqt_chromagram(samples: np.ndarray, sample_rate: int,
                   cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    """Constant-Q magnitude spectrogram: per-bin windowed complex kernels
    applied to FFT frames centered every ``cfg.hop`` samples."""
    top = cfg.f_min * 2.0 ** cfg.num_octaves
    if top > sample_rate / 2.0:
        raise ValueError(
            f"CQT range tops out at {top:.1f} Hz, above Nyquist {sample_rate / 2:.1f}"
        )
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 1:
        raise ValueError("empty audio")
    kernels, freqs, n_fft = _cqt_kernels(sample_rate, cfg)
    num_frames = 1 + (x.size - 1) // cfg.hop
    pad = n_fft // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + n_fft)])
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[:: cfg.hop][:num_frames]
    spec_frames = np.fft.rfft(frames, axis=1)
    coeffs = kernels @ spec_frames.T  # (K, T)
    return Spectrogram(
        np.abs(coeffs)[None, :, :], freqs, "cqt", cfg.hop, n_fft,
        bins_per_octave=cfg.bins_per_octave,
    )


def mfcc(samples: np.ndarray, sample_rate: int, n_mfcc: int = 13, n_mels: int = 64,
         window: int = 1024, hop: int = 256, log_floor: float = 1e-10) -> MfccMatrix:
    """Log mel power -> orthonormal DCT-II, first n_mfcc coefficients per frame."""
    mel = mel_spectrogram(samples, sample_rate, n_mels, window, hop)
    logmel = np.log(mel.data[0] + log_floor)
    coeffs = sfft.dct(logmel, type=2, axis=0, norm="ortho")[:n_mfcc]
    return MfccMatrix(coeffs, n_mfcc, hop, window)


def statistical_features(samples: np.ndarray, frame: int = 1024,
                         hop: int = 256) -> StatTracks:
    """Per-frame amplitude envelope, RMS, zero-crossing rate, spectral flatness.

    Flatness of an all-zero frame evaluates to 1 by the floor convention
    (both means collapse to the floor).
    """
    x = np.asarray(samples, dtype=np.float64)
    frames = _frames(x, frame, hop)
    env = np.max(np.abs(frames), axis=1)
    rms = np.sqrt(np.mean(np.square(frames), axis=1))
    signs = frames[:, :-1] * frames[:, 1:]
    zcr = np.mean(signs < 0.0, axis=1)
    power = np.square(np.abs(np.fft.rfft(frames, axis=1)))
    floor = 1e-12
    geo = np.exp(np.mean(np.log(power + floor), axis=1))
    arith = np.mean(power, axis=1) + floor
    wiener = np.clip(geo / arith, 0.0, 1.0)
    return StatTracks(env, rms, zcr, wiener, frame, hop)


def mfccd(a_samples: np.ndarray, a_rate: int, b_samples: np.ndarray, b_rate: int,
          n_mfcc: int = 13, n_mels: int = 64, window: int = 1024, hop: int = 256,
          log_floor: float = 1e-10) -> float:
    """Mean over frames of the squared euclidean distance between MFCC columns.

    The shorter signal is zero-padded to the longer one's length.  Values
    are only comparable when computed under the same configuration.
    """
    if a_rate != b_rate:
        raise ValueError(f"sample-rate mismatch: {a_rate} vs {b_rate}")
    a = np.asarray(a_samples, dtype=np.float64)
    b = np.asarray(b_samples, dtype=np.float64)
    n = max(a.size, b.size, window)
    if a.size < n:
        a = np.concatenate([a, np.zeros(n - a.size)])
    if b.size < n:
        b = np.concatenate([b, np.zeros(n - b.size)])
    ca = mfcc(a, a_rate, n_mfcc, n_mels, window, hop, log_floor).coeffs
    cb = mfcc(b, b_rate, n_mfcc, n_mels, window, hop, log_floor).coeffs
    return float(np.mean(np.sum(np.square(ca - cb), axis=0)))
