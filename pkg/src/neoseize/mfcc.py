"""MFCC tensors for 19-channel segments.

Per frame: Hamming window, radix-2 FFT magnitude, triangular mel
filterbank, natural log with a floor, orthonormal DCT-II. With the default
settings a 5 s segment at 256 Hz becomes a (19, 20, 11) tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, LengthError, ShapeError
from .preprocess.segments import LabeledSegment


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 256
    hop: int = 128
    n_mels: int = 20
    fmin: float = 0.5
    fmax: float = 100.0
    n_mfcc: int = 20
    log_floor: float = 1e-10

    @property
    def n_fft(self) -> int:
        return self.frame_len

    def validate(self, fs: float | None = None) -> None:
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if not (0 < self.hop <= self.frame_len):
            raise ConfigError("hop must lie in (0, frame_len]")
        if self.n_mfcc > self.n_mels:
            raise ConfigError("n_mfcc cannot exceed n_mels")
        if not (0 <= self.fmin < self.fmax):
            raise ConfigError("need 0 <= fmin < fmax")
        if fs is not None and self.fmax >= fs / 2:
            raise ConfigError(f"fmax={self.fmax} must be below Nyquist ({fs / 2})")

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    center_freqs: np.ndarray


@dataclass
class MfccTensor:
    values: np.ndarray  # [channels, n_mfcc, frames]
    subject_id: str = ""
    label: int = 0
    t_start: float = 0.0
    seizure_index: int = -1


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ConfigError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    out = x[..., _bit_reversal(n)].astype(np.complex128).reshape(-1, n)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[0], n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(-1, n)
        size *= 2
    return out.reshape(lead + (n,))


def fft_magnitude(frame) -> np.ndarray:
    """|X[k]| for k = 0..n/2 (works on stacked frames along the last axis)."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    return np.abs(fft(frame)[..., : n // 2 + 1])


# --------------------------------------------------------------------------
# Framing, filterbank, DCT
# --------------------------------------------------------------------------

def hamming(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def frame_signal(x, cfg: MfccConfig = MfccConfig(), window: bool = True) -> np.ndarray:
    """Centred frames: reflect-pad ``frame_len // 2`` per side, one frame per hop.

    Works on the last axis; returns ``[..., n_frames, frame_len]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < cfg.hop:
        raise LengthError(f"signal of {x.shape[-1]} samples is shorter than hop={cfg.hop}")
    pad = cfg.frame_len // 2
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")
    n_frames = cfg.n_frames(x.shape[-1])
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    frames = padded[..., idx]
    if window:
        frames = frames * hamming(cfg.frame_len)
    return frames


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(cfg: MfccConfig, fs: float) -> MelFilterbank:
    """Un-normalised triangles (peak 1) on ``n_mels + 2`` equally spaced mel points."""
    cfg.validate(fs)
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * fs / cfg.n_fft
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights=weights, center_freqs=points[1:-1].copy())


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an ``n x n`` matrix (rows = output coefficients)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (i + 0.5) * k / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ dct_matrix(x.shape[-1]).T


def idct2(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c @ dct_matrix(c.shape[-1])


def mfcc_channel(x, cfg: MfccConfig = MfccConfig(), fb: MelFilterbank | None = None,
                 fs: float = 256.0) -> np.ndarray:
    """MFCC matrix ``[n_mfcc, n_frames]`` for one channel (or ``[..., n_mfcc, n_frames]``)."""
    if fb is None:
        fb = build_mel_filterbank(cfg, fs)
    frames = frame_signal(x, cfg)
    mag = fft_magnitude(frames)
    energies = mag @ fb.weights.T
    logs = np.log(np.maximum(energies, cfg.log_floor))
    coeffs = dct2(logs)[..., : cfg.n_mfcc]
    return np.swapaxes(coeffs, -1, -2)


def featurize_segment(s: LabeledSegment, cfg: MfccConfig = MfccConfig(), fs: float = 256.0,
                      fb: MelFilterbank | None = None, window_s: float = 5.0) -> MfccTensor:
    data = np.asarray(s.data, dtype=np.float64)
    expected = (19, int(round(window_s * fs)))
    if data.shape != expected:
        raise ShapeError(f"segment shape {data.shape}, expected {expected}")
    values = mfcc_channel(data, cfg, fb, fs)
    return MfccTensor(values, s.subject_id, s.label, s.t_start, s.seizure_index)
