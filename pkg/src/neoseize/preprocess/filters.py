"""Butterworth band filters as biquad cascades, plus zero-phase application.

Design goes analog prototype -> band transform -> bilinear transform, all in
zero/pole/gain form, and only then groups conjugate pole pairs into second
order sections. Working with roots keeps the 0.1 Hz high-pass corner at
256 Hz (poles within ~0.003 of z=1) well conditioned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DesignError, LengthError


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections; each row is ``b0, b1, b2, a1, a2`` (a0 == 1)."""

    sections: np.ndarray
    fs: float

    def __post_init__(self):
        sec = np.asarray(self.sections, dtype=np.float64).reshape(-1, 5)
        object.__setattr__(self, "sections", sec)

    @property
    def sos(self) -> np.ndarray:
        """Sections in the ``[b0, b1, b2, 1, a1, a2]`` row layout."""
        s = self.sections
        return np.column_stack([s[:, :3], np.ones(len(s)), s[:, 3:]])

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def is_stable(self) -> bool:
        a1, a2 = self.sections[:, 3], self.sections[:, 4]
        return bool(np.all(np.abs(a2) < 1) and np.all(np.abs(a1) < 1 + a2))


def _prototype_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _bilinear(zeros, poles, gain, fs):
    fs2 = 2.0 * fs
    degree = len(poles) - len(zeros)
    zd = (fs2 + zeros) / (fs2 - zeros)
    pd = (fs2 + poles) / (fs2 - poles)
    zd = np.concatenate([zd, -np.ones(degree)])
    gain = gain * np.real(np.prod(fs2 - zeros) / np.prod(fs2 - poles))
    return zd, pd, gain


def _pair_roots(roots: np.ndarray, tol: float = 1e-10) -> list[tuple[complex, complex]]:
    """Group roots into conjugate (or real) pairs."""
    roots = list(roots)
    upper = [r for r in roots if r.imag > tol]
    real = sorted(r.real for r in roots if abs(r.imag) <= tol)
    lower = [r for r in roots if r.imag < -tol]
    if len(upper) != len(lower) or len(real) % 2:
        raise DesignError("roots do not form conjugate pairs")
    pairs = [(r, np.conj(r)) for r in sorted(upper, key=lambda r: (abs(r), np.angle(r)))]
    pairs += [(complex(a), complex(b)) for a, b in zip(real[::2], real[1::2])]
    return pairs


def design_butterworth(kind: str, lo: float, hi: float, fs: float, order: int = 4) -> BiquadCascade:
    """Digital Butterworth ``bandpass`` or ``bandstop`` filter.

    ``order`` is the analog prototype order, so the cascade has ``order``
    sections (``2 * order`` poles). Band edges sit at exactly -3.01 dB
    thanks to frequency pre-warping.
    """
    if kind not in ("bandpass", "bandstop"):
        raise ConfigError(f"unknown filter kind {kind!r}")
    if not (0 < lo < hi < fs / 2):
        raise ConfigError(f"band edges must satisfy 0 < lo < hi < fs/2, got {lo}, {hi} at fs={fs}")
    if order < 1:
        raise ConfigError("order must be >= 1")

    w_lo = 2 * fs * np.tan(np.pi * lo / fs)
    w_hi = 2 * fs * np.tan(np.pi * hi / fs)
    bw = w_hi - w_lo
    w0 = np.sqrt(w_lo * w_hi)
    proto = _prototype_poles(order)

    if kind == "bandpass":
        half = proto * bw / 2
        disc = np.sqrt(half ** 2 - w0 ** 2)
        poles = np.concatenate([half + disc, half - disc])
        zeros = np.zeros(order, dtype=complex)
        gain = bw ** order
    else:
        half = (bw / 2) / proto
        disc = np.sqrt(half ** 2 - w0 ** 2)
        poles = np.concatenate([half + disc, half - disc])
        zeros = np.concatenate([np.full(order, 1j * w0), np.full(order, -1j * w0)])
        gain = np.real(1.0 / np.prod(-proto))

    zd, pd, k = _bilinear(zeros, poles, gain, fs)

    pole_pairs = _pair_roots(pd)
    if kind == "bandpass":
        zero_pairs = [(1.0 + 0j, -1.0 + 0j)] * len(pole_pairs)
    else:
        zero_pairs = _pair_roots(zd, tol=1e-6)
    if len(zero_pairs) != len(pole_pairs):
        raise DesignError("zero/pole pairing failed")

    n = len(pole_pairs)
    per_section = abs(k) ** (1.0 / n)
    rows = []
    for idx, ((p1, p2), (z1, z2)) in enumerate(zip(pole_pairs, zero_pairs)):
        g = per_section * (np.sign(k) if idx == 0 else 1.0)
        b = g * np.real(np.array([1.0, -(z1 + z2), z1 * z2]))
        a = np.real(np.array([-(p1 + p2), p1 * p2]))
        rows.append([b[0], b[1], b[2], a[0], a[1]])
    cascade = BiquadCascade(np.array(rows), fs)
    if not cascade.is_stable():
        raise DesignError("designed cascade has a section outside the stability triangle")
    return cascade


def frequency_response(c: BiquadCascade, freqs) -> np.ndarray:
    """Complex response H(e^{j 2 pi f / fs}) of the cascade at ``freqs`` (Hz)."""
    f = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    zinv = np.exp(-2j * np.pi * f / c.fs)
    h = np.ones_like(zinv)
    for b0, b1, b2, a1, a2 in c.sections:
        h *= (b0 + b1 * zinv + b2 * zinv ** 2) / (1 + a1 * zinv + a2 * zinv ** 2)
    return h


def magnitude_db(c: BiquadCascade, freqs) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 20 * np.log10(np.abs(frequency_response(c, freqs)))


def min_padlen(c: BiquadCascade) -> int:
    return 3 * c.order


def padlen(c: BiquadCascade, n_samples: int, tol: float = 1e-9) -> int:
    """Edge padding: long enough for the slowest pole to decay below ``tol``,
    never shorter than ``3 * order`` and never longer than the signal allows."""
    a1, a2 = c.sections[:, 3], c.sections[:, 4]
    radius = max(np.max(np.abs(np.roots([1.0, x, y]))) for x, y in zip(a1, a2))
    decay = int(np.ceil(np.log(tol) / np.log(radius))) if radius > 0 else 0
    return int(min(max(min_padlen(c), decay), n_samples - 1))


def apply_zero_phase(c: BiquadCascade, x) -> np.ndarray:
    """Forward-backward filtering along the last axis; output length = input length.

    The signal is mirror-padded (see :func:`padlen`) and each
    pass starts from the cascade's steady state for the edge value.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] <= min_padlen(c):
        raise LengthError(
            f"signal of {x.shape[-1]} samples too short; need more than {min_padlen(c)}")
    n = padlen(c, x.shape[-1])
    sos = c.sos
    from scipy import signal as sps  # deferred: slow import

    zi = sps.sosfilt_zi(sos)  # (n_sections, 2)
    ext = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(n, n)], mode="reflect")
    shape = (sos.shape[0],) + (1,) * (x.ndim - 1) + (2,)
    zi = zi.reshape(shape) if x.ndim > 1 else zi

    def _run(sig):
        first = sig[..., 0]
        init = zi * (first[None, ..., None] if x.ndim > 1 else first)
        out, _ = sps.sosfilt(sos, sig, axis=-1, zi=init)
        return out

    y = _run(ext)
    y = _run(y[..., ::-1])[..., ::-1]
    return np.ascontiguousarray(y[..., n:-n])


def downsample(x, factor: int) -> np.ndarray:
    """Keep every ``factor``-th sample along the last axis (no extra filtering)."""
    if int(factor) != factor or factor < 1:
        raise ConfigError("downsample factor must be a positive integer")
    return np.asarray(x)[..., :: int(factor)]
