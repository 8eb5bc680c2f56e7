"""Bipolar montage, interictal/preictal window labelling and subject selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, MontageError
from ..signal_io import Recording, SeizureInterval

DEFAULT_PAIRS = (
    ("Fp1", "T3"), ("T3", "O1"), ("Fp1", "C3"), ("C3", "O1"),
    ("Fp2", "C4"), ("C4", "O2"), ("Fp2", "T4"), ("T4", "O2"),
    ("T3", "C3"), ("C3", "Cz"), ("Cz", "C4"), ("C4", "T4"),
    ("Fp1", "Cz"), ("Cz", "O1"), ("Fp2", "Cz"), ("Cz", "O2"),
    ("Fp1", "O2"), ("Fp2", "O1"),
)

# modern 10-10 names for the temporal sites used by the montage
_ALIASES = {"T7": "T3", "T8": "T4", "P7": "T5", "P8": "T6"}

INTERICTAL, PREICTAL = 0, 1


@dataclass(frozen=True)
class MontageConfig:
    eeg_pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    ecg_label: str = "ECG"

    def __post_init__(self):
        pairs = tuple(tuple(p) for p in self.eeg_pairs)
        if len(pairs) != 18:
            raise ConfigError(f"montage needs exactly 18 pairs, got {len(pairs)}")
        object.__setattr__(self, "eeg_pairs", pairs)

    @property
    def channel_names(self) -> list[str]:
        return [f"{a}-{c}" for a, c in self.eeg_pairs] + [self.ecg_label]

    @property
    def electrodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for a, c in self.eeg_pairs:
            seen.setdefault(a)
            seen.setdefault(c)
        return list(seen)


def normalize_label(label: str) -> str:
    """Canonical electrode name: ``'EEG Fp1-REF'`` -> ``'FP1'``, ``'T7'`` -> ``'T3'``."""
    s = label.strip()
    for prefix in ("EEG ", "ECG ", "EKG "):
        if s.upper().startswith(prefix):
            s = s[len(prefix):]
    for suffix in ("-REF", "-LE", "-AR", "-AVG"):
        if s.upper().endswith(suffix):
            s = s[: -len(suffix)]
    s = s.strip()
    for modern, old in _ALIASES.items():
        if s.upper() == modern.upper():
            s = old
    return s.upper()


def _locate(labels: Sequence[str], wanted: str, ecg: bool = False) -> int | None:
    if wanted in labels:
        return labels.index(wanted)
    norm = [normalize_label(x) for x in labels]
    key = normalize_label(wanted)
    if key in norm:
        return norm.index(key)
    if ecg:
        for i, lab in enumerate(labels):
            up = lab.upper()
            if "ECG" in up or "EKG" in up:
                return i
    return None


def montage_indices(electrodes: Sequence[str], m: MontageConfig) -> tuple[list[tuple[int, int]], int]:
    labels = list(electrodes)
    missing, index = [], {}
    for name in m.electrodes:
        i = _locate(labels, name)
        if i is None:
            missing.append(name)
        index[name] = i
    ecg = _locate(labels, m.ecg_label, ecg=True)
    if ecg is None:
        missing.append(m.ecg_label)
    if missing:
        raise MontageError(missing)
    return [(index[a], index[c]) for a, c in m.eeg_pairs], ecg


def build_montage(r: Recording, m: MontageConfig = MontageConfig()) -> np.ndarray:
    """19 x n matrix: 18 bipolar differences in configured order, then ECG."""
    pairs, ecg = montage_indices(r.electrodes, m)
    out = np.empty((19, r.n_samples), dtype=np.float64)
    for k, (a, c) in enumerate(pairs):
        out[k] = r.data[a] - r.data[c]
    out[18] = r.data[ecg]
    return out


@dataclass(frozen=True)
class TimingPolicy:
    preictal_s: float = 1800.0
    interictal_gap_s: float = 3600.0
    postictal_s: float = 1800.0
    window_s: float = 5.0

    def __post_init__(self):
        for name in ("preictal_s", "interictal_gap_s", "postictal_s", "window_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LabeledSegment:
    subject_id: str
    label: int
    t_start: float
    data: np.ndarray
    seizure_index: int = -1  # which consensus seizure a preictal window precedes

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] != 19:
            raise ValueError(f"segment must have 19 rows, got shape {self.data.shape}")
        if self.label not in (INTERICTAL, PREICTAL):
            raise ValueError("label must be 0 (interictal) or 1 (preictal)")


@dataclass(frozen=True)
class WindowSpan:
    t_start: float
    label: int
    seizure_index: int = -1


def _cut(lo: float, hi: float, w: float) -> list[float]:
    n = int(math.floor((hi - lo) / w + 1e-9))
    return [lo + k * w for k in range(n)]


def window_spans(duration_s: float, seizures: Sequence[SeizureInterval],
                 policy: TimingPolicy) -> list[WindowSpan]:
    """Timing-only part of :func:`label_windows` (times relative to recording start).

    Preictal windows tile ``[onset - preictal_s, onset)`` backwards from the
    onset; the span is clipped at the recording start and at the end of the
    previous seizure's postictal period. Interictal windows tile, from their
    left edge, every stretch lying outside all
    ``[onset - max(gap, preictal), offset + postictal)`` exclusion zones.
    """
    seizures = sorted(seizures)
    w = policy.window_s
    out: list[WindowSpan] = []

    guard = 0.0
    for idx, sz in enumerate(seizures):
        lo = max(sz.onset_s - policy.preictal_s, guard, 0.0)
        hi = min(sz.onset_s, duration_s)
        n_full = int(math.floor(policy.preictal_s / w + 1e-9))
        starts = [sz.onset_s - k * w for k in range(n_full, 0, -1)]
        out += [WindowSpan(t, PREICTAL, idx) for t in starts if t >= lo - 1e-9 and t + w <= hi + 1e-9]
        guard = max(guard, sz.offset_s + policy.postictal_s)

    lead = max(policy.interictal_gap_s, policy.preictal_s)
    blocked = sorted((sz.onset_s - lead, sz.offset_s + policy.postictal_s) for sz in seizures)
    cursor = 0.0
    for b_lo, b_hi in blocked + [(duration_s, duration_s)]:
        if b_lo > cursor:
            out += [WindowSpan(t, INTERICTAL) for t in _cut(cursor, min(b_lo, duration_s), w)]
        cursor = max(cursor, b_hi)
    out.sort(key=lambda s: (s.t_start, s.label))
    return out


def label_windows(r: Recording, seizures: Sequence[SeizureInterval], policy: TimingPolicy,
                  montage: MontageConfig = MontageConfig(),
                  signals: np.ndarray | None = None) -> list[LabeledSegment]:
    """Cut the montage of ``r`` into labelled, non-overlapping windows.

    ``signals`` may hold a precomputed 19-row montage (e.g. after filtering);
    otherwise it is built from ``r``. Seizure times are relative to the
    recording start; ``t_start`` of each segment adds ``r.start_time``.
    """
    x = build_montage(r, montage) if signals is None else np.asarray(signals)
    n_win = int(round(policy.window_s * r.fs))
    segments = []
    for span in window_spans(r.duration_s, seizures, policy):
        i0 = int(round(span.t_start * r.fs))
        if i0 < 0 or i0 + n_win > x.shape[1]:
            continue
        segments.append(LabeledSegment(
            subject_id=r.subject_id, label=span.label, t_start=r.start_time + span.t_start,
            data=x[:, i0:i0 + n_win].copy(), seizure_index=span.seizure_index,
        ))
    return segments


def select_subjects(per_subject: Mapping[str, Iterable[LabeledSegment]]) -> list[str]:
    """Subjects that contribute at least one window of each class."""
    keep = []
    for sid, segs in per_subject.items():
        labels = {s.label for s in segs}
        if labels >= {INTERICTAL, PREICTAL}:
            keep.append(sid)
    return keep
