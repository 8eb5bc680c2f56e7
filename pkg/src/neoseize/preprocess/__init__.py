"""Filtering, montage construction and labelled segmentation of recordings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..signal_io import Recording, SeizureInterval
from .filters import (
    BiquadCascade,
    apply_zero_phase,
    design_butterworth,
    downsample,
    frequency_response,
    magnitude_db,
)
from .segments import (
    DEFAULT_PAIRS,
    INTERICTAL,
    PREICTAL,
    LabeledSegment,
    MontageConfig,
    TimingPolicy,
    build_montage,
    label_windows,
    montage_indices,
    select_subjects,
    window_spans,
)


@dataclass(frozen=True)
class FilterSettings:
    band: tuple[float, float] = (0.1, 70.0)
    notch_hz: float | None = 50.0
    notch_halfwidth_hz: float = 1.0
    order: int = 4
    downsample: int = 1


def preprocess_recording(rec: Recording, seizures: list[SeizureInterval],
                         filt: FilterSettings = FilterSettings(),
                         policy: TimingPolicy = TimingPolicy(),
                         montage: MontageConfig = MontageConfig()) -> list[LabeledSegment]:
    """Band-pass + notch (zero phase), optional decimation, montage, windows."""
    pairs, ecg = montage_indices(rec.electrodes, montage)
    used = sorted({i for p in pairs for i in p} | {ecg})
    x = rec.data[used]
    bp = design_butterworth("bandpass", *filt.band, fs=rec.fs, order=filt.order)
    x = apply_zero_phase(bp, x)
    if filt.notch_hz is not None:
        lo, hi = filt.notch_hz - filt.notch_halfwidth_hz, filt.notch_hz + filt.notch_halfwidth_hz
        x = apply_zero_phase(design_butterworth("bandstop", lo, hi, fs=rec.fs, order=filt.order), x)
    fs = rec.fs
    if filt.downsample > 1:
        x = downsample(x, filt.downsample)
        fs = rec.fs // filt.downsample
    reduced = Recording(rec.subject_id, fs, [rec.electrodes[i] for i in used], x, rec.start_time)
    return label_windows(reduced, seizures, policy, montage)


__all__ = [
    "BiquadCascade", "DEFAULT_PAIRS", "FilterSettings", "INTERICTAL", "LabeledSegment",
    "MontageConfig", "PREICTAL", "TimingPolicy", "apply_zero_phase", "build_montage",
    "design_butterworth", "downsample", "frequency_response", "label_windows",
    "magnitude_db", "montage_indices", "preprocess_recording", "select_subjects",
    "window_spans",
]
