"""Small synthetic cohorts that run through the real pipeline.

Every subject gets the same seizure schedule and a preictal rhythm, so the
two classes are separable from the MFCCs. In a *shifted* cohort each subject
has its own preictal frequency and also carries a persistent tone at the
next subject's preictal frequency; a model trained on the other subjects
then mistakes the held-out subject's background for preictal activity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mfcc import MfccConfig, build_mel_filterbank, featurize_segment
from .preprocess import FilterSettings, preprocess_recording
from .preprocess.segments import MontageConfig, TimingPolicy
from .signal_io import (
    AnnotationSet,
    Recording,
    SynthConfig,
    consensus_intervals,
    format_annotations,
    synth_record,
    write_edf,
)
from .training import Dataset

SYNTH_POLICY = TimingPolicy(preictal_s=120.0, interictal_gap_s=240.0, postictal_s=60.0,
                            window_s=5.0)
SHIFT_FREQS = (7.0, 10.0, 13.0, 17.0, 21.0, 25.0, 30.0, 36.0, 42.0)


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 9
    duration_s: float = 900.0
    seizures: tuple[tuple[float, float], ...] = ((400.0, 430.0), (780.0, 810.0))
    fs: int = 256
    preictal_gain: float = 1.0
    preictal_freq: float = 12.0
    shifted: bool = False
    seed: int = 0
    policy: TimingPolicy = field(default_factory=lambda: SYNTH_POLICY)

    def subject_configs(self) -> list[SynthConfig]:
        seeds = np.random.SeedSequence(self.seed).generate_state(self.n_subjects)
        out = []
        for i in range(self.n_subjects):
            sc = SynthConfig(fs=self.fs, duration_s=self.duration_s,
                             seizure_intervals=self.seizures, seed=int(seeds[i]),
                             subject_id=f"S{i + 1:02d}", preictal_s=self.policy.preictal_s,
                             preictal_freq=self.preictal_freq, preictal_gain=self.preictal_gain)
            if self.shifted:
                f = SHIFT_FREQS[i % len(SHIFT_FREQS)]
                nxt = SHIFT_FREQS[(i + 1) % len(SHIFT_FREQS)]
                sc = replace(sc, preictal_freq=f, tone_freq=nxt, tone_gain=self.preictal_gain)
            out.append(sc)
        return out


def cohort_records(cfg: CohortConfig) -> list[tuple[Recording, AnnotationSet]]:
    return [synth_record(sc) for sc in cfg.subject_configs()]


def write_cohort(cfg: CohortConfig, raw_dir) -> list[Path]:
    """Write ``<id>.edf`` and ``<id>.csv`` per subject; returns the EDF paths."""
    raw_dir = Path(raw_dir)
    raw_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec, ann in cohort_records(cfg):
        edf = raw_dir / f"{rec.subject_id}.edf"
        edf.write_bytes(write_edf(rec))
        (raw_dir / f"{rec.subject_id}.csv").write_text(format_annotations(ann), encoding="utf-8")
        paths.append(edf)
    return paths


def cohort_dataset(cfg: CohortConfig = CohortConfig(), filt: FilterSettings = FilterSettings(),
                   mfcc: MfccConfig = MfccConfig(),
                   montage: MontageConfig = MontageConfig()) -> Dataset:
    """Run the in-memory pipeline (consensus, filters, windows, MFCC) on a cohort."""
    fb = build_mel_filterbank(mfcc, cfg.fs)
    tensors = []
    for rec, ann in cohort_records(cfg):
        segs = preprocess_recording(rec, consensus_intervals(ann), filt, cfg.policy, montage)
        tensors += [featurize_segment(s, mfcc, rec.fs, fb, cfg.policy.window_s) for s in segs]
    return Dataset.from_tensors(tensors)
