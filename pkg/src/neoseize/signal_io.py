"""Recording containers, EDF reading/writing, expert annotations and synthetic data.

Only classic EDF is handled. Seizure annotations always come from a CSV
sidecar next to the EDF file (``expert,onset_s,offset_s``).
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError

# Montage electrodes first, then ECG, then the rest of the 10-20 set.
STANDARD_LABELS = (
    "Fp1", "Fp2", "T3", "T4", "C3", "C4", "Cz", "O1", "O2", "ECG",
    "F3", "F4", "P3", "P4", "F7", "F8", "T5", "T6", "Fz", "Pz",
)


@dataclass
class Recording:
    subject_id: str
    fs: int
    electrodes: list[str]
    data: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be a 2-D [electrodes x samples] matrix")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise ValueError(f"fs must be a positive integer, got {self.fs}")
        self.fs = int(self.fs)
        self.electrodes = list(self.electrodes)
        if len(self.electrodes) != self.data.shape[0]:
            raise ValueError("one label per data row required")
        if len(set(self.electrodes)) != len(self.electrodes):
            raise ValueError("electrode labels must be unique")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("recording contains NaN or Inf samples")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs


@dataclass(frozen=True, order=True)
class SeizureInterval:
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if not (0 <= self.onset_s < self.offset_s):
            raise ValueError(f"invalid interval [{self.onset_s}, {self.offset_s})")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class AnnotationSet:
    """Per-expert seizure intervals, keyed by expert id."""

    experts: dict[str, list[SeizureInterval]] = field(default_factory=dict)

    def __post_init__(self):
        for name, intervals in self.experts.items():
            intervals = sorted(intervals)
            for a, b in zip(intervals, intervals[1:]):
                if b.onset_s < a.offset_s:
                    raise ValueError(f"overlapping intervals for expert {name}")
            self.experts[name] = intervals

    def __len__(self):
        return len(self.experts)

    def is_empty(self) -> bool:
        return not any(self.experts.values())


# --------------------------------------------------------------------------
# EDF
# --------------------------------------------------------------------------

_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("phys_dim", 8), ("phys_min", 8),
    ("phys_max", 8), ("dig_min", 8), ("dig_max", 8), ("prefilter", 80),
    ("n_samples", 8), ("reserved", 32),
)


def _ascii(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise ParseError(f"non-ASCII bytes in header field {what}") from exc


def _number(raw: bytes, what: str, kind=float):
    text = _ascii(raw, what)
    try:
        return kind(text)
    except ValueError as exc:
        raise ParseError(f"header field {what} is not a number: {text!r}") from exc


def parse_edf(data: bytes, subject_id: str = "") -> Recording:
    """Parse an EDF byte stream into a :class:`Recording` in physical units.

    All ordinary signals must share one samples-per-record count; no
    resampling is attempted. An ``EDF Annotations`` signal, if present, is
    skipped. A truncated trailing data record is dropped with a warning.
    """
    if len(data) < 256:
        raise ParseError("file shorter than the 256-byte fixed header")
    if _ascii(data[0:8], "version") != "0":
        raise ParseError("unsupported EDF version field")
    header_bytes = _number(data[184:192], "header bytes", int)
    n_records = _number(data[236:244], "number of records", int)
    record_dur = _number(data[244:252], "record duration")
    ns = _number(data[252:256], "number of signals", int)
    if ns <= 0:
        raise ParseError("no signals in header")
    if header_bytes != 256 * (ns + 1):
        raise ParseError(f"header size {header_bytes} inconsistent with {ns} signals")
    if len(data) < header_bytes:
        raise ParseError("truncated signal header")
    if record_dur <= 0:
        raise ParseError("record duration must be positive")

    fields: dict[str, list[bytes]] = {}
    offset = 256
    for name, width in _SIGNAL_FIELDS:
        fields[name] = [data[offset + i * width: offset + (i + 1) * width] for i in range(ns)]
        offset += width * ns

    labels = [_ascii(b, "label") for b in fields["label"]]
    counts = [_number(b, "samples per record", int) for b in fields["n_samples"]]
    if any(c <= 0 for c in counts):
        raise ParseError("samples per record must be positive")
    keep = [i for i, lab in enumerate(labels) if lab != "EDF Annotations"]
    if not keep:
        raise ParseError("EDF contains only annotation signals")
    spr = {counts[i] for i in keep}
    if len(spr) != 1:
        raise ParseError(f"signals have mismatched samples per record: {sorted(spr)}")
    spr = spr.pop()
    fs = spr / record_dur
    if abs(fs - round(fs)) > 1e-9:
        raise ParseError(f"non-integer sampling rate {fs}")

    scale = []
    for i in keep:
        pmin = _number(fields["phys_min"][i], "physical minimum")
        pmax = _number(fields["phys_max"][i], "physical maximum")
        dmin = _number(fields["dig_min"][i], "digital minimum")
        dmax = _number(fields["dig_max"][i], "digital maximum")
        if dmax == dmin:
            raise ParseError(f"digital range is empty for signal {labels[i]!r}")
        if pmax == pmin:
            raise ParseError(f"physical range is empty for signal {labels[i]!r}")
        scale.append((pmin, pmax, dmin, dmax))

    record_len = sum(counts)  # in samples
    body = len(data) - header_bytes
    whole = body // (2 * record_len)
    if n_records == -1:
        n_records = whole
    if whole < n_records:
        warnings.warn(
            f"EDF truncated: header announces {n_records} records, {whole} complete",
            stacklevel=2,
        )
        n_records = whole
    if n_records <= 0:
        raise ParseError("no complete data records")

    raw = np.frombuffer(data, dtype="<i2", count=n_records * record_len, offset=header_bytes)
    raw = raw.reshape(n_records, record_len)
    starts = np.concatenate([[0], np.cumsum(counts)])
    out = np.empty((len(keep), n_records * spr), dtype=np.float64)
    for row, (i, (pmin, pmax, dmin, dmax)) in enumerate(zip(keep, scale)):
        dig = raw[:, starts[i]:starts[i + 1]].reshape(-1).astype(np.float64)
        out[row] = (dig - dmin) * (pmax - pmin) / (dmax - dmin) + pmin

    names = [labels[i] for i in keep]
    if len(set(names)) != len(names):
        raise ParseError("duplicate signal labels")
    return Recording(subject_id=subject_id, fs=int(round(fs)), electrodes=names, data=out)


def read_edf(path, subject_id: str | None = None) -> Recording:
    path = Path(path)
    return parse_edf(path.read_bytes(), subject_id=subject_id or path.stem)


def _field(value, width: int) -> bytes:
    text = str(value)
    if len(text) > width:
        raise ValueError(f"{text!r} does not fit a {width}-byte EDF field")
    return text.ljust(width).encode("ascii")


def _edf_number(x: float, width: int = 8) -> str:
    # EDF numeric fields are 8 ASCII chars; keep as many decimals as fit.
    for digits in range(6, -1, -1):
        text = f"{x:.{digits}f}"
        if len(text) <= width:
            return text
    raise ValueError(f"cannot encode {x} in {width} characters")


def write_edf(rec: Recording, record_duration: int = 1) -> bytes:
    """Encode a recording as EDF with a 16-bit digital range per signal.

    Trailing samples that do not fill a complete data record are dropped.
    """
    spr = rec.fs * record_duration
    n_records = rec.n_samples // spr
    if n_records == 0:
        raise ValueError("recording shorter than one data record")
    ns = len(rec.electrodes)
    data = rec.data[:, : n_records * spr]

    dmin, dmax = -32768, 32767
    pmins, pmaxs = [], []
    for row in data:
        lo, hi = float(row.min()), float(row.max())
        # physical bounds are written as text, so round outward to what fits
        lo_txt, hi_txt = _edf_number(math.floor(lo * 1000) / 1000), _edf_number(math.ceil(hi * 1000) / 1000)
        lo, hi = float(lo_txt), float(hi_txt)
        if hi <= lo:
            hi = lo + 1.0
            hi_txt = _edf_number(hi)
        pmins.append(lo_txt)
        pmaxs.append(hi_txt)

    header = b"".join([
        _field(0, 8), _field("X X X X", 80), _field("Startdate X X X X", 80),
        _field("01.01.00", 8), _field("00.00.00", 8), _field(256 * (ns + 1), 8),
        _field("", 44), _field(n_records, 8), _field(record_duration, 8), _field(ns, 4),
    ])
    sig = [
        [_field(lab, 16) for lab in rec.electrodes],
        [_field("", 80)] * ns,
        [_field("uV", 8)] * ns,
        [_field(p, 8) for p in pmins],
        [_field(p, 8) for p in pmaxs],
        [_field(dmin, 8)] * ns,
        [_field(dmax, 8)] * ns,
        [_field("", 80)] * ns,
        [_field(spr, 8)] * ns,
        [_field("", 32)] * ns,
    ]
    header += b"".join(b"".join(col) for col in sig)

    digital = np.empty_like(data, dtype="<i2")
    for i, row in enumerate(data):
        pmin, pmax = float(pmins[i]), float(pmaxs[i])
        d = (row - pmin) * (dmax - dmin) / (pmax - pmin) + dmin
        digital[i] = np.clip(np.round(d), dmin, dmax).astype("<i2")
    body = digital.reshape(ns, n_records, spr).transpose(1, 0, 2).tobytes()
    return header + body


def quantization_step(edf_bytes: bytes) -> np.ndarray:
    """Physical size of one digital step for each signal in an EDF header."""
    ns = int(edf_bytes[252:256])
    off = 256 + ns * (16 + 80 + 8)
    pmin = [float(edf_bytes[off + 8 * i: off + 8 * i + 8]) for i in range(ns)]
    off += 8 * ns
    pmax = [float(edf_bytes[off + 8 * i: off + 8 * i + 8]) for i in range(ns)]
    off += 8 * ns
    dmin = [float(edf_bytes[off + 8 * i: off + 8 * i + 8]) for i in range(ns)]
    off += 8 * ns
    dmax = [float(edf_bytes[off + 8 * i: off + 8 * i + 8]) for i in range(ns)]
    return (np.array(pmax) - np.array(pmin)) / (np.array(dmax) - np.array(dmin))


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------

ANNOTATION_HEADER = ("expert", "onset_s", "offset_s")


def read_annotations(path_or_text) -> AnnotationSet:
    if isinstance(path_or_text, Path) or (
        isinstance(path_or_text, str) and "\n" not in path_or_text and Path(path_or_text).exists()
    ):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = path_or_text
    reader = csv.reader(io.StringIO(text))
    try:
        head = next(reader)
    except StopIteration:
        raise ParseError("empty annotation file") from None
    if tuple(h.strip() for h in head) != ANNOTATION_HEADER:
        raise ParseError(f"annotation header must be {','.join(ANNOTATION_HEADER)}")
    experts: dict[str, list[SeizureInterval]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields")
        name, onset, offset = row
        experts.setdefault(name.strip(), [])
        if onset.strip() == "" and offset.strip() == "":
            continue  # expert listed with no seizures
        try:
            experts[name.strip()].append(SeizureInterval(float(onset), float(offset)))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    try:
        return AnnotationSet(experts)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def format_annotations(ann: AnnotationSet) -> str:
    lines = [",".join(ANNOTATION_HEADER)]
    for name, intervals in ann.experts.items():
        if not intervals:
            lines.append(f"{name},,")
        for iv in intervals:
            lines.append(f"{name},{iv.onset_s!r},{iv.offset_s!r}")
    return "\n".join(lines) + "\n"


def annotations_from_masks(masks: dict[str, Sequence[int]], seconds_per_value: float = 1.0) -> AnnotationSet:
    """Convert per-expert 0/1 seizure masks (e.g. one value per second) into intervals."""
    experts = {}
    for name, mask in masks.items():
        m = np.concatenate([[0], np.asarray(mask, dtype=np.int8) != 0, [0]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(m))
        experts[name] = [
            SeizureInterval(a * seconds_per_value, b * seconds_per_value)
            for a, b in zip(edges[::2], edges[1::2])
        ]
    return AnnotationSet(experts)


def _union(intervals: Sequence[SeizureInterval]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for iv in sorted(intervals):
        if merged and iv.onset_s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], iv.offset_s)
        else:
            merged.append([iv.onset_s, iv.offset_s])
    return [tuple(m) for m in merged]


def _intersect(a, b):
    out, i, j = [], 0, 0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def consensus_intervals(ann: AnnotationSet, min_overlap_s: float = 10.0,
                        n_experts: int = 3) -> list[SeizureInterval]:
    """Seizure spans marked by every expert, at least ``min_overlap_s`` long."""
    if len(ann) != n_experts:
        raise ConfigError(f"expected {n_experts} experts, got {len(ann)}")
    lists = list(ann.experts.values())
    if any(not lst for lst in lists):
        return []
    common = _union(lists[0])
    for lst in lists[1:]:
        common = _intersect(common, _union(lst))
    return [SeizureInterval(a, b) for a, b in common if b - a >= min_overlap_s]


# --------------------------------------------------------------------------
# Synthetic recordings
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    fs: int = 256
    n_electrodes: int = 10
    duration_s: float = 600.0
    seizure_intervals: Sequence[tuple[float, float]] = ()
    seed: int = 0
    subject_id: str = "synth"
    background_uv: float = 20.0
    seizure_gain: float = 5.0
    # Rhythm added over [onset - preictal_s, onset) so preictal windows differ
    # from interictal ones; gain 0 disables it.
    preictal_s: float = 0.0
    preictal_freq: float = 12.0
    preictal_gain: float = 0.0
    preictal_electrodes: Sequence[int] | None = None
    # Rhythm present for the whole recording (used to build shifted cohorts).
    tone_freq: float | None = None
    tone_gain: float = 0.0
    n_experts: int = 3
    expert_jitter_s: float = 2.0


def _pink_noise(rng: np.random.Generator, n_rows: int, n: int) -> np.ndarray:
    white = rng.standard_normal((n_rows, n))
    spec = np.fft.rfft(white, axis=1)
    f = np.arange(spec.shape[1], dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    x = np.fft.irfft(spec, n=n, axis=1)
    x -= x.mean(axis=1, keepdims=True)
    return x / x.std(axis=1, keepdims=True)


def synth_record(cfg: SynthConfig) -> tuple[Recording, AnnotationSet]:
    """Deterministic fake recording with 2-4 Hz bursts inside each seizure."""
    n = int(round(cfg.duration_s * cfg.fs))
    for onset, offset in cfg.seizure_intervals:
        if not (0 <= onset < offset <= cfg.duration_s):
            raise ConfigError(f"seizure ({onset}, {offset}) outside the recording")
    if cfg.n_electrodes > len(STANDARD_LABELS):
        raise ConfigError(f"at most {len(STANDARD_LABELS)} electrodes supported")
    rng = np.random.default_rng(cfg.seed)
    labels = list(STANDARD_LABELS[: cfg.n_electrodes])
    t = np.arange(n) / cfg.fs
    amp = cfg.background_uv
    data = amp * _pink_noise(rng, len(labels), n)

    eeg_rows = [i for i, lab in enumerate(labels) if lab != "ECG"]
    if "ECG" in labels:
        # crude QRS train at a neonatal heart rate
        hr = rng.uniform(1.8, 2.4)
        phase = (t * hr) % 1.0
        qrs = np.exp(-0.5 * ((phase - 0.5) / 0.015) ** 2) * 300.0
        data[labels.index("ECG")] = 0.2 * data[labels.index("ECG")] + qrs

    if cfg.tone_freq is not None and cfg.tone_gain > 0:
        ph = rng.uniform(0, 2 * np.pi, size=len(eeg_rows))
        data[eeg_rows] += cfg.tone_gain * amp * np.sin(2 * np.pi * cfg.tone_freq * t + ph[:, None])

    experts: dict[str, list[SeizureInterval]] = {chr(ord("A") + e): [] for e in range(cfg.n_experts)}
    for onset, offset in sorted(cfg.seizure_intervals):
        i0, i1 = int(round(onset * cfg.fs)), int(round(offset * cfg.fs))
        freq = rng.uniform(2.0, 4.0)
        ph = rng.uniform(0, 2 * np.pi, size=len(eeg_rows))
        data[eeg_rows, i0:i1] += cfg.seizure_gain * amp * np.sin(2 * np.pi * freq * t[i0:i1] + ph[:, None])
        if cfg.preictal_gain > 0 and cfg.preictal_s > 0:
            p0 = max(0, int(round((onset - cfg.preictal_s) * cfg.fs)))
            rows = eeg_rows if cfg.preictal_electrodes is None else [eeg_rows[k] for k in cfg.preictal_electrodes]
            ph = rng.uniform(0, 2 * np.pi, size=len(rows))
            data[rows, p0:i0] += cfg.preictal_gain * amp * np.sin(
                2 * np.pi * cfg.preictal_freq * t[p0:i0] + ph[:, None]
            )
        for name in experts:
            # experts only ever widen the true span, so consensus stays inside it
            lo = max(0.0, onset - rng.uniform(0, cfg.expert_jitter_s))
            hi = min(cfg.duration_s, offset + rng.uniform(0, cfg.expert_jitter_s))
            experts[name].append(SeizureInterval(lo, hi))

    rec = Recording(subject_id=cfg.subject_id, fs=cfg.fs, electrodes=labels, data=data)
    return rec, AnnotationSet(experts)
