"""Shapley attributions, per-channel importance and scalp-map rendering.

Attributions use permutation sampling over (channel, frame) players: each
player owns the 20 MFCC coefficients of one channel in one frame, and
switches from the baseline to the real input in the order of a random
permutation. Each player's mean marginal change in the preictal
probability is spread evenly over its coefficients.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import SeizurePredictor
from .preprocess.segments import INTERICTAL, PREICTAL, MontageConfig
from .training import Dataset, stratified_split

SIGMA_GUARD = 1e-12


# --------------------------------------------------------------------------
# held-out explanation set
# --------------------------------------------------------------------------

@dataclass
class ExplainSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    test_index: np.ndarray  # positions of the test segments in the input dataset
    skipped: list[str]


def build_explain_testset(dataset: Dataset, n_per_class: int = 6, val_fraction: float = 0.3,
                          seed: int = 0) -> ExplainSplit:
    """Withhold per subject the first preictal and some random interictal segments.

    For each subject, the test set receives the ``n_per_class`` earliest
    preictal segments of the earliest seizure that has that many, plus
    ``n_per_class`` interictal segments drawn with ``seed``. Subjects lacking
    either are skipped with a warning and keep all their data for retraining.
    The rest is split (stratified) into training and validation parts.
    """
    rng = np.random.default_rng(seed)
    test, skipped = [], []
    for sid in dataset.subject_ids():
        rows = np.nonzero(dataset.subjects == sid)[0]
        pre = rows[dataset.y[rows] == PREICTAL]
        inter = rows[dataset.y[rows] == INTERICTAL]
        chosen = None
        for sz in np.unique(dataset.seizure_index[pre]):
            cand = pre[dataset.seizure_index[pre] == sz]
            if len(cand) >= n_per_class:
                chosen = cand[np.argsort(dataset.t_start[cand], kind="stable")[:n_per_class]]
                break
        if chosen is None or len(inter) < n_per_class:
            warnings.warn(f"subject {sid} has too few segments for the explanation set; skipped",
                          stacklevel=2)
            skipped.append(sid)
            continue
        test.extend(chosen.tolist())
        test.extend(rng.choice(inter, n_per_class, replace=False).tolist())
    test_idx = np.asarray(test, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(dataset)), test_idx)
    fit, val = stratified_split(dataset.y[rest], val_fraction, rng)
    return ExplainSplit(dataset.subset(rest[fit]), dataset.subset(rest[val]),
                        dataset.subset(test_idx), test_idx, skipped)


# --------------------------------------------------------------------------
# permutation Shapley
# --------------------------------------------------------------------------

@dataclass
class ShapleyEstimate:
    phi: np.ndarray  # mean marginal contribution per player
    std: np.ndarray  # std of the marginal contributions per player
    n_perm: int
    f_full: float
    f_empty: float

    @property
    def sigma_total(self) -> float:
        """Standard error of ``phi.sum()`` treating players independently."""
        return float(np.sqrt(np.sum(self.std ** 2) / self.n_perm))


def shapley_permutation(value_fn: Callable[[np.ndarray], np.ndarray], n_players: int,
                        n_perm: int, seed: int = 0) -> ShapleyEstimate:
    """Monte-Carlo Shapley values of a cooperative game.

    ``value_fn`` maps a boolean coalition matrix ``[B, n_players]`` to ``B``
    values. Each permutation draws from its own generator spawned off
    ``seed``; its ``n_players + 1`` prefix coalitions are evaluated in one call.
    """
    if n_perm < 1:
        raise ConfigError(f"n_perm must be at least 1, got {n_perm}")
    total = np.zeros(n_players)
    total_sq = np.zeros(n_players)
    tri = np.tril(np.ones((n_players + 1, n_players), dtype=bool), k=-1)
    f_empty = f_full = 0.0
    for seq in np.random.SeedSequence(seed).spawn(n_perm):
        perm = np.random.default_rng(seq).permutation(n_players)
        masks = np.zeros((n_players + 1, n_players), dtype=bool)
        masks[:, perm] = tri
        v = np.asarray(value_fn(masks), dtype=np.float64).reshape(n_players + 1)
        marg = np.empty(n_players)
        marg[perm] = np.diff(v)
        total += marg
        total_sq += marg * marg
        f_empty, f_full = float(v[0]), float(v[-1])
    phi = total / n_perm
    var = np.maximum(total_sq / n_perm - phi * phi, 0.0)
    return ShapleyEstimate(phi, np.sqrt(var), n_perm, f_full, f_empty)


@dataclass
class AttributionTensor:
    values: np.ndarray  # [channels, n_mfcc, frames]
    baseline: str
    n_permutations: int
    seed: int
    f_x: float
    f_baseline: float
    sigma: float  # standard error of values.sum()

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attributions must be finite")


def shapley_sampling(model: SeizurePredictor, x, baseline=None, n_perm: int = 100,
                     seed: int = 0, chunk: int = 512) -> AttributionTensor:
    """Attribute ``model``'s preictal probability for one tensor ``x``.

    ``baseline`` defaults to all-zero MFCCs. Players are (channel, frame)
    cells; attributions are returned with the shape of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected one [C, K, T] tensor, got shape {x.shape}")
    desc = "zeros" if baseline is None else "custom"
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != x.shape:
        raise ShapeError(f"baseline shape {base.shape} does not match {x.shape}")
    c, k, t = x.shape

    def value_fn(masks: np.ndarray) -> np.ndarray:
        m = masks.reshape(-1, c, 1, t)
        return model.predict_proba(np.where(m, x, base), chunk=chunk)

    est = shapley_permutation(value_fn, c * t, n_perm, seed)
    spread = np.repeat((est.phi / k).reshape(c, 1, t), k, axis=1)
    return AttributionTensor(spread, desc, n_perm, seed, est.f_full, est.f_empty,
                             est.sigma_total)


# --------------------------------------------------------------------------
# channel importance
# --------------------------------------------------------------------------

def eq_importance(mean_attr: np.ndarray) -> np.ndarray:
    """Per channel: mean over its (coefficient, frame) slice divided by the
    population std of that slice; 0 where the std is below 1e-12."""
    a = np.asarray(mean_attr, dtype=np.float64)
    flat = a.reshape(a.shape[0], -1)
    mu = flat.mean(axis=1)
    sd = flat.std(axis=1)
    out = np.zeros(a.shape[0])
    ok = sd >= SIGMA_GUARD
    out[ok] = mu[ok] / sd[ok]
    return out


def postprocess_importance(raw, ecg_index: int = 18) -> np.ndarray:
    """Zero negatives, drop the ECG entry, then min-max scale to [0, 1].

    A constant vector (e.g. all zeros after clipping) maps to zeros.
    """
    v = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    v = np.delete(v, ecg_index)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class ChannelImportance:
    raw: np.ndarray  # 19 values, ECG last
    processed: np.ndarray  # 18 values in [0, 1]
    channel_names: list[str]
    subject_id: str = ""


def channel_importance(attrs: Sequence[AttributionTensor | np.ndarray], subject_id: str = "",
                       montage: MontageConfig = MontageConfig(), n_avg: int = 3
                       ) -> ChannelImportance:
    """Average the first ``n_avg`` preictal attributions and reduce per channel."""
    if len(attrs) < n_avg:
        raise DataError(f"need {n_avg} preictal attribution tensors, got {len(attrs)}")
    arrays = [a.values if isinstance(a, AttributionTensor) else np.asarray(a) for a in attrs]
    mean = np.mean(arrays[:n_avg], axis=0)
    raw = eq_importance(mean)
    ecg = len(raw) - 1
    return ChannelImportance(raw, postprocess_importance(raw, ecg), montage.channel_names,
                             subject_id)


def importance_csv(imp: ChannelImportance) -> str:
    """``channel_name, raw_I, processed``; the ECG row has an empty processed cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["channel_name", "raw_I", "processed"])
    for i, name in enumerate(imp.channel_names):
        proc = repr(float(imp.processed[i])) if i < len(imp.processed) else ""
        w.writerow([name, repr(float(imp.raw[i])), proc])
    return buf.getvalue()


def read_importance_csv(text: str) -> ChannelImportance:
    rows = list(csv.DictReader(io.StringIO(text)))
    raw = np.array([float(r["raw_I"]) for r in rows])
    proc = np.array([float(r["processed"]) for r in rows if r["processed"] != ""])
    return ChannelImportance(raw, proc, [r["channel_name"] for r in rows])


# --------------------------------------------------------------------------
# scalp map
# --------------------------------------------------------------------------

# 2-D 10-20 projection in SVG pixels: head centre (200, 215), radius 160.
# Fp/T/O sites sit on the 0.8-radius ring 18 degrees either side of the
# midline or on the horizontal axis; C3/C4 halfway between Cz and T3/T4.
HEAD_CENTER = (200.0, 215.0)
HEAD_RADIUS = 160.0
ELECTRODE_XY = {
    "Fp1": (160.4, 93.3), "Fp2": (239.6, 93.3),
    "T3": (72.0, 215.0), "T4": (328.0, 215.0),
    "C3": (136.0, 215.0), "Cz": (200.0, 215.0), "C4": (264.0, 215.0),
    "O1": (160.4, 336.7), "O2": (239.6, 336.7),
}
MIN_OPACITY = 0.1
SVG_ELEMENTS = frozenset({"svg", "title", "g", "circle", "path", "line", "text"})


def edge_opacity(importance: float) -> float:
    return MIN_OPACITY + (1.0 - MIN_OPACITY) * float(np.clip(importance, 0.0, 1.0))


def render_scalp_svg(imp: ChannelImportance | Sequence[float],
                     montage: MontageConfig = MontageConfig(), title: str = "") -> str:
    """SVG 1.1 scalp map with one line per bipolar channel.

    Line opacity runs linearly from 0.1 (importance 0) to 1 (importance 1).
    Each line carries ``data-channel`` and ``data-importance`` attributes.
    """
    values = imp.processed if isinstance(imp, ChannelImportance) else np.asarray(imp, float)
    if len(values) != len(montage.eeg_pairs):
        raise ShapeError(f"{len(values)} importances for {len(montage.eeg_pairs)} channels")
    missing = [e for e in montage.electrodes if e not in ELECTRODE_XY]
    if missing:
        raise ConfigError(f"no scalp coordinates for electrodes {missing}")
    if not title and isinstance(imp, ChannelImportance) and imp.subject_id:
        title = f"Channel importance, {imp.subject_id}"
    cx, cy = HEAD_CENTER
    r = HEAD_RADIUS
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="400" height="400" '
        'viewBox="0 0 400 400">',
        f"<title>{_escape(title or 'Channel importance')}</title>",
        f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{r:.1f}" fill="none" stroke="#000000" '
        'stroke-width="2"/>',
        f'<path d="M {cx - 18:.1f} {cy - r + 2:.1f} L {cx:.1f} {cy - r - 22:.1f} '
        f'L {cx + 18:.1f} {cy - r + 2:.1f}" fill="none" stroke="#000000" stroke-width="2"/>',
        '<g id="channels" stroke="#000000" stroke-linecap="round">',
    ]
    for (a, b), v in zip(montage.eeg_pairs, values):
        (x1, y1), (x2, y2) = ELECTRODE_XY[a], ELECTRODE_XY[b]
        out.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                   f'stroke-width="4" stroke-opacity="{edge_opacity(v):.6f}" '
                   f'data-channel="{a}-{b}" data-importance="{float(v)!r}"/>')
    out.append("</g>")
    out.append('<g id="electrodes" font-family="sans-serif" font-size="12" '
               'text-anchor="middle">')
    for name in montage.electrodes:
        x, y = ELECTRODE_XY[name]
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="11" fill="#ffffff" '
                   'stroke="#000000" stroke-width="1.5"/>')
        out.append(f'<text x="{x:.1f}" y="{y + 4:.1f}">{name}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def parse_scalp_svg(text: str) -> dict[str, float]:
    """Channel name to importance, read back from the line attributes."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(text.encode("utf-8"))
    ns = "{http://www.w3.org/2000/svg}"
    return {el.get("data-channel"): float(el.get("data-importance"))
            for el in root.iter(f"{ns}line")}


def check_electrode_geometry() -> float:
    """Largest deviation of the fixed coordinates from their construction rule."""
    cx, cy = HEAD_CENTER
    ring = 0.8 * HEAD_RADIUS
    expect = {
        "Fp1": (cx + ring * math.cos(math.radians(108)), cy - ring * math.sin(math.radians(108))),
        "Fp2": (cx + ring * math.cos(math.radians(72)), cy - ring * math.sin(math.radians(72))),
        "T3": (cx - ring, cy), "T4": (cx + ring, cy),
        "C3": (cx - ring / 2, cy), "Cz": (cx, cy), "C4": (cx + ring / 2, cy),
        "O1": (cx + ring * math.cos(math.radians(252)), cy - ring * math.sin(math.radians(252))),
        "O2": (cx + ring * math.cos(math.radians(288)), cy - ring * math.sin(math.radians(288))),
    }
    return max(math.dist(ELECTRODE_XY[k], v) for k, v in expect.items())
