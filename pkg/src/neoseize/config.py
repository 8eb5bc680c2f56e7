"""Pipeline configuration: YAML file + dataset profile + ``--set`` overrides.

The file is a nested mapping whose keys mirror :func:`default_dict`. Values
missing from the file come from the chosen profile. Validation collects every
problem, each named by its dotted field path, before raising.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .mfcc import MfccConfig
from .model import ModelConfig
from .preprocess import FilterSettings
from .preprocess.segments import DEFAULT_PAIRS, MontageConfig, TimingPolicy
from .synthetic import CohortConfig
from .training import FINETUNE_DEFAULTS, SchedulerConfig, TrainConfig

PROFILES = ("helsinki", "siena", "synthetic")

_BASE: dict[str, Any] = {
    "profile": "helsinki",
    "seed": 0,
    "paths": {"raw_dir": "data/raw", "cache_dir": "data/cache", "runs_dir": "runs"},
    "signal": {"fs": 256, "band": [0.1, 70.0], "notch_hz": 50.0, "notch_halfwidth_hz": 1.0,
               "filter_order": 4, "downsample": 1},
    "timing": {"preictal_s": 1800.0, "interictal_gap_s": 3600.0, "postictal_s": 1800.0,
               "window_s": 5.0},
    "consensus": {"min_overlap_s": 10.0, "n_experts": 3},
    "montage": {"pairs": [f"{a}-{b}" for a, b in DEFAULT_PAIRS], "ecg_label": "ECG"},
    "mfcc": {"frame_len": 256, "hop": 128, "n_mels": 20, "fmin": 0.5, "fmax": 100.0,
             "n_mfcc": 20, "log_floor": 1e-10},
    "model": {"conv_channels": [32, 64, 128], "kernel": [2, 2], "dense_units": 128,
              "use_attention": True},
    "train": {"lr": 4e-4, "batch_size": 256, "weight_decay": 5e-3, "dropout": 0.3,
              "w_pos": 0.52, "se_reduction": 8,
              "scheduler": {"patience": 25, "factor": 0.98, "min_lr": 1e-7},
              "max_epochs": 300, "early_stop_patience": 60, "val_fraction": 0.1},
    "cv": {"k": 10, "trials": 3},
    "finetune": {"n_per_class": [12, 60], "lr": FINETUNE_DEFAULTS.lr,
                 "max_epochs": FINETUNE_DEFAULTS.max_epochs},
    "explain": {"n_per_class": 6, "val_fraction": 0.3, "n_perm": 100, "n_avg": 3,
                "n_explain": 3},
    "synth": {"n_subjects": 9, "duration_s": 900.0, "seizures": [[400.0, 430.0], [780.0, 810.0]],
              "preictal_gain": 1.0, "shifted": False},
}

_PROFILE_OVERRIDES: dict[str, dict[str, Any]] = {
    "helsinki": {},
    "siena": {"signal": {"fs": 512, "downsample": 2},
              "timing": {"preictal_s": 3600.0, "interictal_gap_s": 3600.0}},
    "synthetic": {"timing": {"preictal_s": 120.0, "interictal_gap_s": 240.0,
                             "postictal_s": 60.0},
                  "train": {"max_epochs": 60, "early_stop_patience": 60},
                  "cv": {"trials": 1},
                  "synth": {"duration_s": 520.0, "seizures": [[400.0, 430.0]],
                            "preictal_gain": 2.0}},
}

# keys whose value may be null even though the default is not
_NULLABLE = {"signal.notch_hz"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_dict(profile: str = "helsinki") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r} (choose from {PROFILES})")
    d = _merge(_BASE, _PROFILE_OVERRIDES[profile])
    d["profile"] = profile
    return d


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value parsed as YAML (so ``1e-3``, ``[1,2]``, ``null`` work)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {item!r} has an empty key")
    return path, yaml.safe_load(raw) if raw.strip() else ""


def _set_path(d: dict, path: list[str], value) -> None:
    for p in path[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{'.'.join(path)}: {p} is not a section")
    d[path[-1]] = value


def _coerce(value, default, path: str, errors: list[tuple[str, str]]):
    """Check ``value`` against the type of ``default``; ints are accepted for floats."""
    if value is None:
        if default is None or path in _NULLABLE:
            return None
        errors.append((path, "must not be null"))
        return default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append((path, f"expected true/false, got {value!r}"))
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append((path, f"expected an integer, got {value!r}"))
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append((path, f"expected a number, got {value!r}"))
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append((path, f"expected a string, got {value!r}"))
            return default
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            errors.append((path, f"expected a list, got {value!r}"))
            return default
        return value
    return value


def _check_tree(d: dict, ref: dict, prefix: str, errors: list) -> dict:
    out = {}
    for k, v in d.items():
        path = f"{prefix}{k}"
        if k not in ref:
            errors.append((path, "unknown field"))
            continue
        if isinstance(ref[k], dict):
            if not isinstance(v, dict):
                errors.append((path, "expected a mapping"))
                out[k] = ref[k]
            else:
                out[k] = _check_tree(v, ref[k], path + ".", errors)
        else:
            out[k] = _coerce(v, ref[k], path, errors)
    for k, v in ref.items():
        out.setdefault(k, copy.deepcopy(v))
    return out


@dataclass(frozen=True)
class Paths:
    raw_dir: Path
    cache_dir: Path
    runs_dir: Path


@dataclass(frozen=True)
class CvSettings:
    k: int = 10
    trials: int = 3


@dataclass(frozen=True)
class FinetuneSettings:
    n_per_class: tuple[int, ...] = (12, 60)
    lr: float = 4e-4
    max_epochs: int = 30


@dataclass(frozen=True)
class ExplainSettings:
    n_per_class: int = 6
    val_fraction: float = 0.3
    n_perm: int = 100
    n_avg: int = 3
    n_explain: int = 3


@dataclass(frozen=True)
class PipelineConfig:
    profile: str
    seed: int
    paths: Paths
    fs: int
    filters: FilterSettings
    timing: TimingPolicy
    min_overlap_s: float
    n_experts: int
    montage: MontageConfig
    mfcc: MfccConfig
    model: ModelConfig
    train: TrainConfig
    cv: CvSettings
    finetune: FinetuneSettings
    explain: ExplainSettings
    synth: CohortConfig
    raw: dict = field(compare=False, repr=False, default_factory=dict)

    @property
    def fs_effective(self) -> int:
        return self.fs // self.filters.downsample

    def finetune_train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.finetune.lr, batch_size=self.train.batch_size,
                           weight_decay=self.train.weight_decay, dropout=self.train.dropout,
                           w_pos=self.train.w_pos, se_reduction=self.train.se_reduction,
                           scheduler=self.train.scheduler, max_epochs=self.finetune.max_epochs,
                           early_stop_patience=self.finetune.max_epochs, val_fraction=0.0,
                           seed=self.seed)

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)

    def digest(self, *sections: str) -> str:
        """SHA-256 of the canonical JSON of the whole config or selected sections."""
        d = self.raw if not sections else {s: self.raw[s] for s in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def _semantic_errors(d: dict) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []
    sig, tim, mf, tr, md = d["signal"], d["timing"], d["mfcc"], d["train"], d["model"]
    if sig["fs"] <= 0:
        errs.append(("signal.fs", "must be positive"))
        return errs
    if sig["downsample"] < 1:
        errs.append(("signal.downsample", "must be at least 1"))
    elif sig["fs"] % sig["downsample"]:
        errs.append(("signal.downsample", f"must divide fs={sig['fs']}"))
    fs_eff = sig["fs"] / max(sig["downsample"], 1)
    band = sig["band"]
    if len(band) != 2 or not all(isinstance(b, (int, float)) for b in band):
        errs.append(("signal.band", "must be [low, high]"))
    elif not 0 < band[0] < band[1] < sig["fs"] / 2:
        errs.append(("signal.band", f"need 0 < low < high < {sig['fs'] / 2}"))
    if sig["notch_hz"] is not None:
        hw = sig["notch_halfwidth_hz"]
        if hw <= 0:
            errs.append(("signal.notch_halfwidth_hz", "must be positive"))
        elif not 0 < sig["notch_hz"] - hw < sig["notch_hz"] + hw < sig["fs"] / 2:
            errs.append(("signal.notch_hz", "notch band must lie inside (0, fs/2)"))
    if sig["filter_order"] < 1:
        errs.append(("signal.filter_order", "must be at least 1"))
    for k in ("preictal_s", "interictal_gap_s", "postictal_s", "window_s"):
        if tim[k] <= 0:
            errs.append((f"timing.{k}", "must be positive"))
    n_fft = mf["frame_len"]
    if n_fft < 2 or n_fft & (n_fft - 1):
        errs.append(("mfcc.frame_len", "must be a power of two"))
    if not 0 < mf["hop"] <= n_fft:
        errs.append(("mfcc.hop", "must lie in (0, frame_len]"))
    if mf["n_mfcc"] < 1 or mf["n_mfcc"] > mf["n_mels"]:
        errs.append(("mfcc.n_mfcc", "must lie in [1, n_mels]"))
    if not 0 <= mf["fmin"] < mf["fmax"]:
        errs.append(("mfcc.fmin", "need 0 <= fmin < fmax"))
    if mf["fmax"] >= fs_eff / 2:
        errs.append(("mfcc.fmax", f"must be below the Nyquist frequency {fs_eff / 2:g} Hz"))
    if mf["log_floor"] <= 0:
        errs.append(("mfcc.log_floor", "must be positive"))
    if tim["window_s"] > 0 and tim["window_s"] * fs_eff < mf["hop"]:
        errs.append(("timing.window_s", "window shorter than one MFCC hop"))
    chans = md["conv_channels"]
    if not chans or not all(isinstance(c, int) and c > 0 for c in chans):
        errs.append(("model.conv_channels", "must be positive integers"))
    elif isinstance(tr["se_reduction"], int) and tr["se_reduction"] > 0 \
            and chans[-1] % tr["se_reduction"]:
        errs.append(("train.se_reduction", f"must divide the last conv width {chans[-1]}"))
    if len(md["kernel"]) != 2 or not all(isinstance(k, int) and k > 0 for k in md["kernel"]):
        errs.append(("model.kernel", "must be two positive integers"))
    if md["dense_units"] < 1:
        errs.append(("model.dense_units", "must be positive"))
    try:
        tcfg = _train_config(d)
        errs += [(f"train.{k}", m) for k, m in tcfg.errors()]
    except TypeError as exc:
        errs.append(("train", str(exc)))
    if d["cv"]["k"] < 2:
        errs.append(("cv.k", "must be at least 2"))
    if d["cv"]["trials"] < 1:
        errs.append(("cv.trials", "must be at least 1"))
    ft = d["finetune"]["n_per_class"]
    if not ft or not all(isinstance(n, int) and n > 0 for n in ft):
        errs.append(("finetune.n_per_class", "must be a list of positive integers"))
    if d["finetune"]["lr"] <= 0:
        errs.append(("finetune.lr", "must be positive"))
    if d["finetune"]["max_epochs"] < 1:
        errs.append(("finetune.max_epochs", "must be positive"))
    ex = d["explain"]
    if ex["n_perm"] < 1:
        errs.append(("explain.n_perm", "must be at least 1"))
    if ex["n_avg"] < 1 or ex["n_explain"] < ex["n_avg"]:
        errs.append(("explain.n_explain", "must be at least n_avg (and n_avg >= 1)"))
    if ex["n_per_class"] < ex["n_explain"]:
        errs.append(("explain.n_per_class", "must be at least n_explain"))
    if not 0 < ex["val_fraction"] < 1:
        errs.append(("explain.val_fraction", "must lie in (0, 1)"))
    pairs = d["montage"]["pairs"]
    if len(pairs) != 18 or not all(isinstance(p, str) and p.count("-") == 1 for p in pairs):
        errs.append(("montage.pairs", "must be 18 entries like 'Fp1-T3'"))
    if d["consensus"]["n_experts"] < 1:
        errs.append(("consensus.n_experts", "must be positive"))
    sy = d["synth"]
    if sy["n_subjects"] < 1:
        errs.append(("synth.n_subjects", "must be positive"))
    for i, s in enumerate(sy["seizures"]):
        if not (isinstance(s, list) and len(s) == 2 and 0 <= s[0] < s[1] <= sy["duration_s"]):
            errs.append((f"synth.seizures[{i}]", "must be [onset, offset] inside the recording"))
    return errs


def _train_config(d: dict) -> TrainConfig:
    t = dict(d["train"])
    t["scheduler"] = SchedulerConfig(**t["scheduler"])
    return TrainConfig(seed=d["seed"], **t)


def build_config(d: dict) -> PipelineConfig:
    """Validate a (possibly partial) nested mapping and build the typed config."""
    errors: list[tuple[str, str]] = []
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a mapping", [("config", "not a mapping")])
    profile = d.get("profile", "helsinki")
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r}",
                          [("profile", f"unknown profile {profile!r}")])
    full = _check_tree(d, default_dict(profile), "", errors)
    errors += _semantic_errors(full)
    if errors:
        raise ConfigError("; ".join(f"{p}: {m}" for p, m in errors), errors)
    sig, tim, mf, md = full["signal"], full["timing"], full["mfcc"], full["model"]
    mcfg = MfccConfig(**mf)
    fs_eff = sig["fs"] // sig["downsample"]
    n_samples = int(round(tim["window_s"] * fs_eff))
    model = ModelConfig(input_hw=(mf["n_mfcc"], mcfg.n_frames(n_samples)),
                        conv_channels=tuple(md["conv_channels"]), kernel=tuple(md["kernel"]),
                        dense_units=md["dense_units"], use_attention=md["use_attention"],
                        dropout_p=full["train"]["dropout"],
                        se_reduction=full["train"]["se_reduction"])
    sy = full["synth"]
    timing = TimingPolicy(**tim)
    return PipelineConfig(
        profile=profile, seed=full["seed"],
        paths=Paths(**{k: Path(v) for k, v in full["paths"].items()}),
        fs=sig["fs"],
        filters=FilterSettings(band=tuple(sig["band"]), notch_hz=sig["notch_hz"],
                               notch_halfwidth_hz=sig["notch_halfwidth_hz"],
                               order=sig["filter_order"], downsample=sig["downsample"]),
        timing=timing,
        min_overlap_s=full["consensus"]["min_overlap_s"],
        n_experts=full["consensus"]["n_experts"],
        montage=MontageConfig(tuple(tuple(p.split("-")) for p in full["montage"]["pairs"]),
                              full["montage"]["ecg_label"]),
        mfcc=mcfg, model=model, train=_train_config(full),
        cv=CvSettings(**full["cv"]),
        finetune=FinetuneSettings(n_per_class=tuple(full["finetune"]["n_per_class"]),
                                  lr=full["finetune"]["lr"],
                                  max_epochs=full["finetune"]["max_epochs"]),
        explain=ExplainSettings(**full["explain"]),
        synth=CohortConfig(n_subjects=sy["n_subjects"], duration_s=sy["duration_s"],
                           seizures=tuple(tuple(s) for s in sy["seizures"]), fs=sig["fs"],
                           preictal_gain=sy["preictal_gain"], shifted=sy["shifted"],
                           seed=full["seed"], policy=timing),
        raw=full,
    )


def validate_config(text: str, overrides: list[str] = (), seed: int | None = None
                    ) -> PipelineConfig:
    """Parse YAML text, apply ``key=value`` overrides and an optional seed, validate."""
    try:
        d = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: not valid YAML ({exc})", [("config", "invalid YAML")]) from exc
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a mapping", [("config", "not a mapping")])
    for item in overrides:
        path, value = parse_override(item)
        _set_path(d, path, value)
    if seed is not None:
        d["seed"] = seed
    return build_config(d)


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8") if path is not None else ""
    return validate_config(text, overrides, seed)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.snapshot(), sort_keys=False)
