"""Optimisation and evaluation protocols.

Weighted BCE + Adam (coupled L2 decay) + reduce-on-plateau scheduling,
segment-level stratified k-fold cross-validation, leave-one-subject-out
(LOPO) evaluation and few-shot fine-tuning on a held-out subject.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NonFiniteError
from .mfcc import MfccTensor
from .model import ModelConfig, SeizurePredictor, init_params
from .preprocess.segments import INTERICTAL, PREICTAL

log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-8


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SchedulerConfig:
    patience: int = 25
    factor: float = 0.98
    min_lr: float = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and schedule settings."""

    lr: float = 4e-4
    batch_size: int = 256
    weight_decay: float = 5e-3
    dropout: float = 0.3
    w_pos: float = 0.52
    se_reduction: int = 8
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    max_epochs: int = 300
    early_stop_patience: int = 60
    val_fraction: float = 0.1
    seed: int = 0

    def errors(self) -> list[tuple[str, str]]:
        """All violated constraints as ``(field, message)`` pairs."""
        out = []
        for name in ("lr", "batch_size", "max_epochs", "early_stop_patience", "se_reduction"):
            if not getattr(self, name) > 0:
                out.append((name, "must be positive"))
        if self.weight_decay < 0:
            out.append(("weight_decay", "must be non-negative"))
        if not 0 <= self.dropout < 1:
            out.append(("dropout", "must lie in [0, 1)"))
        if not 0 < self.w_pos < 1:
            out.append(("w_pos", "must lie in (0, 1)"))
        if not 0 <= self.val_fraction < 1:
            out.append(("val_fraction", "must lie in [0, 1)"))
        s = self.scheduler
        if not s.patience > 0:
            out.append(("scheduler.patience", "must be positive"))
        if not 0 < s.factor < 1:
            out.append(("scheduler.factor", "must lie in (0, 1)"))
        if not s.min_lr > 0:
            out.append(("scheduler.min_lr", "must be positive"))
        return out

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(f"{k}: {m}" for k, m in errs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "scheduler" in d and isinstance(d["scheduler"], dict):
            d["scheduler"] = SchedulerConfig(**d["scheduler"])
        return cls(**d)


def model_config_for(cfg: TrainConfig, base: ModelConfig = ModelConfig()) -> ModelConfig:
    return replace(base, dropout_p=cfg.dropout, se_reduction=cfg.se_reduction)


def build_model(cfg: TrainConfig, base: ModelConfig = ModelConfig(),
                seed: int | None = None) -> SeizurePredictor:
    return init_params(model_config_for(cfg, base), cfg.seed if seed is None else seed)


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Stacked feature tensors with per-segment metadata."""

    X: np.ndarray  # [N, 19, 20, 11]
    y: np.ndarray  # [N] int, 1 = preictal
    subjects: np.ndarray  # [N] str
    t_start: np.ndarray
    seizure_index: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = len(self.X)
        self.subjects = np.asarray(self.subjects, dtype=str).reshape(n)
        self.t_start = np.asarray(self.t_start, dtype=np.float64).reshape(n)
        self.seizure_index = np.asarray(self.seizure_index, dtype=np.int64).reshape(n)
        if self.y.shape != (n,):
            raise DataError(f"labels of shape {self.y.shape} for {n} segments")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_tensors(cls, tensors: Sequence[MfccTensor]) -> Dataset:
        if not tensors:
            raise DataError("no feature tensors")
        return cls(np.stack([t.values for t in tensors]),
                   [t.label for t in tensors], [t.subject_id for t in tensors],
                   [t.t_start for t in tensors], [t.seizure_index for t in tensors])

    @classmethod
    def concat(cls, parts: Sequence[Dataset]) -> Dataset:
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.subjects for p in parts]),
                   np.concatenate([p.t_start for p in parts]),
                   np.concatenate([p.seizure_index for p in parts]))

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.subjects[idx], self.t_start[idx],
                       self.seizure_index[idx])

    def subject_ids(self) -> list[str]:
        return sorted(set(self.subjects.tolist()))

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.y == INTERICTAL)), int(np.sum(self.y == PREICTAL))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


@dataclass(frozen=True)
class Metrics:
    """Threshold metrics from integer counts plus ROC-AUC.

    Ratios with a zero denominator are 0.0; ``roc_auc`` is NaN when the
    labels contain a single class.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    roc_auc: float = float("nan")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.accuracy, "sen": self.sensitivity, "spec": self.specificity,
                "f1": self.f1, "auc": self.roc_auc}


METRIC_KEYS = ("acc", "sen", "spec", "f1", "auc")


def roc_auc(y, scores) -> float:
    """Area under the ROC curve by trapezoids over all unique thresholds."""
    y = np.asarray(y).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.trapezoid(tpr, fpr))


def compute_metrics(y, scores, threshold: float = 0.5) -> Metrics:
    y = np.asarray(y).astype(np.int64)
    pred = (np.asarray(scores) >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return Metrics(tp, fp, tn, fn, roc_auc(y, scores))


def evaluate(model: SeizurePredictor, test_set: Dataset) -> Metrics:
    return compute_metrics(test_set.y, model.predict_proba(test_set.X))


# --------------------------------------------------------------------------
# optimiser and scheduler
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place.

    Weight decay is coupled: ``weight_decay * p`` is added to the gradient
    before the moment updates.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"state shape {m.shape} does not match parameter {p.shape}")
        g = g + weight_decay * p if weight_decay else g
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    n_reductions: int = 0


def plateau_step(state: PlateauState, val_loss: float,
                 cfg: SchedulerConfig = SchedulerConfig()) -> float:
    """Reduce ``lr`` once ``patience`` consecutive epochs fail to improve.

    An epoch improves when ``val_loss < best - 1e-8``. The first call always
    improves on the initial ``inf``, so a run of 26 identical losses with
    patience 25 yields exactly one reduction, on the 26th call.
    """
    if val_loss < state.best - IMPROVEMENT_EPS:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= cfg.patience:
            new_lr = max(state.lr * cfg.factor, cfg.min_lr)
            if new_lr < state.lr:
                state.n_reductions += 1
            state.lr = new_lr
            state.bad_epochs = 0
    return state.lr


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.lr):
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.10g}"


def iter_batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    """Consecutive batches; a trailing batch of one is merged into the previous
    one because batch statistics are undefined for a single sample."""
    n = len(order)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:end]


def dataset_loss(model: SeizurePredictor, data: Dataset, w_pos: float,
                 chunk: int = 512) -> float:
    """Eval-mode weighted BCE over a whole set."""
    p = model.predict_proba(data.X, chunk=chunk)
    return ad.weighted_bce(ad.Tensor(p), data.y, w_pos).item()


def train(model: SeizurePredictor, train_set: Dataset, val_set: Dataset | None,
          cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, History], None] | None = None
          ) -> tuple[SeizurePredictor, History]:
    """Fit ``model`` in place and return it with the best validation-loss weights.

    With ``val_set`` None (or empty) the training set itself, in eval mode,
    drives scheduling, early stopping and checkpoint selection.
    """
    cfg.validate()
    if len(train_set) < 2 or len(np.unique(train_set.y)) < 2:
        raise DataError("training set must contain both classes")
    monitor = val_set if val_set is not None and len(val_set) else train_set
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(shuffle_seq)
    model.rng = np.random.default_rng(dropout_seq)
    params = model.parameters()
    adam = AdamState.fresh([p.data for p in params])
    sched = PlateauState(lr=cfg.lr)
    hist = History()
    best_loss, best_state, since_best = math.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = sched.lr
        total, correct = 0.0, 0
        for idx in iter_batches(rng.permutation(len(train_set)), cfg.batch_size):
            ad.zero_grad(params)
            yb = train_set.y[idx]
            p = model.forward(train_set.X[idx], mode="train")
            loss = ad.weighted_bce(p, yb, cfg.w_pos)
            loss.backward()
            grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in params]
            adam_step([t.data for t in params], grads, adam, lr_used,
                      weight_decay=cfg.weight_decay)
            model.step += 1
            total += loss.item() * len(idx)
            correct += int(np.sum((p.data >= 0.5) == (yb == 1)))
        val_loss = dataset_loss(model, monitor, cfg.w_pos)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"validation loss became {val_loss} at epoch {epoch}")
        plateau_step(sched, val_loss, cfg.scheduler)
        hist.epoch.append(epoch)
        hist.train_loss.append(total / len(train_set))
        hist.val_loss.append(val_loss)
        hist.lr.append(lr_used)
        hist.train_acc.append(correct / len(train_set))
        if val_loss < best_loss - IMPROVEMENT_EPS:
            best_loss, since_best, hist.best_epoch = val_loss, 0, epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        else:
            since_best += 1
        if on_epoch is not None:
            on_epoch(epoch, hist)
        log.debug("epoch %d train %.5f val %.5f lr %.3g", epoch, hist.train_loss[-1], val_loss,
                  lr_used)
        if since_best >= cfg.early_stop_patience:
            break
    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, hist


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle each class and deal it round-robin over ``k`` folds.

    Dealing continues across classes from where the previous class stopped,
    so fold sizes differ by at most one overall and by at most one per class.
    """
    y = np.asarray(y)
    if len(y) < k:
        raise DataError(f"{len(y)} segments cannot fill {k} folds")
    classes, counts = np.unique(y, return_counts=True)
    if np.any(counts < k):
        warnings.warn(f"a class has fewer than {k} segments; folds cannot all be stratified",
                      stacklevel=2)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for c in classes:
        for i in rng.permutation(np.nonzero(y == c)[0]):
            folds[pos % k].append(int(i))
            pos += 1
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def stratified_split(y, fraction: float, rng: np.random.Generator
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (rest, held) with ``round(fraction * n_c)`` held per class."""
    y = np.asarray(y)
    held = []
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        held.extend(idx[: int(round(fraction * len(idx)))].tolist())
    held_arr = np.sort(np.asarray(held, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(y)), held_arr)
    return rest, held_arr


def _fit_with_validation(train_part: Dataset, cfg: TrainConfig, base: ModelConfig,
                         seed: int) -> tuple[SeizurePredictor, History]:
    rng = np.random.default_rng(seed)
    fit_idx, val_idx = stratified_split(train_part.y, cfg.val_fraction, rng)
    val = train_part.subset(val_idx) if len(val_idx) else None
    model = build_model(cfg, base, seed=seed)
    return train(model, train_part.subset(fit_idx), val, replace(cfg, seed=seed))


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------

@dataclass
class FoldResult:
    trial: int
    fold: int
    metrics: Metrics
    test_index: np.ndarray
    history: History | None = None


@dataclass
class RunSummary:
    """Fold results of all trials.

    ``mean`` averages per-trial means. ``std`` is the population standard
    deviation of the per-trial means (fold means); ``fold_std`` is the
    population standard deviation over every individual fold.
    """

    folds: list[FoldResult]

    def _table(self) -> dict[str, np.ndarray]:
        return {k: np.array([f.metrics.as_dict()[k] for f in self.folds]) for k in METRIC_KEYS}

    def trial_means(self) -> dict[str, np.ndarray]:
        trials = np.array([f.trial for f in self.folds])
        tab = self._table()
        return {k: np.array([np.nanmean(v[trials == t]) for t in np.unique(trials)])
                for k, v in tab.items()}

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.trial_means().items()}

    @property
    def std(self) -> dict[str, float]:
        return {k: float(np.std(v)) for k, v in self.trial_means().items()}

    @property
    def fold_std(self) -> dict[str, float]:
        return {k: float(np.nanstd(v)) for k, v in self._table().items()}

    def to_dict(self) -> dict:
        return {"n_folds": len(self.folds), "mean": self.mean, "std": self.std,
                "fold_std": self.fold_std}


def kfold_cv(dataset: Dataset, k: int = 10, trials: int = 3, cfg: TrainConfig = TrainConfig(),
             base: ModelConfig = ModelConfig(),
             on_fold: Callable[[FoldResult, SeizurePredictor], None] | None = None
             ) -> RunSummary:
    """Segment-level stratified k-fold CV repeated over independent trials.

    Each trial re-draws the fold assignment and the initialisation from a
    seed spawned off ``cfg.seed``.
    """
    results = []
    for trial, seq in enumerate(np.random.SeedSequence(cfg.seed).spawn(trials)):
        split_seed, *fold_seeds = seq.generate_state(k + 1)
        folds = stratified_folds(dataset.y, k, np.random.default_rng(split_seed))
        for f, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(dataset)), test_idx)
            model, hist = _fit_with_validation(dataset.subset(train_idx), cfg, base,
                                               int(fold_seeds[f]))
            res = FoldResult(trial, f, evaluate(model, dataset.subset(test_idx)), test_idx, hist)
            log.info("trial %d fold %d: %s", trial, f, res.metrics.as_dict())
            results.append(res)
            if on_fold is not None:
                on_fold(res, model)
    return RunSummary(results)


@dataclass
class LopoRound:
    subject: str
    train_subjects: list[str]
    metrics: Metrics
    model: SeizurePredictor
    history: History | None = None


def lopo(dataset: Dataset, cfg: TrainConfig = TrainConfig(), base: ModelConfig = ModelConfig(),
         subjects: Sequence[str] | None = None) -> list[LopoRound]:
    """Train on all subjects but one and test on the held-out one, per subject."""
    all_ids = dataset.subject_ids()
    if len(all_ids) < 2:
        raise DataError("LOPO needs at least two subjects")
    rounds = []
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(all_ids))
    for i, sid in enumerate(all_ids):
        if subjects is not None and sid not in subjects:
            continue
        test_mask = dataset.subjects == sid
        train_part = dataset.subset(np.nonzero(~test_mask)[0])
        model, hist = _fit_with_validation(train_part, cfg, base, int(seeds[i]))
        m = evaluate(model, dataset.subset(np.nonzero(test_mask)[0]))
        log.info("LOPO %s: %s", sid, m.as_dict())
        rounds.append(LopoRound(sid, sorted(set(train_part.subjects.tolist())), m, model, hist))
    return rounds


def mean_metrics(ms: Sequence[Metrics]) -> dict[str, float]:
    return {k: float(np.nanmean([m.as_dict()[k] for m in ms])) for k in METRIC_KEYS}


def finetune_selection(subject_set: Dataset, n_per_class: int, seed: int = 0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Indices (fine-tune, evaluation) within one subject's data.

    Preictal: the first ``n_per_class`` preictal segments in chronological
    order starting at the earliest seizure's preictal period. Interictal:
    ``n_per_class`` drawn at random with ``seed``. Everything else is
    evaluation data.
    """
    pre = np.nonzero(subject_set.y == PREICTAL)[0]
    inter = np.nonzero(subject_set.y == INTERICTAL)[0]
    for name, idx in (("preictal", pre), ("interictal", inter)):
        if len(idx) < n_per_class:
            raise DataError(f"{name}: need {n_per_class} segments, subject has {len(idx)}")
    order = np.lexsort((subject_set.t_start[pre], subject_set.seizure_index[pre]))
    chosen_pre = pre[order[:n_per_class]]
    chosen_int = np.random.default_rng(seed).choice(inter, n_per_class, replace=False)
    ft = np.sort(np.concatenate([chosen_pre, chosen_int]))
    return ft, np.setdiff1d(np.arange(len(subject_set)), ft)


@dataclass
class FinetuneResult:
    model: SeizurePredictor
    metrics: Metrics
    raw_metrics: Metrics  # pretrained model on the same evaluation subset
    finetune_index: np.ndarray
    eval_index: np.ndarray
    history: History | None = None


FINETUNE_DEFAULTS = TrainConfig(max_epochs=30, early_stop_patience=30, val_fraction=0.0)


def finetune(pretrained: SeizurePredictor, subject_set: Dataset, n_per_class: int = 12,
             cfg_ft: TrainConfig = FINETUNE_DEFAULTS) -> FinetuneResult:
    """Continue training a copy of ``pretrained`` on a few held-out segments.

    All layers are updated and dropout stays active. A fresh Adam state is
    used. The fine-tuning set also serves as the monitoring set.
    """
    ft_idx, eval_idx = finetune_selection(subject_set, n_per_class, cfg_ft.seed)
    evaluation = subject_set.subset(eval_idx)
    raw = evaluate(pretrained, evaluation)
    model = pretrained.clone()
    model, hist = train(model, subject_set.subset(ft_idx), None, cfg_ft)
    return FinetuneResult(model, evaluate(model, evaluation), raw, ft_idx, eval_idx, hist)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def metrics_csv(rows: Sequence[tuple[str, str, Metrics]], unit: str = "fold") -> str:
    """CSV with columns ``run_id, <unit>, acc, sen, spec, f1, auc``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", unit, *METRIC_KEYS])
    for run_id, key, m in rows:
        w.writerow([run_id, key] + [_fmt(v) for v in m.as_dict().values()])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
