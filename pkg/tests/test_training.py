"""Optimiser, scheduler, metrics, splits and the CV / LOPO / fine-tuning protocols."""
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neoseize import autodiff as ad
from neoseize.errors import ConfigError, DataError
from neoseize.model import ModelConfig
from neoseize.training import (
    AdamState,
    Dataset,
    FINETUNE_DEFAULTS,
    Metrics,
    PlateauState,
    RunSummary,
    FoldResult,
    SchedulerConfig,
    TrainConfig,
    adam_step,
    build_model,
    compute_metrics,
    finetune,
    finetune_selection,
    iter_batches,
    kfold_cv,
    lopo,
    metrics_csv,
    plateau_step,
    roc_auc,
    stratified_folds,
    stratified_split,
    train,
)

TINY = ModelConfig(conv_channels=(4, 8, 16), dense_units=8, se_reduction=4)
FAST = TrainConfig(max_epochs=2, early_stop_patience=2, batch_size=32, se_reduction=4)


def toy_dataset(n_per_class=20, subjects=("A",), shift=1.5, seed=0, seizures=1):
    """Random tensors; preictal ones carry a mean shift on the first channels."""
    rng = np.random.default_rng(seed)
    parts = []
    for sid in subjects:
        X = rng.standard_normal((2 * n_per_class, 19, 20, 11))
        y = np.r_[np.zeros(n_per_class, int), np.ones(n_per_class, int)]
        X[y == 1, :4] += shift
        t = np.r_[np.arange(n_per_class) * 5.0, np.arange(n_per_class) * 5.0]
        sz = np.r_[np.full(n_per_class, -1), np.arange(n_per_class) % seizures]
        parts.append(Dataset(X, y, [sid] * len(y), t, sz))
    return Dataset.concat(parts)


def pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(np.mean((diff > 0) + 0.5 * (diff == 0)))


class TestAdam:
    def test_first_step_is_lr(self):
        p = [np.array([1.0, -2.0, 0.5])]
        g = [np.array([0.3, -7.0, 1e-3])]
        adam_step(p, g, AdamState.fresh(p), lr=0.01)
        np.testing.assert_allclose(p[0], [0.99, -1.99, 0.49], atol=1e-7)

    def test_quadratic(self):
        w = [np.array([0.0])]
        st_ = AdamState.fresh(w)
        for _ in range(2000):
            adam_step(w, [2 * (w[0] - 3)], st_, lr=0.05)
        assert abs(w[0][0] - 3) < 1e-3

    def test_coupled_weight_decay(self):
        p, q = [np.array([2.0])], [np.array([2.0])]
        adam_step(p, [np.array([0.0])], AdamState.fresh(p), lr=0.1, weight_decay=0.5)
        adam_step(q, [np.array([1.0])], AdamState.fresh(q), lr=0.1)
        np.testing.assert_allclose(p, q)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(2), np.zeros(2)], AdamState.fresh([np.zeros(2)]), 0.1)


class TestScheduler:
    def test_one_reduction_after_26_flat(self):
        s = PlateauState(lr=4e-4)
        lrs = [plateau_step(s, 1.0) for _ in range(26)]
        assert lrs[:25] == [4e-4] * 25
        assert lrs[25] == pytest.approx(4e-4 * 0.98)
        assert s.n_reductions == 1
        for _ in range(24):
            plateau_step(s, 1.0)
        assert s.n_reductions == 1
        plateau_step(s, 1.0)
        assert s.n_reductions == 2

    def test_improvement_resets(self):
        s = PlateauState(lr=1.0)
        for i in range(100):
            plateau_step(s, 1.0 - 1e-3 * i)
        assert s.n_reductions == 0

    def test_tiny_gain_is_not_improvement(self):
        s = PlateauState(lr=1.0)
        for i in range(26):
            plateau_step(s, 1.0 - 1e-10 * i)
        assert s.n_reductions == 1

    def test_floor(self):
        s = PlateauState(lr=1.01e-7)
        cfg = SchedulerConfig(patience=1)
        for _ in range(10):
            plateau_step(s, 1.0, cfg)
        assert s.lr == 1e-7 and s.n_reductions == 1


class TestMetrics:
    def test_counts(self):
        m = compute_metrics([1, 1, 0, 0, 1], [0.9, 0.2, 0.5, 0.1, 0.5])
        assert (m.tp, m.fp, m.tn, m.fn) == (2, 1, 1, 1)
        assert m.f1 == pytest.approx(2 / 3)

    def test_zero_denominators(self):
        m = Metrics(0, 0, 5, 0)
        assert m.sensitivity == 0.0 and m.f1 == 0.0 and m.specificity == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
    def test_identities(self, tp, fp, tn, fn):
        m = Metrics(tp, fp, tn, fn)
        if tp + fp + tn + fn:
            assert m.accuracy == pytest.approx((tp + tn) / (tp + fp + tn + fn))
        if tp + fp and tp + fn and tp:
            prec, rec = tp / (tp + fp), tp / (tp + fn)
            assert m.f1 == pytest.approx(2 * prec * rec / (prec + rec))
        for v in (m.accuracy, m.sensitivity, m.specificity, m.f1):
            assert 0 <= v <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 60))
    def test_auc_pairwise_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)  # coarse scores create ties
        assert abs(roc_auc(y, s) - pairwise_auc(y, s)) <= 1e-12

    def test_auc_single_class(self):
        assert math.isnan(roc_auc([1, 1], [0.2, 0.3]))

    def test_csv(self):
        text = metrics_csv([("r1", "0", Metrics(1, 0, 1, 0, 1.0))])
        assert text == "run_id,fold,acc,sen,spec,f1,auc\nr1,0,1,1,1,1,1\n"


class TestBatches:
    def test_trailing_singleton_merged(self):
        sizes = [len(b) for b in iter_batches(np.arange(513), 256)]
        assert sizes == [256, 257]

    def test_exact(self):
        assert [len(b) for b in iter_batches(np.arange(512), 256)] == [256, 256]


class TestSplits:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.int64, st.integers(10, 200), elements=st.integers(0, 1)),
           st.integers(0, 2 ** 16))
    def test_fold_partition(self, y, seed):
        k = 10
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            folds = stratified_folds(y, k, np.random.default_rng(seed))
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(len(y)))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        for c in (0, 1):
            per = [int(np.sum(y[f] == c)) for f in folds]
            assert max(per) - min(per) <= 1

    def test_small_class_warns(self):
        with pytest.warns(UserWarning):
            stratified_folds(np.r_[np.zeros(30, int), np.ones(5, int)], 10, np.random.default_rng(0))

    def test_stratified_split(self):
        y = np.r_[np.zeros(50, int), np.ones(30, int)]
        rest, held = stratified_split(y, 0.1, np.random.default_rng(0))
        assert np.sum(y[held] == 0) == 5 and np.sum(y[held] == 1) == 3
        assert not set(rest) & set(held) and len(rest) + len(held) == 80


class TestLoss:
    def test_half_weight_is_half_bce(self):
        p, y = np.array([0.3, 0.8, 0.6]), np.array([0, 1, 0])
        bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert ad.weighted_bce(ad.Tensor(p), y, 0.5).item() == pytest.approx(0.5 * bce, rel=1e-14)


class TestTrain:
    def test_deterministic(self):
        d = toy_dataset(16)
        a, ha = train(build_model(FAST, TINY), d, None, FAST)
        b, hb = train(build_model(FAST, TINY), d, None, FAST)
        assert ha.train_loss == hb.train_loss
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_history_and_best_restore(self):
        d = toy_dataset(16)
        cfg = replace(FAST, max_epochs=6, early_stop_patience=6)
        m, h = train(build_model(cfg, TINY), d, d, cfg)
        assert h.epoch == list(range(1, 7)) and h.lr[0] == cfg.lr
        from neoseize.training import dataset_loss
        assert dataset_loss(m, d, cfg.w_pos) == pytest.approx(min(h.val_loss), rel=1e-12)
        assert h.to_csv().splitlines()[0] == "epoch,train_loss,val_loss,lr"

    def test_single_class_rejected(self):
        d = toy_dataset(8)
        one = d.subset(np.nonzero(d.y == 1)[0])
        with pytest.raises(DataError):
            train(build_model(FAST, TINY), one, None, FAST)

    def test_w_pos_direction(self):
        # labels independent of inputs: the weight alone tilts the output
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 19, 20, 11))
        y = rng.permutation(np.r_[np.zeros(20, int), np.ones(20, int)])
        d = Dataset(X, y, ["A"] * 40, np.zeros(40), np.full(40, -1))
        cfg = replace(FAST, max_epochs=15, early_stop_patience=15, lr=3e-3)
        lo, _ = train(build_model(cfg, TINY), d, None, replace(cfg, w_pos=0.2))
        hi, _ = train(build_model(cfg, TINY), d, None, replace(cfg, w_pos=0.8))
        assert hi.predict_proba(X).mean() > lo.predict_proba(X).mean()

    def test_config_errors_listed(self):
        cfg = TrainConfig(lr=-1, w_pos=1.5, scheduler=SchedulerConfig(factor=2))
        fields = [f for f, _ in cfg.errors()]
        assert fields == ["lr", "w_pos", "scheduler.factor"]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.batch_size, c.weight_decay, c.dropout, c.w_pos, c.se_reduction) == \
            (4e-4, 256, 5e-3, 0.3, 0.52, 8)
        assert (c.scheduler.patience, c.scheduler.factor, c.scheduler.min_lr) == (25, 0.98, 1e-7)


class TestProtocols:
    def test_kfold_partitions_each_trial(self):
        d = toy_dataset(15)
        cfg = replace(FAST, max_epochs=1)
        s = kfold_cv(d, k=5, trials=2, cfg=cfg, base=TINY)
        assert len(s.folds) == 10
        for t in (0, 1):
            idx = np.concatenate([f.test_index for f in s.folds if f.trial == t])
            assert sorted(idx.tolist()) == list(range(len(d)))
        assert set(s.to_dict()) == {"n_folds", "mean", "std", "fold_std"}

    def test_summary_std_over_trial_means(self):
        good, bad = Metrics(1, 0, 1, 0, 1.0), Metrics(0, 1, 0, 1, 0.0)
        folds = [FoldResult(t, f, bad if (t, f) == (1, 0) else good, np.array([0]))
                 for t in range(2) for f in range(2)]
        s = RunSummary(folds)
        assert s.mean["acc"] == pytest.approx(0.75)
        assert s.std["acc"] == pytest.approx(0.25)
        assert s.fold_std["acc"] == pytest.approx(np.std([1, 1, 0, 1]))

    def test_lopo_disjoint(self):
        d = toy_dataset(10, subjects=("A", "B", "C"))
        rounds = lopo(d, replace(FAST, max_epochs=1), TINY)
        assert [r.subject for r in rounds] == ["A", "B", "C"]
        for r in rounds:
            assert r.subject not in r.train_subjects
            assert set(r.train_subjects) | {r.subject} == {"A", "B", "C"}

    def test_lopo_needs_two(self):
        with pytest.raises(DataError):
            lopo(toy_dataset(5), FAST, TINY)

    @pytest.mark.parametrize("n", [12, 60])
    def test_finetune_sizes(self, n):
        d = toy_dataset(80, seizures=3)
        ft, ev = finetune_selection(d, n, seed=1)
        assert len(ft) == 2 * n
        assert np.sum(d.y[ft] == 1) == n and np.sum(d.y[ft] == 0) == n
        assert not set(ft) & set(ev) and len(ft) + len(ev) == len(d)
        pre = ft[d.y[ft] == 1]
        # chronological from the earliest seizure: no unchosen preictal segment precedes a chosen one
        key = list(zip(d.seizure_index[pre], d.t_start[pre]))
        others = np.setdiff1d(np.nonzero(d.y == 1)[0], pre)
        assert min(zip(d.seizure_index[others], d.t_start[others])) > max(key)

    def test_finetune_too_few(self):
        with pytest.raises(DataError, match="preictal"):
            finetune_selection(toy_dataset(10), 12)

    def test_finetune_run(self):
        d = toy_dataset(20)
        pre = build_model(FAST, TINY)
        res = finetune(pre, d, 12, replace(FINETUNE_DEFAULTS, max_epochs=2, se_reduction=4))
        assert res.metrics.total == res.raw_metrics.total == len(d) - 24
        # the pretrained model itself is untouched
        assert pre.params["out.bias"].data.tobytes() != res.model.params["out.bias"].data.tobytes()
