"""Command-line entry point: ``neoseize <command> [--config FILE] [--set k=v] ...``.

Commands chain through content-addressed caches:

    synth -> raw EDF + CSV   ingest -> segment caches   featurize -> feature caches
    train-cv / train-lopo / finetune / explain / scalp-plot -> run directories

Every invocation creates ``<runs_dir>/<command>-<config hash>-<timestamp>``
holding its outputs and a ``manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import cache, explain
from .config import PipelineConfig, dump_config, load_config
from .errors import ConfigError, NeoSeizeError
from .mfcc import build_mel_filterbank, featurize_segment
from .model import load_checkpoint, save_checkpoint
from .preprocess import preprocess_recording
from .preprocess.segments import PREICTAL
from .signal_io import consensus_intervals, read_annotations, read_edf
from .synthetic import write_cohort
from .training import (
    Dataset,
    Metrics,
    build_model,
    evaluate,
    finetune,
    kfold_cv,
    lopo,
    mean_metrics,
    metrics_csv,
    train,
)

log = logging.getLogger("neoseize")

COMMANDS = ("synth", "ingest", "featurize", "train-cv", "train-lopo", "finetune", "explain",
            "scalp-plot")


class FieldError(NeoSeizeError):
    """A user-facing failure attributable to one configuration field or option."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# --------------------------------------------------------------------------
# hashing, run directories, manifests
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _sha(*parts: str) -> str:
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


def code_version() -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    pkg = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(pkg.rglob("*.py")):
        h.update(p.relative_to(pkg).as_posix().encode())
        h.update(p.read_bytes())
    return {"package_version": version, "source_sha256": h.hexdigest()}


@dataclass
class Run:
    command: str
    cfg: PipelineConfig
    dir: Path
    run_id: str
    inputs: dict
    outputs: list

    def path(self, *parts: str) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def emit(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text, encoding="utf-8")
        self.outputs.append(rel)
        return p

    def note(self, path: Path) -> None:
        self.outputs.append(Path(path).relative_to(self.dir).as_posix()
                            if Path(path).is_relative_to(self.dir) else str(path))


def open_run(command: str, cfg: PipelineConfig, argv: list[str], out: str | None) -> Run:
    root = Path(out) if out else cfg.paths.runs_dir
    run_id = f"{command}-{cfg.digest()[:12]}"
    stamp = time.strftime("%Y%m%dT%H%M%S")
    d = root / f"{run_id}-{stamp}"
    k = 1
    while d.exists():
        k += 1
        d = root / f"{run_id}-{stamp}-{k}"
    d.mkdir(parents=True)
    run = Run(command, cfg, d, run_id, {}, [])
    run.argv = argv  # type: ignore[attr-defined]
    return run


def close_run(run: Run) -> None:
    manifest = {
        "command": run.command,
        "run_id": run.run_id,
        "argv": getattr(run, "argv", []),
        "seed": run.cfg.seed,
        "config": run.cfg.snapshot(),
        "code": code_version(),
        "inputs": run.inputs,
        "outputs": sorted(set(run.outputs)),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    (run.dir / "config.yaml").write_text(dump_config(run.cfg), encoding="utf-8")


# --------------------------------------------------------------------------
# cache keys
# --------------------------------------------------------------------------

@dataclass
class SubjectFiles:
    subject: str
    edf: Path
    annotations: Path
    seg_key: str
    fea_key: str
    input_hashes: dict


def discover(cfg: PipelineConfig) -> list[SubjectFiles]:
    raw = cfg.paths.raw_dir
    if not raw.is_dir():
        raise FieldError("paths.raw_dir", f"directory not found: {raw}")
    edfs = sorted(raw.glob("*.edf"))
    if not edfs:
        raise FieldError("paths.raw_dir", f"no .edf files in {raw}")
    seg_cfg = cfg.digest("signal", "timing", "consensus", "montage")
    fea_cfg = cfg.digest("mfcc")
    out = []
    for edf in edfs:
        ann = edf.with_suffix(".csv")
        if not ann.exists():
            raise FieldError("paths.raw_dir", f"annotation file missing for {edf.name}: {ann.name}")
        hashes = {str(edf): sha256_file(edf), str(ann): sha256_file(ann)}
        seg_key = _sha(hashes[str(edf)], hashes[str(ann)], seg_cfg)[:16]
        fea_key = _sha(seg_key, fea_cfg)[:16]
        out.append(SubjectFiles(edf.stem, edf, ann, seg_key, fea_key, hashes))
    return out


def seg_path(cfg: PipelineConfig, s: SubjectFiles) -> Path:
    return cfg.paths.cache_dir / "segments" / f"{s.subject}-{s.seg_key}.seg"


def fea_path(cfg: PipelineConfig, s: SubjectFiles) -> Path:
    return cfg.paths.cache_dir / "features" / f"{s.subject}-{s.fea_key}.fea"


def load_dataset(cfg: PipelineConfig, run: Run) -> Dataset:
    tensors = []
    for s in discover(cfg):
        p = fea_path(cfg, s)
        if not p.exists():
            raise FieldError("paths.cache_dir", f"feature cache missing for {s.subject} "
                                                f"({p}); run 'featurize' first")
        run.inputs[str(p)] = sha256_file(p)
        items = cache.read_features(p)
        if {t.label for t in items} >= {0, 1}:
            tensors += items
        else:
            log.warning("subject %s lacks one class and is left out", s.subject)
    if not tensors:
        raise FieldError("paths.raw_dir", "no subject has segments of both classes")
    return Dataset.from_tensors(tensors)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    for p in write_cohort(cfg.synth, cfg.paths.raw_dir):
        for q in (p, p.with_suffix(".csv")):
            run.outputs.append(str(q))
            run.inputs.setdefault("generated", {})[str(q)] = sha256_file(q)


def cmd_ingest(run: Run, args) -> None:
    cfg = run.cfg
    rows = ["subject,interictal,preictal,cache"]
    for s in discover(cfg):
        run.inputs.update(s.input_hashes)
        out = seg_path(cfg, s)
        if not out.exists():
            rec = read_edf(s.edf, subject_id=s.subject)
            if rec.fs != cfg.fs:
                raise FieldError("signal.fs", f"{s.edf.name} is sampled at {rec.fs} Hz, "
                                              f"config expects {cfg.fs}")
            ann = read_annotations(s.annotations)
            seizures = consensus_intervals(ann, cfg.min_overlap_s, cfg.n_experts)
            segs = preprocess_recording(rec, seizures, cfg.filters, cfg.timing, cfg.montage)
            out.parent.mkdir(parents=True, exist_ok=True)
            cache.write_segments(out, s.subject, segs, cfg.fs_effective, cfg.timing.window_s)
        segs, _ = cache.read_segments(out)
        n_pre = sum(1 for x in segs if x.label == PREICTAL)
        rows.append(f"{s.subject},{len(segs) - n_pre},{n_pre},{out}")
        run.outputs.append(str(out))
    run.emit("segments.csv", "\n".join(rows) + "\n")


def cmd_featurize(run: Run, args) -> None:
    cfg = run.cfg
    fb = build_mel_filterbank(cfg.mfcc, cfg.fs_effective)
    for s in discover(cfg):
        src = seg_path(cfg, s)
        if not src.exists():
            raise FieldError("paths.cache_dir", f"segment cache missing for {s.subject} "
                                                f"({src}); run 'ingest' first")
        run.inputs[str(src)] = sha256_file(src)
        out = fea_path(cfg, s)
        if not out.exists():
            segs, meta = cache.read_segments(src)
            tensors = [featurize_segment(x, cfg.mfcc, meta["fs"], fb, meta["window_s"])
                       for x in segs]
            out.parent.mkdir(parents=True, exist_ok=True)
            cache.write_features(out, s.subject, tensors)
        run.outputs.append(str(out))


def _metrics_rows(run_id: str, items) -> list[tuple[str, str, Metrics]]:
    return [(run_id, key, m) for key, m in items]


def cmd_train_cv(run: Run, args) -> None:
    from . import plotting

    cfg = run.cfg
    data = load_dataset(cfg, run)
    curves, hists = [], []

    def on_fold(res, model):
        tag = f"t{res.trial}-f{res.fold}"
        run.note(_save_ckpt(model, run.path("checkpoints", f"{tag}.ck")))
        run.emit(f"histories/{tag}.csv", res.history.to_csv())
        test = data.subset(res.test_index)
        curves.append((tag, test.y, model.predict_proba(test.X)))
        if res.trial == 0:
            hists.append((tag, res.history))

    summary = kfold_cv(data, cfg.cv.k, cfg.cv.trials, cfg.train, cfg.model, on_fold=on_fold)
    rows = _metrics_rows(run.run_id, [(f"t{f.trial}-f{f.fold}", f.metrics) for f in summary.folds])
    run.emit("metrics.csv", metrics_csv(rows, unit="fold"))
    run.emit("summary.json", json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    run.note(plotting.plot_history(hists, run.path("history.png")))
    run.note(plotting.plot_roc(curves, run.path("roc.png")))


def _save_ckpt(model, path: Path) -> Path:
    save_checkpoint(model, path)
    return path


def cmd_train_lopo(run: Run, args) -> None:
    from . import plotting

    cfg = run.cfg
    data = load_dataset(cfg, run)
    rounds = lopo(data, cfg.train, cfg.model)
    curves = []
    for r in rounds:
        assert r.subject not in r.train_subjects
        run.note(_save_ckpt(r.model, run.path("checkpoints", f"lopo-{r.subject}.ck")))
        run.emit(f"histories/lopo-{r.subject}.csv", r.history.to_csv())
        test = data.subset(np.nonzero(data.subjects == r.subject)[0])
        curves.append((r.subject, test.y, r.model.predict_proba(test.X)))
    rows = _metrics_rows(run.run_id, [(r.subject, r.metrics) for r in rounds])
    run.emit("lopo.csv", metrics_csv(rows, unit="subject"))
    summary = {"subjects": [r.subject for r in rounds],
               "mean": mean_metrics([r.metrics for r in rounds])}
    run.emit("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.note(plotting.plot_roc(curves, run.path("roc.png")))


def _lopo_models(run: Run, args, data: Dataset) -> dict:
    cfg = run.cfg
    if args.source:
        src = Path(args.source)
        ck_dir = src / "checkpoints"
        if not ck_dir.is_dir():
            raise FieldError("--from", f"no checkpoints directory in {src}")
        models = {}
        for sid in data.subject_ids():
            p = ck_dir / f"lopo-{sid}.ck"
            if p.exists():
                run.inputs[str(p)] = sha256_file(p)
                models[sid] = load_checkpoint(p, expected=cfg.model)
        if not models:
            raise FieldError("--from", f"no LOPO checkpoints in {ck_dir}")
        return models
    return {r.subject: r.model for r in lopo(data, cfg.train, cfg.model)}


def cmd_finetune(run: Run, args) -> None:
    cfg = run.cfg
    data = load_dataset(cfg, run)
    models = _lopo_models(run, args, data)
    ft_cfg = cfg.finetune_train_config()
    header = "run_id,subject,n_finetune,model,acc,sen,spec,f1,auc"
    lines, skipped = [header], []
    for sid, model in sorted(models.items()):
        subject = data.subset(np.nonzero(data.subjects == sid)[0])
        for n in cfg.finetune.n_per_class:
            try:
                res = finetune(model, subject, n, ft_cfg)
            except NeoSeizeError as exc:
                skipped.append({"subject": sid, "n_per_class": n, "reason": str(exc)})
                log.warning("fine-tuning %s with %d per class skipped: %s", sid, n, exc)
                continue
            run.note(_save_ckpt(res.model, run.path("checkpoints", f"ft-{sid}-n{2 * n}.ck")))
            for name, m in (("raw", res.raw_metrics), ("finetuned", res.metrics)):
                vals = ",".join(f"{v:.10g}" for v in m.as_dict().values())
                lines.append(f"{run.run_id},{sid},{2 * n},{name},{vals}")
    run.emit("finetune.csv", "\n".join(lines) + "\n")
    run.emit("summary.json", json.dumps({"skipped": skipped}, indent=2, sort_keys=True) + "\n")


def cmd_explain(run: Run, args) -> None:
    cfg = run.cfg
    ex = cfg.explain
    data = load_dataset(cfg, run)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        split = explain.build_explain_testset(data, ex.n_per_class, ex.val_fraction, cfg.seed)
    for w in caught:
        log.warning("%s", w.message)
    if args.checkpoint:
        p = Path(args.checkpoint)
        if not p.exists():
            raise FieldError("--checkpoint", f"file not found: {p}")
        run.inputs[str(p)] = sha256_file(p)
        model = load_checkpoint(p, expected=cfg.model)
    else:
        model, hist = train(build_model(cfg.train, cfg.model), split.train, split.val, cfg.train)
        run.note(_save_ckpt(model, run.path("model.ck")))
        run.emit("history.csv", hist.to_csv())
    test = split.test
    run.emit("metrics.csv", metrics_csv([(run.run_id, "explain-test", evaluate(model, test))]))
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(test))
    for sid in test.subject_ids():
        rows = np.nonzero((test.subjects == sid) & (test.y == PREICTAL))[0]
        rows = rows[np.argsort(test.t_start[rows], kind="stable")][: ex.n_explain]
        attrs = [explain.shapley_sampling(model, test.X[i], n_perm=ex.n_perm, seed=int(seeds[i]))
                 for i in rows]
        np.savez(run.path("attributions", f"{sid}.npz"),
                 values=np.stack([a.values for a in attrs]),
                 t_start=test.t_start[rows],
                 f_x=np.array([a.f_x for a in attrs]),
                 f_baseline=np.array([a.f_baseline for a in attrs]),
                 sigma=np.array([a.sigma for a in attrs]),
                 n_permutations=ex.n_perm)
        run.outputs.append(f"attributions/{sid}.npz")
        imp = explain.channel_importance(attrs, sid, cfg.montage, ex.n_avg)
        run.emit(f"importance/{sid}.csv", explain.importance_csv(imp))


def cmd_scalp_plot(run: Run, args) -> None:
    from . import plotting

    cfg = run.cfg
    if not args.source:
        raise FieldError("--from", "scalp-plot needs --from <explain run directory>")
    src = Path(args.source) / "importance"
    files = sorted(src.glob("*.csv")) if src.is_dir() else []
    if not files:
        raise FieldError("--from", f"no importance CSVs under {src}")
    for f in files:
        run.inputs[str(f)] = sha256_file(f)
        imp = explain.read_importance_csv(f.read_text(encoding="utf-8"))
        imp.subject_id = f.stem
        run.emit(f"scalp/{f.stem}.svg", explain.render_scalp_svg(imp, cfg.montage))
        run.note(plotting.plot_scalp(imp, run.path("scalp", f"{f.stem}.png"), cfg.montage))


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "featurize": cmd_featurize,
    "train-cv": cmd_train_cv, "train-lopo": cmd_train_lopo, "finetune": cmd_finetune,
    "explain": cmd_explain, "scalp-plot": cmd_scalp_plot,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="root directory for the run directory "
                                      "(default: paths.runs_dir)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="neoseize", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "write a synthetic cohort (EDF + annotation CSV) to paths.raw_dir",
        "ingest": "filter, montage and window raw recordings into segment caches",
        "featurize": "turn segment caches into MFCC feature caches",
        "train-cv": "stratified k-fold cross-validation",
        "train-lopo": "leave-one-subject-out evaluation",
        "finetune": "few-shot fine-tuning of LOPO models on the held-out subject",
        "explain": "Shapley attributions and channel importance",
        "scalp-plot": "render scalp maps from an explain run",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("finetune", "scalp-plot"):
            sp.add_argument("--from", dest="source",
                            help="run directory to read (train-lopo or explain output)")
        if name == "explain":
            sp.add_argument("--checkpoint", help="explain this model instead of retraining")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config and not Path(args.config).is_file():
        print(f"error: --config: file not found: {args.config}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        for field, msg in exc.errors or [("config", str(exc))]:
            print(f"error: {field}: {msg}", file=sys.stderr)
        return 1
    try:
        run = open_run(args.command, cfg, argv, args.out)
        HANDLERS[args.command](run, args)
        close_run(run)
    except FieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NeoSeizeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run.dir)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
