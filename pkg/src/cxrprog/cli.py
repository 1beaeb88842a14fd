"""``cxrprog`` command line: synthetic data, pretraining, fine-tuning, evaluation, plot data.

Every artifact-producing command writes a manifest next to its outputs holding
the fully resolved arguments; ``cxrprog rerun --manifest M`` replays it.
Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cohort as C
from .augment import AugmentConfig
from .errors import ContractError, InvalidInputError, UndefinedMetricError
from .evalstats import (
    ScoredSet, evaluate_models, format_table, read_scores, write_comparisons_csv, write_report_csv, write_scores,
)
from .models import (
    MODES, FinetuneConfig, ImageSet, MipConfig, SequenceSet, build_mip_model, build_sip_model, finetune,
    finetune_mip, predict_mip, predict_sip, save_model,
)
from .pgm import read_pgm
from .pretrain import (
    PretrainConfig, SupervisedConfig, init_moco, load_encoder_state, pretrain_moco, save_moco, save_supervised,
    supervised_pretrain,
)
from .synth import SynthConfig, synth_cohort, synth_pretrain_corpus

log = logging.getLogger("cxrprog")

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Arguments parsed but make no sense together."""


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}")
    return widths


def manifest_path(out: Path, is_dir: bool) -> Path:
    """``DIR/manifest.json`` for directory outputs, ``FILE.manifest.json`` for single-file outputs."""
    return out / MANIFEST if is_dir else out.with_name(out.name + "." + MANIFEST)


def _write_manifest(target: Path, args: argparse.Namespace) -> None:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.rjust(width[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).rjust(width[c]) for c in cols))


# -- synth ---------------------------------------------------------------------
def cmd_synth(args) -> None:
    if args.patients < 1:
        raise UsageError("--patients must be >= 1")
    if args.pretrain_images < 0:
        raise UsageError("--pretrain-images must be >= 0")
    out = Path(args.out)
    cfg = SynthConfig(image_size=args.image_size, trend=args.trend, hazard_steepness=args.hazard_steepness)
    coh = synth_cohort(args.patients, cfg, seed=args.seed, out_dir=out)
    if args.pretrain_images:
        synth_pretrain_corpus(args.pretrain_images, cfg, seed=args.seed + 1, out_dir=out / "corpus")
    split = C.patient_split({s.patient_id for s in coh.scans}, np.random.default_rng(args.seed))
    rows = C.split_summary(coh.events, coh.scans, split)
    _write_csv(out / "summary.csv", list(rows[0]), [list(r.values()) for r in rows])
    _write_manifest(manifest_path(out, True), args)
    _print_rows(rows)


# -- pretrain ------------------------------------------------------------------
def load_corpus(corpus_dir: Path, with_findings: bool):
    """Images (and findings) of a corpus directory: ``findings.csv`` if present, else every PGM."""
    index = corpus_dir / "findings.csv"
    if index.exists():
        with open(index, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        images = [read_pgm(corpus_dir / r[0]) for r in rows[1:]]
        findings = np.array([[int(x) for x in r[1:]] for r in rows[1:]], dtype=np.int8)
        return images, findings
    if with_findings:
        raise InvalidInputError(f"{index} is required for supervised pretraining")
    paths = sorted(corpus_dir.rglob("*.pgm"))
    if not paths:
        raise InvalidInputError(f"no PGM images under {corpus_dir}")
    return [read_pgm(p) for p in paths], None


def cmd_pretrain(args) -> None:
    corpus_dir = Path(args.corpus)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory {corpus_dir} not found")
    images, findings = load_corpus(corpus_dir, args.mode == "supervised")
    aug = AugmentConfig(target_size=args.image_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "moco":
        cfg = PretrainConfig(lr=args.lr, feature_dim=args.feature_dim, queue_size=args.queue_size, tau=args.tau,
                             momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
                             encoder_widths=args.widths, seed=args.seed, augment=aug)
        state, history = pretrain_moco(images, cfg, init_moco(cfg))
        save_moco(out, state, cfg)
        rows = [[h["epoch"], f"{h['loss']:.6f}", f"{h['top1']:.6f}", f"{h['lr']:.8f}"] for h in history]
        header = ["epoch", "loss", "top1", "lr"]
    else:
        cfg = SupervisedConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                               encoder_widths=args.widths, seed=args.seed, augment=aug)
        net, history = supervised_pretrain(images, findings, cfg)
        save_supervised(out, net, cfg)
        rows = [[h["epoch"], f"{h['loss']:.6f}", f"{h['lr']:.8f}"] for h in history]
        header = ["epoch", "loss", "lr"]
    _write_csv(out.with_name(out.name + ".loss.csv"), header, rows)
    _write_manifest(manifest_path(out, False), args)
    print(f"wrote {out} after {len(history)} epochs; final loss {history[-1]['loss']:.4f}")


# -- finetune ------------------------------------------------------------------
def load_dataset(data_dir: Path, task: str):
    events, scans = C.ingest(data_dir / "events.csv", data_dir / "scans.csv")
    eligible = C.apply_task_filter(scans, events, task)
    images = {s.scan_id: read_pgm(data_dir / s.image_path) for s in eligible}
    layout = C.LAYOUTS[task]
    if task == "mip":
        examples = C.build_sequences(eligible, events, layout)
    else:
        examples = C.label_examples(eligible, events, layout)
    return examples, images, layout


def _patient(ex) -> str:
    return ex.patient_id if isinstance(ex, C.LabeledSequence) else ex.scan.patient_id


def _subset(examples, images, patients: set[str], task: str):
    chosen = [ex for ex in examples if _patient(ex) in patients]
    if task == "mip":
        return SequenceSet.from_sequences(chosen)
    return ImageSet.from_examples(chosen, images)


def _grid(args) -> list[dict]:
    axes = {"lr": args.lr}
    if args.task == "mip":
        axes.update(p_drop=args.p_drop, d_proj=args.d_proj, pooling=args.pooling)
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def _fit(args, config: dict, train, val, images, layout, encoder_state):
    aug = AugmentConfig(target_size=args.image_size)
    monitor = C.PRIMARY_LABEL[args.task]
    if args.task == "mip":
        cfg = MipConfig(lr=config["lr"], p_drop=config["p_drop"], d_proj=config["d_proj"],
                        pooling=config["pooling"], freeze_encoder=args.mode == "CL", epochs=args.epochs or 50, seed=args.seed, monitor=monitor,
                        augment=aug)
        model = build_mip_model(layout.size, cfg, encoder_state, args.widths)
        _, history = finetune_mip(model, train, val, images, layout)
    else:
        cfg = FinetuneConfig(mode=args.mode, epochs=args.epochs, lr=config["lr"], seed=args.seed,
                             monitor=monitor, augment=aug)
        model = build_sip_model(layout.size, args.mode, encoder_state, args.widths, seed=args.seed)
        _, history = finetune(model, train, val, cfg, layout)
    return model, history


def _predict(args, model, data, images) -> np.ndarray:
    if args.task == "mip":
        return predict_mip(model, data, images)
    return predict_sip(model, data.images, AugmentConfig(target_size=args.image_size))


def cmd_finetune(args) -> None:
    if args.folds == 1 or args.folds < 0:
        raise UsageError("--folds must be 0 (no cross-validation) or >= 2")
    if args.task == "mip" and args.mode not in ("CL", "FT"):
        raise UsageError("the sequence task trains with a frozen (CL) or tuned (FT) encoder")
    data_dir, out = Path(args.data), Path(args.out)
    encoder_state = None
    if args.mode != "SCRATCH":
        if not args.encoder:
            raise UsageError(f"--encoder is required for mode {args.mode}")
        encoder_state, _ = load_encoder_state(args.encoder)
    examples, images, layout = load_dataset(data_dir, args.task)
    if not examples:
        raise InvalidInputError(f"no eligible examples for task {args.task}")
    rng = np.random.default_rng(args.seed)
    split = C.patient_split({_patient(ex) for ex in examples}, rng)
    trainval = set(split["trainval"])
    out.mkdir(parents=True, exist_ok=True)
    grid = _grid(args)
    monitor = C.PRIMARY_LABEL[args.task]
    summary_cfg = grid[0]
    if args.folds:
        positive = C.patient_positive([ex for ex in examples if _patient(ex) in trainval],
                                      layout.index_of(monitor))
        folds = C.stratified_kfold(sorted(trainval), args.folds, positive, rng)
        grid_rows, best, best_models = [], None, None
        for ci, config in enumerate(grid):
            aucs, models = [], []
            for k, fold in enumerate(folds):
                held = set(fold)
                train = _subset(examples, images, trainval - held, args.task)
                val = _subset(examples, images, held, args.task)
                model, history = _fit(args, config, train, val, images, layout, encoder_state)
                auc = history[-1]["val_monitor"]
                aucs.append(auc)
                models.append(model)
                grid_rows.append([ci, json.dumps(config, sort_keys=True), k, f"{auc:.6f}"])
            mean = float(np.nanmean(aucs)) if not np.all(np.isnan(aucs)) else float("nan")
            if best is None or mean > best[0]:
                best, best_models, summary_cfg = (mean, ci), models, config
        _write_csv(out / "grid.csv", ["config", "params", "fold", "val_auc"], grid_rows)
        for k, model in enumerate(best_models):
            save_model(out / f"fold{k}.ckpt", model, layout, args.task, {"fold": k})
        _write_csv(out / "selection.csv", ["config", "params", "mean_val_auc", "monitor"],
                   [[best[1], json.dumps(summary_cfg, sort_keys=True), f"{best[0]:.6f}", monitor]])
        print(f"selected config {best[1]} {json.dumps(summary_cfg, sort_keys=True)} "
              f"mean val AUC {best[0]:.4f}")
    train = _subset(examples, images, trainval, args.task)
    test = _subset(examples, images, set(split["test"]), args.task)
    model, _ = _fit(args, summary_cfg, train, None, images, layout, encoder_state)
    save_model(out / "model.ckpt", model, layout, args.task)
    probs = _predict(args, model, test, images)
    label_sets = {}
    for j, name in enumerate(layout.names):
        m = test.mask[:, j]
        label_sets[name] = ScoredSet(probs[m, j], test.labels[m, j], [test.ids[i] for i in np.flatnonzero(m)])
    write_scores(out / "scores.csv", label_sets)
    _write_manifest(manifest_path(out, True), args)
    print(f"wrote {out / 'model.ckpt'} and test scores for {len(test)} examples")


# -- evaluate ------------------------------------------------------------------
def cmd_evaluate(args) -> None:
    names = args.names or [Path(p).parent.name or Path(p).stem for p in args.scores]
    if len(names) != len(args.scores):
        raise UsageError("--names must match --scores one to one")
    if len(set(names)) != len(names):
        raise UsageError("model names must be unique; pass --names")
    models = {}
    for name, path in zip(names, args.scores):
        sets = read_scores(path)
        if args.labels:
            missing = [lab for lab in args.labels if lab not in sets]
            if missing:
                raise ContractError(f"{path} has no scores for {', '.join(missing)}")
            sets = {lab: sets[lab] for lab in args.labels}
        models[name] = sets
    report = evaluate_models(models, n_iter=args.n_boot, seed=args.seed, alpha=args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", report)
    write_comparisons_csv(out / "comparisons.csv", report)
    table = format_table(report)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    _write_manifest(manifest_path(out, True), args)
    print(table)


# -- plot-events ---------------------------------------------------------------
def cmd_plot_events(args) -> None:
    data_dir = Path(args.data)
    events, scans = C.ingest(data_dir / "events.csv", data_dir / "scans.csv")
    rows = [r for task in ("sip", "mip") for r in C.event_window_counts(events, scans, task)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, list(rows[0]), [list(r.values()) for r in rows])
    _write_manifest(manifest_path(out, False), args)
    _print_rows(rows)


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxrprog", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--patients", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--trend", type=float, default=0.0)
    s.add_argument("--hazard-steepness", type=float, default=7.0)
    s.add_argument("--pretrain-images", type=int, default=0, help="also write an unlabelled corpus of this size")
    s.set_defaults(func=cmd_synth)

    d = PretrainConfig()
    s = sub.add_parser("pretrain", help="MoCo or supervised encoder pretraining")
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=("moco", "supervised"), default="moco")
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--lr", type=float, default=d.lr)
    s.add_argument("--feature-dim", type=int, default=d.feature_dim)
    s.add_argument("--queue-size", type=int, default=d.queue_size)
    s.add_argument("--tau", type=float, default=d.tau)
    s.add_argument("--momentum", type=float, default=d.momentum)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--widths", type=_widths, default=d.encoder_widths)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a prognosis model with optional cross-validated grid search")
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=("sip", "orp", "mip"), default="sip")
    s.add_argument("--mode", choices=MODES, default="FT")
    s.add_argument("--encoder")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, nargs="+", default=[1e-3])
    s.add_argument("--p-drop", type=float, nargs="+", default=[0.1])
    s.add_argument("--d-proj", type=int, nargs="+", default=[64])
    s.add_argument("--pooling", choices=("sum", "last"), nargs="+", default=["sum"])
    s.add_argument("--folds", type=int, default=0)
    s.add_argument("--widths", type=_widths, default=d.encoder_widths)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="AUCs, bootstrap CIs and paired tests from score files")
    s.add_argument("--scores", nargs="+", required=True)
    s.add_argument("--names", nargs="+")
    s.add_argument("--labels", nargs="+")
    s.add_argument("--n-boot", type=int, default=1000)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot-events", help="event counts per time window and task")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot_events)

    s = sub.add_parser("rerun", help="replay a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="write outputs here instead of the recorded location")
    return p


def _from_manifest(parser: argparse.ArgumentParser, path: str, out: str | None) -> argparse.Namespace:
    recorded = json.loads(Path(path).read_text(encoding="utf-8"))
    if out is not None:
        recorded["out"] = out
    ns = parser.parse_args([recorded["command"], *_required_stub(recorded)])
    for key, value in recorded.items():
        if key == "widths":
            value = tuple(value)
        setattr(ns, key, value)
    return ns


def _required_stub(recorded: dict) -> list[str]:
    # satisfy argparse's required flags; the recorded values overwrite them
    stubs = {"synth": ["--patients", "1", "--out", "."], "pretrain": ["--corpus", ".", "--out", "."],
             "finetune": ["--data", ".", "--out", "."], "evaluate": ["--scores", ".", "--out", "."],
             "plot-events": ["--data", ".", "--out", "."]}
    if recorded.get("command") not in stubs:
        raise UsageError(f"manifest names no known command: {recorded.get('command')!r}")
    return stubs[recorded["command"]]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "rerun":
            args = _from_manifest(parser, args.manifest, args.out)
        args.func(args)
    except UsageError as exc:
        print(f"cxrprog: usage error: {exc}", file=sys.stderr)
        return 2
    except UndefinedMetricError as exc:
        print(f"cxrprog: undefined metric: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"cxrprog: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
