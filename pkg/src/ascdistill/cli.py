"""Command-line entry point: ``ascdistill <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, gradcheck
from .data import load_dataset, write_dataset
from .distill import DistillConfig
from .evaluation import System, evaluate, export_embeddings, fit_system
from .features import FeatureConfig, FeatureStore
from .nnet import checkpoint
from .pipeline import (ConfigError, Pipeline, StageError, _fold, extract_features, generate,
                       load_config)
from .svm import SvmModel
from .trainer import TrainConfig, train_multistep, train_student, train_teacher

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("ASC_SEED", 0))


def _features(scale: str) -> FeatureConfig:
    return FeatureConfig.paper() if scale == "paper" else FeatureConfig()


def _store(args) -> tuple[FeatureStore, list]:
    dataset, folds = load_dataset(args.data)
    return FeatureStore(dataset, _features(args.scale), getattr(args, "jobs", 1)), folds


def cmd_gen_data(args) -> int:
    dataset, folds = generate(_seed(args), args.classes, args.per_class, args.duration_s,
                              args.rate, args.folds)
    out = write_dataset(dataset, folds, args.out)
    print(f"wrote {len(dataset)} segments ({dataset.n_classes} classes, {len(folds)} folds) to {out}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    dataset, _ = load_dataset(args.data)
    fcfg = _features(args.scale)
    out = extract_features(dataset, fcfg, args.out)
    print(f"wrote {len(dataset)} spectrograms to {out}")
    return EXIT_OK


def _train_config(args, distill=None) -> TrainConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        cfg = TrainConfig.from_dict(d)
    else:
        cfg = TrainConfig(args.arch, args.scale)
    overrides = {k: v for k, v in {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                   "fold_id": args.fold}.items() if v is not None}
    overrides["seed"] = _seed(args) if args.seed is not None or not args.config else cfg.seed
    d = cfg.to_dict()
    d.update(overrides)
    if distill is not None:
        d["distill"] = distill.to_dict()
    return TrainConfig.from_dict(d)


def _write_model(model, trainlog, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out / "model.ckpt")
    trainlog.checkpoint_path = str(out / "model.ckpt")
    trainlog.to_jsonl(out / "trainlog.jsonl")
    print(f"saved {out / 'model.ckpt'} (checksum {model.checksum()[:12]})")


def cmd_train_teacher(args) -> int:
    store, folds = _store(args)
    cfg = _train_config(args)
    fold = _fold(folds, cfg.fold_id)
    if cfg.model_kind == "spectrogram" and not args.single_stage:
        model, tl = train_multistep(cfg, store, fold)
    else:
        model, tl = train_teacher(cfg, store, fold)
    _write_model(model, tl, Path(args.out))
    return EXIT_OK


def cmd_distill(args) -> int:
    teacher, _ = checkpoint.load(args.teacher)
    args.arch = "spectrogram" if teacher.arch.startswith("spectrogram") else teacher.arch
    args.scale = teacher.scale
    store, folds = _store(args)
    dcfg = DistillConfig(args.point, args.temperature, args.softening, args.concat,
                         partner_resample=args.partner_resample)
    cfg = _train_config(args, dcfg)
    cfg.init_from_teacher = args.init_from_teacher
    model, tl = train_student(cfg, teacher, store, _fold(folds, cfg.fold_id))
    _write_model(model, tl, Path(args.out))
    return EXIT_OK


def cmd_train_svm(args) -> int:
    model, _ = checkpoint.load(args.model)
    args.scale = model.scale
    store, folds = _store(args)
    system = fit_system("system", model, store, _fold(folds, args.fold or 1), args.C, args.epochs, _seed(args))
    system.svm.save(args.out)
    print(f"saved {args.out} (objective {system.svm.objective_history[-1]:.4f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    systems = []
    for spec in args.system:
        if ":" not in spec:
            raise UsageError(f"--system expects CKPT:SVM, got {spec!r}")
        ckpt, svm_path = spec.rsplit(":", 1)
        model, _ = checkpoint.load(ckpt)
        name = "spectrogram" if model.arch.startswith("spectrogram") else model.arch
        if any(s.name == name for s in systems):
            name = f"{name}{len(systems)}"
        systems.append(System(name, model, SvmModel.load(svm_path)))
    scales = {s.model.scale for s in systems}
    if len(scales) != 1:
        raise UsageError("all systems must share one scale")
    args.scale = scales.pop()
    store, folds = _store(args)
    report = evaluate(systems, store, _fold(folds, args.fold or 1), {"seed": _seed(args)})
    report.write(args.out)
    for name, acc in report.accuracy.items():
        print(f"{name:12s} {100 * acc:6.2f}%")
    return EXIT_OK


def _load_pipeline_config(args):
    return load_config(args.config, args.seed)


def cmd_grid(args) -> int:
    cfg = _load_pipeline_config(args)
    cfg["eval"]["grids"] = [args.table]
    pipe = Pipeline(cfg, args.out, args.force, args.jobs)
    dataset, folds = pipe.data()
    fold = _fold(folds, cfg["eval"]["fold_id"])
    store = pipe.features(dataset)
    teacher = pipe.teacher("spectrogram" if args.arch is None else args.arch, store, fold)
    grid = pipe.grid(args.table, teacher, store, fold)
    csv_path, _ = grid.write(pipe.out / "reports")
    _print_events(pipe.cache.events)
    sys.stdout.write(grid.to_csv())
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, _ = checkpoint.load(args.model)
    args.scale = model.scale
    store, folds = _store(args)
    ids = args.ids.split(",") if args.ids else list(_fold(folds, args.fold or 1).val_ids)
    export_embeddings(model, store, ids, args.out)
    print(f"wrote {len(ids)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run_suite(args.only, seed=args.seed or 0, inject_fault=args.inject_fault)
    except KeyError as e:
        raise UsageError(str(e).strip("'\"")) from None
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:28s} max_rel_error={r.max_rel_error:.3e} n={r.n_checked:4d} {status}")
    if failed:
        print("gradient check failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks below {gradcheck.TOLERANCE:g}")
    return EXIT_OK


def _print_events(events) -> None:
    for stage, status in events:
        print(f"stage {stage}: {status}")


def cmd_run(args) -> int:
    cfg = _load_pipeline_config(args)
    pipe = Pipeline(cfg, args.out, args.force, args.jobs)
    result = pipe.run()
    _print_events(result.events)
    for name in result.baseline.accuracy:
        print(f"{name:12s} W/O TS {100 * result.baseline.accuracy[name]:6.2f}%   "
              f"W/ TS {100 * result.distilled.accuracy[name]:6.2f}%")
    for table, grid in result.grids.items():
        print(f"{table}:")
        sys.stdout.write(grid.to_csv())
    print(f"reports in {result.report_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ascdistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, fold=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset directory (manifest.jsonl + folds.json)")
        if fold:
            sp.add_argument("--fold", type=int, help="fold id (default 1)")
        sp.add_argument("--seed", type=int, default=None, help="seed (falls back to $ASC_SEED, then 0)")
        sp.add_argument("--jobs", type=int, default=1, help="feature-extraction threads")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--per-class", type=int, default=24)
    sp.add_argument("--duration-s", type=float, default=1.0)
    sp.add_argument("--rate", type=int, default=4000)
    sp.add_argument("--folds", type=int, default=4)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("extract-features", help="write spectrogram files for a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", choices=["desk", "paper"], default="desk")
    sp.set_defaults(func=cmd_extract_features)

    for name, func, help_ in (("train-teacher", cmd_train_teacher, "train a teacher with one-hot labels"),
                              ("distill", cmd_distill, "train a student against a teacher")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="TrainConfig JSON (flags override its scalars)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.set_defaults(func=func)
        if name == "train-teacher":
            sp.add_argument("--arch", choices=["waveform", "spectrogram"], default="spectrogram")
            sp.add_argument("--scale", choices=["desk", "paper"], default="desk")
            sp.add_argument("--single-stage", action="store_true",
                            help="skip multi-step training for the spectrogram model")
        else:
            sp.add_argument("--teacher", required=True, help="teacher checkpoint")
            sp.add_argument("--point", choices=["output", "embedding", "both"], default="output")
            sp.add_argument("--temperature", type=float, default=5.0)
            sp.add_argument("--softening", choices=["probability", "logit"], default="probability")
            sp.add_argument("--concat", type=int, default=2, help="segments per teacher input")
            sp.add_argument("--partner-resample", choices=["per-epoch", "fixed"], default="per-epoch")
            sp.add_argument("--init-from-teacher", action="store_true")

    sp = sub.add_parser("train-svm", help="fit the scoring SVM on a model's embeddings")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="output JSON path")
    sp.add_argument("--C", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=200)
    sp.set_defaults(func=cmd_train_svm)

    sp = sub.add_parser("evaluate", help="score systems and their ensemble on a fold")
    common(sp)
    sp.add_argument("--system", action="append", required=True, metavar="CKPT:SVM")
    sp.add_argument("--out", required=True, help="report directory")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grid", help="run the temperature/duration or distillation-point grid")
    sp.add_argument("config")
    sp.add_argument("--table", choices=["table4", "table5"], default="table4")
    sp.add_argument("--arch", choices=["waveform", "spectrogram"])
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("export-embeddings", help="write embeddings as CSV")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--ids", help="comma-separated ids (default: the fold's validation ids)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--only", action="append", help="restrict to a check name (repeatable)")
    sp.add_argument("--inject-fault", metavar="NAME", help="flip the analytic gradient sign of NAME")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("run", help="full pipeline from a config file")
    sp.add_argument("config")
    sp.add_argument("--out", help="output directory (default: config output_dir)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true", help="recompute cached stages")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
