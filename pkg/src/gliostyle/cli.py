"""Command-line driver for the full workflow.

Every subcommand reads only the paths given as flags and writes only under
its ``--out`` location. Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import checkpoint_load, checkpoint_save
from .errors import DataError, NumericalError
from .features import build_extractor
from .metrics import (dice_summary, lesion_wise_dice, region_dice_report, summarize,
                      write_dice_csv, write_json, write_lesion_csv)
from .nifti import read_label_volume, write_nifti
from .nst import StyleTransferConfig, check_common_spacing, pair_randomly, stylize_case
from .phantom import DegradeSpec, phantom_cohort
from .preprocess import preprocess_case
from .stats import paired_t_test
from .training import (CSV_COLUMNS, EpochRecord, ExperimentConfig, finetune, make_folds,
                       new_model, read_records_csv, select_cases, train, write_records_csv)
from .unet import PRESETS, sliding_window_predict
from .volume import REGIONS, Case, load_dataset, write_dataset

log = logging.getLogger("gliostyle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class CommandOutcome:
    exit_code: int
    reports: list[Path] = field(default_factory=list)
    log_path: Path | None = None


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected three positive numbers, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_all(descriptors) -> list[Case]:
    cases: dict[str, Case] = {}
    for d in descriptors:
        for case in load_dataset(d):
            if case.id in cases:
                raise DataError(f"case id {case.id!r} appears in more than one descriptor")
            cases[case.id] = case
    return [cases[k] for k in sorted(cases)]


def _pmap(fn, items, jobs: int) -> list:
    """Ordered map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig(dataset=getattr(args, "dataset", "GLI+SSA"), epochs=args.epochs,
                            unet=args.unet, seed=args.seed, initial_lr=args.lr,
                            iterations_per_epoch=args.iterations, val_batches=args.val_batches)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phantom_gen(args) -> list[Path]:
    degrade = DegradeSpec(factor=args.degrade_factor, seed=args.seed) if args.degrade else None
    prefix = args.prefix or ("degraded" if args.degrade else "clean")
    cases = phantom_cohort(args.count, args.seed, (args.dims,) * 3, degrade, prefix)
    return [write_dataset(cases, _out_dir(args.out), prefix)]


def _preprocess_one(case: Case, spacing) -> Case:
    return preprocess_case(case, spacing)


def cmd_preprocess(args) -> list[Path]:
    cases = _load_all(args.data)
    out = _pmap(partial(_preprocess_one, spacing=args.spacing), cases, args.jobs)
    return [write_dataset(out, _out_dir(args.out), "preprocessed")]


def _stylize_pair(pair, content, style, extractor, config):
    case, traces = stylize_case(content[pair.content_case_id], style[pair.style_case_id], extractor, config)
    decreased = {m: float(np.mean(t[-1, :, 0] < t[0, :, 0])) for m, t in traces.items()}
    loss = {m: [float(t[0, :, 0].sum()), float(t[-1, :, 0].sum())] for m, t in traces.items()}
    return case, {"content": pair.content_case_id, "style": pair.style_case_id,
                  "fraction_decreased": decreased, "total_loss_initial_final": loss}


def cmd_augment(args) -> list[Path]:
    content = {c.id: c for c in _load_all(args.content)}
    style = {c.id: c for c in _load_all(args.style)}
    config = StyleTransferConfig(alpha=args.alpha, beta=args.beta, iterations=args.iters,
                                 step_size=args.step, seed=args.seed)
    extractor = build_extractor()
    check_common_spacing([*content.values(), *style.values()])
    pairs = pair_randomly(content, style, args.seed)
    fn = partial(_stylize_pair, content=content, style=style, extractor=extractor, config=config)
    results = _pmap(fn, pairs, args.jobs)
    stylized = [c for c, _ in results]
    summaries = [s for _, s in results]
    out = _out_dir(args.out)
    desc = write_dataset(stylized, out, "augmented")
    manifest = out / "pairs.json"
    write_json({"config": {"alpha": config.alpha, "beta": config.beta, "iterations": config.iterations,
                           "step_size": config.step_size, "seed": config.seed, "init": config.init.value},
                "extractor": json.loads(extractor.spec.to_json()), "pairs": summaries}, manifest)
    return [desc, manifest]


def _save_run(out: Path, result, prefix: str = "") -> list[Path]:
    paths = [out / f"{prefix}latest.munt", out / f"{prefix}best.munt", out / f"{prefix}records.csv"]
    checkpoint_save(result.latest, paths[0])
    checkpoint_save(result.best, paths[1])
    write_records_csv(result.records, paths[2])
    return paths


def cmd_train(args) -> list[Path]:
    config = _experiment(args)
    cases = select_cases(_load_all(args.data), config.dataset)
    folds = make_folds([c.id for c in cases], args.seed, args.folds)
    out = _out_dir(args.out)
    best, earlier = None, []
    if args.resume:
        model = checkpoint_load(args.resume)
        resume_dir = Path(args.resume).parent
        if (resume_dir / "best.munt").is_file():
            best = checkpoint_load(resume_dir / "best.munt")
        if (resume_dir / "records.csv").is_file():
            earlier = [r for r in read_records_csv(resume_dir / "records.csv") if r.epoch <= model.epoch]
    else:
        model = new_model(config)
    result = train(model, folds, args.fold, cases, config, best)
    result = result._replace(records=earlier + result.records)
    write_json({"k": folds.k, "seed": folds.seed, "assignment": folds.assignment}, out / "folds.json")
    return _save_run(out, result) + [out / "folds.json"]


def cmd_finetune(args) -> list[Path]:
    config = _experiment(args)
    pretrained = checkpoint_load(args.checkpoint)
    cases = _load_all(args.data)
    val = _load_all(args.val) if args.val else None
    result = finetune(pretrained, cases, config, val)
    return _save_run(_out_dir(args.out), result)


def _run_fold(fold: int, cases, folds, config):
    return fold, train(new_model(config), folds, fold, cases, config)


def _mean_records(runs: list[list[EpochRecord]]) -> list[EpochRecord]:
    n = min(len(r) for r in runs)
    out = []
    for i in range(n):
        rows = [r[i] for r in runs]
        out.append(EpochRecord(rows[0].epoch, rows[0].lr, *(float(np.mean([getattr(x, c) for x in rows]))
                                                          for c in CSV_COLUMNS[2:])))
    return out


def cmd_crossval(args) -> list[Path]:
    config = _experiment(args)
    cases = select_cases(_load_all(args.data), config.dataset)
    folds = make_folds([c.id for c in cases], args.seed, args.folds)
    out = _out_dir(args.out)
    results = _pmap(partial(_run_fold, cases=cases, folds=folds, config=config), range(folds.k), args.jobs)
    paths, summary = [], {}
    for fold, result in results:
        paths += _save_run(_out_dir(out / f"fold{fold}"), result)
        summary[str(fold)] = {"best_pseudo_dice": result.best.meta.get("pseudo_dice"),
                              "best_epoch": result.best.epoch,
                              "latest_pseudo_dice": result.latest.meta.get("pseudo_dice")}
    mean = _mean_records([r.records for _, r in results])
    if args.report_epochs:
        wanted = set(args.report_epochs)
        mean = [r for r in mean if r.epoch in wanted]
    table = out / "crossval.csv"
    write_records_csv(mean, table)
    for key in ("best_pseudo_dice", "latest_pseudo_dice"):
        summary[f"mean_{key}"] = summarize(v[key] for k, v in summary.items() if k.isdigit())["mean"]
    summary["dataset"] = config.dataset
    write_json(summary, out / "crossval.json")
    write_json({"k": folds.k, "seed": folds.seed, "assignment": folds.assignment}, out / "folds.json")
    return [table, out / "crossval.json", out / "folds.json", *paths]


def _predict_one(case: Case, model):
    return case.id, sliding_window_predict(model, case)


def cmd_predict(args) -> list[Path]:
    model = checkpoint_load(args.checkpoint)
    cases = _load_all(args.data)
    out = _out_dir(args.out)
    files = {}
    for cid, pred in _pmap(partial(_predict_one, model=model), cases, args.jobs):
        name = f"{cid}_pred.nii"
        write_nifti(pred, out / name)
        files[cid] = name
    manifest = out / "predictions.json"
    write_json({"checkpoint": str(args.checkpoint), "cases": files}, manifest)
    return [manifest]


def _evaluate_one(case: Case, pred_dir: Path, files: dict, lesion: bool):
    if case.truth is None:
        raise DataError(f"case {case.id!r} has no ground truth to evaluate against")
    if case.id not in files:
        raise DataError(f"no prediction for case {case.id!r} in {pred_dir}")
    pred = read_label_volume(pred_dir / files[case.id])
    report = region_dice_report(pred, case.truth, case.id)
    lw = {r: lesion_wise_dice(pred, case.truth, r) for r in REGIONS} if lesion else None
    return report, lw


def cmd_evaluate(args) -> list[Path]:
    pred_dir = Path(args.pred)
    try:
        files = json.loads((pred_dir / "predictions.json").read_text())["cases"]
    except FileNotFoundError:
        raise DataError(f"{pred_dir} has no predictions.json; run 'predict' first") from None
    cases = _load_all(args.data)
    fn = partial(_evaluate_one, pred_dir=pred_dir, files=files, lesion=args.lesion_out is not None)
    results = _pmap(fn, cases, args.jobs)
    reports = [r for r, _ in results]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dice_csv(reports, out)
    paths = [out]
    if args.lesion_out:
        write_lesion_csv([(r.case_id, lw) for r, lw in results], args.lesion_out)
        paths.append(Path(args.lesion_out))
    summary = out.with_suffix(".json")
    write_json(dice_summary(reports), summary)
    return paths + [summary]


def cmd_stats(args) -> list[Path]:
    a, b = read_records_csv(args.a), read_records_csv(args.b)
    if [r.epoch for r in a] != [r.epoch for r in b]:
        raise DataError(f"epoch columns differ: {[r.epoch for r in a]} vs {[r.epoch for r in b]}")
    column = args.column
    res = paired_t_test([getattr(r, column) for r in a], [getattr(r, column) for r in b])
    print(f"t={res.t_stat:.4f}, p={res.p_value:.4f}, df={res.df}")
    if args.out:
        write_json(res.as_dict(), args.out)
        return [Path(args.out)]
    return []


def cmd_report(args) -> list[Path]:
    rows = []
    for fold, epoch, path in args.entry:
        with open(path, newline="") as fh:
            data = list(csv.DictReader(fh))
        if not data:
            raise DataError(f"{path}: no lesion-wise rows")
        missing = [f"Dice_{r}" for r in REGIONS if f"Dice_{r}" not in data[0]]
        if missing:
            raise DataError(f"{path}: not a lesion-wise CSV (missing {missing})")
        means = [float(np.mean([float(row[f"Dice_{r}"]) for row in data])) for r in REGIONS]
        rows.append((int(fold), int(epoch), means, len(data)))
    rows.sort(key=lambda r: (r[0], r[1]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("fold,epoch," + ",".join(f"Dice_{r}" for r in REGIONS) + ",cases\n")
        for fold, epoch, means, n in rows:
            fh.write(f"{fold},{epoch}," + ",".join(f"{m:.4f}" for m in means) + f",{n}\n")
    return [out]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _training_flags(p, epochs: int = 30):
    p.add_argument("--seed", type=int, required=True, help="seed for folds, weights and sampling")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--iterations", type=int, default=50, help="training batches per epoch")
    p.add_argument("--val-batches", type=int, default=4)
    p.add_argument("--unet", default="desk2d", choices=sorted(PRESETS), help="U-Net configuration id")
    p.add_argument("--lr", type=float, default=1e-2, help="initial (pretraining) learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gliostyle", description="Glioma segmentation with style-transfer augmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log", help="also write log messages to this file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="generate synthetic phantom cases")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, default=64, help="cube edge length in voxels")
    p.add_argument("--degrade", action="store_true", help="apply the low-quality scanner degradation")
    p.add_argument("--degrade-factor", type=float, default=2.0)
    p.add_argument("--prefix", help="case id prefix (default: clean / degraded)")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="crop, normalize and resample cases")
    p.add_argument("--data", action="append", required=True, help="dataset descriptor (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=_triple, default=(1.0, 1.0, 1.0), help="target spacing, e.g. 1,1,1")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="stylize content cases against random style partners")
    p.add_argument("--content", action="append", required=True, help="content (SSA) descriptor")
    p.add_argument("--style", action="append", required=True, help="style (GLI) descriptor")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1e3)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="GLI+SSA", choices=["GLI", "GLI+SSA", "GLI+SSA2"])
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--resume", help="latest.munt to continue from (best.munt and records.csv beside it are reused)")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True, help="training descriptor (repeatable)")
    p.add_argument("--val", action="append", help="held-out validation descriptor")
    p.add_argument("--out", required=True)
    _training_flags(p, epochs=10)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("crossval", help="train every fold and tabulate mean epoch records")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="GLI+SSA", choices=["GLI", "GLI+SSA", "GLI+SSA2"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--report-epochs", type=_int_list, help="epochs to keep in crossval.csv, e.g. 2,5,10,30")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    _training_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("predict", help="sliding-window segmentation of every case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-region Dice of predictions against truth")
    p.add_argument("--pred", required=True, help="directory written by 'predict'")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--out", required=True, help="Dice CSV path (a .json summary is written alongside)")
    p.add_argument("--lesion-out", help="also write lesion-wise Dice to this CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="paired t-test between two epoch-record CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--column", default="pseudo_dice", choices=list(CSV_COLUMNS[1:]))
    p.add_argument("--out", help="write the result as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="aggregate per-fold lesion-wise CSVs into one table")
    p.add_argument("--entry", nargs=3, action="append", required=True, metavar=("FOLD", "EPOCH", "CSV"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def _setup_logging(args) -> logging.Handler | None:
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    handler = None
    if args.log:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(args.log, mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    return handler


def run(argv=None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return CommandOutcome(EXIT_USAGE)
    except SystemExit as exc:  # --help / --version
        return CommandOutcome(int(exc.code or 0))
    handler = _setup_logging(args)
    outcome = CommandOutcome(EXIT_OK, log_path=Path(args.log) if args.log else None)
    try:
        outcome.reports = [Path(p) for p in args.func(args)]
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        outcome.exit_code = EXIT_DATA
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()
    return outcome


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    with contextlib.suppress(KeyboardInterrupt):
        sys.exit(main())
