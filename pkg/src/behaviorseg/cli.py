"""Command-line interface: ``behaviorseg fit|select-k|analyze|synth``.

Exit codes: 0 success, 1 data/runtime error, 2 usage/configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__, reports
from .config import RunConfig, parse_k_range
from .errors import ConfigError, SegmentationError
from .ingest import PeriodSpec, read_assignments, read_events, write_assignments
from .model import SegmentModel, digest_file
from .pipeline import analyze, fit_model

log = logging.getLogger("behaviorseg")

FORMATS = ("csv", "json", "text")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _fraction(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _k_range(text):
    try:
        return parse_k_range(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _period(text):
    try:
        return PeriodSpec.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--format", choices=FORMATS, default="text", help="stdout format")
    common.add_argument("-v", "--verbose", action="count", default=0)

    engineering = argparse.ArgumentParser(add_help=False)
    engineering.add_argument("events", help="definition-period event log (.csv or .jsonl)")
    engineering.add_argument("--period", type=_period, help="definition window START..END (UTC seconds)")
    engineering.add_argument("--features", help="comma-separated engagement counters to use")
    engineering.add_argument("--variance-threshold", type=_fraction)
    engineering.add_argument("--outlier-quantile", type=_fraction)
    engineering.add_argument("--drop-constant", action="store_true", default=None,
                             help="drop zero-variance columns instead of failing")
    engineering.add_argument("--curve", help="write the K-selection curve CSV here")

    p = _Parser(prog="behaviorseg", description="Behavioral segmentation for A/B test analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", parents=[common, engineering], help="build a segment model")
    ks = fit.add_mutually_exclusive_group()
    ks.add_argument("--k", type=int, help="fit exactly K segments (skip selection)")
    ks.add_argument("--k-range", type=_k_range, help="candidate K values A..B")
    fit.add_argument("--model", help="output model file (default model.json)")

    sel = sub.add_parser("select-k", parents=[common, engineering], help="K-selection curve only")
    sel.add_argument("--k-range", type=_k_range, help="candidate K values A..B")

    an = sub.add_parser("analyze", parents=[common], help="segment-level experiment analysis")
    an.add_argument("model", help="model file written by fit")
    an.add_argument("events", help="experiment-period event log")
    an.add_argument("--assignments", help="assignment log CSV (user_id,arm)")
    an.add_argument("--period", type=_period, help="experiment window START..END (UTC seconds)")
    an.add_argument("--suppress-below", type=_fraction, help="suppress segments under this user share")
    an.add_argument("--alpha", type=_fraction)
    an.add_argument("--bonferroni", action="store_true", default=None)
    an.add_argument("--out-dir", help="report directory (default reports)")

    sy = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    sy.add_argument("scenario", nargs="?", help="scenario JSON (default: shipped example)")
    sy.add_argument("--n-users", type=int)
    sy.add_argument("--out-dir", default=".", help="output directory")
    return p


def _config(args, **overrides) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    return base.override(seed=args.seed, **overrides)


def _read_events(path, config):
    errors = []
    events = read_events(path, max_error_rate=config.max_error_rate, errors=errors)
    if errors:
        shown = ", ".join(str(e.line_no) for e in errors[:5])
        log.warning("skipped %d malformed line(s) in %s (lines %s%s)", len(errors), path, shown,
                    ", ..." if len(errors) > 5 else "")
    return events


def _engineering_overrides(args) -> dict:
    return dict(
        definition_period=args.period,
        features=tuple(f.strip() for f in args.features.split(",") if f.strip()) if args.features else None,
        variance_threshold=args.variance_threshold,
        outlier_quantile=args.outlier_quantile,
        drop_constant=args.drop_constant,
    )


def _emit(text):
    sys.stdout.write(text)


def cmd_fit(args) -> int:
    config = _config(args, k=args.k, k_range=args.k_range, model_path=args.model,
                     curve_path=args.curve, **_engineering_overrides(args))
    if args.k_range is not None:
        config = replace(config, k=None)
    events = _read_events(args.events, config)
    result = fit_model(events, config, digest_file(args.events))
    model = result.model
    model.save(config.model_path)
    log.info("wrote %s", config.model_path)
    if result.selection is not None and config.curve_path:
        result.selection.to_csv(config.curve_path)
        log.info("wrote %s", config.curve_path)
    rows = reports.segment_rows(model.profiles)
    if args.format == "csv":
        _emit(reports.csv_text(rows, reports.SEGMENT_FIELDS))
    elif args.format == "json":
        _emit(reports.json_text({"K": model.K, "segments": rows, "selection": model.selection and {
            k: v for k, v in model.selection.items() if k != "models"}}))
    else:
        if result.selection is not None:
            _emit(reports.curve_text(result.selection) + "\n")
        _emit(f"K={model.K}, {model.diagnostics['training_users']} training users, "
              f"{model.diagnostics['outliers_removed']} outliers removed, "
              f"{model.diagnostics['n_components']} components\n")
        _emit(reports.segments_text(model.profiles))
    return 0


def cmd_select_k(args) -> int:
    config = replace(_config(args, k_range=args.k_range, **_engineering_overrides(args)), k=None)
    events = _read_events(args.events, config)
    result = fit_model(events, config)
    sel = result.selection
    if args.curve:
        sel.to_csv(args.curve)
    if args.format == "csv":
        sel.to_csv(sys.stdout)
    elif args.format == "json":
        _emit(reports.json_text(sel.to_dict()))
    else:
        _emit(reports.curve_text(sel))
    return 0


def cmd_analyze(args) -> int:
    config = _config(args, experiment_period=args.period, suppression_threshold=args.suppress_below,
                     alpha=args.alpha, bonferroni=args.bonferroni, report_dir=args.out_dir)
    model = SegmentModel.load(args.model)
    events = _read_events(args.events, config)
    assignments = read_assignments(args.assignments) if args.assignments else None
    result = analyze(model, events, config, assignments)
    for path in reports.write_analysis(result, config.report_dir, model):
        log.info("wrote %s", path)
    if args.format == "csv":
        _emit(reports.csv_text(reports.effect_rows(result.effects), reports.EFFECT_FIELDS))
    elif args.format == "json":
        _emit(reports.json_text(reports.effect_json(result.effects)))
    else:
        _emit(reports.summary_text(result))
    return 0


def cmd_synth(args) -> int:
    from . import synth

    scenario = synth.Scenario.load(args.scenario) if args.scenario else synth.load_example_scenario()
    if args.n_users is not None:
        scenario.n_users = args.n_users
    seed = scenario.seed if args.seed is None else args.seed
    cohort, experiment, assignments = scenario.generate(seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "definition": out / "definition_events.csv",
        "experiment": out / "experiment_events.csv",
        "truth": out / "truth.csv",
        "assignments": out / "assignments.csv",
    }
    cohort.definition.to_csv(files["definition"])
    experiment.to_csv(files["experiment"])
    names = [s.name for s in cohort.specs]
    with open(files["truth"], "w", newline="") as fh:
        fh.write("user_id,archetype,status\n")
        for u, a, s in zip(cohort.user_ids, cohort.archetype.tolist(), cohort.status.tolist()):
            fh.write(f"{u},{names[a]},{s}\n")
    write_assignments(assignments, files["assignments"])
    rows = [{"file": k, "path": str(v)} for k, v in files.items()]
    if args.format == "json":
        _emit(reports.json_text({"seed": seed, "files": rows}))
    elif args.format == "csv":
        _emit(reports.csv_text(rows, ("file", "path")))
    else:
        _emit("".join(f"{k}: {v}\n" for k, v in files.items()))
    return 0


COMMANDS = {"fit": cmd_fit, "select-k": cmd_select_k, "analyze": cmd_analyze, "synth": cmd_synth}


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (2), --help and --version (0)
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        warnings.showwarning = _show_warning
        try:
            return COMMANDS[args.command](args)
        except SegmentationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return exc.exit_code
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    sys.exit(main())
