"""``fair-diag`` command line: generate, train, eval, causal-report, correlate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .causal import compute_effects
from .gradengine import load_parameters, save_parameters
from .metrics import MetricError, doa, evaluate, format_table
from .pscrf import PscrfParameters, counterfactual_anchors, representations
from .synthgen import SynthConfig, generate, write_dataset
from .trainer import NumericalError, TrainConfig, build_parameters, gate_stats, prepare, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("generate", "train", "eval", "causal-report", "correlate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- key = value configuration ----------------------------------------------


def _coerce(field: dataclasses.Field, raw: str):
    default = field.default
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"{field.name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{field.name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, cls) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into kwargs for dataclass ``cls``."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(known[key], value)
    return out


def load_config(path: str | None, overrides: list[str], cls, **flags):
    values = parse_config(Path(path).read_text(), cls) if path else {}
    values.update(parse_config("\n".join(overrides or []), cls))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# -- helpers ---------------------------------------------------------------


def _data_paths(data_dir: str) -> tuple[Path, Path, Path]:
    d = Path(data_dir)
    return d / "interactions.csv", d / "attributes.csv", d / "qmatrix.csv"


def _load(data_dir: str, sensitive: str | None):
    inter, attrs, q = _data_paths(data_dir)
    for p in (inter, attrs):
        if not p.exists():
            raise ds.DataError(f"missing input file {p}")
    return ds.load_dataset(inter, attrs, q, sensitive)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _restore(checkpoint: str, data_dir: str, sensitive: str | None):
    arrays, meta = load_parameters(checkpoint)
    if meta is None:
        raise ds.DataError(f"{checkpoint}: no metadata")
    config = TrainConfig.from_dict(meta["train_config"])
    if sensitive is not None and sensitive != meta["sensitive"]:
        raise ds.DataError(f"checkpoint was trained on sensitive attribute {meta['sensitive']!r}, not {sensitive!r}")
    log, attrs, q = _load(data_dir, meta["sensitive"])
    data = prepare(log, attrs, q, config, meta["split_seed"])
    params = build_parameters(data, config)
    try:
        params.load_state(arrays)
    except (KeyError, ValueError) as exc:
        raise ds.DataError(f"checkpoint does not match data: {exc}") from None
    return config, data, params, meta


# -- subcommands -----------------------------------------------------------


def cmd_generate(args) -> int:
    config = load_config(args.config, args.set, SynthConfig, seed=args.seed)
    log, attrs, q, truth = generate(config)
    write_dataset(args.out, log, attrs, q, truth)
    _emit({"out": str(args.out), "students": log.num_students, "exercises": log.num_exercises, "records": len(log)})
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, args.set, TrainConfig, seed=args.seed)
    if args.base:
        config = config.base_variant()
    log, attrs, q = _load(args.data_dir, args.sensitive)
    data = prepare(log, attrs, q, config)
    result = train(data, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "train_config": config.to_dict(),
        "sensitive": data.attrs.sensitive_name,
        "split_seed": data.split.seed,
        "encoder": data.encoder.to_dict(),
        "context": [[data.attrs.context_names[j], r] for j, r in data.context],
        "group_cutpoints": list(data.groups.cutpoints),
        "best_epoch": result.best_epoch,
    }
    save_parameters(out, result.params.parameters(), meta)
    write_log(args.log or out.with_suffix(".log.jsonl"), result.log)
    ds.write_id_map(out.with_suffix(".students.csv"), data.log.student_ids)
    ds.write_id_map(out.with_suffix(".exercises.csv"), data.log.exercise_ids)
    summary = {"checkpoint": str(out), "best_epoch": result.best_epoch, "best_val_auc": result.best_auc, "epochs": len(result.log)}
    if config.gate_mode == "learned":
        summary["gates"] = gate_stats(result.params, data)
    _emit(summary)
    return EXIT_OK


def evaluate_checkpoint(config: TrainConfig, data, params: PscrfParameters, records=None) -> dict:
    records = data.split.test if records is None else records
    anchors = counterfactual_anchors(params, data.student_buckets)
    b = data.batch(records)
    reps = representations(params, b.students, b.buckets, anchors, config.gates)
    preds = params.backbone.predict(reps[config.eval_head], b.exercises)
    doa_value = None
    if config.backbone == "ncd":
        students = np.arange(data.log.num_students)
        prof = representations(params, students, data.student_buckets, anchors, config.gates)[config.eval_head]
        try:
            doa_value = doa(prof, b.students, b.exercises, b.labels.astype(np.int64), data.qmatrix.matrix)
        except MetricError:
            doa_value = None
    report = evaluate(preds, b.labels, b.groups, doa_value).to_dict()
    report["head"] = config.eval_head
    report["backbone"] = config.backbone
    report["records"] = int(len(b))
    if config.gate_mode == "learned":
        report["gates"] = gate_stats(params, data)
    return report


def cmd_eval(args) -> int:
    config, data, params, _ = _restore(args.checkpoint, args.data_dir, args.sensitive)
    try:
        report = evaluate_checkpoint(config, data, params)
    except MetricError as exc:
        raise ds.DataError(str(exc)) from None
    _emit(report)
    from .metrics import MetricsReport

    fields = {f.name for f in dataclasses.fields(MetricsReport)}
    table = format_table(MetricsReport(**{k: v for k, v in report.items() if k in fields}))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        Path(args.out).with_suffix(".txt").write_text(table + "\n")
    sys.stderr.write(table + "\n")
    return EXIT_OK


def cmd_causal_report(args) -> int:
    config, data, params, _ = _restore(args.checkpoint, args.data_dir, args.sensitive)
    students = np.arange(data.log.num_students)
    report = compute_effects(
        params,
        students,
        data.student_buckets,
        data.student_buckets,
        data.groups.labels,
        args.probability_scale,
        alpha=config.gates.alpha,
    )
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "group", "TE_mean", "NDE_mean", "TIE_mean"])
        for i in students:
            w.writerow(
                [
                    data.log.student_ids[i],
                    ds.GROUP_NAMES[data.groups.labels[i]],
                    repr(float(report.te_mean[i])),
                    repr(float(report.nde_mean[i])),
                    repr(float(report.tie_mean[i])),
                ]
            )
    _emit(report.summary())
    return EXIT_OK


def cmd_correlate(args) -> int:
    log, attrs, _ = _load(args.data_dir, args.sensitive)
    if args.min_records > 1:
        log, kept = ds.filter_min_records(log, args.min_records)
        attrs = attrs.subset(kept)
    rhos = ds.context_correlations(attrs)
    top = ds.select_context_attributes(attrs, args.k)
    out = {
        "sensitive": attrs.sensitive_name,
        "selected": [{"index": j, "name": attrs.context_names[j], "correlation": r} for j, r in top],
        "all": {attrs.context_names[j]: r for j, r in enumerate(rhos)},
    }
    _emit(out)
    for j, r in top:
        sys.stderr.write(f"{attrs.context_names[j]:<20}{r:>8.3f}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fair-diag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--sensitive")
    t.add_argument("--log")
    t.add_argument("--base", action="store_true", help="switch off every fairness component")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--sensitive")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("causal-report", help="per-student TE/NDE/TIE")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data-dir", required=True)
    c.add_argument("--sensitive")
    c.add_argument("--out", required=True)
    c.add_argument("--probability-scale", action="store_true")
    c.set_defaults(func=cmd_causal_report)

    r = sub.add_parser("correlate", help="rank context attributes by correlation with the sensitive one")
    r.add_argument("--data-dir", required=True)
    r.add_argument("--sensitive")
    r.add_argument("--k", type=int, default=5)
    r.add_argument("--min-records", type=int, default=1)
    r.set_defaults(func=cmd_correlate)
    return p


def _limit_threads():
    raw = os.environ.get("FAIR_DIAG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FAIR_DIAG_THREADS must be an integer, got {raw!r}") from None
    if n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(n)
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _limit_threads()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; expected one of " + ", ".join(COMMANDS))
        for attr in ("set",):
            for item in getattr(args, attr, []) or []:
                if "=" not in item:
                    raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n\n{parser.format_usage()}")
        return EXIT_USAGE
    except (ds.DataError, FileNotFoundError, MetricError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
