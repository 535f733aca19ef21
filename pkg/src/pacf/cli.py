"""Command-line entry point.

    pacf gen    --config cfg.json --out DIR [--seed N]
    pacf train  --config cfg.json --data DIR --out DIR [--seed N]
    pacf eval   --checkpoint FILE --data DIR --out DIR
    pacf report RUNDIR [RUNDIR ...] --out DIR

Commands are idempotent: identical inputs produce byte-identical outputs
(sorted JSON keys, full-precision floats, no timestamps). Every error exits
with code 1 after printing one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import adapt, metrics
from .errors import ConfigError, IoError, MissingArtifact, PacfError, ParseError
from .experiment import (EvalResult, default_shift_spec,
                         default_trainer_config, evaluate_state)
from .svg import Panel, scatter_svg
from .synthbench import DomainShiftSpec, LabeledBatch, generate, load_dump, save_dump

SOURCE_FILE = "source.csv"
TARGET_FILE = "target.csv"
HIDDEN_FILE = "target_hidden.csv"

_BENCH_KEYS = {"class_count", "dim", "samples_per_class", "source_std",
               "target_mean_shift", "target_std_multiplier", "mean_scale",
               "source_means", "seed"}
_TRAINER_KEYS = {"tau", "init_threshold", "pseudo_threshold", "lambda_unsup",
                 "lambda_dis", "lambda_pce", "lambda_mut", "ema_rate",
                 "learning_rate", "warmup_steps", "steps", "batch_size",
                 "feature_dim", "augment_noise", "seed"}
_ABLATION_KEYS = {"enable_pce", "regularizer", "enable_adversarial"}
_TOP_KEYS = {"benchmark", "trainer", "ablation", "out_dir"}


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, path)
    _reject_unknown(doc.get("benchmark", {}), _BENCH_KEYS, f"{path} benchmark")
    _reject_unknown(doc.get("trainer", {}), _TRAINER_KEYS, f"{path} trainer")
    _reject_unknown(doc.get("ablation", {}), _ABLATION_KEYS, f"{path} ablation")
    return doc


def _reject_unknown(section, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    """Content hash of the canonicalized (effective) config document."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def spec_from_config(doc: dict, seed_override: int | None = None) -> DomainShiftSpec:
    section = dict(doc.get("benchmark", {}))
    if seed_override is not None:
        section["seed"] = seed_override
    if "source_means" in section and section["source_means"] is not None:
        section["source_means"] = np.asarray(section["source_means"], dtype=np.float64)
    if "target_mean_shift" in section and isinstance(section["target_mean_shift"], list):
        section["target_mean_shift"] = np.asarray(section["target_mean_shift"],
                                                  dtype=np.float64)
    return default_shift_spec(**section) if section else default_shift_spec()


def trainer_from_config(doc: dict, seed_override: int | None = None) -> adapt.TrainerConfig:
    from .losses import LossWeights

    section = dict(doc.get("trainer", {}))
    section.update(doc.get("ablation", {}))
    if seed_override is not None:
        section["seed"] = seed_override
    lambdas = {key: section.pop(key) for key in
               ("lambda_unsup", "lambda_dis", "lambda_pce", "lambda_mut")
               if key in section}
    try:
        if lambdas:
            defaults = LossWeights()
            section["weights"] = LossWeights(**{
                name: lambdas.get(name, getattr(defaults, name))
                for name in ("lambda_unsup", "lambda_dis", "lambda_pce", "lambda_mut")})
        return default_trainer_config(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad trainer config: {exc}") from exc


def effective_config_doc(doc: dict, seed_override: int | None, command: str) -> dict:
    """The config as actually used (seed overrides applied); input for the hash."""
    effective = json.loads(canonical_json(doc))  # deep copy with plain types
    if seed_override is not None:
        if command == "gen":
            effective.setdefault("benchmark", {})["seed"] = seed_override
        else:
            effective.setdefault("trainer", {})["seed"] = seed_override
    return effective


def _require_out_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise IoError(f"output directory does not exist: {path}")
    return path


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_json(path: str, doc) -> None:
    _write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} line {exc.lineno}: {exc.msg}") from exc


def _fmt(x: float) -> str:
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


def _write_manifest(out: str, command: str, cfg_hash: str, files: list[str]) -> None:
    _write_json(os.path.join(out, "manifest.json"), {
        "command": command,
        "config_hash": cfg_hash,
        "files": sorted(files),
    })


# --- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    doc = load_config(args.config)
    out = _require_out_dir(args.out)
    effective = effective_config_doc(doc, args.seed, "gen")
    spec = spec_from_config(effective)
    pair = generate(spec)
    n_t = len(pair.target_features)
    save_dump(pair.source, os.path.join(out, SOURCE_FILE))
    save_dump(LabeledBatch(pair.target_features, np.full(n_t, -1, dtype=np.int64),
                           np.full(n_t, -1.0)), os.path.join(out, TARGET_FILE))
    save_dump(LabeledBatch(pair.target_features, pair.target_hidden_labels,
                           np.full(n_t, -1.0)), os.path.join(out, HIDDEN_FILE))
    _write_manifest(out, "gen", config_hash(effective),
                    [SOURCE_FILE, TARGET_FILE, HIDDEN_FILE])
    return 0


def _load_data_dir(data_dir: str) -> tuple[LabeledBatch, np.ndarray, np.ndarray | None]:
    source = load_dump(os.path.join(data_dir, SOURCE_FILE))
    target = load_dump(os.path.join(data_dir, TARGET_FILE))
    hidden_path = os.path.join(data_dir, HIDDEN_FILE)
    hidden = None
    if os.path.exists(hidden_path):
        hidden = load_dump(hidden_path).labels
    return source, target.features, hidden


def _write_eval_artifacts(out: str, evaluation: EvalResult, cfg_hash: str) -> list[str]:
    report = evaluation.report
    doc = report.to_json_dict()
    doc["config_hash"] = cfg_hash
    _write_json(os.path.join(out, "metrics.json"), doc)

    def table_csv(name: str, values: dict[int, float]) -> str:
        lines = ["class," + name]
        for k in sorted(values):
            lines.append(f"{k},{_fmt(values[k])}")
        lines.append(f"avg.,{_fmt(metrics.class_average(values))}")
        return "\n".join(lines) + "\n"

    variance_lines = ["class,source,target"]
    for k in sorted(set(report.source_variance) | set(report.target_variance)):
        variance_lines.append(
            f"{k},{_fmt(report.source_variance.get(k, float('nan')))},"
            f"{_fmt(report.target_variance.get(k, float('nan')))}")
    variance_lines.append(
        f"avg.,{_fmt(report.source_variance_avg)},{_fmt(report.target_variance_avg)}")
    _write_text(os.path.join(out, "metrics_variance.csv"),
                "\n".join(variance_lines) + "\n")
    _write_text(os.path.join(out, "metrics_mean_shift.csv"),
                table_csv("mean_shift", report.mean_shift))
    _write_text(os.path.join(out, "metrics_tp_ratio.csv"),
                table_csv("tp_ratio", report.tp_ratio))

    scatter_lines = ["linear_score,prototype_cosine"]
    for a, b in zip(evaluation.linear_scores, evaluation.prototype_cosines):
        scatter_lines.append(f"{_fmt(a)},{_fmt(b)}")
    _write_text(os.path.join(out, "rank_scatter.csv"), "\n".join(scatter_lines) + "\n")

    proj_lines = ["x,y,label"]
    for (x, y), label in zip(evaluation.projection, evaluation.projection_labels):
        proj_lines.append(f"{_fmt(x)},{_fmt(y)},{int(label)}")
    _write_text(os.path.join(out, "projection.csv"), "\n".join(proj_lines) + "\n")
    return ["metrics.json", "metrics_variance.csv", "metrics_mean_shift.csv",
            "metrics_tp_ratio.csv", "rank_scatter.csv", "projection.csv"]


def cmd_train(args) -> int:
    doc = load_config(args.config)
    out = _require_out_dir(args.out)
    effective = effective_config_doc(doc, args.seed, "train")
    config = trainer_from_config(effective)
    cfg_hash = config_hash(effective)
    source, target, hidden = _load_data_dir(args.data)
    result = adapt.run_experiment(source, target, config)
    evaluation = evaluate_state(result.state, config, source, target, hidden)

    _write_json(os.path.join(out, "checkpoint.json"),
                adapt.checkpoint_to_json_dict(result.state, config, cfg_hash))
    loss_lines = [",".join(adapt.StepRecord.FIELDS)]
    for record in result.warmup_records + result.records:
        loss_lines.append(",".join([
            str(record.step), _fmt(record.loss_sup), _fmt(record.loss_unsup),
            _fmt(record.loss_dis), _fmt(record.loss_pce), _fmt(record.loss_mut),
            _fmt(record.total), str(record.pseudo_count)]))
    _write_text(os.path.join(out, "losses.csv"), "\n".join(loss_lines) + "\n")
    _write_json(os.path.join(out, "config.json"), effective)
    files = _write_eval_artifacts(out, evaluation, cfg_hash)
    _write_manifest(out, "train", cfg_hash,
                    files + ["checkpoint.json", "losses.csv", "config.json"])
    return 0


def cmd_eval(args) -> int:
    out = _require_out_dir(args.out)
    state, config, cfg_hash = adapt.state_from_checkpoint(_read_json(args.checkpoint))
    source, target, hidden = _load_data_dir(args.data)
    evaluation = evaluate_state(state, config, source, target, hidden)
    files = _write_eval_artifacts(out, evaluation, cfg_hash)
    _write_manifest(out, "eval", cfg_hash, files)
    return 0


def _require_artifact(run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise MissingArtifact(path)
    return path


def _read_scatter(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines[1:]:
        if not line:
            continue
        a, b = line.split(",")
        if a == "" or b == "":
            continue
        rows.append((float(a), float(b)))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def _read_projection(path: str) -> tuple[np.ndarray, np.ndarray]:
    pts, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines[1:]:
        if not line:
            continue
        x, y, label = line.split(",")
        pts.append((float(x), float(y)))
        labels.append(int(label))
    return (np.asarray(pts, dtype=np.float64).reshape(-1, 2),
            np.asarray(labels, dtype=np.int64))


def _comparison_csv(names: list[str], tables: list[dict[int, float]],
                    value_name: str) -> str:
    classes = sorted(set().union(*[set(t) for t in tables])) if tables else []
    header = ["class"] + [f"{value_name}_{n}" for n in names]
    header += [f"delta_{n}" for n in names[1:]]
    lines = [",".join(header)]
    for k in classes + ["avg."]:
        row = [str(k)]
        values = []
        for table in tables:
            v = metrics.class_average(table) if k == "avg." else table.get(k, float("nan"))
            values.append(v)
            row.append(_fmt(v))
        row.extend(_fmt(v - values[0]) for v in values[1:])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = _require_out_dir(args.out)
    names, reports, scatters, projections = [], [], [], []
    seen: dict[str, int] = {}
    for run_dir in args.run_dirs:
        name = os.path.basename(os.path.normpath(run_dir))
        if name in seen:
            seen[name] += 1
            name = f"{name}_{seen[name]}"
        else:
            seen[name] = 0
        names.append(name)
        reports.append(metrics.MetricsReport.from_json_dict(
            _read_json(_require_artifact(run_dir, "metrics.json"))))
        scatters.append(_read_scatter(_require_artifact(run_dir, "rank_scatter.csv")))
        projections.append(_read_projection(_require_artifact(run_dir, "projection.csv")))

    _write_text(os.path.join(out, "variance_source_comparison.csv"),
                _comparison_csv(names, [r.source_variance for r in reports], "variance"))
    _write_text(os.path.join(out, "variance_target_comparison.csv"),
                _comparison_csv(names, [r.target_variance for r in reports], "variance"))
    _write_text(os.path.join(out, "mean_shift_comparison.csv"),
                _comparison_csv(names, [r.mean_shift for r in reports], "shift"))
    _write_text(os.path.join(out, "tp_ratio_comparison.csv"),
                _comparison_csv(names, [r.tp_ratio for r in reports], "tp"))

    summary = ["metric," + ",".join(names)]
    rows = [
        ("proxy_a_distance", [r.proxy_a_distance for r in reports]),
        ("spearman_rho", [r.spearman for r in reports]),
        ("kendall_tau", [r.kendall for r in reports]),
        ("source_variance_avg", [r.source_variance_avg for r in reports]),
        ("target_variance_avg", [r.target_variance_avg for r in reports]),
        ("mean_shift_avg", [r.mean_shift_avg for r in reports]),
        ("tp_ratio_avg", [r.tp_ratio_avg for r in reports]),
        ("pseudo_count", [float(r.pseudo_count) for r in reports]),
    ]
    for metric_name, values in rows:
        summary.append(metric_name + "," + ",".join(_fmt(v) for v in values))
    _write_text(os.path.join(out, "summary_comparison.csv"), "\n".join(summary) + "\n")

    rank_panels = [
        Panel(title=name, points=scatter,
              annotations=(f"rho={_fmt(report.spearman)}",
                           f"tau={_fmt(report.kendall)}"),
              x_label="linear score", y_label="prototype cosine")
        for name, scatter, report in zip(names, scatters, reports)
    ]
    _write_text(os.path.join(out, "rank_correlation.svg"), scatter_svg(rank_panels))

    proj_panels = [
        Panel(title=name, points=pts, classes=labels,
              x_label="pc1", y_label="pc2")
        for name, (pts, labels) in zip(names, projections)
    ]
    _write_text(os.path.join(out, "projection.svg"), scatter_svg(proj_panels))
    _write_manifest(out, "report", "",
                    ["variance_source_comparison.csv", "variance_target_comparison.csv",
                     "mean_shift_comparison.csv", "tp_ratio_comparison.csv",
                     "summary_comparison.csv", "rank_correlation.svg", "projection.svg"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacf",
                                     description="prototype-augmented feature adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset pair")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="warm up, adapt, and write run artifacts")
    train.add_argument("--config", required=True)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="recompute the metrics report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", help="comparison tables and SVG plots across runs")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--out", required=True)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PacfError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
