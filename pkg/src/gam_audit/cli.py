"""Command-line entry point: ``gam-audit <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 detection or
internal failure. Set ``GAM_AUDIT_LOG`` (e.g. ``INFO``) for progress logs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import blackbox, svg
from .dataset import Dataset, load_csv, split_by_group, write_csv
from .detect import DetectionConfig, DetectionReport, detect_dataset
from .errors import ConfigError, DataError, GamAuditError
from .synth import PRESETS, generate, load_config, preset, write_sidecar

log = logging.getLogger("gam_audit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out_dir(path):
    if path is None:
        raise ConfigError("--out is required")
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"--out must be a directory: {p}")
    return p


def _detection_config(args, n_candidates=None) -> DetectionConfig:
    payload = {}
    if getattr(args, "config", None):
        p = _require_file(args.config, "detection config")
        try:
            payload = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("detection config must be a JSON object")
    for key in ("delta", "tau", "epsilon", "seed", "workers", "n_basis", "test_fraction", "max_candidates"):
        val = getattr(args, key, None)
        if val is not None:
            payload[key] = val
    if "workers" not in payload:
        payload["workers"] = os.cpu_count() or 1
    if n_candidates is not None and "max_candidates" not in payload:
        payload["max_candidates"] = n_candidates
    return DetectionConfig.from_dict(payload)


def write_shapes(report: DetectionReport, out: Path) -> list[Path]:
    """Shape CSVs (x, value) per model and feature, one SVG per feature and a grid figure."""
    if not report.shapes:
        return []
    shape_dir = out / "shapes"
    shape_dir.mkdir(parents=True, exist_ok=True)
    written = []
    by_model = {model: {sh.feature: sh for sh in shapes} for model, shapes in report.shapes.items()}
    for model, shapes in by_model.items():
        for name, sh in shapes.items():
            path = shape_dir / f"{model}__{name}.csv"
            with path.open("w", encoding="utf-8") as fh:
                fh.write("x,value\n")
                for x, v in zip(sh.grid, sh.values):
                    fh.write(f"{float(x)!r},{float(v)!r}\n")
            written.append(path)

    s = report.step2
    columns = ["without_defining", "extended"]
    titles = [f"without defining features (D2 = {_pct(s.reduced_d2)})",
              f"all candidates (D2 = {_pct(s.extended_d2)})"]
    features = list(s.extended.features)
    grid = []
    for name in features:
        row = []
        for model in columns:
            sh = by_model.get(model, {}).get(name)
            if sh is None:
                row.append(svg.Panel(name, note="not in this model"))
            else:
                row.append(svg.Panel(name, sh.grid, sh.values))
        grid.append(row)
        path = shape_dir / f"{name}.svg"
        svg.write(path, [row], titles, title=f"feature shape: {name}")
        written.append(path)
    path = shape_dir / "figure.svg"
    svg.write(path, grid, titles, title=f"feature shapes for {report.label}")
    written.append(path)
    return written


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.1f}%"


def _write_report(report: DetectionReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    write_shapes(report, out)
    sys.stdout.write(report.to_text())


def cmd_synth(args) -> int:
    if args.preset:
        cfg = preset(args.preset)
    else:
        cfg = load_config(_require_file(args.config, "--config"))
    if args.out is None:
        raise ConfigError("--out is required")
    if args.rows is not None:
        cfg = cfg.with_rows(args.rows)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    data = generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    write_sidecar(cfg, out.with_suffix(".rule.json"))
    print(f"wrote {data.n_rows} rows ({cfg.n_patients} patients) to {out}")
    return EXIT_OK


def _load(args, label_name) -> Dataset:
    return load_csv(_require_file(args.data, "--data"), label_name, args.group,
                    binary=_csv_list(args.binary), ignore=_csv_list(getattr(args, "ignore", None)))


def cmd_detect(args) -> int:
    candidates = _csv_list(args.candidates) or None
    cfg = _detection_config(args, len(candidates) if candidates else None)
    out = _out_dir(args.out)
    data = _load(args, args.label)
    report = detect_dataset(data, cfg, candidates)
    _write_report(report, out)
    return EXIT_OK


def cmd_audit(args) -> int:
    candidates = _csv_list(args.candidates) or None
    cfg = _detection_config(args, len(candidates) if candidates else None)
    out = _out_dir(args.out)
    src = _require_file(args.data, "--data")
    if args.yhat:
        yhat_data = load_csv(_require_file(args.yhat, "--yhat"), _yhat_column(args.yhat, args.yhat_column))
        inputs = load_csv(src, None, args.group, binary=_csv_list(args.binary), ignore=_csv_list(args.ignore))
        if yhat_data.n_rows != inputs.n_rows:
            raise DataError(f"{args.yhat} has {yhat_data.n_rows} predictions for {inputs.n_rows} input rows")
        yhat = yhat_data.label
    else:
        inputs = load_csv(src, _yhat_column(src, args.yhat_column), args.group,
                          binary=_csv_list(args.binary), ignore=_csv_list(args.ignore))
        yhat = inputs.label
    report = blackbox.audit(inputs, yhat, cfg, candidates)
    _write_report(report, out)
    return EXIT_OK


def _yhat_column(path, column):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if column not in header:
        raise DataError(f"{path}: no {column!r} column; an audit needs input columns plus a prediction column "
                        f"named {column!r}")
    return column


def cmd_train_stub(args) -> int:
    out = _out_dir(args.out)
    data = _load(args, args.label)
    features = _csv_list(args.features) or [f for f in data.feature_names if f not in _csv_list(args.exclude)]
    for name in features:
        data.column(name)
    seed = 1 if args.seed is None else args.seed
    train, test = split_by_group(data, args.test_fraction, seed)
    model = blackbox.train_stub(train, features, epochs=args.epochs, lr=args.lr, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    write_csv(test, out / "test.csv")
    yhat = blackbox.predict_stub(model, test, rounded=True)
    inputs = test.with_label(yhat, name=blackbox.YHAT)
    write_csv(inputs, out / "predictions.csv")
    metrics = {
        "features": list(features),
        "n_train": train.n_rows,
        "n_test": test.n_rows,
        "train_accuracy": blackbox.accuracy(model, train),
        "test_accuracy": blackbox.accuracy(model, test),
        "final_loss": model.losses[-1],
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    print(f"train accuracy {metrics['train_accuracy']:.4f}, test accuracy {metrics['test_accuracy']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    model = blackbox.StubModel.load(_require_file(args.model, "--model"))
    data = _load(args, args.label)
    report = blackbox.ablate(model, data, args.feature)
    if args.out:
        out = _out_dir(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "ablation.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_shapes(args) -> int:
    """Re-draw shape CSVs and SVGs from a saved report.json."""
    from .gam import FeatureShape

    src = _require_file(args.report, "--report")
    try:
        payload = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{src} is not valid JSON: {exc}") from exc
    step2 = payload.get("step2")
    if not step2:
        raise DataError(f"{src} has no step-2 shapes (no defining set was found)")
    out = _out_dir(args.out)
    shapes = {
        model: [FeatureShape(s["feature"], np.asarray(s["grid"]), np.asarray(s["values"]), s["sd"]) for s in items]
        for model, items in step2["shapes"].items()
    }
    report = _ShapeView(payload["label"], shapes, step2)
    for path in write_shapes(report, out):
        print(path)
    return EXIT_OK


class _ShapeView:
    """Just enough of a DetectionReport for :func:`write_shapes`."""

    def __init__(self, label, shapes, step2):
        self.label = label
        self.shapes = shapes
        self.step2 = _Step2View(step2)


class _Step2View:
    def __init__(self, step2):
        self.reduced_d2 = step2["without_defining_d2"]
        self.extended_d2 = step2["extended_d2"]
        self.extended = argparse.Namespace(features=step2["extended_features"])


def _add_detection_flags(p):
    p.add_argument("--config", help="JSON file with detection settings (delta, tau, epsilon, ...)")
    p.add_argument("--delta", type=float, help="data-fit threshold for a defining set (default 0.95)")
    p.add_argument("--tau", type=float, help="nullification threshold (default 0.05)")
    p.add_argument("--epsilon", type=float, help="D2 tie tolerance for the edf tie-break (default 0.005)")
    p.add_argument("--max-candidates", dest="max_candidates", type=int, help="candidate count m (at most 8)")
    p.add_argument("--candidates", help="comma-separated candidate features (skips correlation ranking)")
    p.add_argument("--basis", dest="n_basis", type=int, help="basis functions per smooth (4..30, default 10)")
    p.add_argument("--test-fraction", dest="test_fraction", type=float, help="held-out share (default 0.2)")
    p.add_argument("--seed", type=int, help="split seed (default 1)")
    p.add_argument("--workers", type=int, help="threads for subset fits (default: all cores)")


def _add_data_flags(p, label_required=True):
    p.add_argument("--data", help="input CSV")
    if label_required:
        p.add_argument("--label", required=True, help="label column")
    p.add_argument("--group", help="group (patient) id column; default: every row is its own group")
    p.add_argument("--binary", help="comma-separated columns to treat as binary")
    p.add_argument("--ignore", help="comma-separated columns to leave out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gam-audit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--preset", choices=PRESETS, help="built-in generator config")
    p.add_argument("--out", help="output CSV; the rule is echoed to <out>.rule.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--rows", type=int, help="approximate row count (scales the patient count)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="two-step detection of defining features")
    _add_data_flags(p)
    _add_detection_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("audit", help="run detection on a model's predictions")
    _add_data_flags(p, label_required=False)
    _add_detection_flags(p)
    p.add_argument("--yhat", help="CSV with the prediction column (default: read it from --data)")
    p.add_argument("--yhat-column", dest="yhat_column", default=blackbox.YHAT)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train-stub", help="train the black-box stub and export test predictions")
    _add_data_flags(p)
    p.add_argument("--features", help="comma-separated model inputs (default: all)")
    p.add_argument("--exclude", help="comma-separated features to withhold from the model")
    p.add_argument("--epochs", type=int, default=blackbox.EPOCHS)
    p.add_argument("--lr", type=float, default=blackbox.LEARNING_RATE)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train_stub)

    p = sub.add_parser("ablate", help="pin one input at its mean and re-score")
    p.add_argument("--model", help="stub model JSON")
    _add_data_flags(p)
    p.add_argument("--feature", required=True)
    p.add_argument("--out", help="optional output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("shapes", help="re-draw shape plots from report.json")
    p.add_argument("--report", help="report.json written by detect or audit")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_shapes)
    return parser


def _setup_logging():
    level = os.environ.get("GAM_AUDIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GamAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # keep the exit-code contract even for bugs
        log.debug("unexpected failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
