"""Command-line entry point: ``tonescope ingest|run|audit|compare|fixture``.

Exit codes: 0 success, 1 usage or schema error, 2 runtime failure,
3 audit finished and the tone DI is outside the independence band,
4 audit finished but the tone DI is undefined.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from tonescope import fairness
from tonescope.data import (
    METADATA_FILE,
    CellCounts,
    ImageCache,
    MetadataError,
    generate_fixture,
    load_metadata,
    summarize,
)
from tonescope.model import ConfigError, ModelConfig, build_model
from tonescope.plot import write_curves
from tonescope.sampler import balance, split
from tonescope.trainer import TrainConfig, TrainingError, save_history, train

log = logging.getLogger("tonescope")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BIASED, EXIT_UNDEFINED = 0, 1, 2, 3, 4


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException, code: int = EXIT_RUNTIME) -> None:
        self.stage, self.cause, self.code = stage, cause, code
        super().__init__(f"stage {stage!r} failed: {cause}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _audit_code(report: fairness.FairnessReport) -> int:
    if report.independence_pass is None:
        return EXIT_UNDEFINED
    return EXIT_OK if report.independence_pass else EXIT_BIASED


def _metadata_path(root: Path) -> Path:
    return root / METADATA_FILE if root.is_dir() else root


def _summary_dict(records) -> dict:
    toned = [r for r in records if r.tone is not None]
    d = summarize(toned).to_dict()
    d["records"] = len(records)
    d["without_tone"] = len(records) - len(toned)
    return d


# ingest


def cmd_ingest(args) -> int:
    root = Path(args.dataset_root)
    records = load_metadata(_metadata_path(root))
    summary = _summary_dict(records)
    out = Path(args.out) if args.out else (root if root.is_dir() else root.parent)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "summary.json", summary)
    c = summary["cells"]
    print(f"{summary['total']} toned records ({summary['without_tone']} without tone)")
    print(f"{'':10}{'light':>8}{'dark':>8}")
    for d in ("benign", "malignant"):
        print(f"{d:10}{c[d + '_light']:>8}{c[d + '_dark']:>8}")
    return EXIT_OK


# run


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    mcfg = ModelConfig.load(args.model_config) if args.model_config else ModelConfig()
    if args.input_side is not None:
        mcfg = mcfg.with_input_side(args.input_side)
    if args.learning_rate is not None:
        mcfg.learning_rate = args.learning_rate
    mcfg.validate()
    tcfg = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.max_epochs = args.epochs
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    if args.epsilon is not None:
        tcfg.epsilon = args.epsilon
    if args.no_early_stop:
        tcfg.early_stop_window = None
    tcfg.validate()
    return mcfg, tcfg


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (MetadataError, ConfigError) as exc:
        raise StageError(name, exc, EXIT_USAGE) from exc
    except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
        raise StageError(name, exc) from exc


def cmd_run(args) -> int:
    out = Path(args.out)
    try:
        mcfg, tcfg = _configs(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
            return EXIT_USAGE
        shutil.rmtree(out)
    work = out / ".partial"
    work.mkdir(parents=True, exist_ok=True)
    # separate stream from the trainer's so balancing does not shift training draws
    data_rng = np.random.default_rng([args.seed, 1])
    history = None
    try:
        records = _stage("ingest", load_metadata, _metadata_path(Path(args.dataset_root)))
        if args.strategy == "balanced":
            records = _stage("balance", balance, records, data_rng)
        _write_json(work / "summary.json", _summary_dict(records))
        sp = _stage(
            "split", split, records, rng=data_rng, stratify=args.stratify, seed=args.seed, strategy=args.strategy
        )
        model = _stage("model", build_model, mcfg, seed=tcfg.seed)
        cache = ImageCache(mcfg.input_size[0], model.dtype)
        try:
            history = train(model, sp, tcfg, cache)
        except TrainingError as exc:
            history = exc.history
            raise StageError("train", exc) from exc
        except Exception as exc:  # noqa: BLE001
            raise StageError("train", exc) from exc
        _stage("report", save_history, history, work, sp.train, sp.validation)
        _stage("plot", write_curves, work / "history.csv", epsilon=tcfg.epsilon)
    except StageError as exc:
        failed = out / "failed"
        if history is not None and history.epochs:
            save_history(history, work)
            write_curves(work / "history.csv", epsilon=tcfg.epsilon)
        (work / "error.txt").write_text(f"{exc}\n", encoding="utf-8")
        work.rename(failed)
        print(f"error: {exc}; partial outputs in {failed}", file=sys.stderr)
        return exc.code
    for item in sorted(work.iterdir()):
        item.rename(out / item.name)
    work.rmdir()
    final = history.final
    print(
        f"{len(history.epochs)} epochs{' (early stop)' if history.stopped_early else ''}; "
        f"accuracy {final.accuracy:.3f}, majority {final.report.majority_accuracy:.3f}, "
        f"tone DI {final.tone_di.serialize()}, control DI {final.control_di.serialize()}"
    )
    return _audit_code(final.report)


# audit

_PRED_VOCAB = {"benign": 0, "malignant": 1, "0": 0, "1": 1}
_TONE_VOCAB = {"light": "light", "dark": "dark", "none": None, "": None}


def read_predictions(path) -> tuple[list, list, list, list]:
    """Parse an audit CSV with columns id, prediction, truth, tone."""
    ids, preds, truth, tones = [], [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ("id", "prediction", "truth", "tone") if c not in header]
        if missing:
            raise MetadataError(f"{path}: missing required column(s): {', '.join(missing)}")
        reader.fieldnames = header
        for rowno, row in enumerate(reader, start=2):
            p = (row["prediction"] or "").strip().lower()
            t = (row["truth"] or "").strip().lower()
            g = (row["tone"] or "").strip().lower()
            if p not in _PRED_VOCAB or t not in _PRED_VOCAB or g not in _TONE_VOCAB:
                raise MetadataError(f"{path}: row {rowno}: unrecognised value in {dict(row)}")
            ids.append(row["id"])
            preds.append(_PRED_VOCAB[p])
            truth.append(_PRED_VOCAB[t])
            tones.append(_TONE_VOCAB[g])
    if not ids:
        raise MetadataError(f"{path}: no prediction rows")
    return ids, preds, truth, tones


def cmd_audit(args) -> int:
    _, preds, truth, tones = read_predictions(args.predictions)
    epsilon = fairness.DEFAULT_EPSILON if args.epsilon is None else args.epsilon
    control = fairness.assign_control(len(preds), np.random.default_rng(args.seed))
    report = fairness.build_report(preds, truth, tones, control, epsilon)
    out = Path(args.out) if args.out else Path(args.predictions).with_name("report.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    verdict = {None: "undefined", True: "pass", False: "fail"}[report.independence_pass]
    print(f"tone DI {report.disparate_impact.serialize()} ({verdict} at epsilon {epsilon}); accuracy {report.accuracy:.3f}")
    return _audit_code(report)


# compare


def _load_report(run_dir: Path) -> dict:
    path = run_dir / "report.json"
    if not path.is_file():
        raise FileNotFoundError(f"run directory {run_dir} has no report.json")
    return json.loads(path.read_text(encoding="utf-8"))


def _delta(a, b):
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return round(b - a, 3)
    return None


def compare_reports(name_a: str, a: dict, name_b: str, b: dict) -> dict:
    keys = ("accuracy", "majority_accuracy", "disparate_impact", "control_disparate_impact")
    rows = [{"run": name, **{k: rep.get(k) for k in keys}} for name, rep in ((name_a, a), (name_b, b))]
    return {"runs": rows, "delta": {k: _delta(a.get(k), b.get(k)) for k in keys}}


def format_table(comparison: dict) -> str:
    head = f"{'run':24}{'accuracy':>10}{'majority':>10}{'tone DI':>10}{'control DI':>12}"
    lines = [head, "-" * len(head)]

    def cell(v, w):
        if v is None:
            v = "-"
        return f"{v:>{w}.3f}" if isinstance(v, (int, float)) else f"{str(v):>{w}}"

    for r in comparison["runs"]:
        lines.append(
            f"{r['run'][:24]:24}{cell(r['accuracy'], 10)}{cell(r['majority_accuracy'], 10)}"
            f"{cell(r['disparate_impact'], 10)}{cell(r['control_disparate_impact'], 12)}"
        )
    d = comparison["delta"]
    lines.append(
        f"{'delta (b - a)':24}{cell(d['accuracy'], 10)}{cell(d['majority_accuracy'], 10)}"
        f"{cell(d['disparate_impact'], 10)}{cell(d['control_disparate_impact'], 12)}"
    )
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    a_dir, b_dir = Path(args.run_a), Path(args.run_b)
    comparison = compare_reports(a_dir.name or str(a_dir), _load_report(a_dir), b_dir.name or str(b_dir), _load_report(b_dir))
    table = format_table(comparison)
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "comparison.json", comparison)
    (out / "comparison.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# fixture


def cmd_fixture(args) -> int:
    recs = generate_fixture(
        args.out, CellCounts.parse(args.counts), args.tone_signal, args.diagnosis_signal, args.seed, args.side
    )
    print(f"wrote {len(recs)} images to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tonescope", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="summarize a dataset's diagnosis x tone composition")
    p.add_argument("--dataset-root", required=True, help="directory holding metadata.csv, or the CSV itself")
    p.add_argument("--out", help="directory for summary.json (default: dataset root)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("run", help="balance, split, train and audit")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--strategy", choices=("imbalanced", "balanced"), default="imbalanced")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--input-side", type=int, default=None, help="square input side (default 224)")
    p.add_argument("--stratify", action="store_true", help="stratify the split by diagnosis x tone")
    p.add_argument("--model-config", help="model config file ([model] section)")
    p.add_argument("--train-config", help="training config file ([train] section)")
    p.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--force", action="store_true", help="replace a non-empty run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", help="fairness report for an existing predictions CSV")
    p.add_argument("predictions", help="CSV with columns id,prediction,truth,tone")
    p.add_argument("--out", help="report.json path or directory (default: next to the CSV)")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--seed", type=int, default=0, help="seed for the control-group coin flips")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("compare", help="final-epoch accuracy and DI of two runs side by side")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", help="directory for comparison.json/.txt (default: current directory)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fixture", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="10,10,10,10", help="benign_light,benign_dark,malignant_light,malignant_dark")
    p.add_argument("--tone-signal", choices=("none", "brightness_shift"), default="none")
    p.add_argument("--diagnosis-signal", choices=("none", "blob"), default="blob")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_fixture)
    return parser


def _thread_limit():
    value = os.environ.get("TONESCOPE_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (MetadataError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
