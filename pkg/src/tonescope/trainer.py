"""Epoch loop: minibatch updates, per-epoch validation audit, early stopping."""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from tonescope import fairness
from tonescope.data import ImageCache, ImageRecord
from tonescope.engine import Tensor, make_optimizer, softmax_cross_entropy
from tonescope.model import Model, ModelConfig, predict_from_probs
from tonescope.sampler import SplitDataset, write_manifest

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        self.epoch, self.batch, self.loss = epoch, batch, loss
        # epochs completed before the failure, filled in by train()
        self.history: Optional["RunHistory"] = None
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    early_stop_window: Optional[int] = 25
    slope_tolerance: float = 1e-3
    epsilon: float = fairness.DEFAULT_EPSILON

    def validate(self) -> "TrainConfig":
        problems = []
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.early_stop_window is not None and self.early_stop_window < 2:
            problems.append("early_stop_window must be >= 2")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_text(self) -> str:
        window = "none" if self.early_stop_window is None else str(self.early_stop_window)
        return (
            "[train]\n"
            f"max_epochs = {self.max_epochs}\n"
            f"batch_size = {self.batch_size}\n"
            f"seed = {self.seed}\n"
            f"early_stop_window = {window}\n"
            f"slope_tolerance = {self.slope_tolerance!r}\n"
            f"epsilon = {self.epsilon!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        if not parser.has_section("train"):
            return cls()
        sec, d = parser["train"], cls()
        window = sec.get("early_stop_window", str(d.early_stop_window)).strip().lower()
        return cls(
            max_epochs=sec.getint("max_epochs", d.max_epochs),
            batch_size=sec.getint("batch_size", d.batch_size),
            seed=sec.getint("seed", d.seed),
            early_stop_window=None if window in ("none", "off", "") else int(window),
            slope_tolerance=sec.getfloat("slope_tolerance", d.slope_tolerance),
            epsilon=sec.getfloat("epsilon", d.epsilon),
        )

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    report: fairness.FairnessReport

    @property
    def accuracy(self) -> float:
        return self.report.accuracy

    @property
    def selection_rates(self) -> dict:
        return self.report.selection_rates

    @property
    def tone_di(self) -> fairness.DisparateImpact:
        return self.report.disparate_impact

    @property
    def control_di(self) -> fairness.DisparateImpact:
        return self.report.control_disparate_impact

    @property
    def grouped(self) -> fairness.GroupedConfusion:
        return self.report.grouped


@dataclass
class RunHistory:
    epochs: list[EpochMetrics] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    model_config: Optional[ModelConfig] = None
    train_config: Optional[TrainConfig] = None
    train_ids: list[str] = field(default_factory=list)
    validation_ids: list[str] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]


def early_stop_check(losses: Sequence[float], window: int = 25, slope_tolerance: float = 1e-3) -> bool:
    """True when the least-squares slope of the last ``window`` losses is
    greater than ``-slope_tolerance`` (flat or rising)."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if window > len(losses):
        raise ValueError(f"window {window} larger than {len(losses)} losses")
    y = np.asarray(losses[-window:], dtype=np.float64)
    x = np.arange(window, dtype=np.float64)
    x -= x.mean()
    slope = float(np.dot(x, y - y.mean()) / np.dot(x, x))
    return slope > -slope_tolerance


def _labels(records: Sequence[ImageRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def predict_records(model, records: Sequence[ImageRecord], cache, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(records), batch_size):
        out.append(np.asarray(model.predict(cache.stack(records[i : i + batch_size]))))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(
    model,
    records: Sequence[ImageRecord],
    cache,
    control: Optional[np.ndarray] = None,
    epsilon: float = fairness.DEFAULT_EPSILON,
    rng: Optional[np.random.Generator] = None,
    batch_size: int = 64,
) -> fairness.FairnessReport:
    """Eval-mode predictions on ``records`` scored by :func:`fairness.build_report`.

    ``control`` fixes the control-group assignment; otherwise fair coins are
    drawn from ``rng``.
    """
    if not records:
        raise ValueError("nothing to evaluate")
    preds = predict_records(model, records, cache, batch_size)
    truth = _labels(records)
    if control is None:
        control = fairness.assign_control(len(records), rng if rng is not None else np.random.default_rng(0))
    return fairness.build_report(preds, truth, [r.tone for r in records], control, epsilon)


def train(
    model: Model,
    split: SplitDataset,
    config: TrainConfig,
    cache: Optional[ImageCache] = None,
) -> RunHistory:
    """Train ``model`` in place and audit the validation set after every epoch.

    Seeded streams (shuffle, dropout, control assignment) are all derived
    from ``config.seed``. Control groups are fixed for the whole run, split
    evenly inside each (diagnosis, tone) cell of the validation set.
    """
    config.validate()
    if not split.train or not split.validation:
        raise ValueError("split must have non-empty train and validation sets")
    side = model.config.input_size[0]
    if cache is None:
        cache = ImageCache(side, model.dtype)
    elif cache.side != side:
        raise ValueError(f"image cache side {cache.side} != model input {side}")

    shuffle_ss, dropout_ss, control_ss = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    val = split.validation
    control = fairness.assign_control(
        len(val), np.random.default_rng(control_ss), strata=[(r.diagnosis, r.tone or "") for r in val]
    )

    params = model.parameters()
    opt = make_optimizer(model.config.optimizer, params, model.config.learning_rate)
    train_set = list(split.train)
    labels = _labels(train_set)
    history = RunHistory(
        model_config=model.config,
        train_config=config,
        train_ids=[r.id for r in split.train],
        validation_ids=[r.id for r in val],
    )
    losses: list[float] = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            x = Tensor(cache.stack([train_set[i] for i in idx]))
            loss, _ = softmax_cross_entropy(model.logits(x, train=True, rng=dropout_rng), labels[idx])
            value = loss.data.item()
            if not math.isfinite(value):
                err = TrainingError(epoch, b, value)
                err.history = history
                raise err
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        report = evaluate(model, val, cache, control, config.epsilon, batch_size=max(config.batch_size, 64))
        history.epochs.append(EpochMetrics(epoch, epoch_loss, report))
        log.info(
            "epoch %d loss %.4f acc %.3f tone_di %s control_di %s",
            epoch, epoch_loss, report.accuracy,
            report.disparate_impact.serialize(), report.control_disparate_impact.serialize(),
        )
        w = config.early_stop_window
        if w is not None and len(losses) >= w and early_stop_check(losses, w, config.slope_tolerance):
            history.stopped_early = True
            break
    history.params = {name: t.data.copy() for name, t in model.params.items()}
    return history


# persistence

HISTORY_FIELDS = (
    "epoch", "train_loss", "accuracy", "selection_rate_dark", "selection_rate_light",
    "tone_di", "control_di",
    "dark_tp", "dark_fp", "dark_fn", "dark_tn",
    "light_tp", "light_fp", "light_fn", "light_tn",
    "control_a_tp", "control_a_fp", "control_a_fn", "control_a_tn",
    "control_b_tp", "control_b_fp", "control_b_fn", "control_b_tn",
    "excluded",
)


def _fmt(v, digits=3) -> str:
    if v is None:
        return fairness.UNDEFINED
    if isinstance(v, float) and math.isnan(v):
        return fairness.UNDEFINED
    return f"{v:.{digits}f}"


def history_rows(history: RunHistory) -> list[dict]:
    rows = []
    for m in history.epochs:
        r = m.report
        row = {
            "epoch": str(m.epoch),
            "train_loss": _fmt(m.train_loss, 6),
            "accuracy": _fmt(r.accuracy),
            "selection_rate_dark": _fmt(r.selection_rates.get("dark")),
            "selection_rate_light": _fmt(r.selection_rates.get("light")),
            "tone_di": _fmt(r.disparate_impact.value),
            "control_di": _fmt(r.control_disparate_impact.value),
            "excluded": str(r.grouped.excluded),
        }
        for prefix, gc, key in (
            ("dark", r.grouped, "dark"), ("light", r.grouped, "light"),
            ("control_a", r.control, fairness.CONTROL_A), ("control_b", r.control, fairness.CONTROL_B),
        ):
            cm = gc.groups.get(key, fairness.ConfusionMatrix())
            for f in ("tp", "fp", "fn", "tn"):
                row[f"{prefix}_{f}"] = str(getattr(cm, f))
        rows.append(row)
    return rows


def history_csv(history: RunHistory) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(history_rows(history))
    return buf.getvalue()


def read_history_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_history(history: RunHistory, out_dir, train_records=None, val_records=None) -> Path:
    """Write history.csv, report.json, manifest.train/.val, config.txt and params.npz."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.csv").write_text(history_csv(history), encoding="utf-8")
    if history.epochs:
        (out / "report.json").write_text(history.final.report.to_json(), encoding="utf-8")
    if train_records is not None:
        write_manifest(train_records, out / "manifest.train")
    else:
        (out / "manifest.train").write_text("".join(i + "\n" for i in history.train_ids))
    if val_records is not None:
        write_manifest(val_records, out / "manifest.val")
    else:
        (out / "manifest.val").write_text("".join(i + "\n" for i in history.validation_ids))
    text = ""
    if history.model_config is not None:
        text += history.model_config.to_text() + "\n"
    if history.train_config is not None:
        text += history.train_config.to_text()
    (out / "config.txt").write_text(text, encoding="utf-8")
    if history.params:
        np.savez(out / "params.npz", **history.params)
    return out
