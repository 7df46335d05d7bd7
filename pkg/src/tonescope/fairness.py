"""Group-fairness metrics over binary malignant/benign predictions.

Positive means malignant throughout. Rates are computed from integer counts
in float64 and only rounded when a report is serialized.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

UNDEFINED = "undefined"
DEFAULT_EPSILON = 0.2
CONTROL_A, CONTROL_B = "control_a", "control_b"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def selected(self) -> int:
        return self.tp + self.fp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def scaled(self, k: int) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp * k, self.tn * k, self.fp * k, self.fn * k)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "total": self.total}


def confusion(preds, truth) -> ConfusionMatrix:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    t = np.asarray(truth, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions but {t.size} labels")
    if p.size == 0:
        raise ValueError("no predictions to score")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def selection_rate(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("selection rate of an empty group")
    return cm.selected / cm.total


def true_positive_rate(cm):
    return _ratio(cm.tp, cm.positives)


def false_positive_rate(cm):
    return _ratio(cm.fp, cm.negatives)


def positive_predictive_value(cm):
    return _ratio(cm.tp, cm.selected)


def false_omission_rate(cm):
    return _ratio(cm.fn, cm.fn + cm.tn)


@dataclass
class GroupedConfusion:
    """Confusion matrix per group label; ``excluded`` counts unscored records."""

    groups: dict[str, ConfusionMatrix] = field(default_factory=dict)
    excluded: int = 0

    def __getitem__(self, key: str) -> ConfusionMatrix:
        return self.groups[key]

    def __contains__(self, key: str) -> bool:
        return key in self.groups

    def pooled(self) -> ConfusionMatrix:
        out = ConfusionMatrix()
        for cm in self.groups.values():
            out = out + cm
        return out

    @property
    def total(self) -> int:
        return sum(cm.total for cm in self.groups.values())

    def scaled(self, k: int) -> "GroupedConfusion":
        return GroupedConfusion({g: cm.scaled(k) for g, cm in self.groups.items()}, self.excluded * k)

    def as_dict(self) -> dict:
        return {g: cm.as_dict() for g, cm in sorted(self.groups.items())}


def grouped_confusion(preds, truth, groups, labels: Sequence[str] = ("dark", "light")) -> GroupedConfusion:
    """Split predictions by ``groups``; entries not in ``labels`` (e.g. None) are excluded."""
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    t = np.asarray(truth, dtype=np.int64).reshape(-1)
    g = list(groups)
    if not (len(p) == len(t) == len(g)):
        raise ValueError("preds, truth and groups must have equal length")
    out = {}
    for lab in labels:
        mask = np.array([x == lab for x in g], dtype=bool)
        pm, tm = p[mask], t[mask]
        out[lab] = ConfusionMatrix(
            int(np.sum((pm == 1) & (tm == 1))),
            int(np.sum((pm == 0) & (tm == 0))),
            int(np.sum((pm == 1) & (tm == 0))),
            int(np.sum((pm == 0) & (tm == 1))),
        )
    excluded = len(g) - sum(cm.total for cm in out.values())
    return GroupedConfusion(out, excluded)


@dataclass(frozen=True)
class DisparateImpact:
    """Ratio of selection rates; ``value`` is None when the denominator rate is 0."""

    value: Optional[float]
    numerator_rate: float
    denominator_rate: float

    @property
    def defined(self) -> bool:
        return self.value is not None

    def __float__(self) -> float:
        if self.value is None:
            raise ValueError("disparate impact is undefined (denominator selection rate is 0)")
        return self.value

    def serialize(self, ndigits: int = 3):
        return UNDEFINED if self.value is None else round(self.value, ndigits)


def disparate_impact(grouped: GroupedConfusion, numerator: str = "dark", denominator: str = "light") -> DisparateImpact:
    for g in (numerator, denominator):
        if g not in grouped or grouped[g].total == 0:
            raise ValueError(f"group {g!r} is empty")
    num, den = grouped[numerator], grouped[denominator]
    a, b = selection_rate(num), selection_rate(den)
    # ratio from integer counts to avoid compounding two divisions
    value = (num.selected * den.total) / (num.total * den.selected) if den.selected else None
    return DisparateImpact(value, a, b)


def independence_band(epsilon: float = DEFAULT_EPSILON) -> tuple[float, float]:
    return 1.0 - epsilon, 1.0 / (1.0 - epsilon)


def independence_test(di, epsilon: float = DEFAULT_EPSILON) -> bool:
    """True iff ``1-eps <= di <= 1/(1-eps)``."""
    value = float(di)
    lo, hi = independence_band(epsilon)
    return lo <= value <= hi


@dataclass(frozen=True)
class Gaps:
    """Absolute between-group differences; None where a group is degenerate."""

    first: Optional[float]
    second: Optional[float]
    flags: tuple[str, ...] = ()


def _gap(fn, a, b, name, flags):
    ra, rb = fn(a), fn(b)
    if ra is None or rb is None:
        flags.append(f"{name} undefined: degenerate group")
        return None
    return abs(ra - rb)


def separation_gaps(grouped: GroupedConfusion, a: str = "dark", b: str = "light") -> Gaps:
    """(|dTPR|, |dFPR|) between groups ``a`` and ``b``."""
    flags: list[str] = []
    tpr = _gap(true_positive_rate, grouped[a], grouped[b], "delta_tpr", flags)
    fpr = _gap(false_positive_rate, grouped[a], grouped[b], "delta_fpr", flags)
    return Gaps(tpr, fpr, tuple(flags))


def sufficiency_gaps(grouped: GroupedConfusion, a: str = "dark", b: str = "light") -> Gaps:
    """(|dPPV|, |dFOR|) between groups ``a`` and ``b``."""
    flags: list[str] = []
    ppv = _gap(positive_predictive_value, grouped[a], grouped[b], "delta_ppv", flags)
    fo = _gap(false_omission_rate, grouped[a], grouped[b], "delta_for", flags)
    return Gaps(ppv, fo, tuple(flags))


def assign_control(n: int, rng, strata: Optional[Sequence] = None) -> np.ndarray:
    """Random control labels (``True`` = control_a).

    Without ``strata`` each record gets an independent fair coin. With
    ``strata`` each stratum is split in half by a random permutation (odd
    leftovers by coin), so the control stays independent of whatever the
    strata encode.
    """
    if strata is None:
        return np.asarray(rng.integers(0, 2, size=n), dtype=bool)
    strata = list(strata)
    if len(strata) != n:
        raise ValueError("strata length must equal n")
    out = np.zeros(n, dtype=bool)
    buckets: dict = {}
    for i, s in enumerate(strata):
        buckets.setdefault(s, []).append(i)
    for key in sorted(buckets, key=str):
        idx = np.asarray(buckets[key])
        perm = idx[rng.permutation(len(idx))]
        half = len(idx) // 2
        out[perm[:half]] = True
        if len(idx) % 2:
            out[perm[-1]] = bool(rng.integers(0, 2))
    return out


def control_grouped(preds, truth, control: np.ndarray) -> GroupedConfusion:
    labels = [CONTROL_A if c else CONTROL_B for c in control]
    return grouped_confusion(preds, truth, labels, (CONTROL_A, CONTROL_B))


def control_disparate_impact(preds, rng, truth=None) -> DisparateImpact:
    """DI between two randomly assigned control groups.

    If a coin assignment leaves a group empty it is redrawn once; if it is
    still empty the result is undefined with rates set to NaN.
    """
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    if p.size < 2:
        raise ValueError("need at least 2 predictions for a control split")
    t = p if truth is None else np.asarray(truth)
    for _ in range(2):
        control = assign_control(p.size, rng)
        if 0 < control.sum() < p.size:
            return disparate_impact(control_grouped(p, t, control), CONTROL_A, CONTROL_B)
    return DisparateImpact(None, float("nan"), float("nan"))


def majority_class_accuracy(labels) -> float:
    """Accuracy of always predicting the most frequent class.

    Accepts 0/1 labels or objects with a ``label`` attribute.
    """
    vals = [getattr(x, "label", x) for x in labels]
    if not vals:
        raise ValueError("no labels")
    pos = sum(1 for v in vals if int(v) == 1)
    return max(pos, len(vals) - pos) / len(vals)


@dataclass
class FairnessReport:
    selection_rates: dict[str, float]
    disparate_impact: DisparateImpact
    independence_pass: Optional[bool]
    epsilon: float
    separation_gaps: Gaps
    sufficiency_gaps: Gaps
    control_disparate_impact: DisparateImpact
    majority_accuracy: float
    accuracy: float
    grouped: GroupedConfusion
    control: GroupedConfusion

    def to_dict(self, ndigits: int = 3) -> dict:
        r = lambda v: None if v is None else round(v, ndigits)  # noqa: E731
        lo, hi = independence_band(self.epsilon)
        return {
            "accuracy": r(self.accuracy),
            "majority_accuracy": r(self.majority_accuracy),
            "selection_rates": {k: r(v) for k, v in sorted(self.selection_rates.items())},
            "disparate_impact": self.disparate_impact.serialize(ndigits),
            "independence_pass": self.independence_pass,
            "epsilon": self.epsilon,
            "independence_band": [r(lo), r(hi)],
            "separation_gaps": {"delta_tpr": r(self.separation_gaps.first), "delta_fpr": r(self.separation_gaps.second)},
            "sufficiency_gaps": {"delta_ppv": r(self.sufficiency_gaps.first), "delta_for": r(self.sufficiency_gaps.second)},
            "control_disparate_impact": self.control_disparate_impact.serialize(ndigits),
            "flags": list(self.separation_gaps.flags + self.sufficiency_gaps.flags),
            "groups": self.grouped.as_dict(),
            "excluded": self.grouped.excluded,
            "control_groups": self.control.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    CSV_FIELDS = (
        "accuracy", "majority_accuracy", "selection_rate_dark", "selection_rate_light",
        "disparate_impact", "independence_pass", "delta_tpr", "delta_fpr", "delta_ppv",
        "delta_for", "control_disparate_impact",
    )

    def csv_row(self) -> dict:
        d = self.to_dict()
        return {
            "accuracy": d["accuracy"],
            "majority_accuracy": d["majority_accuracy"],
            "selection_rate_dark": d["selection_rates"].get("dark"),
            "selection_rate_light": d["selection_rates"].get("light"),
            "disparate_impact": d["disparate_impact"],
            "independence_pass": d["independence_pass"],
            **d["separation_gaps"],
            **d["sufficiency_gaps"],
            "control_disparate_impact": d["control_disparate_impact"],
        }

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def build_report(
    preds,
    truth,
    tones: Sequence[Optional[str]],
    control: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    majority_accuracy: Optional[float] = None,
) -> FairnessReport:
    """Score one evaluation pass. Records with tone None count toward accuracy
    and the control split only."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    grouped = grouped_confusion(p, t, tones)
    ctrl = control_grouped(p, t, control)
    rates = {g: selection_rate(cm) for g, cm in grouped.groups.items() if cm.total}
    if "dark" in rates and "light" in rates:
        di = disparate_impact(grouped)
        sep = separation_gaps(grouped)
        suf = sufficiency_gaps(grouped)
    else:
        nan = float("nan")
        di = DisparateImpact(None, rates.get("dark", nan), rates.get("light", nan))
        sep = suf = Gaps(None, None, ("tone group empty",))
    cdi = (
        disparate_impact(ctrl, CONTROL_A, CONTROL_B)
        if ctrl[CONTROL_A].total and ctrl[CONTROL_B].total
        else DisparateImpact(None, float("nan"), float("nan"))
    )
    return FairnessReport(
        selection_rates=rates,
        disparate_impact=di,
        independence_pass=independence_test(di, epsilon) if di.defined else None,
        epsilon=epsilon,
        separation_gaps=sep,
        sufficiency_gaps=suf,
        control_disparate_impact=cdi,
        majority_accuracy=majority_class_accuracy(t) if majority_accuracy is None else majority_accuracy,
        accuracy=accuracy(confusion(p, t)),
        grouped=grouped,
        control=ctrl,
    )
