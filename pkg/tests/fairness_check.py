"""Shared driver comparing the fairness module against the counting oracle."""

import itertools

from tonescope import fairness as F

from oracles import SYMBOLS, compositions, log_from_counts, metric_oracle


def library_metrics(log):
    preds = [p for p, _, _ in log]
    truth = [t for _, t, _ in log]
    groups = [g for _, _, g in log]
    gc = F.grouped_confusion(preds, truth, groups)
    out = {"accuracy": F.accuracy(F.confusion(preds, truth))}
    for name in ("dark", "light"):
        cm = gc[name]
        out[f"sel_{name}"] = F.selection_rate(cm) if cm.total else None
        out[f"tpr_{name}"] = F.true_positive_rate(cm)
        out[f"fpr_{name}"] = F.false_positive_rate(cm)
        out[f"ppv_{name}"] = F.positive_predictive_value(cm)
        out[f"for_{name}"] = F.false_omission_rate(cm)
    if gc["dark"].total and gc["light"].total:
        out["di"] = F.disparate_impact(gc).value
        sep, suf = F.separation_gaps(gc), F.sufficiency_gaps(gc)
        out["dtpr"], out["dfpr"], out["dppv"], out["dfor"] = sep.first, sep.second, suf.first, suf.second
    else:
        out["di"] = None
        for k in ("dtpr", "dfpr", "dppv", "dfor"):
            a, b = out[f"{k[1:]}_dark"], out[f"{k[1:]}_light"]
            out[k] = None if a is None or b is None else abs(a - b)
    return out


def ordered_logs(max_len):
    for n in range(1, max_len + 1):
        yield from (list(t) for t in itertools.product(SYMBOLS, repeat=n))


def multiset_logs(max_len):
    for n in range(1, max_len + 1):
        for counts in compositions(n, len(SYMBOLS)):
            yield log_from_counts(counts)


def mismatches(logs):
    """Return (number checked, first mismatching log or None)."""
    checked = 0
    for log in logs:
        checked += 1
        if library_metrics(log) != metric_oracle(log):
            return checked, log
    return checked, None
