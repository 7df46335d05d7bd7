"""Two-stage under-sampling (diagnosis, then tone) and train/validation splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

from tonescope.data import BENIGN, DARK, LIGHT, MALIGNANT, ImageRecord


def _undersample(records, key: Callable, a: Hashable, b: Hashable, rng: np.random.Generator):
    groups = {a: [], b: []}
    for r in records:
        k = key(r)
        if k in groups:
            groups[k].append(r)
    if not groups[a]:
        raise ValueError(f"no {a} records to balance against")
    if not groups[b]:
        return [groups[a][i] for i in rng.permutation(len(groups[a]))]
    small, big = (a, b) if len(groups[a]) <= len(groups[b]) else (b, a)
    keep_idx = np.sort(rng.choice(len(groups[big]), size=len(groups[small]), replace=False))
    kept = groups[small] + [groups[big][i] for i in keep_idx]
    order = rng.permutation(len(kept))
    return [kept[i] for i in order]


def undersample_diagnosis(records: Sequence[ImageRecord], rng: np.random.Generator) -> list[ImageRecord]:
    """Keep every record of the minority diagnosis (malignant in practice) and
    sample the majority one without replacement down to the same count."""
    return _undersample(records, lambda r: r.diagnosis, MALIGNANT, BENIGN, rng)


def undersample_tone(records: Sequence[ImageRecord], rng: np.random.Generator) -> list[ImageRecord]:
    """Keep every record of the minority tone (dark in practice) and sample the
    other tone down to match. Records without a tone are dropped. Diagnosis
    ratios are not re-corrected."""
    return _undersample(records, lambda r: r.tone, DARK, LIGHT, rng)


def balance(records: Sequence[ImageRecord], rng: np.random.Generator) -> list[ImageRecord]:
    return undersample_tone(undersample_diagnosis(records, rng), rng)


@dataclass
class SplitDataset:
    train: list[ImageRecord]
    validation: list[ImageRecord]
    seed: int = 0
    strategy: str = "imbalanced"


def validation_count(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))


def _largest_remainder(sizes: dict, fraction: float, total: int) -> dict:
    quotas = {k: n * fraction for k, n in sizes.items()}
    alloc = {k: int(math.floor(q)) for k, q in quotas.items()}
    left = total - sum(alloc.values())
    # ties broken by cell key so the result does not depend on input order
    ranked = sorted(quotas, key=lambda k: (-(quotas[k] - alloc[k]), str(k)))
    for k in ranked[:left]:
        alloc[k] += 1
    return alloc


def split(
    records: Sequence[ImageRecord],
    validation_fraction: float = 1 / 3,
    rng: np.random.Generator | None = None,
    stratify: bool = False,
    seed: int = 0,
    strategy: str = "imbalanced",
) -> SplitDataset:
    """Random disjoint split with ``round(n * validation_fraction)`` validation records.

    With ``stratify`` the fraction is applied inside every (diagnosis, tone)
    cell, rounding by largest remainder so cell sizes add up to the overall
    validation size.
    """
    n = len(records)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must be in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(seed)
    n_val = validation_count(n, validation_fraction)
    if not stratify:
        order = rng.permutation(n)
        val_idx = set(order[:n_val].tolist())
    else:
        cells: dict = {}
        for i, r in enumerate(records):
            cells.setdefault((r.diagnosis, r.tone or ""), []).append(i)
        alloc = _largest_remainder({k: len(v) for k, v in cells.items()}, validation_fraction, n_val)
        val_idx = set()
        for key in sorted(cells, key=str):
            members = cells[key]
            pick = rng.permutation(len(members))[: alloc[key]]
            val_idx.update(members[i] for i in pick)
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return SplitDataset(train, val, seed, strategy)


def write_manifest(records: Sequence[ImageRecord], path) -> None:
    Path(path).write_text("".join(r.id + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
