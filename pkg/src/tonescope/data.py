"""Image metadata ingestion, Fitzpatrick-to-tone mapping, and synthetic fixtures."""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

BENIGN, MALIGNANT = "benign", "malignant"
DIAGNOSES = (BENIGN, MALIGNANT)
LIGHT, DARK = "light", "dark"
TONES = (LIGHT, DARK)
FST_VALUES = ("I", "II", "III", "IV", "V", "VI")
UNKNOWN = "unknown"

COLUMNS = ("isic_id", "diagnosis", "fitzpatrick_skin_type", "image_path")
METADATA_FILE = "metadata.csv"

_FST_ALIASES = {str(i + 1): v for i, v in enumerate(FST_VALUES)}
_TONE_OF = {"I": LIGHT, "II": LIGHT, "III": DARK, "IV": DARK}


class MetadataError(ValueError):
    """Metadata file is unreadable or violates the schema."""


def normalize_fst(value) -> str:
    """Canonical roman numeral for a Fitzpatrick value, or ``"unknown"``."""
    if value is None:
        return UNKNOWN
    s = str(value).strip().upper()
    if s.startswith("FST"):
        s = s[3:].strip()
    s = _FST_ALIASES.get(s, s)
    return s if s in FST_VALUES else UNKNOWN


def map_tone(fst) -> Optional[str]:
    """I, II -> light; III, IV -> dark; anything else -> None."""
    return _TONE_OF.get(normalize_fst(fst))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    diagnosis: str
    fst: str
    image_path: Path

    @property
    def tone(self) -> Optional[str]:
        return map_tone(self.fst)

    @property
    def label(self) -> int:
        return 1 if self.diagnosis == MALIGNANT else 0


def load_metadata(csv_path, errors: Optional[list] = None) -> list[ImageRecord]:
    """Parse a metadata CSV into records.

    Relative image paths are resolved against the CSV's directory. Rows
    with an unusable FST are kept (tone absent). Malformed rows are appended
    to ``errors`` as ``(row_number, message)``; when ``errors`` is not given
    any malformed row raises :class:`MetadataError` listing all of them.
    """
    path = Path(csv_path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise MetadataError(f"cannot read {path}: {exc}") from exc
    problems: list[tuple[int, str]] = []
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise MetadataError(f"{path}: missing required column(s): {', '.join(missing)}")
        reader.fieldnames = header
        for rowno, row in enumerate(reader, start=2):
            rid = (row.get("isic_id") or "").strip()
            diag = (row.get("diagnosis") or "").strip().lower()
            img = (row.get("image_path") or "").strip()
            if not rid:
                problems.append((rowno, "empty isic_id"))
                continue
            if diag not in DIAGNOSES:
                problems.append((rowno, f"diagnosis {diag!r} not in {DIAGNOSES}"))
                continue
            if not img:
                problems.append((rowno, "empty image_path"))
                continue
            if rid in seen:
                raise MetadataError(f"{path}: duplicate id {rid!r} on rows {seen[rid]} and {rowno}")
            seen[rid] = rowno
            p = Path(img)
            if not p.is_absolute():
                p = path.parent / p
            records.append(ImageRecord(rid, diag, normalize_fst(row.get("fitzpatrick_skin_type")), p))
    if problems:
        if errors is None:
            detail = "; ".join(f"row {n}: {msg}" for n, msg in problems)
            raise MetadataError(f"{path}: {len(problems)} malformed row(s): {detail}")
        errors.extend(problems)
    return records


def write_metadata(records: Iterable[ImageRecord], csv_path) -> None:
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            img = Path(r.image_path)
            try:
                # record paths are relative to the cwd; the file stores them relative to the CSV
                img = Path(os.path.relpath(img.absolute(), path.parent.absolute()))
            except ValueError:
                img = img.absolute()
            w.writerow([r.id, r.diagnosis, r.fst, img.as_posix()])


def load_image(record, target_side: int) -> np.ndarray:
    """Decode, convert to RGB, bilinearly resize to a square, scale to [0, 1].

    Returns a float32 array of shape ``(3, target_side, target_side)``.
    """
    path = record.image_path if isinstance(record, ImageRecord) else Path(record)
    try:
        with Image.open(path) as im:
            if im.width == 0 or im.height == 0:
                raise ValueError(f"{path}: zero-area image")
            im = im.convert("RGB").resize((target_side, target_side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, Image.DecompressionBombError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / np.float32(255.0))


class ImageCache:
    """Decodes each record's image once at a fixed side length."""

    def __init__(self, side: int, dtype=np.float32) -> None:
        self.side = side
        self.dtype = dtype
        self._arrays: dict[str, np.ndarray] = {}

    def get(self, record: ImageRecord) -> np.ndarray:
        arr = self._arrays.get(record.id)
        if arr is None:
            arr = load_image(record, self.side).astype(self.dtype, copy=False)
            self._arrays[record.id] = arr
        return arr

    def stack(self, records) -> np.ndarray:
        return np.stack([self.get(r) for r in records])


@dataclass(frozen=True)
class DatasetSummary:
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def by_diagnosis(self, diagnosis: str) -> int:
        return sum(v for (d, _), v in self.counts.items() if d == diagnosis)

    def by_tone(self, tone: str) -> int:
        return sum(v for (_, t), v in self.counts.items() if t == tone)

    def ratio(self, n: int) -> float:
        return n / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        cells = {f"{d}_{t}": self.counts.get((d, t), 0) for d in DIAGNOSES for t in TONES}
        return {
            "total": self.total,
            "cells": cells,
            "cell_ratios": {k: self.ratio(v) for k, v in cells.items()},
            "diagnosis": {d: self.by_diagnosis(d) for d in DIAGNOSES},
            "diagnosis_ratios": {d: self.ratio(self.by_diagnosis(d)) for d in DIAGNOSES},
            "tone": {t: self.by_tone(t) for t in TONES},
            "tone_ratios": {t: self.ratio(self.by_tone(t)) for t in TONES},
        }


def summarize(records: Iterable[ImageRecord]) -> DatasetSummary:
    c: Counter = Counter()
    for r in records:
        if r.tone is None:
            raise ValueError(f"record {r.id} has no tone (fst={r.fst})")
        c[(r.diagnosis, r.tone)] += 1
    return DatasetSummary({(d, t): c.get((d, t), 0) for d in DIAGNOSES for t in TONES})


# synthetic fixtures


@dataclass(frozen=True)
class CellCounts:
    benign_light: int = 0
    benign_dark: int = 0
    malignant_light: int = 0
    malignant_dark: int = 0

    @classmethod
    def parse(cls, text: str) -> "CellCounts":
        """``"bl,bd,ml,md"`` in the field order above."""
        parts = [int(v) for v in text.split(",")]
        if len(parts) != 4:
            raise ValueError("expected four comma-separated counts: benign_light,benign_dark,malignant_light,malignant_dark")
        return cls(*parts)

    def cells(self):
        yield BENIGN, LIGHT, self.benign_light
        yield BENIGN, DARK, self.benign_dark
        yield MALIGNANT, LIGHT, self.malignant_light
        yield MALIGNANT, DARK, self.malignant_dark


BASE_SKIN = np.array([0.62, 0.48, 0.42])
BRIGHTNESS_SHIFT = 0.18
NOISE_SD = 0.06
BLOB_COLOR = np.array([0.12, 0.08, 0.10])


def generate_fixture(
    root,
    counts: CellCounts,
    tone_signal: str = "none",
    diagnosis_signal: str = "blob",
    seed: int = 0,
    side: int = 64,
) -> list[ImageRecord]:
    """Write PNGs under ``root/images`` and ``root/metadata.csv``.

    Every image is a noisy skin-coloured field. ``brightness_shift`` lifts
    light-tone images by a fixed offset (dark ones are lowered by the same
    amount); ``blob`` draws a dark disc on malignant images.
    """
    if tone_signal not in ("none", "brightness_shift"):
        raise ValueError(f"unknown tone_signal {tone_signal!r}")
    if diagnosis_signal not in ("none", "blob"):
        raise ValueError(f"unknown diagnosis_signal {diagnosis_signal!r}")
    if min(n for _, _, n in counts.cells()) < 0:
        raise ValueError("counts must be >= 0")
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    records = []
    k = 0
    for diagnosis, tone, n in counts.cells():
        for _ in range(n):
            fst = rng.choice(("I", "II") if tone == LIGHT else ("III", "IV"))
            base = BASE_SKIN.copy()
            if tone_signal == "brightness_shift":
                base += BRIGHTNESS_SHIFT / 2 if tone == LIGHT else -BRIGHTNESS_SHIFT / 2
            img = base[None, None, :] + rng.normal(0.0, NOISE_SD, (side, side, 3))
            if diagnosis_signal == "blob" and diagnosis == MALIGNANT:
                r = rng.uniform(side * 0.12, side * 0.22)
                cy, cx = rng.uniform(r, side - r, size=2)
                disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                img[disc] = BLOB_COLOR + rng.normal(0.0, NOISE_SD / 2, (int(disc.sum()), 3))
            pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
            rid = f"fx{k:05d}"
            path = img_dir / f"{rid}.png"
            Image.fromarray(pix, "RGB").save(path)
            records.append(ImageRecord(rid, diagnosis, str(fst), path))
            k += 1
    write_metadata(records, root / METADATA_FILE)
    return records
