"""Dataset manifests: JSON Lines records, validation and attribute-balance reports.

File layout: the first line is a header object ``{"manifest": {...}}`` holding
``schema_version``, ``identifier_token`` and optionally ``declared_cells``;
every following line is one record with exactly the :class:`DatasetRecord`
field names. Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ValidationError

MANIFEST_SCHEMA_VERSION = 1
RACES = ("AfricanAmerican", "Asian", "White")
GENDERS = ("male", "female")
SOURCES = ("training", "generated")
RECORD_FIELDS = (
    "texture_path",
    "face_image_path",
    "identity_id",
    "race",
    "gender",
    "prompt_attributes",
    "source",
)


@dataclass(frozen=True)
class DatasetRecord:
    texture_path: str
    face_image_path: str
    identity_id: str
    race: str | None = None
    gender: str | None = None
    prompt_attributes: str = ""
    source: str = "training"

    @property
    def cell(self) -> tuple[str, str] | None:
        if self.race is None or self.gender is None:
            return None
        return (self.race, self.gender)


@dataclass
class DatasetManifest:
    records: list[DatasetRecord] = field(default_factory=list)
    identifier_token: str = "sks"
    declared_cells: list[tuple[str, str]] | None = None
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path | None = None

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def header(self) -> dict:
        h = {"schema_version": self.schema_version, "identifier_token": self.identifier_token}
        if self.declared_cells is not None:
            h["declared_cells"] = [list(c) for c in self.declared_cells]
        return h

    def to_jsonl(self) -> str:
        lines = [json.dumps({"manifest": self.header()}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True, ensure_ascii=False) for r in self.records]
        return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_jsonl(), encoding="utf-8")


def parse_manifest(text: str, root: Path | None = None) -> DatasetManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError("manifest is empty (missing header line)")
    try:
        header = json.loads(lines[0])["manifest"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError("first manifest line must be a {\"manifest\": {...}} header") from exc
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported manifest schema_version {header.get('schema_version')!r} "
            f"(expected {MANIFEST_SCHEMA_VERSION})"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from exc
        unknown = set(obj) - set(RECORD_FIELDS)
        if unknown:
            raise ValidationError(f"manifest line {lineno}: unknown fields {sorted(unknown)}")
        for required in ("texture_path", "face_image_path", "identity_id"):
            if required not in obj:
                raise ValidationError(f"manifest line {lineno}: missing field {required!r}")
        records.append(DatasetRecord(**obj))
    cells = header.get("declared_cells")
    return DatasetManifest(
        records=records,
        identifier_token=header.get("identifier_token", "sks"),
        declared_cells=[tuple(c) for c in cells] if cells is not None else None,
        schema_version=header["schema_version"],
        root=root,
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


@dataclass(frozen=True)
class Violation:
    kind: str  # missing-file | duplicate-key | missing-attribute | bad-value
    message: str
    record: int | None = None

    def __str__(self) -> str:
        where = f"record {self.record}: " if self.record is not None else ""
        return f"[{self.kind}] {where}{self.message}"


def validate_manifest(manifest: DatasetManifest) -> list[Violation]:
    """Every problem found, as data; an empty list means the manifest is valid."""
    out: list[Violation] = []
    seen: dict[tuple[str, str], int] = {}
    for i, rec in enumerate(manifest.records):
        key = (rec.identity_id, rec.texture_path)
        if key in seen:
            out.append(Violation("duplicate-key", f"duplicates record {seen[key]} {key}", i))
        else:
            seen[key] = i
        for attr in ("texture_path", "face_image_path"):
            rel = getattr(rec, attr)
            if not manifest.resolve(rel).is_file():
                out.append(Violation("missing-file", f"{attr} {rel} does not exist", i))
        if rec.source not in SOURCES:
            out.append(Violation("bad-value", f"source {rec.source!r} not in {SOURCES}", i))
        if rec.race is not None and rec.race not in RACES:
            out.append(Violation("bad-value", f"race {rec.race!r} not in {RACES}", i))
        if rec.gender is not None and rec.gender not in GENDERS:
            out.append(Violation("bad-value", f"gender {rec.gender!r} not in {GENDERS}", i))
        if rec.source == "training":
            for attr in ("race", "gender"):
                if getattr(rec, attr) is None:
                    out.append(Violation("missing-attribute", f"training record lacks {attr}", i))
    return out


@dataclass
class BalanceReport:
    counts: np.ndarray  # (len(RACES), len(GENDERS))
    balanced: bool
    total: int
    cells: list[tuple[str, str]]

    def count(self, race: str, gender: str) -> int:
        return int(self.counts[RACES.index(race), GENDERS.index(gender)])

    def to_dict(self) -> dict:
        return {
            "counts": {r: {g: self.count(r, g) for g in GENDERS} for r in RACES},
            "balanced": self.balanced,
            "total": self.total,
            "cells": [list(c) for c in self.cells],
        }

    def format_table(self) -> str:
        lines = [f"{'':<16}" + "".join(f"{g:>8}" for g in GENDERS)]
        for r in RACES:
            lines.append(f"{r:<16}" + "".join(f"{self.count(r, g):>8}" for g in GENDERS))
        lines.append(f"total={self.total} balanced={self.balanced}")
        return "\n".join(lines)


def balance_report(manifest: DatasetManifest) -> BalanceReport:
    """Per (race, gender) counts. Balanced iff every considered cell holds the same count.

    The considered cells are the manifest's ``declared_cells`` when present,
    otherwise all six.
    """
    counts = np.zeros((len(RACES), len(GENDERS)), dtype=np.int64)
    for i, rec in enumerate(manifest.records):
        if rec.race not in RACES or rec.gender not in GENDERS:
            raise ValidationError(f"record {i} ({rec.identity_id}) has no valid race/gender attribution")
        counts[RACES.index(rec.race), GENDERS.index(rec.gender)] += 1
    cells = (
        [tuple(c) for c in manifest.declared_cells]
        if manifest.declared_cells is not None
        else [(r, g) for r in RACES for g in GENDERS]
    )
    for r, g in cells:
        if r not in RACES or g not in GENDERS:
            raise ValidationError(f"declared cell {(r, g)} is not a valid race/gender pair")
    if not manifest.records:
        warnings.warn("balance report of an empty manifest is vacuously balanced", RuntimeWarning, stacklevel=2)
    considered = {counts[RACES.index(r), GENDERS.index(g)] for r, g in cells}
    inside = sum(int(counts[RACES.index(r), GENDERS.index(g)]) for r, g in set(cells))
    # a record outside the declared cells breaks balance too
    balanced = len(considered) <= 1 and inside == int(counts.sum())
    return BalanceReport(counts, balanced, int(counts.sum()), cells)
