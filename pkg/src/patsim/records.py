"""Longitudinal event records: data model, file I/O and frequency filters.

A patient record is a list of visits sorted by date; a visit is the set of
events sharing one calendar date.  Files are either JSONL (one event per
line) or CSV with the header ``patient_id,date,code,kind,cohort``.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import ParseError

CSV_FIELDS = ("patient_id", "date", "code", "kind", "cohort")


class EventKind(str, Enum):
    DIAGNOSIS = "diagnosis"
    MEDICATION = "medication"
    OTHER = "other"


@dataclass(frozen=True)
class MedicalEvent:
    code: str
    timestamp: dt.date
    kind: EventKind = EventKind.OTHER

    def __post_init__(self):
        if not self.code:
            raise ValueError("event code must be non-empty")
        if not isinstance(self.timestamp, dt.date):
            raise TypeError(f"timestamp must be a date, got {type(self.timestamp).__name__}")


@dataclass(frozen=True)
class Visit:
    date: dt.date
    events: tuple[MedicalEvent, ...]

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"visit on {self.date} has no events")
        for ev in self.events:
            if ev.timestamp != self.date:
                raise ValueError(f"event {ev.code} dated {ev.timestamp} in visit of {self.date}")

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(ev.code for ev in self.events)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]
    cohort: str | None = None

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        for prev, cur in zip(self.visits, self.visits[1:]):
            if not prev.date < cur.date:
                raise ValueError(f"patient {self.patient_id}: visits not strictly sorted by date")

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def events(self) -> list[MedicalEvent]:
        return [ev for v in self.visits for ev in v.events]

    @property
    def codes(self) -> list[str]:
        """Time-ordered event codes (the patient's "paragraph")."""
        return [ev.code for v in self.visits for ev in v.events]

    @property
    def n_events(self) -> int:
        return sum(len(v.events) for v in self.visits)

    def with_events(self, keep) -> PatientRecord | None:
        """Copy keeping only events for which ``keep(event)`` is true.

        Empty visits are dropped; returns None if nothing remains.
        """
        visits = []
        for v in self.visits:
            kept = tuple(ev for ev in v.events if keep(ev))
            if kept:
                visits.append(Visit(v.date, kept))
        if not visits:
            return None
        return PatientRecord(self.patient_id, tuple(visits), self.cohort)


@dataclass(frozen=True)
class Vocabulary:
    """Dense index over event codes.

    ``patient_counts[code]`` is the number of patients whose record contains
    the code; ``occurrence_counts[code]`` the total number of occurrences.
    """

    codes: tuple[str, ...]
    patient_counts: dict[str, int] = field(default_factory=dict, compare=False)
    occurrence_counts: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("vocabulary codes must be unique")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self.codes)

    def index(self, code: str) -> int:
        return self._index[code]

    def indices(self, codes: Iterable[str]) -> list[int]:
        return [self._index[c] for c in codes]

    def restrict(self, codes: Iterable[str]) -> Vocabulary:
        keep = set(codes)
        kept = tuple(c for c in self.codes if c in keep)
        return Vocabulary(
            kept,
            {c: self.patient_counts[c] for c in kept if c in self.patient_counts},
            {c: self.occurrence_counts[c] for c in kept if c in self.occurrence_counts},
        )


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text)


def _assemble(rows: Iterable[tuple[int, str, dt.date, str, EventKind, str | None]],
              path) -> list[PatientRecord]:
    by_patient: OrderedDict[str, dict] = OrderedDict()
    for lineno, pid, date, code, kind, cohort in rows:
        entry = by_patient.setdefault(pid, {"cohort": None, "days": {}, "seen": set()})
        if cohort:
            if entry["cohort"] is not None and entry["cohort"] != cohort:
                raise ParseError(f"patient {pid} has conflicting cohorts "
                                 f"{entry['cohort']!r} and {cohort!r}", path, lineno)
            entry["cohort"] = cohort
        key = (date, code)
        if key in entry["seen"]:
            continue
        entry["seen"].add(key)
        entry["days"].setdefault(date, []).append(MedicalEvent(code, date, kind))
    records = []
    for pid, entry in by_patient.items():
        visits = tuple(Visit(d, tuple(evs)) for d, evs in sorted(entry["days"].items()))
        records.append(PatientRecord(pid, visits, entry["cohort"]))
    return records


def _row(lineno, obj, path):
    try:
        pid = obj["patient_id"]
        code = obj["code"]
        date_text = obj["date"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", path, lineno) from None
    if not isinstance(pid, str) or not pid:
        raise ParseError("patient_id must be a non-empty string", path, lineno)
    if not isinstance(code, str) or not code:
        raise ParseError("code must be a non-empty string", path, lineno)
    try:
        date = _parse_date(date_text)
    except (TypeError, ValueError):
        raise ParseError(f"invalid date {date_text!r}", path, lineno) from None
    kind_text = obj.get("kind") or "other"
    try:
        kind = EventKind(kind_text)
    except ValueError:
        raise ParseError(f"invalid kind {kind_text!r}", path, lineno) from None
    cohort = obj.get("cohort") or None
    if cohort is not None and not isinstance(cohort, str):
        raise ParseError("cohort must be a string", path, lineno)
    return lineno, pid, date, code, kind, cohort


def _jsonl_rows(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", path, lineno)
            yield _row(lineno, obj, path)


def _csv_rows(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        header = [h.strip() for h in header]
        missing = {"patient_id", "date", "code"} - set(header)
        if missing:
            raise ParseError(f"CSV header lacks {sorted(missing)}", path, 1)
        for row in reader:
            lineno = reader.line_num
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            yield _row(lineno, dict(zip(header, row)), path)


def _infer_format(path: Path, format: str | None) -> str:
    if format is not None:
        if format not in ("jsonl", "csv"):
            raise ValueError(f"unknown event file format {format!r}")
        return format
    return "csv" if path.suffix.lower() == ".csv" else "jsonl"


def parse_events(path, format: str | None = None) -> list[PatientRecord]:
    """Read an event file into patient records.

    Patients appear in order of first occurrence.  Events are grouped into
    visits by date; within a visit the file order is kept.  Repeated
    (patient, date, code) triples are dropped.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    rows = _csv_rows(path) if fmt == "csv" else _jsonl_rows(path)
    return _assemble(rows, path)


def write_events(records: Sequence[PatientRecord], path, format: str | None = None) -> None:
    """Serialize records so that ``parse_events`` returns them unchanged."""
    path = Path(path)
    fmt = _infer_format(path, format)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for rec in records:
                for ev in rec.events:
                    writer.writerow([rec.patient_id, ev.timestamp.isoformat(), ev.code,
                                     ev.kind.value, rec.cohort or ""])
        else:
            for rec in records:
                for ev in rec.events:
                    obj = {"patient_id": rec.patient_id, "date": ev.timestamp.isoformat(),
                           "code": ev.code, "kind": ev.kind.value}
                    if rec.cohort is not None:
                        obj["cohort"] = rec.cohort
                    fh.write(json.dumps(obj) + "\n")


def count_codes(records: Iterable[PatientRecord]) -> tuple[Counter, Counter]:
    """Patient-level support and occurrence counts of every code."""
    support: Counter = Counter()
    occurrences: Counter = Counter()
    for rec in records:
        codes = rec.codes
        occurrences.update(codes)
        support.update(set(codes))
    return support, occurrences


def filter_vocabulary(records: Sequence[PatientRecord], max_patient_frac: float = 0.9,
                      min_patient_count: int = 5) -> Vocabulary:
    """Keep codes present in at least ``min_patient_count`` patients and at
    most ``max_patient_frac`` of all patients.  Codes are sorted."""
    if not 0 < max_patient_frac <= 1:
        raise ValueError(f"max_patient_frac must lie in (0, 1], got {max_patient_frac}")
    if min_patient_count < 0:
        raise ValueError("min_patient_count must be >= 0")
    support, occurrences = count_codes(records)
    # floor(f * P) with slack for binary fractions such as 0.29 * 100
    upper = math.floor(max_patient_frac * len(records) + 1e-9)
    kept = sorted(c for c, s in support.items() if min_patient_count <= s <= upper)
    return Vocabulary(tuple(kept), {c: support[c] for c in kept},
                      {c: occurrences[c] for c in kept})


def filter_patients(records: Sequence[PatientRecord], min_events: int = 40,
                    vocabulary: Vocabulary | None = None) -> list[PatientRecord]:
    """Drop out-of-vocabulary events, then patients with fewer than
    ``min_events`` remaining events."""
    if min_events < 0:
        raise ValueError("min_events must be >= 0")
    out = []
    for rec in records:
        if vocabulary is not None:
            rec = rec.with_events(lambda ev: ev.code in vocabulary)
            if rec is None:
                continue
        if rec.n_events >= min_events:
            out.append(rec)
    return out
