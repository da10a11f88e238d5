"""Patient representations: one-hot event matrix, summed embedding vector and
the temporal embedding matrix (one column per visit)."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingTable
from .errors import FormatError, OutOfVocabularyError
from .records import PatientRecord, Vocabulary


@dataclass
class PatientMatrix:
    patient_id: str
    data: np.ndarray  # d x N_p
    visit_dates: list[dt.date] | None = None

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_visits(self) -> int:
        return self.data.shape[1]


@dataclass
class OneHotMatrix:
    patient_id: str
    data: np.ndarray  # V x N_p, entries in {0, 1}


@dataclass
class SummedVector:
    patient_id: str
    data: np.ndarray


def _rows(record: PatientRecord, vocabulary: Vocabulary, visit) -> list[int]:
    try:
        return vocabulary.indices(visit.codes)
    except KeyError as exc:
        raise OutOfVocabularyError(exc.args[0], record.patient_id) from None


def to_patient_matrix(record: PatientRecord, table: EmbeddingTable,
                      normalize: bool = False) -> PatientMatrix:
    """Column j is the sum of the embeddings of the events in visit j.

    With ``normalize`` every nonzero column is scaled to unit L2 norm.
    """
    cols = []
    for visit in record.visits:
        idx = _rows(record, table.vocabulary, visit)
        cols.append(table.vectors[idx].sum(axis=0))
    data = np.stack(cols, axis=1)
    if normalize:
        norms = np.linalg.norm(data, axis=0)
        data = data / np.where(norms > 0, norms, 1.0)
    return PatientMatrix(record.patient_id, data, [v.date for v in record.visits])


def to_one_hot(record: PatientRecord, vocabulary: Vocabulary) -> OneHotMatrix:
    data = np.zeros((len(vocabulary), record.n_visits), dtype=np.int8)
    for j, visit in enumerate(record.visits):
        data[_rows(record, vocabulary, visit), j] = 1
    return OneHotMatrix(record.patient_id, data)


def to_summed_vector(record: PatientRecord, table: EmbeddingTable) -> SummedVector:
    """Sum of every event embedding; loses the visit order."""
    idx = [i for visit in record.visits for i in _rows(record, table.vocabulary, visit)]
    return SummedVector(record.patient_id, table.vectors[idx].sum(axis=0))


def event_count_vector(record: PatientRecord, vocabulary: Vocabulary) -> np.ndarray:
    """Row sums of the one-hot matrix: visits in which each code occurs."""
    return to_one_hot(record, vocabulary).data.sum(axis=1).astype(float)


def pad_columns(data: np.ndarray, min_columns: int) -> np.ndarray:
    """Right-pad with zero columns up to ``min_columns``."""
    missing = min_columns - data.shape[1]
    if missing <= 0:
        return data
    return np.concatenate([data, np.zeros((data.shape[0], missing))], axis=1)


def write_patient_matrices(matrices: Iterable[PatientMatrix], path) -> None:
    """Text format: ``patient_id d N_p`` then d rows of N_p decimals, per patient."""
    with open(path, "w", encoding="utf-8") as fh:
        for pm in matrices:
            d, n = pm.data.shape
            fh.write(f"{pm.patient_id} {d} {n}\n")
            for row in pm.data:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_patient_matrices(path) -> list[PatientMatrix]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) != 3:
            raise FormatError("expected header 'patient_id d N_p'", path, i + 1)
        pid = header[0]
        try:
            d, n = int(header[1]), int(header[2])
        except ValueError:
            raise FormatError("non-integer matrix shape", path, i + 1) from None
        rows = lines[i + 1:i + 1 + d]
        if len(rows) != d:
            raise FormatError(f"patient {pid}: expected {d} rows", path, i + 1)
        data = np.empty((d, n))
        for r, line in enumerate(rows):
            vals = line.split()
            if len(vals) != n:
                raise FormatError(f"expected {n} values, got {len(vals)}", path, i + 2 + r)
            data[r] = [float(v) for v in vals]
        out.append(PatientMatrix(pid, data))
        i += 1 + d
    return out


def matrices_by_id(matrices: Sequence[PatientMatrix]) -> dict[str, PatientMatrix]:
    return {pm.patient_id: pm for pm in matrices}
