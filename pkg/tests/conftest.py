import datetime as dt

import numpy as np
import pytest

from patsim.records import EventKind, MedicalEvent, PatientRecord, Visit


def make_record(pid, visits, cohort=None, start=dt.date(2015, 1, 1)):
    """Build a record from lists of codes, one list per visit (visits a week apart)."""
    out = []
    for j, codes in enumerate(visits):
        date = start + dt.timedelta(days=7 * j)
        out.append(Visit(date, tuple(MedicalEvent(c, date, EventKind.DIAGNOSIS) for c in codes)))
    return PatientRecord(pid, tuple(out), cohort)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
