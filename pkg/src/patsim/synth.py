"""Synthetic multi-cohort event records.

Generative model, per cohort:

* ``shared`` codes are used by every cohort with the same Zipf weights;
* each cohort owns a disjoint block of ``cohort-specific`` codes;
* the remaining ``comorbidity`` codes are used by every cohort.  Their
  weights depend on a latent comorbidity profile drawn per patient
  independently of the cohort (Gamma-distributed tilts of strength
  ``profile_tilt``), plus an optional cohort-dependent tilt
  ``cohort_tilt``.  Profiles are nuisance structure: they dominate the
  variance of raw counts without saying anything about the cohort.

An event is drawn from the cohort-specific block with probability
``cohort_event_frac`` and from the background (shared + comorbidity codes)
otherwise.  Each patient additionally owns a few chronic codes that recur
across visits, so chronic codes have high within-patient frequency.  The
most frequent codes of each cohort block are the cohort identifiers.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .records import EventKind, MedicalEvent, PatientRecord, Visit, filter_patients

COHORT_NAMES = ("COPD", "Diabetes", "Obesity", "HeartFailure")
START_DATE = dt.date(2012, 1, 1)
SPAN_DAYS = 4 * 365 + 1


@dataclass(frozen=True)
class SynthConfig:
    n_cohorts: int = 4
    patients_per_cohort: int = 200
    vocab_size: int = 600
    shared_vocab_frac: float = 0.3
    cohort_specific_frac: float = 0.1
    mean_events_per_patient: int = 60
    visits_per_patient_range: tuple[int, int] = (8, 30)
    chronic_frac: float = 0.15
    # signal strength: share of events drawn from the cohort's own codes
    cohort_event_frac: float = 0.15
    # share of each cohort's specific codes that act as identifiers
    identifier_frac: float = 0.2
    chronic_per_patient: int = 3
    chronic_event_frac: float = 0.3
    n_profiles: int = 4
    profile_tilt: float = 1.0
    cohort_tilt: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "visits_per_patient_range",
                           tuple(int(v) for v in self.visits_per_patient_range))
        self.validate()

    def validate(self):
        for name in ("n_cohorts", "patients_per_cohort", "vocab_size", "mean_events_per_patient"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        lo, hi = self.visits_per_patient_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"visits_per_patient_range must satisfy 1 <= min <= max, got {(lo, hi)}")
        if hi > SPAN_DAYS:
            raise ConfigError(f"at most {SPAN_DAYS} visits fit in the date span")
        for name in ("shared_vocab_frac", "cohort_specific_frac", "chronic_frac",
                     "cohort_event_frac", "identifier_frac", "chronic_event_frac"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.shared_vocab_frac + self.n_cohorts * self.cohort_specific_frac > 1 + 1e-12:
            raise ConfigError("shared_vocab_frac + n_cohorts * cohort_specific_frac must be <= 1")
        n_specific = int(round(self.cohort_specific_frac * self.vocab_size))
        if self.cohort_event_frac > 0 and n_specific == 0:
            raise ConfigError("cohort_event_frac > 0 needs at least one cohort-specific code")
        n_background = self.vocab_size - self.n_cohorts * n_specific
        if self.cohort_event_frac < 1 and n_background <= 0:
            raise ConfigError("no background codes left for non-cohort events")
        if self.chronic_per_patient < 0 or self.profile_tilt < 0 or self.cohort_tilt < 0:
            raise ConfigError("chronic_per_patient, profile_tilt and cohort_tilt must be >= 0")
        if self.n_profiles < 1:
            raise ConfigError("n_profiles must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> SynthConfig:
        """4 cohorts x 2,000 patients, ~124 events each, 6,064 codes."""
        params = dict(n_cohorts=4, patients_per_cohort=2000, vocab_size=6064,
                      mean_events_per_patient=124, visits_per_patient_range=(10, 60))
        params.update(overrides)
        return cls(**params)


@dataclass
class GroundTruth:
    cohorts: dict[str, str]
    identifier_codes: dict[str, list[str]] = field(default_factory=dict)

    @property
    def cohort_names(self) -> list[str]:
        return sorted(set(self.cohorts.values()))

    def all_identifiers(self) -> set[str]:
        return {c for codes in self.identifier_codes.values() for c in codes}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"cohorts": self.cohorts, "identifier_codes": self.identifier_codes},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> GroundTruth:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(dict(obj["cohorts"]), {k: list(v) for k, v in obj.get("identifier_codes", {}).items()})

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> GroundTruth:
        return cls({r.patient_id: r.cohort for r in records if r.cohort is not None})


def cohort_names(n_cohorts: int) -> list[str]:
    if n_cohorts <= len(COHORT_NAMES):
        return list(COHORT_NAMES[:n_cohorts])
    return [f"cohort{k}" for k in range(n_cohorts)]


def _code_name(idx: int, kind: EventKind) -> str:
    return f"{'RX' if kind is EventKind.MEDICATION else 'DX'}{idx:05d}"


def _zipf(n: int, exponent: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate(config: SynthConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Generate labeled records; a pure function of ``config``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    V = config.vocab_size
    K = config.n_cohorts
    names = cohort_names(K)

    # every third code is a medication, the rest diagnoses
    kinds = [EventKind.MEDICATION if i % 3 == 2 else EventKind.DIAGNOSIS for i in range(V)]
    codes = [_code_name(i, kinds[i]) for i in range(V)]

    n_specific = int(round(config.cohort_specific_frac * V))
    n_shared = min(int(round(config.shared_vocab_frac * V)), V - K * n_specific)
    order = rng.permutation(V)
    shared = order[:n_shared]
    blocks = [order[n_shared + k * n_specific: n_shared + (k + 1) * n_specific] for k in range(K)]
    comorbid = order[n_shared + K * n_specific:]
    chronic = np.zeros(V, dtype=bool)
    chronic[rng.choice(V, size=int(round(config.chronic_frac * V)), replace=False)] = True

    shared_w = _zipf(len(shared))
    block_w = _zipf(n_specific) if n_specific else np.zeros(0)
    n_ident = int(round(config.identifier_frac * n_specific))
    identifier_codes = {names[k]: [codes[i] for i in blocks[k][:n_ident]] for k in range(K)}

    def tilts(strength, count):
        if strength == 0 or len(comorbid) == 0:
            return [np.ones(len(comorbid))] * count
        return [rng.gamma(1.0 / strength, strength, size=len(comorbid)) for _ in range(count)]

    comorbid_base = _zipf(len(comorbid))[rng.permutation(len(comorbid))] if len(comorbid) else None
    profile_tilts = tilts(config.profile_tilt, config.n_profiles)
    cohort_tilts = tilts(config.cohort_tilt, K)
    shared_mass = len(shared) / max(len(shared) + len(comorbid), 1)

    def background(k, g):
        w = np.zeros(V)
        if len(shared):
            w[shared] = shared_w * shared_mass
        if len(comorbid):
            cw = comorbid_base * profile_tilts[g] * cohort_tilts[k]
            w[comorbid] = cw / cw.sum() * (1.0 - shared_mass)
        return w / w.sum()

    specific = []
    for k in range(K):
        w = np.zeros(V)
        if n_specific:
            w[blocks[k]] = block_w
        specific.append(w)
    mixes = {(k, g): (1 - config.cohort_event_frac) * background(k, g)
             + config.cohort_event_frac * specific[k]
             for k in range(K) for g in range(config.n_profiles)}

    lo, hi = config.visits_per_patient_range
    records = []
    cohorts = {}
    pid = 0
    for k in range(K):
        for _ in range(config.patients_per_cohort):
            patient_id = f"P{pid:06d}"
            pid += 1
            mix = mixes[k, int(rng.integers(config.n_profiles))]
            chronic_pool = np.flatnonzero(chronic & (mix > 0))
            n_events = max(1, int(rng.poisson(config.mean_events_per_patient)))
            n_visits = int(rng.integers(lo, hi + 1))
            n_visits = min(n_visits, n_events)
            days = np.sort(rng.choice(SPAN_DAYS, size=n_visits, replace=False))
            # at least one event per visit, the rest spread uniformly
            per_visit = 1 + rng.multinomial(n_events - n_visits, np.full(n_visits, 1.0 / n_visits))
            if len(chronic_pool) and config.chronic_per_patient:
                p = mix[chronic_pool] / mix[chronic_pool].sum()
                own = rng.choice(chronic_pool, size=min(config.chronic_per_patient, len(chronic_pool)),
                                 replace=False, p=p)
            else:
                own = np.zeros(0, dtype=int)
            drawn = rng.choice(V, size=n_events, p=mix)
            if len(own):
                recur = rng.random(n_events) < config.chronic_event_frac
                drawn = np.where(recur, own[rng.integers(len(own), size=n_events)], drawn)
            visits = []
            pos = 0
            for day, cnt in zip(days, per_visit):
                date = START_DATE + dt.timedelta(days=int(day))
                seen = set()
                events = []
                for c in drawn[pos:pos + cnt]:
                    if c in seen:
                        continue
                    seen.add(c)
                    events.append(MedicalEvent(codes[c], date, kinds[c]))
                pos += cnt
                visits.append(Visit(date, tuple(events)))
            records.append(PatientRecord(patient_id, tuple(visits), names[k]))
            cohorts[patient_id] = names[k]
    return records, GroundTruth(cohorts, identifier_codes)


def strip_identifiers(records: Sequence[PatientRecord], truth: GroundTruth,
                      min_events: int = 40) -> list[PatientRecord]:
    """Remove every cohort-identifier event, then drop patients left with
    fewer than ``min_events`` events."""
    missing = [r.patient_id for r in records if r.patient_id not in truth.cohorts]
    if missing:
        raise ValueError(f"ground truth lacks patients {missing[:5]}")
    ident = truth.all_identifiers()
    out = []
    for rec in records:
        stripped = rec.with_events(lambda ev: ev.code not in ident) if ident else rec
        if stripped is not None:
            out.append(stripped)
    return filter_patients(out, min_events)


def config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["visits_per_patient_range"] = list(config.visits_per_patient_range)
    return d
