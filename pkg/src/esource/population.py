"""Seeded synthetic primary-care population.

Patients are generated as source-neutral ground-truth facts (concept labels,
dates, values). The per-source renderers in :mod:`esource.schemas` turn the
same facts into each EHR dialect, which is what makes tri-schema equivalence
checkable: one fact set, three documents.

Determinism: every patient draws from ``random.Random(f"{seed}:patient:{i}")``
so populations are reproducible under (size, seed) and independent of
generation order.
"""

from __future__ import annotations

import datetime as dt
import random
from dataclasses import dataclass, field, asdict

from .cdim import Instant

DEFAULT_START_DATE = dt.date(2015, 6, 1)

FEMALE = "FEMALE"
MALE = "MALE"


class InvalidConfig(ValueError):
    """Population configuration outside its documented domain."""


@dataclass(frozen=True)
class Measurement:
    kind: str  # weight | height | systolic | diastolic
    value: str
    date: dt.date


@dataclass(frozen=True)
class Diagnosis:
    label: str  # terminology-map concept label, e.g. "GORD"
    date: dt.date
    code_salt: int = 0


@dataclass(frozen=True)
class Prescription:
    label: str
    date: dt.date
    code_salt: int = 0


@dataclass(frozen=True)
class Symptom:
    label: str
    date: dt.date
    code_salt: int = 0


@dataclass(frozen=True)
class LabResult:
    label: str
    value: str
    unit: str
    date: dt.date
    time: dt.time | None = None
    code_salt: int = 0


@dataclass(frozen=True)
class Encounter:
    practice_id: str
    instant: Instant


@dataclass
class PatientFacts:
    index: int
    sex_label: str  # FEMALE | MALE
    birth_date: dt.date
    practice_id: str | None = None
    diagnoses: list[Diagnosis] = field(default_factory=list)
    prescriptions: list[Prescription] = field(default_factory=list)
    symptoms: list[Symptom] = field(default_factory=list)
    measurements: list[Measurement] = field(default_factory=list)
    labs: list[LabResult] = field(default_factory=list)
    encounters: list[Encounter] = field(default_factory=list)

    def has_diagnosis(self, label: str) -> bool:
        return any(d.label == label for d in self.diagnoses)


@dataclass(frozen=True)
class PopulationConfig:
    size: int
    seed: int
    start_date: dt.date = DEFAULT_START_DATE
    gord_rate: float = 0.30
    ppi_given_gord: float = 0.90
    ppi_background_rate: float = 0.08
    heartburn_given_gord: float = 0.70
    stale_rx_rate: float = 0.15
    htn_rate: float = 0.25
    lab_rate: float = 0.60
    minor_rate: float = 0.06

    def validate(self) -> None:
        if self.size < 1:
            raise InvalidConfig(f"population size must be >= 1, got {self.size}")
        for name in ("gord_rate", "ppi_given_gord", "ppi_background_rate",
                     "heartburn_given_gord", "stale_rx_rate", "htn_rate",
                     "lab_rate", "minor_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must be within [0, 1], got {v}")


def _birth_date_for_age(rng: random.Random, age: int, on: dt.date) -> dt.date:
    """A uniform birth date such that the patient is exactly `age` on `on`."""
    def anniversary(years_back: int) -> dt.date:
        try:
            return on.replace(year=on.year - years_back)
        except ValueError:  # Feb 29 source date
            return on.replace(year=on.year - years_back, day=28)
    newest = anniversary(age)
    oldest = anniversary(age + 1) + dt.timedelta(days=1)
    return oldest + dt.timedelta(days=rng.randint(0, (newest - oldest).days))


def _generate_patient(i: int, cfg: PopulationConfig) -> PatientFacts:
    rng = random.Random(f"{cfg.seed}:patient:{i}")
    start = cfg.start_date
    sex = FEMALE if rng.random() < 0.5 else MALE
    if rng.random() < cfg.minor_rate:
        age = rng.randint(8, 17)
    else:
        age = rng.randint(18, 88)
    p = PatientFacts(index=i, sex_label=sex,
                     birth_date=_birth_date_for_age(rng, age, start))

    bp_date = start - dt.timedelta(days=rng.randint(30, 700))
    p.measurements.append(Measurement("weight", f"{rng.uniform(52, 108):.1f}",
                                      start - dt.timedelta(days=rng.randint(30, 700))))
    p.measurements.append(Measurement("height", str(rng.randint(150, 196)),
                                      start - dt.timedelta(days=rng.randint(30, 700))))
    p.measurements.append(Measurement("systolic", str(rng.randint(105, 175)), bp_date))
    p.measurements.append(Measurement("diastolic", str(rng.randint(65, 105)), bp_date))

    has_gord = rng.random() < cfg.gord_rate
    if has_gord:
        dx_date = start - dt.timedelta(days=rng.randint(400, 2200))
        p.diagnoses.append(Diagnosis("GORD", dx_date, rng.randrange(1000)))
        if rng.random() < cfg.heartburn_given_gord:
            p.symptoms.append(Symptom("HEARTBURN",
                                      dx_date + dt.timedelta(days=rng.randint(-30, 30)),
                                      rng.randrange(1000)))
        if rng.random() < cfg.ppi_given_gord:
            if rng.random() < cfg.stale_rx_rate:
                rx_days_back = rng.randint(200, 400)
            else:
                rx_days_back = rng.randint(5, 120)
            p.prescriptions.append(Prescription("PPI", start - dt.timedelta(days=rx_days_back),
                                                rng.randrange(1000)))
    elif rng.random() < cfg.ppi_background_rate:
        p.prescriptions.append(Prescription("PPI", start - dt.timedelta(days=rng.randint(5, 400)),
                                            rng.randrange(1000)))

    if rng.random() < cfg.htn_rate:
        p.diagnoses.append(Diagnosis("HTN", start - dt.timedelta(days=rng.randint(100, 3000)),
                                     rng.randrange(1000)))

    if rng.random() < cfg.lab_rate:
        p.labs.append(LabResult("HB", f"{rng.uniform(10.5, 16.5):.1f}", "g/dL",
                                start - dt.timedelta(days=rng.randint(10, 365)),
                                dt.time(hour=rng.randint(8, 17),
                                        minute=rng.choice((0, 15, 30, 45))),
                                rng.randrange(1000)))
    return p


def seed_population(config: PopulationConfig) -> list[PatientFacts]:
    config.validate()
    return [_generate_patient(i, config) for i in range(config.size)]


def make_canonical_patient(index: int = 0, practice_id: str | None = None) -> PatientFacts:
    """The fixed demo patient used by documentation and form-filling tests.

    Eligible for the demo study on 2015-06-01: adult, GORD on record, PPI
    prescription recent enough to count as active.
    """
    p = PatientFacts(index=index, sex_label=FEMALE,
                     birth_date=dt.date(1971, 2, 14), practice_id=practice_id)
    p.diagnoses.append(Diagnosis("GORD", dt.date(2014, 5, 3)))
    p.symptoms.append(Symptom("HEARTBURN", dt.date(2014, 5, 1)))
    p.prescriptions.append(Prescription("PPI", dt.date(2015, 5, 11)))
    p.measurements.append(Measurement("weight", "70", dt.date(2015, 3, 2)))
    p.measurements.append(Measurement("height", "180", dt.date(2014, 11, 20)))
    p.measurements.append(Measurement("systolic", "140", dt.date(2015, 4, 15)))
    p.measurements.append(Measurement("diastolic", "90", dt.date(2015, 4, 15)))
    p.labs.append(LabResult("HB", "13.2", "g/dL", dt.date(2015, 5, 20), dt.time(9, 30)))
    return p


# Serialization for the EHR world's persistence files -------------------------

def facts_to_dict(p: PatientFacts) -> dict:
    d = asdict(p)
    d["birth_date"] = p.birth_date.isoformat()
    for dx in d["diagnoses"]:
        dx["date"] = dx["date"].isoformat()
    for rx in d["prescriptions"]:
        rx["date"] = rx["date"].isoformat()
    for s in d["symptoms"]:
        s["date"] = s["date"].isoformat()
    for m in d["measurements"]:
        m["date"] = m["date"].isoformat()
    for lab in d["labs"]:
        lab["date"] = lab["date"].isoformat()
        lab["time"] = lab["time"].isoformat(timespec="minutes") if lab["time"] else None
    d["encounters"] = [{"practice_id": e.practice_id, "instant": e.instant.iso()}
                       for e in p.encounters]
    return d


def facts_from_dict(d: dict) -> PatientFacts:
    from .cdim import parse_instant

    return PatientFacts(
        index=d["index"],
        sex_label=d["sex_label"],
        birth_date=dt.date.fromisoformat(d["birth_date"]),
        practice_id=d.get("practice_id"),
        diagnoses=[Diagnosis(x["label"], dt.date.fromisoformat(x["date"]), x["code_salt"])
                   for x in d["diagnoses"]],
        prescriptions=[Prescription(x["label"], dt.date.fromisoformat(x["date"]), x["code_salt"])
                       for x in d["prescriptions"]],
        symptoms=[Symptom(x["label"], dt.date.fromisoformat(x["date"]), x["code_salt"])
                  for x in d["symptoms"]],
        measurements=[Measurement(x["kind"], x["value"], dt.date.fromisoformat(x["date"]))
                      for x in d["measurements"]],
        labs=[LabResult(x["label"], x["value"], x["unit"], dt.date.fromisoformat(x["date"]),
                        dt.time.fromisoformat(x["time"]) if x["time"] else None,
                        x["code_salt"])
              for x in d["labs"]],
        encounters=[Encounter(x["practice_id"], parse_instant(x["instant"], "iso"))
                    for x in d["encounters"]],
    )
