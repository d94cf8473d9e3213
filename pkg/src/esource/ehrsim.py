"""Simulated EHR estate: practices, clinic days, record export, artefact store.

One :class:`EhrWorld` holds the ground-truth population and serves it through
three vendor dialects. A patient index is addressable in every dialect (the
same person as ``PL-000007``, ``UK-000007`` or ``NL-000007``), which is what
the tri-schema equivalence checks lean on; practice membership only decides
whose clinic the patient shows up at.

Persistence is append-only files under a data directory: the seeded facts are
written once, encounters and artefacts are appended as they happen, and
``EhrWorld.load`` replays them. Stored artefacts are write-once by
construction; nothing in the API mutates a stored payload.
"""

from __future__ import annotations

import base64
import datetime as dt
import json
import random
from dataclasses import dataclass
from pathlib import Path

from .cdim import Instant, TerminologyMap, load_terminology_map
from .population import Encounter, PatientFacts, facts_from_dict, facts_to_dict
from .schemas import (
    NATIVE_ID_PREFIX,
    UnknownSource,
    native_patient_id,
    patient_index_of,
    render_record,
)


class UnknownPatient(KeyError):
    pass


class UnknownPractice(KeyError):
    pass


@dataclass(frozen=True)
class PracticeSite:
    practice_id: str
    source_id: str
    country: str
    arm: str  # "T" for eSource-equipped, "C" for conventional


@dataclass(frozen=True)
class EncounterEvent:
    source_id: str
    patient_native_id: str
    encounter_instant: Instant
    practice_id: str


@dataclass(frozen=True)
class StoredArtefact:
    artefact_id: str
    source_id: str
    patient_native_id: str
    payload: bytes
    content_type: str
    stored_at: str


_CLINIC_OPENS = dt.time(9, 0)
_SLOT_MINUTES = 12


class EhrWorld:
    def __init__(self, population: list[PatientFacts], practices: list[PracticeSite],
                 seed: int, data_dir: str | Path | None = None,
                 arrival_rate: float = 0.35,
                 terminology: TerminologyMap | None = None,
                 _loading: bool = False):
        if not practices:
            raise ValueError("at least one practice required")
        self.seed = seed
        self.arrival_rate = arrival_rate
        self.population = population
        self.practices = {p.practice_id: p for p in practices}
        if len(self.practices) != len(practices):
            raise ValueError("duplicate practice ids")
        self._terminology = terminology or load_terminology_map()
        ordered = list(practices)
        for i, patient in enumerate(population):
            if patient.practice_id is None:
                patient.practice_id = ordered[i % len(ordered)].practice_id
        self._artefacts: dict[str, StoredArtefact] = {}
        self._artefact_index: dict[tuple[str, str], list[str]] = {}
        self._clinic_cache: dict[tuple[str, str], tuple[EncounterEvent, ...]] = {}
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None and not _loading:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            (self.data_dir / "world.json").write_text(json.dumps({
                "seed": seed,
                "arrival_rate": arrival_rate,
                "practices": [vars(p) for p in practices],
            }, indent=2) + "\n")
            with (self.data_dir / "population.jsonl").open("w") as fh:
                for patient in population:
                    fh.write(json.dumps(facts_to_dict(patient)) + "\n")

    # Construction ------------------------------------------------------------

    @classmethod
    def load(cls, data_dir: str | Path) -> "EhrWorld":
        data_dir = Path(data_dir)
        meta = json.loads((data_dir / "world.json").read_text())
        population = []
        with (data_dir / "population.jsonl").open() as fh:
            for line in fh:
                population.append(facts_from_dict(json.loads(line)))
        world = cls(population,
                    [PracticeSite(**p) for p in meta["practices"]],
                    meta["seed"], data_dir=data_dir,
                    arrival_rate=meta["arrival_rate"], _loading=True)
        clinic_log = data_dir / "clinic_days.jsonl"
        if clinic_log.exists():
            with clinic_log.open() as fh:
                for line in fh:
                    entry = json.loads(line)
                    events = tuple(
                        EncounterEvent(e["source_id"], e["patient_native_id"],
                                       Instant(dt.date.fromisoformat(e["date"]),
                                               True, dt.time.fromisoformat(e["time"])),
                                       entry["practice_id"])
                        for e in entry["events"])
                    world._apply_clinic_day(entry["practice_id"], entry["date"], events)
        artefact_log = data_dir / "artefacts.jsonl"
        if artefact_log.exists():
            with artefact_log.open() as fh:
                for line in fh:
                    a = json.loads(line)
                    art = StoredArtefact(a["artefact_id"], a["source_id"],
                                         a["patient_native_id"],
                                         base64.b64decode(a["payload_b64"]),
                                         a["content_type"], a["stored_at"])
                    world._index_artefact(art)
        return world

    # Lookup ------------------------------------------------------------------

    def practice(self, practice_id: str) -> PracticeSite:
        try:
            return self.practices[practice_id]
        except KeyError:
            raise UnknownPractice(practice_id) from None

    def panel_of(self, practice_id: str) -> list[PatientFacts]:
        self.practice(practice_id)
        return [p for p in self.population if p.practice_id == practice_id]

    def _patient_by_native_id(self, source_id: str, native_id: str) -> PatientFacts:
        if source_id not in NATIVE_ID_PREFIX:
            raise UnknownSource(source_id)
        try:
            index = patient_index_of(native_id, source_id)
        except ValueError:
            raise UnknownPatient(native_id) from None
        if not 0 <= index < len(self.population):
            raise UnknownPatient(native_id)
        return self.population[index]

    # Operations --------------------------------------------------------------

    def export_record(self, source_id: str, native_id: str) -> str:
        patient = self._patient_by_native_id(source_id, native_id)
        return render_record(source_id, patient, self._terminology)

    def run_clinic_day(self, practice_id: str, day: dt.date,
                       seed: int | None = None) -> tuple[EncounterEvent, ...]:
        site = self.practice(practice_id)
        cache_key = (practice_id, day.isoformat())
        if cache_key in self._clinic_cache:
            return self._clinic_cache[cache_key]
        if day.weekday() >= 5:  # clinic closed
            events: tuple[EncounterEvent, ...] = ()
        else:
            rng = random.Random(f"{self.seed if seed is None else seed}"
                                f":clinic:{practice_id}:{day.isoformat()}")
            arrivals = [p for p in self.panel_of(practice_id)
                        if rng.random() < self.arrival_rate]
            opens = dt.datetime.combine(day, _CLINIC_OPENS)
            events = tuple(
                EncounterEvent(site.source_id,
                               native_patient_id(site.source_id, p.index),
                               Instant(day, True,
                                       (opens + dt.timedelta(minutes=_SLOT_MINUTES * i)).time()),
                               practice_id)
                for i, p in enumerate(arrivals))
        self._apply_clinic_day(practice_id, day.isoformat(), events)
        if self.data_dir is not None:
            with (self.data_dir / "clinic_days.jsonl").open("a") as fh:
                fh.write(json.dumps({
                    "practice_id": practice_id,
                    "date": day.isoformat(),
                    "events": [{
                        "source_id": e.source_id,
                        "patient_native_id": e.patient_native_id,
                        "date": e.encounter_instant.date.isoformat(),
                        "time": e.encounter_instant.time.strftime("%H:%M"),
                    } for e in events],
                }) + "\n")
        return events

    def _apply_clinic_day(self, practice_id: str, day_iso: str,
                          events: tuple[EncounterEvent, ...]) -> None:
        self._clinic_cache[(practice_id, day_iso)] = events
        for e in events:
            patient = self._patient_by_native_id(e.source_id, e.patient_native_id)
            patient.encounters.append(Encounter(practice_id, e.encounter_instant))

    def store_artefact(self, source_id: str, native_id: str, payload: bytes,
                       content_type: str, stored_at: str) -> StoredArtefact:
        self._patient_by_native_id(source_id, native_id)  # existence check
        artefact = StoredArtefact(f"art-{len(self._artefacts) + 1:06d}", source_id,
                                  native_id, bytes(payload), content_type, stored_at)
        self._index_artefact(artefact)
        if self.data_dir is not None:
            with (self.data_dir / "artefacts.jsonl").open("a") as fh:
                fh.write(json.dumps({
                    "artefact_id": artefact.artefact_id,
                    "source_id": source_id,
                    "patient_native_id": native_id,
                    "payload_b64": base64.b64encode(payload).decode("ascii"),
                    "content_type": content_type,
                    "stored_at": stored_at,
                }) + "\n")
        return artefact

    def _index_artefact(self, artefact: StoredArtefact) -> None:
        if artefact.artefact_id in self._artefacts:
            raise ValueError(f"artefact id {artefact.artefact_id} already stored")
        self._artefacts[artefact.artefact_id] = artefact
        self._artefact_index.setdefault(
            (artefact.source_id, artefact.patient_native_id), []).append(artefact.artefact_id)

    def artefact(self, artefact_id: str) -> StoredArtefact:
        try:
            return self._artefacts[artefact_id]
        except KeyError:
            raise KeyError(f"no artefact {artefact_id}") from None

    def artefacts_of(self, source_id: str, native_id: str) -> tuple[StoredArtefact, ...]:
        self._patient_by_native_id(source_id, native_id)
        ids = self._artefact_index.get((source_id, native_id), [])
        return tuple(self._artefacts[i] for i in ids)
