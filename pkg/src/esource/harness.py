"""Desk-scale study runner: a whole trial in one process.

Wires a seeded patient world, one connector per eSource practice, and the
study system together, then plays scripted clinician and patient behavior
across simulated clinic days. Control practices have no connector: site
staff screen by reading their own records, randomize over the transport,
and key data in by hand, exactly the conventional arm of the evaluation.

Everything is deterministic under (seed, configuration); the run summary
carries the numbers the evaluation report is built from.
"""

from __future__ import annotations

import datetime as dt
import random
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass

from . import analytics, dnc, mediator, odm
from .cdim import (ConceptCatalog, TerminologyMap, fixture_text, load_catalog,
                   load_source_model, load_terminology_map)
from .criteria import AtomResult, evaluate
from .ehrsim import EhrWorld, PracticeSite
from .population import PatientFacts, PopulationConfig, seed_population
from .schemas import patient_index_of
from .transport import LocalEhrClient, LocalTssClient, NetworkTrace
from .tss import StudySystem

_ABSENT_CONTROL = {kind: "conventional arm: entered at the site, no connector"
                   for kind in ("Sync", "Screen", "Prepopulate", "Edit", "Submit")}


@dataclass(frozen=True)
class DeskConfig:
    patients: int = 200
    seed: int = 2015
    start: dt.date = dt.date(2015, 6, 1)  # a Monday
    clinic_days: int = 10
    consent_rate_t: float = 0.85
    consent_rate_c: float = 0.55
    followup_rate: float = 0.85       # chance a due follow-up form gets done that day
    edit_rate: float = 0.30           # chance the clinician corrects a prepared value
    prom_rate: float = 0.70           # chance a due PROM gets completed that day
    prom1_offset_days: int = 2        # compressed so PROMs land inside the window
    prom2_offset_days: int = 4
    data_dir: str | None = None


# The four desk practices: two connector-equipped, two conventional.
DESK_PRACTICES = (
    PracticeSite("pl-wroclaw-1", "asseco", "Poland", "T"),
    PracticeSite("uk-leeds-1", "vision", "UK", "T"),
    PracticeSite("nl-utrecht-1", "transhis", "Netherlands", "C"),
    PracticeSite("pl-krakow-2", "asseco", "Poland", "C"),
)


@dataclass
class RunSummary:
    clinic_days: int
    elapsed_seconds: float
    encounters: int
    verdicts: dict[str, int]
    alerts_raised: int
    # keyed by the PRACTICE arm (eSource vs conventional); the recruitment
    # table inside `recruitment` groups by block-assigned subject arm instead
    consented: dict[str, int]
    randomized: dict[str, int]
    submissions: dict[str, int]
    verified_ok: int
    verified_total: int
    pending_after_final_sync: int
    recruitment: analytics.RecruitmentTable
    report_text: str
    trace: NetworkTrace

    def completed_cleanly(self) -> bool:
        return (self.verified_ok == self.verified_total
                and self.pending_after_final_sync == 0
                and not self.trace.connections_toward("dnc")
                and not self.trace.initiated_by("tss"))


class ControlSite:
    """Scripted staff of a conventional practice.

    Screening is chart review: the same criteria evaluated over the same
    record, but by a person, so nothing is traced and no alert exists.
    Forms reach the study system as hand-keyed documents with absence notes
    in place of connector lineage.
    """

    def __init__(self, site: PracticeSite, world: EhrWorld, tss_client,
                 bundle: odm.OdmStudyBundle, catalog: ConceptCatalog,
                 terminology: TerminologyMap, rng: random.Random,
                 config: DeskConfig):
        self.site = site
        self.world = world
        self.tss = tss_client
        self.bundle = bundle
        self.catalog = catalog
        self.terminology = terminology
        self.model = load_source_model(site.source_id)
        self.rng = rng
        self.config = config
        self.site_key = f"key-{site.practice_id}"
        self.subjects: dict[str, dict] = {}   # pseudonym -> workflow record
        self._by_native: dict[str, str] = {}

    def _screen(self, native_id: str, instant) -> bool:
        record = self.world.export_record(self.site.source_id, native_id)
        evidence = mediator.RecordEvidence(
            ET.fromstring(record), self.model, self.catalog, self.terminology,
            mediator.ExecutionContext(instant, self.site.practice_id))
        trail: list[AtomResult] = []
        return all(evaluate(criterion.expression, evidence, trail)
                   for criterion in self.bundle.eligibility)

    def handle_encounter(self, event) -> dict:
        """One visit: screen, maybe consent and randomize, maybe follow up."""
        outcome = {"eligible": False, "consented": False, "randomized": False,
                   "submitted": []}
        native_id = event.patient_native_id
        pseudonym = self._by_native.get(native_id)
        if pseudonym is None:
            if not self._screen(native_id, event.encounter_instant):
                return outcome
            outcome["eligible"] = True
            pseudonym = dnc.make_pseudonym(native_id, self.site_key)
            self._by_native[native_id] = pseudonym
            self.subjects[pseudonym] = {"native_id": native_id, "stage": "Flagged",
                                        "prom_stage": None,
                                        "flagged_at": event.encounter_instant.iso()}
        state = self.subjects[pseudonym]
        at = event.encounter_instant.iso()
        if state["stage"] == "Flagged":
            if self.rng.random() >= self.config.consent_rate_c:
                return outcome
            state["stage"] = "Consented"
            state["consented_at"] = at
            outcome["consented"] = True
        if state["stage"] == "Consented":
            assignment = self.tss.randomize(
                pseudonym, self.site.practice_id,
                f"rand:{self.site.practice_id}:{pseudonym}", at,
                flagged_at=state["flagged_at"], consented_at=state["consented_at"])
            state["stage"] = "Randomized"
            state["arm"] = assignment.arm
            state["randomized_at"] = at
            outcome["randomized"] = True
            if self._submit(pseudonym, "F-CROM1", at):
                state["stage"] = "Crom1Done"
                outcome["submitted"].append("F-CROM1")
            return outcome
        if state["stage"] == "Crom1Done" and self.rng.random() < self.config.followup_rate:
            if self._submit(pseudonym, "F-CROM2", at):
                state["stage"] = "Crom2Done"
                outcome["submitted"].append("F-CROM2")
        return outcome

    def collect_proms(self, day: dt.date) -> list[str]:
        """Patients of this site send in paper PROMs; staff key them in."""
        submitted = []
        for pseudonym, state in self.subjects.items():
            if state["stage"] not in ("Randomized", "Crom1Done", "Crom2Done"):
                continue
            randomized_on = dt.date.fromisoformat(state["randomized_at"][:10])
            at = f"{day.isoformat()}T17:00"
            if (state["prom_stage"] is None
                    and day >= randomized_on + dt.timedelta(days=self.config.prom1_offset_days)
                    and self.rng.random() < self.config.prom_rate
                    and self._submit(pseudonym, "F-PROM1", at)):
                state["prom_stage"] = "Prom1Done"
                state["prom1_done_at"] = at
                submitted.append(f"{pseudonym}:F-PROM1")
                continue
            if (state["prom_stage"] == "Prom1Done"
                    and day >= dt.date.fromisoformat(state["prom1_done_at"][:10])
                    + dt.timedelta(days=self.config.prom2_offset_days - self.config.prom1_offset_days)
                    and self.rng.random() < self.config.prom_rate
                    and self._submit(pseudonym, "F-PROM2", at)):
                state["prom_stage"] = "Prom2Done"
                submitted.append(f"{pseudonym}:F-PROM2")
        return submitted

    def _facts(self, native_id: str) -> PatientFacts:
        return self.world.population[patient_index_of(native_id, self.site.source_id)]

    def _code(self, label: str, terminology: str) -> str:
        codes = sorted(self.terminology.codes_for(label, terminology))
        return f"{terminology}:{codes[0]}"

    def _transcribe(self, form_oid: str, facts: PatientFacts, pseudonym: str,
                    at: str) -> dict[str, tuple[str, str | None]]:
        """What the staff member actually types, copied off the open chart."""
        def measurement(kind: str) -> tuple[str, str] | None:
            rows = [m for m in facts.measurements if m.kind == kind]
            if not rows:
                return None
            latest = max(rows, key=lambda m: m.date)
            return latest.value, latest.date.isoformat()

        entries: dict[str, tuple[str, str | None]] = {}
        if form_oid == "F-CROM1":
            entries["IT-SUBJID"] = (pseudonym, None)
            entries["IT-SEX"] = (facts.sex_label, None)
            entries["IT-DOB"] = (facts.birth_date.isoformat(), None)
            entries["IT-PRACTICE"] = (self.site.practice_id, None)
            entries["IT-ENC-DATE"] = (at, None)
            gord = [d for d in facts.diagnoses if d.label == "GORD"]
            if gord:
                entries["IT-DIAG"] = (self._code("GORD", "ICD10"), None)
                entries["IT-DIAG-DATE"] = (gord[0].date.isoformat(), None)
            ppi = [p for p in facts.prescriptions if p.label == "PPI"]
            if ppi:
                entries["IT-PPI"] = (self._code("PPI", "ATC"), None)
                entries["IT-PPI-DATE"] = (max(p.date for p in ppi).isoformat(), None)
        if form_oid in ("F-CROM1", "F-CROM2"):
            for kind, oid, unit in (("weight", "IT-WEIGHT", "kg"),
                                    ("height", "IT-HEIGHT", "cm"),
                                    ("systolic", "IT-SBP", "mmHg"),
                                    ("diastolic", "IT-DBP", "mmHg")):
                row = measurement(kind)
                if row:
                    entries[oid] = (row[0], unit)
                    entries[f"{oid}-DATE"] = (row[1], None)
            entries["IT-REFLUX-SCORE"] = (str(self.rng.randint(0, 5)), None)
        if form_oid == "F-PROM1":
            entries["IT-PROM-FREQ"] = (str(self.rng.randint(0, 7)), None)
            entries["IT-PROM-SEVERITY"] = (str(self.rng.randint(0, 10)), None)
        if form_oid == "F-PROM2":
            entries["IT-PROM2-FREQ"] = (str(self.rng.randint(0, 7)), None)
            entries["IT-PROM2-SEVERITY"] = (str(self.rng.randint(0, 10)), None)
            entries["IT-PROM2-SATISFACTION"] = (str(self.rng.randint(0, 10)), None)
        return entries

    def _submit(self, pseudonym: str, form_oid: str, at: str) -> bool:
        state = self.subjects[pseudonym]
        entry = self.bundle.schedule_entry(form_oid)
        facts = self._facts(state["native_id"])
        values = self._transcribe(form_oid, facts, pseudonym, at)
        fields = tuple(odm.FieldValue(oid, value, unit, "manual")
                       for oid, (value, unit) in values.items())
        submission = odm.ClinicalDataSubmission(
            study_oid=self.bundle.study_oid, subject_key=pseudonym,
            event_oid=entry.event_oid, form_oid=form_oid, field_values=fields,
            submitted_at=at,
            provenance_ref=f"site-entry:{self.site.practice_id}:{form_oid}")
        document = odm.attach_clinical_data(self.bundle, submission).encode("utf-8")
        key = f"sub:{self.site.practice_id}:{pseudonym}:{form_oid}"
        self.tss.ingest(document, key, at, absence_notes=dict(_ABSENT_CONTROL))
        return True


class DeskStudy:
    """The full simulated trial, ready to run day by day."""

    def __init__(self, config: DeskConfig | None = None):
        self.config = config or DeskConfig()
        cfg = self.config
        self.trace = NetworkTrace()
        self.catalog = load_catalog()
        self.terminology = load_terminology_map()

        population = seed_population(PopulationConfig(cfg.patients, cfg.seed,
                                                      start_date=cfg.start))
        data_root = cfg.data_dir
        self.world = EhrWorld(population, list(DESK_PRACTICES), cfg.seed,
                              data_dir=f"{data_root}/world" if data_root else None)

        self.tss = StudySystem(
            data_dir=f"{data_root}/tss" if data_root else None)
        bundle_xml = fixture_text("odm", "gord_study.xml")
        sponsor = LocalTssClient(self.tss, self.trace, "sponsor")
        registration = sponsor.register_study(bundle_xml, cfg.start.isoformat())
        sponsor.activate_study(registration.study_oid, cfg.start.isoformat())
        self.bundle = odm.parse_study_bundle(bundle_xml)
        for site in DESK_PRACTICES:
            sponsor.register_practice(site.practice_id, site.country)

        self.connectors: dict[str, dnc.PracticeConnector] = {}
        self.control_sites: dict[str, ControlSite] = {}
        for site in DESK_PRACTICES:
            if site.arm == "T":
                agent = f"dnc:{site.practice_id}"
                connector = dnc.PracticeConnector(
                    dnc.DncConfig(
                        practice_id=site.practice_id, country=site.country,
                        source_id=site.source_id,
                        site_key=f"key-{site.practice_id}",
                        prom1_offset_days=cfg.prom1_offset_days,
                        prom2_offset_days=cfg.prom2_offset_days,
                        data_dir=(f"{data_root}/dnc-{site.practice_id}"
                                  if data_root else None)),
                    LocalTssClient(self.tss, self.trace, agent),
                    LocalEhrClient(self.world, self.trace, agent, site.source_id),
                    catalog=self.catalog, terminology=self.terminology)
                self.connectors[site.practice_id] = connector
            else:
                self.control_sites[site.practice_id] = ControlSite(
                    site, self.world,
                    LocalTssClient(self.tss, self.trace,
                                   f"site:{site.practice_id}"),
                    self.bundle, self.catalog, self.terminology,
                    random.Random(f"{cfg.seed}:site:{site.practice_id}"), cfg)
        self._rng = {p.practice_id: random.Random(f"{cfg.seed}:behavior:{p.practice_id}")
                     for p in DESK_PRACTICES}

    # Scripting ------------------------------------------------------------------

    def _fill_manual(self, view: dnc.PreparedFormView, rng: random.Random,
                     day: dt.date, edit: bool) -> dict[str, tuple[str, str | None] | str]:
        """Clinician accepts prepared values, completes gaps, sometimes corrects."""
        entries: dict[str, tuple[str, str | None] | str] = {}
        for field_view in view.fields:
            oid = field_view["item_oid"]
            if field_view["origin"] == "prepopulated":
                value, unit = field_view["value"], field_view["unit"]
                if edit and oid == "IT-WEIGHT":
                    value = f"{float(value) + 0.5:g}"
                entries[oid] = (value, unit)
                continue
            data_type = field_view["data_type"]
            if data_type in ("date", "datetime"):
                entries[oid] = day.isoformat()
            elif data_type == "integer":
                entries[oid] = str(rng.randint(0, 7))
            elif data_type == "float":
                entries[oid] = f"{rng.uniform(1, 9):.1f}"
            # coded and free-text gaps stay empty: missing data is normal
        return entries

    def _treatment_day(self, practice_id: str, day: dt.date, tally: dict) -> None:
        cfg = self.config
        connector = self.connectors[practice_id]
        rng = self._rng[practice_id]
        connector.sync_protocols(f"{day.isoformat()}T08:45")
        for event in self.world.run_clinic_day(practice_id, day):
            at = event.encounter_instant.iso()
            try:
                outcomes = connector.screen_encounter(event)
            except dnc.RecordFetchFailed:
                continue
            tally["encounters"] += 1
            for outcome in outcomes:
                tally["verdicts"][outcome.verdict] = (
                    tally["verdicts"].get(outcome.verdict, 0) + 1)
                if outcome.alerted:
                    tally["alerts"] += 1
                if outcome.verdict == "NotEligible":
                    continue
                state = connector.subject(outcome.pseudonym)
                if state.stage == "Flagged":
                    if rng.random() < cfg.consent_rate_t:
                        connector.record_consent(outcome.pseudonym, at)
                        tally["consented"]["T"] += 1
                        connector.request_randomization(outcome.pseudonym, at)
                        tally["randomized"]["T"] += 1
                        self._submit_via_connector(
                            connector, outcome.pseudonym, "F-CROM1", day, rng,
                            tally)
                elif state.stage == "Crom1Done" and rng.random() < cfg.followup_rate:
                    self._submit_via_connector(
                        connector, outcome.pseudonym, "F-CROM2", day, rng, tally)
        for pseudonym, form_oid, _due in connector.prom_due(day):
            if rng.random() < cfg.prom_rate:
                self._submit_via_connector(connector, pseudonym, form_oid,
                                           day, rng, tally, prom=True)

    def _submit_via_connector(self, connector: dnc.PracticeConnector,
                              pseudonym: str, form_oid: str, day: dt.date,
                              rng: random.Random, tally: dict,
                              prom: bool = False) -> None:
        at = f"{day.isoformat()}T{10 + rng.randint(0, 7):02d}:{rng.randint(0, 59):02d}"
        view = connector.prepare_form(pseudonym, form_oid, at)
        edit = not prom and rng.random() < self.config.edit_rate
        entries = self._fill_manual(view, rng, day, edit)
        result = connector.submit_form(pseudonym, form_oid, entries, at)
        tally["submissions"][result.receipt.status] = (
            tally["submissions"].get(result.receipt.status, 0) + 1)

    def _control_day(self, practice_id: str, day: dt.date, tally: dict) -> None:
        site = self.control_sites[practice_id]
        for event in self.world.run_clinic_day(practice_id, day):
            tally["encounters"] += 1
            outcome = site.handle_encounter(event)
            if outcome["consented"]:
                tally["consented"]["C"] += 1
            if outcome["randomized"]:
                tally["randomized"]["C"] += 1
            for _form in outcome["submitted"]:
                tally["submissions"]["Accepted"] = (
                    tally["submissions"].get("Accepted", 0) + 1)
        for _entry in site.collect_proms(day):
            tally["submissions"]["Accepted"] = (
                tally["submissions"].get("Accepted", 0) + 1)

    def run(self) -> RunSummary:
        cfg = self.config
        started = time.monotonic()
        tally = {"encounters": 0, "verdicts": {}, "alerts": 0,
                 "consented": {"T": 0, "C": 0}, "randomized": {"T": 0, "C": 0},
                 "submissions": {}}
        day = cfg.start
        done = 0
        while done < cfg.clinic_days:
            if day.weekday() < 5:
                for site in DESK_PRACTICES:
                    if site.arm == "T":
                        self._treatment_day(site.practice_id, day, tally)
                    else:
                        self._control_day(site.practice_id, day, tally)
                done += 1
            day += dt.timedelta(days=1)

        # final sync flushes anything still queued
        pending = 0
        for connector in self.connectors.values():
            connector.sync_protocols(f"{day.isoformat()}T08:00")
            pending += connector.queue_depth

        verify = self.tss.verify_all()
        verified_ok = sum(1 for result in verify.values() if result.ok)
        table = analytics.tabulate_recruitment(self.tss.log)
        pairs = [("pl-wroclaw-1", "nl-utrecht-1"), ("uk-leeds-1", "pl-krakow-2")]
        report = analytics.render_report(self.tss.log, pairs)
        return RunSummary(
            clinic_days=cfg.clinic_days,
            elapsed_seconds=time.monotonic() - started,
            encounters=tally["encounters"],
            verdicts=tally["verdicts"],
            alerts_raised=tally["alerts"],
            consented=tally["consented"],
            randomized=tally["randomized"],
            submissions=tally["submissions"],
            verified_ok=verified_ok,
            verified_total=len(verify),
            pending_after_final_sync=pending,
            recruitment=table,
            report_text=report,
            trace=self.trace)


def run_desk_study(config: DeskConfig | None = None) -> RunSummary:
    return DeskStudy(config).run()
