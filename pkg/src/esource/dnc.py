"""The practice-side connector: protocol cache, screening, form lifecycle.

Everything here runs inside the practice. The connector owns every network
connection it is involved in: it polls the study system for protocols, pulls
records from the local EHR, and pushes completed forms out. Nothing connects
*to* it from outside the practice; the console it serves is practice-local.

Locality rule: raw record XML is parsed and discarded here. What leaves the
process is the ClinicalData document (selected fields, pseudonymous subject
key) plus the exported provenance lines describing how it was produced.

A submission that cannot reach the study system is appended to a durable
queue and retried at the next protocol sync; the receipt handed back is
marked Pending. Idempotency keys make the retries safe.
"""

from __future__ import annotations

import base64
import datetime as dt
import hashlib
import hmac
import json
import html as html_mod
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

from . import criteria, mediator, odm, provenance
from . import tss as tss_mod
from .cdim import (ConceptCatalog, Instant, SourceModel, TerminologyMap,
                   load_catalog, load_source_model, load_terminology_map)
from .ehrsim import EncounterEvent
from .transport import Unreachable

PSEUDONYM_LENGTH = 16
_STAGE_RANK = {"Flagged": 0, "Consented": 1, "Randomized": 2,
               "Crom1Done": 3, "Crom2Done": 4}
_PROM_RANK = {None: 0, "Prom1Done": 1, "Prom2Done": 2}


class WrongWorkflowState(ValueError):
    pass


class RecordFetchFailed(RuntimeError):
    pass


class TssRejection(RuntimeError):
    pass


class UnknownSubject(KeyError):
    pass


def make_pseudonym(native_id: str, site_key: str) -> str:
    """Keyed hash of the EHR identifier; the native id never crosses out."""
    mac = hmac.new(site_key.encode("utf-8"), native_id.encode("utf-8"),
                   hashlib.sha256)
    return mac.hexdigest()[:PSEUDONYM_LENGTH]


@dataclass(frozen=True)
class DncConfig:
    practice_id: str
    country: str
    source_id: str
    site_key: str
    poll_interval_minutes: int = 30
    active_drug_window_days: int = mediator.DEFAULT_ACTIVE_DRUG_WINDOW_DAYS
    prom1_offset_days: int = 28
    prom2_offset_days: int = 56
    data_dir: str | Path | None = None


@dataclass
class SubjectState:
    pseudonym: str
    study_oid: str
    native_id: str
    stage: str = "Flagged"
    prom_stage: str | None = None
    arm: str | None = None
    flagged_at: str = ""
    consented_at: str | None = None
    randomized_at: str | None = None
    prom1_done_at: str | None = None
    withdrawn: bool = False
    screening_artifact_id: str | None = None

    @property
    def workflow_state(self) -> str:
        if self.withdrawn:
            return "Withdrawn"
        if self.stage == "Crom2Done" and self.prom_stage == "Prom2Done":
            return "Completed"
        return self.stage


@dataclass(frozen=True)
class AtomOutcome:
    description: str
    value: bool
    rows: tuple[mediator.ResultRow, ...]


@dataclass(frozen=True)
class ScreeningOutcome:
    pseudonym: str
    study_oid: str
    verdict: str  # Eligible | NotEligible | AlreadyEnrolled
    atoms: tuple[AtomOutcome, ...]
    alerted: bool


@dataclass
class Alert:
    alert_id: str
    pseudonym: str
    study_oid: str
    study_name: str
    native_id: str
    raised_at: str
    status: str = "Open"  # Open | Actioned | Dismissed


@dataclass(frozen=True)
class PreparedFormView:
    """What the console renders: one entry per item, in form order."""

    form_oid: str
    pseudonym: str
    study_oid: str
    prepared_at: str
    fields: tuple[dict, ...]  # item_oid, label, data_type, value, unit, origin, reason
    html: str
    odm_container: str


@dataclass(frozen=True)
class SubmissionResult:
    receipt: tss_mod.SubmissionReceipt
    queued: bool
    artefact_ids: tuple[str, ...]


@dataclass(frozen=True)
class SyncReport:
    degraded: bool
    cursor: int
    new_studies: tuple[tuple[str, int], ...]
    flushed: tuple[str, ...]
    rejected: tuple[str, ...]


@dataclass
class _CachedStudy:
    study_oid: str
    version: int
    bundle: odm.OdmStudyBundle
    bundle_xml: str
    artifact_id: str


@dataclass
class _QueuedSubmission:
    key: str
    document: bytes
    lineage_lines: list[str]
    prepared_snapshot: dict
    absence_notes: dict[str, str]
    pseudonym: str
    form_oid: str
    queued_at: str


@dataclass
class _PreparedEntry:
    view: PreparedFormView
    values: dict[str, tuple[str, str | None]]  # filled item -> (value, unit)
    manual: set[str]
    snapshot: dict
    snapshot_artifact_id: str
    record_artifact_id: str
    event_oid: str
    kind: str


def _atom_description(atom: criteria.Criterion) -> str:
    if isinstance(atom, criteria.HasDiagnosis):
        return f"HasDiagnosis({atom.concept_label})"
    if isinstance(atom, criteria.HasActiveDrug):
        return f"HasActiveDrug({atom.concept_label})"
    if isinstance(atom, criteria.AgeAtLeast):
        return f"AgeAtLeast({atom.years})"
    if isinstance(atom, criteria.AgeBelow):
        return f"AgeBelow({atom.years})"
    return type(atom).__name__


def _atom_rows_key(atom: criteria.Criterion) -> tuple:
    if isinstance(atom, criteria.HasDiagnosis):
        return ("diagnosis", atom.concept_label)
    if isinstance(atom, criteria.HasActiveDrug):
        return ("active-drug", atom.concept_label)
    return ("age",)


def _form_for_kind(bundle: odm.OdmStudyBundle, kind: str) -> str | None:
    for entry in bundle.event_schedule:
        if entry.kind == kind:
            return entry.form_oid
    return None


class PracticeConnector:
    def __init__(self, config: DncConfig, tss_client, ehr_client,
                 catalog: ConceptCatalog | None = None,
                 terminology: TerminologyMap | None = None,
                 model: SourceModel | None = None):
        self.config = config
        self.tss = tss_client
        self.ehr = ehr_client
        self.catalog = catalog or load_catalog()
        self.terminology = terminology or load_terminology_map()
        self.model = model or load_source_model(config.source_id)
        self.agent_id = f"dnc:{config.practice_id}"
        self.graph = provenance.ProvenanceGraph()
        self.graph.ensure_agent(self.agent_id, "dnc")
        self.degraded = False
        self._cursor = 0
        self._studies: dict[str, _CachedStudy] = {}
        self._subjects: dict[tuple[str, str], SubjectState] = {}  # (study, pseudonym)
        self._native_by_pseudonym: dict[str, str] = {}
        self._alerts: list[Alert] = []
        self._prepared: dict[tuple[str, str], _PreparedEntry] = {}
        self._queue: list[_QueuedSubmission] = []
        self._receipts: dict[str, tss_mod.SubmissionReceipt] = {}
        self.data_dir = Path(config.data_dir) if config.data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    # Persistence ---------------------------------------------------------------

    def _append(self, name: str, entry: dict) -> None:
        if self.data_dir is not None:
            with (self.data_dir / name).open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _replay(self) -> None:
        def lines(name: str):
            path = self.data_dir / name
            if path.exists():
                with path.open() as fh:
                    for line in fh:
                        if line.strip():
                            yield json.loads(line)

        for e in lines("protocols.jsonl"):
            if "cursor" in e:
                self._cursor = e["cursor"]
            else:
                self._cache_study(e["study_oid"], e["version"], e["bundle_xml"],
                                  at="(replayed)")
        for e in lines("subjects.jsonl"):
            self._apply_subject_event(e)
        flushed: set[str] = set()
        pending: list[_QueuedSubmission] = []
        for e in lines("queue.jsonl"):
            if e["op"] == "enqueue":
                pending.append(_QueuedSubmission(
                    key=e["key"],
                    document=base64.b64decode(e["document_b64"]),
                    lineage_lines=e["lineage_lines"],
                    prepared_snapshot=e["prepared_snapshot"],
                    absence_notes=e["absence_notes"],
                    pseudonym=e["pseudonym"],
                    form_oid=e["form_oid"],
                    queued_at=e["queued_at"]))
            else:  # flushed | rejected
                flushed.add(e["key"])
        self._queue = [q for q in pending if q.key not in flushed]

    def _apply_subject_event(self, e: dict) -> None:
        kind = e["event"]
        key = (e["study_oid"], e["pseudonym"])
        if kind == "Flagged":
            state = SubjectState(e["pseudonym"], e["study_oid"], e["native_id"],
                                 flagged_at=e["at"])
            self._subjects[key] = state
            self._native_by_pseudonym[e["pseudonym"]] = e["native_id"]
            self._alerts.append(Alert(f"alert-{len(self._alerts) + 1:04d}",
                                      e["pseudonym"], e["study_oid"],
                                      e.get("study_name", e["study_oid"]),
                                      e["native_id"], e["at"]))
            return
        if kind == "AlertDismissed":
            for alert in self._alerts:
                if alert.alert_id == e["alert_id"]:
                    alert.status = "Dismissed"
            return
        state = self._subjects[key]
        if kind == "Consented":
            state.stage = "Consented"
            state.consented_at = e["at"]
            for alert in self._alerts:
                if (alert.pseudonym, alert.study_oid) == (state.pseudonym,
                                                          state.study_oid):
                    alert.status = "Actioned"
        elif kind == "Randomized":
            state.stage = "Randomized"
            state.arm = e["arm"]
            state.randomized_at = e["at"]
        elif kind in ("Crom1Done", "Crom2Done"):
            state.stage = kind
        elif kind == "Prom1Done":
            state.prom_stage = "Prom1Done"
            state.prom1_done_at = e["at"]
        elif kind == "Prom2Done":
            state.prom_stage = "Prom2Done"
        elif kind == "Withdrawn":
            state.withdrawn = True

    def _log_subject_event(self, state: SubjectState, event: str, at: str,
                           **extra) -> None:
        self._append("subjects.jsonl", {
            "event": event, "pseudonym": state.pseudonym,
            "study_oid": state.study_oid, "native_id": state.native_id,
            "at": at, **extra})

    # Protocol sync ---------------------------------------------------------------

    def _cache_study(self, study_oid: str, version: int, bundle_xml: str,
                     at: str) -> _CachedStudy:
        bundle = odm.parse_study_bundle(bundle_xml)
        artifact_id = f"protocol:{study_oid}:v{version}"
        self.graph.record_activity(
            "Sync", self.agent_id, at, inputs=[],
            outputs=[(artifact_id, bundle_xml.encode("utf-8"), "study-protocol")])
        cached = _CachedStudy(study_oid, version, bundle, bundle_xml, artifact_id)
        self._studies[study_oid] = cached
        return cached

    def sync_protocols(self, at: str = "") -> SyncReport:
        """Poll the study system; update the cache, then drain the queue.

        Unreachability is non-fatal: the cache is retained and screening
        continues from it, with the degraded flag raised for the console.
        """
        new_studies: list[tuple[str, int]] = []
        try:
            delta = self.tss.get_studies(self._cursor)
        except Unreachable:
            self.degraded = True
            return SyncReport(True, self._cursor, (), (), ())
        self.degraded = False
        for study_oid, version, bundle_xml in delta.studies:
            known = self._studies.get(study_oid)
            if known is not None and known.version >= version:
                continue
            self._cache_study(study_oid, version, bundle_xml, at)
            self._append("protocols.jsonl", {"study_oid": study_oid,
                                             "version": version,
                                             "bundle_xml": bundle_xml})
            new_studies.append((study_oid, version))
        if delta.cursor != self._cursor:
            self._cursor = delta.cursor
            self._append("protocols.jsonl", {"cursor": delta.cursor})
        flushed, rejected = self._flush_queue(at)
        return SyncReport(False, self._cursor, tuple(new_studies),
                          flushed, rejected)

    def _flush_queue(self, at: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
        flushed: list[str] = []
        rejected: list[str] = []
        remaining: list[_QueuedSubmission] = []
        for i, item in enumerate(self._queue):
            try:
                receipt = self.tss.ingest(item.document, item.key, at,
                                          item.lineage_lines,
                                          item.prepared_snapshot,
                                          item.absence_notes)
            except Unreachable:
                remaining.extend(self._queue[i:])
                break
            except (tss_mod.SequenceViolation, tss_mod.SchemaViolation,
                    tss_mod.UnknownStudy, tss_mod.UnknownPractice) as exc:
                rejected.append(item.key)
                self._append("queue.jsonl", {"op": "rejected", "key": item.key,
                                             "error": str(exc)})
                continue
            self._receipts[item.key] = receipt
            flushed.append(item.key)
            self._append("queue.jsonl", {"op": "flushed", "key": item.key})
        self._queue = remaining
        return tuple(flushed), tuple(rejected)

    @property
    def queue_depth(self) -> int:
        return len(self._queue)

    def active_studies(self) -> tuple[str, ...]:
        return tuple(sorted(self._studies))

    def study_bundle(self, study_oid: str) -> odm.OdmStudyBundle:
        return self._studies[study_oid].bundle

    # Screening ---------------------------------------------------------------------

    def pseudonym_for(self, native_id: str) -> str:
        return make_pseudonym(native_id, self.config.site_key)

    def native_id_of(self, pseudonym: str) -> str:
        try:
            return self._native_by_pseudonym[pseudonym]
        except KeyError:
            raise UnknownSubject(pseudonym) from None

    def _fetch_record(self, native_id: str) -> tuple[ET.Element, bytes, str]:
        """Pull the record; returns (parsed root, bytes, root artifact id)."""
        try:
            record_xml = self.ehr.fetch_record(native_id)
        except (Unreachable, KeyError) as exc:
            raise RecordFetchFailed(f"record fetch for this patient failed: {exc}") from exc
        record_bytes = record_xml.encode("utf-8")
        digest = provenance.digest_bytes(record_bytes)
        pseudonym = self.pseudonym_for(native_id)
        artifact_id = f"record:{pseudonym}:{digest[:12]}"
        self.graph.add_root_artifact(artifact_id, record_bytes, "ehr-record")
        return ET.fromstring(record_xml), record_bytes, artifact_id

    def screen_encounter(self, event: EncounterEvent) -> tuple[ScreeningOutcome, ...]:
        """Evaluate the arriving patient against every cached study.

        Eligible first encounters raise exactly one alert; a flagged patient
        presenting again is re-evaluated silently; enrolled patients come
        back as AlreadyEnrolled with no alert.
        """
        if not self._studies:
            return ()
        native_id = event.patient_native_id
        pseudonym = self.pseudonym_for(native_id)
        record_root, _, record_artifact_id = self._fetch_record(native_id)
        context = mediator.ExecutionContext(event.encounter_instant,
                                            self.config.practice_id)
        outcomes: list[ScreeningOutcome] = []
        for cached in self._studies.values():
            state = self._subjects.get((cached.study_oid, pseudonym))
            if state is not None and _STAGE_RANK[state.stage] >= _STAGE_RANK["Consented"]:
                outcomes.append(ScreeningOutcome(pseudonym, cached.study_oid,
                                                 "AlreadyEnrolled", (), False))
                continue
            evidence = mediator.RecordEvidence(
                record_root, self.model, self.catalog, self.terminology, context,
                self.config.active_drug_window_days)
            trail: list[criteria.AtomResult] = []
            eligible = all(criteria.evaluate(criterion.expression, evidence, trail)
                           for criterion in cached.bundle.eligibility)
            atoms = tuple(
                AtomOutcome(_atom_description(r.atom), r.value,
                            evidence.rows_by_atom.get(_atom_rows_key(r.atom), ()))
                for r in trail)
            if not eligible:
                outcomes.append(ScreeningOutcome(pseudonym, cached.study_oid,
                                                 "NotEligible", atoms, False))
                continue
            if state is not None:  # already flagged; no second alert
                outcomes.append(ScreeningOutcome(pseudonym, cached.study_oid,
                                                 "Eligible", atoms, False))
                continue
            at = event.encounter_instant.iso()
            outcome_payload = json.dumps({
                "verdict": "Eligible",
                "atoms": [[a.description, a.value] for a in atoms],
                "at": at}, sort_keys=True).encode("utf-8")
            screening_artifact_id = f"screening:{pseudonym}:{cached.study_oid}"
            self.graph.record_activity(
                "Screen", self.agent_id, at,
                inputs=[cached.artifact_id, record_artifact_id],
                outputs=[(screening_artifact_id, outcome_payload,
                          "screening-outcome")])
            state = SubjectState(pseudonym, cached.study_oid, native_id,
                                 flagged_at=at,
                                 screening_artifact_id=screening_artifact_id)
            self._subjects[(cached.study_oid, pseudonym)] = state
            self._native_by_pseudonym[pseudonym] = native_id
            alert = Alert(f"alert-{len(self._alerts) + 1:04d}", pseudonym,
                          cached.study_oid, cached.bundle.study_name,
                          native_id, at)
            self._alerts.append(alert)
            self._log_subject_event(state, "Flagged", at,
                                    study_name=cached.bundle.study_name)
            outcomes.append(ScreeningOutcome(pseudonym, cached.study_oid,
                                             "Eligible", atoms, True))
        return tuple(outcomes)

    # Console surface ------------------------------------------------------------------

    def alerts(self, include_closed: bool = False) -> tuple[Alert, ...]:
        if include_closed:
            return tuple(self._alerts)
        return tuple(a for a in self._alerts if a.status == "Open")

    def dismiss_alert(self, alert_id: str) -> None:
        for alert in self._alerts:
            if alert.alert_id == alert_id:
                alert.status = "Dismissed"
                self._append("subjects.jsonl", {"event": "AlertDismissed",
                                                "alert_id": alert_id,
                                                "pseudonym": alert.pseudonym,
                                                "study_oid": alert.study_oid,
                                                "native_id": alert.native_id,
                                                "at": ""})
                return
        raise KeyError(alert_id)

    def subject(self, pseudonym: str, study_oid: str | None = None) -> SubjectState:
        if study_oid is not None:
            try:
                return self._subjects[(study_oid, pseudonym)]
            except KeyError:
                raise UnknownSubject(pseudonym) from None
        matches = [s for (_, p), s in self._subjects.items() if p == pseudonym]
        if not matches:
            raise UnknownSubject(pseudonym)
        return matches[0]

    def subjects(self) -> tuple[SubjectState, ...]:
        return tuple(self._subjects.values())

    # Consent and randomization -----------------------------------------------------

    def record_consent(self, pseudonym: str, at: str) -> SubjectState:
        state = self.subject(pseudonym)
        if state.withdrawn or state.stage != "Flagged":
            raise WrongWorkflowState(
                f"consent requires a Flagged subject; {pseudonym} is "
                f"{state.workflow_state}")
        state.stage = "Consented"
        state.consented_at = at
        for alert in self._alerts:
            if (alert.pseudonym, alert.study_oid) == (pseudonym, state.study_oid):
                alert.status = "Actioned"
        self._log_subject_event(state, "Consented", at)
        return state

    def request_randomization(self, pseudonym: str, at: str) -> SubjectState:
        state = self.subject(pseudonym)
        if state.withdrawn or state.stage != "Consented":
            raise WrongWorkflowState(
                f"randomization requires a Consented subject; {pseudonym} is "
                f"{state.workflow_state}")
        key = f"rand:{self.config.practice_id}:{pseudonym}:{state.study_oid}"
        assignment = self.tss.randomize(pseudonym, self.config.practice_id, key,
                                        issued_at=at,
                                        flagged_at=state.flagged_at,
                                        consented_at=state.consented_at)
        state.stage = "Randomized"
        state.arm = assignment.arm
        state.randomized_at = at
        self._log_subject_event(state, "Randomized", at, arm=assignment.arm)
        return state

    def withdraw(self, pseudonym: str, at: str) -> SubjectState:
        state = self.subject(pseudonym)
        if state.workflow_state == "Completed" or state.withdrawn:
            raise WrongWorkflowState(f"{pseudonym} is {state.workflow_state}")
        state.withdrawn = True
        self._log_subject_event(state, "Withdrawn", at)
        return state

    # Form lifecycle -----------------------------------------------------------------

    def _gate_form(self, state: SubjectState, kind: str) -> None:
        if state.withdrawn:
            raise WrongWorkflowState(f"{state.pseudonym} has withdrawn")
        ok = {
            "crom1": state.stage == "Randomized",
            "crom2": state.stage == "Crom1Done",
            "prom1": (_STAGE_RANK[state.stage] >= _STAGE_RANK["Randomized"]
                      and state.prom_stage is None),
            "prom2": state.prom_stage == "Prom1Done",
        }.get(kind, False)
        if not ok:
            raise WrongWorkflowState(
                f"form of kind {kind} is not due: subject is "
                f"{state.workflow_state} / prom {state.prom_stage}")

    def prom_due(self, as_of: dt.date) -> tuple[tuple[str, str, str], ...]:
        """(pseudonym, form_oid, due date) for every questionnaire now due."""
        due: list[tuple[str, str, str]] = []
        for state in self._subjects.values():
            if state.withdrawn or state.stage not in ("Randomized", "Crom1Done",
                                                      "Crom2Done"):
                continue
            bundle = self._studies[state.study_oid].bundle
            if state.prom_stage is None and state.randomized_at:
                due_date = (dt.date.fromisoformat(state.randomized_at[:10])
                            + dt.timedelta(days=self.config.prom1_offset_days))
                form_oid = _form_for_kind(bundle, "prom1")
                if form_oid and as_of >= due_date:
                    due.append((state.pseudonym, form_oid, due_date.isoformat()))
            elif state.prom_stage == "Prom1Done" and state.prom1_done_at:
                due_date = (dt.date.fromisoformat(state.prom1_done_at[:10])
                            + dt.timedelta(days=self.config.prom2_offset_days))
                form_oid = _form_for_kind(bundle, "prom2")
                if form_oid and as_of >= due_date:
                    due.append((state.pseudonym, form_oid, due_date.isoformat()))
        return tuple(due)

    def prepare_form(self, pseudonym: str, form_oid: str, at: str = "") -> PreparedFormView:
        """Fetch a fresh record, run the mediator, and build the form pair.

        The returned view carries the HTML (pre-filled fields marked with a
        data-origin attribute) and the ODM container holding the prepared
        values.
        """
        state = self.subject(pseudonym)
        cached = self._studies[state.study_oid]
        entry = cached.bundle.schedule_entry(form_oid)
        if entry is None:
            raise odm.UnknownForm(f"{form_oid} is not part of {state.study_oid}")
        self._gate_form(state, entry.kind)
        native_id = self.native_id_of(pseudonym)
        record_root, _, record_artifact_id = self._fetch_record(native_id)
        context = None
        if at:
            context = mediator.ExecutionContext(
                Instant(dt.date.fromisoformat(at[:10])), self.config.practice_id)
        prepared = mediator.prepopulate_form(cached.bundle, form_oid, self.model,
                                             record_root, self.catalog,
                                             self.terminology, context)
        values: dict[str, tuple[str, str | None]] = {}
        sources: dict[str, str] = {}
        for item_oid, pf in prepared.fields.items():
            if pf.concept_id == "CDIM/3":
                # the research id replaces the EHR identifier before anything
                # can leave the practice
                values[item_oid] = (pseudonym, pf.unit)
                sources[item_oid] = "(pseudonymised)"
            else:
                values[item_oid] = (pf.value, pf.unit)
                sources[item_oid] = pf.source_path
        manual = set(prepared.manual_reasons)
        snapshot_bytes = provenance.canonical_snapshot_bytes(form_oid, values, manual)
        snapshot = {"form_oid": form_oid,
                    "fields": {oid: [v, u] for oid, (v, u) in values.items()},
                    "manual": sorted(manual)}
        digest = provenance.digest_bytes(snapshot_bytes)
        snapshot_artifact_id = f"prepared:{pseudonym}:{form_oid}:{digest[:12]}"
        inputs = [cached.artifact_id, record_artifact_id]
        if (state.screening_artifact_id
                and self.graph.has_artifact(state.screening_artifact_id)):
            inputs.append(state.screening_artifact_id)
        if not self.graph.has_artifact(snapshot_artifact_id):
            self.graph.record_activity(
                "Prepopulate", self.agent_id, at, inputs=inputs,
                outputs=[(snapshot_artifact_id, snapshot_bytes, "prepared-form")])

        field_views = []
        form = cached.bundle.form(form_oid)
        for group in form.item_groups:
            for item in group.items:
                view = {"item_oid": item.oid, "label": item.name,
                        "data_type": item.data_type}
                if item.oid in values:
                    value, unit = values[item.oid]
                    view.update(value=value, unit=unit, origin="prepopulated",
                                source_path=sources[item.oid])
                else:
                    view.update(value="", unit=None, origin="manual-required",
                                reason=prepared.manual_reasons.get(item.oid, ""))
                field_views.append(view)

        container_fields = tuple(
            odm.FieldValue(oid, value, unit, "prepopulated")
            for oid, (value, unit) in values.items())
        container = odm.attach_clinical_data(cached.bundle, odm.ClinicalDataSubmission(
            study_oid=state.study_oid, subject_key=pseudonym,
            event_oid=entry.event_oid, form_oid=form_oid,
            field_values=container_fields, submitted_at=at,
            provenance_ref=snapshot_artifact_id))
        view = PreparedFormView(form_oid, pseudonym, state.study_oid, at,
                                tuple(field_views),
                                self._render_html(form, pseudonym, field_views),
                                container)
        self._prepared[(pseudonym, form_oid)] = _PreparedEntry(
            view, values, manual, snapshot, snapshot_artifact_id,
            record_artifact_id, entry.event_oid, entry.kind)
        return view

    @staticmethod
    def _render_html(form: odm.FormDef, pseudonym: str, field_views: list[dict]) -> str:
        esc = html_mod.escape
        parts = [f"<h1>{esc(form.name)}</h1>",
                 f'<p class="subject">Subject <code>{esc(pseudonym)}</code></p>',
                 f'<form data-form-oid="{esc(form.oid)}" method="post">']
        for view in field_views:
            origin = view["origin"]
            value = esc(view["value"]) if view["value"] else ""
            unit = f' data-unit="{esc(view["unit"])}"' if view.get("unit") else ""
            parts.append(
                f'<label for="{esc(view["item_oid"])}">{esc(view["label"])}</label>')
            parts.append(
                f'<input id="{esc(view["item_oid"])}" name="{esc(view["item_oid"])}" '
                f'value="{value}" data-origin="{origin}"{unit} '
                f'data-type="{esc(view["data_type"])}"/>')
        parts.append('<button type="submit">Submit</button>')
        parts.append("</form>")
        return "\n".join(parts)

    def submit_form(self, pseudonym: str, form_oid: str,
                    entries: dict[str, tuple[str, str | None] | str],
                    at: str = "") -> SubmissionResult:
        """Validate, wrap, and transmit one completed form.

        Four effects, in order: the ClinicalData document goes to the study
        system (or the durable queue when it is unreachable), the document
        plus rendered HTML land in the EHR as artefacts, the provenance chain
        gains Edit and Submit, and the subject state advances.
        """
        state = self.subject(pseudonym)
        prepared = self._prepared.get((pseudonym, form_oid))
        if prepared is None:
            raise WrongWorkflowState(f"no prepared {form_oid} for {pseudonym}")
        self._gate_form(state, prepared.kind)
        cached = self._studies[state.study_oid]
        form = cached.bundle.form(form_oid)

        normalized: dict[str, tuple[str, str | None]] = {}
        for item_oid, entry in entries.items():
            if isinstance(entry, str):
                normalized[item_oid] = (entry, None)
            else:
                normalized[item_oid] = (entry[0], entry[1])
        field_values: list[odm.FieldValue] = []
        changed: list[str] = []
        for item_oid, (value, unit) in normalized.items():
            item = form.item(item_oid)
            if item is None:
                raise odm.UnknownItem(f"{item_oid} is not an item of {form_oid}")
            if not odm.check_value_lexical(item.data_type, value):
                raise odm.TypeMismatch(
                    f"{item_oid}: {value!r} is not a valid {item.data_type}")
            known = prepared.values.get(item_oid)
            if known is None:
                origin = "manual"
                changed.append(item_oid)
            elif known[0] == value and (unit is None or known[1] == unit):
                origin = "prepopulated"
                unit = known[1]
            else:
                origin = "edited"
                changed.append(item_oid)
            field_values.append(odm.FieldValue(item_oid, value, unit, origin))

        editor_role = "patient" if prepared.kind.startswith("prom") else "clinician"
        editor_id = (f"patient:{pseudonym}" if editor_role == "patient"
                     else f"clinician:{self.config.practice_id}")
        submission = odm.ClinicalDataSubmission(
            study_oid=state.study_oid, subject_key=pseudonym,
            event_oid=prepared.event_oid, form_oid=form_oid,
            field_values=tuple(field_values), submitted_at=at,
            provenance_ref=prepared.snapshot_artifact_id)
        document = odm.attach_clinical_data(cached.bundle, submission).encode("utf-8")
        doc_digest = provenance.digest_bytes(document)

        absence_notes: dict[str, str] = {}
        submit_input = prepared.snapshot_artifact_id
        if changed:
            self.graph.ensure_agent(editor_id, editor_role)
            edited_payload = json.dumps(
                {oid: [v, u] for oid, (v, u) in sorted(normalized.items())},
                sort_keys=True, separators=(",", ":")).encode("utf-8")
            edited_artifact_id = (f"edited:{pseudonym}:{form_oid}:"
                                  f"{provenance.digest_bytes(edited_payload)[:12]}")
            if not self.graph.has_artifact(edited_artifact_id):
                self.graph.record_activity(
                    "Edit", editor_id, at,
                    inputs=[prepared.snapshot_artifact_id],
                    outputs=[(edited_artifact_id, edited_payload, "edited-form")])
            submit_input = edited_artifact_id
        else:
            absence_notes["Edit"] = "every value was accepted as prepared"

        doc_artifact_id = f"doc:{pseudonym}:{form_oid}:{doc_digest[:12]}"
        self.graph.record_activity(
            "Submit", self.agent_id, at, inputs=[submit_input],
            outputs=[(doc_artifact_id, document, "clinical-document")])
        lineage_lines = self.graph.export_lineage_lines(doc_artifact_id)
        if "Screen" not in self.graph.lineage_of(doc_artifact_id).process_kinds():
            # screening happened before a connector restart; the outcome
            # survives in subject state but its artifact chain does not
            absence_notes["Screen"] = "screening preceded a connector restart"
        key = f"sub:{self.config.practice_id}:{pseudonym}:{form_oid}"

        queued = False
        try:
            receipt = self.tss.ingest(document, key, at, lineage_lines,
                                      prepared.snapshot, absence_notes)
        except Unreachable:
            queued = True
            item = _QueuedSubmission(key, document, lineage_lines,
                                     prepared.snapshot, absence_notes,
                                     pseudonym, form_oid, at)
            self._queue.append(item)
            self._append("queue.jsonl", {
                "op": "enqueue", "key": key,
                "document_b64": base64.b64encode(document).decode("ascii"),
                "lineage_lines": lineage_lines,
                "prepared_snapshot": prepared.snapshot,
                "absence_notes": absence_notes,
                "pseudonym": pseudonym, "form_oid": form_oid, "queued_at": at})
            receipt = tss_mod.SubmissionReceipt(key, "Pending",
                                                {"crom1": "Crom1",
                                                 "crom2": "Crom2",
                                                 "prom1": "Prom1",
                                                 "prom2": "Prom2"}[prepared.kind],
                                                doc_artifact_id, doc_digest, at)
        except (tss_mod.SequenceViolation, tss_mod.SchemaViolation,
                tss_mod.UnknownStudy, tss_mod.UnknownPractice, ValueError) as exc:
            raise TssRejection(str(exc)) from exc
        self._receipts[key] = receipt

        artefact_ids: list[str] = []
        try:
            native_id = self.native_id_of(pseudonym)
            artefact_ids.append(self.ehr.store_artefact(
                native_id, document, "application/xml", at))
            artefact_ids.append(self.ehr.store_artefact(
                native_id, prepared.view.html.encode("utf-8"), "text/html", at))
        except Unreachable:
            pass  # the EHR copy is a courtesy record; the trial copy is safe

        advance = {"crom1": "Crom1Done", "crom2": "Crom2Done",
                   "prom1": "Prom1Done", "prom2": "Prom2Done"}[prepared.kind]
        if advance in ("Prom1Done", "Prom2Done"):
            state.prom_stage = advance
            if advance == "Prom1Done":
                state.prom1_done_at = at
        else:
            state.stage = advance
        self._log_subject_event(state, advance, at)
        del self._prepared[(pseudonym, form_oid)]
        return SubmissionResult(receipt, queued, tuple(artefact_ids))

    def receipt_for(self, key: str) -> tss_mod.SubmissionReceipt | None:
        return self._receipts.get(key)

    def receipts(self) -> dict[str, tss_mod.SubmissionReceipt]:
        return dict(self._receipts)
