"""The central study system: protocol registry, randomization service,
clinical-data repository and recruitment reporting.

The system never initiates network traffic; it answers requests. Every state
change lands in append-only files when a data directory is configured, and
startup replays them, so the in-memory indexes are a cache, not the record.

Idempotency: randomize and ingest_submission both take a client-generated
key; replaying a key returns the original result without a second state
change. That converts the connector's at-least-once retries into
exactly-once effects.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import odm, provenance
from .cdim import ConceptCatalog, TerminologyMap, load_catalog, load_terminology_map
from .randomization import arm_for_slot, BLOCK_SIZE

WORKFLOW_EVENT_KINDS = ("Flagged", "Consented", "Randomized",
                        "Crom1", "Crom2", "Prom1", "Prom2")
_FORM_EVENT_BY_KIND = {"crom1": "Crom1", "crom2": "Crom2",
                       "prom1": "Prom1", "prom2": "Prom2"}


class ValidationFailed(ValueError):
    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("; ".join(str(f) for f in self.findings) or "validation failed")


class UnknownStudy(KeyError):
    pass


class UnknownPractice(KeyError):
    pass


class AlreadyAssigned(ValueError):
    pass


class SequenceViolation(ValueError):
    pass


class SchemaViolation(ValueError):
    pass


@dataclass(frozen=True)
class StudyRegistration:
    study_oid: str
    version: int
    status: str  # Draft | Active | Closed
    bundle_xml: str
    registered_at: str


@dataclass(frozen=True)
class ProtocolDelta:
    cursor: int
    studies: tuple[tuple[str, int, str], ...]  # (study_oid, version, bundle_xml)


@dataclass(frozen=True)
class RandomizationAssignment:
    pseudonym: str
    practice_id: str
    arm: str
    block_index: int
    slot_index: int
    issued_at: str


@dataclass(frozen=True)
class RecruitmentEvent:
    practice_id: str
    country: str
    pseudonym: str
    kind: str
    instant: str
    arm: str | None = None


@dataclass
class RecruitmentLog:
    events: list[RecruitmentEvent] = field(default_factory=list)

    def append(self, event: RecruitmentEvent) -> None:
        if event.kind not in WORKFLOW_EVENT_KINDS:
            raise ValueError(f"unknown event kind {event.kind!r}")
        self.events.append(event)


def save_recruitment_log(log: RecruitmentLog, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for e in log.events:
            fh.write(json.dumps(vars(e), sort_keys=True) + "\n")


def load_recruitment_log(path: str | Path) -> RecruitmentLog:
    log = RecruitmentLog()
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                log.append(RecruitmentEvent(**json.loads(line)))
    return log


@dataclass(frozen=True)
class SubmissionReceipt:
    submission_id: str
    status: str  # "Accepted"
    event_kind: str
    document_artifact_id: str
    document_digest: str
    stored_at: str


@dataclass
class _StoredSubmission:
    receipt: SubmissionReceipt
    document: bytes
    pseudonym: str
    form_oid: str
    prepared_snapshot: dict | None
    absence_notes: dict[str, str]


class StudySystem:
    def __init__(self, data_dir: str | Path | None = None,
                 randomization_seed: int | str = 42,
                 catalog: ConceptCatalog | None = None,
                 terminology: TerminologyMap | None = None):
        self._lock = threading.RLock()
        self.randomization_seed = randomization_seed
        self._catalog = catalog or load_catalog()
        self._terminology = terminology or load_terminology_map()
        self._registry: dict[str, list[StudyRegistration]] = {}
        self._bundles: dict[tuple[str, int], odm.OdmStudyBundle] = {}
        self._version = 0
        self._practices: dict[str, str] = {}  # practice_id -> country
        self._slots_taken: dict[str, int] = {}
        self._assignments: dict[str, RandomizationAssignment] = {}  # by pseudonym
        self._randomize_replays: dict[str, RandomizationAssignment] = {}  # by key
        self._submissions: dict[str, _StoredSubmission] = {}  # by idempotency key
        self._subject_forms: dict[str, set[str]] = {}  # pseudonym -> event kinds held
        self.graph = provenance.ProvenanceGraph()
        self.graph.ensure_agent("tss", "tss")
        self.log = RecruitmentLog()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    # Append-only persistence --------------------------------------------------

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

        for e in lines("registry.jsonl"):
            self._store_registration(StudyRegistration(**e), persist=False)
        for e in lines("practices.jsonl"):
            self._practices[e["practice_id"]] = e["country"]
        for e in lines("randomizations.jsonl"):
            assignment = RandomizationAssignment(**e["assignment"])
            self._apply_assignment(e["key"], assignment,
                                   e["flagged_at"], e["consented_at"], persist=False)
        for e in lines("submissions.jsonl"):
            self._apply_submission(
                key=e["key"],
                document=base64.b64decode(e["document_b64"]),
                lineage_lines=e["lineage_lines"],
                prepared_snapshot=e["prepared_snapshot"],
                absence_notes=e["absence_notes"],
                received_at=e["received_at"],
                persist=False)

    # Study registry -------------------------------------------------------------

    def register_study(self, bundle_xml: str, registered_at: str = "") -> StudyRegistration:
        try:
            bundle = odm.parse_study_bundle(bundle_xml)
        except odm.OdmError as exc:
            raise ValidationFailed([f"{type(exc).__name__}: {exc}"]) from exc
        report = odm.validate_extensions(bundle, self._catalog, self._terminology)
        if report.errors():
            raise ValidationFailed(report.errors())
        canonical = odm.serialize_study_bundle(bundle)
        with self._lock:
            self._version += 1
            reg = StudyRegistration(bundle.study_oid, self._version, "Draft",
                                    canonical, registered_at)
            self._store_registration(reg)
            return reg

    def _store_registration(self, reg: StudyRegistration, persist: bool = True) -> None:
        self._registry.setdefault(reg.study_oid, []).append(reg)
        self._bundles[(reg.study_oid, reg.version)] = odm.parse_study_bundle(reg.bundle_xml)
        self._version = max(self._version, reg.version)
        if persist:
            self._append("registry.jsonl", vars(reg))

    def _latest(self, study_oid: str) -> StudyRegistration:
        try:
            return self._registry[study_oid][-1]
        except KeyError:
            raise UnknownStudy(study_oid) from None

    def _set_status(self, study_oid: str, status: str, at: str) -> StudyRegistration:
        with self._lock:
            latest = self._latest(study_oid)
            self._version += 1
            reg = StudyRegistration(study_oid, self._version, status,
                                    latest.bundle_xml, at)
            self._store_registration(reg)
            return reg

    def activate_study(self, study_oid: str, at: str = "") -> StudyRegistration:
        return self._set_status(study_oid, "Active", at)

    def close_study(self, study_oid: str, at: str = "") -> StudyRegistration:
        return self._set_status(study_oid, "Closed", at)

    def registrations(self, study_oid: str) -> tuple[StudyRegistration, ...]:
        return tuple(self._registry.get(study_oid, ()))

    def serve_protocols(self, since: int = 0) -> ProtocolDelta:
        with self._lock:
            studies = []
            for history in self._registry.values():
                latest = history[-1]
                if latest.status == "Active" and latest.version > since:
                    studies.append((latest.study_oid, latest.version, latest.bundle_xml))
            studies.sort(key=lambda s: s[1])
            return ProtocolDelta(self._version, tuple(studies))

    def _active_bundle(self, study_oid: str) -> odm.OdmStudyBundle:
        latest = self._latest(study_oid)
        if latest.status != "Active":
            raise UnknownStudy(f"{study_oid} is not active")
        return self._bundles[(study_oid, latest.version)]

    # Practices and randomization -------------------------------------------------

    def register_practice(self, practice_id: str, country: str) -> None:
        with self._lock:
            known = self._practices.get(practice_id)
            if known is not None and known != country:
                raise ValueError(f"practice {practice_id} already registered in {known}")
            if known is None:
                self._practices[practice_id] = country
                self._append("practices.jsonl", {"practice_id": practice_id,
                                                 "country": country})

    def randomize(self, pseudonym: str, practice_id: str, idempotency_key: str,
                  issued_at: str, flagged_at: str | None = None,
                  consented_at: str | None = None) -> RandomizationAssignment:
        """Allocate the practice's next permuted-block slot to this subject.

        Requires the consent attestation timestamp: the workflow records
        consent before randomization in both arms.
        """
        if consented_at is None:
            raise ValueError("randomization requires a consent attestation timestamp")
        with self._lock:
            replay = self._randomize_replays.get(idempotency_key)
            if replay is not None:
                return replay
            if practice_id not in self._practices:
                raise UnknownPractice(practice_id)
            if pseudonym in self._assignments:
                raise AlreadyAssigned(pseudonym)
            slot = self._slots_taken.get(practice_id, 0) + 1
            arm = arm_for_slot(self.randomization_seed, practice_id, slot)
            assignment = RandomizationAssignment(
                pseudonym, practice_id, arm,
                block_index=(slot - 1) // BLOCK_SIZE, slot_index=slot,
                issued_at=issued_at)
            self._apply_assignment(idempotency_key, assignment, flagged_at, consented_at)
            return assignment

    def _apply_assignment(self, key: str, assignment: RandomizationAssignment,
                          flagged_at: str | None, consented_at: str | None,
                          persist: bool = True) -> None:
        country = self._practices[assignment.practice_id]
        self._slots_taken[assignment.practice_id] = assignment.slot_index
        self._assignments[assignment.pseudonym] = assignment
        self._randomize_replays[key] = assignment
        if flagged_at is not None:
            self.log.append(RecruitmentEvent(assignment.practice_id, country,
                                             assignment.pseudonym, "Flagged", flagged_at))
        if consented_at is not None:
            self.log.append(RecruitmentEvent(assignment.practice_id, country,
                                             assignment.pseudonym, "Consented", consented_at))
        self.log.append(RecruitmentEvent(assignment.practice_id, country,
                                         assignment.pseudonym, "Randomized",
                                         assignment.issued_at, assignment.arm))
        if persist:
            self._append("randomizations.jsonl", {
                "key": key, "assignment": vars(assignment),
                "flagged_at": flagged_at, "consented_at": consented_at})

    def assignment_of(self, pseudonym: str) -> RandomizationAssignment | None:
        return self._assignments.get(pseudonym)

    # Clinical data ingest ---------------------------------------------------------

    def ingest_submission(self, document: bytes, idempotency_key: str,
                          received_at: str,
                          lineage_lines: list[str] | None = None,
                          prepared_snapshot: dict | None = None,
                          absence_notes: dict[str, str] | None = None) -> SubmissionReceipt:
        with self._lock:
            stored = self._submissions.get(idempotency_key)
            if stored is not None:
                return stored.receipt
            return self._apply_submission(idempotency_key, document,
                                          list(lineage_lines or []),
                                          prepared_snapshot,
                                          dict(absence_notes or {}),
                                          received_at)

    def _apply_submission(self, key: str, document: bytes,
                          lineage_lines: list[str],
                          prepared_snapshot: dict | None,
                          absence_notes: dict[str, str],
                          received_at: str,
                          persist: bool = True) -> SubmissionReceipt:
        try:
            parsed = odm.parse_clinical_data(document)
        except odm.OdmError as exc:
            raise SchemaViolation(f"{type(exc).__name__}: {exc}") from exc
        submission = parsed.submission
        bundle = self._active_bundle(submission.study_oid)
        if parsed.metadata_version_oid != bundle.metadata_version_oid:
            raise UnknownStudy(
                f"metadata version {parsed.metadata_version_oid} is not the active one")
        try:
            odm.attach_clinical_data(bundle, submission)  # strict re-validation
        except odm.OdmError as exc:
            raise SchemaViolation(f"{type(exc).__name__}: {exc}") from exc

        entry = bundle.schedule_entry(submission.form_oid)
        kind = _FORM_EVENT_BY_KIND[entry.kind]
        pseudonym = submission.subject_key
        assignment = self._assignments.get(pseudonym)
        if assignment is None:
            raise SequenceViolation(f"{pseudonym} has no randomization assignment")
        held = self._subject_forms.setdefault(pseudonym, set())
        if kind in held:
            raise SequenceViolation(f"{pseudonym} already submitted {kind}")
        needs = {"Crom1": None, "Crom2": "Crom1", "Prom1": None, "Prom2": "Prom1"}[kind]
        if needs is not None and needs not in held:
            raise SequenceViolation(f"{kind} requires {needs} on file for {pseudonym}")

        digest = provenance.digest_bytes(document)
        artifact_id = f"stored-doc:{key}"
        if lineage_lines:
            self.graph.merge_lines(lineage_lines)
        transmitted = [a_id for a_id in self._lineage_artifact_ids(lineage_lines)
                       if self.graph.has_artifact(a_id)
                       and self.graph.artifact(a_id).digest == digest]
        self.graph.record_activity(
            "Ingest", "tss", received_at,
            inputs=transmitted[:1],
            outputs=[(artifact_id, document, "stored-clinical-data")])
        receipt = SubmissionReceipt(key, "Accepted", kind, artifact_id, digest, received_at)
        self._submissions[key] = _StoredSubmission(receipt, bytes(document), pseudonym,
                                                   submission.form_oid,
                                                   prepared_snapshot, absence_notes)
        held.add(kind)
        country = self._practices[assignment.practice_id]
        self.log.append(RecruitmentEvent(assignment.practice_id, country, pseudonym,
                                         kind, received_at, assignment.arm))
        if persist:
            self._append("submissions.jsonl", {
                "key": key,
                "document_b64": base64.b64encode(document).decode("ascii"),
                "lineage_lines": lineage_lines,
                "prepared_snapshot": prepared_snapshot,
                "absence_notes": absence_notes,
                "received_at": received_at})
        return receipt

    @staticmethod
    def _lineage_artifact_ids(lines: list[str]) -> list[str]:
        ids = []
        for line in lines:
            entry = json.loads(line)
            if entry.get("t") == "artifact":
                ids.append(entry["id"])
        return ids

    def submission(self, key: str) -> _StoredSubmission:
        return self._submissions[key]

    def submission_keys(self) -> tuple[str, ...]:
        return tuple(self._submissions)

    # Verification -------------------------------------------------------------------

    def verify_submission(self, key: str) -> provenance.VerificationResult:
        stored = self._submissions[key]
        # A corrupted store must fail verification, not crash it.
        pre_findings: tuple[str, ...] = ()
        submitted: list[tuple[str, str, str]] = []
        try:
            parsed = odm.parse_clinical_data(stored.document)
            submitted = [(fv.item_oid, fv.value, fv.origin)
                         for fv in parsed.submission.field_values]
        except odm.OdmError as exc:
            pre_findings = (f"MalformedDocument: stored bytes no longer parse "
                            f"({type(exc).__name__})",)
        evidence = provenance.SubmissionEvidence(
            document_artifact_id=stored.receipt.document_artifact_id,
            stored_document=stored.document,
            prepared_snapshot=stored.prepared_snapshot,
            absence_notes=stored.absence_notes)
        result = provenance.verify_submission_chain(self.graph, evidence, submitted)
        if pre_findings:
            return provenance.VerificationResult(False, pre_findings + result.findings)
        return result

    def verify_all(self) -> dict[str, provenance.VerificationResult]:
        return {key: self.verify_submission(key) for key in self._submissions}

    # Reporting ------------------------------------------------------------------------

    def recruitment_report(self, grouping: str = "country_arm"):
        from . import analytics

        if grouping == "country_arm":
            return analytics.tabulate_recruitment(self.log)
        if grouping == "practice_week":
            return analytics.weekly_rates(self.log)
        raise ValueError(f"unknown grouping {grouping!r}")
