"""Client-side transport between the three components.

Every cross-component call goes through a client object that records the
connection in a shared NetworkTrace before doing anything else. The trace is
how tests assert the pull-only topology: at the end of a run there must be no
connection initiated by the study system or an EHR toward a practice
connector. Attempted calls count; a refused connection is still a connection.

Local clients wrap in-process objects (same semantics, no sockets), HTTP
clients speak to the FastAPI services in http_api. Fault injection flips the
``unreachable`` switch on a client; subsequent calls raise Unreachable after
the attempt is traced.
"""

from __future__ import annotations

import base64
import datetime as dt
import threading
from dataclasses import dataclass, field

from . import tss as tss_mod


class Unreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    initiator: str
    target: str
    method: str
    path: str
    outcome: str  # "ok" | "unreachable" | "error"


class NetworkTrace:
    """Shared, thread-safe log of every attempted cross-component call."""

    def __init__(self):
        self._entries: list[TraceEntry] = []
        self._lock = threading.Lock()

    def record(self, initiator: str, target: str, method: str, path: str,
               outcome: str = "ok") -> None:
        with self._lock:
            self._entries.append(TraceEntry(initiator, target, method, path, outcome))

    @property
    def entries(self) -> tuple[TraceEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def connections_toward(self, target: str) -> tuple[TraceEntry, ...]:
        """Entries whose target is ``target`` or a component of it (prefix match)."""
        return tuple(e for e in self.entries
                     if e.target == target or e.target.startswith(target))

    def initiated_by(self, initiator: str) -> tuple[TraceEntry, ...]:
        return tuple(e for e in self.entries
                     if e.initiator == initiator or e.initiator.startswith(initiator))


class _Endpoint:
    """Common trace-then-maybe-fail behaviour of every client."""

    def __init__(self, trace: NetworkTrace, initiator: str, target: str):
        self.trace = trace
        self.initiator = initiator
        self.target = target
        self._unreachable = False

    def set_unreachable(self, value: bool) -> None:
        self._unreachable = value

    def _attempt(self, method: str, path: str) -> None:
        if self._unreachable:
            self.trace.record(self.initiator, self.target, method, path, "unreachable")
            raise Unreachable(f"{self.target} is unreachable ({method} {path})")
        self.trace.record(self.initiator, self.target, method, path)


class LocalTssClient(_Endpoint):
    """In-process stand-in for the study system's HTTP surface."""

    def __init__(self, system: tss_mod.StudySystem, trace: NetworkTrace,
                 initiator: str, target: str = "tss"):
        super().__init__(trace, initiator, target)
        self.system = system

    def get_studies(self, since: int = 0) -> tss_mod.ProtocolDelta:
        self._attempt("GET", f"/studies?since={since}")
        return self.system.serve_protocols(since)

    def register_study(self, bundle_xml: str, registered_at: str = "") -> tss_mod.StudyRegistration:
        self._attempt("POST", "/studies")
        return self.system.register_study(bundle_xml, registered_at)

    def activate_study(self, study_oid: str, at: str = "") -> tss_mod.StudyRegistration:
        self._attempt("POST", f"/studies/{study_oid}/activate")
        return self.system.activate_study(study_oid, at)

    def register_practice(self, practice_id: str, country: str) -> None:
        self._attempt("POST", "/practices")
        self.system.register_practice(practice_id, country)

    def randomize(self, pseudonym: str, practice_id: str, idempotency_key: str,
                  issued_at: str, flagged_at: str | None = None,
                  consented_at: str | None = None) -> tss_mod.RandomizationAssignment:
        self._attempt("POST", "/randomize")
        return self.system.randomize(pseudonym, practice_id, idempotency_key,
                                     issued_at, flagged_at, consented_at)

    def ingest(self, document: bytes, idempotency_key: str | None,
               received_at: str,
               lineage_lines: list[str] | None = None,
               prepared_snapshot: dict | None = None,
               absence_notes: dict[str, str] | None = None) -> tss_mod.SubmissionReceipt:
        self._attempt("POST", "/clinical-data")
        if not idempotency_key:
            raise ValueError("the idempotency key header is required")
        return self.system.ingest_submission(document, idempotency_key, received_at,
                                             lineage_lines, prepared_snapshot,
                                             absence_notes)

    def get_recruitment_report(self, grouping: str = "country_arm"):
        self._attempt("GET", f"/reports/recruitment?grouping={grouping}")
        return self.system.recruitment_report(grouping)


class LocalEhrClient(_Endpoint):
    """In-process stand-in for one practice EHR's local interface.

    The connector runs inside the practice, so these calls never cross the
    practice boundary; they still go through the trace so the topology
    assertions can see who talks to whom.
    """

    def __init__(self, world, trace: NetworkTrace, initiator: str, source_id: str):
        super().__init__(trace, initiator, f"ehr:{source_id}")
        self.world = world
        self.source_id = source_id

    def fetch_record(self, native_id: str) -> str:
        self._attempt("GET", f"/patients/{native_id}/record")
        return self.world.export_record(self.source_id, native_id)

    def encounters(self, practice_id: str, day: dt.date):
        self._attempt("GET", f"/clinic/{practice_id}/day/{day.isoformat()}")
        return self.world.run_clinic_day(practice_id, day)

    def store_artefact(self, native_id: str, payload: bytes, content_type: str,
                       stored_at: str = "") -> str:
        self._attempt("POST", f"/patients/{native_id}/artefacts")
        return self.world.store_artefact(self.source_id, native_id, payload,
                                         content_type, stored_at).artefact_id


class HttpTssClient(_Endpoint):
    """Same surface as LocalTssClient, over HTTP.

    ``http_client`` is an httpx.Client; pass one bound to an ASGI transport in
    tests or a real base_url in deployment.
    """

    def __init__(self, http_client, trace: NetworkTrace, initiator: str,
                 target: str = "tss"):
        super().__init__(trace, initiator, target)
        self.http = http_client

    def _call(self, method: str, path: str, **kwargs):
        self._attempt(method, path)
        try:
            response = self.http.request(method, path, **kwargs)
        except Exception as exc:  # connection-level failure
            raise Unreachable(f"{self.target}: {exc}") from exc
        return response

    @staticmethod
    def _raise_mapped(response) -> None:
        if response.status_code < 400:
            return
        body = response.json()
        kind = body.get("error", "")
        message = body.get("message", "")
        exc_type = {
            "UnknownStudy": tss_mod.UnknownStudy,
            "UnknownPractice": tss_mod.UnknownPractice,
            "AlreadyAssigned": tss_mod.AlreadyAssigned,
            "SequenceViolation": tss_mod.SequenceViolation,
            "SchemaViolation": tss_mod.SchemaViolation,
            "ValidationFailed": ValueError,
        }.get(kind, RuntimeError)
        if exc_type is tss_mod.SchemaViolation or exc_type is tss_mod.SequenceViolation:
            raise exc_type(message)
        raise exc_type(message or kind)

    def get_studies(self, since: int = 0) -> tss_mod.ProtocolDelta:
        response = self._call("GET", f"/studies?since={since}")
        self._raise_mapped(response)
        body = response.json()
        return tss_mod.ProtocolDelta(
            body["cursor"],
            tuple((s["study_oid"], s["version"], s["bundle_xml"])
                  for s in body["studies"]))

    def register_study(self, bundle_xml: str, registered_at: str = "") -> tss_mod.StudyRegistration:
        response = self._call("POST", "/studies",
                              json={"bundle_xml": bundle_xml,
                                    "registered_at": registered_at})
        self._raise_mapped(response)
        return tss_mod.StudyRegistration(**response.json())

    def activate_study(self, study_oid: str, at: str = "") -> tss_mod.StudyRegistration:
        response = self._call("POST", f"/studies/{study_oid}/activate",
                              json={"at": at})
        self._raise_mapped(response)
        return tss_mod.StudyRegistration(**response.json())

    def register_practice(self, practice_id: str, country: str) -> None:
        response = self._call("POST", "/practices",
                              json={"practice_id": practice_id, "country": country})
        self._raise_mapped(response)

    def randomize(self, pseudonym: str, practice_id: str, idempotency_key: str,
                  issued_at: str, flagged_at: str | None = None,
                  consented_at: str | None = None) -> tss_mod.RandomizationAssignment:
        response = self._call("POST", "/randomize",
                              json={"pseudonym": pseudonym,
                                    "practice_id": practice_id,
                                    "idempotency_key": idempotency_key,
                                    "issued_at": issued_at,
                                    "flagged_at": flagged_at,
                                    "consented_at": consented_at})
        self._raise_mapped(response)
        return tss_mod.RandomizationAssignment(**response.json())

    def ingest(self, document: bytes, idempotency_key: str | None,
               received_at: str,
               lineage_lines: list[str] | None = None,
               prepared_snapshot: dict | None = None,
               absence_notes: dict[str, str] | None = None) -> tss_mod.SubmissionReceipt:
        headers = {}
        if idempotency_key:
            headers["Idempotency-Key"] = idempotency_key
        response = self._call("POST", "/clinical-data", headers=headers,
                              json={"document_b64": base64.b64encode(document).decode("ascii"),
                                    "received_at": received_at,
                                    "lineage_lines": lineage_lines or [],
                                    "prepared_snapshot": prepared_snapshot,
                                    "absence_notes": absence_notes or {}})
        if response.status_code == 400 and not idempotency_key:
            raise ValueError("the idempotency key header is required")
        self._raise_mapped(response)
        return tss_mod.SubmissionReceipt(**response.json())

    def get_recruitment_report(self, grouping: str = "country_arm"):
        response = self._call("GET", f"/reports/recruitment?grouping={grouping}")
        self._raise_mapped(response)
        return response.json()


class HttpEhrClient(_Endpoint):
    """HTTP flavour of the practice-local record interface."""

    def __init__(self, http_client, trace: NetworkTrace, initiator: str,
                 source_id: str):
        super().__init__(trace, initiator, f"ehr:{source_id}")
        self.http = http_client
        self.source_id = source_id

    def _call(self, method: str, path: str, **kwargs):
        self._attempt(method, path)
        try:
            response = self.http.request(method, path, **kwargs)
        except Exception as exc:
            raise Unreachable(f"{self.target}: {exc}") from exc
        if response.status_code >= 400:
            body = response.json()
            raise KeyError(body.get("message", body.get("error", "error")))
        return response

    def fetch_record(self, native_id: str) -> str:
        return self._call("GET", f"/patients/{native_id}/record").json()["record_xml"]

    def encounters(self, practice_id: str, day: dt.date):
        from .cdim import Instant
        from .ehrsim import EncounterEvent
        body = self._call("GET", f"/clinic/{practice_id}/day/{day.isoformat()}").json()
        return tuple(
            EncounterEvent(e["source_id"], e["patient_native_id"],
                           Instant(dt.date.fromisoformat(e["date"]), True,
                                   dt.time.fromisoformat(e["time"])),
                           e["practice_id"])
            for e in body["encounters"])

    def store_artefact(self, native_id: str, payload: bytes, content_type: str,
                       stored_at: str = "") -> str:
        body = self._call("POST", f"/patients/{native_id}/artefacts",
                          json={"payload_b64": base64.b64encode(payload).decode("ascii"),
                                "content_type": content_type,
                                "stored_at": stored_at}).json()
        return body["artefact_id"]
