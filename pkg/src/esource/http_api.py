"""HTTP faces of the three deployable services.

Each factory wraps an already-constructed core object (StudySystem, EhrWorld,
PracticeConnector) in a FastAPI app, so tests can drive the same instance
in-process through httpx's ASGI transport while deployments put it behind
uvicorn. The response bodies are the contract the transport clients parse;
change them together or not at all.

Errors leave every app as ``{"error": <kind>, "message": <text>}`` with a
status chosen by exception class. The kind string, not the status, is what
HttpTssClient maps back to an exception type, so the mapping here mirrors
transport._raise_mapped.
"""

from __future__ import annotations

import asyncio
import base64
import contextlib
import datetime as dt

from fastapi import FastAPI, Header, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import dnc as dnc_mod
from . import odm
from . import tss as tss_mod
from . import transport


def _message(exc: Exception) -> str:
    # KeyError subclasses str() with quotes around the key; use the bare arg.
    if len(exc.args) == 1 and isinstance(exc.args[0], str):
        return exc.args[0]
    return str(exc)


def _error_handler(status: int, kind: str | None = None):
    def handler(request: Request, exc: Exception) -> JSONResponse:
        return JSONResponse({"error": kind or type(exc).__name__,
                             "message": _message(exc)}, status_code=status)
    return handler


def _register_errors(app: FastAPI, table: dict) -> None:
    # Malformed request bodies get the same error shape as domain failures.
    app.add_exception_handler(RequestValidationError,
                              _error_handler(422, "ValidationFailed"))
    for exc_type, (status, kind) in table.items():
        app.add_exception_handler(exc_type, _error_handler(status, kind))


# Study system ---------------------------------------------------------------------


def make_tss_app(system: tss_mod.StudySystem) -> FastAPI:
    """Expose one StudySystem over HTTP.

    The recruitment report is served as a JSON projection: exact in-process
    Fractions become floats, with the raw counts alongside so nothing is lost.
    """
    app = FastAPI(title="study system", docs_url=None, redoc_url=None)
    _register_errors(app, {
        tss_mod.ValidationFailed: (422, "ValidationFailed"),
        tss_mod.UnknownStudy: (404, "UnknownStudy"),
        tss_mod.UnknownPractice: (404, "UnknownPractice"),
        tss_mod.AlreadyAssigned: (409, "AlreadyAssigned"),
        tss_mod.SequenceViolation: (409, "SequenceViolation"),
        tss_mod.SchemaViolation: (422, "SchemaViolation"),
        # Plain ValueError (consent attestation, bad grouping) is a
        # validation failure to remote callers, same as the local client
        # raising it directly.
        ValueError: (400, "ValidationFailed"),
        KeyError: (404, None),
    })

    @app.get("/studies")
    def get_studies(since: int = 0) -> dict:
        delta = system.serve_protocols(since)
        return {"cursor": delta.cursor,
                "studies": [{"study_oid": oid, "version": version,
                             "bundle_xml": bundle_xml}
                            for oid, version, bundle_xml in delta.studies]}

    @app.post("/studies")
    def register_study(body: dict) -> dict:
        reg = system.register_study(body["bundle_xml"],
                                    body.get("registered_at", ""))
        return vars(reg)

    @app.post("/studies/{study_oid}/activate")
    def activate_study(study_oid: str, body: dict) -> dict:
        return vars(system.activate_study(study_oid, body.get("at", "")))

    @app.post("/practices")
    def register_practice(body: dict) -> dict:
        system.register_practice(body["practice_id"], body["country"])
        return {"practice_id": body["practice_id"], "country": body["country"]}

    @app.post("/randomize")
    def randomize(body: dict) -> dict:
        assignment = system.randomize(
            body["pseudonym"], body["practice_id"], body["idempotency_key"],
            body["issued_at"], body.get("flagged_at"), body.get("consented_at"))
        return vars(assignment)

    @app.post("/clinical-data")
    def ingest(body: dict,
               idempotency_key: str | None = Header(default=None)):
        if not idempotency_key:
            return JSONResponse(
                {"error": "ValidationFailed",
                 "message": "the idempotency key header is required"},
                status_code=400)
        receipt = system.ingest_submission(
            base64.b64decode(body["document_b64"]), idempotency_key,
            body.get("received_at", ""), body.get("lineage_lines") or None,
            body.get("prepared_snapshot"), body.get("absence_notes") or None)
        return vars(receipt)

    @app.get("/reports/recruitment")
    def recruitment_report(grouping: str = "country_arm") -> dict:
        report = system.recruitment_report(grouping)
        if grouping == "country_arm":
            return {"grouping": grouping,
                    "rows": [{"country": r.country, "t_count": r.t_count,
                              "c_count": r.c_count, "total": r.total}
                             for r in report.rows],
                    "total_t": report.total_t, "total_c": report.total_c,
                    "grand_total": report.grand_total}
        return {"grouping": grouping,
                "rates": {practice: float(rate)
                          for practice, rate in report.items()}}

    return app


# Practice EHR ---------------------------------------------------------------------


def make_ehr_app(world, source_id: str) -> FastAPI:
    """Expose one simulated practice EHR over HTTP.

    EhrWorld expects a single writer, so the handlers are async: they run
    serialized on the event loop instead of FastAPI's threadpool.
    """
    app = FastAPI(title=f"ehr {source_id}", docs_url=None, redoc_url=None)
    _register_errors(app, {
        KeyError: (404, None),
        ValueError: (400, None),
    })

    @app.get("/patients/{native_id}/record")
    async def fetch_record(native_id: str) -> dict:
        return {"record_xml": world.export_record(source_id, native_id)}

    @app.get("/clinic/{practice_id}/day/{day}")
    async def clinic_day(practice_id: str, day: str) -> dict:
        events = world.run_clinic_day(practice_id, dt.date.fromisoformat(day))
        return {"encounters": [
            {"source_id": e.source_id,
             "patient_native_id": e.patient_native_id,
             "date": e.encounter_instant.date.isoformat(),
             "time": e.encounter_instant.time.isoformat("minutes"),
             "practice_id": e.practice_id}
            for e in events]}

    @app.post("/patients/{native_id}/artefacts")
    async def store_artefact(native_id: str, body: dict) -> dict:
        stored = world.store_artefact(
            source_id, native_id, base64.b64decode(body["payload_b64"]),
            body["content_type"], body.get("stored_at", ""))
        return {"artefact_id": stored.artefact_id}

    return app


# Practice connector console --------------------------------------------------------


def _subject_json(state: dnc_mod.SubjectState) -> dict:
    return {"pseudonym": state.pseudonym, "study_oid": state.study_oid,
            "stage": state.stage, "prom_stage": state.prom_stage,
            "arm": state.arm, "workflow_state": state.workflow_state,
            "consented_at": state.consented_at,
            "randomized_at": state.randomized_at,
            "withdrawn": state.withdrawn}


def make_dnc_app(connector: dnc_mod.PracticeConnector,
                 static_dir: str | None = None,
                 sync_every: float | None = None) -> FastAPI:
    """Expose one practice connector to its local form console.

    Serves the console endpoints plus, when ``static_dir`` is given, the
    single-page client itself; the connector keeps owning every outbound
    connection. POST /consent drives the combined consent-and-randomization
    step behind the eligibility alert: recording consent and requesting the
    arm are one clinician action, and a retry after a failed randomization
    call picks up where it stopped instead of double-recording consent.

    The connector expects a single writer, so everything that touches it
    (handlers and, with ``sync_every`` seconds set, the periodic protocol
    sync) runs on the event loop, never in a threadpool. Outbound calls
    block that loop; fine for a one-clinician console, by design.
    """
    lifespan = None
    if sync_every:
        @contextlib.asynccontextmanager
        async def lifespan(app: FastAPI):
            async def pump() -> None:
                while True:
                    await asyncio.sleep(sync_every)
                    try:
                        connector.sync_protocols(
                            dt.datetime.now().isoformat(timespec="minutes"))
                    except Exception:
                        pass  # degraded; the next tick retries
            task = asyncio.create_task(pump())
            yield
            task.cancel()

    app = FastAPI(title=f"connector {connector.config.practice_id}",
                  docs_url=None, redoc_url=None, lifespan=lifespan)
    _register_errors(app, {
        dnc_mod.WrongWorkflowState: (409, "WrongWorkflowState"),
        dnc_mod.UnknownSubject: (404, "UnknownSubject"),
        dnc_mod.TssRejection: (502, "TssRejection"),
        dnc_mod.RecordFetchFailed: (503, "RecordFetchFailed"),
        transport.Unreachable: (503, "Unreachable"),
        odm.UnknownForm: (404, "UnknownForm"),
        odm.UnknownItem: (422, "UnknownItem"),
        odm.TypeMismatch: (422, "TypeMismatch"),
        odm.OdmError: (422, None),
        KeyError: (404, None),
        ValueError: (400, None),
    })

    @app.get("/alerts")
    async def alerts(include_closed: bool = False) -> dict:
        return {"alerts": [vars(a)
                           for a in connector.alerts(include_closed)]}

    @app.post("/alerts/{alert_id}/dismiss")
    async def dismiss(alert_id: str) -> dict:
        connector.dismiss_alert(alert_id)
        return {"alert_id": alert_id, "status": "Dismissed"}

    @app.post("/consent/{pseudonym}")
    async def consent(pseudonym: str, body: dict) -> dict:
        at = body.get("at", "")
        if connector.subject(pseudonym).stage == "Flagged":
            connector.record_consent(pseudonym, at)
        state = connector.request_randomization(pseudonym, at)
        return _subject_json(state)

    @app.get("/forms/{pseudonym}/{form_oid}")
    async def prepare_form(pseudonym: str, form_oid: str, at: str = "") -> dict:
        view = connector.prepare_form(pseudonym, form_oid, at)
        return {"form_oid": view.form_oid, "pseudonym": view.pseudonym,
                "study_oid": view.study_oid, "prepared_at": view.prepared_at,
                "fields": list(view.fields), "html": view.html,
                "odm_container": view.odm_container}

    @app.post("/forms/{pseudonym}/{form_oid}")
    async def submit_form(pseudonym: str, form_oid: str, body: dict) -> dict:
        # JSON has no tuples: a unit-bearing entry arrives as [value, unit]
        # or {"value":…, "unit":…}.
        entries = {}
        for item_oid, entry in body.get("entries", {}).items():
            if isinstance(entry, list):
                entries[item_oid] = (entry[0], entry[1])
            elif isinstance(entry, dict):
                entries[item_oid] = (entry["value"], entry.get("unit"))
            else:
                entries[item_oid] = entry
        result = connector.submit_form(pseudonym, form_oid, entries,
                                       body.get("at", ""))
        return {"receipt": vars(result.receipt), "queued": result.queued,
                "artefact_ids": list(result.artefact_ids)}

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="console")

    return app
