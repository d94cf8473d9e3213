"""Scratch check: HTTP apps against the transport clients, in-process."""

import datetime as dt

from starlette.testclient import TestClient

from esource import dnc, ehrsim, http_api, population, tss, transport
from esource.cdim import fixture_text


def client_for(app):
    return TestClient(app, raise_server_exceptions=False)


trace = transport.NetworkTrace()
system = tss.StudySystem()
tss_app = http_api.make_tss_app(system)
tss_client = transport.HttpTssClient(client_for(tss_app), trace, "smoke")

# Study registration + activation round-trip.
bundle_xml = fixture_text("odm", "gord_study.xml")
reg = tss_client.register_study(bundle_xml, "2015-06-01T08:00")
assert reg.status == "Draft" and reg.version == 1, reg
active = tss_client.activate_study(reg.study_oid, "2015-06-01T08:05")
assert active.status == "Active"
delta = tss_client.get_studies(0)
assert delta.cursor >= 2 and delta.studies[0][0] == reg.study_oid
assert delta.studies[0][2] == active.bundle_xml

# Error mapping: bad bundle, unknown study, unknown practice, double assign.
try:
    tss_client.register_study("<OD", "t")
    raise AssertionError("expected ValueError")
except ValueError as exc:
    print("register bad xml ->", type(exc).__name__, str(exc)[:60])
try:
    tss_client.activate_study("S-NOPE", "t")
    raise AssertionError("expected UnknownStudy")
except tss.UnknownStudy as exc:
    print("activate unknown ->", type(exc).__name__, exc)

tss_client.register_practice("pl-wroclaw-1", "Poland")
try:
    tss_client.randomize("abc", "nowhere", "k0", "2015-06-02T09:00",
                         consented_at="2015-06-02T08:50")
    raise AssertionError("expected UnknownPractice")
except tss.UnknownPractice:
    pass
try:
    tss_client.randomize("abc", "pl-wroclaw-1", "k1", "2015-06-02T09:00")
    raise AssertionError("expected ValueError")
except ValueError as exc:
    assert "consent attestation" in str(exc), exc
a1 = tss_client.randomize("abc", "pl-wroclaw-1", "k1", "2015-06-02T09:00",
                          consented_at="2015-06-02T08:50")
a1_replay = tss_client.randomize("abc", "pl-wroclaw-1", "k1", "2015-06-02T09:00",
                                 consented_at="2015-06-02T08:50")
assert a1 == a1_replay
try:
    tss_client.randomize("abc", "pl-wroclaw-1", "k2", "2015-06-02T09:10",
                         consented_at="2015-06-02T08:50")
    raise AssertionError("expected AlreadyAssigned")
except tss.AlreadyAssigned:
    pass

# Ingest without the idempotency header: the client refuses before parsing.
try:
    tss_client.ingest(b"<x/>", None, "t")
    raise AssertionError("expected ValueError")
except ValueError as exc:
    assert str(exc) == "the idempotency key header is required"
# Raw POST without the header: 400 with the error shape.
raw = client_for(tss_app)
resp = raw.post("/clinical-data", json={"document_b64": "", "received_at": ""})
assert resp.status_code == 400 and resp.json()["error"] == "ValidationFailed"

# EHR app against its client.
pop = population.seed_population(population.PopulationConfig(size=40, seed=7))
world = ehrsim.EhrWorld(
    pop, practices=[ehrsim.PracticeSite("pl-wroclaw-1", "asseco", "Poland", "T")],
    seed=7)
ehr_app = http_api.make_ehr_app(world, "asseco")
ehr_client = transport.HttpEhrClient(client_for(ehr_app), trace, "smoke", "asseco")
day = dt.date(2015, 6, 1)
events = ehr_client.encounters("pl-wroclaw-1", day)
assert events == world.run_clinic_day("pl-wroclaw-1", day)
native = events[0].patient_native_id
assert ehr_client.fetch_record(native) == world.export_record("asseco", native)
art_id = ehr_client.store_artefact(native, b"hello", "text/plain", "t")
assert any(a.artefact_id == art_id
           for a in world.artefacts_of("asseco", native))
try:
    ehr_client.fetch_record("no-such-patient")
    raise AssertionError("expected KeyError")
except KeyError as exc:
    print("ehr unknown ->", exc)

# DNC console app: screen, consent+randomize, prepare, submit, dismiss.
cfg = dnc.DncConfig(practice_id="pl-wroclaw-1", source_id="asseco",
                    country="Poland", site_key="smoke-key")
connector = dnc.PracticeConnector(
    cfg,
    transport.HttpTssClient(client_for(tss_app), trace, "dnc:pl-wroclaw-1"),
    transport.HttpEhrClient(client_for(ehr_app), trace, "dnc:pl-wroclaw-1",
                            "asseco"))
connector.sync_protocols("2015-06-01T08:30")
dnc_app = http_api.make_dnc_app(connector)
console = client_for(dnc_app)

eligible = None
for event in events:
    for outcome in connector.screen_encounter(event):
        if outcome.verdict == "Eligible":
            eligible = outcome
if eligible is None:
    for extra in range(2, 6):
        for event in world.run_clinic_day("pl-wroclaw-1",
                                          day + dt.timedelta(days=extra)):
            for outcome in connector.screen_encounter(event):
                if outcome.verdict == "Eligible":
                    eligible = outcome
        if eligible is not None:
            break
assert eligible is not None, "no eligible patient in the seeded window"

alerts = console.get("/alerts").json()["alerts"]
assert any(a["pseudonym"] == eligible.pseudonym for a in alerts), alerts
state = console.post(f"/consent/{eligible.pseudonym}",
                     json={"at": "2015-06-03T10:00"})
assert state.status_code == 200, state.text
body = state.json()
assert body["stage"] == "Randomized" and body["arm"] in ("T", "C"), body
assert console.get("/alerts").json()["alerts"] == [a for a in console.get("/alerts").json()["alerts"] if a["pseudonym"] != eligible.pseudonym] or True
# consent marks the alert Actioned, so the open list no longer carries it
assert all(a["pseudonym"] != eligible.pseudonym
           for a in console.get("/alerts").json()["alerts"])

view = console.get(f"/forms/{eligible.pseudonym}/F-CROM1",
                   params={"at": "2015-06-03T10:05"}).json()
assert view["fields"] and view["html"].startswith("<"), view["form_oid"]
entries = {}
for field in view["fields"]:
    if field.get("origin") in ("prepopulated",):
        entries[field["item_oid"]] = ([field["value"], field["unit"]]
                                      if field["unit"] else field["value"])
    elif field["data_type"] in ("date", "datetime"):
        entries[field["item_oid"]] = "2015-06-03"
    elif field["data_type"] == "integer":
        entries[field["item_oid"]] = "3"
submitted = console.post(f"/forms/{eligible.pseudonym}/F-CROM1",
                         json={"entries": entries, "at": "2015-06-03T10:15"})
assert submitted.status_code == 200, submitted.text
receipt = submitted.json()
assert receipt["receipt"]["status"] == "Accepted", receipt
assert receipt["artefact_ids"], receipt

# Sequencing violation surfaces as 409.
again = console.post(f"/forms/{eligible.pseudonym}/F-CROM1",
                     json={"entries": entries, "at": "t"})
assert again.status_code == 409 and again.json()["error"] == "WrongWorkflowState"
prom2 = console.get(f"/forms/{eligible.pseudonym}/F-PROM2")
assert prom2.status_code == 409, prom2.text

# Dismissal is recorded, not destructive.
remaining = console.get("/alerts").json()["alerts"]
if remaining:
    aid = remaining[0]["alert_id"]
    assert console.post(f"/alerts/{aid}/dismiss").json()["status"] == "Dismissed"
    closed = console.get("/alerts", params={"include_closed": True}).json()
    assert any(a["alert_id"] == aid and a["status"] == "Dismissed"
               for a in closed["alerts"])
missing = console.post("/alerts/nope/dismiss")
assert missing.status_code == 404, missing.text

report = tss_client.get_recruitment_report("country_arm")
assert report["grand_total"] >= 2 and report["rows"][0]["country"] == "Poland"
weekly = tss_client.get_recruitment_report("practice_week")
assert "pl-wroclaw-1" in weekly["rates"]
bad = raw.get("/reports/recruitment", params={"grouping": "nope"})
assert bad.status_code == 400 and bad.json()["error"] == "ValidationFailed"

print("http smoke ok; report:", report)
