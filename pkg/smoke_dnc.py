"""Smoke test for the practice connector."""
import datetime as dt
import shutil
import tempfile
from pathlib import Path

from esource import dnc, odm, tss
from esource.cdim import Instant
from esource.ehrsim import EhrWorld, EncounterEvent, PracticeSite
from esource.population import PopulationConfig, make_canonical_patient, seed_population
from esource.transport import LocalEhrClient, LocalTssClient, NetworkTrace

FIXTURES = Path("src/esource/fixtures")
xml = (FIXTURES / "odm" / "gord_study.xml").read_text()

population = seed_population(PopulationConfig(size=30, seed=7))
population[0] = make_canonical_patient(0)
world = EhrWorld(population, [PracticeSite("PR-PL-1", "asseco", "PL", "T")], seed=7)
system = tss.StudySystem()
system.register_study(xml, "2015-06-01T08:00")
system.activate_study("ST-GORD", "2015-06-01T09:00")
system.register_practice("PR-PL-1", "PL")

trace = NetworkTrace()
config = dnc.DncConfig(practice_id="PR-PL-1", country="PL", source_id="asseco",
                       site_key="site-secret-1", prom1_offset_days=2,
                       prom2_offset_days=3)
tss_client = LocalTssClient(system, trace, initiator="dnc:PR-PL-1")
ehr_client = LocalEhrClient(world, trace, initiator="dnc:PR-PL-1", source_id="asseco")
connector = dnc.PracticeConnector(config, tss_client, ehr_client)

# 1. Sync pulls the active protocol.
report = connector.sync_protocols("2015-06-02T08:00")
print("sync:", report)
assert report.new_studies == (("ST-GORD", 2),)
assert connector.active_studies() == ("ST-GORD",)
again = connector.sync_protocols("2015-06-02T08:30")
assert again.new_studies == () and not again.degraded

# 2. Screening: canonical patient is eligible, alerted exactly once.
encounter = EncounterEvent("asseco", "PL-000000",
                           Instant(dt.date(2015, 6, 2), True, dt.time(9, 0)),
                           "PR-PL-1")
(outcome,) = connector.screen_encounter(encounter)
print("first screen:", outcome.verdict, "alerted:", outcome.alerted)
print("  atoms:", [(a.description, a.value, len(a.rows)) for a in outcome.atoms])
assert outcome.verdict == "Eligible" and outcome.alerted
assert all(a.value for a in outcome.atoms)
pseudonym = outcome.pseudonym
assert pseudonym != "PL-000000" and len(pseudonym) == 16
assert len(connector.alerts()) == 1

(outcome2,) = connector.screen_encounter(encounter)
assert outcome2.verdict == "Eligible" and not outcome2.alerted
assert len(connector.alerts()) == 1, "re-presentation must not re-alert"
print("re-presentation: no second alert")

# 3. Consent, then AlreadyEnrolled on the next visit.
connector.record_consent(pseudonym, "2015-06-02T09:30")
(outcome3,) = connector.screen_encounter(encounter)
assert outcome3.verdict == "AlreadyEnrolled" and not outcome3.alerted
assert connector.alerts() == (), "consent actions the alert"
print("post-consent screen:", outcome3.verdict)

try:
    connector.record_consent(pseudonym, "2015-06-02T09:31")
    raise AssertionError("double consent accepted")
except dnc.WrongWorkflowState as exc:
    print("double consent rejected:", exc)

# 4. Randomization.
try:
    connector.prepare_form(pseudonym, "F-CROM1", "2015-06-02T09:40")
    raise AssertionError("form before randomization accepted")
except dnc.WrongWorkflowState as exc:
    print("form before randomization rejected:", exc)
state = connector.request_randomization(pseudonym, "2015-06-02T10:00")
print("randomized:", state.arm)
assert state.stage == "Randomized" and state.arm in ("T", "C")

# 5. Prepare CROM1: pseudonym substituted, origins marked.
try:
    connector.prepare_form(pseudonym, "F-CROM2", "2015-06-02T10:05")
    raise AssertionError("CROM2 before CROM1 accepted")
except dnc.WrongWorkflowState as exc:
    print("CROM2 too early rejected:", exc)

view = connector.prepare_form(pseudonym, "F-CROM1", "2015-06-02T10:05")
by_oid = {f["item_oid"]: f for f in view.fields}
assert by_oid["IT-SUBJID"]["value"] == pseudonym, "EHR id must not appear"
assert by_oid["IT-SUBJID"]["origin"] == "prepopulated"
assert by_oid["IT-WEIGHT"]["value"] == "70" and by_oid["IT-WEIGHT"]["unit"] == "kg"
assert by_oid["IT-ENC-DATE"]["origin"] == "manual-required"  # not held by asseco
assert 'data-origin="prepopulated"' in view.html
assert 'data-origin="manual-required"' in view.html
assert "PL-000000" not in view.html and "PL-000000" not in view.odm_container
parsed_container = odm.parse_clinical_data(view.odm_container)
assert parsed_container.submission.subject_key == pseudonym
filled = sum(1 for f in view.fields if f["origin"] == "prepopulated")
print(f"prepared CROM1: {filled} pre-filled of {len(view.fields)}")

# 6. Submit CROM1 with one edit and manual completions.
entries = {}
for f in view.fields:
    if f["origin"] == "prepopulated":
        entries[f["item_oid"]] = (f["value"], f["unit"])
entries["IT-WEIGHT"] = ("71", "kg")            # clinician corrects the scale reading
entries["IT-ENC-DATE"] = ("2015-06-02", None)  # manual completion
result = connector.submit_form(pseudonym, "F-CROM1", entries, "2015-06-02T10:20")
print("submit CROM1:", result.receipt.status, "queued:", result.queued)
assert result.receipt.status == "Accepted" and not result.queued
assert len(result.artefact_ids) == 2
assert connector.subject(pseudonym).stage == "Crom1Done"

key1 = result.receipt.submission_id
verdict = system.verify_submission(key1)
print("TSS verification:", verdict.ok, verdict.findings)
assert verdict.ok, verdict.findings

stored = system.submission(key1)
parsed = odm.parse_clinical_data(stored.document)
origins = {fv.item_oid: fv.origin for fv in parsed.submission.field_values}
assert origins["IT-WEIGHT"] == "edited"
assert origins["IT-ENC-DATE"] == "manual"
assert origins["IT-SUBJID"] == "prepopulated"

arts = world.artefacts_of("asseco", "PL-000000")
kinds = sorted(a.content_type for a in arts)
assert kinds == ["application/xml", "text/html"], kinds
assert any(a.payload == stored.document for a in arts), "EHR copy must match TSS copy"
print("EHR artefacts stored:", kinds)

# 7. Resubmission and repeat preparation are refused.
try:
    connector.submit_form(pseudonym, "F-CROM1", entries, "2015-06-02T10:30")
    raise AssertionError("resubmission accepted")
except dnc.WrongWorkflowState as exc:
    print("resubmission rejected:", exc)
try:
    connector.prepare_form(pseudonym, "F-CROM1", "2015-06-02T10:31")
    raise AssertionError("re-preparation accepted")
except dnc.WrongWorkflowState as exc:
    print("re-preparation rejected:", exc)

# 8. CROM2 with every value accepted as prepared (Edit absent but noted).
view2 = connector.prepare_form(pseudonym, "F-CROM2", "2015-06-09T10:00")
entries2 = {f["item_oid"]: (f["value"], f["unit"]) for f in view2.fields
            if f["origin"] == "prepopulated"}
for f in view2.fields:
    if f["origin"] == "manual-required" and f["data_type"] == "integer":
        entries2[f["item_oid"]] = ("2", None)
    elif f["origin"] == "manual-required" and f["item_oid"] != "IT-NOTES":
        entries2[f["item_oid"]] = ("follow-up note", None)
result2 = connector.submit_form(pseudonym, "F-CROM2", entries2, "2015-06-09T10:10")
assert result2.receipt.status == "Accepted"
assert connector.subject(pseudonym).stage == "Crom2Done"
assert system.verify_submission(result2.receipt.submission_id).ok
print("CROM2 submitted and verified")

# 9. PROM flow, patient as editor.
assert connector.prom_due(dt.date(2015, 6, 3)) == ()
due = connector.prom_due(dt.date(2015, 6, 5))
assert due and due[0][0] == pseudonym and due[0][1] == "F-PROM1"
viewp = connector.prepare_form(pseudonym, "F-PROM1", "2015-06-05T19:00")
assert all(f["origin"] == "manual-required" for f in viewp.fields)
resultp = connector.submit_form(pseudonym, "F-PROM1",
                                {"IT-PROM-FREQ": ("4", None),
                                 "IT-PROM-SEVERITY": ("3", None),
                                 "IT-PROM-COMMENT": ("burning after meals", None)},
                                "2015-06-05T19:05")
assert resultp.receipt.status == "Accepted"
state = connector.subject(pseudonym)
assert state.prom_stage == "Prom1Done" and state.workflow_state == "Crom2Done"
assert system.verify_submission(resultp.receipt.submission_id).ok

due2 = connector.prom_due(dt.date(2015, 6, 9))
assert due2 and due2[0][1] == "F-PROM2"
connector.prepare_form(pseudonym, "F-PROM2", "2015-06-09T19:00")
resultp2 = connector.submit_form(pseudonym, "F-PROM2",
                                 {"IT-PROM2-FREQ": ("1", None),
                                  "IT-PROM2-SEVERITY": ("1", None),
                                  "IT-PROM2-SATISFACTION": ("5", None)},
                                 "2015-06-09T19:05")
assert resultp2.receipt.status == "Accepted"
assert connector.subject(pseudonym).workflow_state == "Completed"
print("subject Completed; prom events verified:",
      system.verify_submission(resultp2.receipt.submission_id).ok)

# 10. Type mismatch is caught before anything leaves.
sent_before = len(system.submission_keys())
try:
    connector.prepare_form(pseudonym, "F-PROM1", "x")
except dnc.WrongWorkflowState:
    pass
eligible_candidates = []
day = dt.date(2015, 6, 3)
for patient in population[1:]:
    native = f"PL-{patient.index:06d}"
    ev = EncounterEvent("asseco", native, Instant(day, True, dt.time(9, 0)), "PR-PL-1")
    (out,) = connector.screen_encounter(ev)
    if out.verdict == "Eligible":
        eligible_candidates.append((native, out.pseudonym))
print("eligible among seeded:", len(eligible_candidates))
assert len(eligible_candidates) >= 2, "need two more eligible patients for fault tests"

native_b, pseudo_b = eligible_candidates[0]
connector.record_consent(pseudo_b, "2015-06-03T09:30")
connector.request_randomization(pseudo_b, "2015-06-03T09:45")
view_b = connector.prepare_form(pseudo_b, "F-CROM1", "2015-06-03T10:00")
entries_b = {f["item_oid"]: (f["value"], f["unit"]) for f in view_b.fields
             if f["origin"] == "prepopulated"}
try:
    bad = dict(entries_b)
    bad["IT-WEIGHT"] = ("not-a-number", "kg")
    connector.submit_form(pseudo_b, "F-CROM1", bad, "2015-06-03T10:05")
    raise AssertionError("type mismatch accepted")
except odm.TypeMismatch as exc:
    print("type mismatch rejected:", exc)
assert len(system.submission_keys()) == sent_before, "nothing may have left"

# 11. TSS outage at submit: queued, Pending, state advanced, later flushed.
tss_client.set_unreachable(True)
result_b = connector.submit_form(pseudo_b, "F-CROM1", entries_b, "2015-06-03T10:10")
print("offline submit:", result_b.receipt.status, "queued:", result_b.queued)
assert result_b.queued and result_b.receipt.status == "Pending"
assert connector.subject(pseudo_b).stage == "Crom1Done"
assert connector.queue_depth == 1

offline_sync = connector.sync_protocols("2015-06-03T11:00")
assert offline_sync.degraded and connector.queue_depth == 1
print("sync while down: degraded, queue retained")

tss_client.set_unreachable(False)
online_sync = connector.sync_protocols("2015-06-03T11:30")
assert not online_sync.degraded and online_sync.flushed
assert connector.queue_depth == 0
key_b = online_sync.flushed[0]
assert connector.receipt_for(key_b).status == "Accepted"
assert system.verify_submission(key_b).ok
print("queue flushed at next sync; TSS verifies the late document")

# 12. EHR outage: screening fails loudly.
ehr_client.set_unreachable(True)
try:
    connector.screen_encounter(encounter)
    raise AssertionError("EHR outage ignored")
except dnc.RecordFetchFailed as exc:
    print("record fetch failure surfaced:", exc)
ehr_client.set_unreachable(False)

# 13. Pull-only topology.
assert trace.connections_toward("dnc") == ()
assert trace.initiated_by("tss") == () and trace.initiated_by("ehr") == ()
dnc_calls = trace.initiated_by("dnc:PR-PL-1")
assert all(e.target in ("tss", "ehr:asseco") for e in dnc_calls)
print(f"trace: {len(dnc_calls)} calls, all DNC-initiated")

# 14. Durable connector state across a restart.
tmp = Path(tempfile.mkdtemp())
try:
    cfg_d = dnc.DncConfig("PR-PL-1", "PL", "asseco", "site-secret-1",
                          prom1_offset_days=2, prom2_offset_days=3, data_dir=tmp)
    world_d = EhrWorld(population, [PracticeSite("PR-PL-1", "asseco", "PL", "T")],
                       seed=7)
    system_d = tss.StudySystem()
    system_d.register_study(xml, "t0")
    system_d.activate_study("ST-GORD", "t1")
    system_d.register_practice("PR-PL-1", "PL")
    trace_d = NetworkTrace()
    conn_d = dnc.PracticeConnector(
        cfg_d, LocalTssClient(system_d, trace_d, "dnc:PR-PL-1"),
        LocalEhrClient(world_d, trace_d, "dnc:PR-PL-1", "asseco"))
    conn_d.sync_protocols("t2")
    (o,) = conn_d.screen_encounter(encounter)
    conn_d.record_consent(o.pseudonym, "t3")
    conn_d.request_randomization(o.pseudonym, "2015-06-02T10:00")
    v = conn_d.prepare_form(o.pseudonym, "F-CROM1", "2015-06-02T10:05")
    e = {f["item_oid"]: (f["value"], f["unit"]) for f in v.fields
         if f["origin"] == "prepopulated"}
    ltc = conn_d.tss
    ltc.set_unreachable(True)
    conn_d.submit_form(o.pseudonym, "F-CROM1", e, "2015-06-02T10:20")
    assert conn_d.queue_depth == 1

    conn_r = dnc.PracticeConnector(
        cfg_d, LocalTssClient(system_d, trace_d, "dnc:PR-PL-1"),
        LocalEhrClient(world_d, trace_d, "dnc:PR-PL-1", "asseco"))
    assert conn_r.active_studies() == ("ST-GORD",)
    assert conn_r.queue_depth == 1, "queued submission must survive restart"
    restored = conn_r.subject(o.pseudonym)
    assert restored.stage == "Crom1Done" and restored.arm is not None
    flush = conn_r.sync_protocols("2015-06-02T11:00")
    assert flush.flushed and conn_r.queue_depth == 0
    check = system_d.verify_submission(flush.flushed[0])
    print("restart: queue flushed, verification:", check.ok, check.findings)
    assert check.ok
    (o2,) = conn_r.screen_encounter(encounter)
    assert o2.verdict == "AlreadyEnrolled"
    assert len(conn_r.alerts(include_closed=True)) == 1
finally:
    shutil.rmtree(tmp)

print("ALL DNC SMOKE CHECKS PASSED")
