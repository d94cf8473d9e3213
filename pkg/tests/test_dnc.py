"""Practice connector: screening, workflow gates, form lifecycle, resilience.

The stack under test is one connector wired to an in-process study system
and a three-patient practice: one eligible adult, one minor, one adult
without the study condition.
"""

import datetime as dt
from types import SimpleNamespace

import pytest

from esource import ehrsim, odm
from esource import tss as tss_mod
from esource.cdim import Instant, fixture_text
from esource.dnc import (
    DncConfig,
    PracticeConnector,
    RecordFetchFailed,
    UnknownSubject,
    WrongWorkflowState,
    make_pseudonym,
)
from esource.population import make_canonical_patient
from esource.provenance import PROCESS_KINDS
from esource.transport import LocalEhrClient, LocalTssClient, NetworkTrace

GORD_XML = fixture_text("odm", "gord_study.xml")
PRACTICE = "pl-wroclaw-1"
SITE = ehrsim.PracticeSite(PRACTICE, "asseco", "Poland", "T")
ENCOUNTER_AT = Instant(dt.date(2015, 6, 1), True, dt.time(9, 0))


def panel():
    eligible = make_canonical_patient(index=0)
    minor = make_canonical_patient(index=1)
    minor.birth_date = dt.date(2003, 2, 14)  # 12 on the encounter day
    no_gord = make_canonical_patient(index=2)
    no_gord.diagnoses = [d for d in no_gord.diagnoses if d.label != "GORD"]
    return [eligible, minor, no_gord]


def make_stack(data_dir=None, system=None, world=None, sync=True):
    if system is None:
        system = tss_mod.StudySystem()
        system.register_study(GORD_XML, "2015-05-01")
        system.activate_study("ST-GORD", "2015-05-02")
        system.register_practice(PRACTICE, "Poland")
    if world is None:
        world = ehrsim.EhrWorld(panel(), practices=(SITE,), seed=3)
    trace = NetworkTrace()
    tss_client = LocalTssClient(system, trace, f"dnc:{PRACTICE}")
    ehr_client = LocalEhrClient(world, trace, f"dnc:{PRACTICE}", "asseco")
    connector = PracticeConnector(
        DncConfig(PRACTICE, "Poland", "asseco", site_key="sk-unit",
                  data_dir=data_dir),
        tss_client, ehr_client)
    if sync:
        connector.sync_protocols("2015-05-30T08:00")
    return SimpleNamespace(system=system, world=world, trace=trace,
                           tss=tss_client, ehr=ehr_client, connector=connector)


@pytest.fixture()
def s():
    return make_stack()


def arrival(native_id="PL-000000"):
    return ehrsim.EncounterEvent("asseco", native_id, ENCOUNTER_AT, PRACTICE)


def enroll(stack, native_id="PL-000000"):
    """Screen, consent, randomize; returns the pseudonym."""
    (outcome,) = stack.connector.screen_encounter(arrival(native_id))
    assert outcome.verdict == "Eligible"
    stack.connector.record_consent(outcome.pseudonym, "2015-06-01T10:00")
    stack.connector.request_randomization(outcome.pseudonym, "2015-06-01T10:20")
    return outcome.pseudonym


def filled_entries(view, **overrides):
    entries = {f["item_oid"]: (f["value"], f["unit"])
               for f in view.fields if f["origin"] == "prepopulated"}
    entries.update(overrides)
    return entries


def submit_crom1(stack, pseudonym, at="2015-06-01T11:00"):
    view = stack.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    entries = filled_entries(view, **{"IT-REFLUX-SCORE": "5",
                                      "IT-NOTES": "stable on current dose"})
    return stack.connector.submit_form(pseudonym, "F-CROM1", entries, at)


# Pseudonymisation ----------------------------------------------------------------


def test_pseudonyms_are_stable_keyed_hashes():
    p = make_pseudonym("PL-000000", "sk-unit")
    assert p == make_pseudonym("PL-000000", "sk-unit")
    assert len(p) == 16 and int(p, 16) >= 0
    assert p != make_pseudonym("PL-000001", "sk-unit")
    assert p != make_pseudonym("PL-000000", "sk-other")
    assert "PL-000000" not in p


# Protocol sync --------------------------------------------------------------------


def test_sync_caches_active_studies_once(s):
    assert s.connector.active_studies() == ("ST-GORD",)
    assert s.connector.study_bundle("ST-GORD").study_oid == "ST-GORD"
    again = s.connector.sync_protocols("2015-05-30T09:00")
    assert again.new_studies == () and not again.degraded


def test_sync_picks_up_protocol_amendments(s):
    reg = s.system.activate_study("ST-GORD", "2015-06-10")  # amended version
    report = s.connector.sync_protocols("2015-06-10T08:00")
    assert report.new_studies == (("ST-GORD", reg.version),)


def test_sync_degrades_and_recovers_when_tss_is_down(s):
    s.tss.set_unreachable(True)
    report = s.connector.sync_protocols("2015-06-01T08:00")
    assert report.degraded and s.connector.degraded
    assert s.connector.active_studies() == ("ST-GORD",)  # cache retained
    outcomes = s.connector.screen_encounter(arrival())
    assert outcomes[0].verdict == "Eligible"  # screening runs from the cache
    s.tss.set_unreachable(False)
    assert not s.connector.sync_protocols("2015-06-01T09:00").degraded
    assert not s.connector.degraded


# Screening -----------------------------------------------------------------------


def test_eligible_arrival_is_flagged_with_one_alert(s):
    (outcome,) = s.connector.screen_encounter(arrival())
    assert outcome.verdict == "Eligible" and outcome.alerted
    assert outcome.pseudonym == s.connector.pseudonym_for("PL-000000")
    descriptions = [a.description for a in outcome.atoms]
    assert descriptions == ["AgeAtLeast(18)", "HasDiagnosis(GORD)",
                            "HasActiveDrug(PPI)"]
    assert all(a.value for a in outcome.atoms)
    by_description = {a.description: a for a in outcome.atoms}
    assert any("1971" in r.value for r in by_description["AgeAtLeast(18)"].rows)
    assert by_description["HasDiagnosis(GORD)"].rows  # audit trail carries rows
    (alert,) = s.connector.alerts()
    assert alert.alert_id == "alert-0001"
    assert alert.status == "Open"
    assert alert.native_id == "PL-000000"
    assert alert.study_name == "GORD PPI strategy demo study"
    state = s.connector.subject(outcome.pseudonym)
    assert state.stage == "Flagged" and state.screening_artifact_id


def test_minor_is_not_eligible_and_not_flagged(s):
    (outcome,) = s.connector.screen_encounter(arrival("PL-000001"))
    assert outcome.verdict == "NotEligible" and not outcome.alerted
    atom = {a.description: a.value for a in outcome.atoms}
    assert atom == {"AgeAtLeast(18)": False, "HasDiagnosis(GORD)": True,
                    "HasActiveDrug(PPI)": True}
    assert s.connector.alerts() == ()
    with pytest.raises(UnknownSubject):
        s.connector.subject(outcome.pseudonym)


def test_condition_free_adult_is_not_eligible(s):
    (outcome,) = s.connector.screen_encounter(arrival("PL-000002"))
    assert outcome.verdict == "NotEligible"
    atom = {a.description: a.value for a in outcome.atoms}
    assert atom["HasDiagnosis(GORD)"] is False


def test_representing_patient_is_not_alerted_twice(s):
    s.connector.screen_encounter(arrival())
    (again,) = s.connector.screen_encounter(arrival())
    assert again.verdict == "Eligible" and not again.alerted
    assert len(s.connector.alerts()) == 1


def test_enrolled_patient_screens_as_already_enrolled(s):
    pseudonym = enroll(s)
    (outcome,) = s.connector.screen_encounter(arrival())
    assert outcome.verdict == "AlreadyEnrolled"
    assert outcome.atoms == () and not outcome.alerted
    assert s.connector.subject(pseudonym).stage == "Randomized"


def test_screening_without_studies_is_a_no_op():
    stack = make_stack(sync=False)
    assert stack.connector.screen_encounter(arrival()) == ()


def test_screening_surfaces_record_fetch_failures(s):
    s.ehr.set_unreachable(True)
    with pytest.raises(RecordFetchFailed):
        s.connector.screen_encounter(arrival())


def test_dismissed_alert_leaves_the_open_list(s):
    s.connector.screen_encounter(arrival())
    (alert,) = s.connector.alerts()
    s.connector.dismiss_alert(alert.alert_id)
    assert s.connector.alerts() == ()
    assert s.connector.alerts(include_closed=True)[0].status == "Dismissed"
    with pytest.raises(KeyError):
        s.connector.dismiss_alert("alert-9999")


# Consent and randomization ----------------------------------------------------------


def test_consent_then_randomization_in_order(s):
    (outcome,) = s.connector.screen_encounter(arrival())
    pseudonym = outcome.pseudonym
    with pytest.raises(WrongWorkflowState):
        s.connector.request_randomization(pseudonym, "t")  # consent first
    state = s.connector.record_consent(pseudonym, "2015-06-01T10:00")
    assert state.stage == "Consented"
    assert s.connector.alerts() == ()  # actioned, no longer open
    assert s.connector.alerts(include_closed=True)[0].status == "Actioned"
    with pytest.raises(WrongWorkflowState):
        s.connector.record_consent(pseudonym, "t")  # not flagged any more
    state = s.connector.request_randomization(pseudonym, "2015-06-01T10:20")
    assert state.stage == "Randomized" and state.arm in ("T", "C")
    assignment = s.system.assignment_of(pseudonym)
    assert assignment is not None and assignment.arm == state.arm
    kinds = [e.kind for e in s.system.log.events]
    assert kinds == ["Flagged", "Consented", "Randomized"]


def test_consent_requires_a_known_subject(s):
    with pytest.raises(UnknownSubject):
        s.connector.record_consent("0000000000000000", "t")


def test_withdrawal_blocks_further_workflow(s):
    pseudonym = enroll(s)
    s.connector.withdraw(pseudonym, "2015-06-02T09:00")
    assert s.connector.subject(pseudonym).workflow_state == "Withdrawn"
    with pytest.raises(WrongWorkflowState):
        s.connector.withdraw(pseudonym, "t")
    with pytest.raises(WrongWorkflowState):
        s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-02T10:00")
    assert s.connector.prom_due(dt.date(2016, 1, 1)) == ()


# Form preparation ------------------------------------------------------------------


def test_form_gates_follow_the_workflow(s):
    (outcome,) = s.connector.screen_encounter(arrival())
    pseudonym = outcome.pseudonym
    with pytest.raises(WrongWorkflowState, match="crom1 is not due"):
        s.connector.prepare_form(pseudonym, "F-CROM1", "t")  # still Flagged
    s.connector.record_consent(pseudonym, "2015-06-01T10:00")
    s.connector.request_randomization(pseudonym, "2015-06-01T10:20")
    with pytest.raises(WrongWorkflowState, match="crom2 is not due"):
        s.connector.prepare_form(pseudonym, "F-CROM2", "t")  # crom1 first
    with pytest.raises(WrongWorkflowState, match="prom2 is not due"):
        s.connector.prepare_form(pseudonym, "F-PROM2", "t")  # prom1 first
    with pytest.raises(odm.UnknownForm):
        s.connector.prepare_form(pseudonym, "F-NOPE", "t")


def test_prepared_form_is_pseudonymised_and_in_form_order(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    form = s.connector.study_bundle("ST-GORD").form("F-CROM1")
    form_order = [item.oid for group in form.item_groups for item in group.items]
    assert [f["item_oid"] for f in view.fields] == form_order
    by_oid = {f["item_oid"]: f for f in view.fields}
    subjid = by_oid["IT-SUBJID"]
    assert subjid["value"] == pseudonym
    assert subjid["origin"] == "prepopulated"
    assert subjid["source_path"] == "(pseudonymised)"
    assert by_oid["IT-WEIGHT"]["value"] == "70"
    assert by_oid["IT-WEIGHT"]["unit"] == "kg"
    assert by_oid["IT-PRACTICE"]["value"] == PRACTICE
    assert by_oid["IT-REFLUX-SCORE"]["origin"] == "manual-required"
    assert by_oid["IT-REFLUX-SCORE"]["reason"] == "no concept binding"
    assert by_oid["IT-LAB-VALUE"]["reason"] == "not held by this source"
    origins = [f["origin"] for f in view.fields]
    assert origins.count("prepopulated") == 20
    assert origins.count("manual-required") == 8


def test_prepared_html_and_container_never_leak_the_native_id(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    assert "PL-000000" not in view.html
    assert "PL-000000" not in view.odm_container
    assert pseudonym in view.html
    assert view.html.count('data-origin="prepopulated"') == 20
    assert view.html.count('data-origin="manual-required"') == 8
    assert 'data-unit="kg"' in view.html
    parsed = odm.parse_clinical_data(view.odm_container.encode("utf-8"))
    assert parsed.submission.subject_key == pseudonym
    assert len(parsed.submission.field_values) == 20
    assert all(fv.origin == "prepopulated"
               for fv in parsed.submission.field_values)
    # re-preparing before submission is allowed and idempotent
    assert s.connector.prepare_form(pseudonym, "F-CROM1",
                                    "2015-06-01T10:30").fields == view.fields


# Submission ------------------------------------------------------------------------


def test_submit_requires_a_prepared_form(s):
    pseudonym = enroll(s)
    with pytest.raises(WrongWorkflowState, match="no prepared F-CROM1"):
        s.connector.submit_form(pseudonym, "F-CROM1", {"IT-REFLUX-SCORE": "5"}, "t")


def test_submit_validates_entries_before_anything_leaves(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    with pytest.raises(odm.UnknownItem):
        s.connector.submit_form(pseudonym, "F-CROM1",
                                filled_entries(view, **{"IT-NOPE": "1"}), "t")
    with pytest.raises(odm.TypeMismatch):
        s.connector.submit_form(
            pseudonym, "F-CROM1",
            filled_entries(view, **{"IT-WEIGHT": ("heavy", "kg")}), "t")
    assert s.system.submission_keys() == ()
    # the prepared entry survives a rejected attempt
    result = s.connector.submit_form(
        pseudonym, "F-CROM1",
        filled_entries(view, **{"IT-REFLUX-SCORE": "5"}), "2015-06-01T11:00")
    assert result.receipt.status == "Accepted"


def test_submission_classifies_origins_and_backfills_units(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    entries = filled_entries(view, **{
        "IT-WEIGHT": ("72", "kg"),            # corrected by the clinician
        "IT-HEIGHT": (dict((f["item_oid"], f["value"]) for f in view.fields)
                      ["IT-HEIGHT"], None),   # unit left off, value untouched
        "IT-REFLUX-SCORE": "5",
        "IT-NOTES": "stable on current dose",
    })
    result = s.connector.submit_form(pseudonym, "F-CROM1", entries,
                                     "2015-06-01T11:00")
    assert result.receipt.status == "Accepted"
    assert result.receipt.event_kind == "Crom1"
    assert not result.queued
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    parsed = odm.parse_clinical_data(s.system.submission(key).document)
    by_oid = {fv.item_oid: fv for fv in parsed.submission.field_values}
    assert by_oid["IT-WEIGHT"].origin == "edited"
    assert by_oid["IT-HEIGHT"].origin == "prepopulated"
    assert by_oid["IT-HEIGHT"].unit == "cm"  # backfilled from the prepared pair
    assert by_oid["IT-REFLUX-SCORE"].origin == "manual"
    assert by_oid["IT-SUBJID"].origin == "prepopulated"
    assert s.connector.subject(pseudonym).stage == "Crom1Done"
    assert s.system.log.events[-1].kind == "Crom1"
    with pytest.raises(WrongWorkflowState, match="no prepared"):
        s.connector.submit_form(pseudonym, "F-CROM1", entries, "t")


def test_submission_chain_verifies_end_to_end(s):
    pseudonym = enroll(s)
    result = submit_crom1(s, pseudonym)
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    stored_id = result.receipt.document_artifact_id
    assert s.system.graph.lineage_of(stored_id).process_kinds() == set(PROCESS_KINDS)
    check = s.system.verify_submission(key)
    assert check.ok, check.findings
    stored = s.system.submission(key)
    stored.document = stored.document.replace(b"stable on current dose",
                                              b"stable on current dosF")
    tampered = s.system.verify_submission(key)
    assert not tampered.ok
    assert any(f.startswith("DigestMismatch") for f in tampered.findings)


def test_unchanged_submission_notes_the_missing_edit(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    result = s.connector.submit_form(pseudonym, "F-CROM1",
                                     filled_entries(view), "2015-06-01T11:00")
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    stored = s.system.submission(key)
    assert stored.absence_notes["Edit"] == "every value was accepted as prepared"
    assert "Edit" not in s.system.graph.lineage_of(
        result.receipt.document_artifact_id).process_kinds()
    assert s.system.verify_submission(key).ok


def test_submission_writes_both_artefacts_back_to_the_ehr(s):
    pseudonym = enroll(s)
    result = submit_crom1(s, pseudonym)
    assert len(result.artefact_ids) == 2
    stored = s.world.artefacts_of("asseco", "PL-000000")
    assert [a.content_type for a in stored] == ["application/xml", "text/html"]
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    assert stored[0].payload == s.system.submission(key).document
    assert b"data-origin" in stored[1].payload


def test_ehr_outage_only_costs_the_courtesy_copy(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    s.ehr.set_unreachable(True)
    result = s.connector.submit_form(pseudonym, "F-CROM1",
                                     filled_entries(view), "2015-06-01T11:00")
    assert result.receipt.status == "Accepted"
    assert result.artefact_ids == ()
    assert s.connector.subject(pseudonym).stage == "Crom1Done"


# The full journey -------------------------------------------------------------------


def journey(stack):
    pseudonym = enroll(stack)
    submit_crom1(stack, pseudonym)
    view = stack.connector.prepare_form(pseudonym, "F-CROM2", "2015-07-01T10:00")
    stack.connector.submit_form(pseudonym, "F-CROM2",
                                filled_entries(view, **{"IT-REFLUX-SCORE": "3"}),
                                "2015-07-01T10:30")
    stack.connector.prepare_form(pseudonym, "F-PROM1", "2015-06-29T18:00")
    stack.connector.submit_form(pseudonym, "F-PROM1",
                                {"IT-PROM-FREQ": "3", "IT-PROM-SEVERITY": "4"},
                                "2015-06-29T18:10")
    stack.connector.prepare_form(pseudonym, "F-PROM2", "2015-08-24T18:00")
    stack.connector.submit_form(pseudonym, "F-PROM2",
                                {"IT-PROM2-FREQ": "1", "IT-PROM2-SEVERITY": "2",
                                 "IT-PROM2-SATISFACTION": "8"},
                                "2015-08-24T18:10")
    return pseudonym


def test_in_order_forms_reach_completed(s):
    pseudonym = journey(s)
    state = s.connector.subject(pseudonym)
    assert state.workflow_state == "Completed"
    assert state.stage == "Crom2Done" and state.prom_stage == "Prom2Done"
    kinds = [e.kind for e in s.system.log.events]
    assert kinds == ["Flagged", "Consented", "Randomized", "Crom1",
                     "Crom2", "Prom1", "Prom2"]
    assert all(r.ok for r in s.system.verify_all().values())
    # patient-reported forms were edited by the patient agent
    assert s.connector.graph._agents[f"patient:{pseudonym}"].role == "patient"


def test_identical_stacks_produce_identical_documents():
    first, second = make_stack(), make_stack()
    journey(first)
    journey(second)
    assert first.system.submission_keys() == second.system.submission_keys()
    for key in first.system.submission_keys():
        assert (first.system.submission(key).document
                == second.system.submission(key).document)


def test_nothing_ever_connects_toward_the_practice(s):
    journey(s)
    assert s.trace.connections_toward("dnc") == ()
    assert s.trace.initiated_by(f"dnc:{PRACTICE}")


def test_prom_schedule_follows_the_offsets(s):
    pseudonym = enroll(s)  # randomized 2015-06-01
    assert s.connector.prom_due(dt.date(2015, 6, 28)) == ()
    assert s.connector.prom_due(dt.date(2015, 6, 29)) == (
        (pseudonym, "F-PROM1", "2015-06-29"),)
    s.connector.prepare_form(pseudonym, "F-PROM1", "2015-06-29T18:00")
    s.connector.submit_form(pseudonym, "F-PROM1",
                            {"IT-PROM-FREQ": "3", "IT-PROM-SEVERITY": "4"},
                            "2015-06-29T18:10")
    assert s.connector.prom_due(dt.date(2015, 8, 23)) == ()
    assert s.connector.prom_due(dt.date(2015, 8, 24)) == (
        (pseudonym, "F-PROM2", "2015-08-24"),)


# Store-and-forward ------------------------------------------------------------------


def test_tss_outage_queues_the_submission(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    s.tss.set_unreachable(True)
    result = s.connector.submit_form(pseudonym, "F-CROM1",
                                     filled_entries(view), "2015-06-01T11:00")
    assert result.queued
    assert result.receipt.status == "Pending"
    assert result.receipt.event_kind == "Crom1"
    assert s.connector.queue_depth == 1
    assert s.connector.subject(pseudonym).stage == "Crom1Done"
    assert s.system.submission_keys() == ()

    s.tss.set_unreachable(False)
    report = s.connector.sync_protocols("2015-06-01T12:00")
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    assert report.flushed == (key,)
    assert s.connector.queue_depth == 0
    assert s.system.submission(key).receipt.status == "Accepted"
    assert s.system.verify_submission(key).ok


def test_flush_rejects_what_the_tss_will_not_take(s):
    pseudonym = enroll(s)
    view = s.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    s.tss.set_unreachable(True)
    s.connector.submit_form(pseudonym, "F-CROM1", filled_entries(view),
                            "2015-06-01T11:00")
    # a direct entry beats the queued document to the study system
    s.system.ingest_submission(view.odm_container.encode("utf-8"),
                               "manual-entry", "2015-06-01T11:30")
    s.tss.set_unreachable(False)
    report = s.connector.sync_protocols("2015-06-01T12:00")
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    assert report.flushed == ()
    assert report.rejected == (key,)
    assert s.connector.queue_depth == 0


# Restart ---------------------------------------------------------------------------


def test_restart_replays_subjects_alerts_and_cache(tmp_path):
    first = make_stack(data_dir=tmp_path / "dnc")
    pseudonym = enroll(first)
    second = make_stack(data_dir=tmp_path / "dnc", system=first.system,
                        world=first.world, sync=False)
    assert second.connector.active_studies() == ("ST-GORD",)
    state = second.connector.subject(pseudonym)
    assert state.stage == "Randomized" and state.arm is not None
    assert second.connector.native_id_of(pseudonym) == "PL-000000"
    (alert,) = second.connector.alerts(include_closed=True)
    assert alert.status == "Actioned"
    assert second.connector.sync_protocols("t").new_studies == ()  # cursor kept


def test_prepared_forms_do_not_survive_a_restart(tmp_path):
    first = make_stack(data_dir=tmp_path / "dnc")
    pseudonym = enroll(first)
    first.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    second = make_stack(data_dir=tmp_path / "dnc", system=first.system,
                        world=first.world, sync=False)
    with pytest.raises(WrongWorkflowState, match="no prepared"):
        second.connector.submit_form(pseudonym, "F-CROM1",
                                     {"IT-REFLUX-SCORE": "5"}, "t")
    view = second.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:40")
    result = second.connector.submit_form(pseudonym, "F-CROM1",
                                          filled_entries(view),
                                          "2015-06-01T11:00")
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    stored = first.system.submission(key)
    assert stored.absence_notes["Screen"] == "screening preceded a connector restart"
    assert first.system.verify_submission(key).ok


def test_queue_survives_a_restart(tmp_path):
    first = make_stack(data_dir=tmp_path / "dnc")
    pseudonym = enroll(first)
    view = first.connector.prepare_form(pseudonym, "F-CROM1", "2015-06-01T10:30")
    first.tss.set_unreachable(True)
    first.connector.submit_form(pseudonym, "F-CROM1", filled_entries(view),
                                "2015-06-01T11:00")
    second = make_stack(data_dir=tmp_path / "dnc", system=first.system,
                        world=first.world, sync=False)
    assert second.connector.queue_depth == 1
    report = second.connector.sync_protocols("2015-06-01T12:00")
    key = f"sub:{PRACTICE}:{pseudonym}:F-CROM1"
    assert report.flushed == (key,)
    assert first.system.verify_submission(key).ok
    third = make_stack(data_dir=tmp_path / "dnc", system=first.system,
                       world=first.world, sync=False)
    assert third.connector.queue_depth == 0  # the flush was durably recorded
