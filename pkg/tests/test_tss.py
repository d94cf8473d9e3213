"""Trial support system: registry, randomization service, ingest, verification."""

import dataclasses

import pytest

from esource import odm
from esource.cdim import fixture_text
from esource.provenance import digest_bytes
from esource.randomization import BLOCK_SIZE, sequence_prefix
from esource.tss import (
    AlreadyAssigned,
    RecruitmentEvent,
    RecruitmentLog,
    SchemaViolation,
    SequenceViolation,
    StudySystem,
    UnknownPractice,
    UnknownStudy,
    ValidationFailed,
    load_recruitment_log,
    save_recruitment_log,
)

GORD_XML = fixture_text("odm", "gord_study.xml")
BUNDLE = odm.parse_study_bundle(GORD_XML)
PRACTICE = "pl-wroclaw-1"

# One lexically valid manual item per form, enough to build a document.
_FORM_ITEM = {"F-CROM1": "IT-REFLUX-SCORE", "F-CROM2": "IT-REFLUX-SCORE",
              "F-PROM1": "IT-PROM-FREQ", "F-PROM2": "IT-PROM2-FREQ"}

# Ingest records its own activity; the other five kinds need an explanation
# when a document arrives without lineage, as these hand-built ones do.
NOTES = {"Sync": "document built directly against the registered bundle",
         "Screen": "document built directly against the registered bundle",
         "Prepopulate": "document built directly against the registered bundle",
         "Edit": "document built directly against the registered bundle",
         "Submit": "document built directly against the registered bundle"}


def document(pseudonym, form_oid="F-CROM1", value="4", bundle=BUNDLE):
    entry = bundle.schedule_entry(form_oid)
    sub = odm.ClinicalDataSubmission(
        study_oid=bundle.study_oid, subject_key=pseudonym,
        event_oid=entry.event_oid, form_oid=form_oid,
        field_values=(odm.FieldValue(_FORM_ITEM[form_oid], value, origin="manual"),),
        submitted_at="2015-06-03T10:15", provenance_ref="")
    return odm.attach_clinical_data(bundle, sub).encode("utf-8")


def active_system(**kwargs):
    system = StudySystem(**kwargs)
    system.register_study(GORD_XML, "2015-05-01")
    system.activate_study("ST-GORD", "2015-05-02")
    system.register_practice(PRACTICE, "Poland")
    return system


def randomized(system, pseudonym, key=None):
    return system.randomize(pseudonym, PRACTICE, key or f"rand:{pseudonym}",
                            issued_at="2015-06-02T09:00",
                            flagged_at="2015-06-01T09:00",
                            consented_at="2015-06-01T09:30")


# Study registry --------------------------------------------------------------


def test_registration_stores_the_canonical_serialization():
    reg = StudySystem().register_study(GORD_XML, "2015-05-01")
    assert reg.study_oid == "ST-GORD"
    assert reg.version == 1
    assert reg.status == "Draft"
    assert reg.registered_at == "2015-05-01"
    assert reg.bundle_xml == odm.serialize_study_bundle(BUNDLE)


@pytest.mark.parametrize("xml,first_finding", [
    (fixture_text("odm", "bad_dangling_query.xml"), "DanglingQueryRef"),
    ("<ODM><unclosed>", "MalformedXml"),
])
def test_registration_rejects_unparseable_bundles(xml, first_finding):
    with pytest.raises(ValidationFailed) as exc:
        StudySystem().register_study(xml)
    assert exc.value.findings[0].startswith(first_finding)


def test_registration_rejects_semantic_findings():
    with pytest.raises(ValidationFailed) as exc:
        StudySystem().register_study(fixture_text("odm", "bad_alias_format.xml"))
    assert exc.value.findings


def test_version_counter_spans_studies():
    system = StudySystem()
    assert system.register_study(GORD_XML).version == 1
    assert system.activate_study("ST-GORD").version == 2
    plain = fixture_text("odm", "plain_no_extensions.xml")
    assert system.register_study(plain).version == 3
    assert system.activate_study("ST-PLAIN").version == 4


def test_serve_protocols_is_a_cursor_delta():
    system = StudySystem()
    system.register_study(GORD_XML)
    assert system.serve_protocols(0).studies == ()  # drafts are not served
    system.activate_study("ST-GORD")
    delta = system.serve_protocols(0)
    assert [(oid, version) for oid, version, _ in delta.studies] == [("ST-GORD", 2)]
    assert delta.studies[0][2] == odm.serialize_study_bundle(BUNDLE)
    assert system.serve_protocols(delta.cursor).studies == ()
    system.close_study("ST-GORD")
    assert system.serve_protocols(0).studies == ()


def test_amendment_draft_supersedes_the_active_version():
    system = active_system()
    system.register_study(GORD_XML, "2015-07-01")  # amendment under review
    assert system.serve_protocols(0).studies == ()
    reg = system.activate_study("ST-GORD")
    delta = system.serve_protocols(0)
    assert [(oid, version) for oid, version, _ in delta.studies] == [
        ("ST-GORD", reg.version)]


def test_activate_unknown_study():
    with pytest.raises(UnknownStudy):
        StudySystem().activate_study("ST-NOPE")


def test_practice_registration_is_idempotent_per_country():
    system = StudySystem()
    system.register_practice(PRACTICE, "Poland")
    system.register_practice(PRACTICE, "Poland")
    with pytest.raises(ValueError):
        system.register_practice(PRACTICE, "Greece")


# Randomization service --------------------------------------------------------


def test_randomize_requires_consent_attestation():
    system = active_system()
    with pytest.raises(ValueError, match="consent attestation"):
        system.randomize("subj-1", PRACTICE, "k1", issued_at="t",
                         flagged_at="t", consented_at=None)


def test_randomize_guards():
    system = active_system()
    with pytest.raises(UnknownPractice):
        system.randomize("subj-1", "xx-nowhere-9", "k1", issued_at="t",
                         consented_at="t")
    randomized(system, "subj-1")
    with pytest.raises(AlreadyAssigned):
        system.randomize("subj-1", PRACTICE, "k-other", issued_at="t",
                         consented_at="t")


def test_randomize_replays_by_idempotency_key():
    system = active_system()
    first = randomized(system, "subj-1", key="shared-key")
    again = system.randomize("subj-1", PRACTICE, "shared-key",
                             issued_at="later", consented_at="later")
    assert again == first
    # the replay consumed no slot
    assert randomized(system, "subj-2").slot_index == 2


def test_slots_follow_the_practice_block_sequence():
    system = active_system(randomization_seed=2015)
    arms = [randomized(system, f"subj-{i}").arm for i in range(12)]
    assert arms == list(sequence_prefix(2015, PRACTICE, 12))
    assignments = [system.assignment_of(f"subj-{i}") for i in range(12)]
    assert [a.slot_index for a in assignments] == list(range(1, 13))
    assert [a.block_index for a in assignments] == [
        (slot - 1) // BLOCK_SIZE for slot in range(1, 13)]
    for n in range(1, 13):
        prefix = arms[:n]
        assert abs(prefix.count("T") - prefix.count("C")) <= 2


def test_randomize_appends_workflow_events():
    system = active_system()
    assignment = randomized(system, "subj-1")
    kinds = [(e.kind, e.arm) for e in system.log.events]
    assert kinds == [("Flagged", None), ("Consented", None),
                     ("Randomized", assignment.arm)]
    assert all(e.pseudonym == "subj-1" and e.country == "Poland"
               for e in system.log.events)
    system.randomize("subj-2", PRACTICE, "k2", issued_at="t", consented_at="t")
    assert [e.kind for e in system.log.events[3:]] == ["Consented", "Randomized"]


# Clinical data ingest -----------------------------------------------------------


def test_ingest_accepts_a_crom1_and_logs_it():
    system = active_system()
    assignment = randomized(system, "subj-1")
    doc = document("subj-1")
    receipt = system.ingest_submission(doc, "k1", "2015-06-03T10:20",
                                       absence_notes=NOTES)
    assert receipt.status == "Accepted"
    assert receipt.event_kind == "Crom1"
    assert receipt.document_artifact_id == "stored-doc:k1"
    assert receipt.document_digest == digest_bytes(doc)
    assert system.submission("k1").document == doc
    assert system.log.events[-1] == RecruitmentEvent(
        PRACTICE, "Poland", "subj-1", "Crom1", "2015-06-03T10:20", assignment.arm)


def test_ingest_replays_by_idempotency_key():
    system = active_system()
    randomized(system, "subj-1")
    doc = document("subj-1")
    first = system.ingest_submission(doc, "k1", "t1", absence_notes=NOTES)
    events_before = len(system.log.events)
    again = system.ingest_submission(doc, "k1", "t2", absence_notes=NOTES)
    assert again == first
    assert len(system.log.events) == events_before
    assert system.submission_keys() == ("k1",)


def test_ingest_enforces_form_sequencing():
    system = active_system()
    randomized(system, "subj-1")
    with pytest.raises(SequenceViolation, match="Crom2 requires Crom1"):
        system.ingest_submission(document("subj-1", "F-CROM2"), "k2", "t")
    system.ingest_submission(document("subj-1"), "k1", "t", absence_notes=NOTES)
    with pytest.raises(SequenceViolation, match="already submitted"):
        system.ingest_submission(document("subj-1", "F-CROM1", value="5"),
                                 "k1b", "t")
    receipt = system.ingest_submission(document("subj-1", "F-CROM2"), "k2", "t",
                                       absence_notes=NOTES)
    assert receipt.event_kind == "Crom2"


def test_prom_sequencing_is_independent_of_croms():
    system = active_system()
    randomized(system, "subj-1")
    with pytest.raises(SequenceViolation, match="Prom2 requires Prom1"):
        system.ingest_submission(document("subj-1", "F-PROM2"), "kp2", "t")
    receipt = system.ingest_submission(document("subj-1", "F-PROM1"), "kp1", "t",
                                       absence_notes=NOTES)
    assert receipt.event_kind == "Prom1"  # no clinical report needed first
    receipt = system.ingest_submission(document("subj-1", "F-PROM2"), "kp2", "t",
                                       absence_notes=NOTES)
    assert receipt.event_kind == "Prom2"


def test_ingest_requires_an_assignment():
    system = active_system()
    with pytest.raises(SequenceViolation, match="no randomization assignment"):
        system.ingest_submission(document("subj-ghost"), "k1", "t")


def test_ingest_rejects_malformed_documents():
    system = active_system()
    randomized(system, "subj-1")
    with pytest.raises(SchemaViolation):
        system.ingest_submission(b"<ODM><unclosed>", "k1", "t")


def test_ingest_rejects_stale_metadata_version():
    system = active_system()
    randomized(system, "subj-1")
    stale = dataclasses.replace(BUNDLE, metadata_version_oid="MDV-0")
    with pytest.raises(UnknownStudy, match="metadata version"):
        system.ingest_submission(document("subj-1", bundle=stale), "k1", "t")


def test_ingest_rejects_unknown_or_inactive_studies():
    system = StudySystem()
    system.register_practice(PRACTICE, "Poland")
    with pytest.raises(UnknownStudy):
        system.ingest_submission(document("subj-1"), "k1", "t")
    system.register_study(GORD_XML)
    with pytest.raises(UnknownStudy):  # registered but still Draft
        system.ingest_submission(document("subj-1"), "k2", "t")
    system.activate_study("ST-GORD")
    system.close_study("ST-GORD")
    with pytest.raises(UnknownStudy):
        system.ingest_submission(document("subj-1"), "k3", "t")


# Verification ----------------------------------------------------------------


def test_verification_passes_then_flags_a_single_byte_tamper():
    system = active_system()
    randomized(system, "subj-1")
    system.ingest_submission(document("subj-1", value="444"), "k1", "t",
                             absence_notes=NOTES)
    assert system.verify_submission("k1").ok
    assert all(r.ok for r in system.verify_all().values())
    stored = system.submission("k1")
    stored.document = stored.document.replace(b"444", b"454", 1)
    result = system.verify_submission("k1")
    assert not result.ok
    assert any(f.startswith("DigestMismatch") for f in result.findings)


def test_verification_survives_a_corrupted_store():
    system = active_system()
    randomized(system, "subj-1")
    system.ingest_submission(document("subj-1"), "k1", "t", absence_notes=NOTES)
    system.submission("k1").document = b"<not-xml"
    result = system.verify_submission("k1")
    assert not result.ok
    assert result.findings[0].startswith("MalformedDocument")


def test_verification_demands_notes_for_missing_chain_links():
    system = active_system()
    randomized(system, "subj-1")
    system.ingest_submission(document("subj-1"), "k1", "t")  # no notes at all
    result = system.verify_submission("k1")
    assert not result.ok
    missing = {f.split()[1] for f in result.findings
               if f.startswith("MissingProcess")}
    assert missing == {"Sync", "Screen", "Prepopulate", "Edit", "Submit"}


# Restart replay ----------------------------------------------------------------


def test_restart_replays_the_full_state(tmp_path):
    first = active_system(data_dir=tmp_path, randomization_seed=11)
    randomized(first, "subj-1")
    randomized(first, "subj-2")
    first.ingest_submission(document("subj-1"), "k1", "t1", absence_notes=NOTES)
    first.ingest_submission(document("subj-1", "F-CROM2"), "k2", "t2",
                            absence_notes=NOTES)

    second = StudySystem(data_dir=tmp_path, randomization_seed=11)
    assert second.serve_protocols(0) == first.serve_protocols(0)
    assert second.assignment_of("subj-1") == first.assignment_of("subj-1")
    assert second.assignment_of("subj-2") == first.assignment_of("subj-2")
    assert second.submission_keys() == first.submission_keys()
    assert second.submission("k1").document == first.submission("k1").document
    assert second.log.events == first.log.events
    assert all(r.ok for r in second.verify_all().values())
    # the counters continue rather than reset
    assert randomized(second, "subj-3").slot_index == 3
    with pytest.raises(SequenceViolation, match="already submitted"):
        second.ingest_submission(document("subj-1", value="5"), "k9", "t")
    replay = second.ingest_submission(b"ignored", "k1", "later")
    assert replay == first.submission("k1").receipt


# Recruitment log ----------------------------------------------------------------


def test_recruitment_report_groupings():
    system = active_system()
    randomized(system, "subj-1")
    assert system.recruitment_report("country_arm") is not None
    assert system.recruitment_report("practice_week") is not None
    with pytest.raises(ValueError):
        system.recruitment_report("by_phase_of_moon")


def test_recruitment_log_round_trip(tmp_path):
    log = RecruitmentLog()
    log.append(RecruitmentEvent("p1", "Poland", "s1", "Flagged", "t1"))
    log.append(RecruitmentEvent("p1", "Poland", "s1", "Randomized", "t2", "T"))
    path = tmp_path / "log.jsonl"
    save_recruitment_log(log, path)
    assert load_recruitment_log(path) == log
    with pytest.raises(ValueError):
        log.append(RecruitmentEvent("p1", "Poland", "s1", "Abducted", "t3"))
