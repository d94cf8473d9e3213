"""Smoke test for the study system."""
import shutil
import tempfile
from pathlib import Path

from esource import odm, provenance, tss

FIXTURES = Path("src/esource/fixtures")
xml = (FIXTURES / "odm" / "gord_study.xml").read_text()

sys = tss.StudySystem()

# 1. Registry lifecycle.
reg = sys.register_study(xml, registered_at="2015-06-01T08:00")
print("registered:", reg.study_oid, reg.version, reg.status)
assert reg.status == "Draft" and reg.version == 1
delta = sys.serve_protocols()
assert delta.studies == (), "draft must not be served"
print("draft not served, cursor", delta.cursor)

reg2 = sys.activate_study(reg.study_oid, at="2015-06-01T09:00")
assert reg2.status == "Active" and reg2.version == 2
delta = sys.serve_protocols()
assert len(delta.studies) == 1 and delta.studies[0][0] == reg.study_oid
assert delta.cursor == 2
cursor = delta.cursor
assert sys.serve_protocols(since=cursor).studies == ()
print("active served once, then cursor filters it out")

# Canonical serialization is stable through the registry.
bundle = odm.parse_study_bundle(delta.studies[0][2])
assert odm.serialize_study_bundle(bundle) == delta.studies[0][2]

# 2. Practices and randomization.
sys.register_practice("PR-PL-1", "PL")
sys.register_practice("PR-PL-1", "PL")  # idempotent
try:
    sys.register_practice("PR-PL-1", "UK")
    raise AssertionError("country conflict accepted")
except ValueError as exc:
    print("country conflict rejected:", exc)

try:
    sys.randomize("subj-a", "PR-PL-1", "rk-1", "2015-06-02T10:00")
    raise AssertionError("missing consent accepted")
except ValueError as exc:
    print("missing consent rejected:", exc)

a1 = sys.randomize("subj-a", "PR-PL-1", "rk-1", "2015-06-02T10:00",
                   flagged_at="2015-06-02T09:40", consented_at="2015-06-02T09:55")
print("assigned:", a1.arm, "slot", a1.slot_index, "block", a1.block_index)
assert sys.randomize("subj-a", "PR-PL-1", "rk-1", "2015-06-02T10:00",
                     consented_at="2015-06-02T09:55") == a1, "replay must return original"
try:
    sys.randomize("subj-a", "PR-PL-1", "rk-other", "2015-06-02T11:00",
                  consented_at="2015-06-02T09:55")
    raise AssertionError("double assignment accepted")
except tss.AlreadyAssigned as exc:
    print("double assignment rejected:", exc)
try:
    sys.randomize("subj-x", "PR-NOWHERE", "rk-x", "t", consented_at="t")
    raise AssertionError("unknown practice accepted")
except tss.UnknownPractice:
    print("unknown practice rejected")

a2 = sys.randomize("subj-b", "PR-PL-1", "rk-2", "2015-06-02T12:00",
                   consented_at="2015-06-02T11:55")
assert a2.slot_index == 2
kinds = [e.kind for e in sys.log.events]
assert kinds == ["Flagged", "Consented", "Randomized", "Consented", "Randomized"], kinds
print("recruitment log so far:", kinds)

# 3. Submissions with full lineage.
entry = bundle.schedule_entry("F-CROM1")
protocol_bytes = delta.studies[0][2].encode()
record_bytes = b"<pacjent id='PL-000000'/>"

prepared = {"IT-SUBJID": ("subj-a", None), "IT-WEIGHT": ("70", "kg")}
manual = {"IT-NOTES"}
snapshot_bytes = provenance.canonical_snapshot_bytes("F-CROM1", prepared, manual)
snapshot_dict = {"form_oid": "F-CROM1",
                 "fields": {oid: [v, u] for oid, (v, u) in prepared.items()},
                 "manual": sorted(manual)}

fields = (
    odm.FieldValue("IT-SUBJID", "subj-a", origin="prepopulated"),
    odm.FieldValue("IT-WEIGHT", "71.5", "kg", origin="edited"),
    odm.FieldValue("IT-NOTES", "reviewed in clinic", origin="manual"),
)
submission = odm.ClinicalDataSubmission(
    study_oid=bundle.study_oid, subject_key="subj-a",
    event_oid=entry.event_oid, form_oid="F-CROM1",
    field_values=fields, submitted_at="2015-06-03T10:00",
    provenance_ref="chain-1")
document = odm.attach_clinical_data(bundle, submission).encode()

g = provenance.ProvenanceGraph()
g.ensure_agent("dnc-PR-PL-1", "dnc")
g.ensure_agent("dr-kowalski", "clinician")
g.record_activity("Sync", "dnc-PR-PL-1", "t1", inputs=[],
                  outputs=[("protocol:v2", protocol_bytes, "study-protocol")])
g.record_activity("Screen", "dnc-PR-PL-1", "t2",
                  inputs=["protocol:v2"],
                  outputs=[("record:PL-000000", record_bytes, "ehr-record"),
                           ("screening:subj-a", b"eligible", "screening-outcome")])
g.record_activity("Prepopulate", "dnc-PR-PL-1", "t3",
                  inputs=["protocol:v2", "record:PL-000000", "screening:subj-a"],
                  outputs=[("prepared:subj-a:F-CROM1", snapshot_bytes, "prepared-form")])
g.record_activity("Edit", "dr-kowalski", "t4",
                  inputs=["prepared:subj-a:F-CROM1"],
                  outputs=[("edited:subj-a:F-CROM1", b"IT-WEIGHT=71.5", "edited-form")])
g.record_activity("Submit", "dr-kowalski", "t5",
                  inputs=["edited:subj-a:F-CROM1"],
                  outputs=[("doc:subj-a:F-CROM1", document, "clinical-document")])
lineage_lines = g.export_lineage_lines("doc:subj-a:F-CROM1")
print("lineage lines:", len(lineage_lines))

# CROM2 before CROM1 is rejected.
entry2 = bundle.schedule_entry("F-CROM2")
crom2_fields = (odm.FieldValue("IT-REFLUX-SCORE", "3", origin="manual"),)
sub2 = odm.ClinicalDataSubmission(bundle.study_oid, "subj-a", entry2.event_oid,
                                  "F-CROM2", crom2_fields, "2015-06-03T10:05", "chain-2")
doc2 = odm.attach_clinical_data(bundle, sub2).encode()
try:
    sys.ingest_submission(doc2, "sk-early", "2015-06-03T10:05",
                          absence_notes={k: "control arm, no connector" for k in
                                         ("Sync", "Screen", "Prepopulate", "Edit")})
    raise AssertionError("out-of-order accepted")
except tss.SequenceViolation as exc:
    print("out-of-order rejected:", exc)

# Unassigned subject is rejected.
sub_un = odm.ClinicalDataSubmission(bundle.study_oid, "subj-ghost", entry.event_oid,
                                    "F-CROM1", fields, "2015-06-03T10:06", "chain-x")
try:
    sys.ingest_submission(odm.attach_clinical_data(bundle, sub_un).encode(),
                          "sk-ghost", "2015-06-03T10:06")
    raise AssertionError("unassigned accepted")
except tss.SequenceViolation as exc:
    print("unassigned rejected:", exc)

# Garbage document.
try:
    sys.ingest_submission(b"not xml at all", "sk-bad", "t")
    raise AssertionError("garbage accepted")
except tss.SchemaViolation as exc:
    print("garbage rejected:", exc)

receipt = sys.ingest_submission(document, "sk-1", "2015-06-03T10:07",
                                lineage_lines=lineage_lines,
                                prepared_snapshot=snapshot_dict,
                                absence_notes={})
print("receipt:", receipt.submission_id, receipt.status, receipt.event_kind)
assert receipt.status == "Accepted" and receipt.event_kind == "Crom1"
replay = sys.ingest_submission(document, "sk-1", "LATER")
assert replay == receipt, "idempotent replay must return the original receipt"
try:
    sys.ingest_submission(document, "sk-1-again", "2015-06-03T10:08",
                          lineage_lines=lineage_lines,
                          prepared_snapshot=snapshot_dict)
    raise AssertionError("duplicate kind accepted")
except tss.SequenceViolation as exc:
    print("duplicate form kind rejected:", exc)

result = sys.verify_submission("sk-1")
print("verify sk-1:", result.ok, result.findings)
assert result.ok, result.findings

# Control-style submission: no connector chain, absence notes instead.
receipt2 = sys.ingest_submission(doc2, "sk-2", "2015-06-04T09:00",
                                 absence_notes={k: "entered directly at the site"
                                                for k in ("Sync", "Screen",
                                                          "Prepopulate", "Edit",
                                                          "Submit")})
assert receipt2.event_kind == "Crom2"
result2 = sys.verify_submission("sk-2")
print("verify sk-2:", result2.ok, result2.findings)
assert result2.ok, result2.findings

# PROM2 before PROM1.
entry_p2 = bundle.schedule_entry("F-PROM2")
sub_p2 = odm.ClinicalDataSubmission(bundle.study_oid, "subj-a", entry_p2.event_oid,
                                    "F-PROM2",
                                    (odm.FieldValue("IT-PROM2-FREQ", "2"),),
                                    "2015-07-01T10:00", "chain-p")
try:
    sys.ingest_submission(odm.attach_clinical_data(bundle, sub_p2).encode(),
                          "sk-p2", "2015-07-01T10:00",
                          absence_notes={k: "patient portal" for k in
                                         ("Sync", "Screen", "Prepopulate", "Edit",
                                          "Submit")})
    raise AssertionError("PROM2 before PROM1 accepted")
except tss.SequenceViolation as exc:
    print("PROM2 before PROM1 rejected:", exc)

# 4. Tamper detection: flip one byte of the stored document.
stored = sys.submission("sk-1")
tampered = bytearray(stored.document)
tampered[len(tampered) // 2] ^= 0x01
stored.document = bytes(tampered)
bad = sys.verify_submission("sk-1")
print("tampered verify:", bad.ok, bad.findings[:1])
assert not bad.ok
stored.document = document  # restore

# 5. Durability: replay from disk.
tmp = Path(tempfile.mkdtemp())
try:
    disk = tss.StudySystem(data_dir=tmp)
    disk.register_study(xml, "2015-06-01T08:00")
    disk.activate_study(reg.study_oid, "2015-06-01T09:00")
    disk.register_practice("PR-PL-1", "PL")
    disk.randomize("subj-a", "PR-PL-1", "rk-1", "2015-06-02T10:00",
                   flagged_at="2015-06-02T09:40", consented_at="2015-06-02T09:55")
    disk.ingest_submission(document, "sk-1", "2015-06-03T10:07",
                           lineage_lines=lineage_lines,
                           prepared_snapshot=snapshot_dict)
    reloaded = tss.StudySystem(data_dir=tmp)
    assert reloaded.serve_protocols().cursor == 2
    assert reloaded.assignment_of("subj-a") == disk.assignment_of("subj-a")
    assert reloaded.submission("sk-1").document == document
    assert reloaded.verify_submission("sk-1").ok
    assert [e.kind for e in reloaded.log.events] == [e.kind for e in disk.log.events]
    replay2 = reloaded.ingest_submission(document, "sk-1", "EVEN LATER")
    assert replay2.status == "Accepted"
    print("disk replay: protocols, assignment, submission, lineage all restored")
finally:
    shutil.rmtree(tmp)

# 6. Closed studies stop accepting data.
sys.close_study(bundle.study_oid, at="2015-12-31T17:00")
assert sys.serve_protocols().studies == ()
sub_p1 = odm.ClinicalDataSubmission(bundle.study_oid, "subj-a",
                                    bundle.schedule_entry("F-PROM1").event_oid,
                                    "F-PROM1",
                                    (odm.FieldValue("IT-PROM-FREQ", "4"),),
                                    "2016-01-02T10:00", "chain-q")
try:
    sys.ingest_submission(odm.attach_clinical_data(bundle, sub_p1).encode(),
                          "sk-p1", "2016-01-02T10:00")
    raise AssertionError("closed study accepted data")
except tss.UnknownStudy as exc:
    print("closed study rejected:", exc)

print("ALL TSS SMOKE CHECKS PASSED")
