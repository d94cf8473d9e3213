import pytest
from hypothesis import given
from hypothesis import strategies as st

from esource import odm
from esource.cdim import fixture_text

GORD_XML = fixture_text("odm", "gord_study.xml")


def bundle():
    return odm.parse_study_bundle(GORD_XML)


# Parsing and canonical serialization ------------------------------------------------


def test_parse_study_bundle_content():
    b = bundle()
    assert b.study_oid == "ST-GORD"
    form_oids = [f.oid for f in b.forms]
    assert form_oids == ["F-CROM1", "F-CROM2", "F-PROM1", "F-PROM2"]
    kinds = [b.schedule_entry(oid).kind for oid in form_oids]
    assert kinds == ["crom1", "crom2", "prom1", "prom2"]
    assert b.eligibility, "study carries an eligibility tree"
    assert b.queries, "study carries extraction queries"


def test_form_and_group_lookup():
    crom1 = bundle().form("F-CROM1")
    item = crom1.item("IT-WEIGHT")
    assert item is not None and item.data_type == "float"
    group = crom1.group_of("IT-WEIGHT")
    assert group is not None and group.oid == "IG-VITALS"
    assert crom1.item("IT-NOPE") is None
    with pytest.raises(odm.UnknownForm):
        bundle().form("F-NOPE")


def test_serialization_is_canonical_and_stable():
    canonical = odm.serialize_study_bundle(bundle())
    assert odm.serialize_study_bundle(odm.parse_study_bundle(canonical)) == canonical
    # serializing the same bundle twice is byte-identical
    b = bundle()
    assert odm.serialize_study_bundle(b) == odm.serialize_study_bundle(b)


def test_round_trip_preserves_semantics():
    first = odm.parse_study_bundle(GORD_XML)
    second = odm.parse_study_bundle(odm.serialize_study_bundle(first))
    assert first == second


def test_foreign_extensions_survive_round_trip():
    b = odm.parse_study_bundle(fixture_text("odm", "foreign_extension.xml"))
    assert len(b.extensions) == 2
    again = odm.parse_study_bundle(odm.serialize_study_bundle(b))
    assert again.extensions == b.extensions


def test_plain_odm_parses_without_extensions():
    b = odm.parse_study_bundle(fixture_text("odm", "plain_no_extensions.xml"))
    assert b.queries == () and b.eligibility == ()


@pytest.mark.parametrize("name,exc", [
    ("bad_dangling_query", odm.DanglingQueryRef),
    ("bad_duplicate_query", odm.DuplicateQueryId),
])
def test_structurally_bad_bundles(name, exc):
    with pytest.raises(exc):
        odm.parse_study_bundle(fixture_text("odm", name + ".xml"))


def test_malformed_xml():
    with pytest.raises(odm.MalformedXml):
        odm.parse_study_bundle("<ODM><unclosed>")


def test_validate_extensions_flags_bad_alias():
    b = odm.parse_study_bundle(fixture_text("odm", "bad_alias_format.xml"))
    report = odm.validate_extensions(b)
    assert not report.ok
    assert report.by_code("BadAliasFormat")


def test_validate_extensions_accepts_fixture_study():
    assert odm.validate_extensions(bundle()).ok


# Lexical value checks ----------------------------------------------------------------


@pytest.mark.parametrize("data_type,value,ok", [
    ("text", "anything at all", True),
    ("text", "", True),
    ("integer", "42", True),
    ("integer", "-3", True),
    ("integer", "3.5", False),
    ("integer", "", False),
    ("float", "81.5", True),
    ("float", "-0.5", True),
    ("float", "81", True),
    ("float", "8,5", False),
    ("date", "2015-06-01", True),
    ("date", "01/06/2015", False),
    ("date", "2015-13-01", False),
    ("datetime", "2015-06-01T09:30", True),
    ("datetime", "2015-06-01", True),  # day-granular sources
    ("datetime", "09:30", False),
    ("coded", "ICD10:K21.0", True),
    ("coded", "K21.0", False),
    ("coded", "ICD10:", False),
    ("coded", ":K21.0", False),
    ("coded", "A:B:C", False),
])
def test_check_value_lexical(data_type, value, ok):
    assert odm.check_value_lexical(data_type, value) is ok


@given(st.dates())
def test_lexical_accepts_every_iso_date(date):
    assert odm.check_value_lexical("date", date.isoformat())
    assert odm.check_value_lexical("datetime", date.isoformat())


@given(st.integers(-10**12, 10**12))
def test_lexical_accepts_every_integer(n):
    assert odm.check_value_lexical("integer", str(n))
    assert odm.check_value_lexical("float", str(n))


# Clinical data round-trip --------------------------------------------------------


def submission() -> odm.ClinicalDataSubmission:
    return odm.ClinicalDataSubmission(
        study_oid="ST-GORD",
        subject_key="a3f9c2d4e5b60718",
        event_oid="EV-BASELINE",
        form_oid="F-CROM1",
        field_values=(
            odm.FieldValue("IT-SUBJID", "a3f9c2d4e5b60718", origin="prepopulated"),
            odm.FieldValue("IT-SEX", "F", origin="prepopulated"),
            odm.FieldValue("IT-DIAG", "ICD10:K21.0", origin="edited"),
            odm.FieldValue("IT-WEIGHT", "81.5", unit="kg", origin="prepopulated"),
            odm.FieldValue("IT-REFLUX-SCORE", "4", origin="manual"),
        ),  # already in form order: the document canonicalizes to it
        submitted_at="2015-06-03T10:15",
        provenance_ref="graph:example",
    )


def test_clinical_data_round_trip():
    sub = submission()
    document = odm.attach_clinical_data(bundle(), sub)
    parsed = odm.parse_clinical_data(document)
    assert parsed.submission == sub


def test_clinical_data_serialization_deterministic():
    sub = submission()
    b = bundle()
    assert odm.attach_clinical_data(b, sub) == odm.attach_clinical_data(b, sub)


def test_attach_rejects_unknown_item():
    sub = submission()
    bad = odm.ClinicalDataSubmission(
        sub.study_oid, sub.subject_key, sub.event_oid, sub.form_oid,
        sub.field_values + (odm.FieldValue("IT-NOPE", "1"),),
        sub.submitted_at, sub.provenance_ref)
    with pytest.raises(odm.UnknownItem):
        odm.attach_clinical_data(bundle(), bad)


def test_attach_rejects_lexically_wrong_value():
    sub = submission()
    bad = odm.ClinicalDataSubmission(
        sub.study_oid, sub.subject_key, sub.event_oid, sub.form_oid,
        sub.field_values + (odm.FieldValue("IT-DOB", "03/02/1961"),),
        sub.submitted_at, sub.provenance_ref)
    with pytest.raises(odm.TypeMismatch):
        odm.attach_clinical_data(bundle(), bad)


def test_field_value_rejects_bad_origin():
    with pytest.raises(ValueError):
        odm.FieldValue("IT-SEX", "F", origin="guessed")
