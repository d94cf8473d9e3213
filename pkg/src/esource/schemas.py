"""Source-native record rendering for the three simulated EHR dialects.

Each renderer turns one patient's ground-truth facts into that vendor's XML
shape, coding diagnoses/drugs/labs in the vendor's terminology and dates in
its native instant format. The shapes deliberately disagree on structure so
the mediation layer has real work to do:

* asseco: Polish element names, DD/MM/YYYY dates, ICD-10 and ATC codes,
  no encounter history, no lab section, no symptom codes;
* vision: UK element names, ISO dates (labs carry a time of day), Read v2
  and MultiLex codes, no unit attributes anywhere;
* transhis: Dutch element names, epoch-day integers for every instant,
  ICPC/ATC/LOINC codes, explicit unit attributes on measurements and labs.

A machine-readable schema ships per source (``fixtures/sources/<id>.schema``)
and ``validate_record`` checks an export against it; exports are produced
through these functions only, so the schemas double as the published contract
for the record-path mappings.
"""

from __future__ import annotations

import datetime as dt
import json
import xml.etree.ElementTree as ET

from .cdim import Instant, TerminologyMap, fixture_text, render_instant
from .population import PatientFacts

NATIVE_ID_PREFIX = {"asseco": "PL", "vision": "UK", "transhis": "NL"}

_ASSECO_KINDS = {"weight": "waga", "height": "wzrost",
                 "systolic": "rr_skurczowe", "diastolic": "rr_rozkurczowe"}
_TRANSHIS_KINDS = {"weight": "gewicht", "height": "lengte",
                   "systolic": "rr_systolisch", "diastolic": "rr_diastolisch"}
_TRANSHIS_UNITS = {"weight": "kg", "height": "cm",
                   "systolic": "mmHg", "diastolic": "mmHg"}


class UnknownSource(KeyError):
    pass


def native_patient_id(source_id: str, index: int) -> str:
    try:
        prefix = NATIVE_ID_PREFIX[source_id]
    except KeyError:
        raise UnknownSource(source_id) from None
    return f"{prefix}-{index:06d}"


def patient_index_of(native_id: str, source_id: str) -> int:
    """Inverse of native_patient_id; ValueError when the id is not that source's."""
    prefix, _, suffix = native_id.partition("-")
    if prefix != NATIVE_ID_PREFIX.get(source_id) or not suffix.isdigit():
        raise ValueError(f"{native_id!r} is not a {source_id} patient id")
    return int(suffix)


def _code(tm: TerminologyMap, label: str, terminology: str, salt: int) -> str:
    codes = sorted(tm.codes_for(label, terminology))
    if not codes:
        raise ValueError(f"no {terminology} code for concept {label!r}")
    return codes[salt % len(codes)]


def _to_text(root: ET.Element) -> str:
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode", xml_declaration=False) + "\n"


def _render_asseco(p: PatientFacts, tm: TerminologyMap) -> str:
    fmt = "dmy_slash"
    root = ET.Element("pacjent", {"id": native_patient_id("asseco", p.index)})
    dane = ET.SubElement(root, "dane")
    ET.SubElement(dane, "plec").text = _code(tm, p.sex_label, "GENDER_PL", 0)
    ET.SubElement(dane, "urodzony").text = render_instant(Instant(p.birth_date), fmt)
    dx = ET.SubElement(root, "rozpoznania")
    for d in p.diagnoses:
        ET.SubElement(dx, "rozpoznanie", {
            "kod": _code(tm, d.label, "ICD10", d.code_salt),
            "data": render_instant(Instant(d.date), fmt)})
    rx = ET.SubElement(root, "leki")
    for r in p.prescriptions:
        ET.SubElement(rx, "lek", {
            "atc": _code(tm, r.label, "ATC", r.code_salt),
            "data": render_instant(Instant(r.date), fmt)})
    mm = ET.SubElement(root, "pomiary")
    for m in p.measurements:
        el = ET.SubElement(mm, "pomiar", {
            "typ": _ASSECO_KINDS[m.kind],
            "data": render_instant(Instant(m.date), fmt)})
        ET.SubElement(el, "wartosc").text = m.value
    return _to_text(root)


def _render_vision(p: PatientFacts, tm: TerminologyMap) -> str:
    fmt = "iso"
    root = ET.Element("patientRecord", {"nhsNumber": native_patient_id("vision", p.index)})
    demo = ET.SubElement(root, "demographics")
    ET.SubElement(demo, "sex").text = _code(tm, p.sex_label, "GENDER_UK", 0)
    ET.SubElement(demo, "dob").text = render_instant(Instant(p.birth_date), fmt)
    enc = ET.SubElement(root, "encounters")
    for e in p.encounters:
        ET.SubElement(enc, "encounter", {"date": e.instant.date.isoformat()})
    clin = ET.SubElement(root, "clinical")
    for d in p.diagnoses:
        ET.SubElement(clin, "code", {
            "class": "diagnosis",
            "read": _code(tm, d.label, "ReadV2", d.code_salt),
            "date": render_instant(Instant(d.date), fmt)})
    for s in p.symptoms:
        ET.SubElement(clin, "code", {
            "class": "symptom",
            "read": _code(tm, s.label, "ReadV2", s.code_salt),
            "date": render_instant(Instant(s.date), fmt)})
    vals = ET.SubElement(root, "values")
    for m in p.measurements:
        el = ET.SubElement(vals, "value", {
            "type": m.kind,
            "date": render_instant(Instant(m.date), fmt)})
        ET.SubElement(el, "reading").text = m.value
    ther = ET.SubElement(root, "therapy")
    for r in p.prescriptions:
        ET.SubElement(ther, "prescription", {
            "multilex": _code(tm, r.label, "MultiLex", r.code_salt),
            "issued": render_instant(Instant(r.date), fmt)})
    tests = ET.SubElement(root, "tests")
    for lab in p.labs:
        taken = Instant(lab.date, lab.time is not None, lab.time or dt.time(0, 0))
        el = ET.SubElement(tests, "test", {
            "read": _code(tm, lab.label, "ReadV2", lab.code_salt),
            "taken": render_instant(taken, fmt)})
        ET.SubElement(el, "result").text = lab.value
    return _to_text(root)


def _render_transhis(p: PatientFacts, tm: TerminologyMap) -> str:
    fmt = "epoch_days"
    root = ET.Element("dossier", {"pid": native_patient_id("transhis", p.index)})
    ET.SubElement(root, "persoon", {
        "geslacht": _code(tm, p.sex_label, "GENDER_NL", 0),
        "geboren": render_instant(Instant(p.birth_date), fmt)})
    if p.practice_id is not None:
        ET.SubElement(root, "zorg", {"praktijk": p.practice_id})
    contacts = ET.SubElement(root, "contacten")
    for e in p.encounters:
        ET.SubElement(contacts, "contact", {"dag": render_instant(e.instant, fmt)})
    episodes = ET.SubElement(root, "episodes")
    for d in p.diagnoses:
        ET.SubElement(episodes, "episode", {
            "icpc": _code(tm, d.label, "ICPC", d.code_salt),
            "dag": render_instant(Instant(d.date), fmt)})
    medicatie = ET.SubElement(root, "medicatie")
    for r in p.prescriptions:
        ET.SubElement(medicatie, "voorschrift", {
            "atc": _code(tm, r.label, "ATC", r.code_salt),
            "dag": render_instant(Instant(r.date), fmt)})
    metingen = ET.SubElement(root, "metingen")
    for m in p.measurements:
        el = ET.SubElement(metingen, "meting", {
            "soort": _TRANSHIS_KINDS[m.kind],
            "dag": render_instant(Instant(m.date), fmt),
            "eenheid": _TRANSHIS_UNITS[m.kind]})
        ET.SubElement(el, "waarde").text = m.value
    lab_el = ET.SubElement(root, "lab")
    for lab in p.labs:
        el = ET.SubElement(lab_el, "bepaling", {
            "loinc": _code(tm, lab.label, "LOINC", lab.code_salt),
            "dag": render_instant(Instant(lab.date), fmt),
            "eenheid": lab.unit})
        ET.SubElement(el, "waarde").text = lab.value
    return _to_text(root)


_RENDERERS = {"asseco": _render_asseco, "vision": _render_vision,
              "transhis": _render_transhis}


def render_record(source_id: str, facts: PatientFacts, tm: TerminologyMap) -> str:
    try:
        renderer = _RENDERERS[source_id]
    except KeyError:
        raise UnknownSource(source_id) from None
    return renderer(facts, tm)


# Schema validation -----------------------------------------------------------

def load_record_schema(source_id: str) -> dict:
    if source_id not in _RENDERERS:
        raise UnknownSource(source_id)
    return json.loads(fixture_text(f"sources/{source_id}.schema.json"))


def validate_record(source_id: str, xml_text: str) -> list[str]:
    """Check an export against the source's published schema fixture.

    Returns human-readable problems; empty list means the document conforms.
    """
    schema = load_record_schema(source_id)
    elements = schema["elements"]
    problems: list[str] = []
    root = ET.fromstring(xml_text)
    if root.tag != schema["root"]:
        return [f"root element {root.tag!r}, schema expects {schema['root']!r}"]

    def walk(el: ET.Element, path: str) -> None:
        spec = elements.get(el.tag)
        if spec is None:
            problems.append(f"{path}: element {el.tag!r} not in schema")
            return
        for attr in el.attrib:
            if attr not in spec["attrs"]:
                problems.append(f"{path}: attribute {attr!r} not allowed on {el.tag!r}")
        text = (el.text or "").strip()
        if text and not spec.get("text", False):
            problems.append(f"{path}: unexpected text content in {el.tag!r}")
        for child in el:
            if child.tag not in spec["children"]:
                problems.append(f"{path}: child {child.tag!r} not allowed under {el.tag!r}")
            else:
                walk(child, f"{path}/{child.tag}")

    walk(root, f"/{root.tag}")
    return problems
