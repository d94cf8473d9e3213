"""Study bundle parsing, validation and canonical serialization.

A study travels as a single ODM XML document: study metadata (events, forms,
item groups, items) plus an extension block in the ``tfm`` namespace that
makes the document executable against EHR sources:

* ``tfm:QueryId`` inside an ItemGroupDef binds the group to an embedded
  data extraction query;
* a standard ``Alias`` on an ItemDef (Context ``CDIM_<version>``) binds the
  item to a clinical concept;
* ``tfm:Query`` elements under MetaDataVersion hold the extraction queries;
* ``tfm:Eligibility`` carries the study's screening criterion tree;
* ``tfm:EventKind`` on a StudyEventDef names the workflow step the event
  represents.

Unknown elements in foreign namespaces are preserved opaquely and re-emitted
on serialization. Serialization is canonical: fixed element and attribute
order, two-space indent, so two serializations of equal bundles are
byte-identical. See docs/odm-ext.md for the extension schema.
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field, replace
from xml.etree import ElementTree as ET
from xml.sax.saxutils import escape, quoteattr

from . import criteria
from .cdim import normalize_concept_id

ODM_NS = "http://www.cdisc.org/ns/odm/v1.3"
EXT_NS = "urn:transform:odm-ext:1"
EXT_PREFIX = "tfm"

DATA_TYPES = ("text", "integer", "float", "date", "datetime", "coded")
ORIGIN_VALUES = ("prepopulated", "manual", "edited")
EVENT_KINDS = ("crom1", "crom2", "prom1", "prom2")

_ALIAS_CONTEXT_RE = re.compile(r"^CDIM_\d+\.\d+$")


class OdmError(Exception):
    pass


class MalformedXml(OdmError):
    pass


class SchemaViolation(OdmError):
    pass


class DanglingQueryRef(OdmError):
    pass


class DuplicateQueryId(OdmError):
    pass


class UnknownForm(OdmError):
    pass


class UnknownItem(OdmError):
    pass


class TypeMismatch(OdmError):
    pass


# --- bundle object model -----------------------------------------------------


@dataclass(frozen=True)
class CdimAlias:
    context: str
    concept_id: str
    well_formed: bool = True


@dataclass(frozen=True)
class Temporal:
    kind: str  # "latest" | "all" | "within"
    days: int | None = None

    def __post_init__(self):
        if self.kind not in ("latest", "all", "within"):
            raise ValueError(f"bad temporal kind {self.kind!r}")
        if self.kind == "within":
            if self.days is None or self.days <= 0:
                raise ValueError("within requires a positive day count")
        elif self.days is not None:
            raise ValueError(f"{self.kind} takes no day count")


LATEST = Temporal("latest")
ALL = Temporal("all")


@dataclass(frozen=True)
class ConceptSelector:
    concept_id: str
    code_filter: str | None = None
    temporal: Temporal = LATEST


@dataclass(frozen=True)
class DataExtractionQuery:
    query_id: str
    selectors: tuple[ConceptSelector, ...]
    projection: tuple[str, ...]


@dataclass(frozen=True)
class ItemDef:
    oid: str
    name: str
    data_type: str
    cdim_alias: CdimAlias | None = None
    unit_item_oid: str | None = None

    def __post_init__(self):
        if self.data_type not in DATA_TYPES:
            raise ValueError(f"{self.oid}: bad data_type {self.data_type!r}")


@dataclass(frozen=True)
class ItemGroupDef:
    oid: str
    name: str
    query_id: str | None
    items: tuple[ItemDef, ...]


@dataclass(frozen=True)
class FormDef:
    oid: str
    name: str
    item_groups: tuple[ItemGroupDef, ...]

    def item(self, item_oid: str) -> ItemDef | None:
        for group in self.item_groups:
            for item in group.items:
                if item.oid == item_oid:
                    return item
        return None

    def group_of(self, item_oid: str) -> ItemGroupDef | None:
        for group in self.item_groups:
            if any(item.oid == item_oid for item in group.items):
                return group
        return None


@dataclass(frozen=True)
class EventScheduleEntry:
    event_oid: str
    event_name: str
    form_oid: str
    sequence_index: int
    kind: str | None = None


@dataclass(frozen=True)
class OpaqueExtension:
    """A foreign-namespace element kept verbatim (canonical form)."""

    parent: str  # "Study" or "MetaDataVersion"
    xml: str


@dataclass(frozen=True)
class OdmStudyBundle:
    study_oid: str
    study_name: str
    metadata_version_oid: str
    metadata_version_name: str
    event_schedule: tuple[EventScheduleEntry, ...]
    forms: tuple[FormDef, ...]
    queries: tuple[DataExtractionQuery, ...]
    eligibility: tuple[criteria.EligibilityCriterion, ...] = ()
    extensions: tuple[OpaqueExtension, ...] = ()
    file_oid: str = "F-BUNDLE"
    creation_datetime: str = "1970-01-01T00:00:00"

    def form(self, form_oid: str) -> FormDef:
        for f in self.forms:
            if f.oid == form_oid:
                return f
        raise UnknownForm(form_oid)

    def query(self, query_id: str) -> DataExtractionQuery | None:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        return None

    def schedule_entry(self, form_oid: str) -> EventScheduleEntry | None:
        for entry in self.event_schedule:
            if entry.form_oid == form_oid:
                return entry
        return None


# --- clinical data -----------------------------------------------------------


@dataclass(frozen=True)
class FieldValue:
    item_oid: str
    value: str
    unit: str | None = None
    origin: str = "manual"

    def __post_init__(self):
        if self.origin not in ORIGIN_VALUES:
            raise ValueError(f"{self.item_oid}: bad origin {self.origin!r}")


@dataclass(frozen=True)
class ClinicalDataSubmission:
    study_oid: str
    subject_key: str
    event_oid: str
    form_oid: str
    field_values: tuple[FieldValue, ...]
    submitted_at: str
    provenance_ref: str


@dataclass(frozen=True)
class ParsedClinicalData:
    submission: ClinicalDataSubmission
    metadata_version_oid: str


def check_value_lexical(data_type: str, value: str) -> bool:
    """True when ``value`` is a valid lexical form for ``data_type``.

    datetime accepts a date-only form: several sources record day-granular
    instants and those flow into datetime items unchanged.
    """
    if data_type == "text":
        return True
    if data_type == "integer":
        return re.fullmatch(r"[+-]?\d+", value) is not None
    if data_type == "float":
        if re.fullmatch(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?", value) is None:
            return False
        return True
    if data_type == "date":
        try:
            dt.date.fromisoformat(value)
            return True
        except ValueError:
            return False
    if data_type == "datetime":
        try:
            if "T" in value:
                dt.datetime.fromisoformat(value)
            else:
                dt.date.fromisoformat(value)
            return True
        except ValueError:
            return False
    if data_type == "coded":
        head, sep, tail = value.partition(":")
        return bool(sep) and bool(head.strip()) and bool(tail.strip()) and ":" not in tail
    raise ValueError(f"unknown data_type {data_type!r}")


# --- parsing -----------------------------------------------------------------


def _q(ns: str, tag: str) -> str:
    return f"{{{ns}}}{tag}"


def _require(elem: ET.Element | None, what: str) -> ET.Element:
    if elem is None:
        raise SchemaViolation(f"missing {what}")
    return elem


def _attr(elem: ET.Element, name: str, what: str) -> str:
    value = elem.get(name)
    if value is None:
        raise SchemaViolation(f"{what}: missing attribute {name}")
    return value


def _parse_alias(item_elem: ET.Element, oid: str) -> CdimAlias | None:
    for alias in item_elem.findall(_q(ODM_NS, "Alias")):
        context = alias.get("Context", "")
        if not context.startswith("CDIM"):
            continue
        name = _attr(alias, "Name", f"ItemDef {oid} Alias")
        try:
            concept = normalize_concept_id(name)
            well_formed = _ALIAS_CONTEXT_RE.match(context) is not None
        except ValueError:
            concept = name
            well_formed = False
        return CdimAlias(context, concept, well_formed)
    return None


def _parse_temporal(sel: ET.Element, where: str) -> Temporal:
    kind = sel.get("Temporal", "Latest")
    days = sel.get("Days")
    try:
        if kind == "Latest":
            return LATEST
        if kind == "All":
            return ALL
        if kind == "Within":
            return Temporal("within", int(days) if days is not None else None)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(f"{where}: bad temporal bound: {exc}") from None
    raise SchemaViolation(f"{where}: unknown Temporal {kind!r}")


def _parse_query(q_elem: ET.Element) -> DataExtractionQuery:
    query_id = _attr(q_elem, "QueryId", "tfm:Query")
    selectors = []
    projection = []
    for child in q_elem:
        if child.tag == _q(EXT_NS, "Select"):
            concept = normalize_concept_id(_attr(child, "Concept", f"query {query_id} Select"))
            selectors.append(ConceptSelector(
                concept_id=concept,
                code_filter=child.get("Filter"),
                temporal=_parse_temporal(child, f"query {query_id}"),
            ))
        elif child.tag == _q(EXT_NS, "Project"):
            projection.append(normalize_concept_id(_attr(child, "Concept", f"query {query_id} Project")))
        else:
            raise SchemaViolation(f"query {query_id}: unexpected element {child.tag}")
    if not selectors:
        raise SchemaViolation(f"query {query_id}: no selectors")
    if not projection:
        # Default projection: the selected concepts themselves.
        projection = [s.concept_id for s in selectors]
    return DataExtractionQuery(query_id, tuple(selectors), tuple(projection))


def _parse_criterion(elem: ET.Element) -> criteria.Criterion:
    tag = elem.tag
    if tag == _q(EXT_NS, "And"):
        return criteria.And(tuple(_parse_criterion(c) for c in elem))
    if tag == _q(EXT_NS, "Or"):
        return criteria.Or(tuple(_parse_criterion(c) for c in elem))
    if tag == _q(EXT_NS, "Not"):
        children = list(elem)
        if len(children) != 1:
            raise SchemaViolation("tfm:Not takes exactly one child")
        return criteria.Not(_parse_criterion(children[0]))
    if tag == _q(EXT_NS, "HasDiagnosis"):
        return criteria.HasDiagnosis(_attr(elem, "Concept", "HasDiagnosis"))
    if tag == _q(EXT_NS, "HasActiveDrug"):
        return criteria.HasActiveDrug(_attr(elem, "Concept", "HasActiveDrug"))
    if tag == _q(EXT_NS, "AgeAtLeast"):
        return criteria.AgeAtLeast(int(_attr(elem, "Years", "AgeAtLeast")))
    if tag == _q(EXT_NS, "AgeBelow"):
        return criteria.AgeBelow(int(_attr(elem, "Years", "AgeBelow")))
    raise SchemaViolation(f"unknown criterion element {tag}")


def _foreign(elem: ET.Element) -> bool:
    return not (elem.tag.startswith(f"{{{ODM_NS}}}") or elem.tag.startswith(f"{{{EXT_NS}}}"))


def parse_study_bundle(text: str | bytes) -> OdmStudyBundle:
    """Parse an ODM study document with extensions into a bundle."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    if root.tag != _q(ODM_NS, "ODM"):
        raise SchemaViolation(f"root element is {root.tag}, expected ODM")
    study = _require(root.find(_q(ODM_NS, "Study")), "Study element")
    study_oid = _attr(study, "OID", "Study")
    gv = _require(study.find(_q(ODM_NS, "GlobalVariables")), "GlobalVariables")
    study_name = (_require(gv.find(_q(ODM_NS, "StudyName")), "StudyName").text or "").strip()
    mdv = _require(study.find(_q(ODM_NS, "MetaDataVersion")), "MetaDataVersion")
    mdv_oid = _attr(mdv, "OID", "MetaDataVersion")
    mdv_name = mdv.get("Name", "")

    extensions: list[OpaqueExtension] = []
    for child in study:
        if _foreign(child):
            extensions.append(OpaqueExtension("Study", render_foreign_element(child)))

    # Collect definitions.
    item_defs: dict[str, ItemDef] = {}
    for el in mdv.findall(_q(ODM_NS, "ItemDef")):
        oid = _attr(el, "OID", "ItemDef")
        if oid in item_defs:
            raise SchemaViolation(f"duplicate ItemDef {oid}")
        data_type = _attr(el, "DataType", f"ItemDef {oid}")
        if data_type not in DATA_TYPES:
            raise SchemaViolation(f"ItemDef {oid}: unknown DataType {data_type!r}")
        unit_ref = el.find(_q(EXT_NS, "UnitItemRef"))
        item_defs[oid] = ItemDef(
            oid=oid,
            name=el.get("Name", oid),
            data_type=data_type,
            cdim_alias=_parse_alias(el, oid),
            unit_item_oid=None if unit_ref is None else _attr(unit_ref, "ItemOID", f"ItemDef {oid} UnitItemRef"),
        )

    group_defs: dict[str, ItemGroupDef] = {}
    for el in mdv.findall(_q(ODM_NS, "ItemGroupDef")):
        oid = _attr(el, "OID", "ItemGroupDef")
        if oid in group_defs:
            raise SchemaViolation(f"duplicate ItemGroupDef {oid}")
        qid_el = el.find(_q(EXT_NS, "QueryId"))
        query_id = None if qid_el is None else (qid_el.text or "").strip() or None
        items = []
        for ref in el.findall(_q(ODM_NS, "ItemRef")):
            item_oid = _attr(ref, "ItemOID", f"ItemGroupDef {oid} ItemRef")
            if item_oid not in item_defs:
                raise SchemaViolation(f"ItemGroupDef {oid}: ItemRef to unknown item {item_oid}")
            items.append(item_defs[item_oid])
        group_defs[oid] = ItemGroupDef(oid, el.get("Name", oid), query_id, tuple(items))

    forms: dict[str, FormDef] = {}
    for el in mdv.findall(_q(ODM_NS, "FormDef")):
        oid = _attr(el, "OID", "FormDef")
        if oid in forms:
            raise SchemaViolation(f"duplicate FormDef {oid}")
        groups = []
        for ref in el.findall(_q(ODM_NS, "ItemGroupRef")):
            group_oid = _attr(ref, "ItemGroupOID", f"FormDef {oid} ItemGroupRef")
            if group_oid not in group_defs:
                raise SchemaViolation(f"FormDef {oid}: ItemGroupRef to unknown group {group_oid}")
            groups.append(group_defs[group_oid])
        forms[oid] = FormDef(oid, el.get("Name", oid), tuple(groups))

    event_defs: dict[str, ET.Element] = {}
    for el in mdv.findall(_q(ODM_NS, "StudyEventDef")):
        event_defs[_attr(el, "OID", "StudyEventDef")] = el

    protocol = _require(mdv.find(_q(ODM_NS, "Protocol")), "Protocol")
    schedule: list[EventScheduleEntry] = []
    for ref in protocol.findall(_q(ODM_NS, "StudyEventRef")):
        event_oid = _attr(ref, "StudyEventOID", "StudyEventRef")
        order = int(_attr(ref, "OrderNumber", f"StudyEventRef {event_oid}"))
        ev = event_defs.get(event_oid)
        if ev is None:
            raise SchemaViolation(f"StudyEventRef to unknown event {event_oid}")
        kind = ev.get(_q(EXT_NS, "EventKind"))
        if kind is not None and kind not in EVENT_KINDS:
            raise SchemaViolation(f"StudyEventDef {event_oid}: unknown EventKind {kind!r}")
        for fref in ev.findall(_q(ODM_NS, "FormRef")):
            form_oid = _attr(fref, "FormOID", f"StudyEventDef {event_oid} FormRef")
            if form_oid not in forms:
                raise SchemaViolation(f"StudyEventDef {event_oid}: FormRef to unknown form {form_oid}")
            schedule.append(EventScheduleEntry(
                event_oid=event_oid,
                event_name=ev.get("Name", event_oid),
                form_oid=form_oid,
                sequence_index=order,
                kind=kind,
            ))

    queries: list[DataExtractionQuery] = []
    seen_qids: set[str] = set()
    for el in mdv.findall(_q(EXT_NS, "Query")):
        query = _parse_query(el)
        if query.query_id in seen_qids:
            raise DuplicateQueryId(query.query_id)
        seen_qids.add(query.query_id)
        queries.append(query)

    for group in group_defs.values():
        if group.query_id is not None and group.query_id not in seen_qids:
            raise DanglingQueryRef(f"item group {group.oid} references missing query {group.query_id}")

    eligibility: list[criteria.EligibilityCriterion] = []
    for el in mdv.findall(_q(EXT_NS, "Eligibility")):
        children = [c for c in el]
        if len(children) != 1:
            raise SchemaViolation("tfm:Eligibility takes exactly one root criterion")
        eligibility.append(criteria.EligibilityCriterion(
            criterion_id=_attr(el, "CriterionId", "Eligibility"),
            expression=_parse_criterion(children[0]),
        ))

    for child in mdv:
        if _foreign(child):
            extensions.append(OpaqueExtension("MetaDataVersion", render_foreign_element(child)))

    return OdmStudyBundle(
        study_oid=study_oid,
        study_name=study_name,
        metadata_version_oid=mdv_oid,
        metadata_version_name=mdv_name,
        event_schedule=tuple(schedule),
        forms=tuple(forms.values()),
        queries=tuple(queries),
        eligibility=tuple(eligibility),
        extensions=tuple(extensions),
        file_oid=root.get("FileOID", "F-BUNDLE"),
        creation_datetime=root.get("CreationDateTime", "1970-01-01T00:00:00"),
    )


# --- canonical serialization --------------------------------------------------


def render_foreign_element(elem: ET.Element) -> str:
    """Render a foreign-namespace element to canonical single-snippet XML.

    Namespace prefixes from the source document are not recoverable, so the
    canonical form assigns x1, x2, ... in first-seen order and declares them
    on the snippet root. Text and attribute content is preserved exactly.
    """
    uris: list[str] = []

    def note(uri: str):
        if uri not in uris:
            uris.append(uri)

    def split(tag: str) -> tuple[str | None, str]:
        if tag.startswith("{"):
            uri, local = tag[1:].split("}", 1)
            return uri, local
        return None, tag

    def walk(e: ET.Element):
        uri, _ = split(e.tag)
        if uri:
            note(uri)
        for k in e.attrib:
            auri, _ = split(k)
            if auri:
                note(auri)
        for c in e:
            walk(c)

    walk(elem)
    prefix = {uri: f"x{i + 1}" for i, uri in enumerate(uris)}

    def name(tag: str) -> str:
        uri, local = split(tag)
        return f"{prefix[uri]}:{local}" if uri else local

    def render(e: ET.Element, declare: bool) -> str:
        parts = [f"<{name(e.tag)}"]
        if declare:
            for uri in uris:
                parts.append(f' xmlns:{prefix[uri]}="{escape(uri)}"')
        for k, v in e.attrib.items():
            parts.append(f" {name(k)}={quoteattr(v)}")
        children = list(e)
        text = e.text or ""
        if not children and not text:
            parts.append("/>")
            return "".join(parts)
        parts.append(">")
        parts.append(escape(text))
        for c in children:
            parts.append(render(c, False))
            parts.append(escape(c.tail or ""))
        parts.append(f"</{name(e.tag)}>")
        return "".join(parts)

    return render(elem, True)


class _Writer:
    def __init__(self):
        self.lines: list[str] = ['<?xml version="1.0" encoding="UTF-8"?>']
        self.depth = 0

    def raw(self, text: str):
        self.lines.append("  " * self.depth + text)

    def open(self, tag: str, attrs: list[tuple[str, str]] = (), close: bool = False):
        rendered = "".join(f" {k}={quoteattr(v)}" for k, v in attrs)
        if close:
            self.raw(f"<{tag}{rendered}/>")
        else:
            self.raw(f"<{tag}{rendered}>")
            self.depth += 1

    def text_element(self, tag: str, text: str, attrs: list[tuple[str, str]] = ()):
        rendered = "".join(f" {k}={quoteattr(v)}" for k, v in attrs)
        self.raw(f"<{tag}{rendered}>{escape(text)}</{tag}>")

    def close(self, tag: str):
        self.depth -= 1
        self.raw(f"</{tag}>")

    def result(self) -> str:
        return "\n".join(self.lines) + "\n"


def _odm_root_attrs(file_oid: str, file_type: str, creation: str) -> list[tuple[str, str]]:
    return [
        ("xmlns", ODM_NS),
        (f"xmlns:{EXT_PREFIX}", EXT_NS),
        ("FileOID", file_oid),
        ("FileType", file_type),
        ("CreationDateTime", creation),
        ("ODMVersion", "1.3.2"),
    ]


def _render_criterion(w: _Writer, expr: criteria.Criterion):
    if isinstance(expr, criteria.And):
        w.open("tfm:And")
        for t in expr.terms:
            _render_criterion(w, t)
        w.close("tfm:And")
    elif isinstance(expr, criteria.Or):
        w.open("tfm:Or")
        for t in expr.terms:
            _render_criterion(w, t)
        w.close("tfm:Or")
    elif isinstance(expr, criteria.Not):
        w.open("tfm:Not")
        _render_criterion(w, expr.term)
        w.close("tfm:Not")
    elif isinstance(expr, criteria.HasDiagnosis):
        w.open("tfm:HasDiagnosis", [("Concept", expr.concept_label)], close=True)
    elif isinstance(expr, criteria.HasActiveDrug):
        w.open("tfm:HasActiveDrug", [("Concept", expr.concept_label)], close=True)
    elif isinstance(expr, criteria.AgeAtLeast):
        w.open("tfm:AgeAtLeast", [("Years", str(expr.years))], close=True)
    elif isinstance(expr, criteria.AgeBelow):
        w.open("tfm:AgeBelow", [("Years", str(expr.years))], close=True)
    else:
        raise TypeError(f"not a criterion node: {expr!r}")


def serialize_study_bundle(bundle: OdmStudyBundle) -> str:
    """Serialize a bundle to its canonical XML form (deterministic bytes)."""
    w = _Writer()
    w.open("ODM", _odm_root_attrs(bundle.file_oid, "Snapshot", bundle.creation_datetime))
    w.open("Study", [("OID", bundle.study_oid)])
    w.open("GlobalVariables")
    w.text_element("StudyName", bundle.study_name)
    w.close("GlobalVariables")
    w.open("MetaDataVersion", [("OID", bundle.metadata_version_oid), ("Name", bundle.metadata_version_name)])

    w.open("Protocol")
    seen_events: list[str] = []
    for entry in bundle.event_schedule:
        if entry.event_oid not in seen_events:
            seen_events.append(entry.event_oid)
            w.open("StudyEventRef", [
                ("StudyEventOID", entry.event_oid),
                ("OrderNumber", str(entry.sequence_index)),
                ("Mandatory", "Yes"),
            ], close=True)
    w.close("Protocol")

    for event_oid in seen_events:
        entries = [e for e in bundle.event_schedule if e.event_oid == event_oid]
        attrs = [("OID", event_oid), ("Name", entries[0].event_name), ("Repeating", "No"), ("Type", "Scheduled")]
        if entries[0].kind is not None:
            attrs.append(("tfm:EventKind", entries[0].kind))
        w.open("StudyEventDef", attrs)
        for i, entry in enumerate(entries, start=1):
            w.open("FormRef", [("FormOID", entry.form_oid), ("OrderNumber", str(i)), ("Mandatory", "Yes")], close=True)
        w.close("StudyEventDef")

    groups: dict[str, ItemGroupDef] = {}
    items: dict[str, ItemDef] = {}
    for form in bundle.forms:
        w.open("FormDef", [("OID", form.oid), ("Name", form.name), ("Repeating", "No")])
        for i, group in enumerate(form.item_groups, start=1):
            groups.setdefault(group.oid, group)
            w.open("ItemGroupRef", [("ItemGroupOID", group.oid), ("OrderNumber", str(i)), ("Mandatory", "Yes")], close=True)
        w.close("FormDef")

    for group in groups.values():
        w.open("ItemGroupDef", [("OID", group.oid), ("Name", group.name), ("Repeating", "No")])
        if group.query_id is not None:
            w.text_element("tfm:QueryId", group.query_id)
        for i, item in enumerate(group.items, start=1):
            items.setdefault(item.oid, item)
            w.open("ItemRef", [("ItemOID", item.oid), ("OrderNumber", str(i)), ("Mandatory", "Yes")], close=True)
        w.close("ItemGroupDef")

    for item in items.values():
        attrs = [("OID", item.oid), ("Name", item.name), ("DataType", item.data_type)]
        if item.cdim_alias is None and item.unit_item_oid is None:
            w.open("ItemDef", attrs, close=True)
            continue
        w.open("ItemDef", attrs)
        if item.cdim_alias is not None:
            w.open("Alias", [("Context", item.cdim_alias.context), ("Name", item.cdim_alias.concept_id)], close=True)
        if item.unit_item_oid is not None:
            w.open("tfm:UnitItemRef", [("ItemOID", item.unit_item_oid)], close=True)
        w.close("ItemDef")

    for query in bundle.queries:
        w.open("tfm:Query", [("QueryId", query.query_id)])
        for sel in query.selectors:
            attrs = [("Concept", sel.concept_id)]
            if sel.code_filter is not None:
                attrs.append(("Filter", sel.code_filter))
            attrs.append(("Temporal", sel.temporal.kind.capitalize()))
            if sel.temporal.kind == "within":
                attrs.append(("Days", str(sel.temporal.days)))
            w.open("tfm:Select", attrs, close=True)
        for concept in query.projection:
            w.open("tfm:Project", [("Concept", concept)], close=True)
        w.close("tfm:Query")

    for crit in bundle.eligibility:
        w.open("tfm:Eligibility", [("CriterionId", crit.criterion_id)])
        _render_criterion(w, crit.expression)
        w.close("tfm:Eligibility")

    for ext in bundle.extensions:
        if ext.parent == "MetaDataVersion":
            w.raw(ext.xml)
    w.close("MetaDataVersion")
    for ext in bundle.extensions:
        if ext.parent == "Study":
            w.raw(ext.xml)
    w.close("Study")
    w.close("ODM")
    return w.result()


# --- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    code: str
    severity: str  # "error" | "warning"
    subject: str
    message: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    def add(self, code: str, severity: str, subject: str, message: str):
        self.findings.append(Finding(code, severity, subject, message))

    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def ok(self) -> bool:
        return not self.errors()

    def by_code(self, code: str) -> list[Finding]:
        return [f for f in self.findings if f.code == code]


def validate_extensions(bundle: OdmStudyBundle, catalog=None, terminology=None) -> ValidationReport:
    """Check extension integrity beyond what parsing can reject.

    Works on programmatically built bundles too, so it re-checks conditions
    the parser would have raised for. With a concept catalog it also verifies
    alias targets, unit references and query projections; with a terminology
    map it verifies eligibility and filter labels.
    """
    report = ValidationReport()
    qids = [q.query_id for q in bundle.queries]
    for qid in qids:
        if qids.count(qid) > 1:
            report.add("DuplicateQueryId", "error", qid, f"query id {qid} defined more than once")
    referenced: set[str] = set()
    for form in bundle.forms:
        for group in form.item_groups:
            if group.query_id is not None:
                referenced.add(group.query_id)
                if bundle.query(group.query_id) is None:
                    report.add("DanglingQueryRef", "error", group.oid,
                               f"item group {group.oid} references missing query {group.query_id}")
    for qid in qids:
        if qid not in referenced:
            report.add("UnusedQuery", "warning", qid, f"query {qid} is not referenced by any item group")

    form_oids = {f.oid for f in bundle.forms}
    seq_events: dict[int, set[str]] = {}
    for entry in bundle.event_schedule:
        if entry.form_oid not in form_oids:
            report.add("BadEventSchedule", "error", entry.event_oid,
                       f"event {entry.event_oid} schedules unknown form {entry.form_oid}")
        seq_events.setdefault(entry.sequence_index, set()).add(entry.event_oid)
    for seq, events in seq_events.items():
        if len(events) > 1:
            report.add("BadEventSchedule", "error", str(seq),
                       f"sequence index {seq} is shared by events {sorted(events)}")

    for form in bundle.forms:
        for group in form.item_groups:
            group_oids = {i.oid for i in group.items}
            for item in group.items:
                alias = item.cdim_alias
                if alias is not None:
                    if not alias.well_formed:
                        report.add("BadAliasFormat", "error", item.oid,
                                   f"item {item.oid}: alias {alias.concept_id!r} (context {alias.context!r}) is not a PREFIX/number concept id with a CDIM_<major>.<minor> context")
                    elif catalog is not None and alias.concept_id not in catalog:
                        report.add("UnknownConceptAlias", "error", item.oid,
                                   f"item {item.oid}: alias {alias.concept_id} is not in the concept catalog")
                if item.unit_item_oid is not None:
                    if item.unit_item_oid not in group_oids:
                        report.add("BadUnitItemRef", "error", item.oid,
                                   f"item {item.oid}: unit item {item.unit_item_oid} is not in group {group.oid}")
                    elif catalog is not None:
                        target = next(i for i in group.items if i.oid == item.unit_item_oid)
                        if target.cdim_alias is None or (
                                target.cdim_alias.concept_id in catalog
                                and catalog.resolve(target.cdim_alias.concept_id).value_kind != "unit-label"):
                            report.add("BadUnitItemRef", "warning", item.oid,
                                       f"item {item.oid}: unit item {item.unit_item_oid} is not a unit-label concept")

    if catalog is not None:
        for query in bundle.queries:
            allowed: set[str] = set()
            for sel in query.selectors:
                if sel.concept_id not in catalog:
                    report.add("UnknownConceptAlias", "error", query.query_id,
                               f"query {query.query_id} selects unknown concept {sel.concept_id}")
                    continue
                allowed.update(c.concept_id for c in catalog.family_of(sel.concept_id))
            for concept in query.projection:
                if concept not in allowed:
                    report.add("BadProjection", "error", query.query_id,
                               f"query {query.query_id} projects {concept}, which is outside every selector's concept family")

    if terminology is not None:
        labels = set(terminology.labels())
        for query in bundle.queries:
            for sel in query.selectors:
                if sel.code_filter is not None and sel.code_filter not in labels:
                    report.add("UnknownFilterLabel", "error", query.query_id,
                               f"query {query.query_id} filters on unknown concept label {sel.code_filter!r}")
        for crit in bundle.eligibility:
            for atom in criteria.atoms_of(crit.expression):
                label = getattr(atom, "concept_label", None)
                if label is not None and label not in labels:
                    report.add("UnknownFilterLabel", "error", crit.criterion_id,
                               f"criterion {crit.criterion_id} references unknown concept label {label!r}")
    return report


# --- clinical data documents ---------------------------------------------------


def attach_clinical_data(bundle: OdmStudyBundle, submission: ClinicalDataSubmission) -> str:
    """Build the single ODM document that carries one form's values.

    The document references the bundle's metadata version and contains one
    SubjectData/StudyEventData/FormData tree. Values are checked against the
    item definitions before anything is emitted.
    """
    if submission.study_oid != bundle.study_oid:
        raise UnknownForm(f"submission study {submission.study_oid} != bundle {bundle.study_oid}")
    form = bundle.form(submission.form_oid)
    entry = bundle.schedule_entry(submission.form_oid)
    if entry is None or entry.event_oid != submission.event_oid:
        raise SchemaViolation(
            f"form {submission.form_oid} is not scheduled under event {submission.event_oid}")
    by_group: dict[str, list[FieldValue]] = {}
    for fv in submission.field_values:
        item = form.item(fv.item_oid)
        if item is None:
            raise UnknownItem(f"{fv.item_oid} is not an item of form {form.oid}")
        if not check_value_lexical(item.data_type, fv.value):
            raise TypeMismatch(f"{fv.item_oid}: {fv.value!r} is not a valid {item.data_type}")
        group = form.group_of(fv.item_oid)
        by_group.setdefault(group.oid, []).append(fv)

    w = _Writer()
    w.open("ODM", _odm_root_attrs(f"F-{submission.subject_key}-{submission.form_oid}",
                                  "Transactional", submission.submitted_at))
    w.open("ClinicalData", [("StudyOID", bundle.study_oid),
                            ("MetaDataVersionOID", bundle.metadata_version_oid)])
    w.open("SubjectData", [("SubjectKey", submission.subject_key),
                           ("tfm:ProvenanceRef", submission.provenance_ref)])
    w.open("StudyEventData", [("StudyEventOID", submission.event_oid)])
    w.open("FormData", [("FormOID", submission.form_oid)])
    for group in form.item_groups:
        values = by_group.get(group.oid)
        if not values:
            continue
        w.open("ItemGroupData", [("ItemGroupOID", group.oid)])
        for fv in values:
            attrs = [("ItemOID", fv.item_oid), ("Value", fv.value)]
            if fv.unit is not None:
                attrs.append(("tfm:Unit", fv.unit))
            attrs.append(("tfm:Origin", fv.origin))
            w.open("ItemData", attrs, close=True)
        w.close("ItemGroupData")
    w.close("FormData")
    w.close("StudyEventData")
    w.close("SubjectData")
    w.close("ClinicalData")
    w.close("ODM")
    return w.result()


def parse_clinical_data(text: str | bytes) -> ParsedClinicalData:
    """Read back a clinical data document produced by attach_clinical_data."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    if root.tag != _q(ODM_NS, "ODM"):
        raise SchemaViolation(f"root element is {root.tag}, expected ODM")
    cd = _require(root.find(_q(ODM_NS, "ClinicalData")), "ClinicalData")
    subject = _require(cd.find(_q(ODM_NS, "SubjectData")), "SubjectData")
    event = _require(subject.find(_q(ODM_NS, "StudyEventData")), "StudyEventData")
    form = _require(event.find(_q(ODM_NS, "FormData")), "FormData")
    values: list[FieldValue] = []
    for group in form.findall(_q(ODM_NS, "ItemGroupData")):
        for item in group.findall(_q(ODM_NS, "ItemData")):
            origin = item.get(_q(EXT_NS, "Origin"), "manual")
            if origin not in ORIGIN_VALUES:
                raise SchemaViolation(f"ItemData {item.get('ItemOID')}: bad origin {origin!r}")
            values.append(FieldValue(
                item_oid=_attr(item, "ItemOID", "ItemData"),
                value=_attr(item, "Value", "ItemData"),
                unit=item.get(_q(EXT_NS, "Unit")),
                origin=origin,
            ))
    submission = ClinicalDataSubmission(
        study_oid=_attr(cd, "StudyOID", "ClinicalData"),
        subject_key=_attr(subject, "SubjectKey", "SubjectData"),
        event_oid=_attr(event, "StudyEventOID", "StudyEventData"),
        form_oid=_attr(form, "FormOID", "FormData"),
        field_values=tuple(values),
        submitted_at=root.get("CreationDateTime", ""),
        provenance_ref=subject.get(_q(EXT_NS, "ProvenanceRef"), ""),
    )
    return ParsedClinicalData(submission, _attr(cd, "MetaDataVersionOID", "ClinicalData"))
