"""Semantic mediation: run bundle queries against a source record.

The pipeline is translate -> execute -> fill:

* ``translate_query`` rewrites a concept-level extraction query into source
  terms: record paths, implicit values and compiled code filters in the
  source's native terminology;
* ``execute_query`` evaluates the translated query against one patient's
  record XML and emits concept-annotated rows;
* ``prepopulate_form`` runs every query a form references and distributes the
  rows onto items by their concept alias.

Values are never converted between units; a unit label travels next to its
datum exactly as the source recorded (or implied) it. Family members (datum,
instant, unit) are correlated per clinical entry before any temporal filter,
so "latest weight" keeps the date and the unit of the same measurement that
won.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

from . import odm
from .cdim import (
    CURRENT_PRACTICE_RULE,
    ConceptCatalog,
    ImplicitValue,
    Instant,
    PathMapping,
    SourceModel,
    TerminologyMap,
    Unsupported,
    parse_instant,
)
from .recordpath import PathHit, common_step_prefix

IMPLICIT_PATH = "(implicit)"


class UntranslatableFilter(RuntimeError):
    """A code filter cannot be expressed in the source's terminology."""


@dataclass(frozen=True)
class ExecutionContext:
    """Ambient facts a query may need beyond the record itself."""

    encounter: Instant
    practice_id: str


@dataclass(frozen=True)
class TranslatedMember:
    concept_id: str
    outcome: PathMapping | ImplicitValue | Unsupported
    value_kind: str
    domain: str | None


@dataclass(frozen=True)
class TranslatedSelector:
    selector: odm.ConceptSelector
    head_concept: str
    members: tuple[TranslatedMember, ...]
    filter_codes: frozenset[str] | None
    filter_terminology: str | None


@dataclass(frozen=True)
class TranslatedQuery:
    query_id: str
    source_id: str
    selectors: tuple[TranslatedSelector, ...]
    projection: tuple[str, ...]

    def outcomes(self) -> list[tuple[str, object]]:
        """Flat (concept_id, outcome) view across all selectors."""
        return [(m.concept_id, m.outcome) for sel in self.selectors for m in sel.members]


@dataclass(frozen=True)
class ResultRow:
    concept_id: str
    value: str
    unit: str | None
    instant: str | None
    source_path: str


@dataclass(frozen=True)
class AnnotatedResultSet:
    query_id: str
    source_id: str
    rows: tuple[ResultRow, ...]


def translate_query(query: odm.DataExtractionQuery, model: SourceModel,
                    catalog: ConceptCatalog, terminology: TerminologyMap) -> TranslatedQuery:
    """Rewrite a concept-level query into one source's vocabulary.

    Raises UntranslatableFilter when a selector carries a code filter and the
    source either has no terminology for that concept domain or the filter
    concept has no codes in it. Unsupported concepts translate to Unsupported
    outcomes; they are not an error (the caller leaves those cells manual).
    """
    selectors = []
    for sel in query.selectors:
        family = catalog.family_of(sel.concept_id)
        head = family[0]
        members = tuple(
            TranslatedMember(m.concept_id, model.map_to_source(m.concept_id), m.value_kind, m.domain)
            for m in family
        )
        filter_codes = None
        filter_term = None
        head_outcome = members[0].outcome
        if sel.code_filter is not None and not isinstance(head_outcome, Unsupported):
            filter_term = model.terminology_for(head.domain)
            if filter_term is None:
                raise UntranslatableFilter(
                    f"{model.source_id} has no terminology for {head.domain or 'this'} domain "
                    f"(filter {sel.code_filter!r} on {head.concept_id})")
            codes = terminology.codes_for(sel.code_filter, filter_term)
            if not codes:
                raise UntranslatableFilter(
                    f"concept {sel.code_filter!r} has no codes in {filter_term} "
                    f"(source {model.source_id})")
            filter_codes = frozenset(codes)
        selectors.append(TranslatedSelector(sel, head.concept_id, members, filter_codes, filter_term))
    return TranslatedQuery(query.query_id, model.source_id, tuple(selectors), query.projection)


@dataclass
class _Entry:
    key: tuple[int, ...]
    values: dict[str, PathHit] = field(default_factory=dict)  # concept -> hit
    instant: Instant | None = None


def _collect_entries(tsel: TranslatedSelector, root, model: SourceModel) -> list[_Entry]:
    mapped = [(m, m.outcome.path) for m in tsel.members if isinstance(m.outcome, PathMapping)]
    if not mapped:
        return []
    prefix = common_step_prefix([p for _, p in mapped])
    entries: dict[tuple[int, ...], _Entry] = {}
    for member, path in mapped:
        for hit in path.evaluate(root):
            key = hit.entry_key[:prefix]
            entry = entries.setdefault(key, _Entry(key))
            entry.values.setdefault(member.concept_id, hit)
    ordered = [entries[k] for k in sorted(entries)]
    instant_members = [m for m in tsel.members if m.value_kind == "instant"]
    for entry in ordered:
        for m in instant_members:
            hit = entry.values.get(m.concept_id)
            if hit is not None:
                try:
                    entry.instant = parse_instant(hit.value, model.instant_format)
                except (ValueError, IndexError):
                    entry.instant = None
                break
    return ordered


def _instant_sort_key(entry: _Entry):
    if entry.instant is None:
        low = Instant(dt.date.min)
        return (low, entry.key)
    return (entry.instant, entry.key)


def execute_query(tq: TranslatedQuery, record_root, model: SourceModel,
                  context: ExecutionContext | None = None) -> AnnotatedResultSet:
    """Evaluate a translated query against a parsed record document.

    Entries are correlated per clinical event before temporal filtering, so
    a "latest" pick returns the value, instant and unit of one entry. Ties on
    equal instants go to the highest record sequence. Implicit values are
    emitted with the reserved ``(implicit)`` source path; the
    current-practice rule needs a context to resolve and yields nothing
    without one.
    """
    rows: list[ResultRow] = []
    for tsel in tq.selectors:
        entries = _collect_entries(tsel, record_root, model)
        if tsel.filter_codes is not None:
            entries = [e for e in entries
                       if tsel.head_concept in e.values
                       and e.values[tsel.head_concept].value in tsel.filter_codes]
        temporal = tsel.selector.temporal
        if temporal.kind == "within":
            if context is None:
                entries = []
            else:
                horizon = context.encounter.date - dt.timedelta(days=temporal.days)
                entries = [e for e in entries
                           if e.instant is not None and e.instant.date >= horizon]
        if temporal.kind == "latest" and entries:
            entries = [max(entries, key=_instant_sort_key)]
        else:
            entries = sorted(entries, key=_instant_sort_key)

        implicit_unit = None
        for m in tsel.members:
            if m.value_kind == "unit-label" and isinstance(m.outcome, ImplicitValue):
                implicit_unit = m.outcome.literal
        unit_concept = next((m.concept_id for m in tsel.members if m.value_kind == "unit-label"), None)

        for entry in entries:
            instant_iso = entry.instant.iso() if entry.instant is not None else None
            entry_unit = implicit_unit
            if unit_concept is not None and unit_concept in entry.values:
                entry_unit = entry.values[unit_concept].value
            for m in tsel.members:
                if m.concept_id not in tq.projection:
                    continue
                if isinstance(m.outcome, Unsupported):
                    continue
                if isinstance(m.outcome, ImplicitValue):
                    if m.outcome.is_rule():
                        continue  # rules handled below, once per selector
                    rows.append(ResultRow(m.concept_id, m.outcome.literal,
                                          None, instant_iso, IMPLICIT_PATH))
                    continue
                hit = entry.values.get(m.concept_id)
                if hit is None:
                    continue
                value = hit.value
                unit = None
                if m.value_kind == "instant":
                    try:
                        value = parse_instant(value, model.instant_format).iso()
                    except (ValueError, IndexError):
                        continue
                elif m.value_kind == "coded":
                    term = model.terminology_for(m.domain)
                    if term is not None:
                        value = f"{term}:{value}"
                elif m.value_kind in ("datum", "scalar"):
                    unit = entry_unit
                rows.append(ResultRow(m.concept_id, value, unit, instant_iso, hit.trace))

        # Selector-level implicit emissions: values that do not repeat per
        # entry (standalone implicit members and contextual rules).
        entry_count = len(entries)
        for m in tsel.members:
            if m.concept_id not in tq.projection:
                continue
            if not isinstance(m.outcome, ImplicitValue):
                continue
            if m.outcome.is_rule():
                if m.outcome.literal == CURRENT_PRACTICE_RULE and context is not None:
                    rows.append(ResultRow(m.concept_id, context.practice_id,
                                          None, None, IMPLICIT_PATH))
                continue
            if entry_count == 0 and len([x for x in tsel.members if isinstance(x.outcome, PathMapping)]) == 0:
                rows.append(ResultRow(m.concept_id, m.outcome.literal, None, None, IMPLICIT_PATH))
    return AnnotatedResultSet(tq.query_id, tq.source_id, tuple(rows))


# Form pre-population ----------------------------------------------------------

@dataclass(frozen=True)
class PreparedField:
    value: str
    unit: str | None
    origin: str  # always "prepopulated" at this layer
    source_path: str
    concept_id: str


@dataclass(frozen=True)
class PrepopulatedForm:
    form_oid: str
    source_id: str
    fields: dict[str, PreparedField]          # item_oid -> field
    manual_reasons: dict[str, str]            # item_oid -> why it was left empty

    @property
    def manual_required(self) -> frozenset[str]:
        return frozenset(self.manual_reasons)


def _best_rows(result: AnnotatedResultSet) -> dict[str, ResultRow]:
    """Last row per concept wins; rows arrive instant-ascending per selector."""
    best: dict[str, ResultRow] = {}
    for row in result.rows:
        best[row.concept_id] = row
    return best


def prepopulate_form(bundle: odm.OdmStudyBundle, form_oid: str, model: SourceModel,
                     record_root, catalog: ConceptCatalog, terminology: TerminologyMap,
                     context: ExecutionContext | None = None) -> PrepopulatedForm:
    """Fill one form's items from a record extract via the bundle's queries.

    Every item ends up either in ``fields`` (with origin "prepopulated" and a
    source path) or in ``manual_reasons``; nothing is silently dropped. No
    unit conversion happens; the unit ends up beside the value exactly as the
    source held (or implied) it.
    """
    form = bundle.form(form_oid)
    fields: dict[str, PreparedField] = {}
    manual: dict[str, str] = {}
    for group in form.item_groups:
        best: dict[str, ResultRow] = {}
        if group.query_id is not None:
            tq = translate_query(bundle.query(group.query_id), model, catalog, terminology)
            best = _best_rows(execute_query(tq, record_root, model, context))
        for item in group.items:
            if item.cdim_alias is None:
                manual[item.oid] = "no concept binding"
                continue
            if not item.cdim_alias.well_formed:
                manual[item.oid] = f"unusable concept alias {item.cdim_alias.concept_id!r}"
                continue
            concept_id = item.cdim_alias.concept_id
            if concept_id not in catalog:
                manual[item.oid] = f"concept {concept_id} not in catalog"
                continue
            if group.query_id is None:
                manual[item.oid] = "group has no extraction query"
                continue
            outcome = model.map_to_source(concept_id)
            if isinstance(outcome, Unsupported):
                manual[item.oid] = "not held by this source"
                continue
            row = best.get(concept_id)
            if row is None:
                manual[item.oid] = "no matching data in record"
                continue
            value = row.value
            if not odm.check_value_lexical(item.data_type, value):
                manual[item.oid] = (f"record value {value!r} does not fit "
                                    f"item type {item.data_type}")
                continue
            fields[item.oid] = PreparedField(value, row.unit, "prepopulated",
                                             row.source_path, concept_id)
    return PrepopulatedForm(form_oid, model.source_id, fields, manual)


# Eligibility evidence backed by a record extract ------------------------------

def floor_age_years(birth: dt.date, on: dt.date) -> int:
    return on.year - birth.year - ((on.month, on.day) < (birth.month, birth.day))


DEFAULT_ACTIVE_DRUG_WINDOW_DAYS = 183


class RecordEvidence:
    """AtomEvaluator over one record extract, via the mediation pipeline.

    "Active drug" means a prescription instant within the configured window
    before the encounter. A criterion concept that cannot be expressed in the
    source's terminology evaluates to False (fail closed) rather than raising;
    screening must not crash on a thin source.
    """

    def __init__(self, record_root, model: SourceModel, catalog: ConceptCatalog,
                 terminology: TerminologyMap, context: ExecutionContext,
                 active_drug_window_days: int = DEFAULT_ACTIVE_DRUG_WINDOW_DAYS):
        self._root = record_root
        self._model = model
        self._catalog = catalog
        self._terminology = terminology
        self._context = context
        self._window = active_drug_window_days
        self.rows_by_atom: dict[tuple, tuple[ResultRow, ...]] = {}

    def _run(self, key: tuple, concept_id: str, code_filter: str | None,
             temporal: odm.Temporal) -> tuple[ResultRow, ...]:
        selector = odm.ConceptSelector(concept_id, code_filter, temporal)
        query = odm.DataExtractionQuery(f"atom:{':'.join(map(str, key))}", (selector,),
                                        (concept_id,))
        try:
            tq = translate_query(query, self._model, self._catalog, self._terminology)
        except UntranslatableFilter:
            self.rows_by_atom[key] = ()
            return ()
        rows = execute_query(tq, self._root, self._model, self._context).rows
        self.rows_by_atom[key] = rows
        return rows

    def has_diagnosis(self, concept_label: str) -> bool:
        rows = self._run(("diagnosis", concept_label), "OGMS/73",
                         concept_label, odm.ALL)
        return bool(rows)

    def has_active_drug(self, concept_label: str) -> bool:
        rows = self._run(("active-drug", concept_label), "CDIM/37",
                         concept_label, odm.Temporal("within", self._window))
        return bool(rows)

    def age_years(self) -> int | None:
        rows = self._run(("age",), "CDIM/7", None, odm.LATEST)
        if not rows:
            return None
        try:
            birth = dt.date.fromisoformat(rows[0].value)
        except ValueError:
            return None
        return floor_age_years(birth, self._context.encounter.date)
