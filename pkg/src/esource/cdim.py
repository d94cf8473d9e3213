"""Clinical concept catalog, per-source data models and code translation.

Three things live here:

* the concept catalog: the closed list of clinical data elements a study form
  may reference, each identified by a ``PREFIX/number`` concept id and grouped
  into families (a measurement's value, instant and unit label are separate
  concepts that belong to one clinical entry);
* source models: one per simulated EHR system, declaring for every catalog
  concept whether it maps to a record path, is supplied as an implicit value
  (the source never stores it but the value is fixed or contextual), or is
  unsupported;
* the terminology map: curated bidirectional code translation between the
  coding systems the sources use natively.

All three are loaded from fixture files shipped with the package so the same
data drives the library, the tests and the conformance checks.
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .recordpath import RecordPath, parse_path

VALUE_KINDS = ("identifier", "coded", "datum", "instant", "unit-label", "scalar")

#: Implicit value prefix marking a contextual rule rather than a literal.
#: "@current-practice" resolves to the practice identifier of the running
#: data node at query time.
RULE_PREFIX = "@"
CURRENT_PRACTICE_RULE = "@current-practice"


class UnknownConcept(KeyError):
    pass


class UnknownSource(KeyError):
    pass


class UnknownTerminology(KeyError):
    pass


_ALIAS_RE = re.compile(r"^\s*(?P<prefix>[A-Za-z]+)\s*[/_]\s*0*(?P<num>\d+)\s*$")


def normalize_concept_id(text: str) -> str:
    """Return the canonical ``PREFIX/number`` form of a concept identifier.

    Accepts both the zero-padded underscore form used in form metadata
    (``CDIM_000073``) and the short form (``CDIM/73``); strips stray spaces
    and leading zeros.  Idempotent.  Raises ValueError for anything else.
    """
    m = _ALIAS_RE.match(text)
    if m is None:
        raise ValueError(f"not a concept identifier: {text!r}")
    return f"{m.group('prefix').upper()}/{int(m.group('num'))}"


@dataclass(frozen=True)
class CdimConcept:
    concept_id: str
    label: str
    value_kind: str
    family_head: str | None = None
    domain: str | None = None

    def __post_init__(self):
        if self.value_kind not in VALUE_KINDS:
            raise ValueError(f"{self.concept_id}: bad value_kind {self.value_kind!r}")


class ConceptCatalog:
    """Closed, ordered list of concepts with family lookups."""

    def __init__(self, concepts: list[CdimConcept]):
        self._by_id: dict[str, CdimConcept] = {}
        for c in concepts:
            if c.concept_id in self._by_id:
                raise ValueError(f"duplicate concept {c.concept_id}")
            self._by_id[c.concept_id] = c
        for c in concepts:
            if c.family_head is not None and c.family_head not in self._by_id:
                raise ValueError(f"{c.concept_id}: unknown family head {c.family_head}")

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self._by_id

    def __iter__(self):
        return iter(self._by_id.values())

    def resolve(self, concept_id: str) -> CdimConcept:
        cid = normalize_concept_id(concept_id)
        try:
            return self._by_id[cid]
        except KeyError:
            raise UnknownConcept(cid) from None

    def family_of(self, concept_id: str) -> list[CdimConcept]:
        """All concepts belonging to the same clinical entry, head first."""
        c = self.resolve(concept_id)
        head = c if c.family_head is None else self.resolve(c.family_head)
        members = [head]
        members += [m for m in self._by_id.values() if m.family_head == head.concept_id]
        return members

    def concept_ids(self) -> list[str]:
        return list(self._by_id)


# Instant handling. Sources disagree about how they write instants; the
# mediator compares and emits them in one canonical shape. A date-only
# instant sorts before any time-bearing instant on the same day.

INSTANT_FORMATS = ("iso", "dmy_slash", "epoch_days")


@dataclass(frozen=True, order=True)
class Instant:
    date: dt.date
    has_time: bool = False
    time: dt.time = dt.time(0, 0)

    def iso(self) -> str:
        if self.has_time:
            return f"{self.date.isoformat()}T{self.time.strftime('%H:%M')}"
        return self.date.isoformat()

    @staticmethod
    def from_date(d: dt.date) -> "Instant":
        return Instant(d)


def parse_instant(text: str, fmt: str) -> Instant:
    """Parse a source-native instant string into the canonical form."""
    text = text.strip()
    if fmt == "iso":
        if "T" in text:
            stamp = dt.datetime.fromisoformat(text)
            return Instant(stamp.date(), True, stamp.time())
        return Instant(dt.date.fromisoformat(text))
    if fmt == "dmy_slash":
        day, month, year = text.split("/")
        return Instant(dt.date(int(year), int(month), int(day)))
    if fmt == "epoch_days":
        return Instant(dt.date(1970, 1, 1) + dt.timedelta(days=int(text)))
    raise ValueError(f"unknown instant format {fmt!r}")


def render_instant(instant: Instant, fmt: str) -> str:
    """Inverse of parse_instant for the date part (used by record renderers)."""
    if fmt == "iso":
        return instant.iso()
    if fmt == "dmy_slash":
        return instant.date.strftime("%d/%m/%Y")
    if fmt == "epoch_days":
        return str((instant.date - dt.date(1970, 1, 1)).days)
    raise ValueError(f"unknown instant format {fmt!r}")


# Mapping outcomes: how one concept is obtained from one source.

@dataclass(frozen=True)
class PathMapping:
    path: RecordPath


@dataclass(frozen=True)
class ImplicitValue:
    literal: str

    def is_rule(self) -> bool:
        return self.literal.startswith(RULE_PREFIX)


@dataclass(frozen=True)
class Unsupported:
    pass


MappingOutcome = PathMapping | ImplicitValue | Unsupported


@dataclass
class SourceModel:
    """Declares how one source system exposes the catalog concepts."""

    source_id: str
    native_terminologies: dict[str, str | None]
    mappings: dict[str, RecordPath]
    implicit_values: dict[str, str]
    unsupported: frozenset[str]
    instant_format: str
    display_name: str = ""

    def __post_init__(self):
        if self.instant_format not in INSTANT_FORMATS:
            raise ValueError(f"{self.source_id}: bad instant_format {self.instant_format!r}")
        mapped = set(self.mappings)
        implicit = set(self.implicit_values)
        unsupported = set(self.unsupported)
        overlap = (mapped & implicit) | (mapped & unsupported) | (implicit & unsupported)
        if overlap:
            raise ValueError(f"{self.source_id}: concepts in more than one bucket: {sorted(overlap)}")

    def covered_concepts(self) -> set[str]:
        return set(self.mappings) | set(self.implicit_values) | set(self.unsupported)

    def map_to_source(self, concept_id: str) -> MappingOutcome:
        cid = normalize_concept_id(concept_id)
        if cid in self.mappings:
            return PathMapping(self.mappings[cid])
        if cid in self.implicit_values:
            return ImplicitValue(self.implicit_values[cid])
        if cid in self.unsupported:
            return Unsupported()
        raise UnknownConcept(cid)

    def terminology_for(self, domain: str | None) -> str | None:
        if domain is None:
            return None
        return self.native_terminologies.get(domain)


class TerminologyMap:
    """Bidirectional code translation over a curated concept list."""

    def __init__(self, terminologies: list[str], concepts: list[dict]):
        self.terminologies = tuple(terminologies)
        self._concepts = concepts
        self._by_label = {c["label"]: c for c in concepts}

    def labels(self) -> list[str]:
        return list(self._by_label)

    def codes_for(self, label: str, terminology: str) -> set[str]:
        """Codes that express concept ``label`` in ``terminology``."""
        if terminology not in self.terminologies:
            raise UnknownTerminology(terminology)
        concept = self._by_label.get(label)
        if concept is None:
            raise UnknownConcept(label)
        return set(concept["codes"].get(terminology, ()))

    def translate_code(self, code: str, from_terminology: str, to_terminology: str) -> set[str]:
        """All codes in the target terminology with the same meaning.

        Identity when source and target coincide; empty set when the code is
        unknown or the mapping has no entry for the target.
        """
        for t in (from_terminology, to_terminology):
            if t not in self.terminologies:
                raise UnknownTerminology(t)
        if from_terminology == to_terminology:
            return {code}
        out: set[str] = set()
        for concept in self._concepts:
            if code in concept["codes"].get(from_terminology, ()):
                out |= set(concept["codes"].get(to_terminology, ()))
        return out

    def label_of(self, code: str, terminology: str) -> str | None:
        for concept in self._concepts:
            if code in concept["codes"].get(terminology, ()):
                return concept["label"]
        return None


# Fixture loading -----------------------------------------------------------

def _fixture_path(*parts: str):
    return resources.files("esource").joinpath("fixtures", *parts)


def fixture_text(*parts: str) -> str:
    return _fixture_path(*parts).read_text(encoding="utf-8")


def load_catalog() -> ConceptCatalog:
    data = json.loads(fixture_text("cdim_catalog.json"))
    return ConceptCatalog([CdimConcept(**row) for row in data["concepts"]])


def load_source_model(source_id: str) -> SourceModel:
    try:
        data = json.loads(fixture_text("sources", f"{source_id}.dsm.json"))
    except FileNotFoundError:
        raise UnknownSource(source_id) from None
    return SourceModel(
        source_id=data["source_id"],
        display_name=data.get("display_name", ""),
        instant_format=data["instant_format"],
        native_terminologies=data["native_terminologies"],
        mappings={normalize_concept_id(k): parse_path(v) for k, v in data["mappings"].items()},
        implicit_values={normalize_concept_id(k): v for k, v in data["implicit_values"].items()},
        unsupported=frozenset(normalize_concept_id(c) for c in data["unsupported"]),
    )


KNOWN_SOURCE_IDS = ("asseco", "vision", "transhis")


def load_all_source_models() -> dict[str, SourceModel]:
    return {sid: load_source_model(sid) for sid in KNOWN_SOURCE_IDS}


def load_terminology_map() -> TerminologyMap:
    data = json.loads(fixture_text("terminology_map.json"))
    return TerminologyMap(data["terminologies"], data["concepts"])


# Coverage matrix conformance ------------------------------------------------

@dataclass(frozen=True)
class CoverageCell:
    concept_id: str
    label: str
    flag: str  # "Y", "Y/<terminology>", "N" or "[literal]"


def load_coverage_matrix() -> dict[str, dict[str, CoverageCell]]:
    """source_id -> concept_id -> expected coverage cell."""
    lines = fixture_text("coverage_matrix.tsv").splitlines()
    header = lines[0].split("\t")
    source_ids = header[2:]
    matrix: dict[str, dict[str, CoverageCell]] = {sid: {} for sid in source_ids}
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split("\t")
        cid = normalize_concept_id(cells[0])
        for sid, flag in zip(source_ids, cells[2:]):
            matrix[sid][cid] = CoverageCell(cid, cells[1], flag.strip())
    return matrix


def check_coverage_conformance(model: SourceModel, catalog: ConceptCatalog,
                               expected: dict[str, CoverageCell]) -> list[str]:
    """Compare a source model against the shipped coverage matrix cell by cell.

    Returns a list of human-readable discrepancies; empty means conformant.
    """
    problems = []
    for concept in catalog:
        cid = concept.concept_id
        cell = expected.get(cid)
        if cell is None:
            problems.append(f"{cid}: missing from coverage matrix")
            continue
        outcome = model.map_to_source(cid)
        flag = cell.flag
        if flag.startswith("[") and flag.endswith("]"):
            literal = flag[1:-1]
            if not isinstance(outcome, ImplicitValue):
                problems.append(f"{cid}: expected implicit {literal!r}, model says {type(outcome).__name__}")
            elif outcome.literal != literal:
                problems.append(f"{cid}: implicit literal {outcome.literal!r} != expected {literal!r}")
        elif flag == "N":
            if not isinstance(outcome, Unsupported):
                problems.append(f"{cid}: expected unsupported, model says {type(outcome).__name__}")
        elif flag.startswith("Y"):
            if not isinstance(outcome, PathMapping):
                problems.append(f"{cid}: expected path mapping, model says {type(outcome).__name__}")
            elif "/" in flag:
                want_term = flag.split("/", 1)[1]
                have_term = model.terminology_for(concept.domain)
                if have_term != want_term:
                    problems.append(f"{cid}: terminology {have_term!r} != expected {want_term!r}")
        else:
            problems.append(f"{cid}: unreadable coverage flag {flag!r}")
    extra = model.covered_concepts() - {c.concept_id for c in catalog}
    for cid in sorted(extra):
        problems.append(f"{cid}: model covers a concept absent from the catalog")
    missing = {c.concept_id for c in catalog} - model.covered_concepts()
    for cid in sorted(missing):
        problems.append(f"{cid}: model leaves a catalog concept unclassified")
    return problems
