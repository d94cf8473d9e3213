"""Boolean eligibility criterion trees distributed with study protocols.

Atoms are deliberately few: diagnosis on record, active prescription, and age
bounds. Composite nodes are And/Or/Not. Trees are carried inside the study
bundle's extension block, so they serialize to and from XML alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol


@dataclass(frozen=True)
class HasDiagnosis:
    concept_label: str


@dataclass(frozen=True)
class HasActiveDrug:
    concept_label: str


@dataclass(frozen=True)
class AgeAtLeast:
    years: int


@dataclass(frozen=True)
class AgeBelow:
    years: int


@dataclass(frozen=True)
class And:
    terms: tuple["Criterion", ...]


@dataclass(frozen=True)
class Or:
    terms: tuple["Criterion", ...]


@dataclass(frozen=True)
class Not:
    term: "Criterion"


Criterion = HasDiagnosis | HasActiveDrug | AgeAtLeast | AgeBelow | And | Or | Not
ATOM_TYPES = (HasDiagnosis, HasActiveDrug, AgeAtLeast, AgeBelow)


@dataclass(frozen=True)
class EligibilityCriterion:
    """A named criterion tree attached to a study."""

    criterion_id: str
    expression: Criterion


class AtomEvaluator(Protocol):
    """Answers the atomic questions against one patient's evidence."""

    def has_diagnosis(self, concept_label: str) -> bool: ...

    def has_active_drug(self, concept_label: str) -> bool: ...

    def age_years(self) -> int | None: ...


@dataclass
class AtomResult:
    atom: Criterion
    value: bool


def evaluate(expr: Criterion, evidence: AtomEvaluator,
             trail: list[AtomResult] | None = None) -> bool:
    """Evaluate a criterion tree; optionally collect per-atom outcomes.

    An unknown age (no birth instant on record) fails age atoms closed: a
    patient who cannot be shown eligible is not flagged.
    """
    if isinstance(expr, And):
        results = [evaluate(t, evidence, trail) for t in expr.terms]
        return all(results)
    if isinstance(expr, Or):
        results = [evaluate(t, evidence, trail) for t in expr.terms]
        return any(results)
    if isinstance(expr, Not):
        return not evaluate(expr.term, evidence, trail)
    if isinstance(expr, HasDiagnosis):
        value = evidence.has_diagnosis(expr.concept_label)
    elif isinstance(expr, HasActiveDrug):
        value = evidence.has_active_drug(expr.concept_label)
    elif isinstance(expr, AgeAtLeast):
        age = evidence.age_years()
        value = age is not None and age >= expr.years
    elif isinstance(expr, AgeBelow):
        age = evidence.age_years()
        value = age is not None and age < expr.years
    else:
        raise TypeError(f"not a criterion node: {expr!r}")
    if trail is not None:
        trail.append(AtomResult(expr, value))
    return value


def atoms_of(expr: Criterion) -> list[Criterion]:
    """All atoms in the tree, in definition order."""
    if isinstance(expr, (And, Or)):
        out: list[Criterion] = []
        for t in expr.terms:
            out.extend(atoms_of(t))
        return out
    if isinstance(expr, Not):
        return atoms_of(expr.term)
    return [expr]
