"""Tiny absolute-path language for addressing fields inside source record XML.

Source models describe where a clinical concept lives in a vendor record with
expressions such as::

    /pacjent/pomiary/pomiar[@typ='waga']/wartosc
    /patientRecord/clinical/code[@class='diagnosis']/@read

Grammar: ``/seg(/seg)*`` where ``seg`` is an element name optionally followed
by a single ``[@attr='value']`` predicate; the final segment may instead be a
``@attr`` value selector.  The addressed value is either the text content of
the last element or the named attribute.  This is deliberately not XPath:
record schemas are flat enough that a closed grammar keeps source models
reviewable and evaluation behaviour obvious.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from xml.etree import ElementTree as ET


class PathSyntaxError(ValueError):
    """Raised when a path expression does not match the grammar."""


class PathEvaluationError(RuntimeError):
    """Raised when a path cannot apply to a document of this shape at all.

    Absence of data is not an error (an empty hit list is returned); a root
    element of the wrong name signals a source model applied to the wrong
    schema and is.
    """


_STEP_RE = re.compile(
    r"^(?P<name>[A-Za-z_][\w.\-]*)"
    r"(?:\[@(?P<pattr>[A-Za-z_][\w.\-]*)='(?P<pval>[^']*)'\])?$"
)
_ATTR_RE = re.compile(r"^@(?P<name>[A-Za-z_][\w.\-]*)$")


@dataclass(frozen=True)
class Step:
    name: str
    pred_attr: str | None = None
    pred_value: str | None = None

    def matches(self, elem: ET.Element) -> bool:
        if elem.tag != self.name:
            return False
        if self.pred_attr is None:
            return True
        return elem.get(self.pred_attr) == self.pred_value

    def render(self) -> str:
        if self.pred_attr is None:
            return self.name
        return f"{self.name}[@{self.pred_attr}='{self.pred_value}']"


@dataclass(frozen=True)
class PathHit:
    """One value located by a path.

    ``entry_key`` is the chain of document-order indexes of the matched
    elements, one per step.  Hits from different paths that share a step
    prefix can be correlated by comparing ``entry_key`` prefixes, and the
    chain orders hits by record sequence.
    """

    value: str
    trace: str
    entry_key: tuple[int, ...]


@dataclass(frozen=True)
class RecordPath:
    steps: tuple[Step, ...]
    attr: str | None
    raw: str

    def __str__(self) -> str:  # pragma: no cover - debugging aid
        return self.raw

    def evaluate(self, root: ET.Element) -> list[PathHit]:
        """Locate every value this path addresses in ``root``.

        Returns hits in document order.  Raises PathEvaluationError when the
        root element name does not match the first step.
        """
        first = self.steps[0]
        if root.tag != first.name:
            raise PathEvaluationError(
                f"path {self.raw!r} expects root <{first.name}>, document has <{root.tag}>"
            )
        if not first.matches(root):
            return []
        frontier: list[tuple[ET.Element, tuple[int, ...], str]] = [
            (root, (0,), "/" + first.render())
        ]
        for step in self.steps[1:]:
            nxt = []
            for elem, key, trace in frontier:
                idx = 0
                for child in elem:
                    if child.tag != step.name:
                        continue
                    idx += 1
                    if step.matches(child):
                        nxt.append((child, key + (idx,), f"{trace}/{step.name}[{idx}]"))
            frontier = nxt
        hits = []
        for elem, key, trace in frontier:
            if self.attr is not None:
                value = elem.get(self.attr)
                if value is None:
                    continue
                hits.append(PathHit(value, f"{trace}/@{self.attr}", key))
            else:
                text = (elem.text or "").strip()
                if not text:
                    continue
                hits.append(PathHit(text, trace, key))
        return hits


def parse_path(text: str) -> RecordPath:
    if not text.startswith("/"):
        raise PathSyntaxError(f"path must be absolute: {text!r}")
    parts = text.split("/")[1:]
    if not parts or any(p == "" for p in parts):
        raise PathSyntaxError(f"empty path segment in {text!r}")
    attr = None
    last = _ATTR_RE.match(parts[-1])
    if last:
        attr = last.group("name")
        parts = parts[:-1]
        if not parts:
            raise PathSyntaxError(f"attribute selector needs an element path: {text!r}")
    steps = []
    for part in parts:
        m = _STEP_RE.match(part)
        if m is None:
            raise PathSyntaxError(f"bad path segment {part!r} in {text!r}")
        steps.append(Step(m.group("name"), m.group("pattr"), m.group("pval")))
    return RecordPath(tuple(steps), attr, text)


def common_step_prefix(paths: list[RecordPath]) -> int:
    """Number of leading steps shared by all paths (for entry correlation)."""
    if not paths:
        return 0
    shortest = min(len(p.steps) for p in paths)
    n = 0
    for i in range(shortest):
        step = paths[0].steps[i]
        if all(p.steps[i] == step for p in paths):
            n = i + 1
        else:
            break
    return n
