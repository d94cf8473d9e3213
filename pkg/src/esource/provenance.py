"""Lineage recording and verification for the form lifecycle.

The graph follows the classic provenance triple: artifacts (named payloads,
identified by content digest), processes (one of six lifecycle kinds), agents
(who controlled the process). Edges are used / wasGeneratedBy /
wasControlledBy. Components keep their own partial graphs; a submission
travels with the exported lines of its local chain and the receiving side
merges them, stitching on shared artifact ids and digests.

Acyclicity is enforced by construction: a process may only consume artifacts
that already exist and only generate artifacts that do not.

Export format (one JSON object per line, see docs/provenance.md):
  {"t": "agent", "id": ..., "role": ...}
  {"t": "artifact", "id": ..., "digest": ..., "kind": ...}
  {"t": "process", "id": ..., "kind": ..., "agent": ..., "at": ...}
  {"t": "used", "process": ..., "artifact": ...}
  {"t": "generated", "artifact": ..., "process": ...}
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field

PROCESS_KINDS = ("Sync", "Screen", "Prepopulate", "Edit", "Submit", "Ingest")
AGENT_ROLES = ("dnc", "tss", "clinician", "patient")


class UnknownArtifact(KeyError):
    pass


def digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class Artifact:
    artifact_id: str
    digest: str
    kind: str


@dataclass(frozen=True)
class Process:
    process_id: str
    kind: str
    agent_id: str
    at: str


@dataclass(frozen=True)
class Agent:
    agent_id: str
    role: str


@dataclass(frozen=True)
class Lineage:
    """Ancestor closure of one artifact."""

    artifacts: tuple[Artifact, ...]
    processes: tuple[Process, ...]

    def process_kinds(self) -> set[str]:
        return {p.kind for p in self.processes}

    def artifact_kinds(self) -> set[str]:
        return {a.kind for a in self.artifacts}


class ProvenanceGraph:
    def __init__(self):
        self._agents: dict[str, Agent] = {}
        self._artifacts: dict[str, Artifact] = {}
        self._processes: dict[str, Process] = {}
        self._used: list[tuple[str, str]] = []        # (process_id, artifact_id)
        self._generated: list[tuple[str, str]] = []   # (artifact_id, process_id)
        self._used_seen: set[tuple[str, str]] = set()
        self._generated_seen: set[tuple[str, str]] = set()
        self._lock = threading.RLock()

    # Node accessors ------------------------------------------------------------

    def artifact(self, artifact_id: str) -> Artifact:
        try:
            return self._artifacts[artifact_id]
        except KeyError:
            raise UnknownArtifact(artifact_id) from None

    def has_artifact(self, artifact_id: str) -> bool:
        return artifact_id in self._artifacts

    def ensure_agent(self, agent_id: str, role: str) -> Agent:
        if role not in AGENT_ROLES:
            raise ValueError(f"unknown agent role {role!r}")
        with self._lock:
            existing = self._agents.get(agent_id)
            if existing is not None:
                if existing.role != role:
                    raise ValueError(f"agent {agent_id} already registered as {existing.role}")
                return existing
            agent = Agent(agent_id, role)
            self._agents[agent_id] = agent
            return agent

    def add_root_artifact(self, artifact_id: str, payload: bytes, kind: str) -> Artifact:
        """Register an artifact with no generating process (e.g. a protocol)."""
        with self._lock:
            return self._new_artifact(artifact_id, digest_bytes(payload), kind)

    def _new_artifact(self, artifact_id: str, digest: str, kind: str) -> Artifact:
        existing = self._artifacts.get(artifact_id)
        if existing is not None:
            if existing.digest != digest or existing.kind != kind:
                raise ValueError(f"artifact {artifact_id} already exists with different content")
            return existing
        a = Artifact(artifact_id, digest, kind)
        self._artifacts[artifact_id] = a
        return a

    # Recording -----------------------------------------------------------------

    def record_activity(self, kind: str, agent_id: str, at: str,
                        inputs: list[str],
                        outputs: list[tuple[str, bytes | str, str]]) -> Process:
        """Extend the graph with one process atomically.

        ``outputs`` entries are (artifact_id, payload bytes or precomputed
        digest, artifact kind); they become new Artifact nodes. Empty outputs
        are legal (a screening that produced nothing to keep).
        """
        if kind not in PROCESS_KINDS:
            raise ValueError(f"unknown process kind {kind!r}")
        with self._lock:
            if agent_id not in self._agents:
                raise ValueError(f"agent {agent_id} not registered")
            for artifact_id in inputs:
                if artifact_id not in self._artifacts:
                    raise UnknownArtifact(artifact_id)
            resolved = [(artifact_id,
                         payload if isinstance(payload, str) else digest_bytes(payload),
                         artifact_kind)
                        for artifact_id, payload, artifact_kind in outputs]
            for artifact_id, _, _ in resolved:
                if artifact_id in self._artifacts:
                    raise ValueError(f"output artifact {artifact_id} already exists")
            # Process ids are content-derived so that graphs recorded on
            # different machines merge without renaming and identical replays
            # land on the same node.
            fingerprint = hashlib.sha256(json.dumps(
                [kind, agent_id, at, sorted(inputs), sorted(resolved)],
                separators=(",", ":")).encode("utf-8")).hexdigest()[:12]
            process = Process(f"proc-{fingerprint}:{kind.lower()}", kind, agent_id, at)
            self._processes[process.process_id] = process
            for artifact_id in inputs:
                self._add_used(process.process_id, artifact_id)
            for artifact_id, digest, artifact_kind in resolved:
                self._new_artifact(artifact_id, digest, artifact_kind)
                self._add_generated(artifact_id, process.process_id)
            return process

    def _add_used(self, process_id: str, artifact_id: str) -> None:
        key = (process_id, artifact_id)
        if key not in self._used_seen:
            self._used_seen.add(key)
            self._used.append(key)

    def _add_generated(self, artifact_id: str, process_id: str) -> None:
        key = (artifact_id, process_id)
        if key not in self._generated_seen:
            self._generated_seen.add(key)
            self._generated.append(key)

    # Queries -------------------------------------------------------------------

    def lineage_of(self, artifact_id: str) -> Lineage:
        with self._lock:
            if artifact_id not in self._artifacts:
                raise UnknownArtifact(artifact_id)
            generated_by: dict[str, list[str]] = {}
            for a_id, p_id in self._generated:
                generated_by.setdefault(a_id, []).append(p_id)
            used_by_process: dict[str, list[str]] = {}
            for p_id, a_id in self._used:
                used_by_process.setdefault(p_id, []).append(a_id)
            seen_artifacts: dict[str, Artifact] = {}
            seen_processes: dict[str, Process] = {}
            stack = [artifact_id]
            while stack:
                current = stack.pop()
                if current in seen_artifacts:
                    continue
                seen_artifacts[current] = self._artifacts[current]
                for p_id in generated_by.get(current, []):
                    if p_id not in seen_processes:
                        seen_processes[p_id] = self._processes[p_id]
                        stack.extend(used_by_process.get(p_id, []))
            return Lineage(tuple(seen_artifacts.values()), tuple(seen_processes.values()))

    def is_acyclic(self) -> bool:
        """Sanity check over wasGeneratedBy∘used composition (tests only)."""
        edges: dict[str, set[str]] = {}
        for p_id, a_id in self._used:
            for out_id, gen_p in self._generated:
                if gen_p == p_id:
                    edges.setdefault(a_id, set()).add(out_id)
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {a: WHITE for a in self._artifacts}

        def visit(node: str) -> bool:
            color[node] = GRAY
            for nxt in edges.get(node, ()):
                if color[nxt] == GRAY:
                    return False
                if color[nxt] == WHITE and not visit(nxt):
                    return False
            color[node] = BLACK
            return True

        return all(visit(a) for a in self._artifacts if color[a] == WHITE)

    # Export / merge --------------------------------------------------------------

    def export_lines(self) -> list[str]:
        with self._lock:
            lines = []
            for agent in self._agents.values():
                lines.append(json.dumps({"t": "agent", "id": agent.agent_id,
                                         "role": agent.role}, sort_keys=True))
            for a in self._artifacts.values():
                lines.append(json.dumps({"t": "artifact", "id": a.artifact_id,
                                         "digest": a.digest, "kind": a.kind}, sort_keys=True))
            for p in self._processes.values():
                lines.append(json.dumps({"t": "process", "id": p.process_id,
                                         "kind": p.kind, "agent": p.agent_id,
                                         "at": p.at}, sort_keys=True))
            for p_id, a_id in self._used:
                lines.append(json.dumps({"t": "used", "process": p_id,
                                         "artifact": a_id}, sort_keys=True))
            for a_id, p_id in self._generated:
                lines.append(json.dumps({"t": "generated", "artifact": a_id,
                                         "process": p_id}, sort_keys=True))
            return lines

    def export_lineage_lines(self, artifact_id: str) -> list[str]:
        """Export only the ancestor closure of one artifact (shipped with it)."""
        lineage = self.lineage_of(artifact_id)
        keep_artifacts = {a.artifact_id for a in lineage.artifacts}
        keep_processes = {p.process_id for p in lineage.processes}
        with self._lock:
            lines = []
            agent_ids = {p.agent_id for p in lineage.processes}
            for agent_id in sorted(agent_ids):
                agent = self._agents[agent_id]
                lines.append(json.dumps({"t": "agent", "id": agent.agent_id,
                                         "role": agent.role}, sort_keys=True))
            for a in lineage.artifacts:
                lines.append(json.dumps({"t": "artifact", "id": a.artifact_id,
                                         "digest": a.digest, "kind": a.kind}, sort_keys=True))
            for p in lineage.processes:
                lines.append(json.dumps({"t": "process", "id": p.process_id,
                                         "kind": p.kind, "agent": p.agent_id,
                                         "at": p.at}, sort_keys=True))
            for p_id, a_id in self._used:
                if p_id in keep_processes and a_id in keep_artifacts:
                    lines.append(json.dumps({"t": "used", "process": p_id,
                                             "artifact": a_id}, sort_keys=True))
            for a_id, p_id in self._generated:
                if p_id in keep_processes and a_id in keep_artifacts:
                    lines.append(json.dumps({"t": "generated", "artifact": a_id,
                                             "process": p_id}, sort_keys=True))
            return lines

    def merge_lines(self, lines: list[str]) -> None:
        """Merge exported lines; identical re-imports are idempotent.

        A line naming an existing node with different content is a conflict
        (the graphs disagree about history) and raises ValueError.
        """
        with self._lock:
            for line in lines:
                entry = json.loads(line)
                t = entry["t"]
                if t == "agent":
                    self.ensure_agent(entry["id"], entry["role"])
                elif t == "artifact":
                    self._new_artifact(entry["id"], entry["digest"], entry["kind"])
                elif t == "process":
                    existing = self._processes.get(entry["id"])
                    incoming = Process(entry["id"], entry["kind"], entry["agent"], entry["at"])
                    if existing is not None:
                        if existing != incoming:
                            raise ValueError(f"process {entry['id']} conflicts on merge")
                        continue
                    if entry["agent"] not in self._agents:
                        raise ValueError(f"process {entry['id']} merged before its agent")
                    self._processes[entry["id"]] = incoming
                elif t == "used":
                    if entry["process"] not in self._processes:
                        raise ValueError("used-edge merged before its process")
                    if entry["artifact"] not in self._artifacts:
                        raise UnknownArtifact(entry["artifact"])
                    self._add_used(entry["process"], entry["artifact"])
                elif t == "generated":
                    if entry["process"] not in self._processes:
                        raise ValueError("generated-edge merged before its process")
                    if entry["artifact"] not in self._artifacts:
                        raise UnknownArtifact(entry["artifact"])
                    self._add_generated(entry["artifact"], entry["process"])
                else:
                    raise ValueError(f"unknown line type {t!r}")


# Submission chain verification --------------------------------------------------

@dataclass(frozen=True)
class VerificationResult:
    ok: bool
    findings: tuple[str, ...] = ()


@dataclass
class SubmissionEvidence:
    """Everything the repository holds about one ingested submission."""

    document_artifact_id: str
    stored_document: bytes
    prepared_snapshot: dict | None = None     # canonical snapshot dict, or None
    absence_notes: dict[str, str] = field(default_factory=dict)  # kind -> why absent


def canonical_snapshot_bytes(form_oid: str, fields: dict[str, tuple[str, str | None]],
                             manual: set[str]) -> bytes:
    """Canonical encoding of a prepared form used for digest stitching."""
    return json.dumps({
        "form_oid": form_oid,
        "fields": {oid: [value, unit] for oid, (value, unit) in sorted(fields.items())},
        "manual": sorted(manual),
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")


def verify_submission_chain(graph: ProvenanceGraph, evidence: SubmissionEvidence,
                            submitted_fields: list[tuple[str, str, str]]) -> VerificationResult:
    """Check one stored submission against its lineage.

    ``submitted_fields`` is (item_oid, value, origin) per stored field. The
    check is three-part: stored bytes match the recorded digest; the chain
    covers all six process kinds unless a note explains the gap; every field
    marked prepopulated matches the Prepopulate output snapshot, every edited
    field has a snapshot value it departed from plus an Edit process, and
    manual fields never appear among the snapshot's filled items.
    """
    findings: list[str] = []
    try:
        artifact = graph.artifact(evidence.document_artifact_id)
    except UnknownArtifact:
        return VerificationResult(False, (f"UnknownArtifact: {evidence.document_artifact_id}",))
    if digest_bytes(evidence.stored_document) != artifact.digest:
        findings.append("DigestMismatch: stored document does not hash to the recorded digest")
    lineage = graph.lineage_of(evidence.document_artifact_id)
    kinds = lineage.process_kinds()
    for kind in PROCESS_KINDS:
        if kind not in kinds and kind not in evidence.absence_notes:
            findings.append(f"MissingProcess: {kind} absent from chain with no absence note")

    snapshot_fields: dict[str, list] = {}
    snapshot_manual: set[str] = set()
    if evidence.prepared_snapshot is not None:
        snapshot = evidence.prepared_snapshot
        snapshot_fields = dict(snapshot.get("fields", {}))
        snapshot_manual = set(snapshot.get("manual", []))
        payload = canonical_snapshot_bytes(
            snapshot["form_oid"],
            {oid: (v[0], v[1]) for oid, v in snapshot_fields.items()},
            snapshot_manual)
        snapshot_digest = digest_bytes(payload)
        prepared_ids = {a.artifact_id for a in lineage.artifacts if a.kind == "prepared-form"}
        if not any(graph.artifact(a_id).digest == snapshot_digest for a_id in prepared_ids):
            findings.append("SnapshotMismatch: prepared snapshot does not hash to any "
                            "prepared-form artifact in the chain")
    elif "Prepopulate" not in evidence.absence_notes:
        findings.append("MissingSnapshot: no prepared snapshot and no Prepopulate absence note")

    for item_oid, value, origin in submitted_fields:
        snap = snapshot_fields.get(item_oid)
        if origin == "prepopulated":
            if snap is None:
                findings.append(f"UnexplainedChange: {item_oid} marked prepopulated "
                                "but absent from the prepared snapshot")
            elif snap[0] != value:
                findings.append(f"UnexplainedChange: {item_oid} marked prepopulated "
                                f"but value differs from the prepared output")
        elif origin == "edited":
            if snap is None:
                findings.append(f"UnexplainedChange: {item_oid} marked edited "
                                "but was never prepopulated")
            elif snap[0] == value:
                findings.append(f"UnexplainedChange: {item_oid} marked edited "
                                "but equals the prepared output")
            if "Edit" not in kinds:
                findings.append(f"UnexplainedChange: {item_oid} edited without an Edit process")
        elif origin == "manual":
            if snap is not None:
                findings.append(f"UnexplainedChange: {item_oid} marked manual "
                                "but the prepared snapshot filled it")
    return VerificationResult(not findings, tuple(findings))
