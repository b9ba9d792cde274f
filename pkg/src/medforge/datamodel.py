"""Shared domain types, their canonical serialized form, and validation.

Every dataset artifact in the toolkit is a UTF-8 line-delimited record file
(one JSON object per line) with a fixed, canonical field order. Canonical
here means: ``write(read(write(s))) == write(s)`` byte for byte, for any
valid sample. Optional fields are omitted when empty, keys appear in the
order defined by each type's ``to_record``, and JSON is emitted compact
with ``ensure_ascii=False``.

All types are immutable value objects after construction and safe to share
between concurrent tasks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .errors import RecordParseError, SampleValidationError

HASH_HEX_LEN = 64  # sha-256


class Role(str, Enum):
    PATIENT = "patient"
    DOCTOR = "doctor"
    SYSTEM = "system"


class Source(str, Enum):
    MEDDIALOG = "meddialog"
    CMEDQA2 = "cmedqa2"
    KGQA = "kgqa"
    PREFERENCE = "preference"
    MEDMCQA = "medmcqa"
    GENERAL = "general"


class StageTag(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


class McqSubset(str, Enum):
    MLEC_CLINIC = "mlec_clinic"
    MLEC_CWM = "mlec_cwm"
    MLEC_PUBLICHEALTH = "mlec_publichealth"
    MLEC_STOMATOLOGY = "mlec_stomatology"
    MLEC_TCM = "mlec_tcm"
    NEEP306 = "neep306"


class EvalSource(str, Enum):
    CMB_CLIN = "cmb_clin"
    CMD = "cmd"
    CMID = "cmid"


# Group keys for consultation cases: six hospital departments for the
# department-grouped set, four query intents for the intent-grouped set.
CMD_DEPARTMENTS = (
    "internal_medicine",
    "surgery",
    "pediatrics",
    "andrology",
    "gynecology",
    "oncology",
)
CMID_CATEGORIES = ("symptoms", "treatment", "medication", "others")

ABILITIES = ("domain_knowledge", "behavioral_pattern", "dialogue_ability", "human_preference")


def canonical_json(record: Mapping) -> str:
    """Serialize a record dict exactly as it is ordered, compactly."""
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def is_hex_digest(value: str) -> bool:
    if len(value) != HASH_HEX_LEN:
        return False
    try:
        int(value, 16)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class Turn:
    """One utterance in a dialogue.

    ``meta`` carries optional string annotations (e.g. detected entities);
    it is serialized only when non-empty.
    """

    role: Role
    content: str
    meta: Mapping[str, str] = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {"role": self.role.value, "content": self.content}
        if self.meta:
            rec["meta"] = {k: self.meta[k] for k in sorted(self.meta)}
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "Turn":
        return cls(role=Role(rec["role"]), content=rec["content"], meta=dict(rec.get("meta", {})))


@dataclass(frozen=True)
class PipelineStep:
    """One generation step applied to a sample, with request/response hashes."""

    step_name: str
    backend_id: str
    prompt_hash: str
    response_hash: str
    timestamp: float

    def to_record(self) -> dict:
        return {
            "step_name": self.step_name,
            "backend_id": self.backend_id,
            "prompt_hash": self.prompt_hash,
            "response_hash": self.response_hash,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PipelineStep":
        return cls(
            step_name=rec["step_name"],
            backend_id=rec["backend_id"],
            prompt_hash=rec["prompt_hash"],
            response_hash=rec["response_hash"],
            timestamp=float(rec["timestamp"]),
        )


@dataclass(frozen=True)
class ProvenanceRecord:
    """Audit trail of how a sample was produced.

    Rewriting pipelines never invent content silently: every backend call
    leaves a step with prompt/response hashes, and human edits flip
    ``human_edited``.
    """

    origin_record_id: str | None = None
    pipeline_steps: tuple[PipelineStep, ...] = ()
    human_edited: bool = False

    def to_record(self) -> dict:
        rec: dict = {}
        if self.origin_record_id is not None:
            rec["origin_record_id"] = self.origin_record_id
        rec["pipeline_steps"] = [s.to_record() for s in self.pipeline_steps]
        rec["human_edited"] = self.human_edited
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "ProvenanceRecord":
        return cls(
            origin_record_id=rec.get("origin_record_id"),
            pipeline_steps=tuple(PipelineStep.from_record(s) for s in rec.get("pipeline_steps", [])),
            human_edited=bool(rec.get("human_edited", False)),
        )


@dataclass(frozen=True)
class DialogueSample:
    """One multi-turn doctor/patient conversation with provenance.

    Single-turn QA is represented as a 2-turn sample (patient, doctor) so
    every corpus component shares one type.
    """

    id: str
    source: Source
    turns: tuple[Turn, ...]
    stage_tag: StageTag
    provenance: ProvenanceRecord = field(default_factory=ProvenanceRecord)
    department: str | None = None

    def to_record(self) -> dict:
        rec: dict = {"id": self.id, "source": self.source.value}
        if self.department is not None:
            rec["department"] = self.department
        rec["stage_tag"] = self.stage_tag.value
        rec["turns"] = [t.to_record() for t in self.turns]
        rec["provenance"] = self.provenance.to_record()
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "DialogueSample":
        return cls(
            id=rec["id"],
            source=Source(rec["source"]),
            department=rec.get("department"),
            stage_tag=StageTag(rec["stage_tag"]),
            turns=tuple(Turn.from_record(t) for t in rec["turns"]),
            provenance=ProvenanceRecord.from_record(rec.get("provenance", {})),
        )

    def doctor_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role is Role.DOCTOR]

    def patient_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role is Role.PATIENT]

    def rounds(self) -> int:
        return len(self.doctor_turns())


@dataclass(frozen=True)
class Violation:
    """A failed datamodel invariant; data, not an exception."""

    invariant: str
    message: str
    turn_index: int | None = None

    def __str__(self) -> str:
        where = f" (turn {self.turn_index})" if self.turn_index is not None else ""
        return f"{self.invariant}{where}: {self.message}"


def validate_sample(sample: DialogueSample) -> list[Violation]:
    """Check every DialogueSample invariant; empty list iff all hold.

    Checks: non-empty turn list, non-blank contents, strict patient/doctor
    alternation after an optional leading system turn, doctor-final turn,
    nondecreasing provenance timestamps and well-formed step hashes.
    """
    violations: list[Violation] = []
    if not sample.id or not sample.id.strip():
        violations.append(Violation("sample_id", "id is empty"))
    if not sample.turns:
        violations.append(Violation("turns_nonempty", "sample has no turns"))
        return violations

    for i, turn in enumerate(sample.turns):
        if not turn.content.strip():
            violations.append(Violation("turn_content", "content empty after trimming", i))

    body = list(sample.turns)
    offset = 0
    if body and body[0].role is Role.SYSTEM:
        body = body[1:]
        offset = 1
    if not body:
        violations.append(Violation("turns_nonempty", "only a system turn present"))
        return violations

    for i, turn in enumerate(body):
        if turn.role is Role.SYSTEM:
            violations.append(Violation("system_leading_only", "system turn after dialogue start", i + offset))
        else:
            expected = Role.PATIENT if i % 2 == 0 else Role.DOCTOR
            if turn.role is not expected:
                violations.append(
                    Violation(
                        "turn_alternation",
                        f"expected {expected.value}, found {turn.role.value}",
                        i + offset,
                    )
                )
    if body[-1].role is not Role.DOCTOR:
        violations.append(Violation("final_turn_doctor", f"final turn is {body[-1].role.value}"))

    steps = sample.provenance.pipeline_steps
    for j, step in enumerate(steps):
        if not is_hex_digest(step.prompt_hash) or not is_hex_digest(step.response_hash):
            violations.append(
                Violation("provenance_hashes", f"step {step.step_name!r} hash is not a {HASH_HEX_LEN}-char hex digest")
            )
        if j > 0 and step.timestamp < steps[j - 1].timestamp:
            violations.append(
                Violation("provenance_timestamps", f"step {step.step_name!r} timestamp decreases")
            )
    return violations


def read_dataset(path: str | Path) -> list[DialogueSample]:
    """Read a line-delimited sample file, enforcing per-sample invariants
    and id uniqueness within the file."""
    path = Path(path)
    samples: list[DialogueSample] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = DialogueSample.from_record(rec)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordParseError(str(path), line_no, f"malformed record: {exc}") from exc
            violations = validate_sample(sample)
            if violations:
                raise SampleValidationError(sample.id, violations)
            if sample.id in seen:
                raise SampleValidationError(sample.id, [Violation("id_unique", "duplicate id in file")])
            seen.add(sample.id)
            samples.append(sample)
    return samples


def write_dataset(samples: Iterable[DialogueSample], path: str | Path) -> int:
    """Write samples as canonical JSONL; returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    seen: set[str] = set()
    with path.open("w", encoding="utf-8") as fh:
        for sample in samples:
            violations = validate_sample(sample)
            if violations:
                raise SampleValidationError(sample.id, violations)
            if sample.id in seen:
                raise SampleValidationError(sample.id, [Violation("id_unique", "duplicate id in file")])
            seen.add(sample.id)
            fh.write(canonical_json(sample.to_record()) + "\n")
            count += 1
    return count


@dataclass(frozen=True)
class DiseaseBundle:
    """Disease-centric slice of the knowledge graph used for QA generation."""

    disease: str
    department: str
    relations: tuple[tuple[str, str], ...]  # (relation, object)

    def __post_init__(self):
        if not self.disease.strip():
            raise ValueError("disease name is empty")

    def to_record(self) -> dict:
        return {
            "disease": self.disease,
            "department": self.department,
            "relations": [{"relation": r, "object": o} for r, o in self.relations],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "DiseaseBundle":
        return cls(
            disease=rec["disease"],
            department=rec["department"],
            relations=tuple((r["relation"], r["object"]) for r in rec["relations"]),
        )


@dataclass(frozen=True)
class DepartmentDistribution:
    """Normalized frequency map over hospital departments."""

    weights: Mapping[str, float]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("distribution is empty")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("negative weight in distribution")
        total = math.fsum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total!r}, not 1")

    def to_record(self) -> dict:
        return {"weights": {k: self.weights[k] for k in sorted(self.weights)}}

    @classmethod
    def from_record(cls, rec: Mapping) -> "DepartmentDistribution":
        return cls(weights=dict(rec["weights"]))


@dataclass(frozen=True)
class ManifestComponent:
    name: str
    source: Source
    target_size: int
    stage_tag: StageTag
    abilities: frozenset[str]

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError(f"component {self.name!r}: target_size must be positive")
        if not self.abilities:
            raise ValueError(f"component {self.name!r}: abilities set is empty")
        unknown = self.abilities - set(ABILITIES)
        if unknown:
            raise ValueError(f"component {self.name!r}: unknown abilities {sorted(unknown)}")

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "source": self.source.value,
            "target_size": self.target_size,
            "stage_tag": self.stage_tag.value,
            "abilities": sorted(self.abilities),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "ManifestComponent":
        return cls(
            name=rec["name"],
            source=Source(rec["source"]),
            target_size=int(rec["target_size"]),
            stage_tag=StageTag(rec["stage_tag"]),
            abilities=frozenset(rec["abilities"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Declares every corpus component and its exact target size."""

    components: tuple[ManifestComponent, ...]
    seed: int

    def __post_init__(self):
        names = [c.name for c in self.components]
        if len(names) != len(set(names)):
            raise ValueError("component names are not unique")

    def for_stage(self, stage: StageTag) -> list[ManifestComponent]:
        return [c for c in self.components if c.stage_tag is stage]

    def to_record(self) -> dict:
        return {"components": [c.to_record() for c in self.components], "seed": self.seed}

    @classmethod
    def from_record(cls, rec: Mapping) -> "DatasetManifest":
        return cls(
            components=tuple(ManifestComponent.from_record(c) for c in rec["components"]),
            seed=int(rec["seed"]),
        )


@dataclass(frozen=True)
class McqItem:
    """Multiple-choice question with a gold answer letter.

    Option letters are consecutive starting at A; loaders normalize other
    key styles at ingest.
    """

    id: str
    subset: McqSubset
    question: str
    options: Mapping[str, str]  # insertion order = option order
    gold: str
    explanation: str | None = None

    def __post_init__(self):
        letters = list(self.options)
        if len(letters) < 2:
            raise ValueError(f"item {self.id!r}: needs at least 2 options")
        expected = [chr(ord("A") + i) for i in range(len(letters))]
        if letters != expected:
            raise ValueError(f"item {self.id!r}: option letters {letters} not consecutive from A")
        if self.gold not in self.options:
            raise ValueError(f"item {self.id!r}: gold {self.gold!r} not among options")

    def to_record(self) -> dict:
        rec: dict = {
            "id": self.id,
            "subset": self.subset.value,
            "question": self.question,
            "options": dict(self.options),
            "gold": self.gold,
        }
        if self.explanation is not None:
            rec["explanation"] = self.explanation
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "McqItem":
        return cls(
            id=rec["id"],
            subset=McqSubset(rec["subset"]),
            question=rec["question"],
            options=dict(rec["options"]),
            gold=rec["gold"],
            explanation=rec.get("explanation"),
        )


@dataclass(frozen=True)
class EvalCase:
    """One simulated-consultation case.

    ``group_key`` is a department for department-grouped cases, an intent
    category for intent-grouped cases, and empty for clinical-record cases.
    """

    id: str
    source: EvalSource
    group_key: str
    case_material: str
    opening_question: str | None = None

    def __post_init__(self):
        if self.source is EvalSource.CMD and self.group_key not in CMD_DEPARTMENTS:
            raise ValueError(f"case {self.id!r}: department {self.group_key!r} not one of {CMD_DEPARTMENTS}")
        if self.source is EvalSource.CMID and self.group_key not in CMID_CATEGORIES:
            raise ValueError(f"case {self.id!r}: intent {self.group_key!r} not one of {CMID_CATEGORIES}")

    def to_record(self) -> dict:
        rec: dict = {
            "id": self.id,
            "source": self.source.value,
            "group_key": self.group_key,
            "case_material": self.case_material,
        }
        if self.opening_question is not None:
            rec["opening_question"] = self.opening_question
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "EvalCase":
        return cls(
            id=rec["id"],
            source=EvalSource(rec["source"]),
            group_key=rec.get("group_key", ""),
            case_material=rec["case_material"],
            opening_question=rec.get("opening_question"),
        )


JUDGE_METRICS = ("proactivity", "accuracy", "helpfulness", "linguistic_quality")


@dataclass(frozen=True)
class JudgeScore:
    """Four rubric scores, each in [1, 5]."""

    proactivity: float
    accuracy: float
    helpfulness: float
    linguistic_quality: float
    rationale: str | None = None

    def __post_init__(self):
        for name in JUDGE_METRICS:
            value = getattr(self, name)
            if not 1 <= value <= 5:
                raise ValueError(f"{name} score {value} outside [1, 5]")

    def average(self) -> float:
        return math.fsum(getattr(self, name) for name in JUDGE_METRICS) / 4.0

    def to_record(self) -> dict:
        rec: dict = {name: getattr(self, name) for name in JUDGE_METRICS}
        if self.rationale is not None:
            rec["rationale"] = self.rationale
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "JudgeScore":
        return cls(
            proactivity=rec["proactivity"],
            accuracy=rec["accuracy"],
            helpfulness=rec["helpfulness"],
            linguistic_quality=rec["linguistic_quality"],
            rationale=rec.get("rationale"),
        )


@dataclass(frozen=True)
class TrainStageConfig:
    """Hyperparameters emitted for one fine-tuning stage."""

    stage: int
    global_batch_size: int
    learning_rate: float
    optimizer: str
    epochs: int
    max_seq_len: int
    warmup_steps: int
    weight_decay: float

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("global_batch_size", "epochs", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("invalid optimizer hyperparameters")

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "global_batch_size": self.global_batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "epochs": self.epochs,
            "max_seq_len": self.max_seq_len,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "TrainStageConfig":
        return cls(
            stage=int(rec["stage"]),
            global_batch_size=int(rec["global_batch_size"]),
            learning_rate=float(rec["learning_rate"]),
            optimizer=rec["optimizer"],
            epochs=int(rec["epochs"]),
            max_seq_len=int(rec["max_seq_len"]),
            warmup_steps=int(rec["warmup_steps"]),
            weight_decay=float(rec["weight_decay"]),
        )


@dataclass(frozen=True)
class QuarantineEntry:
    """An item whose backend output failed its parse contract.

    Quarantined items are preserved with the raw response for audit
    instead of being silently dropped.
    """

    item_id: str
    step_name: str
    reason: str
    raw_response: str
    prompt_hash: str

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "step_name": self.step_name,
            "reason": self.reason,
            "raw_response": self.raw_response,
            "prompt_hash": self.prompt_hash,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "QuarantineEntry":
        return cls(
            item_id=rec["item_id"],
            step_name=rec["step_name"],
            reason=rec["reason"],
            raw_response=rec["raw_response"],
            prompt_hash=rec["prompt_hash"],
        )


def read_records(path: str | Path) -> list[dict]:
    """Read a generic JSONL file into dicts, with line-numbered errors."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError as exc:
                raise RecordParseError(str(path), line_no, f"invalid JSON: {exc}") from exc
    return records


def write_records(records: Iterable[Mapping], path: str | Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")
            count += 1
    return count
