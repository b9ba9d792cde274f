"""Filtering and LLM rewriting of raw forum dialogues.

Raw consultation records pass a configurable rule filter (keyword blocks,
keyword requirements, turn-count bounds, entity presence via a pluggable
detector), then each surviving record is rewritten by a backend: patient
turns pass through unmodified, doctor turns are rewritten to suit an AI
assistant. Records whose rewrite fails the parse contract after one retry
are quarantined with the raw response attached, never silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

from .datamodel import (
    DialogueSample,
    PipelineStep,
    ProvenanceRecord,
    QuarantineEntry,
    Role,
    Source,
    StageTag,
    Turn,
    validate_sample,
)
from .errors import GenerationError
from .gateway import (
    ChatRequest,
    Gateway,
    Message,
    MsgRole,
    TAG_RECONSTRUCT,
    format_block,
    request_digest,
    run_ordered,
    text_digest,
)

PATIENT_SPEAKERS = {"patient", "user", "病人", "患者"}
DOCTOR_SPEAKERS = {"doctor", "assistant", "医生", "大夫"}


@dataclass(frozen=True)
class RawRecord:
    """Unvalidated forum record: free-form speakers, raw text."""

    id: str
    source: Source
    turns: tuple[tuple[str, str], ...]  # (speaker, text)
    department: str | None = None

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"raw record {self.id!r} has no turns")

    def to_record(self) -> dict:
        rec: dict = {"id": self.id, "source": self.source.value}
        if self.department is not None:
            rec["department"] = self.department
        rec["turns"] = [{"speaker": s, "text": t} for s, t in self.turns]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "RawRecord":
        return cls(
            id=rec["id"],
            source=Source(rec["source"]),
            department=rec.get("department"),
            turns=tuple((t["speaker"], t["text"]) for t in rec["turns"]),
        )

    def text(self) -> str:
        return "\n".join(t for _, t in self.turns)


def speaker_role(speaker: str) -> Role:
    low = speaker.strip().lower()
    if low in PATIENT_SPEAKERS:
        return Role.PATIENT
    if low in DOCTOR_SPEAKERS:
        return Role.DOCTOR
    raise ValueError(f"unrecognized speaker {speaker!r}")


@dataclass(frozen=True)
class FilterRule:
    """One filtering predicate; ``rule_id`` names it in rejection reasons."""

    kind: str  # keyword_block | keyword_require | min_turns | max_turns | entity_require
    rule_id: str
    keywords: tuple[str, ...] = ()
    count: int = 0

    KINDS = ("keyword_block", "keyword_require", "min_turns", "max_turns", "entity_require")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown filter rule kind {self.kind!r}")
        if self.kind in ("keyword_block", "keyword_require") and not self.keywords:
            raise ValueError(f"rule {self.rule_id!r}: keyword rule with empty keyword list")


def load_filter_rules(path: str | Path) -> list[FilterRule]:
    """Load rules from a YAML list; ids default to ``<index>:<kind>``."""
    with Path(path).open("r", encoding="utf-8") as fh:
        specs = yaml.safe_load(fh) or []
    rules = []
    for i, spec in enumerate(specs):
        rules.append(
            FilterRule(
                kind=spec["kind"],
                rule_id=spec.get("id", f"{i}:{spec['kind']}"),
                keywords=tuple(spec.get("keywords", [])),
                count=int(spec.get("count", 0)),
            )
        )
    return rules


class RegexGazetteer:
    """Reference entity detector: substring match over a fixed term list."""

    def __init__(self, terms: Iterable[str]):
        self.terms = tuple(terms)

    def __call__(self, text: str) -> list[str]:
        return [term for term in self.terms if term in text]


@dataclass(frozen=True)
class FilterOutcome:
    kept: tuple[RawRecord, ...]
    rejected: tuple[tuple[RawRecord, str], ...]  # (record, reason)


def filter_records(
    records: Sequence[RawRecord],
    rules: Sequence[FilterRule],
    entity_detector: Callable[[str], list[str]] | None = None,
) -> FilterOutcome:
    """Stable partition: a record is kept iff it passes every rule.

    Rejections carry the first failing rule id; a crashing entity detector
    routes the record to rejected with a hook-failure reason and the run
    continues.
    """
    if any(r.kind == "entity_require" for r in rules) and entity_detector is None:
        raise ValueError("entity_require rule present but no entity_detector given")

    kept: list[RawRecord] = []
    rejected: list[tuple[RawRecord, str]] = []
    for record in records:
        reason = _first_failure(record, rules, entity_detector)
        if reason is None:
            kept.append(record)
        else:
            rejected.append((record, reason))
    return FilterOutcome(kept=tuple(kept), rejected=tuple(rejected))


def _first_failure(record, rules, entity_detector) -> str | None:
    text = record.text()
    for rule in rules:
        if rule.kind == "keyword_block":
            if any(kw in text for kw in rule.keywords):
                return rule.rule_id
        elif rule.kind == "keyword_require":
            if not any(kw in text for kw in rule.keywords):
                return rule.rule_id
        elif rule.kind == "min_turns":
            if len(record.turns) < rule.count:
                return rule.rule_id
        elif rule.kind == "max_turns":
            if len(record.turns) > rule.count:
                return rule.rule_id
        elif rule.kind == "entity_require":
            try:
                entities = entity_detector(text)
            except Exception as exc:
                return f"entity_detector_error: {exc}"
            if len(entities) < max(rule.count, 1):
                return rule.rule_id
    return None


REWRITE_RULES = """\
1. Remove colloquial wording and inconsistent phrasing; use a uniform, professional style.
2. Keep every piece of key information from the original doctor's reply; building on it, \
explain and supplement the answer so it is more detailed and logically organized.
3. Rewrite or remove anything an AI assistant cannot do, such as examining imaging \
material in person or asking the patient to register for an appointment."""

OUTPUT_FORMAT = """\
Answer with the full conversation, one turn per line, each line starting with \
"PATIENT: " or "DOCTOR: ", keeping the original turn order, and finish with a line \
containing only END."""

_SYSTEM = "You rewrite medical consultations so the doctor reads as a careful AI assistant."


def _one_line(text: str) -> str:
    return " ".join(text.split())


def dialogue_block(turns: Sequence[tuple[Role, str]]) -> str:
    lines = [f"{role.value.upper()}: {_one_line(text)}" for role, text in turns]
    return "\n".join(lines)


def build_rewrite_prompt(record: RawRecord, backend_id: str, temperature: float = 0.7) -> ChatRequest:
    """Prompt embedding the three rewrite rules, the full original dialogue,
    and the machine-parseable output format."""
    turns = [(speaker_role(s), t) for s, t in record.turns]
    user = (
        "Rewrite the doctor's turns in the conversation below. Rules:\n"
        f"{REWRITE_RULES}\n"
        "Keep every patient turn exactly as it is.\n"
        f"{OUTPUT_FORMAT}\n\n"
        f"{format_block('DIALOGUE', dialogue_block(turns))}"
    )
    return ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.SYSTEM, _SYSTEM), Message(MsgRole.USER, user)),
        temperature=temperature,
        max_tokens=2048,
        request_tag=TAG_RECONSTRUCT,
    )


def parse_turn_lines(text: str) -> list[tuple[Role, str]]:
    """Parse role-tagged turn lines terminated by END; raises ValueError
    when the contract is not met."""
    turns: list[tuple[Role, str]] = []
    terminated = False
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "END":
            terminated = True
            break
        if line.startswith("PATIENT:"):
            turns.append((Role.PATIENT, line[len("PATIENT:"):].strip()))
        elif line.startswith("DOCTOR:"):
            turns.append((Role.DOCTOR, line[len("DOCTOR:"):].strip()))
        else:
            raise ValueError(f"unrecognized line {line[:60]!r}")
    if not terminated:
        raise ValueError("missing END terminator")
    if not turns:
        raise ValueError("no turns in response")
    if any(not content for _, content in turns):
        raise ValueError("empty turn content")
    return turns


def chat_with_retry(gateway: Gateway, request: ChatRequest, parse: Callable[[str], object]):
    """Send a request and parse the response; on parse failure, retry once
    with a corrective follow-up. Returns (parsed, steps) or raises
    GenerationError carrying the raw response."""
    response = gateway.chat(request)
    prompt_hash = request_digest(request)
    try:
        return parse(response.content), response, prompt_hash
    except ValueError as first_error:
        retry = ChatRequest(
            backend_id=request.backend_id,
            messages=request.messages
            + (
                Message(MsgRole.ASSISTANT, response.content),
                Message(MsgRole.USER, "That output did not follow the required format. Reply again, following the format instructions exactly."),
            ),
            temperature=request.temperature,
            max_tokens=request.max_tokens,
            request_tag=request.request_tag,
        )
        retry_response = gateway.chat(retry)
        try:
            return parse(retry_response.content), retry_response, request_digest(retry)
        except ValueError:
            raise GenerationError(
                f"unparseable {request.request_tag} output after retry: {first_error}",
                raw_response=retry_response.content,
                prompt_hash=prompt_hash,
            ) from first_error


def reconstruct(record: RawRecord, gateway: Gateway, backend_id: str) -> DialogueSample:
    """Rewrite one record into a validated DialogueSample.

    Patient turns are restored verbatim from the original (the response's
    patient lines only fix the count); doctor turns come from the response.
    Raises GenerationError for quarantine on contract failure.
    """
    request = build_rewrite_prompt(record, backend_id)
    original_patient = [_one_line(t) for s, t in record.turns if speaker_role(s) is Role.PATIENT]

    def parse(content: str) -> list[Turn]:
        parsed = parse_turn_lines(content)
        patient_count = sum(1 for role, _ in parsed if role is Role.PATIENT)
        if patient_count == 0 or patient_count > len(original_patient):
            raise ValueError(
                f"response has {patient_count} patient turns, original has {len(original_patient)}"
            )
        turns: list[Turn] = []
        next_patient = 0
        for role, content_line in parsed:
            if role is Role.PATIENT:
                turns.append(Turn(Role.PATIENT, original_patient[next_patient]))
                next_patient += 1
            else:
                turns.append(Turn(Role.DOCTOR, content_line))
        return turns

    turns, response, prompt_hash = chat_with_retry(gateway, request, parse)
    sample = DialogueSample(
        id=f"recon:{record.id}",
        source=record.source,
        department=record.department,
        stage_tag=StageTag.STAGE1,
        turns=tuple(turns),
        provenance=ProvenanceRecord(
            origin_record_id=record.id,
            pipeline_steps=(
                PipelineStep(
                    step_name=TAG_RECONSTRUCT,
                    backend_id=backend_id,
                    prompt_hash=prompt_hash,
                    response_hash=text_digest(response.content),
                    timestamp=response.timestamp,
                ),
            ),
        ),
    )
    violations = validate_sample(sample)
    if violations:
        raise GenerationError(
            f"rewritten sample invalid: {violations[0]}",
            raw_response=response.content,
            prompt_hash=prompt_hash,
        )
    return sample


def reconstruct_corpus(
    records: Sequence[RawRecord],
    gateway: Gateway,
    backend_id: str,
    max_workers: int = 4,
) -> tuple[list[DialogueSample], list[QuarantineEntry]]:
    """Rewrite a whole corpus with bounded parallelism; output order is
    input order, failures are quarantined."""

    def one(record: RawRecord):
        try:
            return reconstruct(record, gateway, backend_id)
        except GenerationError as exc:
            return QuarantineEntry(
                item_id=record.id,
                step_name=TAG_RECONSTRUCT,
                reason=str(exc),
                raw_response=exc.raw_response,
                prompt_hash=exc.prompt_hash,
            )

    results = run_ordered(records, one, max_workers=max_workers)
    samples = [r for r in results if isinstance(r, DialogueSample)]
    quarantined = [r for r in results if isinstance(r, QuarantineEntry)]
    return samples, quarantined


def adapt_verbatim(record: RawRecord) -> DialogueSample | None:
    """Deterministically map a raw record to a valid sample without any
    rewriting: consecutive same-role turns merge, a trailing patient turn
    is dropped. Returns None when no valid dialogue remains."""
    merged: list[tuple[Role, str]] = []
    try:
        for speaker, text in record.turns:
            role = speaker_role(speaker)
            text = _one_line(text)
            if not text:
                continue
            if merged and merged[-1][0] is role:
                merged[-1] = (role, f"{merged[-1][1]} {text}")
            else:
                merged.append((role, text))
    except ValueError:
        return None
    while merged and merged[-1][0] is not Role.DOCTOR:
        merged.pop()
    if not merged or merged[0][0] is not Role.PATIENT:
        return None
    sample = DialogueSample(
        id=f"raw:{record.id}",
        source=record.source,
        department=record.department,
        stage_tag=StageTag.STAGE2,
        turns=tuple(Turn(role, text) for role, text in merged),
        provenance=ProvenanceRecord(origin_record_id=record.id),
    )
    return sample if not validate_sample(sample) else None


@dataclass(frozen=True)
class FidelityReport:
    patient_turns_equal: bool
    doctor_length_ratio: float
    term_retention: float
    terms_checked: int = 0


def check_fidelity(
    original: RawRecord,
    rebuilt: DialogueSample,
    terms: Sequence[str] = (),
) -> FidelityReport:
    """Compare a rewrite against its source record.

    ``term_retention`` is the fraction of ``terms`` found in the original
    doctor turns that still appear in the rebuilt doctor turns (1.0 when
    none of the terms occur in the original).
    """
    original_doctor = " ".join(t for s, t in original.turns if speaker_role(s) is Role.DOCTOR)
    rebuilt_doctor = " ".join(t.content for t in rebuilt.doctor_turns())
    original_patient_count = sum(1 for s, _ in original.turns if speaker_role(s) is Role.PATIENT)

    present = [term for term in terms if term in original_doctor]
    retained = [term for term in present if term in rebuilt_doctor]
    retention = len(retained) / len(present) if present else 1.0
    length_ratio = len(rebuilt_doctor) / len(original_doctor) if original_doctor else 0.0
    return FidelityReport(
        patient_turns_equal=original_patient_count == len(rebuilt.patient_turns()),
        doctor_length_ratio=length_ratio,
        term_retention=retention,
        terms_checked=len(present),
    )


def read_raw_records(path: str | Path) -> list[RawRecord]:
    from .datamodel import read_records

    return [RawRecord.from_record(rec) for rec in read_records(path)]


def write_raw_records(records: Iterable[RawRecord], path: str | Path) -> int:
    from .datamodel import write_records

    return write_records((r.to_record() for r in records), path)
