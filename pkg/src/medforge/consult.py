"""Simulated multi-turn consultations scored by a judge backend.

A patient backend role-plays from the case material (never seeing any gold
labels, and instructed to reveal details only when asked), the doctor
backend is the system under test, and the judge backend scores the
transcript on four criteria with integer verdicts from 1 to 5. Failed
transcripts are persisted with a failure marker and excluded from means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

from .datamodel import (
    CMD_DEPARTMENTS,
    CMID_CATEGORIES,
    EvalCase,
    EvalSource,
    JudgeScore,
    JUDGE_METRICS,
    QuarantineEntry,
    Role,
    Turn,
)
from .errors import GenerationError, StratumShortfallError
from .gateway import (
    ChatRequest,
    Gateway,
    Message,
    MsgRole,
    TAG_DOCTOR_REPLY,
    TAG_JUDGE,
    TAG_OPEN_QUESTION,
    TAG_PATIENT_TURN,
    TransportFailure,
    format_block,
    run_ordered,
)
from .errors import TransportError
from .reconstruct import chat_with_retry
from .sampling import SeededRng, draw_uniform


def build_eval_set(
    cmb_cases: Sequence[dict],
    cmd_pool: Sequence[dict],
    cmid_pool: Sequence[dict],
    seed: int,
    cmb_target: int = 73,
    cmd_per_department: int = 20,
    cmid_per_category: int = 30,
) -> list[EvalCase]:
    """Assemble the consultation evaluation set.

    Defaults give 73 clinical-record cases plus 20 per department and 30
    per intent category (313 total). Draws are seeded and deterministic;
    a short stratum aborts naming the department or category.
    """
    if cmb_target > len(cmb_cases):
        raise StratumShortfallError("cmb_clin", cmb_target, len(cmb_cases))
    cases: list[EvalCase] = [
        EvalCase(id=rec["id"], source=EvalSource.CMB_CLIN, group_key="", case_material=rec["case_material"])
        for rec in draw_uniform(list(cmb_cases), cmb_target, SeededRng(seed).derive("cmb").seed)
    ]

    by_dept: dict[str, list[dict]] = {d: [] for d in CMD_DEPARTMENTS}
    for rec in cmd_pool:
        if rec["department"] in by_dept:
            by_dept[rec["department"]].append(rec)
    for dept in CMD_DEPARTMENTS:
        pool = by_dept[dept]
        if len(pool) < cmd_per_department:
            raise StratumShortfallError(dept, cmd_per_department, len(pool))
        for rec in draw_uniform(pool, cmd_per_department, SeededRng(seed).derive(f"cmd:{dept}").seed):
            cases.append(
                EvalCase(id=rec["id"], source=EvalSource.CMD, group_key=dept, case_material=rec["query"])
            )

    by_cat: dict[str, list[dict]] = {c: [] for c in CMID_CATEGORIES}
    for rec in cmid_pool:
        if rec["category"] in by_cat:
            by_cat[rec["category"]].append(rec)
    for cat in CMID_CATEGORIES:
        pool = by_cat[cat]
        if len(pool) < cmid_per_category:
            raise StratumShortfallError(cat, cmid_per_category, len(pool))
        for rec in draw_uniform(pool, cmid_per_category, SeededRng(seed).derive(f"cmid:{cat}").seed):
            cases.append(
                EvalCase(id=rec["id"], source=EvalSource.CMID, group_key=cat, case_material=rec["query"])
            )
    return cases


def open_question(case: EvalCase, gateway: Gateway, backend_id: str) -> EvalCase:
    """Give the case its opening patient question.

    Clinical-record cases get a backend-written question grounded in the
    case material; the other sources already are patient queries, which
    become the opening verbatim (no backend call).
    """
    if case.source is not EvalSource.CMB_CLIN:
        return EvalCase(
            id=case.id,
            source=case.source,
            group_key=case.group_key,
            case_material=case.case_material,
            opening_question=case.case_material,
        )
    if not case.case_material.strip():
        raise ValueError(f"case {case.id!r} has empty case material")
    user = (
        "Below is a patient's case record. Write the single opening question this "
        "patient would ask a doctor in an online consultation. Reply with the "
        "question only.\n\n" + format_block("CASE", case.case_material)
    )
    request = ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, user),),
        temperature=0.7,
        max_tokens=256,
        request_tag=TAG_OPEN_QUESTION,
    )

    def parse(content: str) -> str:
        text = content.strip()
        if not text:
            raise ValueError("empty opening question")
        return text

    question, _, _ = chat_with_retry(gateway, request, parse)
    return EvalCase(
        id=case.id,
        source=case.source,
        group_key=case.group_key,
        case_material=case.case_material,
        opening_question=question,
    )


@dataclass(frozen=True)
class ChatTranscript:
    case_id: str
    doctor_backend: str
    patient_backend: str
    turns: tuple[Turn, ...]
    complete: bool
    failure: str | None = None

    def to_record(self) -> dict:
        rec: dict = {
            "case_id": self.case_id,
            "doctor_backend": self.doctor_backend,
            "patient_backend": self.patient_backend,
            "turns": [t.to_record() for t in self.turns],
            "complete": self.complete,
        }
        if self.failure is not None:
            rec["failure"] = self.failure
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "ChatTranscript":
        return cls(
            case_id=rec["case_id"],
            doctor_backend=rec["doctor_backend"],
            patient_backend=rec["patient_backend"],
            turns=tuple(Turn.from_record(t) for t in rec["turns"]),
            complete=rec["complete"],
            failure=rec.get("failure"),
        )


_DOCTOR_SYSTEM = (
    "You are an AI doctor in an online consultation. Ask for missing information "
    "when you need it, and give clear, practical guidance."
)

_PATIENT_SYSTEM = (
    "You are role-playing the patient described below in an online consultation. "
    "Stay in character, answer the doctor from the case details, and reveal "
    "specifics only when the doctor asks for them. Never break role.\n\n{case}"
)


def run_consultation(
    case: EvalCase,
    gateway: Gateway,
    doctor_backend: str,
    patient_backend: str,
    rounds: int = 3,
) -> ChatTranscript:
    """Drive one consultation: the opening counts as round 1, so the
    transcript holds exactly ``rounds`` patient turns and ``rounds``
    doctor turns, strictly alternating."""
    if not case.opening_question:
        raise ValueError(f"case {case.id!r} has no opening question")
    patient_system = _PATIENT_SYSTEM.format(case=format_block("CASE", case.case_material))

    turns: list[Turn] = []
    try:
        for round_no in range(rounds):
            if round_no == 0:
                patient_text = case.opening_question
            else:
                messages: list[Message] = [Message(MsgRole.SYSTEM, patient_system)]
                for turn in turns:
                    role = MsgRole.ASSISTANT if turn.role is Role.PATIENT else MsgRole.USER
                    messages.append(Message(role, turn.content))
                response = gateway.chat(
                    ChatRequest(
                        backend_id=patient_backend,
                        messages=tuple(messages),
                        temperature=0.7,
                        max_tokens=512,
                        request_tag=TAG_PATIENT_TURN,
                    )
                )
                patient_text = response.content.strip()
                if not patient_text:
                    raise GenerationError("patient backend returned empty turn")
            turns.append(Turn(Role.PATIENT, patient_text))

            messages = [Message(MsgRole.SYSTEM, _DOCTOR_SYSTEM)]
            for turn in turns:
                role = MsgRole.USER if turn.role is Role.PATIENT else MsgRole.ASSISTANT
                messages.append(Message(role, turn.content))
            response = gateway.chat(
                ChatRequest(
                    backend_id=doctor_backend,
                    messages=tuple(messages),
                    temperature=0.7,
                    max_tokens=1024,
                    request_tag=TAG_DOCTOR_REPLY,
                )
            )
            doctor_text = response.content.strip()
            if not doctor_text:
                raise GenerationError("doctor backend returned empty turn")
            turns.append(Turn(Role.DOCTOR, doctor_text))
    except (TransportError, TransportFailure, GenerationError) as exc:
        return ChatTranscript(
            case_id=case.id,
            doctor_backend=doctor_backend,
            patient_backend=patient_backend,
            turns=tuple(turns),
            complete=False,
            failure=str(exc),
        )
    return ChatTranscript(
        case_id=case.id,
        doctor_backend=doctor_backend,
        patient_backend=patient_backend,
        turns=tuple(turns),
        complete=True,
    )


CRITERIA_DEFINITIONS = """\
proactivity: the doctor proactively and clearly asks the patient for more \
information when what is known so far is insufficient.
accuracy: the diagnosis or advice is accurate and free of factual errors; \
conclusions are not drawn arbitrarily.
helpfulness: the doctor gives the patient clear, instructive, practical help \
that addresses the patient's concerns.
linguistic_quality: the doctor understands the patient correctly and the \
wording of the replies is smooth and natural."""

_JUDGE_FORMAT = (
    "Rate each criterion with an integer from 1 to 5. Reply with exactly four "
    "lines, one per criterion, in the form \"name: score\", nothing else."
)


def transcript_block(transcript: ChatTranscript) -> str:
    lines = [f"{t.role.value.upper()}: {t.content}" for t in transcript.turns]
    return "\n".join(lines)


def parse_judge_verdict(text: str) -> JudgeScore:
    """Parse the four integer scores; out-of-range or non-integer values
    are contract failures, never clamped."""
    found: dict[str, int] = {}
    for line in text.splitlines():
        line = line.strip()
        if ":" not in line:
            continue
        name, _, value = line.partition(":")
        name = name.strip().lower()
        if name in JUDGE_METRICS:
            value = value.strip()
            if not value.isdigit():
                raise ValueError(f"{name} score {value!r} is not an integer")
            found[name] = int(value)
    missing = [m for m in JUDGE_METRICS if m not in found]
    if missing:
        raise ValueError(f"verdict missing criteria: {missing}")
    for name, value in found.items():
        if not 1 <= value <= 5:
            raise ValueError(f"{name} score {value} outside [1, 5]")
    return JudgeScore(**{name: float(found[name]) for name in JUDGE_METRICS})


def judge(transcript: ChatTranscript, gateway: Gateway, judge_backend: str) -> JudgeScore:
    """Score a complete transcript on the four criteria."""
    if not transcript.complete:
        raise ValueError(f"transcript {transcript.case_id!r} is incomplete")
    user = (
        "You are the referee of a medical consultation. Evaluate the doctor in the "
        "conversation below on four criteria:\n"
        f"{CRITERIA_DEFINITIONS}\n\n"
        f"{_JUDGE_FORMAT}\n\n"
        f"{format_block('TRANSCRIPT', transcript_block(transcript))}"
    )
    request = ChatRequest(
        backend_id=judge_backend,
        messages=(Message(MsgRole.USER, user),),
        temperature=0.0,
        max_tokens=64,
        request_tag=TAG_JUDGE,
    )
    verdict, _, _ = chat_with_retry(gateway, request, parse_judge_verdict)
    return verdict


def evaluate_cases(
    cases: Sequence[EvalCase],
    gateway: Gateway,
    doctor_backend: str,
    patient_backend: str,
    judge_backend: str,
    opening_backend: str = "",
    rounds: int = 3,
    max_workers: int = 4,
) -> tuple[list[tuple[EvalCase, ChatTranscript, JudgeScore | None]], list[QuarantineEntry]]:
    """Full sweep: opening question, consultation, judging, per case.

    Returns (case, transcript, score-or-None) triples in input order plus
    the scoring quarantine; incomplete transcripts get no score.
    """
    opener = opening_backend or patient_backend
    quarantined: list[QuarantineEntry] = []

    def one(case: EvalCase):
        try:
            ready = case if case.opening_question else open_question(case, gateway, opener)
        except GenerationError as exc:
            return case, None, None, QuarantineEntry(
                item_id=case.id, step_name=TAG_OPEN_QUESTION, reason=str(exc),
                raw_response=exc.raw_response, prompt_hash=exc.prompt_hash,
            )
        transcript = run_consultation(ready, gateway, doctor_backend, patient_backend, rounds=rounds)
        if not transcript.complete:
            return ready, transcript, None, None
        try:
            verdict = judge(transcript, gateway, judge_backend)
        except GenerationError as exc:
            return ready, transcript, None, QuarantineEntry(
                item_id=case.id, step_name=TAG_JUDGE, reason=str(exc),
                raw_response=exc.raw_response, prompt_hash=exc.prompt_hash,
            )
        return ready, transcript, verdict, None

    results = []
    for ready, transcript, verdict, quarantine in run_ordered(list(cases), one, max_workers=max_workers):
        if quarantine is not None:
            quarantined.append(quarantine)
        if transcript is not None:
            results.append((ready, transcript, verdict))
    return results, quarantined


@dataclass(frozen=True)
class GroupRow:
    group: str
    n: int
    metric_means: Mapping[str, float]
    overall: float


@dataclass(frozen=True)
class AggregateReport:
    n_scored: int
    n_excluded: int
    metric_means: Mapping[str, float]
    overall: float
    groups: tuple[GroupRow, ...] = ()

    def to_record(self) -> dict:
        return {
            "n_scored": self.n_scored,
            "n_excluded": self.n_excluded,
            "metric_means": dict(self.metric_means),
            "overall": self.overall,
            "groups": [
                {"group": g.group, "n": g.n, "metric_means": dict(g.metric_means), "overall": g.overall}
                for g in self.groups
            ],
        }


def _means(scores: Sequence[JudgeScore]) -> tuple[dict[str, float], float]:
    # fsum is exactly rounded, so means are independent of case order.
    means = {
        metric: math.fsum(getattr(s, metric) for s in scores) / len(scores)
        for metric in JUDGE_METRICS
    }
    overall = math.fsum(means.values()) / len(JUDGE_METRICS)
    return means, overall


def aggregate(
    scored: Sequence[tuple[EvalCase, JudgeScore | None]],
    group_by: str = "none",
) -> AggregateReport:
    """Per-metric means and their mean; grouped rows sort by descending
    overall score. Unscored cases are excluded but counted."""
    if group_by not in ("none", "department", "intent"):
        raise ValueError(f"unknown group_by {group_by!r}")
    usable = [(case, score) for case, score in scored if score is not None]
    if not usable:
        raise ValueError("no scored cases to aggregate")
    means, overall = _means([score for _, score in usable])

    groups: list[GroupRow] = []
    if group_by != "none":
        wanted = EvalSource.CMD if group_by == "department" else EvalSource.CMID
        per_group: dict[str, list[JudgeScore]] = {}
        for case, score in usable:
            if case.source is wanted:
                per_group.setdefault(case.group_key, []).append(score)
        for group_key in sorted(per_group):
            g_means, g_overall = _means(per_group[group_key])
            groups.append(GroupRow(group=group_key, n=len(per_group[group_key]),
                                   metric_means=g_means, overall=g_overall))
        groups.sort(key=lambda row: (-row.overall, row.group))

    return AggregateReport(
        n_scored=len(usable),
        n_excluded=len(scored) - len(usable),
        metric_means=means,
        overall=overall,
        groups=tuple(groups),
    )


def render_2dp(value: float) -> str:
    """Render with 2 decimals, half-up (4.595 -> '4.60')."""
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_report(report: AggregateReport) -> str:
    header = f"{'group':<20}{'n':>5}" + "".join(f"{m[:12]:>14}" for m in JUDGE_METRICS) + f"{'overall':>10}"
    lines = [header]

    def row(name: str, n: int, means: Mapping[str, float], overall: float) -> str:
        cells = "".join(f"{render_2dp(means[m]):>14}" for m in JUDGE_METRICS)
        return f"{name:<20}{n:>5}{cells}{render_2dp(overall):>10}"

    lines.append(row("all", report.n_scored, report.metric_means, report.overall))
    for group in report.groups:
        lines.append(row(group.group, group.n, group.metric_means, group.overall))
    if report.n_excluded:
        lines.append(f"excluded (failed transcripts): {report.n_excluded}")
    return "\n".join(lines)
