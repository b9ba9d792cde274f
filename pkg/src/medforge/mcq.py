"""Multiple-choice benchmark assembly, prompting, extraction, and scoring.

Accuracy is exact-match on extracted option letters; abstentions (no
letter recoverable from the response) count as incorrect but are reported
separately. The per-benchmark average is the unweighted mean over subset
accuracies; a count-weighted mean is available behind a flag.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .datamodel import McqItem, McqSubset, read_records
from .errors import LeakError
from .gateway import ChatRequest, Gateway, Message, MsgRole, TAG_MCQ_ANSWER, format_block, run_ordered
from .sampling import SeededRng, draw_uniform

# Table-style default draw sizes per subset.
DEFAULT_TARGETS = {
    McqSubset.MLEC_CLINIC: 336,
    McqSubset.MLEC_CWM: 268,
    McqSubset.MLEC_PUBLICHEALTH: 185,
    McqSubset.MLEC_STOMATOLOGY: 264,
    McqSubset.MLEC_TCM: 309,
    McqSubset.NEEP306: 270,
}


def _normalize_options(raw_options, raw_gold: str) -> tuple[dict[str, str], str]:
    """Relabel options to consecutive letters from A, remapping the gold key."""
    if isinstance(raw_options, Mapping):
        pairs = list(raw_options.items())
    else:
        pairs = [(str(i), text) for i, text in enumerate(raw_options)]
    letters = [chr(ord("A") + i) for i in range(len(pairs))]
    options = {letter: text for letter, (_, text) in zip(letters, pairs)}
    gold = ""
    for letter, (key, _) in zip(letters, pairs):
        if str(key) == str(raw_gold):
            gold = letter
            break
    return options, gold


def load_mcq(path: str | Path, subset: McqSubset | None = None) -> tuple[list[McqItem], list[dict]]:
    """Load items from a record file, normalizing option keys at ingest.

    Items whose gold key is not among the options are rejected into the
    returned report instead of aborting the load.
    """
    items: list[McqItem] = []
    rejects: list[dict] = []
    for rec in read_records(path):
        rec_subset = McqSubset(rec["subset"]) if "subset" in rec else subset
        if rec_subset is None:
            rejects.append({"id": rec.get("id"), "reason": "no subset given"})
            continue
        if subset is not None and rec_subset is not subset:
            continue
        options, gold = _normalize_options(rec["options"], rec["gold"])
        if not gold:
            rejects.append({"id": rec.get("id"), "reason": f"gold {rec['gold']!r} not among options"})
            continue
        try:
            items.append(
                McqItem(
                    id=rec["id"],
                    subset=rec_subset,
                    question=rec["question"],
                    options=options,
                    gold=gold,
                    explanation=rec.get("explanation"),
                )
            )
        except ValueError as exc:
            rejects.append({"id": rec.get("id"), "reason": str(exc)})
    return items, rejects


def assemble_benchmark(
    full_sets: Mapping[McqSubset, Sequence[McqItem]],
    targets: Mapping[McqSubset, int],
    seed: int,
) -> dict[McqSubset, list[McqItem]]:
    """Per-subset uniform draws of exactly the target counts."""
    benchmark: dict[McqSubset, list[McqItem]] = {}
    for subset in sorted(targets, key=lambda s: s.value):
        target = targets[subset]
        pool = list(full_sets.get(subset, ()))
        if target > len(pool):
            raise ValueError(f"subset {subset.value}: want {target}, pool has {len(pool)}")
        sub_seed = SeededRng(seed).derive(f"benchmark:{subset.value}").seed
        benchmark[subset] = draw_uniform(pool, target, sub_seed)
    return benchmark


ANSWER_INSTRUCTION = (
    'Reply with the letter of the correct option on its own, in the form "Answer: X" (答案：X).'
)


def _options_block(item: McqItem) -> str:
    return "\n".join(f"{letter}. {text}" for letter, text in item.options.items())


def build_mcq_prompt(
    item: McqItem,
    shots: Sequence[McqItem],
    mode: str,
    backend_id: str,
) -> ChatRequest:
    """Zero- or few-shot prompt; shots must come from a pool disjoint from
    the evaluation items (enforced by id)."""
    if mode not in ("zero_shot", "few_shot"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "few_shot" and not shots:
        raise ValueError("few_shot mode requires shots")
    if mode == "zero_shot":
        shots = ()
    overlap = [s.id for s in shots if s.id == item.id]
    if overlap:
        raise LeakError("few-shot exemplars overlap evaluation items", overlap)

    parts: list[str] = []
    for i, shot in enumerate(shots, start=1):
        parts.append(
            f"Example {i}:\n{shot.question}\n{_options_block(shot)}\nAnswer: {shot.gold}\n"
        )
    parts.append(
        f"{item.question}\n{format_block('OPTIONS', _options_block(item))}\n{ANSWER_INSTRUCTION}"
    )
    return ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, "\n".join(parts)),),
        temperature=0.0,
        max_tokens=64,
        request_tag=TAG_MCQ_ANSWER,
    )


# Answer-pattern cascade: explicit answer statements first (both languages),
# then standalone letter forms.
_ANSWER_PATTERNS = [
    re.compile(
        r"(?:(?:correct\s+)?(?:answer|choice|option)\s*(?:is|:)"
        r"|答案\s*(?:是|为|：|:)?"
        r"|选项?\s*(?:是|为|：|:)?"
        r"|正确(?:答案|选项)\s*(?:是|为|：|:)?)"
        r"\s*[\(（\[]?([A-Z])\b",
        re.IGNORECASE,
    ),
    re.compile(r"^\s*[\(（\[]?([A-Z])[\)）\]\.。:：]?\s*$", re.MULTILINE),
]


def extract_answer(response_text: str, options: Mapping[str, str]) -> str | None:
    """Extract the predicted option letter, or None to abstain.

    Cascade: (1) first letter inside a recognized answer pattern,
    (2) the unique option whose full text appears verbatim, (3) abstain.
    """
    for pattern in _ANSWER_PATTERNS:
        for match in pattern.finditer(response_text):
            letter = match.group(1).upper()
            if letter in options:
                return letter
    hits = [letter for letter, text in options.items() if text and text in response_text]
    if len(hits) == 1:
        return hits[0]
    return None


@dataclass(frozen=True)
class SubsetScore:
    n: int
    correct: int
    abstained: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


@dataclass(frozen=True)
class McqReport:
    per_subset: Mapping[McqSubset, SubsetScore]
    average_unweighted: float
    average_weighted: float
    abstention_rate: float

    def to_record(self) -> dict:
        return {
            "per_subset": {
                s.value: {"n": sc.n, "correct": sc.correct, "abstained": sc.abstained,
                          "accuracy": sc.accuracy}
                for s, sc in self.per_subset.items()
            },
            "average_unweighted": self.average_unweighted,
            "average_weighted": self.average_weighted,
            "abstention_rate": self.abstention_rate,
        }


def score(
    predictions: Mapping[str, str | None],
    benchmark: Mapping[McqSubset, Sequence[McqItem]],
) -> McqReport:
    """Per-subset accuracy plus the unweighted subset mean.

    Every benchmark item needs a prediction entry (an explicit None means
    the model abstained); missing ids abort with the full list.
    """
    missing = [
        item.id
        for items in benchmark.values()
        for item in items
        if item.id not in predictions
    ]
    if missing:
        raise ValueError(f"missing predictions for {len(missing)} items: {sorted(missing)[:10]}")

    per_subset: dict[McqSubset, SubsetScore] = {}
    for subset in sorted(benchmark, key=lambda s: s.value):
        items = benchmark[subset]
        correct = sum(1 for item in items if predictions[item.id] == item.gold)
        abstained = sum(1 for item in items if predictions[item.id] is None)
        per_subset[subset] = SubsetScore(n=len(items), correct=correct, abstained=abstained)

    accuracies = [sc.accuracy for sc in per_subset.values()]
    total_n = sum(sc.n for sc in per_subset.values())
    total_correct = sum(sc.correct for sc in per_subset.values())
    total_abstained = sum(sc.abstained for sc in per_subset.values())
    return McqReport(
        per_subset=per_subset,
        average_unweighted=math.fsum(accuracies) / len(accuracies) if accuracies else 0.0,
        average_weighted=total_correct / total_n if total_n else 0.0,
        abstention_rate=total_abstained / total_n if total_n else 0.0,
    )


def mean_of_reported(subset_scores: Sequence[float]) -> float:
    """Unweighted mean of already-reported percentage scores."""
    return math.fsum(subset_scores) / len(subset_scores)


def run_benchmark(
    benchmark: Mapping[McqSubset, Sequence[McqItem]],
    gateway: Gateway,
    backend_id: str,
    mode: str = "zero_shot",
    shot_pools: Mapping[McqSubset, Sequence[McqItem]] | None = None,
    shots_k: int = 3,
    seed: int = 0,
    max_workers: int = 4,
) -> dict[str, str | None]:
    """Query the backend for every item and extract predictions.

    Few-shot exemplars are drawn per subset from the designated shot pool;
    any id overlap with the benchmark is rejected.
    """
    tasks: list[tuple[McqItem, tuple[McqItem, ...]]] = []
    for subset in sorted(benchmark, key=lambda s: s.value):
        items = benchmark[subset]
        shots: tuple[McqItem, ...] = ()
        if mode == "few_shot":
            pool = list((shot_pools or {}).get(subset, ()))
            if not pool:
                raise ValueError(f"few_shot mode: no shot pool for subset {subset.value}")
            eval_ids = {item.id for item in items}
            overlap = [s.id for s in pool if s.id in eval_ids]
            if overlap:
                raise LeakError("shot pool overlaps benchmark", overlap)
            sub_seed = SeededRng(seed).derive(f"shots:{subset.value}").seed
            shots = tuple(draw_uniform(pool, min(shots_k, len(pool)), sub_seed))
        tasks.extend((item, shots) for item in items)

    def one(task: tuple[McqItem, tuple[McqItem, ...]]) -> tuple[str, str | None]:
        item, shots = task
        request = build_mcq_prompt(item, shots, mode, backend_id)
        response = gateway.chat(request)
        return item.id, extract_answer(response.content, item.options)

    return dict(run_ordered(tasks, one, max_workers=max_workers))


def render_mcq_table(report: McqReport) -> str:
    """Plain-text table of subset accuracies (percent, 2 decimals)."""
    lines = [f"{'subset':<22}{'n':>6}{'acc%':>9}{'abstain':>9}"]
    for subset, sc in report.per_subset.items():
        lines.append(f"{subset.value:<22}{sc.n:>6}{sc.accuracy * 100:>9.2f}{sc.abstained:>9}")
    lines.append(f"{'average':<22}{'':>6}{report.average_unweighted * 100:>9.2f}")
    return "\n".join(lines)
