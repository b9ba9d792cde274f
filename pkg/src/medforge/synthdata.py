"""Seeded synthetic corpora for tests, demos, and desk-scale pipeline runs.

Nothing here is medical knowledge: the generators produce structurally
realistic records (departments, dialogues, graph triples, exam questions)
from fixed templates so the whole pipeline can run deterministically
without any real dataset.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import yaml

from .datamodel import (
    DialogueSample,
    McqItem,
    McqSubset,
    PipelineStep,
    ProvenanceRecord,
    Role,
    Source,
    StageTag,
    Turn,
    write_records,
)
from .gateway import text_digest
from .reconstruct import RawRecord
from .sampling import SeededRng
from .taxonomy import DepartmentTaxonomy

DEPARTMENTS = (
    "internal_medicine",
    "surgery",
    "pediatrics",
    "andrology",
    "gynecology",
    "oncology",
    "dermatology",
    "ophthalmology",
    "orthopedics",
    "psychiatry",
)

# Zipf-ish department weights, heaviest first.
_RAW_WEIGHTS = [1.0 / (i + 1) for i in range(len(DEPARTMENTS))]
_WEIGHT_SUM = sum(_RAW_WEIGHTS)
DEPARTMENT_WEIGHTS = {d: w / _WEIGHT_SUM for d, w in zip(DEPARTMENTS, _RAW_WEIGHTS)}

SYMPTOMS = ("persistent cough", "mild fever", "joint pain", "skin rash", "dizziness",
            "fatigue", "headaches", "blurred vision", "back pain", "insomnia")
MEDICATIONS = ("compound tablet A", "syrup B", "capsule C", "ointment D", "injection E")
BLOCKED_KEYWORD = "advertisement"


def synthetic_taxonomy() -> DepartmentTaxonomy:
    return DepartmentTaxonomy.flat(list(DEPARTMENTS))


def _pick_department(rng: SeededRng) -> str:
    # Multinomial draw over the fixed weights via inverse CDF on a 1e9 grid.
    point = rng.randbelow(10**9) / 10**9
    cumulative = 0.0
    for dept, weight in DEPARTMENT_WEIGHTS.items():
        cumulative += weight
        if point < cumulative:
            return dept
    return DEPARTMENTS[-1]


def gen_raw_records(
    n: int,
    source: Source,
    seed: int,
    blocked_count: int = 0,
    marker_terms: Sequence[str] = (),
) -> list[RawRecord]:
    """Synthetic forum records. Exactly ``blocked_count`` of them contain
    the blocked keyword; ``marker_terms`` are planted in doctor turns for
    fidelity checks."""
    rng = SeededRng(seed).derive(f"raw:{source.value}")
    blocked_positions = set(rng.sample_indices(n, blocked_count)) if blocked_count else set()
    records = []
    for i in range(n):
        dept = _pick_department(rng)
        rounds = 1 if source is Source.CMEDQA2 else 1 + rng.randbelow(3)
        symptom = SYMPTOMS[rng.randbelow(len(SYMPTOMS))]
        medication = MEDICATIONS[rng.randbelow(len(MEDICATIONS))]
        marker = f" {marker_terms[rng.randbelow(len(marker_terms))]}" if marker_terms else ""
        turns: list[tuple[str, str]] = []
        for r in range(rounds):
            if r == 0:
                patient = f"医生您好, I have had {symptom} for {1 + rng.randbelow(14)} days. What should I do?"
            else:
                patient = f"Thanks. Anything else I should watch for regarding the {symptom}?"
            doctor = (
                f"Given the {symptom}, this often relates to the {dept} area. "
                f"I would start with {medication}{marker} and rest."
            )
            turns.append(("patient", patient))
            turns.append(("doctor", doctor))
        if i in blocked_positions:
            turns.append(("doctor", f"Also check this {BLOCKED_KEYWORD} for a special offer."))
        records.append(
            RawRecord(id=f"{source.value}-{i:06d}", source=source, department=dept, turns=tuple(turns))
        )
    return records


def gen_kg_records(
    n_diseases: int,
    seed: int,
    dangling_edges: int = 0,
    unassigned: int = 0,
) -> list[dict]:
    """Node/edge records for a synthetic disease-centric graph."""
    rng = SeededRng(seed).derive("kg")
    records: list[dict] = []
    n_symptoms = max(10, n_diseases // 2)
    n_medications = max(8, n_diseases // 3)
    for i in range(n_symptoms):
        records.append({"kind": "node", "id": f"s{i}", "name": f"symptom pattern {i}", "type": "symptom"})
    for i in range(n_medications):
        records.append({"kind": "node", "id": f"m{i}", "name": f"medication {i}", "type": "medication"})

    unassigned_positions = set(rng.sample_indices(n_diseases, unassigned)) if unassigned else set()
    for i in range(n_diseases):
        node = {"kind": "node", "id": f"d{i}", "name": f"disorder {i}", "type": "disease"}
        if i not in unassigned_positions:
            node["department"] = _pick_department(rng)
        records.append(node)
        for _ in range(2 + rng.randbelow(4)):
            if rng.randbelow(2) == 0:
                records.append({"kind": "edge", "src": f"d{i}", "relation": "symptom", "dst": f"s{rng.randbelow(n_symptoms)}"})
            else:
                records.append({"kind": "edge", "src": f"d{i}", "relation": "medication", "dst": f"m{rng.randbelow(n_medications)}"})
    for i in range(dangling_edges):
        records.append({"kind": "edge", "src": f"d{rng.randbelow(n_diseases)}", "relation": "symptom", "dst": f"missing-{i}"})
    return records


def gen_mcq_items(subset: McqSubset, n: int, seed: int, n_options: int = 5) -> list[McqItem]:
    rng = SeededRng(seed).derive(f"mcq:{subset.value}")
    items = []
    for i in range(n):
        letters = [chr(ord("A") + k) for k in range(n_options)]
        gold = letters[rng.randbelow(n_options)]
        options = {letter: f"statement {subset.value}-{i}-{letter}" for letter in letters}
        items.append(
            McqItem(
                id=f"{subset.value}-{i:05d}",
                subset=subset,
                question=f"Exam question {i} for {subset.value}: which statement is correct?",
                options=options,
                gold=gold,
                explanation=f"The correct statement is {gold} because of criterion {i % 7}.",
            )
        )
    return items


def gen_medmcqa_source(n: int, seed: int) -> list[dict]:
    """English multiple-choice source records with explanations."""
    rng = SeededRng(seed).derive("medmcqa")
    records = []
    for i in range(n):
        letters = ["A", "B", "C", "D"]
        gold = letters[rng.randbelow(4)]
        records.append(
            {
                "id": f"medmcqa-{i:06d}",
                "question": f"Which management is preferred in scenario {i}?",
                "options": {letter: f"management plan {letter}{i}" for letter in letters},
                "gold": gold,
                "explanation": f"Plan {gold} is preferred because of guideline {i % 5}.",
            }
        )
    return records


def gen_general_samples(n: int, seed: int, prefix: str) -> list[DialogueSample]:
    rng = SeededRng(seed).derive(f"general:{prefix}")
    samples = []
    for i in range(n):
        topic = f"topic {rng.randbelow(50)}"
        samples.append(
            DialogueSample(
                id=f"{prefix}-{i:06d}",
                source=Source.GENERAL,
                stage_tag=StageTag.STAGE1,
                turns=(
                    Turn(Role.PATIENT, f"Please help me brainstorm about {topic}."),
                    Turn(Role.DOCTOR, f"Here are some structured thoughts about {topic}: first, second, third."),
                ),
            )
        )
    return samples


def gen_eval_pools(seed: int, cmb: int = 80, cmd_per_department: int = 25, cmid_per_category: int = 35):
    """Raw pools for consultation-evaluation set construction."""
    from .datamodel import CMD_DEPARTMENTS, CMID_CATEGORIES

    rng = SeededRng(seed).derive("evalpools")
    cmb_cases = [
        {
            "id": f"cmb-{i:04d}",
            "case_material": (
                f"History summary {i}: patient reports {SYMPTOMS[rng.randbelow(len(SYMPTOMS))]}, "
                f"lab panel {rng.randbelow(100)} within limits, imaging note {rng.randbelow(100)}."
            ),
        }
        for i in range(cmb)
    ]
    cmd_pool = [
        {
            "id": f"cmd-{dept}-{i:04d}",
            "department": dept,
            "query": f"As a {dept} patient I ask question {i}: what should I do about {SYMPTOMS[rng.randbelow(len(SYMPTOMS))]}?",
        }
        for dept in CMD_DEPARTMENTS
        for i in range(cmd_per_department)
    ]
    cmid_pool = [
        {
            "id": f"cmid-{cat}-{i:04d}",
            "category": cat,
            "query": f"({cat}) question {i}: {SYMPTOMS[rng.randbelow(len(SYMPTOMS))]} keeps bothering me.",
        }
        for cat in CMID_CATEGORIES
        for i in range(cmid_per_category)
    ]
    return cmb_cases, cmd_pool, cmid_pool


def gen_valid_samples(n: int, seed: int) -> list[DialogueSample]:
    """Random valid DialogueSamples for serialization round-trip tests."""
    rng = SeededRng(seed).derive("valid_samples")
    sources = list(Source)
    samples = []
    for i in range(n):
        rounds = 1 + rng.randbelow(4)
        turns: list[Turn] = []
        if rng.randbelow(5) == 0:
            turns.append(Turn(Role.SYSTEM, f"system preamble {rng.randbelow(1000)}"))
        for r in range(rounds):
            turns.append(Turn(Role.PATIENT, f"患者 question {i}-{r} with detail {rng.randbelow(10**6)}"))
            meta = {"entities": f"e{rng.randbelow(50)}"} if rng.randbelow(3) == 0 else {}
            turns.append(Turn(Role.DOCTOR, f"医生 reply {i}-{r} advising step {rng.randbelow(10**6)}", meta=meta))
        n_steps = rng.randbelow(3)
        steps = tuple(
            PipelineStep(
                step_name=f"step{k}",
                backend_id="b1",
                prompt_hash=text_digest(f"prompt {i}-{k}"),
                response_hash=text_digest(f"response {i}-{k}"),
                timestamp=float(k),
            )
            for k in range(n_steps)
        )
        samples.append(
            DialogueSample(
                id=f"sample-{i:06d}",
                source=sources[rng.randbelow(len(sources))],
                department=DEPARTMENTS[rng.randbelow(len(DEPARTMENTS))] if rng.randbelow(2) else None,
                stage_tag=StageTag.STAGE1 if rng.randbelow(2) else StageTag.STAGE2,
                turns=tuple(turns),
                provenance=ProvenanceRecord(
                    origin_record_id=f"origin-{i}" if rng.randbelow(2) else None,
                    pipeline_steps=steps,
                    human_edited=bool(rng.randbelow(2)),
                ),
            )
        )
    return samples


DEFAULT_FILTER_RULES = [
    {"kind": "keyword_block", "id": "block-ads", "keywords": [BLOCKED_KEYWORD]},
    {"kind": "min_turns", "id": "min-two-turns", "count": 2},
]


def write_miniature_corpus(out_dir: str | Path, seed: int = 20240901) -> dict:
    """Write a complete miniature input corpus plus pipeline config.

    Sized for desk-scale runs: manifest counts are the full-scale targets
    divided by 1000. Returns a dict of written paths.
    """
    from .pipeline import scaled_manifest

    out = Path(out_dir)
    raw = out / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(parents=True, exist_ok=True)

    taxonomy = synthetic_taxonomy()
    taxonomy.to_file(out / "taxonomy.yaml")

    meddialog = gen_raw_records(500, Source.MEDDIALOG, seed, blocked_count=50)
    cmedqa2 = gen_raw_records(120, Source.CMEDQA2, seed + 1, blocked_count=10)
    write_records((r.to_record() for r in meddialog), raw / "meddialog.jsonl")
    write_records((r.to_record() for r in cmedqa2), raw / "cmedqa2.jsonl")
    write_records(gen_kg_records(200, seed, dangling_edges=3, unassigned=2), raw / "kg.jsonl")
    write_records(gen_medmcqa_source(30, seed), raw / "medmcqa.jsonl")
    write_records((s.to_record() for s in gen_general_samples(50, seed, "moss")), raw / "moss.jsonl")
    write_records((s.to_record() for s in gen_general_samples(10, seed + 1, "alpaca")), raw / "alpaca.jsonl")

    cmb, cmd, cmid = gen_eval_pools(seed)
    write_records(cmb, out / "eval" / "cmb.jsonl")
    write_records(cmd, out / "eval" / "cmd.jsonl")
    write_records(cmid, out / "eval" / "cmid.jsonl")

    with (out / "filter_rules.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(DEFAULT_FILTER_RULES, fh, sort_keys=False)

    manifest = scaled_manifest(divisor=1000, seed=seed)
    config = {
        "seed": seed,
        "paths": {
            "taxonomy": "taxonomy.yaml",
            "filter_rules": "filter_rules.yaml",
            "meddialog": "raw/meddialog.jsonl",
            "cmedqa2": "raw/cmedqa2.jsonl",
            "kg": "raw/kg.jsonl",
            "medmcqa": "raw/medmcqa.jsonl",
            "moss": "raw/moss.jsonl",
            "alpaca": "raw/alpaca.jsonl",
            "out_dir": "out",
        },
        "backends": [
            {
                "backend_id": "builder",
                "kind": "mock",
                "max_concurrency": 4,
                "requests_per_minute": 1_000_000,
                "cache_mode": "off",
            }
        ],
        "builder_backend": "builder",
        "manifest": manifest.to_record(),
        "options": {
            "relations_per_draw": 4,
            "mcq_keep_ratio": 0.25,
            "preference_exemplars": 1,
            "preference_fewshot_k": 2,
            "curation_mode": "auto",
        },
    }
    with (out / "config.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=False, allow_unicode=True)
    return {"config": str(out / "config.yaml"), "out_dir": str(out)}
