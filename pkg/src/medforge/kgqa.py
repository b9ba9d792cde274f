"""Disease-centric knowledge-graph ingestion and two-step QA generation.

The graph file is line-delimited: node records ``{kind: node, id, name,
type, department?}`` and edge records ``{kind: edge, src, relation, dst}``.
Every disease node with at least one outgoing edge becomes a DiseaseBundle.
Generation then runs two backend steps per bundle: facts to a plain QA
pair, then the QA pair to a single-turn consultation sample. Each emitted
sample carries both steps in its provenance, in order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .datamodel import (
    DepartmentDistribution,
    DialogueSample,
    DiseaseBundle,
    PipelineStep,
    ProvenanceRecord,
    QuarantineEntry,
    Role,
    Source,
    StageTag,
    Turn,
    read_records,
    validate_sample,
)
from .errors import GenerationError
from .gateway import (
    ChatRequest,
    Gateway,
    Message,
    MsgRole,
    TAG_KGQA_STEP1,
    TAG_KGQA_STEP2,
    format_block,
    run_ordered,
    text_digest,
)
from .reconstruct import chat_with_retry, parse_turn_lines
from .sampling import SamplePlan, SeededRng, apportion_capped, draw_stratified
from .taxonomy import DepartmentTaxonomy


@dataclass(frozen=True)
class KgLoadResult:
    bundles: tuple[DiseaseBundle, ...]
    dangling_edges: tuple[dict, ...]
    unassigned: tuple[str, ...]      # disease ids with no department
    relationless: tuple[str, ...]    # disease ids with no outgoing edges

    def report(self) -> dict:
        tally: dict[str, int] = {}
        for bundle in self.bundles:
            tally[bundle.department] = tally.get(bundle.department, 0) + 1
        return {
            "bundles": len(self.bundles),
            "relations": sum(len(b.relations) for b in self.bundles),
            "dangling_edges": len(self.dangling_edges),
            "unassigned": len(self.unassigned),
            "relationless": len(self.relationless),
            "department_tally": {k: tally[k] for k in sorted(tally)},
        }


def load_kg(path: str | Path, taxonomy: DepartmentTaxonomy) -> KgLoadResult:
    """Parse the graph file into per-disease bundles.

    Dangling edges (either endpoint missing) are reported, diseases
    without a department are excluded from stratified sampling but
    counted, and department labels are resolved to taxonomy leaves.
    """
    nodes: dict[str, dict] = {}
    edges: list[dict] = []
    for rec in read_records(path):
        if rec.get("kind") == "node":
            nodes[rec["id"]] = rec
        elif rec.get("kind") == "edge":
            edges.append(rec)
        else:
            raise ValueError(f"{path}: record without kind node/edge: {rec}")

    dangling: list[dict] = []
    relations_by_disease: dict[str, list[tuple[str, str]]] = {}
    for edge in edges:
        src, dst = nodes.get(edge["src"]), nodes.get(edge["dst"])
        if src is None or dst is None:
            dangling.append(edge)
            continue
        if src.get("type") == "disease":
            relations_by_disease.setdefault(edge["src"], []).append((edge["relation"], dst["name"]))

    bundles: list[DiseaseBundle] = []
    unassigned: list[str] = []
    relationless: list[str] = []
    for node_id, node in nodes.items():
        if node.get("type") != "disease":
            continue
        relations = relations_by_disease.get(node_id)
        if not relations:
            relationless.append(node_id)
            continue
        department = node.get("department")
        if not department:
            unassigned.append(node_id)
            continue
        leaf = taxonomy.resolve_leaf(department)
        bundles.append(DiseaseBundle(disease=node["name"], department=leaf, relations=tuple(relations)))
    return KgLoadResult(
        bundles=tuple(bundles),
        dangling_edges=tuple(dangling),
        unassigned=tuple(unassigned),
        relationless=tuple(relationless),
    )


def sample_bundles(
    bundles: Sequence[DiseaseBundle],
    dist: DepartmentDistribution,
    total: int,
    seed: int,
    relations_per_draw: int = 4,
) -> tuple[list[DiseaseBundle], list[dict]]:
    """Draw ``total`` bundles following the department distribution.

    Quota for a department with too few diseases is redistributed to the
    remaining departments proportionally, with a warning record per capped
    department. Each drawn bundle keeps a seeded subset of at most
    ``relations_per_draw`` of its relations, preserving relation order.
    """
    if total == 0:
        return [], []
    available: dict[str, int] = {}
    for bundle in bundles:
        available[bundle.department] = available.get(bundle.department, 0) + 1

    counts, warnings = apportion_capped(dist.weights, total, available, seed)
    plan = SamplePlan(per_department_counts=counts, total=total, seed=seed)
    drawn = draw_stratified(bundles, plan, seed, department_of=lambda b: b.department)

    rng = SeededRng(seed).derive("relation_subset")
    trimmed: list[DiseaseBundle] = []
    for index, bundle in enumerate(drawn):
        sub = rng.derive(f"{index}:{bundle.disease}")
        keep = min(len(bundle.relations), relations_per_draw)
        picked = sub.sample_indices(len(bundle.relations), keep)
        trimmed.append(
            DiseaseBundle(
                disease=bundle.disease,
                department=bundle.department,
                relations=tuple(bundle.relations[i] for i in picked),
            )
        )
    return trimmed, warnings


@dataclass(frozen=True)
class QaPair:
    """Intermediate product of step 1: a plain instruction/answer pair."""

    instruction: str
    knowledge_answer: str
    disease: str
    department: str
    step1: PipelineStep


def facts_block(bundle: DiseaseBundle) -> str:
    lines = [f"disease: {bundle.disease}"]
    lines.extend(f"{relation}: {obj}" for relation, obj in bundle.relations)
    return "\n".join(lines)


def knowledge_to_qa(bundle: DiseaseBundle, gateway: Gateway, backend_id: str, temperature: float = 0.7) -> QaPair:
    """Step 1: turn a bundle's facts into one natural-language QA pair.

    The prompt carries only facts taken verbatim from the bundle; the
    backend contributes phrasing, never new medical claims.
    """
    if not bundle.relations:
        raise ValueError(f"bundle {bundle.disease!r} has no relations")
    user = (
        "Turn the medical facts below into one simple question a patient might ask, "
        "and its answer. Use only the facts given; do not add medical claims.\n"
        "Answer in exactly this format:\n"
        "INSTRUCTION: <the question>\n"
        "ANSWER: <the answer>\n"
        "END\n\n"
        f"{format_block('FACTS', facts_block(bundle))}"
    )
    request = ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, user),),
        temperature=temperature,
        max_tokens=1024,
        request_tag=TAG_KGQA_STEP1,
    )

    def parse(content: str) -> tuple[str, str]:
        instruction, answer = "", ""
        for line in content.splitlines():
            line = line.strip()
            if line.startswith("INSTRUCTION:"):
                instruction = line[len("INSTRUCTION:"):].strip()
            elif line.startswith("ANSWER:"):
                answer = line[len("ANSWER:"):].strip()
        if not instruction or not answer:
            raise ValueError("response lacks INSTRUCTION/ANSWER lines")
        return instruction, answer

    (instruction, answer), response, prompt_hash = chat_with_retry(gateway, request, parse)
    return QaPair(
        instruction=instruction,
        knowledge_answer=answer,
        disease=bundle.disease,
        department=bundle.department,
        step1=PipelineStep(
            step_name=TAG_KGQA_STEP1,
            backend_id=backend_id,
            prompt_hash=prompt_hash,
            response_hash=text_digest(response.content),
            timestamp=response.timestamp,
        ),
    )


def qa_to_dialogue(
    pair: QaPair,
    gateway: Gateway,
    backend_id: str,
    sample_id: str,
    temperature: float = 0.7,
) -> DialogueSample:
    """Step 2: recast the QA pair as a single-turn consultation."""
    if not pair.instruction or not pair.knowledge_answer:
        raise ValueError("QA pair is empty")
    qa_text = f"INSTRUCTION: {pair.instruction}\nANSWER: {pair.knowledge_answer}"
    user = (
        "Rewrite this question and answer as one exchange between a patient and a "
        "doctor in a medical consultation. Keep every fact from the answer.\n"
        "Answer in exactly this format:\n"
        "PATIENT: <what the patient says>\n"
        "DOCTOR: <what the doctor says>\n"
        "END\n\n"
        f"{format_block('QA', qa_text)}"
    )
    request = ChatRequest(
        backend_id=backend_id,
        messages=(Message(MsgRole.USER, user),),
        temperature=temperature,
        max_tokens=1024,
        request_tag=TAG_KGQA_STEP2,
    )

    def parse(content: str) -> tuple[str, str]:
        turns = parse_turn_lines(content)
        if len(turns) != 2 or turns[0][0] is not Role.PATIENT or turns[1][0] is not Role.DOCTOR:
            raise ValueError("expected exactly one PATIENT line and one DOCTOR line")
        return turns[0][1], turns[1][1]

    (patient, doctor), response, prompt_hash = chat_with_retry(gateway, request, parse)
    step2 = PipelineStep(
        step_name=TAG_KGQA_STEP2,
        backend_id=backend_id,
        prompt_hash=prompt_hash,
        response_hash=text_digest(response.content),
        timestamp=max(response.timestamp, pair.step1.timestamp),
    )
    sample = DialogueSample(
        id=sample_id,
        source=Source.KGQA,
        department=pair.department,
        stage_tag=StageTag.STAGE1,
        turns=(Turn(Role.PATIENT, patient), Turn(Role.DOCTOR, doctor)),
        provenance=ProvenanceRecord(pipeline_steps=(pair.step1, step2)),
    )
    violations = validate_sample(sample)
    if violations:
        raise GenerationError(
            f"generated sample invalid: {violations[0]}",
            raw_response=response.content,
            prompt_hash=prompt_hash,
        )
    return sample


def generate_kgqa(
    bundles: Sequence[DiseaseBundle],
    gateway: Gateway,
    backend_id: str,
    id_prefix: str = "kgqa",
    max_workers: int = 4,
) -> tuple[list[DialogueSample], list[QuarantineEntry]]:
    """Run both steps over sampled bundles; emitted + quarantined equals
    the number of bundles."""

    def one(indexed: tuple[int, DiseaseBundle]):
        index, bundle = indexed
        try:
            pair = knowledge_to_qa(bundle, gateway, backend_id)
            return qa_to_dialogue(pair, gateway, backend_id, sample_id=f"{id_prefix}:{index:06d}")
        except GenerationError as exc:
            return QuarantineEntry(
                item_id=f"{id_prefix}:{index:06d}",
                step_name=f"{TAG_KGQA_STEP1}/{TAG_KGQA_STEP2}",
                reason=str(exc),
                raw_response=exc.raw_response,
                prompt_hash=exc.prompt_hash,
            )

    results = run_ordered(list(enumerate(bundles)), one, max_workers=max_workers)
    samples = [r for r in results if isinstance(r, DialogueSample)]
    quarantined = [r for r in results if isinstance(r, QuarantineEntry)]
    return samples, quarantined
