from __future__ import annotations

import pytest

from medforge.datamodel import DepartmentDistribution, DiseaseBundle, validate_sample
from medforge.gateway import BackendConfig, BackendKind, Gateway
from medforge.kgqa import (
    facts_block,
    generate_kgqa,
    knowledge_to_qa,
    load_kg,
    qa_to_dialogue,
    sample_bundles,
)
from medforge.sampling import total_variation
from medforge.synthdata import DEPARTMENT_WEIGHTS, gen_kg_records, synthetic_taxonomy
from medforge.taxonomy import DepartmentTaxonomy


@pytest.fixture
def gateway() -> Gateway:
    gw = Gateway()
    gw.register_backend(BackendConfig(backend_id="builder", kind=BackendKind.MOCK))
    return gw


def write_kg(tmp_path, records):
    from medforge.datamodel import write_records

    path = tmp_path / "kg.jsonl"
    write_records(records, path)
    return path


SMALL_KG = [
    {"kind": "node", "id": "d1", "name": "disorder one", "type": "disease", "department": "A"},
    {"kind": "node", "id": "d2", "name": "disorder two", "type": "disease", "department": "A"},
    {"kind": "node", "id": "d3", "name": "disorder three", "type": "disease", "department": "B"},
    {"kind": "node", "id": "s1", "name": "sneezing", "type": "symptom"},
    {"kind": "node", "id": "m1", "name": "tablet", "type": "medication"},
    {"kind": "edge", "src": "d1", "relation": "symptom", "dst": "s1"},
    {"kind": "edge", "src": "d1", "relation": "medication", "dst": "m1"},
    {"kind": "edge", "src": "d2", "relation": "symptom", "dst": "s1"},
    {"kind": "edge", "src": "d3", "relation": "symptom", "dst": "s1"},
    {"kind": "edge", "src": "d3", "relation": "medication", "dst": "m1"},
]


def test_load_small_kg(tmp_path):
    path = write_kg(tmp_path, SMALL_KG)
    loaded = load_kg(path, DepartmentTaxonomy.flat(["A", "B"]))
    assert len(loaded.bundles) == 3
    assert sum(len(b.relations) for b in loaded.bundles) == 5
    assert not loaded.dangling_edges and not loaded.unassigned


def test_load_kg_reports_dangling_edge(tmp_path):
    records = SMALL_KG + [{"kind": "edge", "src": "d1", "relation": "symptom", "dst": "missing"}]
    loaded = load_kg(write_kg(tmp_path, records), DepartmentTaxonomy.flat(["A", "B"]))
    assert len(loaded.dangling_edges) == 1


def test_load_kg_collects_unassigned_and_relationless(tmp_path):
    records = SMALL_KG + [
        {"kind": "node", "id": "d4", "name": "no dept", "type": "disease"},
        {"kind": "edge", "src": "d4", "relation": "symptom", "dst": "s1"},
        {"kind": "node", "id": "d5", "name": "no edges", "type": "disease", "department": "A"},
    ]
    loaded = load_kg(write_kg(tmp_path, records), DepartmentTaxonomy.flat(["A", "B"]))
    assert loaded.unassigned == ("d4",)
    assert loaded.relationless == ("d5",)
    assert len(loaded.bundles) == 3


def test_department_tally_matches_generator(tmp_path):
    records = gen_kg_records(200, seed=8)
    loaded = load_kg(write_kg(tmp_path, records), synthetic_taxonomy())
    expected = {}
    for rec in records:
        if rec.get("kind") == "node" and rec.get("type") == "disease" and rec.get("department"):
            expected[rec["department"]] = expected.get(rec["department"], 0) + 1
    assert loaded.report()["department_tally"] == dict(sorted(expected.items()))


def test_sample_bundles_single_department():
    bundles = [
        DiseaseBundle(disease=f"d{i}", department="A", relations=(("symptom", "s"),))
        for i in range(10)
    ]
    dist = DepartmentDistribution(weights={"A": 1.0})
    picked, warnings = sample_bundles(bundles, dist, 5, seed=1)
    assert len(picked) == 5 and not warnings
    assert all(b.department == "A" for b in picked)


def test_sample_bundles_total_zero():
    picked, warnings = sample_bundles([], DepartmentDistribution(weights={"A": 1.0}), 0, seed=1)
    assert picked == [] and warnings == []


def test_sample_bundles_follows_distribution(tmp_path):
    records = gen_kg_records(2000, seed=10)
    loaded = load_kg(write_kg(tmp_path, records), synthetic_taxonomy())
    dist = DepartmentDistribution(weights=DEPARTMENT_WEIGHTS)
    picked, _ = sample_bundles(loaded.bundles, dist, 1000, seed=2)
    freq: dict[str, float] = {}
    for bundle in picked:
        freq[bundle.department] = freq.get(bundle.department, 0) + 1 / len(picked)
    assert total_variation(freq, dist.weights) <= 0.05


def test_sample_bundles_relation_subset_bounded():
    bundles = [
        DiseaseBundle(
            disease="many", department="A",
            relations=tuple(("symptom", f"s{i}") for i in range(10)),
        )
    ]
    picked, _ = sample_bundles(bundles, DepartmentDistribution(weights={"A": 1.0}), 1, seed=3,
                               relations_per_draw=4)
    assert len(picked[0].relations) == 4
    # subset preserves relation order
    names = [obj for _, obj in picked[0].relations]
    assert names == sorted(names, key=lambda n: int(n[1:]))


def test_knowledge_to_qa_mentions_disease(gateway):
    bundle = DiseaseBundle(disease="disorder one", department="A", relations=(("symptom", "sneezing"),))
    pair = knowledge_to_qa(bundle, gateway, "builder")
    assert "disorder one" in pair.instruction
    assert pair.knowledge_answer
    assert pair.step1.step_name == "kgqa_step1"


def test_knowledge_to_qa_rejects_empty_relations(gateway):
    bundle = DiseaseBundle(disease="empty", department="A", relations=())
    with pytest.raises(ValueError):
        knowledge_to_qa(bundle, gateway, "builder")


def test_prompt_facts_all_come_from_bundle():
    bundle = DiseaseBundle(
        disease="disorder two", department="B",
        relations=(("symptom", "sneezing"), ("medication", "tablet")),
    )
    block = facts_block(bundle)
    lines = block.splitlines()
    assert lines[0] == "disease: disorder two"
    for (relation, obj), line in zip(bundle.relations, lines[1:]):
        assert line == f"{relation}: {obj}"


def test_qa_to_dialogue_includes_answer_verbatim(gateway):
    bundle = DiseaseBundle(disease="disorder one", department="A", relations=(("symptom", "sneezing"),))
    pair = knowledge_to_qa(bundle, gateway, "builder")
    sample = qa_to_dialogue(pair, gateway, "builder", sample_id="kgqa:000001")
    assert validate_sample(sample) == []
    assert len(sample.turns) == 2
    assert pair.knowledge_answer in sample.turns[1].content
    assert sample.stage_tag.value == "stage1"
    assert sample.source.value == "kgqa"
    steps = [s.step_name for s in sample.provenance.pipeline_steps]
    assert steps == ["kgqa_step1", "kgqa_step2"]


def test_generate_100_bundles_zero_quarantine(gateway, tmp_path):
    records = gen_kg_records(100, seed=12)
    loaded = load_kg(write_kg(tmp_path, records), synthetic_taxonomy())
    bundles = list(loaded.bundles)[:100]
    samples, quarantined = generate_kgqa(bundles, gateway, "builder")
    assert len(samples) == len(bundles) and not quarantined
    assert all(validate_sample(s) == [] for s in samples)


def test_generate_count_conservation_with_malformed(gateway):
    bundles = [
        DiseaseBundle(disease="fine", department="A", relations=(("symptom", "s"),)),
        DiseaseBundle(disease="broken [[MALFORM]]", department="A", relations=(("symptom", "s"),)),
    ]
    samples, quarantined = generate_kgqa(bundles, gateway, "builder")
    assert len(samples) + len(quarantined) == 2
    assert len(quarantined) == 1
