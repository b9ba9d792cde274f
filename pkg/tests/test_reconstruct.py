from __future__ import annotations

import pytest

from medforge.datamodel import Role, Source, validate_sample
from medforge.errors import GenerationError
from medforge.gateway import BackendConfig, BackendKind, Gateway, request_digest
from medforge.reconstruct import (
    FilterRule,
    RawRecord,
    RegexGazetteer,
    adapt_verbatim,
    build_rewrite_prompt,
    check_fidelity,
    filter_records,
    parse_turn_lines,
    reconstruct,
    reconstruct_corpus,
)
from medforge.synthdata import BLOCKED_KEYWORD, gen_raw_records


@pytest.fixture
def gateway() -> Gateway:
    gw = Gateway()
    gw.register_backend(BackendConfig(backend_id="builder", kind=BackendKind.MOCK))
    return gw


def record(turns, record_id="r1", source=Source.MEDDIALOG, department="surgery") -> RawRecord:
    return RawRecord(id=record_id, source=source, department=department, turns=tuple(turns))


BASIC = [("patient", "I have a cough"), ("doctor", "Take syrup B and rest")]


def test_blocked_keyword_rejects_with_rule_id():
    rules = [FilterRule(kind="keyword_block", rule_id="no-ads", keywords=("advert",))]
    records = [
        record(BASIC, "clean"),
        record([("patient", "q"), ("doctor", "see this advert now")], "dirty"),
    ]
    outcome = filter_records(records, rules)
    assert [r.id for r in outcome.kept] == ["clean"]
    assert [(r.id, reason) for r, reason in outcome.rejected] == [("dirty", "no-ads")]


def test_empty_rule_set_keeps_everything():
    records = [record(BASIC, f"r{i}") for i in range(5)]
    outcome = filter_records(records, [])
    assert len(outcome.kept) == 5 and not outcome.rejected


def test_first_failing_rule_wins():
    rules = [
        FilterRule(kind="min_turns", rule_id="min2", count=2),
        FilterRule(kind="keyword_block", rule_id="no-x", keywords=("x",)),
    ]
    outcome = filter_records([record([("patient", "x only")], "both")], rules)
    assert outcome.rejected[0][1] == "min2"


def test_keyword_require_and_entity_require():
    rules = [
        FilterRule(kind="keyword_require", rule_id="needs-cough", keywords=("cough",)),
        FilterRule(kind="entity_require", rule_id="needs-entity", count=1),
    ]
    detector = RegexGazetteer(["syrup B"])
    records = [record(BASIC, "ok"), record([("patient", "no match"), ("doctor", "nothing")], "bad")]
    outcome = filter_records(records, rules, entity_detector=detector)
    assert [r.id for r in outcome.kept] == ["ok"]
    assert outcome.rejected[0][1] == "needs-cough"


def test_entity_detector_failure_routes_to_rejected():
    def broken(_text):
        raise RuntimeError("model crashed")

    rules = [FilterRule(kind="entity_require", rule_id="needs-entity", count=1)]
    outcome = filter_records([record(BASIC)], rules, entity_detector=broken)
    assert not outcome.kept
    assert "entity_detector_error" in outcome.rejected[0][1]


def test_filter_is_stable_partition():
    rules = [FilterRule(kind="keyword_block", rule_id="b", keywords=(BLOCKED_KEYWORD,))]
    records = gen_raw_records(200, Source.MEDDIALOG, seed=3, blocked_count=60)
    outcome = filter_records(records, rules)
    kept_ids = [r.id for r in outcome.kept]
    rejected_ids = [r.id for r, _ in outcome.rejected]
    assert len(kept_ids) == 140 and len(rejected_ids) == 60
    # stable: order within each side follows input order
    positions = {r.id: i for i, r in enumerate(records)}
    assert kept_ids == sorted(kept_ids, key=positions.__getitem__)
    assert rejected_ids == sorted(rejected_ids, key=positions.__getitem__)


def test_known_violation_count_1000_records():
    rules = [FilterRule(kind="keyword_block", rule_id="b", keywords=(BLOCKED_KEYWORD,))]
    records = gen_raw_records(1000, Source.MEDDIALOG, seed=17, blocked_count=300)
    outcome = filter_records(records, rules)
    assert len(outcome.kept) == 700


def test_load_filter_rules_from_yaml(tmp_path):
    from medforge.reconstruct import load_filter_rules

    path = tmp_path / "rules.yaml"
    path.write_text(
        "- kind: keyword_block\n  id: no-ads\n  keywords: [advert, spam]\n"
        "- kind: min_turns\n  count: 2\n",
        encoding="utf-8",
    )
    rules = load_filter_rules(path)
    assert [r.rule_id for r in rules] == ["no-ads", "1:min_turns"]
    assert rules[0].keywords == ("advert", "spam")
    assert rules[1].count == 2


def test_rewrite_prompt_structure():
    rec = record(
        [("patient", "q1"), ("doctor", "a1"), ("patient", "q2"),
         ("doctor", "please register for an appointment")],
        "r9",
    )
    request = build_rewrite_prompt(rec, "builder")
    prompt = request.messages[-1].content
    from medforge.gateway import extract_block

    block = extract_block(prompt, "DIALOGUE")
    assert block.count("PATIENT:") == 2 and block.count("DOCTOR:") == 2
    # rewriting disallowed actions is the backend's job: the turn stays in
    assert "register for an appointment" in block
    for marker in ("1.", "2.", "3."):
        assert marker in prompt


def test_rewrite_prompt_digest_stable():
    rec = record(BASIC)
    d1 = request_digest(build_rewrite_prompt(rec, "builder"))
    d2 = request_digest(build_rewrite_prompt(rec, "builder"))
    assert d1 == d2


def test_parse_turn_lines_contract():
    parsed = parse_turn_lines("PATIENT: hi\nDOCTOR: hello\nEND")
    assert parsed == [(Role.PATIENT, "hi"), (Role.DOCTOR, "hello")]
    with pytest.raises(ValueError):
        parse_turn_lines("PATIENT: hi\nDOCTOR: hello")  # no END
    with pytest.raises(ValueError):
        parse_turn_lines("NARRATOR: hi\nEND")
    with pytest.raises(ValueError):
        parse_turn_lines("END")


def test_reconstruct_under_mock(gateway):
    rec = record(BASIC, "r42")
    sample = reconstruct(rec, gateway, "builder")
    assert validate_sample(sample) == []
    assert sample.id == "recon:r42"
    assert sample.source is Source.MEDDIALOG
    assert sample.department == "surgery"
    assert sample.provenance.origin_record_id == "r42"
    assert sample.provenance.human_edited is False
    assert len(sample.provenance.pipeline_steps) == 1
    assert sample.provenance.pipeline_steps[0].step_name == "reconstruct"
    # patient turns pass through unmodified
    assert sample.turns[0].content == "I have a cough"


def test_reconstruct_malformed_twice_quarantines(gateway):
    rec = record([("patient", "[[MALFORM]] please"), ("doctor", "ok")], "bad1")
    with pytest.raises(GenerationError):
        reconstruct(rec, gateway, "builder")
    samples, quarantined = reconstruct_corpus([rec], gateway, "builder")
    assert not samples
    assert len(quarantined) == 1
    assert quarantined[0].item_id == "bad1"
    assert quarantined[0].raw_response


def test_corpus_of_200_records_end_to_end(gateway):
    records = gen_raw_records(200, Source.MEDDIALOG, seed=5)
    samples, quarantined = reconstruct_corpus(records, gateway, "builder")
    assert len(samples) == 200 and not quarantined
    assert all(validate_sample(s) == [] for s in samples)
    # deterministic end to end under the mock
    again, _ = reconstruct_corpus(records, gateway, "builder")
    assert [s.to_record() for s in samples] == [s.to_record() for s in again]
    # output order is input order
    assert [s.provenance.origin_record_id for s in samples] == [r.id for r in records]


def test_fidelity_identity_and_emptiness():
    rec = record(BASIC, "f1")
    rebuilt = adapt_verbatim(rec)
    report = check_fidelity(rec, rebuilt, terms=["syrup B", "absent-term"])
    assert report.patient_turns_equal
    assert report.term_retention == 1.0
    assert report.doctor_length_ratio == 1.0

    dropped = adapt_verbatim(record([("patient", "I have a cough"), ("doctor", "nothing kept")], "f2"))
    report = check_fidelity(rec, dropped, terms=["syrup B"])
    assert report.term_retention == 0.0


def test_fidelity_mean_half_markers():
    # rewrites drop exactly half of the injected marker terms
    terms = [f"marker{i}" for i in range(10)]
    rec = record(
        [("patient", "q"), ("doctor", "reply with " + " ".join(terms))], "half"
    )
    kept_half = " ".join(terms[:5])
    rebuilt = adapt_verbatim(
        record([("patient", "q"), ("doctor", f"reply with {kept_half}")], "half-rebuilt")
    )
    report = check_fidelity(rec, rebuilt, terms=terms)
    assert report.term_retention == 0.5


def test_adapt_verbatim_merges_and_trims():
    rec = record(
        [("patient", "part one"), ("patient", "part two"), ("doctor", "answer"), ("patient", "trailing")],
        "m1",
    )
    sample = adapt_verbatim(rec)
    assert sample is not None
    assert [t.role for t in sample.turns] == [Role.PATIENT, Role.DOCTOR]
    assert sample.turns[0].content == "part one part two"
    assert adapt_verbatim(record([("doctor", "only doctor")], "m2")) is None
