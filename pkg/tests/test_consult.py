from __future__ import annotations

import math
import random

import pytest

from medforge.consult import (
    ChatTranscript,
    aggregate,
    build_eval_set,
    evaluate_cases,
    judge,
    open_question,
    parse_judge_verdict,
    render_2dp,
    render_report,
    run_consultation,
)
from medforge.datamodel import (
    CMD_DEPARTMENTS,
    CMID_CATEGORIES,
    EvalCase,
    EvalSource,
    JudgeScore,
    Role,
    Turn,
)
from medforge.errors import GenerationError, StratumShortfallError
from medforge.gateway import BackendConfig, BackendKind, Gateway
from medforge.synthdata import gen_eval_pools


@pytest.fixture
def gateway() -> Gateway:
    gw = Gateway()
    for backend_id in ("doctor", "patient", "referee"):
        gw.register_backend(
            BackendConfig(backend_id=backend_id, kind=BackendKind.MOCK, requests_per_minute=10**6)
        )
    return gw


@pytest.fixture
def pools():
    return gen_eval_pools(seed=42)


def test_build_eval_set_313(pools):
    cmb, cmd, cmid = pools
    cases = build_eval_set(cmb, cmd, cmid, seed=1)
    assert len(cases) == 313
    by_source = {}
    for case in cases:
        by_source[case.source] = by_source.get(case.source, 0) + 1
    assert by_source == {EvalSource.CMB_CLIN: 73, EvalSource.CMD: 120, EvalSource.CMID: 120}
    cmd_groups = {}
    cmid_groups = {}
    for case in cases:
        if case.source is EvalSource.CMD:
            cmd_groups[case.group_key] = cmd_groups.get(case.group_key, 0) + 1
        elif case.source is EvalSource.CMID:
            cmid_groups[case.group_key] = cmid_groups.get(case.group_key, 0) + 1
    assert cmd_groups == {dept: 20 for dept in CMD_DEPARTMENTS}
    assert cmid_groups == {cat: 30 for cat in CMID_CATEGORIES}


def test_build_eval_set_exact_minimum(pools):
    cmb, cmd, cmid = gen_eval_pools(seed=9, cmb=73, cmd_per_department=20, cmid_per_category=30)
    cases = build_eval_set(cmb, cmd, cmid, seed=2)
    assert len(cases) == 313


def test_build_eval_set_shortfall_names_stratum(pools):
    cmb, cmd, cmid = pools
    starved = [rec for rec in cmd if rec["department"] != "oncology"]
    with pytest.raises(StratumShortfallError) as excinfo:
        build_eval_set(cmb, starved, cmid, seed=3)
    assert excinfo.value.department == "oncology"


def test_build_eval_set_deterministic(pools):
    cmb, cmd, cmid = pools
    first = [c.id for c in build_eval_set(cmb, cmd, cmid, seed=4)]
    second = [c.id for c in build_eval_set(cmb, cmd, cmid, seed=4)]
    assert first == second


def test_open_question_cmb_is_deterministic(gateway):
    case = EvalCase(id="c1", source=EvalSource.CMB_CLIN, group_key="", case_material="history: cough 7 days")
    first = open_question(case, gateway, "patient")
    second = open_question(case, gateway, "patient")
    assert first.opening_question == second.opening_question
    assert first.opening_question


def test_open_question_cmd_uses_query_verbatim(gateway):
    case = EvalCase(id="c2", source=EvalSource.CMD, group_key="surgery", case_material="my knee hurts, what now?")
    ready = open_question(case, gateway, "patient")
    assert ready.opening_question == case.case_material


def test_open_question_all_cmb_cases(gateway, pools):
    cmb, _, _ = pools
    cases = [
        EvalCase(id=rec["id"], source=EvalSource.CMB_CLIN, group_key="", case_material=rec["case_material"])
        for rec in cmb[:73]
    ]
    ready = [open_question(c, gateway, "patient") for c in cases]
    assert len(ready) == 73
    assert all(c.opening_question for c in ready)


def consultation_case(case_id="k1") -> EvalCase:
    return EvalCase(
        id=case_id, source=EvalSource.CMID, group_key="symptoms",
        case_material="I keep coughing at night.",
        opening_question="Doctor, I keep coughing at night. What could it be?",
    )


def test_consultation_structure_three_rounds(gateway):
    transcript = run_consultation(consultation_case(), gateway, "doctor", "patient", rounds=3)
    assert transcript.complete
    roles = [t.role for t in transcript.turns]
    assert roles == [Role.PATIENT, Role.DOCTOR] * 3
    assert transcript.doctor_backend == "doctor"
    assert transcript.patient_backend == "patient"
    assert transcript.turns[0].content == consultation_case().opening_question


def test_consultation_single_round(gateway):
    transcript = run_consultation(consultation_case(), gateway, "doctor", "patient", rounds=1)
    assert [t.role for t in transcript.turns] == [Role.PATIENT, Role.DOCTOR]


def test_consultation_failure_marks_partial(gateway):
    from medforge.gateway import TransportFailure

    class FailingBackend:
        def __init__(self):
            self.calls = 0

        def complete(self, request):
            self.calls += 1
            raise TransportFailure("backend down")

    gateway.register_backend(
        BackendConfig(backend_id="broken", kind=BackendKind.MOCK, max_retries=0),
        backend=FailingBackend(),
    )
    transcript = run_consultation(consultation_case(), gateway, "broken", "patient", rounds=3)
    assert not transcript.complete
    assert transcript.failure
    assert len(transcript.turns) == 1  # opening only


def test_parse_judge_verdict_contract():
    verdict = parse_judge_verdict(
        "proactivity: 5\naccuracy: 4\nhelpfulness: 3\nlinguistic_quality: 5"
    )
    assert verdict.average() == 4.25
    with pytest.raises(ValueError):
        parse_judge_verdict("proactivity: 6\naccuracy: 4\nhelpfulness: 3\nlinguistic_quality: 5")
    with pytest.raises(ValueError):
        parse_judge_verdict("proactivity: 4.5\naccuracy: 4\nhelpfulness: 3\nlinguistic_quality: 5")
    with pytest.raises(ValueError):
        parse_judge_verdict("accuracy: 4\nhelpfulness: 3")


def test_judge_scores_five_five(gateway):
    transcript = ChatTranscript(
        case_id="j1", doctor_backend="doctor", patient_backend="patient",
        turns=(Turn(Role.PATIENT, "[[JUDGE:5,5,5,5]] q"), Turn(Role.DOCTOR, "a")),
        complete=True,
    )
    verdict = judge(transcript, gateway, "referee")
    assert verdict == JudgeScore(5.0, 5.0, 5.0, 5.0)
    assert verdict.average() == 5.0


def test_judge_out_of_range_quarantines(gateway):
    transcript = ChatTranscript(
        case_id="j2", doctor_backend="doctor", patient_backend="patient",
        turns=(Turn(Role.PATIENT, "[[JUDGE:6,5,5,5]] q"), Turn(Role.DOCTOR, "a")),
        complete=True,
    )
    with pytest.raises(GenerationError):
        judge(transcript, gateway, "referee")


def test_judge_rejects_incomplete_transcript(gateway):
    transcript = ChatTranscript(
        case_id="j3", doctor_backend="doctor", patient_backend="patient",
        turns=(), complete=False, failure="broke",
    )
    with pytest.raises(ValueError):
        judge(transcript, gateway, "referee")


def test_full_sweep_313_transcripts(gateway, pools):
    cmb, cmd, cmid = pools
    cases = build_eval_set(cmb, cmd, cmid, seed=5)
    results, quarantined = evaluate_cases(
        cases, gateway, "doctor", "patient", judge_backend="referee", rounds=3,
    )
    assert len(results) == 313 and not quarantined
    for _case, transcript, verdict in results:
        assert transcript.complete
        roles = [t.role for t in transcript.turns]
        assert roles == [Role.PATIENT, Role.DOCTOR] * 3
        assert verdict is not None and 1 <= verdict.average() <= 5


def test_aggregate_matches_reported_convention():
    scores = [
        (consultation_case("a"), JudgeScore(4.30, 4.53, 4.55, 5.00)),
    ]
    report = aggregate(scores)
    assert math.isclose(report.overall, 4.595, rel_tol=0, abs_tol=1e-12)
    assert render_2dp(report.overall) == "4.60"


def test_aggregate_single_case_all_threes():
    report = aggregate([(consultation_case("one"), JudgeScore(3, 3, 3, 3))])
    assert report.overall == 3.0
    assert all(v == 3.0 for v in report.metric_means.values())


def test_aggregate_permutation_invariant():
    rng = random.Random(7)
    cases_scores = []
    for i in range(120):
        dept = CMD_DEPARTMENTS[i % 6]
        case = EvalCase(id=f"p{i}", source=EvalSource.CMD, group_key=dept, case_material="q")
        score = JudgeScore(
            1 + rng.randrange(5), 1 + rng.randrange(5), 1 + rng.randrange(5), 1 + rng.randrange(5)
        )
        cases_scores.append((case, score))
    base = aggregate(cases_scores, group_by="department")
    for _ in range(5):
        rng.shuffle(cases_scores)
        again = aggregate(cases_scores, group_by="department")
        assert again.metric_means == base.metric_means
        assert again.overall == base.overall
        assert again.groups == base.groups


def naive_group_means(cases_scores, wanted_source):
    groups = {}
    for case, score in cases_scores:
        if case.source is wanted_source:
            groups.setdefault(case.group_key, []).append(score)
    out = {}
    for key, scores in groups.items():
        metric_sums = {m: 0.0 for m in ("proactivity", "accuracy", "helpfulness", "linguistic_quality")}
        for s in scores:
            for m in metric_sums:
                metric_sums[m] += getattr(s, m)
        out[key] = {m: metric_sums[m] / len(scores) for m in metric_sums}
    return out


def test_grouped_aggregation_matches_naive_recompute():
    rng = random.Random(11)
    cases_scores = []
    for i in range(120):
        dept = CMD_DEPARTMENTS[i % 6]
        case = EvalCase(id=f"g{i}", source=EvalSource.CMD, group_key=dept, case_material="q")
        score = JudgeScore(
            1 + rng.randrange(5), 1 + rng.randrange(5), 1 + rng.randrange(5), 1 + rng.randrange(5)
        )
        cases_scores.append((case, score))
    report = aggregate(cases_scores, group_by="department")
    naive = naive_group_means(cases_scores, EvalSource.CMD)
    assert len(report.groups) == 6
    for row in report.groups:
        for metric, mean in row.metric_means.items():
            assert math.isclose(mean, naive[row.group][metric], rel_tol=0, abs_tol=1e-12)
    overalls = [row.overall for row in report.groups]
    assert overalls == sorted(overalls, reverse=True)


def test_aggregate_excludes_unscored():
    cases_scores = [
        (consultation_case("s1"), JudgeScore(4, 4, 4, 4)),
        (consultation_case("s2"), None),
    ]
    report = aggregate(cases_scores)
    assert report.n_scored == 1 and report.n_excluded == 1
    assert "excluded" in render_report(report)


def test_render_2dp_half_up():
    assert render_2dp(4.595) == "4.60"
    assert render_2dp(4.594) == "4.59"
    assert render_2dp(4.605) == "4.61"
    assert render_2dp(3.0) == "3.00"
