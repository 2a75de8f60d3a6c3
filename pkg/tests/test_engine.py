import json

import pytest

from trialagent.engine import (
    AgentConfig,
    EngineError,
    EngineSettings,
    LoopExhaustedError,
    PipelineError,
    Plan,
    ProbabilityExtractionError,
    build_agent_configs,
    canonical_fallback_plan,
    extract_probability,
    parse_plan_reply,
    plan,
    predict,
    reason,
    run_react,
    serialize_prediction,
)
from trialagent.gateway import Cassette, ChatMessage, RecordBackend, ReplayBackend, ScriptedBackend, ToolCallRequest
from trialagent.risk import OutcomeTable
from trialagent.tools import ToolContext, ToolRegistry, build_role_registries
from trialagent.trials import TrialRecord


def _reply(text):
    return ChatMessage("assistant", text)


def _tool_call_reply(call_id, name, args):
    return ChatMessage("assistant", "", tool_calls=(ToolCallRequest(call_id, name, json.dumps(args)),))


PLAN_REPLY = (
    "Subproblem 1: Determine the level of enrollment feasibility based on the "
    "trial's inclusion and exclusion criteria.\n"
    'Subproblem 2: Evaluate the safety of the drug "Aggrenox capsule".\n'
    'Subproblem 3: Assess the efficacy of the drug "Aggrenox capsule" on the '
    'disease "cerebrovascular accident".'
)


@pytest.fixture
def configs(prompts, tool_context, case_record):
    return build_agent_configs(prompts, build_role_registries(tool_context, case_record))


# ---------------------------------------------------------------------------
# Probability extraction


def test_extracts_case_study_probability():
    text = "…the predicted success rate of the trial is low, at 0.0.\nPrediction: 0.0"
    assert extract_probability(text) == 0.0


def test_integer_prediction_form():
    assert extract_probability("Prediction: 1") == 1.0


def test_out_of_range_prediction_fails_without_clamping():
    with pytest.raises(ProbabilityExtractionError):
        extract_probability("Prediction: 1.7")


def test_last_prediction_wins():
    assert extract_probability("Prediction: 0.2\nOn reflection...\nPrediction: 0.8") == 0.8


def test_fallback_to_final_line_decimal():
    assert extract_probability("Verdict reached.\nThe success probability is 0.35.") == 0.35


def test_no_candidate_is_failure_carrying_text():
    with pytest.raises(ProbabilityExtractionError) as err:
        extract_probability("I am not sure.")
    assert err.value.text == "I am not sure."


# ---------------------------------------------------------------------------
# Plan parsing


def test_parse_cover_plan_reply():
    parsed = parse_plan_reply(PLAN_REPLY)
    assert [role for role, _ in parsed] == ["enrollment", "safety", "efficacy"]
    assert "enrollment feasibility" in parsed[0][1]


def test_malformed_replies_fail_parsing(malformed_plans):
    for case in malformed_plans:
        assert parse_plan_reply(case["reply"]) is None, case["name"]


def test_fallback_plan_parameterized(case_record):
    fallback = canonical_fallback_plan(case_record)
    assert fallback.used_fallback
    assert "Aggrenox capsule" in fallback.statement("safety")
    assert "cerebrovascular accident" in fallback.statement("efficacy")


def test_plan_invariant_requires_exact_cover():
    with pytest.raises(ValueError):
        Plan(subproblems=(("safety", "a"), ("safety", "b"), ("efficacy", "c")))


def test_plan_happy_path(configs, case_record):
    result, transcript = plan(configs["planning"], case_record, ScriptedBackend([_reply(PLAN_REPLY)]))
    assert not result.used_fallback
    assert result.statement("enrollment").startswith("Determine the level")
    assert transcript.iteration_count == 1
    assert all(step.kind != "note" for step in transcript.steps)


def test_plan_falls_back_on_garbled_reply(configs, case_record):
    result, transcript = plan(
        configs["planning"], case_record, ScriptedBackend([_reply("I cannot help")])
    )
    assert result.used_fallback
    assert any(step.kind == "note" and "fallback" in step.content for step in transcript.steps)


def test_plan_falls_back_on_each_malformed_fixture(configs, case_record, malformed_plans):
    for case in malformed_plans:
        result, _ = plan(
            configs["planning"], case_record, ScriptedBackend([_reply(case["reply"])])
        )
        assert result.used_fallback, case["name"]


def test_agent_config_invariants(prompts, tool_context, case_record):
    registries = build_role_registries(tool_context, case_record)
    with pytest.raises(ValueError):
        AgentConfig("planning", "p", tool_registry=registries["safety"])
    with pytest.raises(ValueError):
        AgentConfig("safety", "p", tool_registry=None)
    with pytest.raises(ValueError):
        AgentConfig("safety", "p", tool_registry=ToolRegistry())


# ---------------------------------------------------------------------------
# ReAct loop


def test_tool_call_then_report_is_two_iterations(configs, case_record):
    backend = ScriptedBackend(
        [
            _tool_call_reply("c1", "enrollment_prediction_model", {}),
            _reply("Enrollment failure rate 0.3597 indicates moderate difficulty."),
        ]
    )
    transcript = run_react(configs["enrollment"], "Assess enrollment.", case_record, backend)
    assert transcript.iteration_count == 2
    kinds = [step.kind for step in transcript.steps]
    assert kinds == ["tool_call", "tool_result", "assistant"]
    assert "0.3597" in transcript.steps[1].content
    assert transcript.final_report.startswith("Enrollment failure rate")


def test_immediate_answer_is_one_iteration(configs, case_record):
    backend = ScriptedBackend([_reply("No tools needed; risk is unquantifiable.")])
    transcript = run_react(configs["safety"], "Assess safety.", case_record, backend)
    assert transcript.iteration_count == 1
    assert transcript.final_report == "No tools needed; risk is unquantifiable."


def test_unknown_tool_is_survivable_observation(configs, case_record):
    backend = ScriptedBackend(
        [
            _tool_call_reply("c1", "frobnicate", {}),
            _reply("Recovered after the failed call."),
        ]
    )
    transcript = run_react(configs["efficacy"], "Assess efficacy.", case_record, backend)
    error_steps = [s for s in transcript.steps if s.kind == "tool_result" and s.is_error]
    assert len(error_steps) == 1
    assert error_steps[0].content == "unknown tool frobnicate"
    assert transcript.final_report == "Recovered after the failed call."


def test_iteration_cap_raises_with_transcript(prompts, tool_context, case_record):
    registries = build_role_registries(tool_context, case_record)
    config = AgentConfig(
        "enrollment",
        prompts.system("enrollment"),
        tool_registry=registries["enrollment"],
        max_iterations=3,
    )
    backend = ScriptedBackend(
        [_tool_call_reply(f"c{i}", "enrollment_prediction_model", {}) for i in range(3)]
    )
    with pytest.raises(LoopExhaustedError) as err:
        run_react(config, "Assess enrollment.", case_record, backend)
    transcript = err.value.transcript
    assert transcript.iteration_count == 3
    assert len([s for s in transcript.steps if s.kind == "tool_call"]) == 3


# ---------------------------------------------------------------------------
# Reasoning


def test_reason_parses_threshold_probability(configs, case_record):
    reports = {"enrollment": "fine", "safety": "fine", "efficacy": "fine"}
    probability, text = reason(
        configs["reasoning"], reports, case_record, ScriptedBackend([_reply("All good.\nPrediction: 0.85")])
    )
    assert probability == 0.85
    assert text.endswith("Prediction: 0.85")


def test_reason_requires_all_reports(configs, case_record):
    with pytest.raises(EngineError):
        reason(configs["reasoning"], {"safety": "x"}, case_record, ScriptedBackend([]))


def test_reason_extraction_failure_carries_raw_text(configs, case_record):
    reports = {"enrollment": "a", "safety": "b", "efficacy": "c"}
    with pytest.raises(ProbabilityExtractionError) as err:
        reason(configs["reasoning"], reports, case_record, ScriptedBackend([_reply("no verdict")]))
    assert err.value.text == "no verdict"


# ---------------------------------------------------------------------------
# predict()


def _scripted_full_run(reports=None, reasoning="Weighing everything.\nPrediction: 0.5"):
    reports = reports or {
        "enrollment": "enrollment looks fine",
        "safety": "safety looks fine",
        "efficacy": "efficacy looks fine",
    }
    return [
        _reply(PLAN_REPLY),
        _reply(reports["enrollment"]),
        _reply(reports["safety"]),
        _reply(reports["efficacy"]),
        _reply(reasoning),
    ]


def test_tie_probability_decides_success(tool_context, prompts, case_record):
    backend = ScriptedBackend(_scripted_full_run())
    result = predict(
        case_record, backend, tool_context, prompts, EngineSettings(parallel_specialists=False)
    )
    assert result.probability == 0.5
    assert result.decision == 1


def test_unknown_drug_pipeline_reports_missing_data(prompts, drug_store, hetio_graph, enrollment_model):
    record = TrialRecord("TX", 2, ("unseen compound",), ("unseen disease",), "")
    ctx = ToolContext(
        drug_store=drug_store,
        graph=hetio_graph,
        drug_table=OutcomeTable({}, "drug"),
        disease_table=OutcomeTable({}, "disease"),
        enrollment=enrollment_model,
    )
    replies = [
        _reply(
            "1. Judge enrollment feasibility from the criteria.\n"
            "2. Judge the safety risk of unseen compound.\n"
            "3. Judge the efficacy of unseen compound against unseen disease."
        ),
        _reply("Enrollment is hard to judge without criteria."),
        _tool_call_reply("c1", "drug_historical_statistics", {"drug_name": "unseen compound"}),
        _reply("There is no historical data for this drug, so risk is unknown."),
        _reply("No efficacy evidence either way."),
        _reply("Without evidence the outlook is uncertain.\nPrediction: 0.4"),
    ]
    result = predict(
        record, ScriptedBackend(replies), ctx, prompts, EngineSettings(parallel_specialists=False)
    )
    assert "no historical data" in result.subproblem_reports["safety"].lower()
    safety_steps = result.transcripts["safety"].steps
    assert any("No historical data" in s.content for s in safety_steps if s.kind == "tool_result")
    assert result.decision == 0


def test_replay_is_byte_identical_across_specialist_orderings(tool_context, prompts, case_record):
    sentinel_reports = {
        "enrollment": "SENTINEL_ENROLLMENT report",
        "safety": "SENTINEL_SAFETY report",
        "efficacy": "SENTINEL_EFFICACY report",
    }
    cassette = Cassette()
    backend = RecordBackend(ScriptedBackend(_scripted_full_run(sentinel_reports)), cassette)
    sequential = predict(
        case_record, backend, tool_context, prompts, EngineSettings(parallel_specialists=False)
    )

    replays = []
    for _ in range(3):
        replay_backend = ReplayBackend(Cassette(list(cassette.entries), mode="replay"))
        replays.append(
            predict(case_record, replay_backend, tool_context, prompts, EngineSettings())
        )
    blobs = {serialize_prediction(r) for r in replays}
    assert blobs == {serialize_prediction(sequential)}


def test_specialist_transcripts_are_isolated(tool_context, prompts, case_record):
    sentinel_reports = {
        "enrollment": "SENTINEL_ENROLLMENT report",
        "safety": "SENTINEL_SAFETY report",
        "efficacy": "SENTINEL_EFFICACY report",
    }
    backend = ScriptedBackend(_scripted_full_run(sentinel_reports))
    result = predict(
        case_record, backend, tool_context, prompts, EngineSettings(parallel_specialists=False)
    )
    sentinels = {role: f"SENTINEL_{role.upper()}" for role in sentinel_reports}
    for role in sentinels:
        blob = json.dumps(result.transcripts[role].to_json_dict())
        for other, token in sentinels.items():
            if other != role:
                assert token not in blob


def test_pipeline_error_carries_partial_transcripts(tool_context, prompts, case_record):
    replies = [
        _reply(PLAN_REPLY),
        _tool_call_reply("c1", "enrollment_prediction_model", {}),
        _tool_call_reply("c2", "enrollment_prediction_model", {}),
        _reply("safety fine"),
        _reply("efficacy fine"),
    ]
    backend = ScriptedBackend(replies)
    settings = EngineSettings(parallel_specialists=False, max_iterations=2)
    with pytest.raises(PipelineError) as err:
        predict(case_record, backend, tool_context, prompts, settings)
    assert err.value.stage == "specialist:enrollment"
    assert "planning" in err.value.transcripts
    assert "enrollment" in err.value.transcripts  # the exhausted partial transcript
    assert err.value.transcripts["safety"].final_report == "safety fine"


def test_serialized_result_shape(tool_context, prompts, case_record):
    backend = ScriptedBackend(_scripted_full_run())
    result = predict(
        case_record, backend, tool_context, prompts, EngineSettings(parallel_specialists=False)
    )
    payload = json.loads(serialize_prediction(result))
    assert set(payload) == {"trial_id", "probability", "decision", "reports", "transcripts"}
    assert set(payload["reports"]) == {"enrollment", "safety", "efficacy"}
    assert set(payload["transcripts"]) == {"planning", "enrollment", "safety", "efficacy", "reasoning"}
