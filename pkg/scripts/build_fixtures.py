#!/usr/bin/env python3
"""Rebuild the derived fixtures: enrollment model, trial JSON, cassettes.

Everything here is deterministic, so rerunning the script reproduces the
checked-in fixtures byte for byte. Rerun it after changing the prompt
assets, the data fixtures, or the feature rendering, since cassette
fingerprints cover all of them.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

sys.path.insert(0, str(ROOT / "src"))

from trialagent.engine import EngineSettings, PromptLibrary, predict
from trialagent.gateway import Cassette, ChatMessage, RecordBackend, ScriptedBackend, ToolCallRequest
from trialagent.knowledge import load_drugbank, load_hetionet
from trialagent.risk import (
    EnrollmentModel,
    FEATURE_DIM,
    HASH_DIM,
    build_outcome_table,
    featurize_record,
    load_enrollment_model,
    predict_enrollment,
    save_enrollment_model,
)
from trialagent.tools import ToolContext
from trialagent.trials import format_phase, parse_trial_dataset

CASE_TRIAL_ID = "NCT00311402"
TARGET_FAILURE_RATE = 0.3597


def build_enrollment_model(record) -> EnrollmentModel:
    """Calibrate a model so the bundled case trial scores the target rate.

    Small positive weights go on the case trial's own feature buckets (so
    the model stays input-sensitive) and the bias absorbs the difference to
    hit the target exactly.
    """
    features = featurize_record(record)
    weights = np.zeros(FEATURE_DIM)
    for index in np.nonzero(features[:HASH_DIM])[0]:
        weights[index] = 0.01
    target_success = 1.0 - TARGET_FAILURE_RATE
    bias = math.log(target_success / (1.0 - target_success)) - float(weights @ features)
    return EnrollmentModel(weights=weights, bias=bias)


def case_replies(record) -> list[ChatMessage]:
    drug = record.drugs[0]
    disease = record.diseases[0]
    plan_reply = ChatMessage(
        "assistant",
        "Subproblem 1: Determine the level of enrollment feasibility based on "
        "the trial's inclusion and exclusion criteria.\n"
        f'Subproblem 2: Evaluate the safety of the drug "{drug}".\n'
        f'Subproblem 3: Assess the efficacy of the drug "{drug}" on the '
        f'disease "{disease}".',
    )
    enrollment_call = ChatMessage(
        "assistant",
        "",
        tool_calls=(ToolCallRequest("call_enr_1", "enrollment_prediction_model", "{}"),),
    )
    enrollment_report = ChatMessage(
        "assistant",
        "The enrollment prediction model puts the enrollment failure rate at "
        "0.3597, a moderate level of recruitment difficulty. The criteria "
        "restrict enrollment to patients with a recent confirmed cerebral "
        "infarction and at least one vascular risk factor, which narrows the "
        "eligible population, though the moderate rate suggests the target "
        "is still within reach.",
    )
    safety_calls = ChatMessage(
        "assistant",
        "",
        tool_calls=(
            ToolCallRequest(
                "call_saf_1",
                "drug_historical_statistics",
                json.dumps({"drug_name": drug}),
            ),
            ToolCallRequest(
                "call_saf_2",
                "disease_historical_statistics",
                json.dumps({"disease_name": disease}),
            ),
        ),
    )
    safety_report = ChatMessage(
        "assistant",
        "The historical failure rate of Aggrenox capsule in clinical trials "
        "is reported as 1.0: every recorded trial failed, and trials in "
        "cerebrovascular accident show the same 1.0 failure rate. This "
        "history indicates high risk. Participants carry vascular risk "
        "factors such as hypertension and diabetes, which may raise the "
        "chance of adverse events on a dual antiplatelet regimen.",
    )
    efficacy_calls = ChatMessage(
        "assistant",
        "",
        tool_calls=(
            ToolCallRequest(
                "call_eff_1",
                "retrieval_hetionet",
                json.dumps({"drug_name": drug, "disease_name": disease}),
            ),
            ToolCallRequest(
                "call_eff_2",
                "retrieval_drugbank",
                json.dumps({"drug_name": drug}),
            ),
        ),
    )
    efficacy_report = ChatMessage(
        "assistant",
        "Aggrenox capsule combines aspirin and dipyridamole, giving "
        "complementary antiplatelet and vasodilatory effects. The knowledge "
        "graph shows a direct treats relationship to cerebrovascular "
        "accident plus an indirect route through the platelet gene PTGS1, "
        "so the mechanism of action aligns with secondary stroke prevention "
        "in this population.",
    )
    reasoning_reply = ChatMessage(
        "assistant",
        "The safety record is decisive: every recorded trial of Aggrenox "
        "capsule has failed, and the disease's own trial history is equally "
        "poor. Enrollment difficulty is moderate (failure rate 0.3597), and "
        "although the mechanism plausibly fits the disease, mechanism alone "
        "has not translated into successful trials. Considering the "
        "historical failure rate, the safety concerns, and the moderate "
        "enrollment difficulty, the predicted success rate of the trial is "
        "low, at 0.0.\nPrediction: 0.0",
    )
    return [
        plan_reply,
        enrollment_call,
        enrollment_report,
        safety_calls,
        safety_report,
        efficacy_calls,
        efficacy_report,
        reasoning_reply,
    ]


EVAL_PREDICTIONS = {
    "NCTEVAL001": 0.8,
    "NCTEVAL002": 0.4,
    "NCTEVAL003": 0.7,
    "NCTEVAL004": 0.75,
}


def eval_replies(record, probability: float) -> list[ChatMessage]:
    drug = record.drugs[0]
    disease = record.diseases[0]
    plan_reply = ChatMessage(
        "assistant",
        "Subproblem 1: Determine the level of enrollment feasibility based on "
        "the trial's inclusion and exclusion criteria.\n"
        f'Subproblem 2: Evaluate the safety of the drug "{drug}".\n'
        f'Subproblem 3: Assess the efficacy of the drug "{drug}" on the '
        f'disease "{disease}".',
    )
    return [
        plan_reply,
        ChatMessage(
            "assistant",
            "The eligibility criteria admit a reasonably broad population; "
            "recruitment difficulty looks manageable.",
        ),
        ChatMessage(
            "assistant",
            f"The historical record for {drug} raises no decisive safety "
            "signal beyond the usual class effects.",
        ),
        ChatMessage(
            "assistant",
            f"The pharmacology of {drug} is plausibly relevant to {disease}, "
            "with partial support from the retrieved evidence.",
        ),
        ChatMessage(
            "assistant",
            "Balancing recruitment feasibility, the safety record, and the "
            f"efficacy evidence for {drug} in {disease}, the outlook is as "
            f"scored below.\nPrediction: {probability}",
        ),
    ]


def build_context(records, drugbank_path, hetionet_path, model) -> ToolContext:
    labeled = [r for r in records if r.label is not None]
    return ToolContext(
        drug_store=load_drugbank(drugbank_path.read_bytes()),
        graph=load_hetionet(hetionet_path.read_bytes()),
        drug_table=build_outcome_table(labeled, "drug"),
        disease_table=build_outcome_table(labeled, "disease"),
        enrollment=model,
    )


def record_case(record, ctx, prompts) -> None:
    cassette = Cassette()
    backend = RecordBackend(ScriptedBackend(case_replies(record)), cassette)
    settings = EngineSettings(parallel_specialists=False)
    result = predict(record, backend, ctx, prompts, settings)
    assert result.probability == 0.0 and result.decision == 0, result
    blob = json.dumps(result.to_json_dict())
    assert "0.3597" in blob and "1.0" in blob
    out = FIXTURES / "cassettes" / f"{record.trial_id}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    cassette.save(out)
    print(f"wrote {out} ({len(cassette.entries)} entries)")


def record_eval(records, ctx, prompts) -> None:
    out_dir = FIXTURES / "cassettes" / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    for record in records:
        probability = EVAL_PREDICTIONS[record.trial_id]
        cassette = Cassette()
        backend = RecordBackend(ScriptedBackend(eval_replies(record, probability)), cassette)
        result = predict(record, backend, ctx, prompts, EngineSettings(parallel_specialists=False))
        assert result.probability == probability, (record.trial_id, result.probability)
        cassette.save(out_dir / f"{record.trial_id}.json")
        print(f"wrote {out_dir / (record.trial_id + '.json')} ({len(cassette.entries)} entries)")


def main() -> None:
    records = parse_trial_dataset((FIXTURES / "trials.csv").read_bytes())
    case = next(r for r in records if r.trial_id == CASE_TRIAL_ID)

    model = build_enrollment_model(case)
    save_enrollment_model(
        model,
        FIXTURES / "enrollment_model.json",
        provenance={
            "label_source": "calibrated",
            "note": (
                "weights calibrated so the bundled cerebrovascular-accident "
                "case trial scores an enrollment failure rate of 0.3597; "
                "not fitted to data"
            ),
        },
    )
    reloaded = load_enrollment_model(FIXTURES / "enrollment_model.json")
    failure = 1.0 - predict_enrollment(reloaded, case)
    assert abs(failure - TARGET_FAILURE_RATE) < 1e-9, failure
    print(f"wrote {FIXTURES / 'enrollment_model.json'} (failure rate {failure:.6f})")

    trial_json = {
        "trial_id": case.trial_id,
        "phase": format_phase(case.phase),
        "drugs": list(case.drugs),
        "diseases": list(case.diseases),
        "criteria": case.criteria,
    }
    with open(FIXTURES / "trial_aggrenox.json", "w", encoding="utf-8") as fh:
        json.dump(trial_json, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    print(f"wrote {FIXTURES / 'trial_aggrenox.json'}")

    prompts = PromptLibrary.load()
    ctx = build_context(records, FIXTURES / "drugbank.tsv", FIXTURES / "hetionet.tsv", reloaded)
    record_case(case, ctx, prompts)

    eval_records = parse_trial_dataset((FIXTURES / "trials_eval.csv").read_bytes())
    eval_ctx = build_context(
        eval_records, FIXTURES / "drugbank.tsv", FIXTURES / "hetionet.tsv", reloaded
    )
    record_eval(eval_records, eval_ctx, prompts)


if __name__ == "__main__":
    main()
