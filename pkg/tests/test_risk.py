import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialagent.risk import (
    EnrollmentModel,
    FEATURE_DIM,
    HASH_DIM,
    OutcomeTable,
    UnlabeledRecordError,
    balanced_sample_weights,
    build_outcome_table,
    entity_failure_rate,
    featurize,
    featurize_record,
    fit_logistic,
    fnv1a_64,
    fuzzy_match,
    hash_bucket,
    levenshtein,
    load_enrollment_model,
    loss_and_gradient,
    name_similarity,
    predict_enrollment,
    save_enrollment_model,
    train_enrollment,
    trial_entity_risk,
    ExternalEnrollmentPredictor,
)
from trialagent.trials import SegmentedCriteria, TrialRecord, normalize_name


def _trial(trial_id, drugs, diseases=("stroke",), label=None, criteria=""):
    return TrialRecord(trial_id, 2, tuple(drugs), tuple(diseases), criteria, label=label)


# ---------------------------------------------------------------------------
# Fuzzy matching


def test_identity_similarity():
    assert name_similarity("aggrenox capsule", "aggrenox capsule") == 1.0
    assert fuzzy_match("aggrenox capsule", {"aggrenox capsule"}) == ("aggrenox capsule", 1.0)


def test_plural_within_threshold():
    match = fuzzy_match("aggrenox capsules", {"aggrenox capsule"})
    assert match is not None
    key, similarity = match
    assert key == "aggrenox capsule"
    assert similarity == pytest.approx(1 - 1 / 17)


def test_distant_names_do_not_match():
    # Hand-checked edit distance: warfarin -> aspirin takes 4 edits
    # (delete w, then r->s, f->p, a->i), so similarity is 0.5.
    assert levenshtein("warfarin", "aspirin") == 4
    assert name_similarity("warfarin", "aspirin") == 0.5
    assert fuzzy_match("warfarin", {"aspirin"}) is None


def test_tie_breaks_to_lexicographically_smallest():
    # Both keys are one edit away from the query.
    match = fuzzy_match("drugx", {"drugy", "drugb"})
    assert match[0] == "drugb"


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=12), st.text(max_size=12))
def test_similarity_symmetric_and_one_iff_equal(a, b):
    assert name_similarity(a, b) == name_similarity(b, a)
    assert (name_similarity(a, b) == 1.0) == (normalize_name(a) == normalize_name(b))


# ---------------------------------------------------------------------------
# Outcome tables


def test_hand_counted_table():
    records = [
        _trial("T1", ["X"], label=1),
        _trial("T2", ["X"], label=0),
        _trial("T3", ["X"], label=1),
    ]
    table = build_outcome_table(records, "drug")
    assert table.entries["x"] == (2, 3)


def test_singleton_and_empty_tables():
    table = build_outcome_table([_trial("T1", ["solo"], label=1)], "drug")
    assert table.entries["solo"] == (1, 1)
    assert build_outcome_table([], "drug").entries == {}


def test_multi_drug_trial_counts_for_each():
    table = build_outcome_table([_trial("T1", ["a-drug", "b-drug"], label=0)], "drug")
    assert table.entries["a drug"] == (0, 1)
    assert table.entries["b drug"] == (0, 1)


def test_unlabeled_record_error_names_trial():
    with pytest.raises(UnlabeledRecordError) as err:
        build_outcome_table([_trial("T9", ["x"])], "drug")
    assert "T9" in str(err.value)


def test_aggrenox_fixture_rate_is_exactly_one():
    table = OutcomeTable({"aggrenox capsule": (0, 2)}, "drug")
    score = entity_failure_rate(table, "Aggrenox capsule")
    assert score.failure_rate == 1.0
    assert score.support == 2


def test_all_success_entity_rate_zero():
    table = OutcomeTable({"x": (3, 3)}, "drug")
    assert entity_failure_rate(table, "x").failure_rate == 0.0


def test_absent_entity_is_unknown():
    table = OutcomeTable({"aspirin": (1, 2)}, "drug")
    assert entity_failure_rate(table, "completely different") is None


def test_fuzzy_lookup_reports_match_provenance():
    table = OutcomeTable({"aggrenox capsule": (0, 2)}, "drug")
    score = entity_failure_rate(table, "Aggrenox Capsules")
    assert score.matched_name == "aggrenox capsule"
    assert score.match_similarity == pytest.approx(1 - 1 / 17)


_POOL = ["alendronate", "warfarin", "metformin", "ibuprofen", "lisinopril", "atorvastatin"]


def test_rates_agree_with_bruteforce_recount_on_random_datasets():
    # Guard: pool names must not fuzzy-match each other.
    for a in _POOL:
        for b in _POOL:
            if a != b:
                assert name_similarity(a, b) < 0.8
    rng = random.Random(20240809)
    for _ in range(100):
        records = [
            _trial(
                f"T{i}",
                rng.sample(_POOL, rng.randint(1, 3)),
                label=rng.randint(0, 1),
            )
            for i in range(rng.randint(1, 50))
        ]
        table = build_outcome_table(records, "drug")
        for name in _POOL:
            outcomes = [
                r.label for r in records if name in {normalize_name(d) for d in r.drugs}
            ]
            score = entity_failure_rate(table, name)
            if not outcomes:
                assert score is None
            else:
                assert score.failure_rate == 1 - sum(outcomes) / len(outcomes)
                assert score.support == len(outcomes)


def test_trial_risk_takes_maximum():
    table = OutcomeTable({"a": (8, 10), "b": (3, 10)}, "drug")
    score = trial_entity_risk(table, ["a", "b"])
    assert score.failure_rate == 0.7
    assert score.matched_name == "b"


def test_trial_risk_drops_unknowns():
    table = OutcomeTable({"a": (6, 10)}, "drug")
    assert trial_entity_risk(table, ["a", "mystery"]).failure_rate == pytest.approx(0.4)


def test_trial_risk_all_unknown_is_unknown():
    table = OutcomeTable({"a": (6, 10)}, "drug")
    assert trial_entity_risk(table, ["mystery", "enigma"]) is None


# ---------------------------------------------------------------------------
# Featurization


def test_fnv1a_reference_values():
    # Standard FNV-1a 64-bit test vectors.
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C


def test_minimal_input_single_bucket():
    vec = featurize(SegmentedCriteria(), ["aspirin"], [])
    nonzero = np.nonzero(vec)[0]
    assert list(nonzero) == [hash_bucket("aspirin")]
    assert vec[nonzero[0]] == 1.0
    assert list(vec[HASH_DIM:]) == [0.0, 0.0, 0.0]


def test_featurize_deterministic():
    seg = SegmentedCriteria(("age over 18",), ("pregnancy",))
    a = featurize(seg, ["aspirin"], ["stroke"])
    b = featurize(seg, ["aspirin"], ["stroke"])
    assert np.array_equal(a, b)


def test_inclusion_exclusion_cancellation():
    # Find two tokens with distinct buckets, then a token used once on each
    # side nets to zero while the other stays.
    pool = ["alpha", "beta", "gamma", "delta", "epsilon"]
    token, other = next(
        (t, o) for t in pool for o in pool if t != o and hash_bucket(t) != hash_bucket(o)
    )
    vec = featurize(SegmentedCriteria((token,), (f"{token} {other}",)), [], [])
    assert vec[hash_bucket(token)] == 0.0
    assert vec[hash_bucket(other)] == -1.0


def test_dense_features():
    seg = SegmentedCriteria(("aaaa", "bbbb"), ("cc",))
    vec = featurize(seg, [], [])
    assert vec[HASH_DIM] == 2.0
    assert vec[HASH_DIM + 1] == 1.0
    assert vec[HASH_DIM + 2] == pytest.approx(10 / 1000)


# ---------------------------------------------------------------------------
# Logistic trainer


def test_gradient_matches_central_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(5):
        dim = rng.integers(2, 11)
        n = int(rng.integers(4, 20))
        x = rng.normal(size=(n, dim))
        y = np.zeros(n)
        y[: n // 2] = 1.0
        rng.shuffle(y)
        if y.sum() in (0, n):
            y[0] = 1.0 - y[0]
        weights = rng.normal(scale=0.5, size=dim)
        bias = float(rng.normal())
        sample_weights = balanced_sample_weights(y)
        _, grad_w, grad_b = loss_and_gradient(weights, bias, x, y, sample_weights, 1e-4)

        step = 1e-6
        numeric = np.zeros(dim)
        for j in range(dim):
            up, down = weights.copy(), weights.copy()
            up[j] += step
            down[j] -= step
            loss_up, _, _ = loss_and_gradient(up, bias, x, y, sample_weights, 1e-4)
            loss_down, _, _ = loss_and_gradient(down, bias, x, y, sample_weights, 1e-4)
            numeric[j] = (loss_up - loss_down) / (2 * step)
        scale = max(1e-12, float(np.linalg.norm(grad_w)))
        assert float(np.linalg.norm(grad_w - numeric)) / scale < 1e-6

        loss_up, _, _ = loss_and_gradient(weights, bias + step, x, y, sample_weights, 1e-4)
        loss_down, _, _ = loss_and_gradient(weights, bias - step, x, y, sample_weights, 1e-4)
        numeric_b = (loss_up - loss_down) / (2 * step)
        assert abs(grad_b - numeric_b) / max(1e-12, abs(grad_b)) < 1e-6


def _separable_data():
    rng = np.random.default_rng(7)
    n = 200
    y = np.repeat([0.0, 1.0], n // 2)
    x0 = np.where(y == 1, rng.uniform(0.5, 2.0, n), rng.uniform(-2.0, -0.5, n))
    x1 = rng.normal(size=n)
    return np.column_stack([x0, x1]), y


def test_training_on_separable_data():
    x, y = _separable_data()
    # Independent check: thresholding the first feature at zero is a perfect
    # classifier, so the problem is genuinely separable.
    assert np.mean((x[:, 0] > 0) == y) == 1.0
    weights, bias, losses = fit_logistic(x, y)
    predictions = (1 / (1 + np.exp(-(x @ weights + bias)))) >= 0.5
    assert np.mean(predictions == y) >= 0.95
    assert all(losses[i + 1] <= losses[i] + 1e-12 for i in range(len(losses) - 1))


def test_doubling_l2_never_increases_weight_norm():
    x, y = _separable_data()
    w1, _, _ = fit_logistic(x, y, l2=1e-4)
    w2, _, _ = fit_logistic(x, y, l2=2e-4)
    assert np.linalg.norm(w2) <= np.linalg.norm(w1) + 1e-12


def test_zero_model_predicts_half_exactly():
    model = EnrollmentModel(weights=np.zeros(FEATURE_DIM), bias=0.0)
    record = _trial("T1", ["aspirin"], criteria="Inclusion Criteria:\n- anything")
    assert predict_enrollment(model, record) == 0.5


def test_single_class_training_is_an_error():
    examples = [(_trial(f"T{i}", ["a"]), 1) for i in range(4)]
    with pytest.raises(ValueError):
        train_enrollment(examples)


def test_train_enrollment_end_to_end_separable():
    records = []
    for i in range(40):
        label = i % 2
        token = "broadcohort" if label else "narrowcohort"
        criteria = f"Inclusion Criteria:\n- {token} marker\nExclusion Criteria:\n- none noted"
        records.append((_trial(f"T{i}", ["drug"], criteria=criteria), label))
    model = train_enrollment(records)
    correct = sum(
        (predict_enrollment(model, record) >= 0.5) == bool(label) for record, label in records
    )
    assert correct / len(records) >= 0.95


def test_monotonicity_in_present_bucket():
    record = _trial("T1", ["aspirin"], criteria="")
    base = EnrollmentModel(weights=np.zeros(FEATURE_DIM), bias=0.0)
    boosted_weights = np.zeros(FEATURE_DIM)
    boosted_weights[hash_bucket("aspirin")] = 1.0
    boosted = EnrollmentModel(weights=boosted_weights, bias=0.0)
    assert predict_enrollment(boosted, record) > predict_enrollment(base, record)


# ---------------------------------------------------------------------------
# Model persistence and the case fixture


def test_model_save_load_round_trip(tmp_path):
    weights = np.zeros(FEATURE_DIM)
    weights[17] = 0.25
    weights[HASH_DIM] = -1.5
    model = EnrollmentModel(weights=weights, bias=0.125)
    path = tmp_path / "model.json"
    save_enrollment_model(model, path, provenance={"label_source": "test"})
    loaded = load_enrollment_model(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.bias == model.bias
    assert json.loads(path.read_text())["provenance"]["label_source"] == "test"


def test_model_file_bytes_deterministic(tmp_path):
    weights = np.zeros(FEATURE_DIM)
    weights[3] = 0.5
    model = EnrollmentModel(weights=weights, bias=-0.25)
    save_enrollment_model(model, tmp_path / "a.json", provenance={"x": 1})
    save_enrollment_model(model, tmp_path / "b.json", provenance={"x": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_unknown_model_version_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"version": 99, "bias": 0, "weights": []}))
    with pytest.raises(ValueError):
        load_enrollment_model(path)


def test_case_fixture_model_reproduces_published_rate(enrollment_model, case_record):
    failure = 1.0 - predict_enrollment(enrollment_model, case_record)
    assert failure == pytest.approx(0.3597, abs=1e-4)


# ---------------------------------------------------------------------------
# External predictor adapter


class _FakeHttpResponse:
    def __init__(self, body):
        self._body = body

    def raise_for_status(self):
        return None

    def json(self):
        return self._body


def test_external_predictor_wire_format(case_record):
    captured = {}

    def post(url, json=None, timeout=None):
        captured["url"] = url
        captured["body"] = json
        return _FakeHttpResponse({"probability": 0.42})

    predictor = ExternalEnrollmentPredictor("http://model.test/score", post=post)
    assert predictor.predict_success(case_record) == 0.42
    assert captured["url"] == "http://model.test/score"
    assert captured["body"] == {
        "trial_id": case_record.trial_id,
        "drugs": list(case_record.drugs),
        "diseases": list(case_record.diseases),
        "criteria": case_record.criteria,
    }


def test_external_predictor_rejects_out_of_range():
    predictor = ExternalEnrollmentPredictor(
        "http://model.test", post=lambda url, json=None, timeout=None: _FakeHttpResponse({"probability": 1.5})
    )
    with pytest.raises(ValueError):
        predictor.predict_success(_trial("T", ["a"]))
