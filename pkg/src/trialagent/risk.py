"""Historical risk models and the enrollment success predictor.

Three predictive components back the specialist agents: per-drug and
per-disease historical failure rates accumulated from labeled trials, and an
enrollment-success predictor. The reference predictor is a hashed
bag-of-words logistic model trained by plain gradient descent; an HTTP
adapter lets an external model service fill the same role.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .trials import SegmentedCriteria, TrialRecord, normalize_name, segment_criteria

log = logging.getLogger(__name__)

RISK_MATCH_THRESHOLD = 0.8

HASH_DIM = 1 << 16
DENSE_DIM = 3
FEATURE_DIM = HASH_DIM + DENSE_DIM
FEATURE_SPEC_VERSION = 1

LEARNING_RATE = 0.1
EPOCHS = 500
L2_COEFFICIENT = 1e-4

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Fuzzy name matching


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute, all cost 1)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (ca != cb),
                )
            )
        previous = current
    return previous[-1]


def _similarity(a: str, b: str) -> float:
    # Operates on already-normalized strings.
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def name_similarity(a: str, b: str) -> float:
    """Similarity of two entity names after normalization; 1 iff equal."""
    return _similarity(normalize_name(a), normalize_name(b))


def best_match(query: str, keys, threshold: float) -> tuple[str, float] | None:
    """Best key by normalized edit similarity, or None below the threshold.

    Ties break toward the lexicographically smallest key, so results are
    independent of key-set iteration order.
    """
    q = normalize_name(query)
    best: tuple[str, float] | None = None
    for key in sorted(keys):
        sim = _similarity(q, key)
        if best is None or sim > best[1]:
            best = (key, sim)
    if best is None or best[1] < threshold:
        return None
    return best


def fuzzy_match(query: str, keys) -> tuple[str, float] | None:
    """Closest key at the risk-table threshold (0.8)."""
    return best_match(query, keys, RISK_MATCH_THRESHOLD)


# ---------------------------------------------------------------------------
# Historical outcome tables


class UnlabeledRecordError(ValueError):
    def __init__(self, trial_id: str):
        self.trial_id = trial_id
        super().__init__(f"trial {trial_id} has no outcome label")


@dataclass(frozen=True)
class OutcomeTable:
    """Per-entity historical (success_count, total_count) pairs."""

    entries: dict  # normalized name -> (success_count, total_count)
    entity_kind: str  # "drug" or "disease"

    def __post_init__(self):
        for name, (success, total) in self.entries.items():
            if not 0 <= success <= total or total < 1:
                raise ValueError(f"bad counts for {name!r}: {success}/{total}")


@dataclass(frozen=True)
class RiskScore:
    """A historical failure-rate estimate with its match provenance."""

    failure_rate: float
    matched_name: str
    match_similarity: float
    support: int


def build_outcome_table(records: list[TrialRecord], kind: str) -> OutcomeTable:
    """Accumulate success/total counts per normalized entity name.

    A trial naming several entities contributes one outcome to each of them.
    Every record must be labeled.
    """
    if kind not in ("drug", "disease"):
        raise ValueError(f"kind must be 'drug' or 'disease', got {kind!r}")
    counts: dict[str, list[int]] = {}
    for record in records:
        if record.label is None:
            raise UnlabeledRecordError(record.trial_id)
        names = record.drugs if kind == "drug" else record.diseases
        for name in {normalize_name(n) for n in names}:
            entry = counts.setdefault(name, [0, 0])
            entry[0] += record.label
            entry[1] += 1
    return OutcomeTable(
        entries={name: (s, t) for name, (s, t) in counts.items()},
        entity_kind=kind,
    )


def entity_failure_rate(table: OutcomeTable, name: str) -> RiskScore | None:
    """Failure rate for one entity, via exact then fuzzy lookup.

    Returns None when nothing matches; callers must surface that as missing
    data rather than inventing a rate.
    """
    key = normalize_name(name)
    if key in table.entries:
        success, total = table.entries[key]
        return RiskScore(1.0 - success / total, key, 1.0, total)
    match = fuzzy_match(name, table.entries.keys())
    if match is None:
        return None
    matched, sim = match
    success, total = table.entries[matched]
    return RiskScore(1.0 - success / total, matched, sim, total)


def trial_entity_risk(table: OutcomeTable, names) -> RiskScore | None:
    """Pessimistic (maximum) failure rate over a trial's entities.

    Entities without historical data are dropped; if none are known the
    whole result is unknown.
    """
    names = list(names)
    if not names:
        raise ValueError("names must be non-empty")
    scores = [s for s in (entity_failure_rate(table, n) for n in names) if s is not None]
    if not scores:
        return None
    return max(scores, key=lambda s: s.failure_rate)


# ---------------------------------------------------------------------------
# Enrollment predictor


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash; fixed so feature buckets are stable across runs."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def hash_bucket(token: str) -> int:
    return fnv1a_64(token.encode("utf-8")) % HASH_DIM


def _tokens(text: str) -> list[str]:
    return normalize_name(text).split()


def featurize(criteria: SegmentedCriteria, drugs, diseases) -> np.ndarray:
    """Hashed bag-of-words features plus three dense summary features.

    Inclusion-clause tokens add +1 to their bucket, exclusion tokens -1,
    and drug/disease name tokens +1. The trailing dense features are the
    inclusion clause count, the exclusion clause count, and total criteria
    character length / 1000.
    """
    vec = np.zeros(FEATURE_DIM)
    for clause in criteria.inclusion:
        for token in _tokens(clause):
            vec[hash_bucket(token)] += 1.0
    for clause in criteria.exclusion:
        for token in _tokens(clause):
            vec[hash_bucket(token)] -= 1.0
    for name in list(drugs) + list(diseases):
        for token in _tokens(name):
            vec[hash_bucket(token)] += 1.0
    total_chars = sum(len(c) for c in criteria.inclusion + criteria.exclusion)
    vec[HASH_DIM] = len(criteria.inclusion)
    vec[HASH_DIM + 1] = len(criteria.exclusion)
    vec[HASH_DIM + 2] = total_chars / 1000.0
    return vec


def featurize_record(record: TrialRecord) -> np.ndarray:
    return featurize(segment_criteria(record.criteria), record.drugs, record.diseases)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def balanced_sample_weights(y: np.ndarray) -> np.ndarray:
    """Per-sample weights inversely proportional to class frequency."""
    n = len(y)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("training data must contain both classes")
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * n_neg)
    return np.where(y == 1, w_pos, w_neg)


def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    x: np.ndarray,
    y: np.ndarray,
    sample_weights: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, float]:
    """Weighted cross-entropy loss with L2 on the weights (not the bias)."""
    z = x @ weights + bias
    total = sample_weights.sum()
    # -log sigmoid(z)*y - log(1-sigmoid(z))*(1-y) == logaddexp(0, z) - y*z
    loss = float(np.dot(sample_weights, np.logaddexp(0.0, z) - y * z) / total)
    loss += 0.5 * l2 * float(weights @ weights)
    residual = sample_weights * (_sigmoid(z) - y)
    grad_w = x.T @ residual / total + l2 * weights
    grad_b = float(residual.sum() / total)
    return loss, grad_w, grad_b


def fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    *,
    learning_rate: float = LEARNING_RATE,
    epochs: int = EPOCHS,
    l2: float = L2_COEFFICIENT,
) -> tuple[np.ndarray, float, list[float]]:
    """Full-batch gradient descent from zero initialization.

    Returns the fitted weights, bias, and the loss trace (epochs + 1 values:
    the loss before each update plus the final loss).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sample_weights = balanced_sample_weights(y)
    weights = np.zeros(x.shape[1])
    bias = 0.0
    losses = []
    for _ in range(epochs):
        loss, grad_w, grad_b = loss_and_gradient(weights, bias, x, y, sample_weights, l2)
        losses.append(loss)
        weights = weights - learning_rate * grad_w
        bias = bias - learning_rate * grad_b
    final_loss, _, _ = loss_and_gradient(weights, bias, x, y, sample_weights, l2)
    losses.append(final_loss)
    return weights, bias, losses


@dataclass(frozen=True)
class EnrollmentModel:
    """Logistic model over the hashed criteria/entity features."""

    weights: np.ndarray
    bias: float
    feature_spec_version: int = FEATURE_SPEC_VERSION

    def __post_init__(self):
        if self.weights.shape != (FEATURE_DIM,):
            raise ValueError(f"weights must have dimension {FEATURE_DIM}")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValueError("model parameters must be finite")

    def predict_success(self, record: TrialRecord) -> float:
        return predict_enrollment(self, record)


def train_enrollment(examples: list[tuple[TrialRecord, int]]) -> EnrollmentModel:
    """Train the reference enrollment model on (record, enroll_label) pairs."""
    if len(examples) < 2:
        raise ValueError("need at least two training examples")
    x = np.stack([featurize_record(record) for record, _ in examples])
    y = np.array([label for _, label in examples], dtype=float)
    weights, bias, _ = fit_logistic(x, y)
    return EnrollmentModel(weights=weights, bias=bias)


def predict_enrollment(model: EnrollmentModel, record: TrialRecord) -> float:
    """Probability of enrollment success; the tool layer reports 1 - this."""
    z = float(model.weights @ featurize_record(record)) + model.bias
    return float(_sigmoid(z))


def save_enrollment_model(model: EnrollmentModel, path: str | Path, provenance: dict) -> None:
    """Write the model as JSON with sparse weights and its provenance note."""
    nonzero = np.nonzero(model.weights)[0]
    payload = {
        "version": model.feature_spec_version,
        "bias": model.bias,
        "weights": [[int(i), float(model.weights[i])] for i in nonzero],
        "provenance": provenance,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False, sort_keys=True)
        fh.write("\n")


def load_enrollment_model(path: str | Path) -> EnrollmentModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != FEATURE_SPEC_VERSION:
        raise ValueError(f"unsupported enrollment model version {version!r}")
    weights = np.zeros(FEATURE_DIM)
    for index, value in payload["weights"]:
        weights[index] = value
    return EnrollmentModel(weights=weights, bias=float(payload["bias"]))


class ExternalEnrollmentPredictor:
    """Adapter for an external enrollment model served over HTTP.

    POSTs ``{"trial_id", "drugs", "diseases", "criteria"}`` as JSON and
    expects ``{"probability": <success probability>}`` back, so a separately
    trained model can replace the reference predictor unchanged.
    """

    def __init__(self, url: str, *, timeout: float = 30.0, post=None):
        self.url = url
        self.timeout = timeout
        self._post = post or requests.post

    def predict_success(self, record: TrialRecord) -> float:
        payload = {
            "trial_id": record.trial_id,
            "drugs": list(record.drugs),
            "diseases": list(record.diseases),
            "criteria": record.criteria,
        }
        response = self._post(self.url, json=payload, timeout=self.timeout)
        response.raise_for_status()
        probability = float(response.json()["probability"])
        if not 0.0 <= probability <= 1.0:
            raise ValueError(f"external predictor returned {probability}, outside [0, 1]")
        return probability
