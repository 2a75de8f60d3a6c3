"""Multi-agent clinical trial outcome prediction engine.

Decomposes a trial-outcome query into enrollment, safety, and efficacy
subproblems, solves each with a tool-calling agent over local knowledge
stores, aggregates the reports into a success probability, and evaluates
predictions against labeled datasets. All LLM traffic can be recorded to
and replayed from cassettes, so the whole pipeline runs offline in tests.
"""

from .engine import (
    AgentConfig,
    EngineSettings,
    Plan,
    PredictionResult,
    PromptLibrary,
    ReActTranscript,
    extract_probability,
    predict,
)
from .gateway import (
    Backend,
    Cassette,
    ChatMessage,
    CompletionRequest,
    HttpBackend,
    RecordBackend,
    ReplayBackend,
    ToolCallRequest,
    complete,
    fingerprint,
)
from .knowledge import HetioGraph, HetioPath, find_paths, load_drugbank, load_hetionet, render_path
from .metrics import MetricsReport, ScoredExample, compute_metrics, evaluate_dataset
from .risk import (
    EnrollmentModel,
    OutcomeTable,
    RiskScore,
    build_outcome_table,
    entity_failure_rate,
    fuzzy_match,
    predict_enrollment,
    train_enrollment,
)
from .tools import ToolContext, ToolRegistry, build_role_registries, dispatch, schema_payload
from .trials import (
    SegmentedCriteria,
    TrialRecord,
    normalize_name,
    parse_trial_dataset,
    segment_criteria,
    serialize_trial_dataset,
)

__version__ = "0.1.0"
