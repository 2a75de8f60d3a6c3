"""Tool definitions, argument validation, and dispatch.

Each specialist agent gets its own registry: the enrollment agent scores
recruitment with the enrollment model, the safety agent looks up historical
failure statistics, and the efficacy agent queries the drug store and the
biomedical graph. Tool schemas are emitted in the chat-completions
``tools`` wire format; the two retrieval schemas are pinned byte-for-byte
by fixtures under ``fixtures/tool_schemas/``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

from .gateway import ToolCallRequest
from .knowledge import DrugStore, HetioGraph, find_paths, lookup_drug, render_path
from .risk import OutcomeTable, entity_failure_rate
from .trials import TrialRecord

log = logging.getLogger(__name__)

SPECIALIST_ROLES = ("enrollment", "safety", "efficacy")


@dataclass(frozen=True)
class ToolDefinition:
    """A callable tool: its wire schema plus the local handler."""

    name: str
    description: str
    parameters_schema: dict
    handler: Callable[[dict], str]

    def __post_init__(self):
        properties = self.parameters_schema.get("properties", {})
        for required in self.parameters_schema.get("required", []):
            if required not in properties:
                raise ValueError(f"required parameter {required!r} missing from properties")


@dataclass(frozen=True)
class ToolResult:
    tool_call_id: str
    content: str
    is_error: bool = False

    def __post_init__(self):
        if not self.content:
            raise ValueError("tool results must carry non-empty content")


class ToolRegistry:
    """Ordered, immutable-after-construction set of tool definitions."""

    def __init__(self, definitions: list[ToolDefinition] | None = None):
        self._definitions: dict[str, ToolDefinition] = {}
        for definition in definitions or []:
            self.register(definition)

    def register(self, definition: ToolDefinition) -> None:
        if definition.name in self._definitions:
            raise ValueError(f"duplicate tool name {definition.name!r}")
        self._definitions[definition.name] = definition

    def __len__(self) -> int:
        return len(self._definitions)

    def __contains__(self, name: str) -> bool:
        return name in self._definitions

    def get(self, name: str) -> ToolDefinition | None:
        return self._definitions.get(name)

    def names(self) -> tuple[str, ...]:
        return tuple(self._definitions)


def tool_schema(definition: ToolDefinition) -> dict:
    return {
        "type": "function",
        "function": {
            "name": definition.name,
            "description": definition.description,
            "parameters": definition.parameters_schema,
        },
    }


def schema_payload(registry: ToolRegistry) -> list[dict]:
    """The ``tools`` array to embed in a completion request, in registration order."""
    if not len(registry):
        raise ValueError("registry must not be empty")
    return [tool_schema(d) for name in registry.names() if (d := registry.get(name))]


def canonical_json(value) -> bytes:
    """Canonical serialization: UTF-8, sorted keys, no insignificant whitespace."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


_JSON_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
}


def _validate_arguments(definition: ToolDefinition, arguments: dict) -> str | None:
    """Return an error message naming the failing field, or None when valid."""
    schema = definition.parameters_schema
    for name in schema.get("required", []):
        if name not in arguments:
            return f"invalid arguments: missing required field '{name}'"
    for name, value in arguments.items():
        spec = schema.get("properties", {}).get(name)
        if spec is None:
            continue
        expected = spec.get("type")
        check = _JSON_TYPE_CHECKS.get(expected)
        if check is not None and not check(value):
            return f"invalid arguments: field '{name}' must be of type {expected}"
    return None


def dispatch(registry: ToolRegistry, call: ToolCallRequest) -> ToolResult:
    """Validate and run one tool call; failures become is_error results.

    Nothing raises past this boundary, so a bad call is an observation the
    agent can react to rather than a crash of the reasoning loop.
    """
    definition = registry.get(call.name)
    if definition is None:
        return ToolResult(call.id, f"unknown tool {call.name}", is_error=True)
    try:
        arguments = call.parsed_arguments()
    except (ValueError, json.JSONDecodeError) as exc:
        return ToolResult(call.id, f"invalid arguments: {exc}", is_error=True)
    problem = _validate_arguments(definition, arguments)
    if problem is not None:
        return ToolResult(call.id, problem, is_error=True)
    try:
        content = definition.handler(arguments)
    except Exception as exc:
        log.debug("tool %s failed", call.name, exc_info=True)
        return ToolResult(call.id, f"Error: {exc}", is_error=True)
    return ToolResult(call.id, content if content.strip() else "(tool produced no output)")


# ---------------------------------------------------------------------------
# Wire schemas
#
# The two retrieval schemas below are frozen wire text: tests pin their
# canonical serialization byte-for-byte against checked-in fixtures, so do
# not reword them (including spacing).

RETRIEVAL_DRUGBANK_DESCRIPTION = (
    "Retrieves information about a drug from the DrugBank database using "
    "the drug's name as input."
)

RETRIEVAL_HETIONET_DESCRIPTION = (
    "Given the names of a drug and a disease, the model retrieves the path "
    "connecting the drug to  the disease from the Hetionet Knowledge Graph. "
    "Hetionet is a comprehensive knowledge graph that integrates diverse "
    "biological information by connecting genes, diseases, compounds, and "
    "more into an interoperable framework. It structures real-world "
    "biomedical data into a network, facilitating advanced analysis and "
    "discovery of new insights into disease mechanisms, drug repurposing, "
    "and the genetic underpinnings of health and disease."
)

RETRIEVAL_DRUGBANK_PARAMETERS = {
    "type": "object",
    "properties": {
        "drug_name": {
            "type": "string",
            "description": "The name of the drug.",
        }
    },
    "required": ["drug_name"],
}

RETRIEVAL_HETIONET_PARAMETERS = {
    "type": "object",
    "properties": {
        "drug_name": {
            "type": "string",
            "description": "The drug name",
        },
        "disease_name": {
            "type": "string",
            "description": "The disease name",
        },
    },
    "required": ["drug_name", "disease_name"],
}

# The three model-backed tools have no published wire schema; they are
# authored here in the same dialect as the retrieval tools.

ENROLLMENT_TOOL_DESCRIPTION = (
    "Predicts the probability that the clinical trial currently under "
    "analysis fails to reach its enrollment target, based on the trial's "
    "inclusion and exclusion criteria, drugs, and diseases. Takes no "
    "arguments; it always scores the trial being analyzed."
)

DRUG_STATS_DESCRIPTION = (
    "Reports the historical clinical-trial failure rate of a drug, computed "
    "from recorded past trial outcomes. Names are matched fuzzily when no "
    "exact entry exists."
)

DISEASE_STATS_DESCRIPTION = (
    "Reports the historical clinical-trial failure rate of a disease, "
    "computed from recorded past trial outcomes. Names are matched fuzzily "
    "when no exact entry exists."
)


def _format_rate(rate: float) -> str:
    return str(round(rate, 4))


@dataclass(frozen=True)
class ToolContext:
    """Immutable stores the built-in tool handlers read from."""

    drug_store: DrugStore
    graph: HetioGraph
    drug_table: OutcomeTable
    disease_table: OutcomeTable
    enrollment: object  # anything with predict_success(record) -> float
    max_path_len: int = 4
    max_paths: int = 25


def _render_drug_entry(entry, match_kind: str, similarity: float) -> str:
    heading = f"DrugBank entry: {entry.name}"
    if match_kind == "fuzzy":
        heading += f" (closest match, similarity {round(similarity, 3)})"
    lines = [heading]
    for label, value in (
        ("Description", entry.description),
        ("Indication", entry.indication),
        ("Mechanism", entry.mechanism),
        ("SMILES", entry.smiles),
    ):
        if value.strip():
            lines.append(f"{label}: {value}")
    return "\n".join(lines)


def _stats_text(table: OutcomeTable, kind: str, name: str) -> str:
    score = entity_failure_rate(table, name)
    if score is None:
        return f"No historical data for {kind} '{name}'."
    outcomes = "outcome" if score.support == 1 else "outcomes"
    text = (
        f"Historical failure rate of '{score.matched_name}' in clinical "
        f"trials: {_format_rate(score.failure_rate)} (from {score.support} "
        f"recorded trial {outcomes})."
    )
    if score.match_similarity < 1.0:
        text += f" Matched '{name}' with similarity {round(score.match_similarity, 3)}."
    return text


def build_role_registries(ctx: ToolContext, record: TrialRecord) -> dict[str, ToolRegistry]:
    """Per-agent registries, with handlers bound to the stores and this trial."""

    def run_enrollment(_: dict) -> str:
        failure = 1.0 - ctx.enrollment.predict_success(record)
        return (
            f"Predicted enrollment failure rate: {_format_rate(failure)} "
            f"(predicted enrollment success probability: {_format_rate(1.0 - failure)})."
        )

    def run_drug_stats(args: dict) -> str:
        return _stats_text(ctx.drug_table, "drug", args["drug_name"])

    def run_disease_stats(args: dict) -> str:
        return _stats_text(ctx.disease_table, "disease", args["disease_name"])

    def run_drugbank(args: dict) -> str:
        hit = lookup_drug(ctx.drug_store, args["drug_name"])
        if hit is None:
            return f"No DrugBank entry found matching '{args['drug_name']}'."
        entry, match_kind, similarity = hit
        return _render_drug_entry(entry, match_kind, similarity)

    def run_hetionet(args: dict) -> str:
        paths = find_paths(
            ctx.graph,
            args["drug_name"],
            args["disease_name"],
            max_len=ctx.max_path_len,
            max_paths=ctx.max_paths,
        )
        if not paths:
            return (
                f"No paths of length <= {ctx.max_path_len} connect "
                f"'{args['drug_name']}' to '{args['disease_name']}' in the graph."
            )
        lines = [
            f"Found {len(paths)} path(s) from '{args['drug_name']}' to "
            f"'{args['disease_name']}' (shortest first):"
        ]
        lines.extend(f"{i}. {render_path(p)}" for i, p in enumerate(paths, start=1))
        return "\n".join(lines)

    return {
        "enrollment": ToolRegistry(
            [
                ToolDefinition(
                    "enrollment_prediction_model",
                    ENROLLMENT_TOOL_DESCRIPTION,
                    {"type": "object", "properties": {}, "required": []},
                    run_enrollment,
                )
            ]
        ),
        "safety": ToolRegistry(
            [
                ToolDefinition(
                    "drug_historical_statistics",
                    DRUG_STATS_DESCRIPTION,
                    {
                        "type": "object",
                        "properties": {
                            "drug_name": {"type": "string", "description": "The drug name"}
                        },
                        "required": ["drug_name"],
                    },
                    run_drug_stats,
                ),
                ToolDefinition(
                    "disease_historical_statistics",
                    DISEASE_STATS_DESCRIPTION,
                    {
                        "type": "object",
                        "properties": {
                            "disease_name": {"type": "string", "description": "The disease name"}
                        },
                        "required": ["disease_name"],
                    },
                    run_disease_stats,
                ),
            ]
        ),
        "efficacy": ToolRegistry(
            [
                ToolDefinition(
                    "retrieval_hetionet",
                    RETRIEVAL_HETIONET_DESCRIPTION,
                    RETRIEVAL_HETIONET_PARAMETERS,
                    run_hetionet,
                ),
                ToolDefinition(
                    "retrieval_drugbank",
                    RETRIEVAL_DRUGBANK_DESCRIPTION,
                    RETRIEVAL_DRUGBANK_PARAMETERS,
                    run_drugbank,
                ),
            ]
        ),
    }
