"""Multi-agent orchestration: plan, solve subproblems, reason, predict.

The pipeline mirrors a specialist panel. A planning step decomposes the
trial-outcome question into three subproblems (enrollment, safety,
efficacy); each specialist solves its subproblem in a tool-calling loop
over its own registry; a reasoning step weighs the three reports and emits
a success probability. Every stage leaves a transcript for provenance.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .gateway import (
    Backend,
    ChatMessage,
    CompletionRequest,
    DEFAULT_MODEL,
    GatewayError,
    complete,
)
from .tools import (
    SPECIALIST_ROLES,
    ToolContext,
    ToolRegistry,
    build_role_registries,
    dispatch,
    schema_payload,
)
from .trials import TrialRecord, format_phase, segment_criteria

ALL_ROLES = ("planning",) + SPECIALIST_ROLES + ("reasoning",)

# Keyword routing for parsed plan items. An item must match exactly one
# role, and the three items together must cover the three roles.
ROUTING = (
    ("enrollment", ("enrollment", "enroll", "recruit")),
    ("safety", ("safety", "risk", "adverse")),
    ("efficacy", ("efficacy", "effect", "treat")),
)

PREDICTION_INSTRUCTION = (
    "End your reply with a final line of exactly the form "
    "'Prediction: <number between 0 and 1>' giving the probability that the "
    "trial succeeds."
)

_PLAN_ITEM_RE = re.compile(r"\s*(?:subproblem\s*)?(\d+)\s*[.):\-]*\s*(.+)", re.IGNORECASE)
_PREDICTION_RE = re.compile(r"prediction\s*:\s*([0-9]+(?:\.[0-9]+)?)", re.IGNORECASE)
_NUMBER_RE = re.compile(r"(?<![\d.])(\d+(?:\.\d+)?)(?![\d.])")


class EngineError(Exception):
    """Base class for pipeline failures."""


class LoopExhaustedError(EngineError):
    """A specialist hit its iteration cap without producing a report."""

    def __init__(self, role: str, transcript: "ReActTranscript"):
        self.role = role
        self.transcript = transcript
        super().__init__(
            f"{role} agent exhausted {transcript.iteration_count} iterations "
            "without a final report"
        )


class ProbabilityExtractionError(EngineError):
    """No usable probability in the reasoning text; carries the raw text."""

    def __init__(self, text: str, reason: str):
        self.text = text
        super().__init__(f"could not extract a probability: {reason}")


class PipelineError(EngineError):
    """A stage failed; carries whatever transcripts were completed."""

    def __init__(self, stage: str, transcripts: dict, cause: Exception):
        self.stage = stage
        self.transcripts = dict(transcripts)
        self.cause = cause
        super().__init__(f"prediction failed during {stage}: {cause}")


@dataclass(frozen=True)
class AgentConfig:
    """One agent's role prompt, exemplars, tools, and loop bound."""

    role_name: str
    system_prompt: str
    few_shot_exemplars: tuple[tuple[str, str], ...] = ()
    tool_registry: ToolRegistry | None = None
    max_iterations: int = 8

    def __post_init__(self):
        if self.role_name not in ALL_ROLES:
            raise ValueError(f"unknown role {self.role_name!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        has_tools = self.tool_registry is not None and len(self.tool_registry) > 0
        if self.role_name in SPECIALIST_ROLES and not has_tools:
            raise ValueError(f"{self.role_name} agent requires a non-empty tool registry")
        if self.role_name not in SPECIALIST_ROLES and has_tools:
            raise ValueError(f"{self.role_name} agent must not carry tools")


@dataclass(frozen=True)
class Plan:
    """Role-assigned subproblems; exactly one per specialist."""

    subproblems: tuple[tuple[str, str], ...]
    used_fallback: bool = False

    def __post_init__(self):
        roles = sorted(role for role, _ in self.subproblems)
        if roles != sorted(SPECIALIST_ROLES):
            raise ValueError("plan must assign exactly one subproblem per specialist role")

    def statement(self, role: str) -> str:
        for assigned, text in self.subproblems:
            if assigned == role:
                return text
        raise KeyError(role)


@dataclass(frozen=True)
class TranscriptStep:
    kind: str  # "assistant" | "tool_call" | "tool_result" | "note"
    content: str = ""
    tool_name: str | None = None
    tool_call_id: str | None = None
    is_error: bool = False

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "content": self.content,
            "tool_name": self.tool_name,
            "tool_call_id": self.tool_call_id,
            "is_error": self.is_error,
        }


@dataclass(frozen=True)
class ReActTranscript:
    """Ordered record of one agent's loop, plus its final report."""

    role: str
    steps: tuple[TranscriptStep, ...]
    final_report: str
    iteration_count: int

    def to_json_dict(self) -> dict:
        return {
            "role": self.role,
            "steps": [step.to_json_dict() for step in self.steps],
            "final_report": self.final_report,
            "iteration_count": self.iteration_count,
        }


@dataclass(frozen=True)
class PredictionResult:
    trial_id: str
    probability: float
    decision: int
    subproblem_reports: dict
    transcripts: dict
    reasoning_text: str

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        if self.decision != (1 if self.probability >= 0.5 else 0):
            raise ValueError("decision must be [probability >= 0.5]")

    def to_json_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "probability": self.probability,
            "decision": self.decision,
            "reports": {role: self.subproblem_reports[role] for role in SPECIALIST_ROLES},
            "transcripts": {
                role: self.transcripts[role].to_json_dict()
                for role in ALL_ROLES
                if role in self.transcripts
            },
        }


def serialize_prediction(result: PredictionResult, *, pretty: bool = False) -> str:
    """Canonical JSON for a prediction; byte-stable for fixed inputs."""
    return json.dumps(
        result.to_json_dict(),
        sort_keys=True,
        ensure_ascii=False,
        indent=2 if pretty else None,
        separators=None if pretty else (",", ":"),
    )


@dataclass(frozen=True)
class EngineSettings:
    model: str = DEFAULT_MODEL
    max_iterations: int = 8
    parallel_specialists: bool = True


@dataclass(frozen=True)
class PromptLibrary:
    """Role prompts and few-shot exemplars, loaded from editable text assets."""

    prompts: dict
    exemplars: dict

    @classmethod
    def load(cls, root: str | Path | None = None) -> "PromptLibrary":
        base = Path(root) if root is not None else resources.files(__package__) / "prompts"
        prompts = {}
        exemplars = {}
        for role in ALL_ROLES:
            prompt_file = base / f"{role}.txt"
            try:
                prompts[role] = prompt_file.read_text(encoding="utf-8").strip()
            except (FileNotFoundError, OSError) as exc:
                raise EngineError(f"missing prompt asset for role '{role}': {exc}") from exc
            exemplar_file = base / f"{role}_exemplars.json"
            try:
                raw = json.loads(exemplar_file.read_text(encoding="utf-8"))
            except (FileNotFoundError, OSError):
                raw = []
            exemplars[role] = tuple((item["input"], item["output"]) for item in raw)
        return cls(prompts=prompts, exemplars=exemplars)

    def system(self, role: str) -> str:
        return self.prompts[role]

    def exemplars_for(self, role: str) -> tuple:
        return self.exemplars.get(role, ())


def _assemble_system(prompt: str, exemplars: tuple) -> str:
    if not exemplars:
        return prompt
    blocks = [prompt]
    for i, (example_in, example_out) in enumerate(exemplars, start=1):
        blocks.append(f"Example {i}:\nInput:\n{example_in}\nOutput:\n{example_out}")
    return "\n\n".join(blocks)


def render_trial_features(record: TrialRecord) -> str:
    """Deterministic text rendering of the trial features for prompts."""
    segmented = segment_criteria(record.criteria)
    lines = [
        f"Drug: {', '.join(record.drugs)}",
        f"Disease: {', '.join(record.diseases)}",
        f"Phase: {format_phase(record.phase)}",
    ]
    for heading, clauses in (
        ("Inclusion criteria:", segmented.inclusion),
        ("Exclusion criteria:", segmented.exclusion),
    ):
        lines.append(heading)
        if clauses:
            lines.extend(f"- {c}" for c in clauses)
        else:
            lines.append("- (none stated)")
    return "\n".join(lines)


def canonical_fallback_plan(record: TrialRecord) -> Plan:
    """The fixed three-subproblem plan, parameterized by trial entities."""
    drugs = ", ".join(record.drugs)
    diseases = ", ".join(record.diseases)
    return Plan(
        subproblems=(
            (
                "enrollment",
                "Determine the level of enrollment feasibility based on the "
                "trial's inclusion and exclusion criteria.",
            ),
            ("safety", f'Evaluate the safety of the drug "{drugs}".'),
            (
                "efficacy",
                f'Assess the efficacy of the drug "{drugs}" on the disease "{diseases}".',
            ),
        ),
        used_fallback=True,
    )


def parse_plan_reply(text: str) -> tuple[tuple[str, str], ...] | None:
    """Parse a numbered-list reply into (role, statement) pairs.

    Returns None unless the reply yields exactly three items, each routable
    to exactly one specialist, together covering all three roles.
    """
    items = []
    for line in text.splitlines():
        m = _PLAN_ITEM_RE.match(line)
        if m:
            items.append(m.group(2).strip())
    if len(items) != len(SPECIALIST_ROLES):
        return None
    assigned = []
    for item in items:
        low = item.lower()
        roles = [role for role, keywords in ROUTING if any(k in low for k in keywords)]
        if len(roles) != 1:
            return None
        assigned.append((roles[0], item))
    if sorted(role for role, _ in assigned) != sorted(SPECIALIST_ROLES):
        return None
    return tuple(assigned)


def plan(
    config: AgentConfig,
    record: TrialRecord,
    backend: Backend,
    *,
    model: str = DEFAULT_MODEL,
) -> tuple[Plan, ReActTranscript]:
    """Decompose the outcome question into the three specialist subproblems.

    Malformed replies fall back to the canonical plan; the fallback is
    flagged in the planning transcript.
    """
    if config.role_name != "planning":
        raise EngineError("plan() requires the planning agent config")
    messages = (
        ChatMessage("system", _assemble_system(config.system_prompt, config.few_shot_exemplars)),
        ChatMessage(
            "user",
            "Problem: predict whether this clinical trial will succeed.\n\n"
            + render_trial_features(record),
        ),
    )
    reply = complete(backend, CompletionRequest(model=model, messages=messages))
    steps = [TranscriptStep("assistant", reply.content)]
    parsed = parse_plan_reply(reply.content)
    if parsed is None:
        result = canonical_fallback_plan(record)
        steps.append(
            TranscriptStep(
                "note",
                "planning reply could not be routed to the three specialist "
                "roles; canonical fallback plan applied",
            )
        )
    else:
        result = Plan(subproblems=parsed)
    report = "\n".join(f"{role}: {statement}" for role, statement in result.subproblems)
    return result, ReActTranscript("planning", tuple(steps), report, 1)


def run_react(
    config: AgentConfig,
    subproblem: str,
    record: TrialRecord,
    backend: Backend,
    *,
    model: str = DEFAULT_MODEL,
) -> ReActTranscript:
    """Tool-calling loop for one specialist.

    Each iteration sends the conversation with the agent's tool schemas.
    Tool-call replies are dispatched and their results appended as tool
    messages (errors included, as observations); a plain reply ends the
    loop as the final report. Hitting the cap raises LoopExhaustedError
    carrying the partial transcript.
    """
    if config.role_name not in SPECIALIST_ROLES:
        raise EngineError("run_react() requires a specialist agent config")
    registry = config.tool_registry
    tools = tuple(schema_payload(registry))
    messages = [
        ChatMessage("system", _assemble_system(config.system_prompt, config.few_shot_exemplars)),
        ChatMessage(
            "user",
            f"Subproblem: {subproblem}\n\nTrial under analysis:\n{render_trial_features(record)}",
        ),
    ]
    steps: list[TranscriptStep] = []
    for iteration in range(1, config.max_iterations + 1):
        message = complete(
            backend,
            CompletionRequest(model=model, messages=tuple(messages), tools=tools),
        )
        messages.append(message)
        if not message.tool_calls:
            if not message.content.strip():
                raise LoopExhaustedError(
                    config.role_name,
                    ReActTranscript(config.role_name, tuple(steps), "", iteration),
                )
            steps.append(TranscriptStep("assistant", message.content))
            return ReActTranscript(config.role_name, tuple(steps), message.content, iteration)
        if message.content.strip():
            steps.append(TranscriptStep("assistant", message.content))
        for call in message.tool_calls:
            steps.append(
                TranscriptStep("tool_call", call.arguments, tool_name=call.name, tool_call_id=call.id)
            )
            result = dispatch(registry, call)
            steps.append(
                TranscriptStep(
                    "tool_result",
                    result.content,
                    tool_name=call.name,
                    tool_call_id=call.id,
                    is_error=result.is_error,
                )
            )
            messages.append(ChatMessage("tool", result.content, tool_call_id=call.id))
    raise LoopExhaustedError(
        config.role_name,
        ReActTranscript(config.role_name, tuple(steps), "", config.max_iterations),
    )


def extract_probability(text: str) -> float:
    """Pull the predicted probability out of the reasoning text.

    The last `Prediction: <number>` wins; without one, the last standalone
    number in [0, 1] on the final non-empty line is used. Out-of-range
    numbers are failures, never clamped.
    """
    matches = _PREDICTION_RE.findall(text)
    if matches:
        value = float(matches[-1])
        if 0.0 <= value <= 1.0:
            return value
        raise ProbabilityExtractionError(text, f"prediction {value} outside [0, 1]")
    lines = [line for line in text.splitlines() if line.strip()]
    if lines:
        candidates = [float(m) for m in _NUMBER_RE.findall(lines[-1]) if float(m) <= 1.0]
        if candidates:
            return candidates[-1]
    raise ProbabilityExtractionError(text, "no probability found")


def reason(
    config: AgentConfig,
    reports: dict,
    record: TrialRecord,
    backend: Backend,
    *,
    model: str = DEFAULT_MODEL,
) -> tuple[float, str]:
    """Aggregate the three specialist reports into a success probability."""
    if config.role_name != "reasoning":
        raise EngineError("reason() requires the reasoning agent config")
    missing = [role for role in SPECIALIST_ROLES if role not in reports]
    if missing:
        raise EngineError(f"reports missing for roles: {', '.join(missing)}")
    bundle = "\n\n".join(
        f"[{role.capitalize()} report]\n{reports[role]}" for role in SPECIALIST_ROLES
    )
    system = _assemble_system(config.system_prompt, config.few_shot_exemplars)
    messages = (
        ChatMessage("system", system + "\n\n" + PREDICTION_INSTRUCTION),
        ChatMessage(
            "user",
            f"Trial: drug {', '.join(record.drugs)}; disease "
            f"{', '.join(record.diseases)}; {format_phase(record.phase)}.\n\n"
            f"{bundle}\n\nWeigh these reports and state your conclusion.",
        ),
    )
    message = complete(backend, CompletionRequest(model=model, messages=messages))
    probability = extract_probability(message.content)
    return probability, message.content


def build_agent_configs(
    prompts: PromptLibrary,
    registries: dict,
    max_iterations: int = 8,
) -> dict:
    configs = {}
    for role in ALL_ROLES:
        configs[role] = AgentConfig(
            role_name=role,
            system_prompt=prompts.system(role),
            few_shot_exemplars=prompts.exemplars_for(role),
            tool_registry=registries.get(role),
            max_iterations=max_iterations,
        )
    return configs


def predict(
    record: TrialRecord,
    backend: Backend,
    ctx: ToolContext,
    prompts: PromptLibrary,
    settings: EngineSettings = EngineSettings(),
) -> PredictionResult:
    """End-to-end pipeline: plan, run the three specialists, reason.

    Specialists run concurrently (their conversations are independent);
    the reasoning prompt orders reports canonically so results do not
    depend on completion order. Any stage failure raises PipelineError
    carrying the transcripts completed so far.
    """
    registries = build_role_registries(ctx, record)
    configs = build_agent_configs(prompts, registries, settings.max_iterations)
    transcripts: dict = {}

    try:
        plan_result, planning_transcript = plan(
            configs["planning"], record, backend, model=settings.model
        )
        transcripts["planning"] = planning_transcript
    except (GatewayError, EngineError) as exc:
        raise PipelineError("planning", transcripts, exc) from exc

    def solve(role: str) -> ReActTranscript:
        return run_react(
            configs[role], plan_result.statement(role), record, backend, model=settings.model
        )

    outcomes: dict = {}
    if settings.parallel_specialists:
        with ThreadPoolExecutor(max_workers=len(SPECIALIST_ROLES)) as pool:
            futures = {role: pool.submit(solve, role) for role in SPECIALIST_ROLES}
            for role in SPECIALIST_ROLES:
                try:
                    outcomes[role] = futures[role].result()
                except Exception as exc:
                    outcomes[role] = exc
    else:
        for role in SPECIALIST_ROLES:
            try:
                outcomes[role] = solve(role)
            except Exception as exc:
                outcomes[role] = exc

    # Record successes first so a failure's PipelineError carries every
    # transcript that did complete, regardless of role order.
    reports: dict = {}
    for role in SPECIALIST_ROLES:
        outcome = outcomes[role]
        if isinstance(outcome, LoopExhaustedError):
            transcripts[role] = outcome.transcript
        elif isinstance(outcome, ReActTranscript):
            transcripts[role] = outcome
            reports[role] = outcome.final_report
    for role in SPECIALIST_ROLES:
        outcome = outcomes[role]
        if isinstance(outcome, Exception):
            raise PipelineError(f"specialist:{role}", transcripts, outcome) from outcome

    try:
        probability, reasoning_text = reason(
            configs["reasoning"], reports, record, backend, model=settings.model
        )
    except (GatewayError, EngineError) as exc:
        raise PipelineError("reasoning", transcripts, exc) from exc
    transcripts["reasoning"] = ReActTranscript(
        "reasoning",
        (TranscriptStep("assistant", reasoning_text),),
        reasoning_text,
        1,
    )

    return PredictionResult(
        trial_id=record.trial_id,
        probability=probability,
        decision=1 if probability >= 0.5 else 0,
        subproblem_reports=reports,
        transcripts=transcripts,
        reasoning_text=reasoning_text,
    )
