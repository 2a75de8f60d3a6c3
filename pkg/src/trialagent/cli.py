"""Command-line surface wiring stores, backends, and the pipeline together.

Exit codes: 0 success, 1 pipeline/domain failure, 2 usage or input error.
Configuration precedence: flags > environment variables > --config file >
built-in defaults. Outputs are machine-readable JSON; pass --pretty for an
indented rendering.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from pathlib import Path

import click
from click.core import ParameterSource

from .engine import (
    EngineSettings,
    PipelineError,
    PromptLibrary,
    predict,
    serialize_prediction,
)
from .gateway import (
    Cassette,
    DEFAULT_MODEL,
    ENV_MODEL,
    GatewayError,
    HttpBackend,
    RecordBackend,
    ReplayBackend,
)
from .knowledge import KnowledgeError, load_drugbank, load_hetionet
from .metrics import MetricsError, evaluate_dataset
from .risk import (
    EPOCHS,
    L2_COEFFICIENT,
    LEARNING_RATE,
    OutcomeTable,
    build_outcome_table,
    load_enrollment_model,
    predict_enrollment,
    save_enrollment_model,
    train_enrollment,
)
from .tools import ToolContext, build_role_registries, dispatch
from .gateway import ToolCallRequest
from .trials import DatasetError, TrialRecord, parse_phase, parse_trial_dataset

EXIT_FAILURE = 1
EXIT_USAGE = 2


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _with_config(ctx: click.Context, config: str | None) -> dict:
    """Apply --config file values beneath flags/env, above defaults."""
    values = dict(ctx.params)
    if not config:
        return values
    try:
        with open(config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_USAGE, f"cannot read config file: {exc}")
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if name in values and ctx.get_parameter_source(name) == ParameterSource.DEFAULT:
            values[name] = value
    return values


def _emit(payload: dict, out: str | None, pretty: bool):
    text = json.dumps(
        payload,
        sort_keys=True,
        ensure_ascii=False,
        indent=2 if pretty else None,
        separators=None if pretty else (",", ":"),
    )
    if out:
        try:
            with open(out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            _fail(EXIT_USAGE, f"cannot write {out}: {exc}")
    else:
        click.echo(text)


def _read_bytes(path: str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        _fail(EXIT_USAGE, f"cannot read {what} file: {exc}")


def _load_trials(path: str) -> list[TrialRecord]:
    try:
        return parse_trial_dataset(_read_bytes(path, "trials"))
    except DatasetError as exc:
        _fail(EXIT_USAGE, f"trials file {path}: {exc}")


def _load_context(opts: dict) -> tuple[list[TrialRecord], ToolContext]:
    records = _load_trials(opts["trials"])
    try:
        drug_store = load_drugbank(_read_bytes(opts["drugbank"], "drugbank"))
        graph = load_hetionet(_read_bytes(opts["hetionet"], "hetionet"))
    except KnowledgeError as exc:
        _fail(EXIT_USAGE, str(exc))
    try:
        enrollment = load_enrollment_model(opts["enrollment_model"])
    except (OSError, ValueError, KeyError) as exc:
        _fail(EXIT_USAGE, f"enrollment model {opts['enrollment_model']}: {exc}")
    labeled = [r for r in records if r.label is not None]
    drug_table = (
        build_outcome_table(labeled, "drug") if labeled else OutcomeTable({}, "drug")
    )
    disease_table = (
        build_outcome_table(labeled, "disease") if labeled else OutcomeTable({}, "disease")
    )
    ctx = ToolContext(
        drug_store=drug_store,
        graph=graph,
        drug_table=drug_table,
        disease_table=disease_table,
        enrollment=enrollment,
        max_path_len=opts["max_path_len"],
        max_paths=opts["max_paths"],
    )
    return records, ctx


def _load_prompts(prompts_dir: str | None) -> PromptLibrary:
    try:
        return PromptLibrary.load(prompts_dir)
    except Exception as exc:
        _fail(EXIT_USAGE, f"cannot load prompts: {exc}")


def _trial_from_json(path: str) -> TrialRecord:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_USAGE, f"cannot read trial file: {exc}")
    phase = raw.get("phase")
    if isinstance(phase, str):
        phase = parse_phase(phase)
    drugs = raw.get("drugs", [])
    diseases = raw.get("diseases", [])
    if isinstance(drugs, str):
        drugs = [part.strip() for part in drugs.split(";") if part.strip()]
    if isinstance(diseases, str):
        diseases = [part.strip() for part in diseases.split(";") if part.strip()]
    try:
        return TrialRecord(
            trial_id=raw.get("trial_id", "unnamed-trial"),
            phase=phase,
            drugs=tuple(drugs),
            diseases=tuple(diseases),
            criteria=raw.get("criteria", ""),
            label=raw.get("label"),
        )
    except ValueError as exc:
        _fail(EXIT_USAGE, f"invalid trial: {exc}")


def _build_backend(kind: str, cassette: str | None):
    """Returns (backend, finalize) where finalize persists a recording."""
    if kind == "replay":
        if not cassette:
            _fail(EXIT_USAGE, "--backend replay requires --cassette")
        if not Path(cassette).is_file():
            _fail(EXIT_USAGE, f"cassette not found: {cassette}")
        return ReplayBackend(Cassette.load(cassette)), lambda: None
    if kind == "record":
        if not cassette:
            _fail(EXIT_USAGE, "--backend record requires --cassette")
        try:
            live = HttpBackend.from_env()
        except GatewayError as exc:
            _fail(EXIT_USAGE, str(exc))
        tape = Cassette()
        return RecordBackend(live, tape), lambda: tape.save(cassette)
    if kind == "live":
        try:
            return HttpBackend.from_env(), lambda: None
        except GatewayError as exc:
            _fail(EXIT_USAGE, str(exc))
    _fail(EXIT_USAGE, f"unknown backend kind {kind!r}")


def _settings(opts: dict) -> EngineSettings:
    return EngineSettings(
        model=os.environ.get(ENV_MODEL, DEFAULT_MODEL),
        max_iterations=opts.get("max_iterations", 8),
    )


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


store_options = [
    click.option("--trials", required=True, help="Labeled trials CSV (history and/or dataset)."),
    click.option("--drugbank", required=True, help="Drug description TSV."),
    click.option("--hetionet", required=True, help="Graph edge-list TSV."),
    click.option("--enrollment-model", required=True, help="Enrollment model JSON file."),
    click.option("--max-path-len", default=4, show_default=True, help="Path search length bound."),
    click.option("--max-paths", default=25, show_default=True, help="Path search result bound."),
    click.option("--prompts", default=None, help="Prompt asset directory (default: packaged prompts)."),
    click.option("--max-iterations", default=8, show_default=True, help="Agent loop iteration cap."),
]


def _apply(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return wrap


@click.group()
def main():
    """Clinical trial outcome prediction via a panel of tool-calling agents.

    Configuration precedence: flags > environment variables (CA_API_KEY,
    CA_API_BASE, CA_MODEL) > --config JSON file > defaults.
    """


@main.command()
@click.option("--trials", default=None, help="Trials CSV to validate.")
@click.option("--drugbank", default=None, help="Drug TSV to validate.")
@click.option("--hetionet", default=None, help="Graph TSV to validate.")
@click.option("--config", default=None, help="JSON config file.")
@click.option("--out", default=None, help="Manifest output path (default: stdout).")
@click.option("--pretty", is_flag=True, help="Indent JSON output.")
@click.pass_context
def ingest(ctx, trials, drugbank, hetionet, config, out, pretty):
    """Validate data files and write a manifest of row counts and digests."""
    opts = _with_config(ctx, config)
    manifest = {}
    if not any(opts[k] for k in ("trials", "drugbank", "hetionet")):
        _fail(EXIT_USAGE, "nothing to ingest; pass --trials, --drugbank, and/or --hetionet")
    if opts["trials"]:
        records = _load_trials(opts["trials"])
        manifest["trials"] = {
            "path": opts["trials"],
            "rows": len(records),
            "sha256": _sha256(opts["trials"]),
        }
    if opts["drugbank"]:
        try:
            store = load_drugbank(_read_bytes(opts["drugbank"], "drugbank"))
        except KnowledgeError as exc:
            _fail(EXIT_USAGE, str(exc))
        manifest["drugbank"] = {
            "path": opts["drugbank"],
            "rows": len(store),
            "sha256": _sha256(opts["drugbank"]),
        }
    if opts["hetionet"]:
        try:
            graph = load_hetionet(_read_bytes(opts["hetionet"], "hetionet"))
        except KnowledgeError as exc:
            _fail(EXIT_USAGE, str(exc))
        manifest["hetionet"] = {
            "path": opts["hetionet"],
            "rows": graph.edge_count(),
            "nodes": graph.node_count(),
            "sha256": _sha256(opts["hetionet"]),
        }
    _emit(manifest, opts["out"], opts["pretty"])


@main.command("predict")
@_apply(store_options)
@click.option("--trial", "trial_file", default=None, help="Trial JSON file to predict.")
@click.option("--trial-id", default="unnamed-trial", help="Trial id (with --drug/--disease).")
@click.option("--drug", multiple=True, help="Drug name (repeatable).")
@click.option("--disease", multiple=True, help="Disease name (repeatable).")
@click.option("--criteria", default="", help="Eligibility criteria text.")
@click.option("--phase", default="unknown", help="Trial phase, e.g. 'phase 3'.")
@click.option("--backend", "backend_kind", default="replay", show_default=True,
              type=click.Choice(["live", "replay", "record"]))
@click.option("--cassette", default=None, help="Cassette file for replay/record.")
@click.option("--config", default=None, help="JSON config file.")
@click.option("--out", default=None, help="Result output path (default: stdout).")
@click.option("--pretty", is_flag=True, help="Indent JSON output.")
@click.pass_context
def predict_cmd(ctx, **_):
    """Predict one trial's outcome and emit the full PredictionResult JSON."""
    opts = _with_config(ctx, ctx.params["config"])
    if opts["trial_file"]:
        record = _trial_from_json(opts["trial_file"])
    elif opts["drug"] and opts["disease"]:
        try:
            record = TrialRecord(
                trial_id=opts["trial_id"],
                phase=parse_phase(opts["phase"]),
                drugs=tuple(opts["drug"]),
                diseases=tuple(opts["disease"]),
                criteria=opts["criteria"],
            )
        except ValueError as exc:
            _fail(EXIT_USAGE, f"invalid trial: {exc}")
    else:
        _fail(EXIT_USAGE, "provide --trial FILE or at least one --drug and --disease")

    _, tool_ctx = _load_context(opts)
    prompts = _load_prompts(opts["prompts"])
    backend, finalize = _build_backend(opts["backend_kind"], opts["cassette"])
    try:
        result = predict(record, backend, tool_ctx, prompts, _settings(opts))
    except PipelineError as exc:
        partial = {
            role: transcript.to_json_dict() for role, transcript in exc.transcripts.items()
        }
        click.echo(json.dumps({"error": str(exc), "transcripts": partial}, sort_keys=True), err=True)
        sys.exit(EXIT_FAILURE)
    finalize()
    if opts["out"]:
        try:
            with open(opts["out"], "w", encoding="utf-8") as fh:
                fh.write(serialize_prediction(result, pretty=opts["pretty"]) + "\n")
        except OSError as exc:
            _fail(EXIT_USAGE, f"cannot write {opts['out']}: {exc}")
    else:
        click.echo(serialize_prediction(result, pretty=opts["pretty"]))


@main.command()
@_apply(store_options)
@click.option("--cassette", required=True, help="Directory of per-trial cassettes (<trial_id>.json).")
@click.option("--parallelism", default=1, show_default=True, help="Concurrent trial workers.")
@click.option("--threshold", default=0.5, show_default=True, help="Decision threshold for the metrics.")
@click.option("--config", default=None, help="JSON config file.")
@click.option("--out", default=None, help="Metrics output path (default: stdout).")
@click.option("--per-trial", default=None, help="Per-trial JSON-lines output path.")
@click.option("--pretty", is_flag=True, help="Indent JSON output.")
@click.pass_context
def evaluate(ctx, **_):
    """Replay the pipeline over a labeled dataset and report the metrics."""
    opts = _with_config(ctx, ctx.params["config"])
    records, tool_ctx = _load_context(opts)
    prompts = _load_prompts(opts["prompts"])
    settings = _settings(opts)
    cassette_dir = Path(opts["cassette"])
    if not cassette_dir.is_dir():
        _fail(EXIT_USAGE, f"cassette directory not found: {cassette_dir}")

    def pipeline(record: TrialRecord):
        cassette_file = cassette_dir / f"{record.trial_id}.json"
        if not cassette_file.is_file():
            raise FileNotFoundError(f"cassette missing: {cassette_file.name}")
        backend = ReplayBackend(Cassette.load(cassette_file))
        return predict(record, backend, tool_ctx, prompts, settings)

    try:
        outcome = evaluate_dataset(
            records, pipeline, parallelism=opts["parallelism"], threshold=opts["threshold"]
        )
    except MetricsError as exc:
        if "label" in str(exc):
            _fail(EXIT_USAGE, str(exc))
        _fail(EXIT_FAILURE, str(exc))
    except ValueError as exc:
        _fail(EXIT_USAGE, str(exc))

    payload = outcome.report.to_json_dict()
    payload["failures"] = len(outcome.failures)
    if opts["per_trial"]:
        try:
            with open(opts["per_trial"], "w", encoding="utf-8") as fh:
                for record, result in outcome.results:
                    line = dict(result.to_json_dict())
                    line["label"] = record.label
                    fh.write(json.dumps(line, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n")
                for trial_id, message in outcome.failures:
                    fh.write(json.dumps({"trial_id": trial_id, "error": message}, sort_keys=True) + "\n")
        except OSError as exc:
            _fail(EXIT_USAGE, f"cannot write {opts['per_trial']}: {exc}")
    _emit(payload, opts["out"], opts["pretty"])


@main.command("train-enrollment")
@click.option("--trials", required=True, help="Training trials CSV.")
@click.option("--out", required=True, help="Model output path.")
@click.option("--config", default=None, help="JSON config file.")
@click.option("--pretty", is_flag=True, help="Indent JSON output.")
@click.pass_context
def train_enrollment_cmd(ctx, **_):
    """Train the reference enrollment model and write it with provenance."""
    opts = _with_config(ctx, ctx.params["config"])
    records = _load_trials(opts["trials"])
    if not records:
        _fail(EXIT_USAGE, "no training rows in the trials file")

    if all(r.enroll_label is not None for r in records):
        label_source = "enroll_label"
        examples = [(r, r.enroll_label) for r in records]
    else:
        unlabeled = [r.trial_id for r in records if r.label is None]
        if unlabeled:
            _fail(EXIT_USAGE, f"no enroll_label column and trial {unlabeled[0]} lacks an outcome label")
        label_source = "outcome_label_proxy"
        examples = [(r, r.label) for r in records]

    if len(examples) < 2:
        _fail(EXIT_USAGE, "need at least two training examples")
    try:
        model = train_enrollment(examples)
    except ValueError as exc:
        _fail(EXIT_FAILURE, str(exc))

    correct = sum(
        (predict_enrollment(model, record) >= 0.5) == bool(label)
        for record, label in examples
    )
    accuracy = correct / len(examples)
    positives = sum(label for _, label in examples)
    save_enrollment_model(
        model,
        opts["out"],
        provenance={
            "label_source": label_source,
            "n_examples": len(examples),
            "positives": positives,
            "hyperparameters": {
                "learning_rate": LEARNING_RATE,
                "epochs": EPOCHS,
                "l2": L2_COEFFICIENT,
            },
            "training_accuracy": accuracy,
        },
    )
    _emit(
        {"out": opts["out"], "n": len(examples), "training_accuracy": accuracy},
        None,
        opts["pretty"],
    )


@main.group()
def tool():
    """Direct access to registered tools, for debugging."""


@tool.command("run")
@click.argument("name")
@click.option("--args", "args_json", default="{}", help="Tool arguments as a JSON object.")
@_apply(store_options)
@click.option("--trial", "trial_file", default=None, help="Trial JSON (required by the enrollment tool).")
@click.option("--config", default=None, help="JSON config file.")
@click.pass_context
def tool_run(ctx, **_):
    """Invoke one tool by name and print its rendered result."""
    opts = _with_config(ctx, ctx.params["config"])
    _, tool_ctx = _load_context(opts)
    record = (
        _trial_from_json(opts["trial_file"])
        if opts["trial_file"]
        else TrialRecord("tool-run", None, ("placeholder drug",), ("placeholder disease",), "")
    )
    registries = build_role_registries(tool_ctx, record)
    merged = {}
    for registry in registries.values():
        for tool_name in registry.names():
            merged[tool_name] = registry

    name = opts["name"]
    if name not in merged:
        _fail(EXIT_USAGE, f"unknown tool {name}")
    if name == "enrollment_prediction_model" and not opts["trial_file"]:
        _fail(EXIT_USAGE, "enrollment_prediction_model requires --trial")
    try:
        call = ToolCallRequest(id="cli", name=name, arguments=opts["args_json"])
    except ValueError as exc:
        _fail(EXIT_USAGE, f"--args: {exc}")
    result = dispatch(merged[name], call)
    click.echo(result.content)
    if result.is_error:
        sys.exit(EXIT_FAILURE)


if __name__ == "__main__":
    main()
