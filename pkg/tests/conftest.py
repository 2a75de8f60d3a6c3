import json
from pathlib import Path

import pytest

from trialagent.engine import PromptLibrary
from trialagent.knowledge import load_drugbank, load_hetionet
from trialagent.risk import build_outcome_table, load_enrollment_model
from trialagent.tools import ToolContext
from trialagent.trials import parse_trial_dataset

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

CASE_TRIAL_ID = "NCT00311402"


@pytest.fixture(autouse=True)
def _scrub_gateway_env(monkeypatch):
    # Cassette fingerprints cover the model name; a stray CA_MODEL would
    # break every replay test.
    for var in ("CA_MODEL", "CA_API_BASE", "CA_API_KEY"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="session")
def fixture_records():
    return parse_trial_dataset((FIXTURES / "trials.csv").read_bytes())


@pytest.fixture(scope="session")
def case_record(fixture_records):
    return next(r for r in fixture_records if r.trial_id == CASE_TRIAL_ID)


@pytest.fixture(scope="session")
def drug_store():
    return load_drugbank((FIXTURES / "drugbank.tsv").read_bytes())


@pytest.fixture(scope="session")
def hetio_graph():
    return load_hetionet((FIXTURES / "hetionet.tsv").read_bytes())


@pytest.fixture(scope="session")
def enrollment_model():
    return load_enrollment_model(FIXTURES / "enrollment_model.json")


@pytest.fixture(scope="session")
def tool_context(fixture_records, drug_store, hetio_graph, enrollment_model):
    labeled = [r for r in fixture_records if r.label is not None]
    return ToolContext(
        drug_store=drug_store,
        graph=hetio_graph,
        drug_table=build_outcome_table(labeled, "drug"),
        disease_table=build_outcome_table(labeled, "disease"),
        enrollment=enrollment_model,
    )


@pytest.fixture(scope="session")
def prompts():
    return PromptLibrary.load()


@pytest.fixture(scope="session")
def segmentation_cases():
    return json.loads((FIXTURES / "criteria_segmentation_cases.json").read_text())


@pytest.fixture(scope="session")
def malformed_plans():
    return json.loads((FIXTURES / "malformed_plans.json").read_text())
