"""Local evidence stores for the efficacy agent.

A drug-description store with fuzzy lookup, and a typed biomedical graph
with bounded drug-to-disease path enumeration. Both are immutable after
loading, so all queries are safe for concurrent callers.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from enum import Enum

from .risk import best_match
from .trials import normalize_name

log = logging.getLogger(__name__)

DRUGBANK_COLUMNS = ("name", "description", "indication", "mechanism", "smiles")
HETIONET_COLUMNS = (
    "source_id",
    "source_kind",
    "source_name",
    "metaedge",
    "target_id",
    "target_kind",
    "target_name",
)

# Graph entity names are noisier than risk-table keys, so resolution is
# looser than RISK_MATCH_THRESHOLD.
GRAPH_MATCH_THRESHOLD = 0.6

DEFAULT_MAX_PATH_LEN = 4
DEFAULT_MAX_PATHS = 25


class KnowledgeError(Exception):
    """Base class for store failures."""


class StoreSchemaError(KnowledgeError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing required column '{column}'")


class StoreRowError(KnowledgeError):
    def __init__(self, row: int, reason: str):
        self.row = row
        super().__init__(f"row {row}: {reason}")


class EntityResolutionError(KnowledgeError):
    """A query name could not be resolved to a graph node."""

    def __init__(self, entity_kind: str, name: str):
        self.entity_kind = entity_kind
        self.name = name
        super().__init__(f"could not resolve {entity_kind} '{name}' to a graph node")


def _tsv_rows(source):
    if isinstance(source, bytes):
        stream = io.TextIOWrapper(io.BytesIO(source), encoding="utf-8-sig", newline="")
    elif isinstance(source, io.TextIOBase):
        stream = source
    else:
        stream = io.TextIOWrapper(source, encoding="utf-8-sig", newline="")
    return csv.reader(stream, delimiter="\t")


# ---------------------------------------------------------------------------
# Drug store


@dataclass(frozen=True)
class DrugEntry:
    name: str
    description: str
    indication: str
    mechanism: str
    smiles: str = ""


class DrugStore:
    """Drug entries keyed by normalized name."""

    def __init__(self, entries: dict[str, DrugEntry]):
        self._entries = dict(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> DrugEntry | None:
        return self._entries.get(key)

    def keys(self):
        return self._entries.keys()


def load_drugbank(source) -> DrugStore:
    """Load the drug store from a TSV of name/description/indication/mechanism/smiles."""
    rows = _tsv_rows(source)
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise StoreSchemaError(DRUGBANK_COLUMNS[0])
    positions = {name: i for i, name in enumerate(header)}
    for column in DRUGBANK_COLUMNS:
        if column not in positions:
            raise StoreSchemaError(column)

    entries: dict[str, DrugEntry] = {}
    for row in rows:
        if not any(cell.strip() for cell in row):
            continue
        cell = lambda name: row[positions[name]] if positions[name] < len(row) else ""
        entry = DrugEntry(
            name=cell("name").strip(),
            description=cell("description"),
            indication=cell("indication"),
            mechanism=cell("mechanism"),
            smiles=cell("smiles"),
        )
        key = normalize_name(entry.name)
        if key in entries:
            log.warning("duplicate drug name %r; keeping the first entry", entry.name)
            continue
        entries[key] = entry
    return DrugStore(entries)


def lookup_drug(store: DrugStore, name: str) -> tuple[DrugEntry, str, float] | None:
    """Find a drug by name: exact normalized match first, then fuzzy.

    Returns (entry, match_kind, similarity) or None when the best candidate
    scores below the graph threshold.
    """
    key = normalize_name(name)
    entry = store.get(key)
    if entry is not None:
        return entry, "exact", 1.0
    match = best_match(name, store.keys(), GRAPH_MATCH_THRESHOLD)
    if match is None:
        return None
    matched_key, similarity = match
    return store.get(matched_key), "fuzzy", similarity


# ---------------------------------------------------------------------------
# Heterogeneous graph


class NodeKind(Enum):
    COMPOUND = "Compound"
    DISEASE = "Disease"
    GENE = "Gene"
    ANATOMY = "Anatomy"
    PATHWAY = "Pathway"
    SIDE_EFFECT = "SideEffect"
    SYMPTOM = "Symptom"
    PHARMACOLOGIC_CLASS = "PharmacologicClass"
    OTHER = "other"


_KIND_LOOKUP = {kind.value.lower(): kind for kind in NodeKind}
_KIND_LOOKUP.update({"side effect": NodeKind.SIDE_EFFECT, "pharmacologic class": NodeKind.PHARMACOLOGIC_CLASS})


def parse_node_kind(text: str) -> NodeKind:
    return _KIND_LOOKUP.get(text.strip().lower(), NodeKind.OTHER)


@dataclass(frozen=True)
class HetioNode:
    node_id: str
    kind: NodeKind
    name: str


@dataclass(frozen=True)
class PathStep:
    """One traversed edge: its label and whether it was walked source-to-target."""

    metaedge: str
    forward: bool


@dataclass(frozen=True)
class HetioPath:
    """A simple compound-to-disease path with labeled, direction-annotated edges."""

    nodes: tuple[HetioNode, ...]
    steps: tuple[PathStep, ...]

    def __post_init__(self):
        if len(self.nodes) != len(self.steps) + 1:
            raise ValueError("node count must be step count + 1")
        if not self.steps:
            raise ValueError("a path needs at least one edge")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("path must be simple (no repeated node)")
        if self.nodes[0].kind is not NodeKind.COMPOUND:
            raise ValueError("path must start at a Compound node")
        if self.nodes[-1].kind is not NodeKind.DISEASE:
            raise ValueError("path must end at a Disease node")

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def metaedges(self) -> tuple[str, ...]:
        return tuple(step.metaedge for step in self.steps)


class HetioGraph:
    """Typed node/edge sets with a per-kind normalized-name index."""

    def __init__(
        self,
        nodes: dict[str, HetioNode],
        edges: set[tuple[str, str, str]],
        name_index: dict[tuple[NodeKind, str], str],
    ):
        self.nodes = dict(nodes)
        self.edges = set(edges)
        self.name_index = dict(name_index)
        # Undirected adjacency; each entry remembers the edge's stored direction.
        adjacency: dict[str, list[tuple[str, str, bool]]] = {nid: [] for nid in nodes}
        for source, metaedge, target in edges:
            adjacency[source].append((target, metaedge, True))
            adjacency[target].append((source, metaedge, False))
        for entries in adjacency.values():
            entries.sort()
        self._adjacency = adjacency

    def node_count(self) -> int:
        return len(self.nodes)

    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, node_id: str):
        return self._adjacency.get(node_id, ())

    def resolve(self, kind: NodeKind, name: str) -> str | None:
        """Resolve an entity name to a node id within one kind."""
        key = (kind, normalize_name(name))
        if key in self.name_index:
            return self.name_index[key]
        names = {n for (k, n) in self.name_index if k is kind}
        match = best_match(name, names, GRAPH_MATCH_THRESHOLD)
        if match is None:
            return None
        return self.name_index[(kind, match[0])]


def load_hetionet(source, *, strict: bool = True) -> HetioGraph:
    """Load the graph from a TSV edge list; nodes are deduplicated by id."""
    rows = _tsv_rows(source)
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise StoreSchemaError(HETIONET_COLUMNS[0])
    positions = {name: i for i, name in enumerate(header)}
    for column in HETIONET_COLUMNS:
        if column not in positions:
            raise StoreSchemaError(column)

    nodes: dict[str, HetioNode] = {}
    edges: set[tuple[str, str, str]] = set()
    name_index: dict[tuple[NodeKind, str], str] = {}

    def add_node(node_id: str, kind: NodeKind, name: str, row_num: int):
        if node_id in nodes:
            existing = nodes[node_id]
            if existing.name != name or existing.kind is not kind:
                log.warning(
                    "row %d: conflicting definition for node %s; keeping the first",
                    row_num,
                    node_id,
                )
            return
        nodes[node_id] = HetioNode(node_id, kind, name)
        key = (kind, normalize_name(name))
        if key in name_index:
            log.warning("row %d: duplicate %s name %r; index keeps the first node", row_num, kind.value, name)
        else:
            name_index[key] = node_id

    for row in rows:
        if not any(cell.strip() for cell in row):
            continue
        row_num = rows.line_num
        if len(row) < len(HETIONET_COLUMNS):
            if strict:
                raise StoreRowError(row_num, f"expected {len(HETIONET_COLUMNS)} columns, got {len(row)}")
            log.warning("skipping malformed row %d", row_num)
            continue
        cell = lambda name: row[positions[name]].strip()
        metaedge = cell("metaedge")
        if not metaedge:
            if strict:
                raise StoreRowError(row_num, "empty metaedge label")
            log.warning("skipping row %d with empty metaedge", row_num)
            continue
        add_node(cell("source_id"), parse_node_kind(cell("source_kind")), cell("source_name"), row_num)
        add_node(cell("target_id"), parse_node_kind(cell("target_kind")), cell("target_name"), row_num)
        edges.add((cell("source_id"), metaedge, cell("target_id")))

    return HetioGraph(nodes, edges, name_index)


def _paths_of_length(graph: HetioGraph, start: str, goal: str, length: int):
    """All simple node/step sequences of exactly `length` edges, via DFS."""
    results = []
    steps: list[tuple[str, bool]] = []
    trail = [start]
    on_trail = {start}

    def extend(node: str, remaining: int):
        if remaining == 0:
            if node == goal:
                results.append((tuple(trail), tuple(steps)))
            return
        for other, metaedge, forward in graph.neighbors(node):
            if other in on_trail:
                continue
            # The goal may only appear as the final node.
            if other == goal and remaining != 1:
                continue
            trail.append(other)
            on_trail.add(other)
            steps.append((metaedge, forward))
            extend(other, remaining - 1)
            steps.pop()
            on_trail.remove(other)
            trail.pop()

    extend(start, length)
    return results


def find_paths(
    graph: HetioGraph,
    drug_name: str,
    disease_name: str,
    max_len: int = DEFAULT_MAX_PATH_LEN,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> list[HetioPath]:
    """All simple drug-to-disease paths of length <= max_len, bounded.

    Edges are traversed in both directions (the stored direction is kept on
    each step). Results are ordered by length, then node-id sequence, then
    the step labels, and truncated to max_paths; the ordering makes the
    truncated prefix stable as max_paths grows.
    """
    if max_len < 1 or max_paths < 1:
        raise ValueError("max_len and max_paths must be >= 1")
    start = graph.resolve(NodeKind.COMPOUND, drug_name)
    if start is None:
        raise EntityResolutionError("drug", drug_name)
    goal = graph.resolve(NodeKind.DISEASE, disease_name)
    if goal is None:
        raise EntityResolutionError("disease", disease_name)

    paths: list[HetioPath] = []
    for length in range(1, max_len + 1):
        found = sorted(
            _paths_of_length(graph, start, goal, length),
            key=lambda item: (item[0], item[1]),
        )
        for node_ids, raw_steps in found:
            paths.append(
                HetioPath(
                    nodes=tuple(graph.nodes[nid] for nid in node_ids),
                    steps=tuple(PathStep(metaedge, forward) for metaedge, forward in raw_steps),
                )
            )
            if len(paths) >= max_paths:
                return paths
    return paths


def render_path(path: HetioPath) -> str:
    """Render a path as `Name(Kind) -[metaedge>]- Name(Kind) ...`.

    `>` marks an edge traversed in its stored direction, `<` one walked
    backwards.
    """
    parts = [f"{path.nodes[0].name}({path.nodes[0].kind.value})"]
    for node, step in zip(path.nodes[1:], path.steps):
        marker = ">" if step.forward else "<"
        parts.append(f" -[{step.metaedge}{marker}]- ")
        parts.append(f"{node.name}({node.kind.value})")
    return "".join(parts)
