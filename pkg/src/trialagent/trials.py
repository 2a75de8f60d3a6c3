"""Trial data model: dataset ingestion, name normalization, criteria segmentation.

Everything downstream (risk tables, knowledge lookups, the agent engine)
consumes the types defined here. All types are immutable after construction.
"""

from __future__ import annotations

import csv
import io
import logging
import re
import unicodedata
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

TRIAL_COLUMNS = ("trial_id", "phase", "drugs", "diseases", "criteria", "label")
ENROLL_COLUMN = "enroll_label"

_INCLUSION_HEADER = "inclusion criteria"
_EXCLUSION_HEADER = "exclusion criteria"
# Header positions are located with case-insensitive regexes on the original
# text; str.lower() is not length-preserving for some code points.
_INCLUSION_HEADER_RE = re.compile(re.escape(_INCLUSION_HEADER), re.IGNORECASE)
_EXCLUSION_HEADER_RE = re.compile(re.escape(_EXCLUSION_HEADER), re.IGNORECASE)

# Bullet markers must be followed by whitespace so dose-like tokens
# ("1.5 mg") survive intact.
_BULLET_RE = re.compile(r"^(?:[-*]|\d+[.)])\s+")
_BARE_BULLET_RE = re.compile(r"^(?:[-*]|\d+[.)])$")


class DatasetError(Exception):
    """Base class for ingestion failures."""


class SchemaError(DatasetError):
    """A required column is missing from the input."""

    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing required column '{column}'")


class RowError(DatasetError):
    """A data row violates the record invariants."""

    def __init__(self, row: int, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


@dataclass(frozen=True)
class TrialRecord:
    """One clinical trial.

    ``phase`` is 1-4 or None for unknown. ``label`` is the trial outcome
    (1 = success), absent when the trial is unlabeled. ``enroll_label`` is an
    optional enrollment-success label used only for training the enrollment
    predictor.
    """

    trial_id: str
    phase: int | None
    drugs: tuple[str, ...]
    diseases: tuple[str, ...]
    criteria: str
    label: int | None = None
    enroll_label: int | None = None

    def __post_init__(self):
        if self.phase not in (None, 1, 2, 3, 4):
            raise ValueError(f"phase must be 1-4 or None, got {self.phase!r}")
        for name, values in (("drugs", self.drugs), ("diseases", self.diseases)):
            if not values or any(not v.strip() for v in values):
                raise ValueError(f"{name} must contain at least one non-empty name")
        for name, value in (("label", self.label), ("enroll_label", self.enroll_label)):
            if value not in (None, 0, 1):
                raise ValueError(f"{name} must be 0, 1, or absent, got {value!r}")


@dataclass(frozen=True)
class SegmentedCriteria:
    """Eligibility criteria split into inclusion and exclusion clauses."""

    inclusion: tuple[str, ...] = field(default=())
    exclusion: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for clause in self.inclusion + self.exclusion:
            if not clause.strip():
                raise ValueError("clauses must be non-empty after trimming")


def parse_phase(text: str) -> int | None:
    """Map a phase cell to 1-4; anything unrecognized is unknown (None)."""
    m = re.fullmatch(r"\s*(?:phase\s*)?([1-4])\s*", text, re.IGNORECASE)
    return int(m.group(1)) if m else None


def format_phase(phase: int | None) -> str:
    return f"phase {phase}" if phase is not None else "unknown"


def _parse_binary(cell: str, column: str, row: int) -> int | None:
    cell = cell.strip()
    if not cell:
        return None
    try:
        value = float(cell)
    except ValueError:
        raise RowError(row, f"{column} must be 0 or 1, got {cell!r}")
    if value not in (0.0, 1.0):
        raise RowError(row, f"{column} must be 0 or 1, got {cell!r}")
    return int(value)


def _split_names(cell: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in cell.split(";") if part.strip())


def _as_text_stream(source) -> io.TextIOBase:
    if isinstance(source, bytes):
        return io.TextIOWrapper(io.BytesIO(source), encoding="utf-8-sig", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def parse_trial_dataset(source, *, strict: bool = True) -> list[TrialRecord]:
    """Parse a UTF-8 CSV of trials into records, in file order.

    The header must contain ``trial_id,phase,drugs,diseases,criteria,label``;
    an ``enroll_label`` column is optional. ``drugs``/``diseases`` cells are
    semicolon-separated. In strict mode (default) a bad row aborts with a
    :class:`RowError`; in lenient mode it is skipped with a warning.
    """
    reader = csv.reader(_as_text_stream(source))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(TRIAL_COLUMNS[0])
    header = [h.strip() for h in header]
    positions = {name: i for i, name in enumerate(header)}
    for column in TRIAL_COLUMNS:
        if column not in positions:
            raise SchemaError(column)
    enroll_pos = positions.get(ENROLL_COLUMN)

    records: list[TrialRecord] = []
    for row in reader:
        if not any(cell.strip() for cell in row):
            continue
        line = reader.line_num
        try:
            if len(row) < len(header):
                raise RowError(line, f"expected {len(header)} columns, got {len(row)}")
            cell = lambda name: row[positions[name]]
            drugs = _split_names(cell("drugs"))
            diseases = _split_names(cell("diseases"))
            if not drugs:
                raise RowError(line, "drugs cell is empty")
            if not diseases:
                raise RowError(line, "diseases cell is empty")
            records.append(
                TrialRecord(
                    trial_id=cell("trial_id").strip(),
                    phase=parse_phase(cell("phase")),
                    drugs=drugs,
                    diseases=diseases,
                    criteria=cell("criteria"),
                    label=_parse_binary(cell("label"), "label", line),
                    enroll_label=(
                        _parse_binary(row[enroll_pos], ENROLL_COLUMN, line)
                        if enroll_pos is not None and enroll_pos < len(row)
                        else None
                    ),
                )
            )
        except RowError as exc:
            if strict:
                raise
            log.warning("skipping bad row: %s", exc)
    return records


def serialize_trial_dataset(records: list[TrialRecord]) -> bytes:
    """Render records back to the ingestion CSV format (UTF-8)."""
    with_enroll = any(r.enroll_label is not None for r in records)
    buf = io.StringIO(newline="")
    columns = TRIAL_COLUMNS + ((ENROLL_COLUMN,) if with_enroll else ())
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        row = [
            r.trial_id,
            format_phase(r.phase),
            ";".join(r.drugs),
            ";".join(r.diseases),
            r.criteria,
            "" if r.label is None else str(r.label),
        ]
        if with_enroll:
            row.append("" if r.enroll_label is None else str(r.enroll_label))
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def _is_header_line(line: str) -> bool:
    stripped = line.strip().rstrip(":").strip().lower()
    return stripped in (_INCLUSION_HEADER, _EXCLUSION_HEADER)


def _clauses(section: str) -> list[str]:
    section = section.lstrip()
    if section.startswith(":"):
        section = section[1:]
    clauses = []
    for raw in section.splitlines():
        line = raw.strip()
        while True:
            if _BARE_BULLET_RE.fullmatch(line):
                line = ""
                break
            m = _BULLET_RE.match(line)
            if not m:
                break
            line = line[m.end():].strip()
        if line and not _is_header_line(line):
            clauses.append(line)
    return clauses


def segment_criteria(text: str) -> SegmentedCriteria:
    """Split eligibility text at its inclusion/exclusion headers.

    Splitting happens at the first case-insensitive occurrence of each
    header; sections are then split into clauses on newlines, with leading
    bullet markers stripped. Text with no recognizable headers (including
    any preamble before the first header) lands in inclusion.
    """
    inc_match = _INCLUSION_HEADER_RE.search(text)
    exc_match = _EXCLUSION_HEADER_RE.search(text)

    if inc_match is None and exc_match is None:
        return SegmentedCriteria(inclusion=tuple(_clauses(text)))

    markers = []
    if inc_match is not None:
        markers.append((inc_match.start(), "inclusion", inc_match.end() - inc_match.start()))
    if exc_match is not None:
        markers.append((exc_match.start(), "exclusion", exc_match.end() - exc_match.start()))
    markers.sort()

    inclusion = _clauses(text[: markers[0][0]])
    exclusion: list[str] = []
    for i, (pos, kind, width) in enumerate(markers):
        end = markers[i + 1][0] if i + 1 < len(markers) else len(text)
        section = _clauses(text[pos + width : end])
        (inclusion if kind == "inclusion" else exclusion).extend(section)
    return SegmentedCriteria(inclusion=tuple(inclusion), exclusion=tuple(exclusion))


def render_criteria(segmented: SegmentedCriteria) -> str:
    """Render segmented criteria back to canonical header + bullet text."""
    lines = ["Inclusion Criteria:"]
    lines.extend(f"- {clause}" for clause in segmented.inclusion)
    lines.append("Exclusion Criteria:")
    lines.extend(f"- {clause}" for clause in segmented.exclusion)
    return "\n".join(lines)


def normalize_name(name: str) -> str:
    """Canonical entity-name form shared by all fuzzy lookups.

    Lowercase, Unicode NFC, punctuation replaced by spaces, whitespace
    collapsed. Idempotent.
    """
    text = unicodedata.normalize("NFC", name.lower())
    chars = [" " if unicodedata.category(c).startswith("P") else c for c in text]
    return " ".join("".join(chars).split())
