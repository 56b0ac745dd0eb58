"""Trace schema, typed record containers, and CSV ingestion/emission.

Datasets are column-oriented: one numpy array per attribute, typed by the
attribute kind. IPs are stored as 32-bit unsigned values in an int64 array
(prefix masking needs integer arithmetic) and rendered dotted-quad in CSV.
Timestamps are integer milliseconds.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FIELD_KINDS = ("ip", "port", "categorical", "integer", "float", "timestamp")
FIELD_ROLES = ("feature", "label", "key-attribute", "group-identifier-part")

#: Conventional flow/packet group identifier used when the schema does not
#: mark any attribute with the group-identifier-part role.
DEFAULT_GROUP_KEY = ("srcip", "dstip", "srcport", "dstport", "proto")

PORT_MAX = 65535
IP_MAX = 2**32 - 1


def ip_to_int(text: str) -> int:
    """Parse a dotted-quad IPv4 address into a 32-bit unsigned integer."""
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"not a dotted-quad IPv4 address: {text!r}")
    value = 0
    for p in parts:
        octet = int(p)
        if not 0 <= octet <= 255:
            raise ValueError(f"IPv4 octet out of range in {text!r}")
        value = (value << 8) | octet
    return value


def int_to_ip(value: int) -> str:
    """Render a 32-bit unsigned integer as a dotted-quad IPv4 address."""
    if not 0 <= value <= IP_MAX:
        raise ValueError(f"IPv4 integer out of range: {value}")
    return f"{(value >> 24) & 0xFF}.{(value >> 16) & 0xFF}.{(value >> 8) & 0xFF}.{value & 0xFF}"


@dataclass(frozen=True)
class FieldSchema:
    """One attribute of a trace: name, value kind, and pipeline role."""

    name: str
    kind: str
    role: str = "feature"

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ConfigError(f"unknown field kind {self.kind!r} for {self.name!r}; "
                              f"expected one of {FIELD_KINDS}")
        if self.role not in FIELD_ROLES:
            raise ConfigError(f"unknown field role {self.role!r} for {self.name!r}; "
                              f"expected one of {FIELD_ROLES}")


def load_schema(path) -> tuple[FieldSchema, ...]:
    """Load a schema sidecar: a JSON array of {name, kind, role} objects."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"schema file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"schema file {path} must be a non-empty JSON array")
    fields = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "name" not in entry or "kind" not in entry:
            raise ConfigError(f"schema entry {i} must be an object with name and kind")
        fields.append(FieldSchema(entry["name"], entry["kind"], entry.get("role", "feature")))
    schema = tuple(fields)
    problems = check_schema(schema)
    if problems:
        raise ConfigError("invalid schema: " + "; ".join(problems))
    return schema


def save_schema(schema: Sequence[FieldSchema], path) -> None:
    payload = [{"name": f.name, "kind": f.kind, "role": f.role} for f in schema]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def check_schema(schema: Sequence[FieldSchema]) -> list[str]:
    """Return schema-level invariant violations (empty list if sound)."""
    problems = []
    names = [f.name for f in schema]
    for name in sorted({n for n in names if names.count(n) > 1}):
        problems.append(f"duplicate attribute name {name!r}")
    labels = [f.name for f in schema if f.role == "label"]
    if len(labels) > 1:
        problems.append(f"more than one label attribute: {labels}")
    return problems


@dataclass(frozen=True)
class TraceRecord:
    """A single row: one value per schema attribute."""

    schema: tuple[FieldSchema, ...]
    values: tuple

    def __getitem__(self, name: str):
        for f, v in zip(self.schema, self.values):
            if f.name == name:
                return v
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {f.name: v for f, v in zip(self.schema, self.values)}


_COLUMN_DTYPES = {
    "ip": np.int64,
    "port": np.int64,
    "integer": np.int64,
    "timestamp": np.int64,
    "float": np.float64,
}


def _column_array(kind: str, values) -> np.ndarray:
    if kind == "categorical":
        return np.asarray(values, dtype=object)
    return np.asarray(values, dtype=_COLUMN_DTYPES[kind])


@dataclass
class TraceDataset:
    """An ordered collection of header records with a typed schema."""

    schema: tuple[FieldSchema, ...]
    columns: dict[str, np.ndarray]
    provenance: str = "raw"

    def __post_init__(self):
        self.schema = tuple(self.schema)
        missing = [f.name for f in self.schema if f.name not in self.columns]
        if missing:
            raise DataError(f"columns missing for attributes: {missing}")
        lengths = {len(col) for col in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"ragged columns: lengths {sorted(lengths)}")
        if self.provenance == "raw" and self.n < 1:
            raise DataError("raw dataset must contain at least one record")

    @property
    def n(self) -> int:
        first = self.schema[0].name
        return len(self.columns[first])

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.schema)

    def kind_of(self, name: str) -> str:
        return self.field(name).kind

    def field(self, name: str) -> FieldSchema:
        for f in self.schema:
            if f.name == name:
                return f
        raise KeyError(name)

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def label_attribute(self) -> str | None:
        for f in self.schema:
            if f.role == "label":
                return f.name
        return None

    @property
    def key_attribute(self) -> str | None:
        """Attribute marked key-attribute, falling back to the label."""
        for f in self.schema:
            if f.role == "key-attribute":
                return f.name
        return self.label_attribute

    @property
    def timestamp_attribute(self) -> str | None:
        for f in self.schema:
            if f.kind == "timestamp":
                return f.name
        return None

    def group_key_attributes(self) -> tuple[str, ...]:
        """Group identifier: role-marked attributes, else the IP 5-tuple subset."""
        marked = tuple(f.name for f in self.schema if f.role == "group-identifier-part")
        if marked:
            return marked
        present = tuple(a for a in DEFAULT_GROUP_KEY if a in self.columns)
        return present

    def record(self, i: int) -> TraceRecord:
        return TraceRecord(self.schema, tuple(self.columns[f.name][i] for f in self.schema))

    def iter_records(self) -> Iterator[TraceRecord]:
        for i in range(self.n):
            yield self.record(i)

    def with_column(self, field_schema: FieldSchema, values) -> "TraceDataset":
        """Return a copy with one appended attribute."""
        if field_schema.name in self.columns:
            raise DataError(f"attribute {field_schema.name!r} already present")
        columns = dict(self.columns)
        columns[field_schema.name] = _column_array(field_schema.kind, values)
        return TraceDataset(self.schema + (field_schema,), columns, self.provenance)

    @classmethod
    def from_rows(cls, schema: Sequence[FieldSchema], rows: Iterable[Sequence],
                  provenance: str = "raw") -> "TraceDataset":
        schema = tuple(schema)
        cols: list[list] = [[] for _ in schema]
        for row in rows:
            for slot, value in zip(cols, row):
                slot.append(value)
        columns = {f.name: _column_array(f.kind, slot) for f, slot in zip(schema, cols)}
        return cls(schema, columns, provenance)


# -- CSV parsing ---------------------------------------------------------

def _parse_ip(text: str) -> int:
    return ip_to_int(text)


def _parse_port(text: str) -> int:
    v = int(text)
    if not 0 <= v <= PORT_MAX:
        raise ValueError(f"port {v} outside [0, {PORT_MAX}]")
    return v


def _parse_integer(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_timestamp(text: str) -> int:
    return int(text)


_PARSERS = {
    "ip": _parse_ip,
    "port": _parse_port,
    "categorical": str,
    "integer": _parse_integer,
    "float": _parse_float,
    "timestamp": _parse_timestamp,
}


def load_csv_with_report(path, schema: Sequence[FieldSchema]):
    """Parse a header CSV; return (dataset, row-indexed error report).

    Rows that fail a type or range constraint are excluded from the dataset
    and reported as "row R, column 'C': reason" (data rows counted from 1).
    Accepted rows keep their input order.
    """
    path = Path(path)
    schema = tuple(schema)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row")
        expected = {f.name for f in schema}
        got = list(header)
        unknown = [c for c in got if c not in expected]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}; schema has {sorted(expected)}")
        missing = [c for c in expected if c not in got]
        if missing:
            raise DataError(f"{path}: column(s) missing from header: {missing}")
        col_index = [got.index(f.name) for f in schema]
        parsers = [_PARSERS[f.kind] for f in schema]

        cols: list[list] = [[] for _ in schema]
        report: list[str] = []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(got):
                report.append(f"row {row_no}: expected {len(got)} fields, found {len(row)}")
                continue
            parsed = []
            bad = False
            for f, parser, j in zip(schema, parsers, col_index):
                try:
                    parsed.append(parser(row[j]))
                except ValueError as exc:
                    report.append(f"row {row_no}, column {f.name!r}: {exc}")
                    bad = True
                    break
            if not bad:
                for slot, value in zip(cols, parsed):
                    slot.append(value)
    columns = {f.name: _column_array(f.kind, slot) for f, slot in zip(schema, cols)}
    if not report and not any(len(c) for c in columns.values()):
        report.append("no data rows")
    dataset = None
    if len(columns[schema[0].name]):
        dataset = TraceDataset(schema, columns, provenance="raw")
    return dataset, report


def load_csv(path, schema: Sequence[FieldSchema]) -> TraceDataset:
    """Load a header CSV strictly: any malformed row aborts the load.

    The raised error carries the full row-indexed report.
    """
    dataset, report = load_csv_with_report(path, schema)
    if report:
        preview = "; ".join(report[:20])
        more = f" (+{len(report) - 20} more)" if len(report) > 20 else ""
        raise DataError(f"{path}: {len(report)} bad row(s): {preview}{more}", report=report)
    return dataset


def _render(kind: str, value) -> str:
    if kind == "ip":
        return int_to_ip(int(value))
    if kind == "float":
        return repr(float(value))
    if kind == "categorical":
        return str(value)
    return str(int(value))


def write_csv(dataset: TraceDataset, path) -> None:
    """Write a dataset as CSV with the header in schema order.

    Round-trip stable: load_csv on the output reproduces the dataset
    value-for-value.
    """
    if dataset.n == 0:
        raise DataError("refusing to write an empty dataset")
    path = Path(path)
    kinds = [f.kind for f in dataset.schema]
    cols = [dataset.columns[f.name] for f in dataset.schema]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f.name for f in dataset.schema])
        for i in range(dataset.n):
            writer.writerow([_render(k, col[i]) for k, col in zip(kinds, cols)])


# -- validation ----------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    attribute: str | None
    row: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, attribute, row, message):
        self.violations.append(Violation(attribute, row, message))

    def summary(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(
            f"{v.attribute or 'schema'}"
            + (f" row {v.row}" if v.row is not None else "")
            + f": {v.message}"
            for v in self.violations
        )


def validate_schema(dataset: TraceDataset) -> ValidationReport:
    """Check every dataset invariant; the report is empty iff valid.

    Integer and float attributes are counter-valued in header traces
    (pkt, byt, td, pkt_len) and must be non-negative; the log binning
    downstream requires this anyway.
    """
    report = ValidationReport()
    for problem in check_schema(dataset.schema):
        report.add(None, None, problem)

    bounds = {
        "port": (0, PORT_MAX, "port outside [0, 65535]"),
        "ip": (0, IP_MAX, "IPv4 value outside 32-bit range"),
        "integer": (0, None, "negative counter value"),
        "float": (0, None, "negative counter value"),
        "timestamp": (0, None, "negative timestamp"),
    }
    for f in dataset.schema:
        if f.kind == "categorical":
            continue
        col = dataset.columns[f.name]
        lo, hi, msg = bounds[f.kind]
        bad = col < lo
        if hi is not None:
            bad = bad | (col > hi)
        for row in np.nonzero(bad)[0]:
            report.add(f.name, int(row), f"{msg} (value {col[row]})")
    return report
