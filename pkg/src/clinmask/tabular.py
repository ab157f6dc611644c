"""Typed ingestion of delimited clinical tables plus their schema sidecar."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

LOGGER = logging.getLogger(__name__)

# Cell value: float for continuous, str for categorical, None for missing.
CellValue = float | str | None

DEFAULT_MISSING_TOKENS = ("", "NA", "N/A", "NaN", "nan", "null", "NULL")


class SchemaError(ValueError):
    """Schema sidecar is invalid or does not match the data header."""


class RowError(ValueError):
    """A data row cannot be parsed against the schema."""

    def __init__(self, message: str, row_index: int):
        super().__init__(message)
        self.row_index = row_index


class Kind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    """Metadata for one column: identity, rendering, and plausibility limits."""

    name: str
    kind: Kind
    id: int
    unit: str | None = None
    section: tuple[str, ...] = ("Data",)
    bounds: tuple[float | None, float | None] | None = None
    precision: int = 2
    missing_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if not self.section:
            raise SchemaError(f"feature {self.name!r}: section list must be non-empty")
        if not 0 <= self.precision <= 10:
            raise SchemaError(f"feature {self.name!r}: precision must be in [0, 10]")
        if self.bounds is not None:
            low, high = self.bounds
            if low is not None and high is not None and low > high:
                raise SchemaError(f"feature {self.name!r}: bounds low > high")

    def render_value(self, value: float | str) -> str:
        """Format a cell value the way it appears in prompts and options."""
        if self.kind is Kind.CONTINUOUS:
            v = float(value)
            if v == 0.0:
                v = 0.0  # normalize -0.0
            return f"{v:.{self.precision}f}"
        return str(value)

    def in_bounds(self, value: float) -> bool:
        if self.bounds is None:
            return True
        low, high = self.bounds
        if low is not None and value < low:
            return False
        if high is not None and value > high:
            return False
        return True


@dataclass
class PatientRecord:
    """One patient's cell values, aligned to the schema's feature ordinals."""

    patient_id: str
    values: list[CellValue]

    def validate(self, schema: list[FeatureSpec]) -> None:
        if len(self.values) != len(schema):
            raise SchemaError(
                f"record {self.patient_id!r}: {len(self.values)} values for "
                f"{len(schema)} features"
            )
        for spec, value in zip(schema, self.values):
            if value is None:
                continue
            if spec.kind is Kind.CONTINUOUS and not isinstance(value, float):
                raise SchemaError(
                    f"record {self.patient_id!r}: continuous feature "
                    f"{spec.name!r} holds {type(value).__name__}"
                )
            if spec.kind is Kind.CATEGORICAL and not isinstance(value, str):
                raise SchemaError(
                    f"record {self.patient_id!r}: categorical feature "
                    f"{spec.name!r} holds {type(value).__name__}"
                )


@dataclass
class DatasetSplit:
    train_ids: set[str]
    test_ids: set[str]
    seed: int

    def to_json(self) -> dict:
        return {
            "train_ids": sorted(self.train_ids),
            "test_ids": sorted(self.test_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSplit":
        return cls(set(doc["train_ids"]), set(doc["test_ids"]), int(doc["seed"]))


# ---------------------------------------------------------------------------
# Schema sidecar


def schema_to_document(schema: list[FeatureSpec]) -> dict:
    features = []
    for spec in schema:
        entry: dict = {
            "name": spec.name,
            "kind": spec.kind.value,
            "section": list(spec.section),
            "precision": spec.precision,
        }
        if spec.unit is not None:
            entry["unit"] = spec.unit
        if spec.bounds is not None:
            entry["bounds"] = list(spec.bounds)
        if spec.missing_tokens:
            entry["missing_tokens"] = list(spec.missing_tokens)
        features.append(entry)
    return {"features": features}


def schema_from_document(doc: dict) -> list[FeatureSpec]:
    if "features" not in doc or not isinstance(doc["features"], list):
        raise SchemaError("schema document must contain a 'features' list")
    schema = []
    for i, entry in enumerate(doc["features"]):
        try:
            kind = Kind(entry["kind"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"feature #{i}: bad or missing kind: {exc}") from exc
        bounds = entry.get("bounds")
        if bounds is not None:
            bounds = (
                None if bounds[0] is None else float(bounds[0]),
                None if bounds[1] is None else float(bounds[1]),
            )
        schema.append(
            FeatureSpec(
                name=entry.get("name", ""),
                kind=kind,
                id=i,
                unit=entry.get("unit"),
                section=tuple(entry.get("section", ("Data",))),
                bounds=bounds,
                precision=int(entry.get("precision", 2)),
                missing_tokens=tuple(entry.get("missing_tokens", ())),
            )
        )
    return schema


def load_schema(path: str | Path) -> list[FeatureSpec]:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    else:
        doc = json.loads(path.read_text(encoding="utf-8"))
    return schema_from_document(doc)


def save_schema(schema: list[FeatureSpec] | dict, path: str | Path) -> None:
    doc = schema if isinstance(schema, dict) else schema_to_document(schema)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Table IO

ID_COLUMN = "patient_id"


def load_table(
    data_path: str | Path,
    schema_path: str | Path,
    on_bad_cell: str = "reject",
) -> tuple[list[FeatureSpec], list[PatientRecord]]:
    """Load a delimited table plus its sidecar into typed records.

    The first column must be the patient id; every remaining header column
    must be described by the sidecar, in order. ``on_bad_cell`` controls what
    happens when a continuous cell fails to parse: ``"reject"`` raises a
    RowError naming the row, ``"coerce"`` turns the cell into a missing value
    with a warning.
    """
    if on_bad_cell not in ("reject", "coerce"):
        raise ValueError(f"on_bad_cell must be 'reject' or 'coerce', got {on_bad_cell!r}")
    schema = load_schema(schema_path)
    records: list[PatientRecord] = []
    with open(data_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{data_path}: empty file") from None
        if not header or header[0] != ID_COLUMN:
            raise SchemaError(
                f"{data_path}: first column must be {ID_COLUMN!r}, got "
                f"{header[0]!r}" if header else f"{data_path}: empty header"
            )
        columns = header[1:]
        if len(columns) != len(schema):
            raise SchemaError(
                f"header has {len(columns)} feature columns, schema describes "
                f"{len(schema)}"
            )
        for col, spec in zip(columns, schema):
            if col != spec.name:
                raise SchemaError(
                    f"column {col!r} does not match schema feature {spec.name!r}"
                )
        missing_sets = [
            set(DEFAULT_MISSING_TOKENS) | set(spec.missing_tokens) for spec in schema
        ]
        for row_index, row in enumerate(reader):
            if len(row) != len(header):
                raise RowError(
                    f"row {row_index}: {len(row)} cells, expected {len(header)}",
                    row_index,
                )
            values: list[CellValue] = []
            for spec, cell, missing in zip(schema, row[1:], missing_sets):
                if cell in missing:
                    values.append(None)
                elif spec.kind is Kind.CONTINUOUS:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        if on_bad_cell == "reject":
                            raise RowError(
                                f"row {row_index}: cell {cell!r} is not numeric "
                                f"for continuous feature {spec.name!r}",
                                row_index,
                            ) from None
                        LOGGER.warning(
                            "row %d: coercing unparseable cell %r (%s) to missing",
                            row_index,
                            cell,
                            spec.name,
                        )
                        values.append(None)
                else:
                    values.append(cell)
            records.append(PatientRecord(row[0], values))
    return schema, records


def write_table(
    schema: list[FeatureSpec],
    records: list[PatientRecord],
    data_path: str | Path,
) -> None:
    """Write records back to delimited text; floats keep full precision so a
    reload is value-identical."""
    with open(data_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([ID_COLUMN] + [spec.name for spec in schema])
        for record in records:
            row = [record.patient_id]
            for value in record.values:
                if value is None:
                    row.append("")
                elif isinstance(value, float):
                    row.append(repr(value))
                else:
                    row.append(value)
            writer.writerow(row)


_DECIMALS = re.compile(r"^-?\d*\.(\d+)$")


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def infer_schema(data_path: str | Path) -> dict:
    """Guess a draft schema document from the data alone, for human editing."""
    with open(data_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{data_path}: empty file") from None
        columns = header[1:] if header and header[0] == ID_COLUMN else header
        offset = 1 if columns is not header else 0
        observed: list[list[str]] = [[] for _ in columns]
        for row in reader:
            for i, cell in enumerate(row[offset:]):
                if cell not in DEFAULT_MISSING_TOKENS:
                    observed[i].append(cell)
    features = []
    for name, cells in zip(columns, observed):
        if not cells:
            LOGGER.warning("column %r has no observed values; defaulting to categorical", name)
            kind = Kind.CATEGORICAL
            precision = 0
        elif all(_is_number(c) for c in cells):
            kind = Kind.CONTINUOUS
            precision = 0
            for c in cells:
                m = _DECIMALS.match(c.strip())
                if m:
                    precision = max(precision, len(m.group(1)))
            precision = min(precision, 10)
        else:
            kind = Kind.CATEGORICAL
            precision = 0
        features.append(
            {
                "name": name,
                "kind": kind.value,
                "section": ["Data"],
                "precision": precision,
            }
        )
    return {"features": features}


def split_holdout(records: list[PatientRecord], n_test: int, seed: int) -> DatasetSplit:
    """Deterministically hold out exactly ``n_test`` patients."""
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids; cannot split")
    if not 0 < n_test < len(records):
        raise ValueError(f"n_test must be in (0, {len(records)}), got {n_test}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    test_ids = {ids[i] for i in order[:n_test]}
    train_ids = set(ids) - test_ids
    return DatasetSplit(train_ids=train_ids, test_ids=test_ids, seed=seed)
