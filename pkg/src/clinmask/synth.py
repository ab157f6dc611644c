"""Deterministic synthetic registry generator used as a test-scale stand-in
for real tabular clinical data."""

from __future__ import annotations

import numpy as np

from .tabular import FeatureSpec, Kind, PatientRecord

_SECTIONS = (
    ("Vitals", "Hemodynamics"),
    ("Labs", "Chemistry"),
    ("Labs", "Hematology"),
    ("Treatment", "Antibiotics"),
    ("Outcome", "Status"),
)
_UNITS = ("mg/dL", "mmol/L", "bpm", "mmHg", None)

# Feature ordinals carrying the planted near-duplicate pairs (continuous echo
# of feature 0 at ordinal 2, relabeled copy of feature 1 at ordinal 3); the
# ordinals keep kinds aligned with the even=continuous, odd=categorical cycle.
PLANTED_CONTINUOUS_PAIR = (0, 2)
PLANTED_CATEGORICAL_PAIR = (1, 3)


def _continuous_params(j: int, rng: np.random.Generator):
    k = 2 + (j % 2)
    base = 5.0 + 3.0 * (j % 7)
    means = base + np.arange(k) * (4.0 + (j % 3))
    sds = 0.5 + 0.25 * ((j + np.arange(k)) % 3)
    weights = 1.0 + ((j + np.arange(k)) % k)
    return weights / weights.sum(), means, sds


def synthesize_registry(
    n_patients: int,
    n_features: int,
    seed: int,
    missing_rate: float = 0.0,
    plant_redundant: bool = True,
) -> tuple[list[FeatureSpec], list[PatientRecord]]:
    """Build a schema and records with known structure.

    Even ordinals are continuous draws from 2-3 component normal mixtures,
    odd ordinals are categoricals with linearly ramped frequency tables.
    When ``plant_redundant`` is set (and the table is wide enough), ordinal 1
    becomes a noisy copy of ordinal 0 and ordinal 3 a relabeled copy of
    ordinal 2, giving two high-dependence pairs for leak-filter tests.
    """
    if n_patients <= 0 or n_features <= 0:
        raise ValueError("n_patients and n_features must be positive")
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError(f"missing_rate must be in [0, 1), got {missing_rate}")
    rng = np.random.default_rng(seed)
    plant = plant_redundant and n_features >= 4

    schema: list[FeatureSpec] = []
    columns: list[np.ndarray] = []
    for j in range(n_features):
        continuous = j % 2 == 0
        if plant and j == PLANTED_CONTINUOUS_PAIR[1]:
            src = columns[PLANTED_CONTINUOUS_PAIR[0]]
            col = src + rng.normal(0.0, 0.05, n_patients)
            spec = FeatureSpec(
                name=f"feat_{j:03d}",
                kind=Kind.CONTINUOUS,
                id=j,
                unit=_UNITS[j % len(_UNITS)],
                section=_SECTIONS[j % len(_SECTIONS)],
                precision=2,
            )
        elif plant and j == PLANTED_CATEGORICAL_PAIR[1]:
            src = columns[PLANTED_CATEGORICAL_PAIR[0]]
            col = np.array([f"alias_{v}" for v in src], dtype=object)
            spec = FeatureSpec(
                name=f"feat_{j:03d}",
                kind=Kind.CATEGORICAL,
                id=j,
                section=_SECTIONS[j % len(_SECTIONS)],
                precision=0,
            )
        elif continuous:
            weights, means, sds = _continuous_params(j, rng)
            comp = rng.choice(len(weights), size=n_patients, p=weights)
            col = means[comp] + rng.normal(0.0, 1.0, n_patients) * sds[comp]
            bounds = (0.0, None) if j % 6 == 0 else None
            if bounds is not None:
                col = np.maximum(col, 0.0)
            spec = FeatureSpec(
                name=f"feat_{j:03d}",
                kind=Kind.CONTINUOUS,
                id=j,
                unit=_UNITS[j % len(_UNITS)],
                section=_SECTIONS[j % len(_SECTIONS)],
                bounds=bounds,
                precision=1 + (j % 2),
            )
        else:
            n_levels = 2 + (j % 5)
            weights = np.arange(1, n_levels + 1, dtype=float)
            weights /= weights.sum()
            levels = np.array([f"level_{j:03d}_{i}" for i in range(n_levels)], dtype=object)
            col = levels[rng.choice(n_levels, size=n_patients, p=weights)]
            spec = FeatureSpec(
                name=f"feat_{j:03d}",
                kind=Kind.CATEGORICAL,
                id=j,
                section=_SECTIONS[j % len(_SECTIONS)],
                precision=0,
            )
        schema.append(spec)
        columns.append(col)

    missing = (
        rng.random((n_patients, n_features)) < missing_rate
        if missing_rate > 0
        else None
    )
    width = len(str(max(n_patients - 1, 1)))
    records = []
    for i in range(n_patients):
        values: list = [None] * n_features
        for j, col in enumerate(columns):
            if missing is not None and missing[i, j]:
                continue
            v = col[i]
            values[j] = float(v) if schema[j].kind is Kind.CONTINUOUS else str(v)
        records.append(PatientRecord(f"P{str(i).zfill(width)}", values))
    return schema, records
