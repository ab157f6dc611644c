"""Pairwise feature dependence via normalized mutual information, and the
per-target exclusion sets that keep leaky features out of prompts."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tabular import FeatureSpec, Kind, PatientRecord

DEFAULT_BINS = 10
DEFAULT_MIN_SUPPORT = 30


@dataclass
class DependenceMatrix:
    """Symmetric grid of normalized mutual information scores in [0, 1]."""

    values: np.ndarray
    support: np.ndarray
    bins: int
    data_hash: str = ""

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        if self.values.shape != (self.n, self.n) or self.support.shape != (self.n, self.n):
            raise ValueError("dependence matrix must be square")
        if not np.array_equal(self.values, self.values.T):
            raise ValueError("dependence matrix must be symmetric")
        if (self.values < 0).any() or (self.values > 1).any():
            raise ValueError("NMI values must lie in [0, 1]")

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            values=self.values,
            support=self.support,
            bins=np.array(self.bins),
            data_hash=np.array(self.data_hash),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DependenceMatrix":
        with np.load(path, allow_pickle=False) as data:
            return cls(
                values=data["values"],
                support=data["support"],
                bins=int(data["bins"]),
                data_hash=str(data["data_hash"]),
            )


def _feature_codes(
    records: list[PatientRecord], spec: FeatureSpec, bins: int
) -> tuple[np.ndarray, int]:
    """Discretize one column into integer codes; -1 marks missing cells."""
    raw = [r.values[spec.id] for r in records]
    codes = np.full(len(raw), -1, dtype=np.int64)
    if spec.kind is Kind.CONTINUOUS:
        present = np.array([v is not None for v in raw])
        if not present.any():
            return codes, 0
        x = np.array([v for v in raw if v is not None], dtype=float)
        edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1]))
        codes[present] = np.searchsorted(edges, x, side="left")
        return codes, len(edges) + 1
    labels = sorted({v for v in raw if v is not None})
    index = {v: i for i, v in enumerate(labels)}
    for i, v in enumerate(raw):
        if v is not None:
            codes[i] = index[v]
    return codes, max(len(labels), 1)


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _nmi_from_codes(
    codes_a: np.ndarray,
    n_a: int,
    codes_b: np.ndarray,
    n_b: int,
    min_support: int,
) -> tuple[float, int]:
    mask = (codes_a >= 0) & (codes_b >= 0)
    support = int(mask.sum())
    if support < min_support:
        return 0.0, support
    joint = np.bincount(
        codes_a[mask] * n_b + codes_b[mask], minlength=n_a * n_b
    ).reshape(n_a, n_b)
    h_a = _entropy(joint.sum(axis=1))
    h_b = _entropy(joint.sum(axis=0))
    if h_a == 0.0 or h_b == 0.0:
        return 0.0, support
    mi = h_a + h_b - _entropy(joint.ravel())
    nmi = mi / (np.sqrt(h_a) * np.sqrt(h_b))
    if abs(nmi - 1.0) < 1e-12:
        return 1.0, support
    return float(min(max(nmi, 0.0), 1.0)), support


def _resolve(schema: list[FeatureSpec], feature: int | str | FeatureSpec) -> FeatureSpec:
    if isinstance(feature, FeatureSpec):
        return feature
    if isinstance(feature, int):
        if not 0 <= feature < len(schema):
            raise KeyError(f"unknown feature ordinal {feature}")
        return schema[feature]
    for spec in schema:
        if spec.name == feature:
            return spec
    raise KeyError(f"unknown feature {feature!r}")


def estimate_nmi(
    records: list[PatientRecord],
    schema: list[FeatureSpec],
    feature_a: int | str | FeatureSpec,
    feature_b: int | str | FeatureSpec,
    bins: int = DEFAULT_BINS,
    min_support: int = DEFAULT_MIN_SUPPORT,
) -> float:
    """Plug-in mutual information over pairwise-complete rows, normalized as
    I / sqrt(H(a) * H(b)); 0 when either marginal entropy vanishes or support
    is below ``min_support``."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    spec_a = _resolve(schema, feature_a)
    spec_b = _resolve(schema, feature_b)
    codes_a, n_a = _feature_codes(records, spec_a, bins)
    codes_b, n_b = _feature_codes(records, spec_b, bins)
    value, _ = _nmi_from_codes(codes_a, n_a, codes_b, n_b, min_support)
    return value


def compute_dependence_matrix(
    records: list[PatientRecord],
    schema: list[FeatureSpec],
    bins: int = DEFAULT_BINS,
    min_support: int = DEFAULT_MIN_SUPPORT,
) -> DependenceMatrix:
    """Full symmetric NMI grid; the diagonal is 1 for nonzero-entropy features."""
    n = len(schema)
    all_codes = []
    for spec in schema:
        all_codes.append(_feature_codes(records, spec, bins))
    values = np.zeros((n, n))
    support = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        codes_i, n_i = all_codes[i]
        mask_i = codes_i >= 0
        support[i, i] = int(mask_i.sum())
        counts = np.bincount(codes_i[mask_i], minlength=n_i) if n_i else np.array([0])
        values[i, i] = 1.0 if _entropy(counts) > 0.0 else 0.0
        for j in range(i + 1, n):
            codes_j, n_j = all_codes[j]
            v, s = _nmi_from_codes(codes_i, n_i, codes_j, n_j, min_support)
            values[i, j] = values[j, i] = v
            support[i, j] = support[j, i] = s
    return DependenceMatrix(values=values, support=support, bins=bins)


def exclusions_from_matrix(
    matrix: DependenceMatrix, threshold: float
) -> dict[int, frozenset[int]]:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    excluded: dict[int, frozenset[int]] = {}
    for target in range(matrix.n):
        row = matrix.values[target]
        excluded[target] = frozenset(
            j for j in range(matrix.n) if j != target and row[j] > threshold
        )
    return excluded


def build_redundancy_filter(
    records: list[PatientRecord],
    schema: list[FeatureSpec],
    threshold: float = 0.5,
    bins: int = DEFAULT_BINS,
    min_support: int = DEFAULT_MIN_SUPPORT,
) -> dict[int, frozenset[int]]:
    """Map each masking target to the features that must leave its context."""
    matrix = compute_dependence_matrix(records, schema, bins=bins, min_support=min_support)
    return exclusions_from_matrix(matrix, threshold)


def table_hash(data_path: str | Path) -> str:
    h = hashlib.sha256()
    with open(data_path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
