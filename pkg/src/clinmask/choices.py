"""Difficulty-calibrated answer options: arithmetic sequences anchored to a
sampled mixture component for continuous features, frequency-weighted draws
for categorical ones."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .gmm import DEFAULT_COMPONENTS, GmmModel, fit_gmm, sample_component
from .tabular import FeatureSpec, Kind, PatientRecord

LETTERS = "ABCDE"
DEFAULT_DIFFICULTY = 2.0
DEFAULT_K_OPTIONS = 5
MIN_OPTIONS = 2


class ChoiceGenerationError(ValueError):
    """No valid option set can be produced for this (patient, feature)."""


class BoundsConsistencyError(ValueError):
    """The observed true value violates the schema's own bounds."""


@dataclass
class ChoiceSet:
    options: list[str]
    answer_index: int
    raw_values: list
    provenance: str  # "continuous_gmm" | "categorical_frequency"
    margin: float | None = None
    component: int | None = None

    def letter(self) -> str:
        return LETTERS[self.answer_index]


def derive_rng(master_seed: int, patient_id: str, feature_id: int) -> np.random.Generator:
    """Per-question RNG stream, independent of generation order."""
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    pid_entropy = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(
        np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, feature_id, pid_entropy])
    )


def seed_trace(master_seed: int, patient_id: str, feature_id: int) -> list[int]:
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    return [master_seed, feature_id, int.from_bytes(digest[:8], "big")]


def plausibility_postprocess(
    raw_values: list[float], spec: FeatureSpec, true_value: float
) -> list[float]:
    """Drop implausible candidates, translating the whole sequence by whole
    steps first when that keeps more of it inside the bounds.

    Only shifts that leave the true value in the window are considered, so
    the truth is never removed or moved. The returned ascending list may fall
    below the minimum option count, which the caller treats as a generation
    failure.
    """
    if not spec.in_bounds(true_value):
        raise BoundsConsistencyError(
            f"true value {true_value} violates bounds of feature {spec.name!r}"
        )
    values = sorted(raw_values)
    if spec.bounds is None or all(spec.in_bounds(v) for v in values):
        return values
    if len(values) < 2:
        return [v for v in values if spec.in_bounds(v)]
    k = len(values)
    step = values[1] - values[0]
    scale = max(abs(true_value), abs(step), 1.0)
    truth_index = min(range(k), key=lambda i: abs(values[i] - true_value))
    if abs(values[truth_index] - true_value) > 1e-9 * scale:
        raise ValueError("true value is not among the candidate options")
    best_shift, best_count = 0, -1
    for shift in range(truth_index - k + 1, truth_index + 1):
        count = sum(spec.in_bounds(v + shift * step) for v in values)
        if (count, -abs(shift), shift) > (best_count, -abs(best_shift), best_shift):
            best_shift, best_count = shift, count
    shifted = [v + best_shift * step for v in values]
    shifted[truth_index - best_shift] = true_value  # absorb float drift
    return [v for v in shifted if spec.in_bounds(v)]


def _window_around(true_value: float, step: float, k: int) -> list[float]:
    low = -(k // 2)
    return [true_value + m * step for m in range(low, low + k)]


def continuous_choices(
    model: GmmModel,
    true_value: float,
    difficulty: float,
    k_options: int,
    spec: FeatureSpec,
    rng: np.random.Generator,
) -> ChoiceSet:
    """Arithmetic-sequence options spanning truth +/- one margin.

    The margin is ``difficulty`` times the standard deviation of the
    posterior-sampled component; the step divides it so the extreme options
    sit at the margin for the requested option count.
    """
    if not MIN_OPTIONS <= k_options <= len(LETTERS):
        raise ValueError(f"k_options must be in [2, 5], got {k_options}")
    if difficulty <= 0:
        raise ValueError("difficulty must be positive")
    component = sample_component(model, true_value, rng)
    margin = difficulty * float(np.sqrt(model.variances[component]))
    step = margin / (k_options // 2)
    if step <= 0:
        raise ChoiceGenerationError(f"degenerate step for feature {spec.name!r}")
    raw = _window_around(true_value, step, k_options)
    raw = plausibility_postprocess(raw, spec, true_value)
    rendered = [spec.render_value(v) for v in raw]
    if len(set(rendered)) < len(rendered):
        # rounding collisions: collapse onto the precision grid
        seen: dict[str, float] = {}
        for text in rendered:
            seen.setdefault(text, float(text))
        raw = [v for v in seen.values() if spec.in_bounds(v)]
        raw.sort()
        rendered = [spec.render_value(v) for v in raw]
    true_text = spec.render_value(true_value)
    if true_text not in rendered:
        raise ChoiceGenerationError(
            f"true value fell out of the option grid for feature {spec.name!r}"
        )
    if len(raw) < MIN_OPTIONS:
        raise ChoiceGenerationError(
            f"bounds leave fewer than {MIN_OPTIONS} options for feature {spec.name!r}"
        )
    order = rng.permutation(len(raw))
    options = [rendered[i] for i in order]
    raw_values = [raw[i] for i in order]
    return ChoiceSet(
        options=options,
        answer_index=options.index(true_text),
        raw_values=raw_values,
        provenance="continuous_gmm",
        margin=margin,
        component=component,
    )


def categorical_choices(
    frequencies: dict[str, int],
    true_value: str,
    k_options: int,
    rng: np.random.Generator,
) -> ChoiceSet:
    """Truth plus frequency-weighted distractors drawn without replacement."""
    if not MIN_OPTIONS <= k_options <= len(LETTERS):
        raise ValueError(f"k_options must be in [2, 5], got {k_options}")
    if true_value not in frequencies:
        raise ChoiceGenerationError(
            f"true value {true_value!r} absent from the frequency table"
        )
    others = sorted(v for v in frequencies if v != true_value)
    weights = np.array([frequencies[v] for v in others], dtype=float)
    positive = weights > 0
    if not positive.any():
        raise ChoiceGenerationError(
            f"no alternative values observed for {true_value!r}; cannot form options"
        )
    pool = [v for v, ok in zip(others, positive) if ok]
    weights = weights[positive]
    n_distractors = min(k_options, len(pool) + 1) - 1
    picked = rng.choice(len(pool), size=n_distractors, replace=False, p=weights / weights.sum())
    options = [true_value] + [pool[i] for i in picked]
    order = rng.permutation(len(options))
    options = [options[i] for i in order]
    return ChoiceSet(
        options=options,
        answer_index=options.index(true_value),
        raw_values=list(options),
        provenance="categorical_frequency",
    )


@dataclass
class DistractorEngine:
    """Per-feature mixture models and frequency tables, fit on training rows
    only, plus the knobs that turn them into option sets."""

    schema: list[FeatureSpec]
    models: dict[int, GmmModel] = field(default_factory=dict)
    frequencies: dict[int, dict[str, int]] = field(default_factory=dict)
    difficulty: float = DEFAULT_DIFFICULTY
    k_options: int = DEFAULT_K_OPTIONS

    @classmethod
    def fit(
        cls,
        records: list[PatientRecord],
        schema: list[FeatureSpec],
        difficulty: float = DEFAULT_DIFFICULTY,
        k_options: int = DEFAULT_K_OPTIONS,
        gmm_components: int = DEFAULT_COMPONENTS,
    ) -> "DistractorEngine":
        engine = cls(schema=schema, difficulty=difficulty, k_options=k_options)
        for spec in schema:
            column = [r.values[spec.id] for r in records]
            present = [v for v in column if v is not None]
            if not present:
                continue
            if spec.kind is Kind.CONTINUOUS:
                engine.models[spec.id] = fit_gmm(present, k=gmm_components)
            else:
                engine.frequencies[spec.id] = dict(Counter(present))
        return engine

    def choices_for(
        self, spec: FeatureSpec, true_value, rng: np.random.Generator
    ) -> ChoiceSet:
        if spec.kind is Kind.CONTINUOUS:
            model = self.models.get(spec.id)
            if model is None:
                raise ChoiceGenerationError(
                    f"no mixture fit available for feature {spec.name!r}"
                )
            return continuous_choices(
                model, float(true_value), self.difficulty, self.k_options, spec, rng
            )
        table = self.frequencies.get(spec.id)
        if table is None:
            raise ChoiceGenerationError(
                f"no frequency table available for feature {spec.name!r}"
            )
        return categorical_choices(table, str(true_value), self.k_options, rng)


def validate_choice_set(choice_set: ChoiceSet, spec: FeatureSpec, true_value) -> None:
    """Assert every per-question option invariant; raises on violation."""
    n = len(choice_set.options)
    if not MIN_OPTIONS <= n <= len(LETTERS):
        raise AssertionError(f"option count {n} outside [2, 5]")
    if len(set(choice_set.options)) != n:
        raise AssertionError("options are not pairwise distinct")
    if not 0 <= choice_set.answer_index < n:
        raise AssertionError("answer index out of range")
    if choice_set.options[choice_set.answer_index] != spec.render_value(true_value):
        raise AssertionError("answer option does not render the true value")
    if choice_set.provenance == "continuous_gmm":
        values = sorted(float(v) for v in choice_set.raw_values)
        for v in values:
            if not spec.in_bounds(v):
                raise AssertionError(f"option value {v} violates bounds")
        gaps = np.diff(values)
        if len(gaps) and (np.abs(gaps - gaps[0]) > 1e-9 * max(abs(gaps[0]), 1.0)).any():
            raise AssertionError("option values are not an arithmetic progression")
        true_text = spec.render_value(true_value)
        if sum(1 for v in values if spec.render_value(v) == true_text) < 1:
            raise AssertionError("true value missing from raw option values")
