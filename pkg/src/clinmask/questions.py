"""Render patient records into sectioned prompts and assemble masked-value,
outcome, and time-series questions into line-delimited question files."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .choices import (
    LETTERS,
    ChoiceGenerationError,
    ChoiceSet,
    DistractorEngine,
    derive_rng,
    seed_trace,
)
from .tabular import DatasetSplit, FeatureSpec, PatientRecord

LOGGER = logging.getLogger(__name__)

MASK_TOKEN = "[MASK]"
COT_PREFIX = "Let's think step by step"


class QuestionKind(str, Enum):
    DENOISING = "denoising"
    OUTCOME = "outcome_prediction"
    TIMESERIES = "timeseries_value"


class OutcomeTask(str, Enum):
    IN_HOSPITAL_MORTALITY = "in_hospital_mortality"
    AKI_48H = "aki_48h"
    MRS_3MONTH = "mrs_3month"
    MACE_1YEAR = "mace_1year"


BINARY_OUTCOME_OPTIONS = ("yes", "no")
MRS_CLASSES = tuple(str(i) for i in range(7))
MRS_RENDER_CAP = 5


class TargetMissingError(Exception):
    """The masking target has no observed value; the question is skipped."""


class LabelMissingError(Exception):
    """No outcome label for this subject; the question is skipped."""


class InsufficientHistoryError(Exception):
    """Too few rows precede the target timestamp; the question is skipped."""


@dataclass
class Question:
    question_id: str
    patient_id: str
    target: str
    prompt: str
    choices: ChoiceSet
    kind: QuestionKind
    excluded_features: frozenset[int] = frozenset()
    seed_trace: list[int] = field(default_factory=list)

    @property
    def answer_letter(self) -> str:
        return LETTERS[self.choices.answer_index]

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "patient_id": self.patient_id,
            "target": self.target,
            "prompt": self.prompt,
            "options": list(self.choices.options),
            "answer_index": self.choices.answer_index,
            "kind": self.kind.value,
            "seed_trace": list(self.seed_trace),
            "excluded_features": sorted(self.excluded_features),
        }


@dataclass
class EpisodeRow:
    t_hours: int
    values: dict[str, float | str]


@dataclass
class TimeSeriesEpisode:
    patient_id: str
    rows: list[EpisodeRow]
    interval_hours: int = 4
    outcome_labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.interval_hours <= 0:
            raise ValueError("interval_hours must be positive")
        times = [row.t_hours for row in self.rows]
        for prev, cur in zip(times, times[1:]):
            if cur - prev != self.interval_hours:
                raise ValueError(
                    f"episode {self.patient_id!r}: timestamps must increase by "
                    f"{self.interval_hours}h, got {prev} -> {cur}"
                )


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return (resources.files("clinmask") / "templates" / f"{name}.txt").read_text(
        encoding="utf-8"
    )


def render_options(options: list[str]) -> str:
    return "\n".join(f"{LETTERS[i]}. {text}" for i, text in enumerate(options))


class PromptRenderer:
    """Renders records as sectioned feature lines; reused across questions."""

    def __init__(self, schema: list[FeatureSpec]):
        self.schema = schema
        self.groups: dict[tuple[str, ...], list[FeatureSpec]] = {}
        for spec in schema:
            self.groups.setdefault(spec.section, []).append(spec)
        self.prefixes = [
            f"{spec.name} ({spec.unit}): " if spec.unit else f"{spec.name}: "
            for spec in schema
        ]

    def render(
        self,
        record: PatientRecord,
        excluded: frozenset[int] = frozenset(),
        masked: int | None = None,
    ) -> str:
        if masked is not None and masked in excluded:
            raise ValueError("masked feature must not be in the excluded set")
        blocks = []
        values = record.values
        for section, specs in self.groups.items():
            lines = []
            for spec in specs:
                fid = spec.id
                if fid == masked:
                    lines.append(self.prefixes[fid] + MASK_TOKEN)
                    continue
                if fid in excluded:
                    continue
                value = values[fid]
                if value is None:
                    continue
                lines.append(self.prefixes[fid] + spec.render_value(value))
            if lines:
                blocks.append("[" + "/".join(section) + "]\n" + "\n".join(lines))
        return "\n\n".join(blocks)


def render_record(
    record: PatientRecord,
    schema: list[FeatureSpec],
    excluded: frozenset[int] = frozenset(),
    masked: int | None = None,
) -> str:
    return PromptRenderer(schema).render(record, excluded=excluded, masked=masked)


def _task_seed_id(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "big")


def build_denoising_question(
    record: PatientRecord,
    schema: list[FeatureSpec],
    target: int,
    excluded: frozenset[int],
    engine: DistractorEngine,
    master_seed: int,
    renderer: PromptRenderer | None = None,
) -> Question:
    spec = schema[target]
    value = record.values[target]
    if value is None:
        raise TargetMissingError(f"{record.patient_id}: {spec.name} is missing")
    rng = derive_rng(master_seed, record.patient_id, target)
    choice_set = engine.choices_for(spec, value, rng)
    renderer = renderer or PromptRenderer(schema)
    visible_excluded = frozenset(excluded) - {target}
    context = renderer.render(record, excluded=visible_excluded, masked=target)
    prompt = _template("denoising").format(
        context=context,
        feature=spec.name,
        section="/".join(spec.section),
        options=render_options(choice_set.options),
    ).rstrip("\n")
    return Question(
        question_id=f"{record.patient_id}::f{target:04d}",
        patient_id=record.patient_id,
        target=spec.name,
        prompt=prompt,
        choices=choice_set,
        kind=QuestionKind.DENOISING,
        excluded_features=visible_excluded,
        seed_trace=seed_trace(master_seed, record.patient_id, target),
    )


def _outcome_options(task: OutcomeTask, label: str, rng: np.random.Generator) -> ChoiceSet:
    if task is OutcomeTask.MRS_3MONTH:
        if label not in MRS_CLASSES:
            raise ChoiceGenerationError(f"label {label!r} is not an mRS class")
        truth = int(label)
        start = min(max(truth - MRS_RENDER_CAP // 2, 0), len(MRS_CLASSES) - MRS_RENDER_CAP)
        pool = list(MRS_CLASSES[start : start + MRS_RENDER_CAP])
    else:
        if label not in BINARY_OUTCOME_OPTIONS:
            raise ChoiceGenerationError(f"label {label!r} is not yes/no")
        pool = list(BINARY_OUTCOME_OPTIONS)
    order = rng.permutation(len(pool))
    options = [pool[i] for i in order]
    return ChoiceSet(
        options=options,
        answer_index=options.index(label),
        raw_values=list(options),
        provenance="categorical_frequency",
    )


def render_episode(
    episode: TimeSeriesEpisode,
    schema: list[FeatureSpec],
    rows: list[EpisodeRow] | None = None,
    masked: tuple[int, str] | None = None,
) -> str:
    """Timestamped blocks of feature lines; ``masked`` is (t_hours, name)."""
    by_name = {spec.name: spec for spec in schema}
    blocks = []
    for row in rows if rows is not None else episode.rows:
        lines = []
        for name, value in row.values.items():
            spec = by_name.get(name)
            prefix = (
                f"{name} ({spec.unit}): " if spec is not None and spec.unit else f"{name}: "
            )
            if masked is not None and masked == (row.t_hours, name):
                lines.append(prefix + MASK_TOKEN)
            elif value is None:
                continue
            else:
                lines.append(prefix + (spec.render_value(value) if spec else str(value)))
        if lines:
            blocks.append(f"[t = +{row.t_hours}h]\n" + "\n".join(lines))
    return "\n\n".join(blocks)


def build_outcome_question(
    subject: PatientRecord | TimeSeriesEpisode,
    task: OutcomeTask,
    schema: list[FeatureSpec],
    master_seed: int,
    label: str | None = None,
) -> Question:
    if isinstance(subject, TimeSeriesEpisode):
        label = label if label is not None else subject.outcome_labels.get(task.value)
        context = render_episode(subject, schema)
    else:
        context = render_record(subject, schema)
    if label is None:
        raise LabelMissingError(f"{subject.patient_id}: no label for {task.value}")
    rng = derive_rng(master_seed, subject.patient_id, _task_seed_id(task.value))
    choice_set = _outcome_options(task, str(label), rng)
    prompt = _template(f"outcome_{task.value}").format(
        context=context, options=render_options(choice_set.options)
    ).rstrip("\n")
    return Question(
        question_id=f"{subject.patient_id}::{task.value}",
        patient_id=subject.patient_id,
        target=task.value,
        prompt=prompt,
        choices=choice_set,
        kind=QuestionKind.OUTCOME,
        seed_trace=seed_trace(master_seed, subject.patient_id, _task_seed_id(task.value)),
    )


def build_timeseries_value_question(
    episode: TimeSeriesEpisode,
    target: str,
    schema: list[FeatureSpec],
    engine: DistractorEngine,
    master_seed: int,
    horizon_hours: int = 24,
) -> Question:
    required = horizon_hours // episode.interval_hours
    if len(episode.rows) - 1 < required:
        raise InsufficientHistoryError(
            f"{episode.patient_id}: need {required} rows before the target"
        )
    target_row = episode.rows[-1]
    value = target_row.values.get(target)
    if value is None:
        raise TargetMissingError(f"{episode.patient_id}: {target} absent at target time")
    by_name = {spec.name: spec for spec in schema}
    if target not in by_name:
        raise KeyError(f"unknown feature {target!r}")
    spec = by_name[target]
    rng = derive_rng(master_seed, episode.patient_id, spec.id)
    choice_set = engine.choices_for(spec, value, rng)
    history = episode.rows[-(required + 1) : -1]
    context = render_episode(episode, schema, rows=history)
    target_block = render_episode(
        TimeSeriesEpisode(
            patient_id=episode.patient_id,
            rows=[EpisodeRow(target_row.t_hours, {target: value})],
            interval_hours=episode.interval_hours,
        ),
        schema,
        masked=(target_row.t_hours, target),
    )
    prompt = _template("timeseries_value").format(
        context=context + "\n\n" + target_block,
        feature=target,
        hours=target_row.t_hours,
        options=render_options(choice_set.options),
    ).rstrip("\n")
    return Question(
        question_id=f"{episode.patient_id}::ts::{target}",
        patient_id=episode.patient_id,
        target=target,
        prompt=prompt,
        choices=choice_set,
        kind=QuestionKind.TIMESERIES,
        seed_trace=seed_trace(master_seed, episode.patient_id, spec.id),
    )


# ---------------------------------------------------------------------------
# Dataset files


@dataclass
class TargetTally:
    n_candidates: int = 0
    n_missing_skipped: int = 0
    n_generation_failures: int = 0
    n_emitted: int = 0


@dataclass
class GenerationSummary:
    per_target: dict[str, TargetTally]
    n_emitted: int
    seed: int
    split_name: str

    def to_meta(self) -> dict:
        return {
            "meta": {
                "seed": self.seed,
                "split_name": self.split_name,
                "n_emitted": self.n_emitted,
                "per_target": {
                    name: vars(tally) for name, tally in sorted(self.per_target.items())
                },
            }
        }


def _eligible_feature_ids(
    schema: list[FeatureSpec], engine: DistractorEngine, features: list[int] | None
) -> list[int]:
    ids = [
        spec.id
        for spec in schema
        if spec.id in engine.models or spec.id in engine.frequencies
    ]
    if features is not None:
        wanted = set(features)
        ids = [fid for fid in ids if fid in wanted]
    return ids


def generate_denoising_file(
    records: list[PatientRecord],
    schema: list[FeatureSpec],
    split: DatasetSplit,
    out_path: str | Path,
    engine: DistractorEngine,
    exclusions: dict[int, frozenset[int]],
    master_seed: int = 0,
    split_name: str = "train",
    count: int | None = 30000,
    features: list[int] | None = None,
) -> GenerationSummary:
    """Write one question per line after a single metadata header line.

    With a ``count``, (patient, feature) pairs are drawn uniformly without
    replacement from all eligible combinations until the count is reached or
    eligibility runs out. Without one, every eligible pair is swept in
    (feature, patient) order, tallying skips — the evaluation layout.
    """
    wanted_ids = split.train_ids if split_name == "train" else split.test_ids
    subset = [r for r in records if r.patient_id in wanted_ids]
    feature_ids = _eligible_feature_ids(schema, engine, features)
    renderer = PromptRenderer(schema)
    tallies = {schema[fid].name: TargetTally() for fid in feature_ids}

    def attempt(record: PatientRecord, fid: int) -> Question | None:
        tally = tallies[schema[fid].name]
        if record.values[fid] is None:
            tally.n_missing_skipped += 1
            return None
        try:
            question = build_denoising_question(
                record,
                schema,
                fid,
                exclusions.get(fid, frozenset()),
                engine,
                master_seed,
                renderer=renderer,
            )
        except ChoiceGenerationError as exc:
            LOGGER.debug("generation failure: %s", exc)
            tally.n_generation_failures += 1
            return None
        tally.n_emitted += 1
        return question

    out_path = Path(out_path)
    tmp_path = out_path.with_name(out_path.name + ".tmp")
    n_emitted = 0
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as body:

        def emit(question: Question) -> None:
            body.write(json.dumps(question.to_json()) + "\n")

        if count is None:
            for fid in sorted(feature_ids):
                tally = tallies[schema[fid].name]
                for record in subset:
                    tally.n_candidates += 1
                    question = attempt(record, fid)
                    if question is not None:
                        emit(question)
                        n_emitted += 1
        else:
            present = np.array(
                [[record.values[fid] is not None for fid in feature_ids] for record in subset],
                dtype=bool,
            )
            pairs = np.argwhere(present).astype(np.int64)
            n_missing_total = int(present.size - present.sum())
            missing_per_feature = len(subset) - present.sum(axis=0)
            for col, fid in enumerate(feature_ids):
                tally = tallies[schema[fid].name]
                tally.n_candidates = len(subset)
                tally.n_missing_skipped = int(missing_per_feature[col])
            del present
            rng = np.random.default_rng(master_seed)
            order = rng.permutation(len(pairs))
            for idx in order:
                if n_emitted >= count:
                    break
                record = subset[pairs[idx, 0]]
                fid = feature_ids[pairs[idx, 1]]
                question = attempt(record, fid)
                if question is not None:
                    emit(question)
                    n_emitted += 1
            if n_emitted < count:
                LOGGER.warning(
                    "eligibility exhausted: emitted %d of %d requested questions "
                    "(%d targets were missing)",
                    n_emitted,
                    count,
                    n_missing_total,
                )

    summary = GenerationSummary(
        per_target=tallies, n_emitted=n_emitted, seed=master_seed, split_name=split_name
    )
    with open(out_path, "w", encoding="utf-8", newline="\n") as out:
        out.write(json.dumps(summary.to_meta()) + "\n")
        with open(tmp_path, "r", encoding="utf-8") as body:
            for line in body:
                out.write(line)
    tmp_path.unlink()
    return summary


@dataclass
class QuestionRecord:
    """A question parsed back from a question file."""

    question_id: str
    patient_id: str
    target: str
    prompt: str
    options: list[str]
    answer_index: int
    kind: str
    seed_trace: list[int]
    excluded_features: list[int]

    @property
    def answer_letter(self) -> str:
        return LETTERS[self.answer_index]


def load_questions(path: str | Path) -> tuple[dict, list[QuestionRecord]]:
    meta: dict = {}
    questions: list[QuestionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            doc = json.loads(line)
            if "meta" in doc:
                meta = doc["meta"]
                continue
            questions.append(
                QuestionRecord(
                    question_id=doc["question_id"],
                    patient_id=doc["patient_id"],
                    target=doc["target"],
                    prompt=doc["prompt"],
                    options=list(doc["options"]),
                    answer_index=int(doc["answer_index"]),
                    kind=doc["kind"],
                    seed_trace=list(doc.get("seed_trace", [])),
                    excluded_features=list(doc.get("excluded_features", [])),
                )
            )
    return meta, questions
