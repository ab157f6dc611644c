"""Answer extraction, forced-choice scoring, and metric reports with
missing-target accounting."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .choices import LETTERS
from .client import CapabilityError, CompletionRequest
from .questions import COT_PREFIX, QuestionRecord

ANSWER_FORCING_SUFFIX = "Therefore, the answer is"

_BOXED = re.compile(r"\\boxed\{\s*([A-E])\s*\.?\s*\}")
_ANSWER_IS = re.compile(r"answer is[:\s]*\(?([A-E])\)?(?=[^A-Za-z0-9]|$)", re.IGNORECASE)


def extract_answer(reasoning: str) -> str | None:
    """Letter of the last boxed expression, falling back to the last
    standalone "answer is X"; None when neither appears."""
    boxed = _BOXED.findall(reasoning)
    if boxed:
        return boxed[-1]
    stated = _ANSWER_IS.findall(reasoning)
    if stated:
        return stated[-1]
    return None


def build_scoring_prompt(question_prompt: str, reasoning: str) -> str:
    return f"{question_prompt}\n\n{reasoning}\n{ANSWER_FORCING_SUFFIX}"


def forced_choice(client, question, reasoning: str) -> str:
    """Argmax option letter by continuation log probability; ties go to the
    earliest letter."""
    letters = [LETTERS[i] for i in range(len(question.options))]
    scores = client.score_continuations(
        build_scoring_prompt(question.prompt, reasoning),
        [f" {letter}" for letter in letters],
    )
    best = 0
    for i in range(1, len(scores)):
        if scores[i].log_probability > scores[best].log_probability:
            best = i
    return letters[best]


@dataclass
class Prediction:
    question_id: str
    reasoning: str
    extracted_letter: str | None
    forced_letter: str | None
    final_letter: str | None
    model_tag: str

    def to_json(self) -> dict:
        return vars(self)

    @classmethod
    def from_json(cls, doc: dict) -> "Prediction":
        return cls(**{k: doc.get(k) for k in cls.__dataclass_fields__})


def predict_one(client, question, model_tag: str, cot_prefix: str | None = COT_PREFIX) -> Prediction:
    completion = client.complete(
        CompletionRequest(prompt=question.prompt, assistant_prefix=cot_prefix)
    )
    reasoning = (cot_prefix + completion) if cot_prefix else completion
    extracted = extract_answer(reasoning)
    try:
        forced = forced_choice(client, question, reasoning)
    except CapabilityError:
        forced = None
    return Prediction(
        question_id=question.question_id,
        reasoning=reasoning,
        extracted_letter=extracted,
        forced_letter=forced,
        final_letter=forced if forced is not None else extracted,
        model_tag=model_tag,
    )


def run_inference(
    client,
    questions: list[QuestionRecord],
    model_tag: str,
    cot_prefix: str | None = COT_PREFIX,
    max_in_flight: int = 8,
) -> list[Prediction]:
    """Score questions in parallel; output order matches input order."""
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(
            pool.map(lambda q: predict_one(client, q, model_tag, cot_prefix), questions)
        )


def write_predictions(predictions: list[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for prediction in predictions:
            fh.write(json.dumps(prediction.to_json()) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    with open(path, "r", encoding="utf-8") as fh:
        return [Prediction.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class TaskRow:
    task: str
    n_test: int
    n_missing_skipped: int
    n_generation_failures: int
    n_evaluated: int
    n_correct: int
    accuracy: float
    macro_f1: float


@dataclass
class EvalReport:
    rows: list[TaskRow]
    model_tag: str = ""
    config_hash: str = ""

    def row(self, task: str) -> TaskRow:
        for row in self.rows:
            if row.task == task:
                return row
        raise KeyError(task)

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "config_hash": self.config_hash,
            "rows": [vars(row) for row in self.rows],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(
            rows=[TaskRow(**row) for row in doc["rows"]],
            model_tag=doc.get("model_tag", ""),
            config_hash=doc.get("config_hash", ""),
        )


def _macro_f1(gold: list[str], predicted: list[str | None]) -> float:
    classes = sorted(set(gold))
    if not classes:
        return 0.0
    f1_sum = 0.0
    for cls in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, predicted) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, predicted) if g == cls and p != cls)
        denom = 2 * tp + fp + fn
        f1_sum += (2 * tp / denom) if denom else 0.0
    return f1_sum / len(classes)


def score_metrics(
    questions: list[QuestionRecord],
    predictions: list[Prediction],
    generation_meta: dict | None = None,
    model_tag: str = "",
    config_hash: str = "",
) -> EvalReport:
    """Per-task accuracy and macro-F1 with skip counts carried through from
    the question file's generation metadata."""
    by_id: dict[str, Prediction] = {}
    for prediction in predictions:
        if prediction.question_id in by_id:
            raise ValueError(f"duplicate prediction for {prediction.question_id}")
        by_id[prediction.question_id] = prediction
    known = {q.question_id for q in questions}
    unknown = set(by_id) - known
    if unknown:
        raise ValueError(f"predictions reference unknown questions: {sorted(unknown)[:5]}")

    per_task: dict[str, list[QuestionRecord]] = {}
    for question in questions:
        per_task.setdefault(question.target, []).append(question)

    meta_targets = (generation_meta or {}).get("per_target", {})
    rows = []
    for task in sorted(per_task):
        task_questions = per_task[task]
        gold: list[str] = []
        predicted: list[str | None] = []
        n_correct = 0
        for question in task_questions:
            if question.question_id not in by_id:
                raise ValueError(f"no prediction for question {question.question_id}")
            prediction = by_id[question.question_id]
            gold.append(question.options[question.answer_index])
            final = prediction.final_letter
            if final is not None and LETTERS.index(final) < len(question.options):
                predicted.append(question.options[LETTERS.index(final)])
            else:
                predicted.append(None)
            if final == question.answer_letter:
                n_correct += 1
        n_evaluated = len(task_questions)
        tally = meta_targets.get(task, {})
        n_missing = int(tally.get("n_missing_skipped", 0))
        n_failures = int(tally.get("n_generation_failures", 0))
        n_candidates = tally.get("n_candidates")
        # sampled training files tally the whole eligibility pool, which does
        # not add up against the emitted subset; adopt the counts only when
        # they describe exactly the questions being scored (the sweep layout)
        consistent = (
            n_candidates is not None
            and int(tally.get("n_emitted", -1)) == n_evaluated
            and int(n_candidates) == n_evaluated + n_missing + n_failures
        )
        if not consistent:
            n_missing = 0
            n_failures = 0
        n_test = int(n_candidates) if consistent else n_evaluated
        rows.append(
            TaskRow(
                task=task,
                n_test=n_test,
                n_missing_skipped=n_missing,
                n_generation_failures=n_failures,
                n_evaluated=n_evaluated,
                n_correct=n_correct,
                accuracy=n_correct / n_evaluated if n_evaluated else 0.0,
                macro_f1=_macro_f1(gold, predicted),
            )
        )
    return EvalReport(rows=rows, model_tag=model_tag, config_hash=config_hash)


@dataclass
class PerFeatureReport:
    table_tsv: str
    series: list[tuple[str, float]] = field(default_factory=list)

    def series_csv(self) -> str:
        lines = ["task,accuracy"]
        lines += [f"{task},{accuracy:.6f}" for task, accuracy in self.series]
        return "\n".join(lines) + "\n"


def report_per_feature(report: EvalReport) -> PerFeatureReport:
    """Tasks sorted by accuracy (descending, ties by name); zero-evaluation
    tasks drop to footnotes."""
    if not report.rows:
        raise ValueError("report has no task rows")
    scored = [row for row in report.rows if row.n_evaluated > 0]
    excluded = [row for row in report.rows if row.n_evaluated == 0]
    scored.sort(key=lambda row: (-row.accuracy, row.task))
    lines = ["task\taccuracy\tmacro_f1\tn_evaluated"]
    for row in scored:
        lines.append(f"{row.task}\t{row.accuracy:.6f}\t{row.macro_f1:.6f}\t{row.n_evaluated}")
    for row in excluded:
        lines.append(f"# excluded (no evaluable samples): {row.task}")
    return PerFeatureReport(
        table_tsv="\n".join(lines) + "\n",
        series=[(row.task, row.accuracy) for row in scored],
    )
