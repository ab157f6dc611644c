"""Correctness rewards, group-relative advantages, and a clipped policy
update, exercised end to end on a small linear-softmax policy over
hand-crafted option cues."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .choices import LETTERS, ChoiceSet
from .evaluation import extract_answer
from .questions import Question, QuestionKind, load_questions

DEFAULT_GROUP_SIZE = 7
DEFAULT_BATCH_QUESTIONS = 35
DEFAULT_CLIP_EPSILON = 0.2
DEFAULT_KL_COEFFICIENT = 0.04
DEFAULT_LEARNING_RATE = 0.1
DEFAULT_EPSILON_STD = 1e-8

FEATURE_DIM = 6


class GrpoStepError(RuntimeError):
    """The update produced a non-finite gradient and was aborted."""


@dataclass
class GrpoConfig:
    group_size: int = DEFAULT_GROUP_SIZE
    batch_questions: int = DEFAULT_BATCH_QUESTIONS
    clip_epsilon: float = DEFAULT_CLIP_EPSILON
    kl_coefficient: float = DEFAULT_KL_COEFFICIENT
    learning_rate: float = DEFAULT_LEARNING_RATE
    epsilon_std: float = DEFAULT_EPSILON_STD
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_questions < 1:
            raise ValueError("batch_questions must be >= 1")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must be in (0, 1)")


@dataclass
class RolloutGroup:
    question_id: str
    completions: list[str]
    rewards: list[float]
    advantages: list[float]
    answer_letters: list[str | None]

    def validate(self) -> None:
        g = len(self.completions)
        if not (len(self.rewards) == len(self.advantages) == len(self.answer_letters) == g):
            raise ValueError("rollout group lists must share one length")
        if len(set(self.rewards)) == 1:
            if any(a != 0.0 for a in self.advantages):
                raise ValueError("constant-reward group must carry zero advantages")
            return
        adv = np.asarray(self.advantages)
        if abs(adv.mean()) > 1e-9:
            raise ValueError("advantages must have zero mean")
        if abs(adv.std() - 1.0) > 1e-6:
            raise ValueError("advantages must have unit population deviation")


def reward(completion: str, correct_letter: str) -> int:
    """1 iff the completion's extracted answer matches; unextractable is 0."""
    return int(extract_answer(completion) == correct_letter)


def group_advantages(rewards: list[float], epsilon_std: float = DEFAULT_EPSILON_STD) -> list[float]:
    """(r - mean) / (population std + epsilon); exact zeros for constant groups."""
    if len(rewards) < 2:
        raise ValueError("a rollout group needs at least two completions")
    r = np.asarray(rewards, dtype=float)
    if np.all(r == r[0]):
        return [0.0] * len(rewards)
    mean = r.mean()
    std = r.std()
    return list((r - mean) / (std + epsilon_std))


# ---------------------------------------------------------------------------
# Toy policy over per-option cues


@dataclass
class ToyPolicy:
    """Linear-softmax scorer over per-option numeric cues."""

    weights: np.ndarray

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM) -> "ToyPolicy":
        return cls(weights=np.zeros(dim))

    def probs(self, features: np.ndarray) -> np.ndarray:
        """Distribution over the option letters of one question."""
        scores = features @ self.weights
        scores = scores - scores.max()
        p = np.exp(scores)
        return p / p.sum()


_CONTEXT_VALUE = re.compile(r": (-?\d+(?:\.\d+)?)$", re.MULTILINE)


def _option_value(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def question_features(
    prompt: str, options: list[str], option_counts: Counter | None = None
) -> np.ndarray:
    """Per-option cue matrix: bias, position, scaled distances of the option
    value from context summary statistics, distance rank, and frequency rank."""
    context = [float(v) for v in _CONTEXT_VALUE.findall(prompt)]
    if context:
        mean = float(np.mean(context))
        median = float(np.median(context))
        spread = float(np.std(context)) + 1.0
    else:
        mean = median = 0.0
        spread = 1.0
    k = len(options)
    denom = max(k - 1, 1)
    values = [_option_value(o) for o in options]
    dists = [abs(v - mean) if v is not None else np.inf for v in values]
    order = sorted(range(k), key=lambda i: (dists[i], i))
    rank = {j: i for i, j in enumerate(order)}
    counts = [option_counts.get(o, 0) if option_counts else 0 for o in options]
    freq_order = sorted(range(k), key=lambda i: (-counts[i], i))
    freq_rank = {j: i for i, j in enumerate(freq_order)}
    rows = []
    for j in range(k):
        v = values[j]
        z_mean = min(abs(v - mean) / spread, 5.0) / 5.0 if v is not None else 0.0
        z_med = min(abs(v - median) / spread, 5.0) / 5.0 if v is not None else 0.0
        rows.append(
            [1.0, j / denom, z_mean, z_med, rank[j] / denom, freq_rank[j] / denom]
        )
    return np.asarray(rows)


@dataclass
class GroupRollout:
    """One question's sampled group plus what the update step needs."""

    group: RolloutGroup
    features: np.ndarray  # (K, FEATURE_DIM)
    letter_indices: np.ndarray  # (G,)
    old_probs: np.ndarray  # (G,)


@dataclass
class StepStats:
    mean_reward: float
    mean_abs_advantage: float
    kl: float
    grad_norm: float


def _completion_gradients(policy: ToyPolicy, rollout: GroupRollout):
    probs = policy.probs(rollout.features)
    p_new = probs[rollout.letter_indices]
    expected = probs @ rollout.features
    grad_logp = rollout.features[rollout.letter_indices] - expected[None, :]
    return probs, p_new, grad_logp


def surrogate_objective(
    policy: ToyPolicy,
    batch: list[GroupRollout],
    config: GrpoConfig,
    reference: ToyPolicy,
) -> float:
    """Clipped-ratio surrogate minus the KL penalty, averaged over all
    completions in the batch (the quantity grpo_step ascends)."""
    total = 0.0
    count = 0
    for rollout in batch:
        probs = policy.probs(rollout.features)
        p_new = probs[rollout.letter_indices]
        p_ref = reference.probs(rollout.features)[rollout.letter_indices]
        ratio = p_new / rollout.old_probs
        adv = np.asarray(rollout.group.advantages)
        clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
        surrogate = np.minimum(ratio * adv, clipped * adv)
        r = p_ref / p_new
        kl = r - np.log(r) - 1.0
        total += float((surrogate - config.kl_coefficient * kl).sum())
        count += len(adv)
    return total / count


def grpo_step(
    policy: ToyPolicy,
    batch: list[GroupRollout],
    config: GrpoConfig,
    reference: ToyPolicy,
) -> tuple[ToyPolicy, StepStats]:
    """One gradient-ascent step on the clipped surrogate with KL-to-reference
    penalty; aborts on a non-finite gradient."""
    if len(batch) != config.batch_questions:
        raise ValueError(
            f"batch carries {len(batch)} groups, config expects {config.batch_questions}"
        )
    grad = np.zeros_like(policy.weights)
    kl_total = 0.0
    reward_total = 0.0
    abs_adv_total = 0.0
    count = 0
    for rollout in batch:
        _, p_new, grad_logp = _completion_gradients(policy, rollout)
        p_ref = reference.probs(rollout.features)[rollout.letter_indices]
        ratio = p_new / rollout.old_probs
        adv = np.asarray(rollout.group.advantages)
        upper = 1.0 + config.clip_epsilon
        lower = 1.0 - config.clip_epsilon
        clipped = np.clip(ratio, lower, upper)
        use_unclipped = ratio * adv <= clipped * adv
        r = p_ref / p_new
        kl_total += float((r - np.log(r) - 1.0).sum())
        coef = use_unclipped * adv * ratio - config.kl_coefficient * (1.0 - r)
        grad += coef @ grad_logp
        reward_total += float(np.sum(rollout.group.rewards))
        abs_adv_total += float(np.abs(adv).sum())
        count += len(adv)
    grad /= count
    if not np.isfinite(grad).all():
        raise GrpoStepError(
            f"non-finite gradient (weights norm {np.linalg.norm(policy.weights):.3g})"
        )
    stats = StepStats(
        mean_reward=reward_total / count,
        mean_abs_advantage=abs_adv_total / count,
        kl=kl_total / count,
        grad_norm=float(np.linalg.norm(grad)),
    )
    updated = ToyPolicy(weights=policy.weights + config.learning_rate * grad)
    return updated, stats


# ---------------------------------------------------------------------------
# Desk-scale training loop


@dataclass
class CurvePoint:
    step: int
    mean_reward: float
    holdout_accuracy: float
    kl: float
    grad_norm: float


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    policy: ToyPolicy

    @property
    def initial_accuracy(self) -> float:
        return self.curve[0].holdout_accuracy

    @property
    def final_accuracy(self) -> float:
        return self.curve[-1].holdout_accuracy

    def to_tsv(self) -> str:
        lines = ["step\tmean_reward\tholdout_accuracy\tkl\tgrad_norm"]
        for p in self.curve:
            lines.append(
                f"{p.step}\t{p.mean_reward:.6f}\t{p.holdout_accuracy:.6f}"
                f"\t{p.kl:.6e}\t{p.grad_norm:.6e}"
            )
        return "\n".join(lines) + "\n"


def _holdout_accuracy(policy: ToyPolicy, items) -> float:
    correct = 0
    for features, answer_index in items:
        probs = policy.probs(features)
        if int(np.argmax(probs)) == answer_index:
            correct += 1
    return correct / len(items)


def _sample_rollout(
    policy: ToyPolicy,
    question,
    features: np.ndarray,
    config: GrpoConfig,
    rng: np.random.Generator,
) -> GroupRollout:
    probs = policy.probs(features)
    letters = rng.choice(len(probs), size=config.group_size, p=probs)
    completions = [f"Reasoning sample.\n\\boxed{{{LETTERS[i]}}}" for i in letters]
    correct = LETTERS[question.answer_index]
    rewards = [float(reward(c, correct)) for c in completions]
    advantages = group_advantages(rewards, config.epsilon_std)
    group = RolloutGroup(
        question_id=question.question_id,
        completions=completions,
        rewards=rewards,
        advantages=advantages,
        answer_letters=[extract_answer(c) for c in completions],
    )
    return GroupRollout(
        group=group,
        features=features,
        letter_indices=np.asarray(letters),
        old_probs=probs[letters],
    )


def train_toy(
    question_path: str | Path,
    config: GrpoConfig,
    steps: int,
    holdout_fraction: float = 0.2,
) -> TrainResult:
    """Sample groups, reward, normalize, update; returns the learning curve.

    Holdout accuracy in row ``t`` is measured before that step's update; a
    final row at ``step == steps`` carries the post-training accuracy.
    """
    _, questions = load_questions(question_path)
    if not questions:
        raise ValueError(f"{question_path}: no questions to train on")
    option_counts = Counter(o for q in questions for o in q.options)
    features = [question_features(q.prompt, q.options, option_counts) for q in questions]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(questions))
    n_holdout = max(1, int(len(questions) * holdout_fraction))
    holdout_idx = order[:n_holdout]
    train_idx = order[n_holdout:]
    if len(train_idx) == 0:
        raise ValueError("not enough questions to reserve a holdout subset")
    holdout = [(features[i], questions[i].answer_index) for i in holdout_idx]

    policy = ToyPolicy.zeros(FEATURE_DIM)
    reference = ToyPolicy(weights=policy.weights.copy())
    curve: list[CurvePoint] = []
    last_stats = StepStats(0.0, 0.0, 0.0, 0.0)
    for step in range(steps):
        accuracy = _holdout_accuracy(policy, holdout)
        picked = rng.choice(len(train_idx), size=config.batch_questions)
        batch = [
            _sample_rollout(policy, questions[train_idx[i]], features[train_idx[i]], config, rng)
            for i in picked
        ]
        policy, last_stats = grpo_step(policy, batch, config, reference)
        curve.append(
            CurvePoint(step, last_stats.mean_reward, accuracy, last_stats.kl, last_stats.grad_norm)
        )
    curve.append(
        CurvePoint(
            steps,
            last_stats.mean_reward,
            _holdout_accuracy(policy, holdout),
            last_stats.kl,
            last_stats.grad_norm,
        )
    )
    return TrainResult(curve=curve, policy=policy)


# ---------------------------------------------------------------------------
# Separable fixture: the correct option sits nearest the context mean


def make_separable_questions(n: int, seed: int, k_options: int = 5) -> list[Question]:
    rng = np.random.default_rng(seed)
    offsets = [0.8, -1.0, 1.6, -2.2, 2.8, -3.4]
    questions = []
    for i in range(n):
        center = float(rng.uniform(5.0, 50.0))
        scale = float(rng.uniform(0.5, 2.0))
        readings = np.round(center + rng.normal(0.0, 0.15 * scale, 6), 2)
        mean = float(np.mean(readings))
        truth = round(mean + float(rng.normal(0.0, 0.05 * scale)), 2)
        values = [truth] + [round(mean + o * scale, 2) for o in offsets[: k_options - 1]]
        texts = [f"{v:.2f}" for v in values]
        order = rng.permutation(k_options)
        options = [texts[j] for j in order]
        answer_index = options.index(texts[0])
        context_lines = "\n".join(
            f"reading_{t + 1}: {readings[t]:.2f}" for t in range(len(readings))
        )
        prompt = (
            "[Bedside/Repeated Measurements]\n"
            f"{context_lines}\n"
            "latest_reading: [MASK]\n\n"
            "Q1. What would be the masked value of `latest_reading' in section "
            "[Bedside/Repeated Measurements]?\n"
            + "\n".join(f"{LETTERS[j]}. {options[j]}" for j in range(k_options))
            + "\n\nAnswer with the letter of the correct option in the format \\boxed{letter}."
        )
        questions.append(
            Question(
                question_id=f"toy{i:05d}",
                patient_id=f"T{i:05d}",
                target="latest_reading",
                prompt=prompt,
                choices=ChoiceSet(
                    options=options,
                    answer_index=answer_index,
                    raw_values=[values[j] for j in order],
                    provenance="toy_separable",
                ),
                kind=QuestionKind.DENOISING,
                seed_trace=[seed, i],
            )
        )
    return questions


def write_question_file(questions: list[Question], path: str | Path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"meta": meta or {}}) + "\n")
        for question in questions:
            fh.write(json.dumps(question.to_json()) + "\n")
