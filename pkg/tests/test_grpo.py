import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinmask.grpo import (
    FEATURE_DIM,
    GroupRollout,
    GrpoConfig,
    GrpoStepError,
    RolloutGroup,
    ToyPolicy,
    group_advantages,
    grpo_step,
    make_separable_questions,
    question_features,
    reward,
    surrogate_objective,
    train_toy,
    write_question_file,
)


class TestReward:
    def test_boxed_match(self):
        assert reward("Thus, the masked value is: \\boxed{A}", "A") == 1

    def test_boxed_mismatch(self):
        assert reward("\\boxed{B}", "A") == 0

    def test_unextractable_is_zero(self):
        assert reward("the patient will survive.", "A") == 0

    @given(st.text(max_size=80))
    @settings(max_examples=50, deadline=None)
    def test_invariant_to_non_answer_text(self, noise):
        noise = noise.replace("\\boxed", "").replace("answer is", "")
        base = f"{noise}\nTherefore \\boxed{{C}}"
        assert reward(base, "C") == 1
        assert reward(base, "B") == 0


class TestGroupAdvantages:
    def test_constant_group_is_exact_zeros(self):
        assert group_advantages([1, 1, 1, 1, 1, 1, 1]) == [0.0] * 7

    def test_single_winner_of_seven(self):
        advantages = group_advantages([1, 0, 0, 0, 0, 0, 0])
        assert advantages[0] == pytest.approx(2.449490, abs=1e-5)
        for a in advantages[1:]:
            assert a == pytest.approx(-0.408248, abs=1e-5)

    def test_pair(self):
        assert group_advantages([1, 0]) == pytest.approx([1.0, -1.0], abs=1e-5)

    def test_short_group_rejected(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])

    @given(st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=16))
    @settings(max_examples=100, deadline=None)
    def test_mean_zero_or_constant_branch(self, rewards):
        advantages = np.array(group_advantages(rewards))
        if len(set(rewards)) == 1:
            assert np.all(advantages == 0.0)
        else:
            assert abs(advantages.mean()) < 1e-9
            assert abs(advantages.std() - 1.0) < 1e-6
            RolloutGroup(
                question_id="q",
                completions=[""] * len(rewards),
                rewards=list(rewards),
                advantages=list(advantages),
                answer_letters=[None] * len(rewards),
            ).validate()


def make_rollout(rng, policy, k=5, group_size=7, old_probs=None, advantages=None):
    features = rng.normal(0, 1, (k, FEATURE_DIM))
    probs = policy.probs(features)
    letters = rng.choice(k, size=group_size, p=probs)
    rewards = [float(rng.integers(0, 2)) for _ in range(group_size)]
    if advantages is None:
        advantages = group_advantages(rewards)
    group = RolloutGroup(
        question_id="q",
        completions=[f"\\boxed{{{'ABCDE'[i]}}}" for i in letters],
        rewards=rewards,
        advantages=advantages,
        answer_letters=["ABCDE"[i] for i in letters],
    )
    return GroupRollout(
        group=group,
        features=features,
        letter_indices=letters,
        old_probs=probs[letters] if old_probs is None else old_probs,
    )


class TestGrpoStep:
    def test_zero_advantages_at_reference_leave_params_unchanged(self):
        rng = np.random.default_rng(0)
        policy = ToyPolicy(weights=rng.normal(0, 0.5, FEATURE_DIM))
        reference = ToyPolicy(weights=policy.weights.copy())
        config = GrpoConfig(batch_questions=3)
        batch = [
            make_rollout(rng, policy, advantages=[0.0] * config.group_size)
            for _ in range(3)
        ]
        updated, stats = grpo_step(policy, batch, config, reference)
        assert np.allclose(updated.weights, policy.weights, atol=1e-12)
        assert stats.kl == pytest.approx(0.0, abs=1e-12)

    def test_positive_advantage_raises_letter_probability(self):
        rng = np.random.default_rng(1)
        policy = ToyPolicy.zeros()
        reference = ToyPolicy.zeros()
        config = GrpoConfig(batch_questions=1, group_size=2, learning_rate=0.5)
        features = rng.normal(0, 1, (5, FEATURE_DIM))
        rollout = GroupRollout(
            group=RolloutGroup(
                question_id="q",
                completions=["\\boxed{A}", "\\boxed{B}"],
                rewards=[1.0, 0.0],
                advantages=group_advantages([1.0, 0.0]),
                answer_letters=["A", "B"],
            ),
            features=features,
            letter_indices=np.array([0, 1]),
            old_probs=policy.probs(features)[[0, 1]],
        )
        updated, _ = grpo_step(policy, [rollout], config, reference)
        assert updated.probs(features)[0] > policy.probs(features)[0]

    def test_clipped_completion_contributes_no_gradient(self):
        rng = np.random.default_rng(2)
        policy = ToyPolicy(weights=rng.normal(0, 0.5, FEATURE_DIM))
        reference = ToyPolicy(weights=policy.weights.copy())
        config = GrpoConfig(batch_questions=1, group_size=2, kl_coefficient=0.0)
        features = rng.normal(0, 1, (5, FEATURE_DIM))
        p = policy.probs(features)
        # old prob far below current: ratio >> 1 + eps, positive advantage -> clipped
        rollout = GroupRollout(
            group=RolloutGroup(
                question_id="q",
                completions=["\\boxed{A}", "\\boxed{B}"],
                rewards=[1.0, 1.0],
                advantages=[1.0, 1.0],
                answer_letters=["A", "B"],
            ),
            features=features,
            letter_indices=np.array([0, 1]),
            old_probs=np.array([p[0] / 10.0, p[1] / 10.0]),
        )
        _, stats = grpo_step(policy, [rollout], config, reference)
        assert stats.grad_norm == 0.0

    def test_batch_size_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        policy = ToyPolicy.zeros()
        with pytest.raises(ValueError):
            grpo_step(policy, [make_rollout(rng, policy)], GrpoConfig(), policy)

    def test_non_finite_gradient_aborts(self):
        rng = np.random.default_rng(4)
        policy = ToyPolicy(weights=np.full(FEATURE_DIM, 1e308))
        rollout = make_rollout(rng, ToyPolicy.zeros())
        rollout.old_probs = np.full_like(rollout.old_probs, 1e-310)
        config = GrpoConfig(batch_questions=1)
        with np.errstate(all="ignore"), pytest.raises(GrpoStepError):
            grpo_step(policy, [rollout], config, ToyPolicy.zeros())

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            policy = ToyPolicy(weights=rng.normal(0, 0.8, FEATURE_DIM))
            reference = ToyPolicy(weights=rng.normal(0, 0.8, FEATURE_DIM))
            config = GrpoConfig(batch_questions=4, learning_rate=1.0)
            batch = []
            for _ in range(4):
                rollout = make_rollout(rng, policy)
                rollout.old_probs = rollout.old_probs * rng.uniform(0.7, 1.4, len(rollout.old_probs))
                batch.append(rollout)
            updated, _ = grpo_step(policy, batch, config, reference)
            analytic = updated.weights - policy.weights  # lr = 1
            h = 1e-6
            numeric = np.zeros(FEATURE_DIM)
            for d in range(FEATURE_DIM):
                up = ToyPolicy(weights=policy.weights.copy())
                up.weights[d] += h
                down = ToyPolicy(weights=policy.weights.copy())
                down.weights[d] -= h
                numeric[d] = (
                    surrogate_objective(up, batch, config, reference)
                    - surrogate_objective(down, batch, config, reference)
                ) / (2 * h)
            scale = max(np.linalg.norm(numeric), 1e-8)
            assert np.linalg.norm(analytic - numeric) / scale < 1e-4

    def test_large_kl_pulls_toward_reference(self):
        rng = np.random.default_rng(6)
        reference = ToyPolicy(weights=np.zeros(FEATURE_DIM))
        policy = ToyPolicy(weights=rng.normal(0, 1.0, FEATURE_DIM))
        config = GrpoConfig(
            batch_questions=8, group_size=16, kl_coefficient=20.0, learning_rate=0.005
        )
        distances = [float(np.linalg.norm(policy.weights - reference.weights))]
        for _ in range(40):
            batch = [
                make_rollout(rng, policy, group_size=16, advantages=[0.0] * 16)
                for _ in range(8)
            ]
            policy, _ = grpo_step(policy, batch, config, reference)
            distances.append(float(np.linalg.norm(policy.weights - reference.weights)))
        assert all(b <= a + 1e-3 for a, b in zip(distances, distances[1:]))
        assert distances[-1] < 0.8 * distances[0]


class TestToyTraining:
    def test_policy_outputs_distribution(self):
        rng = np.random.default_rng(0)
        policy = ToyPolicy(weights=rng.normal(0, 2, FEATURE_DIM))
        probs = policy.probs(rng.normal(0, 1, (5, FEATURE_DIM)))
        assert (probs >= 0).all()
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_separable_fixture_has_correct_nearest_cue(self):
        questions = make_separable_questions(50, seed=3)
        for q in questions:
            features = question_features(q.prompt, q.choices.options)
            nearest = int(np.argmin(features[:, 4]))
            assert nearest == q.choices.answer_index

    def test_training_learns_separable_task(self, tmp_path):
        path = tmp_path / "toy.jsonl"
        write_question_file(make_separable_questions(400, seed=1), path)
        config = GrpoConfig(seed=2)
        result = train_toy(path, config, steps=150)
        assert 0.0 <= result.initial_accuracy <= 0.45
        assert result.final_accuracy > result.initial_accuracy + 0.3

    def test_zero_learning_rate_stays_at_chance(self, tmp_path):
        path = tmp_path / "toy.jsonl"
        write_question_file(make_separable_questions(200, seed=4), path)
        result = train_toy(path, GrpoConfig(seed=5, learning_rate=0.0), steps=30)
        accuracies = {p.holdout_accuracy for p in result.curve}
        assert len(accuracies) == 1
        assert abs(result.final_accuracy - 0.2) < 0.1

    def test_same_seed_identical_curves(self, tmp_path):
        path = tmp_path / "toy.jsonl"
        write_question_file(make_separable_questions(200, seed=6), path)
        a = train_toy(path, GrpoConfig(seed=7), steps=25)
        b = train_toy(path, GrpoConfig(seed=7), steps=25)
        assert a.to_tsv() == b.to_tsv()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "toy.jsonl"
        write_question_file([], path)
        with pytest.raises(ValueError):
            train_toy(path, GrpoConfig(), steps=5)


class TestConfigValidation:
    def test_defaults(self):
        config = GrpoConfig()
        assert config.group_size == 7
        assert config.batch_questions == 35

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            GrpoConfig(group_size=1)
        with pytest.raises(ValueError):
            GrpoConfig(clip_epsilon=1.5)
        with pytest.raises(ValueError):
            GrpoConfig(batch_questions=0)
