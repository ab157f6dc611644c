"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line. Run with `pytest tests/test_acceptance.py -v -s`."""

import functools
import hashlib
import json
import resource
import subprocess
import sys
import time

import numpy as np

from oracles import nmi_bruteforce, records_from_table

from clinmask.choices import DistractorEngine, validate_choice_set
from clinmask.cli import PipelineConfig, main as cli_main
from clinmask.client import prompt_key
from clinmask.evaluation import (
    Prediction,
    build_scoring_prompt,
    score_metrics,
)
from clinmask.gmm import fit_gmm
from clinmask.grpo import (
    FEATURE_DIM,
    GroupRollout,
    GrpoConfig,
    RolloutGroup,
    ToyPolicy,
    group_advantages,
    grpo_step,
    make_separable_questions,
    surrogate_objective,
    train_toy,
    write_question_file,
)
from clinmask.questions import (
    COT_PREFIX,
    build_denoising_question,
    generate_denoising_file,
    load_questions,
)
from clinmask.redundancy import (
    build_redundancy_filter,
    estimate_nmi,
)
from clinmask.review import (
    Annotation,
    ReviewBundle,
    ReviewItem,
    binomial_sign_test,
    win_rate_test,
)
from clinmask.synth import synthesize_registry
from clinmask.tabular import split_holdout


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE] {name}: FAIL", flush=True)
                raise
            print(f"\n[ACCEPTANCE] {name}: PASS", flush=True)

        return wrapper

    return decorate


@criterion("NMI oracle (200 random 8x8 tables, 1e-9)")
def test_nmi_oracle_on_random_tables():
    rng = np.random.default_rng(12)
    start = time.monotonic()
    checked = 0
    while checked < 200:
        table = rng.integers(0, 20, size=(8, 8)).tolist()
        if sum(map(sum, table)) < 30:
            continue
        schema, records = records_from_table(table)
        expected = nmi_bruteforce(table)
        actual = estimate_nmi(records, schema, "x", "y")
        assert abs(actual - expected) <= 1e-9, (expected, actual)
        checked += 1
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"took {elapsed:.2f}s"


@criterion("GMM recovery (planted means 0/5/10, +/-0.2, monotone trace)")
def test_gmm_recovery():
    rng = np.random.default_rng(42)
    component = rng.integers(0, 3, 3000)
    values = np.array([0.0, 5.0, 10.0])[component] + rng.normal(0.0, 0.5, 3000)
    start = time.monotonic()
    model = fit_gmm(values, k=3)
    elapsed = time.monotonic() - start
    assert np.all(np.abs(np.sort(model.means) - [0.0, 5.0, 10.0]) <= 0.2)
    diffs = np.diff(model.log_likelihood_trace)
    assert (diffs >= -1e-7).all()
    assert elapsed < 5.0, f"took {elapsed:.2f}s"


@criterion("Choice-set invariant suite (10,000 questions, chi-squared positions)")
def test_choice_set_invariants_at_scale(tmp_path):
    from scipy.stats import chisquare

    schema, records = synthesize_registry(3000, 30, seed=17, missing_rate=0.05)
    split = split_holdout(records, 500, seed=17)
    train = [r for r in records if r.patient_id in split.train_ids]
    engine = DistractorEngine.fit(train, schema)
    exclusions = build_redundancy_filter(train, schema, threshold=0.5)
    path = tmp_path / "ten_thousand.jsonl"
    summary = generate_denoising_file(
        records, schema, split, path, engine=engine, exclusions=exclusions,
        master_seed=17, count=10_000,
    )
    assert summary.n_emitted == 10_000
    _, questions = load_questions(path)
    by_id = {r.patient_id: r for r in records}
    by_name = {s.name: s for s in schema}
    positions = []
    for q in questions:
        spec = by_name[q.target]
        truth = by_id[q.patient_id].values[spec.id]
        # per-question RNG streams make the build reproducible, so the
        # in-memory choice set (with pre-rendering raw values) is recoverable
        rebuilt = build_denoising_question(
            by_id[q.patient_id], schema, spec.id,
            frozenset(q.excluded_features), engine, master_seed=17,
        )
        assert rebuilt.prompt == q.prompt
        assert rebuilt.choices.options == q.options
        assert rebuilt.choices.answer_index == q.answer_index
        validate_choice_set(rebuilt.choices, spec, truth)
        if len(q.options) == 5:
            positions.append(q.answer_index)
    counts = np.bincount(positions, minlength=5)
    result = chisquare(counts)
    assert result.pvalue > 0.01, f"chi2 p={result.pvalue}"


@criterion("Config-default audit (0.5 / 2 / 3 / 7 / 35)")
def test_default_constant_audit():
    config = PipelineConfig()
    assert config.mi_threshold == 0.5
    assert config.difficulty == 2.0
    assert config.gmm_components == 3
    assert config.group_size == 7
    assert config.batch_questions == 35


@criterion("Missingness accounting (110 missing of 1,000 -> n_evaluated 890)")
def test_missingness_accounting(tmp_path):
    schema, records = synthesize_registry(1250, 8, seed=23, missing_rate=0.0)
    split = split_holdout(records, 1000, seed=23)
    target = next(s for s in schema if s.name == "feat_004")
    injected = 0
    for record in records:
        if record.patient_id in split.test_ids and injected < 110:
            record.values[target.id] = None
            injected += 1
    assert injected == 110
    train = [r for r in records if r.patient_id in split.train_ids]
    engine = DistractorEngine.fit(train, schema)
    exclusions = build_redundancy_filter(train, schema, threshold=0.5)
    path = tmp_path / "eval.jsonl"
    generate_denoising_file(
        records, schema, split, path, engine=engine, exclusions=exclusions,
        master_seed=23, split_name="test", count=None, features=[target.id],
    )
    meta, questions = load_questions(path)
    predictions = [
        Prediction(q.question_id, "r", q.answer_letter, q.answer_letter,
                   q.answer_letter, "m")
        for q in questions
    ]
    report = score_metrics(questions, predictions, generation_meta=meta)
    row = report.row("feat_004")
    assert row.n_test == 1000
    assert row.n_missing_skipped == 110
    assert row.n_generation_failures == 0
    assert row.n_evaluated == 890


@criterion("Advantage formula (worked examples to 1e-5, exact zero branch)")
def test_advantage_formula():
    assert group_advantages([1, 1, 1, 1, 1, 1, 1]) == [0.0] * 7
    advantages = group_advantages([1, 0, 0, 0, 0, 0, 0])
    assert abs(advantages[0] - 2.449490) <= 1e-5
    assert all(abs(a + 0.408248) <= 1e-5 for a in advantages[1:])
    pair = group_advantages([1, 0])
    assert abs(pair[0] - 1.0) <= 1e-5 and abs(pair[1] + 1.0) <= 1e-5


@criterion("Toy GRPO convergence (0.2 -> >=0.9 within 2,000 steps, <60s)")
def test_toy_grpo_convergence(tmp_path):
    path = tmp_path / "separable.jsonl"
    write_question_file(make_separable_questions(1000, seed=11), path)
    config = GrpoConfig(seed=3)
    start = time.monotonic()
    result = train_toy(path, config, steps=2000)
    elapsed = time.monotonic() - start
    assert abs(result.initial_accuracy - 0.20) <= 0.03
    assert result.final_accuracy >= 0.90
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    rerun = train_toy(path, config, steps=2000)
    assert rerun.to_tsv() == result.to_tsv()


@criterion("Surrogate gradient vs central differences (100 configs, 1e-4)")
def test_surrogate_gradient_check():
    rng = np.random.default_rng(31)
    for _ in range(100):
        policy = ToyPolicy(weights=rng.normal(0, 0.8, FEATURE_DIM))
        reference = ToyPolicy(weights=rng.normal(0, 0.8, FEATURE_DIM))
        config = GrpoConfig(
            batch_questions=3,
            group_size=int(rng.integers(2, 9)),
            clip_epsilon=float(rng.uniform(0.1, 0.3)),
            kl_coefficient=float(rng.uniform(0.0, 0.1)),
            learning_rate=1.0,
        )
        batch = []
        for _ in range(config.batch_questions):
            k = int(rng.integers(2, 6))
            features = rng.normal(0, 1, (k, FEATURE_DIM))
            probs = policy.probs(features)
            letters = rng.choice(k, size=config.group_size, p=probs)
            rewards = [float(rng.integers(0, 2)) for _ in range(config.group_size)]
            group = RolloutGroup(
                question_id="q",
                completions=[""] * config.group_size,
                rewards=rewards,
                advantages=group_advantages(rewards),
                answer_letters=[None] * config.group_size,
            )
            batch.append(
                GroupRollout(
                    group=group,
                    features=features,
                    letter_indices=letters,
                    old_probs=probs[letters]
                    * rng.uniform(0.75, 1.35, config.group_size),
                )
            )
        updated, _ = grpo_step(policy, batch, config, reference)
        analytic = updated.weights - policy.weights
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
        relative_error = np.linalg.norm(analytic - numeric) / scale
        assert relative_error < 1e-4, relative_error


def _run_cli(*argv):
    proc = subprocess.run(
        [sys.executable, "-m", "clinmask"] + [str(a) for a in argv],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr[-2000:]
    return proc


@criterion("Scale: 30,000 questions from 11,981x691 (<10 min, <4 GB, byte-identical)")
def test_scale_generation(tmp_path):
    data = tmp_path / "data.csv"
    schema = tmp_path / "schema.json"
    split = tmp_path / "split.json"
    matrix = tmp_path / "matrix.npz"
    _run_cli("synth", "--patients", 11981, "--features", 691, "--missing-rate", 0.05,
             "--seed", 1, "--out", data, "--schema-out", schema)
    _run_cli("split", "--data", data, "--schema", schema, "--n-test", 1000,
             "--seed", 1, "--out", split)
    manifest = json.loads((tmp_path / "split.json.manifest.json").read_text())
    assert manifest["params"]["n_train"] == 10981
    _run_cli("filter", "--data", data, "--schema", schema, "--split", split,
             "--out", matrix)
    hashes = []
    for name in ("q1.jsonl", "q2.jsonl"):
        out = tmp_path / name
        start = time.monotonic()
        _run_cli("generate", "--data", data, "--schema", schema, "--split", split,
                 "--matrix", matrix, "--count", 30000, "--seed", 1, "--out", out)
        elapsed = time.monotonic() - start
        peak_child_gb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1e6
        assert elapsed < 600.0, f"generate took {elapsed:.0f}s"
        assert peak_child_gb < 4.0, f"child peak rss {peak_child_gb:.2f} GB"
        digest = hashlib.sha256(out.read_bytes()).hexdigest()
        hashes.append(digest)
        _, questions = load_questions(out)
        assert len(questions) == 30000
        out.unlink()
    assert hashes[0] == hashes[1]
    data.unlink()


@criterion("End-to-end offline (exact accuracy on 20 canned responses)")
def test_end_to_end_offline(tmp_path):
    data = tmp_path / "data.csv"
    schema_path = tmp_path / "schema.json"
    split = tmp_path / "split.json"
    matrix = tmp_path / "matrix.npz"
    questions_path = tmp_path / "questions.jsonl"
    assert cli_main(["synth", "--patients", "80", "--features", "8",
                     "--missing-rate", "0", "--seed", "5",
                     "--out", str(data), "--schema-out", str(schema_path)]) == 0
    assert cli_main(["split", "--data", str(data), "--schema", str(schema_path),
                     "--n-test", "20", "--seed", "5", "--out", str(split)]) == 0
    assert cli_main(["filter", "--data", str(data), "--schema", str(schema_path),
                     "--split", str(split), "--out", str(matrix)]) == 0
    assert cli_main(["generate", "--data", str(data), "--schema", str(schema_path),
                     "--split", str(split), "--matrix", str(matrix),
                     "--split-name", "test", "--features", "feat_004",
                     "--seed", "5", "--out", str(questions_path)]) == 0
    _, questions = load_questions(questions_path)
    assert len(questions) == 20

    fixtures = {"completions": {}, "scores": {}}
    n_correct_planted = 13
    for i, q in enumerate(questions):
        correct = i < n_correct_planted
        letter = (
            q.answer_letter
            if correct
            else "ABCDE"[(q.answer_index + 1) % len(q.options)]
        )
        completion = f", considering the visible values.\n\\boxed{{{letter}}}"
        fixtures["completions"][prompt_key(f"{q.prompt}\n\n{COT_PREFIX}")] = completion
        reasoning = COT_PREFIX + completion
        table = {f" {'ABCDE'[j]}": -4.0 for j in range(len(q.options))}
        table[f" {letter}"] = -0.2
        fixtures["scores"][prompt_key(build_scoring_prompt(q.prompt, reasoning))] = table
    fixtures_path = tmp_path / "fixtures.json"
    fixtures_path.write_text(json.dumps(fixtures), encoding="utf-8")

    predictions = tmp_path / "preds.jsonl"
    report_path = tmp_path / "report.json"
    table_path = tmp_path / "table.tsv"
    assert cli_main(["infer", "--questions", str(questions_path), "--mock",
                     str(fixtures_path), "--model-tag", "mock-a",
                     "--out", str(predictions)]) == 0
    assert cli_main(["evaluate", "--questions", str(questions_path),
                     "--predictions", str(predictions), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    row = next(r for r in report["rows"] if r["task"] == "feat_004")
    assert row["n_evaluated"] == 20
    assert row["accuracy"] == 13 / 20  # hand-computed: 13 canned correct of 20
    assert cli_main(["report", "--report", str(report_path),
                     "--out", str(table_path)]) == 0
    assert "feat_004\t0.650000" in table_path.read_text(encoding="utf-8")


@criterion("Sign test (36/60 and 10/10 exact tails)")
def test_sign_test_values():
    items = [
        ReviewItem(f"i{k}", "task", "ctx", "A. x", "left text", "right text")
        for k in range(60)
    ]
    blinding = {f"i{k}": ("model-a", "model-b") for k in range(60)}
    bundle = ReviewBundle(items=items, blinding_key=blinding)
    for k in range(60):
        bundle.annotations.append(
            Annotation(f"i{k}", "e1", "left" if k < 36 else "right")
        )
    result = win_rate_test(bundle)
    assert result["win_rate"]["model-a"] == 0.6
    assert 0.077 <= result["one_sided_p"] <= 0.078
    assert 0.155 <= result["two_sided_p"] <= 0.156
    one_sided, two_sided = binomial_sign_test(10, 10)
    assert two_sided == 2**-9


@criterion("[SECONDARY] Blinded review loop (scripted session, 20/20, exact win rate)")
def test_blinded_review_loop(tmp_path):
    import shutil
    from pathlib import Path

    node = shutil.which("node")
    assert node, "node is required for the review-ui acceptance criterion"
    frontend = Path(__file__).resolve().parent.parent / "frontend"
    session_js = frontend / "dist" / "session.js"
    if not session_js.exists():
        build = subprocess.run(
            ["npm", "run", "build"], cwd=frontend, capture_output=True, text=True
        )
        assert build.returncode == 0, build.stderr[-2000:]
    model_a, model_b = "tuned-system-qz7", "base-system-vx3"
    from clinmask.questions import QuestionRecord
    from clinmask.review import ReviewServer, export_review_bundle

    questions = [
        QuestionRecord(
            question_id=f"q{i}", patient_id=f"p{i}", target="mortality",
            prompt=f"Case {i} context.", options=["yes", "no"],
            answer_index=i % 2, kind="denoising", seed_trace=[],
            excluded_features=[],
        )
        for i in range(25)
    ]

    def preds(tag, style):
        return [
            Prediction(q.question_id, f"{style} reasoning for case {i}",
                       "A", "A", "A", tag)
            for i, q in enumerate(questions)
        ]

    bundle = export_review_bundle(
        questions, preds(model_a, "concise"), preds(model_b, "expansive"),
        n_items=20, seed=77,
    )
    assets = frontend / "dist"
    server = ReviewServer(bundle, annotations_path=tmp_path / "ann.jsonl",
                          assets_dir=assets)
    server.start_background()
    try:
        import requests

        index = requests.get(server.url + "/", timeout=5)
        assert index.status_code == 200 and "Blinded Case Review" in index.text
        items_raw = requests.get(server.url + "/items", timeout=5)
        for payload in (items_raw.text, index.text,
                        (assets / "app.js").read_text(encoding="utf-8")):
            assert model_a not in payload and model_b not in payload

        proc = subprocess.run(
            [node, str(session_js), "--base-url", server.url,
             "--evaluator", "scripted-e1", "--strategy", "alternate"],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 0, proc.stderr[-2000:]
        session = json.loads(proc.stdout)
        assert session["progress"]["total_items"] == 20
        assert session["progress"]["total_annotations"] == 20
        assert session["progress"]["by_evaluator"] == {"scripted-e1": 20}

        result = win_rate_test(server.bundle)
        expected_wins = {model_a: 0, model_b: 0}
        for item_id, choice in session["choices"].items():
            left_model, right_model = bundle.blinding_key[item_id]
            expected_wins[left_model if choice == "left" else right_model] += 1
        assert result["wins"] == expected_wins
        assert result["n"] == 20
        assert result["win_rate"][model_a] == expected_wins[model_a] / 20
    finally:
        server.shutdown()
