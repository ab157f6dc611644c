"""Command-line pipeline: synth, split, filter, generate, train-toy, infer,
evaluate, report, serve-review. Every artifact gets a manifest with config
and input hashes so reruns are auditable."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .choices import DistractorEngine
from .client import ClientConfig, HttpCompletionClient, MockClient, TranscriptWriter
from .evaluation import (
    EvalReport,
    load_predictions,
    report_per_feature,
    run_inference,
    score_metrics,
    write_predictions,
)
from .grpo import GrpoConfig, make_separable_questions, train_toy, write_question_file
from .questions import COT_PREFIX, generate_denoising_file, load_questions
from .redundancy import (
    DependenceMatrix,
    compute_dependence_matrix,
    exclusions_from_matrix,
    table_hash,
)
from .review import ReviewBundle, ReviewServer, export_review_bundle
from .synth import synthesize_registry
from .tabular import DatasetSplit, load_table, save_schema, split_holdout, write_table

LOGGER = logging.getLogger("clinmask")


class PipelineError(ValueError):
    """A subcommand cannot proceed; main() turns this into exit status 1."""


@dataclass
class PipelineConfig:
    """Every knob with a stated default resolves to that default here."""

    seed: int = 0
    mi_threshold: float = 0.5
    mi_bins: int = 10
    difficulty: float = 2.0
    k_options: int = 5
    gmm_components: int = 3
    question_count: int = 30000
    group_size: int = 7
    batch_questions: int = 35
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.04
    learning_rate: float = 0.1
    epsilon_std: float = 1e-8
    endpoint_url: str = ""
    model_name: str = ""
    auth_token_env: str = ""
    max_in_flight: int = 8
    timeout_s: float = 60.0
    retries: int = 3
    cot_prefix: str = COT_PREFIX
    jobs: int = 0  # 0 = logical cores

    def resolved_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        values.update(json.loads(Path(config_path).read_text(encoding="utf-8")))
    config = PipelineConfig()
    for field in dataclasses.fields(PipelineConfig):
        if field.name in values:
            setattr(config, field.name, type(getattr(config, field.name))(values[field.name]))
        flag = getattr(args, field.name, None)
        if flag is not None:
            setattr(config, field.name, flag)
    return config


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_path: str | Path, subcommand: str, params: dict, inputs: list[str | Path]
) -> Path:
    out_path = Path(out_path)
    manifest = {
        "tool": "clinmask",
        "version": __version__,
        "subcommand": subcommand,
        "params": params,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "output": str(out_path),
        "output_sha256": _sha256(out_path),
    }
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args, config: PipelineConfig) -> int:
    schema, records = synthesize_registry(
        args.patients,
        args.features,
        seed=config.seed,
        missing_rate=args.missing_rate,
        plant_redundant=not args.no_planted,
    )
    write_table(schema, records, args.out)
    save_schema(schema, args.schema_out)
    params = {
        "patients": args.patients,
        "features": args.features,
        "missing_rate": args.missing_rate,
        "seed": config.seed,
        "plant_redundant": not args.no_planted,
    }
    write_manifest(args.out, "synth", params, [])
    write_manifest(args.schema_out, "synth", params, [])
    LOGGER.info("synthesized %d patients x %d features", args.patients, args.features)
    return 0


def cmd_split(args, config: PipelineConfig) -> int:
    _, records = load_table(args.data, args.schema)
    split = split_holdout(records, args.n_test, config.seed)
    Path(args.out).write_text(json.dumps(split.to_json(), indent=2) + "\n", encoding="utf-8")
    params = {"n_test": args.n_test, "seed": config.seed, "n_train": len(split.train_ids)}
    write_manifest(args.out, "split", params, [args.data, args.schema])
    LOGGER.info("split: %d train / %d test", len(split.train_ids), len(split.test_ids))
    return 0


def cmd_filter(args, config: PipelineConfig) -> int:
    schema, records = load_table(args.data, args.schema)
    split = DatasetSplit.from_json(json.loads(Path(args.split).read_text(encoding="utf-8")))
    train_records = [r for r in records if r.patient_id in split.train_ids]
    matrix = compute_dependence_matrix(train_records, schema, bins=config.mi_bins)
    matrix.data_hash = table_hash(args.data)
    matrix.save(args.out)
    params = {"mi_bins": config.mi_bins, "data_hash": matrix.data_hash}
    write_manifest(args.out, "filter", params, [args.data, args.schema, args.split])
    LOGGER.info("dependence matrix over %d features written to %s", matrix.n, args.out)
    return 0


def cmd_generate(args, config: PipelineConfig) -> int:
    schema, records = load_table(args.data, args.schema)
    split = DatasetSplit.from_json(json.loads(Path(args.split).read_text(encoding="utf-8")))
    train_records = [r for r in records if r.patient_id in split.train_ids]
    if args.matrix:
        matrix = DependenceMatrix.load(args.matrix)
        current_hash = table_hash(args.data)
        if matrix.data_hash and matrix.data_hash != current_hash:
            raise PipelineError(
                f"cached matrix {args.matrix} was computed from different data "
                f"(hash {matrix.data_hash[:12]}.. vs {current_hash[:12]}..)"
            )
        if matrix.bins != config.mi_bins:
            raise PipelineError(
                f"cached matrix used {matrix.bins} bins, config asks for {config.mi_bins}"
            )
    else:
        matrix = compute_dependence_matrix(train_records, schema, bins=config.mi_bins)
    exclusions = exclusions_from_matrix(matrix, config.mi_threshold)
    engine = DistractorEngine.fit(
        train_records,
        schema,
        difficulty=config.difficulty,
        k_options=config.k_options,
        gmm_components=config.gmm_components,
    )
    features = None
    if args.features:
        by_name = {spec.name: spec.id for spec in schema}
        try:
            features = [by_name[name] for name in args.features.split(",")]
        except KeyError as exc:
            raise PipelineError(f"unknown feature {exc.args[0]!r}") from exc
    count = None if args.count is not None and args.count < 0 else args.count
    if count is None and args.split_name == "train":
        count = config.question_count
    summary = generate_denoising_file(
        records,
        schema,
        split,
        args.out,
        engine=engine,
        exclusions=exclusions,
        master_seed=config.seed,
        split_name=args.split_name,
        count=count,
        features=features,
    )
    params = {
        "seed": config.seed,
        "count": count,
        "split_name": args.split_name,
        "mi_threshold": config.mi_threshold,
        "mi_bins": config.mi_bins,
        "difficulty": config.difficulty,
        "k_options": config.k_options,
        "gmm_components": config.gmm_components,
        "features": args.features,
    }
    inputs = [args.data, args.schema, args.split] + ([args.matrix] if args.matrix else [])
    write_manifest(args.out, "generate", params, inputs)
    LOGGER.info("emitted %d questions to %s", summary.n_emitted, args.out)
    return 0


def cmd_train_toy(args, config: PipelineConfig) -> int:
    questions_path = Path(args.questions)
    if args.make_separable and not questions_path.exists():
        fixture = make_separable_questions(args.make_separable, config.seed)
        write_question_file(fixture, questions_path, {"fixture": "separable", "seed": config.seed})
    grpo_config = GrpoConfig(
        group_size=config.group_size,
        batch_questions=config.batch_questions,
        clip_epsilon=config.clip_epsilon,
        kl_coefficient=config.kl_coefficient,
        learning_rate=config.learning_rate,
        epsilon_std=config.epsilon_std,
        seed=config.seed,
    )
    result = train_toy(questions_path, grpo_config, steps=args.steps)
    Path(args.out).write_text(result.to_tsv(), encoding="utf-8")
    params = {"steps": args.steps, **dataclasses.asdict(grpo_config)}
    write_manifest(args.out, "train-toy", params, [questions_path])
    LOGGER.info(
        "trained %d steps: holdout accuracy %.3f -> %.3f",
        args.steps,
        result.initial_accuracy,
        result.final_accuracy,
    )
    return 0


def cmd_infer(args, config: PipelineConfig) -> int:
    questions_path = Path(args.questions)
    if not questions_path.exists():
        raise PipelineError(f"questions file not found: {questions_path}")
    _, questions = load_questions(questions_path)
    if args.mock:
        client = MockClient(args.mock)
    else:
        if not config.endpoint_url:
            raise PipelineError("no endpoint configured and no --mock fixtures given")
        client = HttpCompletionClient(
            ClientConfig(
                endpoint_url=config.endpoint_url,
                model_name=config.model_name,
                auth_token_env=config.auth_token_env,
                max_in_flight=config.max_in_flight,
                timeout_s=config.timeout_s,
                retries=config.retries,
            ),
            transcript=TranscriptWriter(args.transcript),
        )
    cot = config.cot_prefix or None
    in_flight = min(config.max_in_flight, config.resolved_jobs())
    predictions = run_inference(
        client, questions, args.model_tag, cot_prefix=cot, max_in_flight=in_flight
    )
    write_predictions(predictions, args.out)
    params = {"model_tag": args.model_tag, "cot_prefix": cot, "mock": bool(args.mock)}
    inputs = [questions_path] + ([args.mock] if args.mock else [])
    write_manifest(args.out, "infer", params, inputs)
    LOGGER.info("wrote %d predictions to %s", len(predictions), args.out)
    return 0


def cmd_evaluate(args, config: PipelineConfig) -> int:
    predictions_path = Path(args.predictions)
    if not predictions_path.exists():
        raise PipelineError(f"predictions file not found: {predictions_path}")
    questions_path = Path(args.questions)
    if not questions_path.exists():
        raise PipelineError(f"questions file not found: {questions_path}")
    meta, questions = load_questions(questions_path)
    predictions = load_predictions(predictions_path)
    model_tag = predictions[0].model_tag if predictions else ""
    report = score_metrics(
        questions,
        predictions,
        generation_meta=meta,
        model_tag=model_tag,
        config_hash=_sha256(questions_path)[:16],
    )
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    write_manifest(args.out, "evaluate", {"model_tag": model_tag}, [questions_path, predictions_path])
    for row in report.rows:
        LOGGER.info(
            "%s: accuracy %.4f macro-F1 %.4f (n=%d)",
            row.task,
            row.accuracy,
            row.macro_f1,
            row.n_evaluated,
        )
    return 0


def cmd_report(args, config: PipelineConfig) -> int:
    report_path = Path(args.report)
    if not report_path.exists():
        raise PipelineError(f"report file not found: {report_path}")
    report = EvalReport.from_json(json.loads(report_path.read_text(encoding="utf-8")))
    per_feature = report_per_feature(report)
    Path(args.out).write_text(per_feature.table_tsv, encoding="utf-8")
    write_manifest(args.out, "report", {}, [report_path])
    if args.series:
        Path(args.series).write_text(per_feature.series_csv(), encoding="utf-8")
        write_manifest(args.series, "report", {}, [report_path])
    return 0


def cmd_serve_review(args, config: PipelineConfig) -> int:
    if args.bundle and Path(args.bundle).exists() and not args.pred_a:
        bundle = ReviewBundle.load(args.bundle)
    else:
        if not (args.questions and args.pred_a and args.pred_b):
            raise PipelineError(
                "need an existing --bundle, or --questions, --pred-a and --pred-b "
                "to build one"
            )
        _, questions = load_questions(args.questions)
        bundle = export_review_bundle(
            questions,
            load_predictions(args.pred_a),
            load_predictions(args.pred_b),
            n_items=args.n_items,
            seed=config.seed,
        )
        if args.bundle:
            bundle.save(args.bundle)
    server = ReviewServer(
        bundle,
        annotations_path=args.annotations,
        assets_dir=args.assets,
        host=args.host,
        port=args.port,
    )
    print(f"review server listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clinmask",
        description="Masked-value question pipelines for tabular clinical data.",
    )
    parser.add_argument("--version", action="version", version=f"clinmask {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="synthesize a registry-scale table")
    common(p)
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--no-planted", action="store_true", help="skip planted dependent pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="hold out a test subset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("filter", help="compute the train-split dependence matrix")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--mi-bins", dest="mi_bins", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("generate", help="emit a question file")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--matrix", help="cached dependence matrix (.npz)")
    p.add_argument("--count", type=int, default=None, help="question count; -1 sweeps all pairs")
    p.add_argument("--split-name", choices=("train", "test"), default="train")
    p.add_argument("--features", help="comma-separated target feature names")
    p.add_argument("--mi-threshold", dest="mi_threshold", type=float, default=None)
    p.add_argument("--mi-bins", dest="mi_bins", type=int, default=None)
    p.add_argument("--difficulty", type=float, default=None)
    p.add_argument("--k-options", dest="k_options", type=int, default=None)
    p.add_argument("--gmm-components", dest="gmm_components", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-toy", help="run the desk-scale policy training loop")
    common(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument(
        "--make-separable",
        type=int,
        default=0,
        help="create a separable fixture of this size if the questions file is absent",
    )
    p.add_argument("--group-size", dest="group_size", type=int, default=None)
    p.add_argument("--batch", dest="batch_questions", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--clip-epsilon", dest="clip_epsilon", type=float, default=None)
    p.add_argument("--kl-coefficient", dest="kl_coefficient", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="run a model over a question file")
    common(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--model-tag", required=True)
    p.add_argument("--mock", help="fixtures file for the offline mock client")
    p.add_argument("--transcript", help="request/response log (JSONL)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against a question file")
    common(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="rank tasks by accuracy")
    common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--series", help="plot-ready CSV series path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-review", help="serve the blinded annotation API and UI")
    common(p)
    p.add_argument("--bundle", help="review bundle JSON (loaded, or written when building)")
    p.add_argument("--questions")
    p.add_argument("--pred-a", dest="pred_a")
    p.add_argument("--pred-b", dest="pred_b")
    p.add_argument("--n-items", dest="n_items", type=int, default=20)
    p.add_argument("--annotations", help="JSONL file annotations persist to")
    p.add_argument("--assets", help="static UI bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.set_defaults(func=cmd_serve_review)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    config = resolve_config(args)
    try:
        return args.func(args, config)
    except SystemExit:
        raise
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
