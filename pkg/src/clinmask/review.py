"""Blinded side-by-side review bundles, the annotation server, and the exact
binomial sign test behind win rates."""

from __future__ import annotations

import json
import math
import mimetypes
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .evaluation import Prediction
from .questions import QuestionRecord


@dataclass
class ReviewItem:
    item_id: str
    task: str
    context: str
    gold_answer: str
    left_response: str
    right_response: str
    summary: str | None = None

    def client_view(self) -> dict:
        return {
            "item_id": self.item_id,
            "task": self.task,
            "context": self.context,
            "gold_answer": self.gold_answer,
            "left_response": self.left_response,
            "right_response": self.right_response,
            "summary": self.summary,
        }


@dataclass
class Annotation:
    item_id: str
    evaluator_id: str
    choice: str  # "left" | "right"

    def to_json(self) -> dict:
        return vars(self)


@dataclass
class ReviewBundle:
    items: list[ReviewItem]
    blinding_key: dict[str, tuple[str, str]]  # item_id -> (left model, right model)
    annotations: list[Annotation] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "items": [item.client_view() for item in self.items],
            "blinding_key": {k: list(v) for k, v in self.blinding_key.items()},
            "annotations": [a.to_json() for a in self.annotations],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ReviewBundle":
        return cls(
            items=[ReviewItem(**item) for item in doc["items"]],
            blinding_key={k: (v[0], v[1]) for k, v in doc["blinding_key"].items()},
            annotations=[Annotation(**a) for a in doc.get("annotations", [])],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ReviewBundle":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def export_review_bundle(
    questions: list[QuestionRecord],
    predictions_a: list[Prediction],
    predictions_b: list[Prediction],
    n_items: int,
    seed: int,
    summaries: dict[str, str] | None = None,
) -> ReviewBundle:
    """Sample cases with responses from both models; left/right order is
    randomized per item and recorded only in the server-side blinding key."""
    if n_items <= 0:
        raise ValueError("n_items must be positive")
    by_id = {q.question_id: q for q in questions}
    a_by_id = {p.question_id: p for p in predictions_a}
    b_by_id = {p.question_id: p for p in predictions_b}
    shared = sorted(set(a_by_id) & set(b_by_id) & set(by_id))
    if len(shared) < n_items:
        raise ValueError(
            f"only {len(shared)} questions carry both models' responses; "
            f"{n_items} requested"
        )
    rng = np.random.default_rng(seed)
    picked = [shared[i] for i in rng.choice(len(shared), size=n_items, replace=False)]
    items = []
    blinding_key = {}
    for qid in picked:
        question = by_id[qid]
        pred_a, pred_b = a_by_id[qid], b_by_id[qid]
        a_left = bool(rng.integers(0, 2))
        left, right = (pred_a, pred_b) if a_left else (pred_b, pred_a)
        blinding_key[qid] = (left.model_tag, right.model_tag)
        items.append(
            ReviewItem(
                item_id=qid,
                task=question.target,
                context=question.prompt,
                gold_answer=f"{question.answer_letter}. {question.options[question.answer_index]}",
                left_response=left.reasoning,
                right_response=right.reasoning,
                summary=(summaries or {}).get(qid),
            )
        )
    return ReviewBundle(items=items, blinding_key=blinding_key)


# ---------------------------------------------------------------------------
# Exact binomial sign test


def binomial_sign_test(k: int, n: int) -> tuple[float, float]:
    """One- and two-sided exact binomial tail probabilities against p = 1/2.

    One-sided: P(K >= k). Two-sided: total probability of outcomes at least
    as far from n/2 as k.
    """
    if not 0 <= k <= n or n <= 0:
        raise ValueError(f"need 0 <= k <= n with n > 0, got k={k}, n={n}")
    scale = 2**n
    one_sided = sum(math.comb(n, i) for i in range(k, n + 1)) / scale
    distance = abs(2 * k - n)  # 2*|k - n/2|, kept integral
    two_sided = (
        sum(math.comb(n, i) for i in range(n + 1) if abs(2 * i - n) >= distance) / scale
    )
    return one_sided, min(two_sided, 1.0)


def win_rate_test(bundle: ReviewBundle) -> dict:
    """Unblind annotations and test the leading model's wins against 0.5.

    The one-sided p is the tail probability of the leading model's win count
    (ties broken by tag name); the two-sided p is symmetric in the models.
    """
    if not bundle.annotations:
        raise ValueError("no annotations to score")
    wins: dict[str, int] = {}
    for tags in bundle.blinding_key.values():
        wins.setdefault(tags[0], 0)
        wins.setdefault(tags[1], 0)
    for annotation in bundle.annotations:
        if annotation.item_id not in bundle.blinding_key:
            raise ValueError(f"annotation references unknown item {annotation.item_id!r}")
        left_model, right_model = bundle.blinding_key[annotation.item_id]
        winner = left_model if annotation.choice == "left" else right_model
        wins[winner] = wins.get(winner, 0) + 1
    n = len(bundle.annotations)
    leader = min(sorted(wins), key=lambda tag: -wins[tag])
    one_sided, two_sided = binomial_sign_test(wins[leader], n)
    return {
        "win_rate": {tag: wins[tag] / n for tag in sorted(wins)},
        "wins": dict(wins),
        "n": n,
        "tested_model": leader,
        "one_sided_p": one_sided,
        "two_sided_p": two_sided,
    }


# ---------------------------------------------------------------------------
# Review server (JSON over HTTP, plus the static UI bundle)


class ReviewServer:
    """Serves blinded items, accepts annotations, and reports progress.

    Annotations append to a JSONL file so a crashed session can resume; the
    (item, evaluator) pair is unique and repeats are rejected with 409.
    """

    def __init__(
        self,
        bundle: ReviewBundle,
        annotations_path: str | Path | None = None,
        assets_dir: str | Path | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.bundle = bundle
        self.annotations_path = Path(annotations_path) if annotations_path else None
        self.assets_dir = Path(assets_dir) if assets_dir else None
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str]] = set()
        self._items = {item.item_id: item for item in bundle.items}
        if self.annotations_path and self.annotations_path.exists():
            for line in self.annotations_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    annotation = Annotation(**json.loads(line))
                    self._register(annotation)
        self.httpd = ThreadingHTTPServer((host, port), self._make_handler())
        self.httpd.daemon_threads = True

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _register(self, annotation: Annotation) -> None:
        key = (annotation.item_id, annotation.evaluator_id)
        self._seen.add(key)
        self.bundle.annotations.append(annotation)

    def add_annotation(self, annotation: Annotation) -> None:
        if annotation.choice not in ("left", "right"):
            raise ValueError(f"choice must be left or right, got {annotation.choice!r}")
        if annotation.item_id not in self._items:
            raise KeyError(annotation.item_id)
        with self._lock:
            key = (annotation.item_id, annotation.evaluator_id)
            if key in self._seen:
                raise FileExistsError(f"duplicate annotation for {key}")
            self._register(annotation)
            if self.annotations_path:
                with open(self.annotations_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(annotation.to_json()) + "\n")

    def progress(self) -> dict:
        with self._lock:
            by_evaluator: dict[str, int] = {}
            for annotation in self.bundle.annotations:
                by_evaluator[annotation.evaluator_id] = (
                    by_evaluator.get(annotation.evaluator_id, 0) + 1
                )
            return {
                "total_items": len(self.bundle.items),
                "total_annotations": len(self.bundle.annotations),
                "by_evaluator": by_evaluator,
            }

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def _send_json(self, status: int, doc) -> None:
                body = json.dumps(doc).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _send_asset(self, relative: str) -> None:
                if server.assets_dir is None:
                    self._send_json(404, {"error": "no asset bundle configured"})
                    return
                target = (server.assets_dir / relative).resolve()
                if not target.is_relative_to(server.assets_dir.resolve()) or not target.is_file():
                    self._send_json(404, {"error": f"unknown asset {relative!r}"})
                    return
                body = target.read_bytes()
                mime = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
                self.send_response(200)
                self.send_header("Content-Type", mime)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                path = self.path.split("?")[0]
                if path == "/items":
                    self._send_json(
                        200, {"items": [item.client_view() for item in server.bundle.items]}
                    )
                elif path.startswith("/items/"):
                    item_id = path[len("/items/") :]
                    item = server._items.get(item_id)
                    if item is None:
                        self._send_json(404, {"error": f"unknown item {item_id!r}"})
                    else:
                        self._send_json(200, item.client_view())
                elif path == "/progress":
                    self._send_json(200, server.progress())
                elif path == "/":
                    self._send_asset("index.html")
                else:
                    self._send_asset(path.lstrip("/"))

            def do_POST(self):
                if self.path.split("?")[0] != "/annotations":
                    self._send_json(404, {"error": "unknown endpoint"})
                    return
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    doc = json.loads(self.rfile.read(length) or b"{}")
                    annotation = Annotation(
                        item_id=doc["item_id"],
                        evaluator_id=doc["evaluator_id"],
                        choice=doc["choice"],
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    self._send_json(400, {"error": f"bad annotation payload: {exc}"})
                    return
                try:
                    server.add_annotation(annotation)
                except ValueError as exc:
                    self._send_json(400, {"error": str(exc)})
                except KeyError:
                    self._send_json(404, {"error": f"unknown item {annotation.item_id!r}"})
                except FileExistsError as exc:
                    self._send_json(409, {"error": str(exc)})
                else:
                    self._send_json(201, {"status": "ok"})

        return Handler
