"""Rule-based benchmark evaluation harness.

Loads benchmark records from JSONL, optionally collects model predictions
over a chat endpoint under a direct-answer or reasoning prompt, grades
them with the reward engine, and emits per-benchmark accuracy plus an
unweighted average, as an aligned text table and as JSON.

Two scoring modes:
  * ``strict_format`` requires the full tag structure (the training-time
    format gate) before grading;
  * ``answer_only`` grades a best-effort extracted answer regardless of
    tags, which is never stricter than ``strict_format``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .client import ChatClient, ChatRequest, TransportError, user_message
from .forge import SchemaError
from .rewards import (
    DEFAULT_FORMAT_SPEC,
    FormatSpec,
    GroundTruth,
    TaskKind,
    accuracy_reward,
    extract_answer,
    extract_answer_lenient,
    meets_accuracy_threshold,
    parse_ground_truth,
    verify_format,
)

logger = logging.getLogger(__name__)

DIRECT_ANSWER_INSTRUCTION = (
    "Answer with only the final answer. Do not include any explanation."
)
REASONING_INSTRUCTION = (
    "Reason step by step before answering, then state your final answer."
)


class PromptMode(str, Enum):
    DIRECT_ANSWER = "direct_answer"
    REASONING = "reasoning"


class ScoringMode(str, Enum):
    STRICT_FORMAT = "strict_format"
    ANSWER_ONLY = "answer_only"


class AlignmentError(ValueError):
    """Records and predictions do not match up one-to-one."""


@dataclass(frozen=True)
class EvalRecord:
    benchmark: str
    id: str
    question: str
    images: Tuple[str, ...]
    kind: TaskKind
    ground_truth: GroundTruth


@dataclass(frozen=True)
class Prediction:
    benchmark: str
    id: str
    raw_output: str
    extracted_answer: Optional[str] = None
    correct: bool = False


def load_benchmark(path: Union[str, Path]) -> List[EvalRecord]:
    """Parse a benchmark JSONL file; duplicate (benchmark, id) pairs rejected."""
    records: List[EvalRecord] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
            for fname in ("benchmark", "id", "question", "task_kind", "ground_truth"):
                if fname not in obj:
                    raise SchemaError(f"line {lineno}: missing field {fname!r}")
            key = (str(obj["benchmark"]), str(obj["id"]))
            if key in seen:
                raise SchemaError(
                    f"line {lineno}: duplicate record id {key[1]!r} "
                    f"in benchmark {key[0]!r}"
                )
            seen.add(key)
            try:
                gt = parse_ground_truth(
                    obj["task_kind"], obj["ground_truth"], obj.get("options")
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(f"line {lineno}: field 'task_kind'/'ground_truth': {exc}") from exc
            records.append(
                EvalRecord(
                    benchmark=key[0],
                    id=key[1],
                    question=str(obj["question"]),
                    images=tuple(obj.get("images", ())),
                    kind=gt.kind,
                    ground_truth=gt,
                )
            )
    return records


def load_predictions(path: Union[str, Path]) -> List[Prediction]:
    """Parse a predictions JSONL file of {"benchmark", "id", "raw_output"}."""
    predictions: List[Prediction] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
            for fname in ("benchmark", "id", "raw_output"):
                if fname not in obj:
                    raise SchemaError(f"line {lineno}: missing field {fname!r}")
            predictions.append(
                Prediction(
                    benchmark=str(obj["benchmark"]),
                    id=str(obj["id"]),
                    raw_output=str(obj["raw_output"]),
                )
            )
    return predictions


def build_prompt(record: EvalRecord, mode: PromptMode) -> str:
    instruction = (
        DIRECT_ANSWER_INSTRUCTION
        if mode is PromptMode.DIRECT_ANSWER
        else REASONING_INSTRUCTION
    )
    lines = [record.question]
    if record.ground_truth.options:
        lines += [f"{letter}. {text}" for letter, text in record.ground_truth.options]
    lines.append(instruction)
    return "\n".join(lines)


def collect_predictions(
    records: Sequence[EvalRecord],
    client: ChatClient,
    mode: PromptMode,
    model: str = "default",
) -> List[Prediction]:
    """One request per record under the mode's prompt; no scoring yet.

    Transport failures leave an empty raw output, which scores incorrect
    downstream.  Output order matches record order.
    """
    predictions: List[Prediction] = []
    for record in records:
        req = ChatRequest(
            model=model,
            messages=(user_message(build_prompt(record, mode), record.images),),
        )
        try:
            raw = client.complete(req).content
        except TransportError as exc:
            logger.warning("record %s/%s failed: %s", record.benchmark, record.id, exc)
            raw = ""
        predictions.append(Prediction(record.benchmark, record.id, raw))
    return predictions


def _score_one(
    record: EvalRecord,
    raw_output: str,
    scoring: ScoringMode,
    spec: FormatSpec,
    string_match_threshold: float,
    grounding_threshold: float,
    math_rel_tol: float,
) -> Tuple[Optional[str], bool]:
    gt = record.ground_truth
    if scoring is ScoringMode.STRICT_FORMAT:
        if not verify_format(raw_output, spec):
            return None, False
        extracted = extract_answer(raw_output, spec, gt.kind, gt.options)
    else:
        extracted = extract_answer_lenient(raw_output, spec, gt.kind, gt.options)
    accuracy = accuracy_reward(extracted, gt, math_rel_tol)
    correct = meets_accuracy_threshold(
        accuracy, gt.kind, string_match_threshold, grounding_threshold
    )
    return extracted, correct


def score_predictions(
    records: Sequence[EvalRecord],
    predictions: Sequence[Prediction],
    scoring: ScoringMode = ScoringMode.ANSWER_ONLY,
    spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    string_match_threshold: float = 1.0,
    grounding_threshold: float = 0.5,
    math_rel_tol: float = 1e-6,
) -> List[Prediction]:
    """Grade predictions against records, aligned one-to-one by (benchmark, id).

    Returns new Prediction objects in record order with ``extracted_answer``
    and ``correct`` filled in; inputs are untouched.
    """
    by_key: Dict[Tuple[str, str], Prediction] = {}
    for pred in predictions:
        key = (pred.benchmark, pred.id)
        if key in by_key:
            raise AlignmentError(f"duplicate prediction for {key}")
        by_key[key] = pred
    record_keys = {(r.benchmark, r.id) for r in records}
    missing = sorted(k for k in record_keys if k not in by_key)
    orphans = sorted(k for k in by_key if k not in record_keys)
    if missing or orphans:
        raise AlignmentError(
            f"records without predictions: {missing}; "
            f"predictions without records: {orphans}"
        )
    scored: List[Prediction] = []
    for record in records:
        pred = by_key[(record.benchmark, record.id)]
        extracted, correct = _score_one(
            record,
            pred.raw_output,
            scoring,
            spec,
            string_match_threshold,
            grounding_threshold,
            math_rel_tol,
        )
        scored.append(replace(pred, extracted_answer=extracted, correct=correct))
    return scored


@dataclass(frozen=True)
class BenchmarkScore:
    benchmark: str
    correct: int
    total: int
    accuracy: float


@dataclass(frozen=True)
class EvalReport:
    benchmarks: Tuple[BenchmarkScore, ...]
    average: float

    def to_json(self) -> dict:
        return {
            "benchmarks": [
                {
                    "benchmark": b.benchmark,
                    "correct": b.correct,
                    "total": b.total,
                    "accuracy": b.accuracy,
                }
                for b in self.benchmarks
            ],
            "average": self.average,
        }


def accuracy_report(scored: Sequence[Prediction]) -> EvalReport:
    """Per-benchmark accuracy (%) to one decimal, plus the unweighted mean.

    Benchmarks appear in first-seen order; the average is over the rounded
    per-benchmark accuracies, matching how results tables are read.
    """
    if not scored:
        raise ValueError("no predictions to report on")
    order: List[str] = []
    correct: Dict[str, int] = {}
    total: Dict[str, int] = {}
    for pred in scored:
        if pred.benchmark not in total:
            order.append(pred.benchmark)
            correct[pred.benchmark] = 0
            total[pred.benchmark] = 0
        total[pred.benchmark] += 1
        correct[pred.benchmark] += int(pred.correct)
    benchmarks = tuple(
        BenchmarkScore(
            benchmark=name,
            correct=correct[name],
            total=total[name],
            accuracy=round(100.0 * correct[name] / total[name], 1),
        )
        for name in order
    )
    average = round(sum(b.accuracy for b in benchmarks) / len(benchmarks), 1)
    return EvalReport(benchmarks, average)


def render_report_text(report: EvalReport) -> str:
    """Aligned text table with one row per benchmark and an Avg. row."""
    name_width = max(len("Benchmark"), *(len(b.benchmark) for b in report.benchmarks))
    lines = [f"{'Benchmark':<{name_width}}  {'Correct':>7}  {'Total':>5}  {'Accuracy':>8}"]
    for b in report.benchmarks:
        lines.append(
            f"{b.benchmark:<{name_width}}  {b.correct:>7}  {b.total:>5}  {b.accuracy:>8.1f}"
        )
    lines.append(f"{'Avg.':<{name_width}}  {'':>7}  {'':>5}  {report.average:>8.1f}")
    return "\n".join(lines)
