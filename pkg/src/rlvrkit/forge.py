"""Reflective chain-of-thought dataset forge.

For each query: sample N candidate responses from a generator endpoint,
partition them into correct/incorrect via the rule-based reward engine
(rejection sampling), have a judge endpoint score each correct candidate
on a 1-10 scale, then emit one training sample per query:

  * pass count m >= min_pass_plain  -> the highest-scoring correct
    candidate, verbatim ("plain");
  * 1 <= m < min_pass_plain        -> a reflective splice: a random
    incorrect candidate, the fixed reflective connector sentence, then
    the best correct candidate ("reflective");
  * m == 0                         -> the query is skipped.

All randomness (judge-score tie-breaks, negative selection) flows from a
per-query seed derived from the global seed and query id, so a run is
byte-reproducible given the same inputs and transport script.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .client import ChatClient, ChatRequest, TransportError, text_message, user_message
from .rewards import (
    DEFAULT_FORMAT_SPEC,
    FormatSpec,
    GroundTruth,
    accuracy_reward,
    extract_answer_lenient,
    meets_accuracy_threshold,
    parse_ground_truth,
)

logger = logging.getLogger(__name__)

REFLECTIVE_CONNECTOR = (
    "Wait, perhaps we could consider it from a different perspective. "
    "Let's re-evaluate the problem step by step to ensure accuracy."
)

JUDGE_PROMPT_TEMPLATE = """You are a medical reasoning evaluator. Assess the following response based on these criteria:

1. Clinical accuracy: Correct incorporation of medical facts, clinical guidelines, and evidence-based practices. Accuracy, relevance, and appropriateness of clinical details.

2. Logical reasoning: Coherent reasoning process, logically leading to the answer, well-supported by clinical knowledge.

3. Factual correctness: All statements are factually correct and consistent with established medical knowledge.

4. Completeness: Thorough coverage of all necessary aspects without missing critical information.

Question: {question}

Response: {response}

Please evaluate the response on the above criteria and ONLY provide the Dict object with two keys:

{{'score': integer between 1 and 10, 'justification': concise explanation of the score.}}"""

JUDGE_PARSE_FAILURE = "judge-parse-failure"


class ForgeError(RuntimeError):
    """Per-query pipeline failure or a violated pipeline contract."""


class SchemaError(ValueError):
    """A JSONL input line does not match the documented schema."""


class SampleKind(str, Enum):
    PLAIN = "plain"
    REFLECTIVE = "reflective"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class Query:
    """One task instance: instruction text, opaque image refs, ground truth."""

    id: str
    instruction: str
    images: Tuple[str, ...]
    ground_truth: GroundTruth


@dataclass
class Candidate:
    """One sampled response, with its correctness verdict and judge score."""

    index: int
    text: str
    correct: bool = False
    judge_score: Optional[int] = None
    judge_justification: Optional[str] = None


@dataclass(frozen=True)
class PartitionResult:
    positives: Tuple[Candidate, ...]
    negatives: Tuple[Candidate, ...]

    @property
    def pass_count(self) -> int:
        return len(self.positives)


@dataclass(frozen=True)
class TrainingSample:
    query_id: str
    cot_text: str
    kind: SampleKind
    pass_count: int
    chosen_positive_index: Optional[int] = None
    chosen_negative_index: Optional[int] = None
    seed_used: int = 0
    flags: Tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "cot_text": self.cot_text,
            "kind": self.kind.value,
            "pass_count": self.pass_count,
            "chosen_positive_index": self.chosen_positive_index,
            "chosen_negative_index": self.chosen_negative_index,
            "seed_used": self.seed_used,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingSample":
        return cls(
            query_id=obj["query_id"],
            cot_text=obj["cot_text"],
            kind=SampleKind(obj["kind"]),
            pass_count=obj["pass_count"],
            chosen_positive_index=obj.get("chosen_positive_index"),
            chosen_negative_index=obj.get("chosen_negative_index"),
            seed_used=obj.get("seed_used", 0),
            flags=tuple(obj.get("flags", ())),
        )


@dataclass(frozen=True)
class ForgeConfig:
    n_candidates: int = 10
    min_pass_plain: int = 6
    judge_retries: int = 2
    string_match_threshold: float = 1.0
    grounding_threshold: float = 0.5
    math_rel_tol: float = 1e-6
    seed: int = 0
    generator_model: str = "Qwen2.5-VL-32B-Instruct"
    judge_model: str = "Qwen2.5-VL-72B-Instruct"
    temperature: float = 1.0
    max_tokens: int = 2048
    judge_sees_images: bool = True
    format_spec: FormatSpec = DEFAULT_FORMAT_SPEC

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be at least 1")
        if not 1 <= self.min_pass_plain <= self.n_candidates:
            raise ValueError("min_pass_plain must be within [1, n_candidates]")
        if self.judge_retries < 0:
            raise ValueError("judge_retries must be non-negative")


def generation_system_prompt(spec: FormatSpec) -> str:
    return (
        "You are a careful medical expert. Work through the problem step by step "
        f"inside {spec.reasoning_open_tag}{spec.reasoning_close_tag} tags, then give "
        f"your final answer inside {spec.answer_open_tag}{spec.answer_close_tag} tags."
    )


def derive_query_seed(global_seed: int, query_id: str) -> int:
    """Stable per-query seed so per-query randomness is order-independent."""
    digest = hashlib.sha256(f"{global_seed}:{query_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def generate_candidates(
    query: Query, generator: ChatClient, cfg: ForgeConfig
) -> List[Candidate]:
    """Sample ``cfg.n_candidates`` responses, one independent call each.

    A call that exhausts its retries leaves an empty text in its slot
    (counted incorrect downstream); if every call fails the endpoint is
    treated as unreachable and the query raises.
    """
    messages = (
        text_message("system", generation_system_prompt(cfg.format_spec)),
        user_message(query.instruction, query.images),
    )
    texts: List[str] = []
    failures = 0
    for _ in range(cfg.n_candidates):
        req = ChatRequest(
            model=cfg.generator_model,
            messages=messages,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
        )
        try:
            texts.append(generator.complete(req).content)
        except TransportError as exc:
            logger.warning("query %s: candidate generation failed: %s", query.id, exc)
            texts.append("")
            failures += 1
    if failures == cfg.n_candidates:
        raise ForgeError(f"generator endpoint unreachable for query {query.id!r}")
    return [Candidate(index=i, text=t) for i, t in enumerate(texts)]


def candidate_is_correct(text: str, gt: GroundTruth, cfg: ForgeConfig) -> bool:
    extracted = extract_answer_lenient(text, cfg.format_spec, gt.kind, gt.options)
    acc = accuracy_reward(extracted, gt, cfg.math_rel_tol)
    return meets_accuracy_threshold(
        acc, gt.kind, cfg.string_match_threshold, cfg.grounding_threshold
    )


def partition_candidates(
    query: Query, candidates: Sequence[Candidate], cfg: ForgeConfig
) -> PartitionResult:
    """Rejection-sampling split into correct and incorrect candidates."""
    positives: List[Candidate] = []
    negatives: List[Candidate] = []
    for cand in candidates:
        cand.correct = candidate_is_correct(cand.text, query.ground_truth, cfg)
        (positives if cand.correct else negatives).append(cand)
    return PartitionResult(tuple(positives), tuple(negatives))


def _balanced_objects(text: str):
    """Yield top-level {...} substrings, first to last."""
    depth = 0
    start = 0
    for i, ch in enumerate(text):
        if ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth:
            depth -= 1
            if depth == 0:
                yield text[start : i + 1]


def parse_judge_reply(text: str) -> Optional[Tuple[int, str]]:
    """Extract (score, justification) from a judge reply.

    Accepts a bare dict or the first dict-shaped object embedded in prose,
    in JSON or Python-literal syntax.  Out-of-range integer scores are
    clamped into [1, 10] with a warning.  Returns None when nothing
    parseable is found.
    """
    for obj_text in _balanced_objects(text):
        obj = None
        for loader in (json.loads, ast.literal_eval):
            try:
                obj = loader(obj_text)
                break
            except (ValueError, SyntaxError):
                continue
        if not isinstance(obj, dict) or "score" not in obj:
            continue
        score = obj["score"]
        if isinstance(score, float) and score.is_integer():
            score = int(score)
        if isinstance(score, bool) or not isinstance(score, int):
            continue
        clamped = min(10, max(1, score))
        if clamped != score:
            logger.warning("judge score %d outside [1, 10]; clamped to %d", score, clamped)
        return clamped, str(obj.get("justification", ""))
    return None


def judge_quality(
    query: Query, positive: Candidate, judge: ChatClient, cfg: ForgeConfig
) -> Tuple[int, str]:
    """Score one correct candidate with the four-criterion judge prompt.

    Malformed replies are re-requested up to ``cfg.judge_retries`` times,
    after which the score falls back to 1 so a flaky judge can only
    demote, never promote.  Transport errors propagate.
    """
    if not positive.correct:
        raise ForgeError(
            f"judge_quality called on incorrect candidate {positive.index} "
            f"of query {query.id!r}"
        )
    prompt = JUDGE_PROMPT_TEMPLATE.format(
        question=query.instruction, response=positive.text
    )
    images = query.images if cfg.judge_sees_images else ()
    req = ChatRequest(
        model=cfg.judge_model,
        messages=(user_message(prompt, images),),
        temperature=0.0,
        max_tokens=cfg.max_tokens,
    )
    for _ in range(cfg.judge_retries + 1):
        reply = judge.complete(req)
        parsed = parse_judge_reply(reply.content)
        if parsed is not None:
            return parsed
    logger.warning(
        "query %s candidate %d: judge reply unparseable after %d attempts",
        query.id,
        positive.index,
        cfg.judge_retries + 1,
    )
    return 1, JUDGE_PARSE_FAILURE


def select_or_splice(
    query: Query,
    partition: PartitionResult,
    cfg: ForgeConfig,
    rng: np.random.Generator,
    seed_used: int = 0,
) -> TrainingSample:
    """Turn a judged partition into one training sample via the pass-count rules."""
    m = partition.pass_count
    if m == 0:
        return TrainingSample(
            query_id=query.id,
            cot_text="",
            kind=SampleKind.SKIPPED,
            pass_count=0,
            seed_used=seed_used,
            flags=("no-correct-candidates",),
        )
    unjudged = [c.index for c in partition.positives if c.judge_score is None]
    if unjudged:
        raise ForgeError(f"query {query.id!r}: unjudged positives {unjudged}")
    best_score = max(c.judge_score for c in partition.positives)
    top = [c for c in partition.positives if c.judge_score == best_score]
    chosen = top[int(rng.integers(len(top)))] if len(top) > 1 else top[0]
    if m >= cfg.min_pass_plain:
        return TrainingSample(
            query_id=query.id,
            cot_text=chosen.text,
            kind=SampleKind.PLAIN,
            pass_count=m,
            chosen_positive_index=chosen.index,
            seed_used=seed_used,
        )
    negative = partition.negatives[int(rng.integers(len(partition.negatives)))]
    flags: Tuple[str, ...] = ()
    if REFLECTIVE_CONNECTOR in negative.text or REFLECTIVE_CONNECTOR in chosen.text:
        flags = ("connector-collision",)
    cot_text = f"{negative.text} {REFLECTIVE_CONNECTOR} {chosen.text}"
    return TrainingSample(
        query_id=query.id,
        cot_text=cot_text,
        kind=SampleKind.REFLECTIVE,
        pass_count=m,
        chosen_positive_index=chosen.index,
        chosen_negative_index=negative.index,
        seed_used=seed_used,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Dataset-level driver
# ---------------------------------------------------------------------------


def load_queries(path: Union[str, Path]) -> List[Query]:
    """Parse the queries JSONL file, validating schema and id uniqueness."""
    queries: List[Query] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
            for fname in ("id", "instruction", "task_kind", "ground_truth"):
                if fname not in obj:
                    raise SchemaError(f"line {lineno}: missing field {fname!r}")
            qid = str(obj["id"])
            if qid in seen:
                raise SchemaError(f"line {lineno}: duplicate query id {qid!r}")
            seen.add(qid)
            try:
                gt = parse_ground_truth(
                    obj["task_kind"], obj["ground_truth"], obj.get("options")
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            queries.append(
                Query(
                    id=qid,
                    instruction=str(obj["instruction"]),
                    images=tuple(obj.get("images", ())),
                    ground_truth=gt,
                )
            )
    return queries


def _run_pipeline(
    query: Query,
    cfg: ForgeConfig,
    generator: ChatClient,
    judge: ChatClient,
    seed_used: int,
) -> Tuple[TrainingSample, List[int]]:
    rng = np.random.default_rng(seed_used)
    candidates = generate_candidates(query, generator, cfg)
    partition = partition_candidates(query, candidates, cfg)
    scores: List[int] = []
    for positive in partition.positives:
        score, justification = judge_quality(query, positive, judge, cfg)
        positive.judge_score = score
        positive.judge_justification = justification
        scores.append(score)
    return select_or_splice(query, partition, cfg, rng, seed_used), scores


def forge_one(
    query: Query,
    cfg: ForgeConfig,
    generator: ChatClient,
    judge: ChatClient,
    seed_used: Optional[int] = None,
) -> TrainingSample:
    """Full generate / partition / judge / select pipeline for one query."""
    if seed_used is None:
        seed_used = derive_query_seed(cfg.seed, query.id)
    return _run_pipeline(query, cfg, generator, judge, seed_used)[0]


def _sample_stats(
    samples: Sequence[TrainingSample], judge_scores: Counter, total: int
) -> dict:
    kinds = Counter(s.kind.value for s in samples)
    pass_hist = Counter(str(s.pass_count) for s in samples)
    return {
        "total_queries": total,
        "samples": {k.value: kinds.get(k.value, 0) for k in SampleKind},
        "pass_count_histogram": dict(sorted(pass_hist.items(), key=lambda kv: int(kv[0]))),
        "judge_score_histogram": {
            str(score): judge_scores[score] for score in sorted(judge_scores)
        },
        "connector_collisions": sum(
            1 for s in samples if "connector-collision" in s.flags
        ),
        "pipeline_errors": sum(
            1 for s in samples if any(f.startswith("pipeline-error") for f in s.flags)
        ),
    }


def forge_dataset(
    queries_path: Union[str, Path],
    out_path: Union[str, Path],
    cfg: ForgeConfig,
    generator: ChatClient,
    judge: ChatClient,
    resume: bool = False,
) -> dict:
    """Forge one training sample per query into a JSONL file, plus stats.

    Queries are processed in input order and per-query randomness is
    seeded from (global seed, query id), so output is byte-identical for
    identical inputs, config, seed, and transport script.  With
    ``resume=True``, query ids already present in the output file are
    reused verbatim with zero endpoint calls.  Per-query pipeline
    failures are logged and emitted as skipped samples with a reason
    flag.  Returns the stats report (also written next to the dataset).
    """
    out_path = Path(out_path)
    queries = load_queries(queries_path)
    done: Dict[str, dict] = {}
    if resume and out_path.exists():
        with open(out_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    done[obj["query_id"]] = obj

    samples: List[TrainingSample] = []
    judge_scores: Counter = Counter()
    for query in queries:
        if query.id in done:
            samples.append(TrainingSample.from_json(done[query.id]))
            continue
        seed_used = derive_query_seed(cfg.seed, query.id)
        try:
            sample, scores = _run_pipeline(query, cfg, generator, judge, seed_used)
            judge_scores.update(scores)
        except (ForgeError, TransportError) as exc:
            logger.warning("query %s skipped: %s", query.id, exc)
            sample = TrainingSample(
                query_id=query.id,
                cot_text="",
                kind=SampleKind.SKIPPED,
                pass_count=0,
                seed_used=seed_used,
                flags=(f"pipeline-error: {exc}",),
            )
        samples.append(sample)

    tmp_path = out_path.with_name(out_path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_json(), sort_keys=True) + "\n")
    tmp_path.replace(out_path)

    stats = _sample_stats(samples, judge_scores, total=len(queries))
    stats_path = out_path.with_name(out_path.name + ".stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats
