"""Rule-based reward functions for RLVR rollout scoring.

The total reward blends a binary format check with a per-task accuracy
score: ``total = w_format * R_format + w_acc * R_accuracy``.  Accuracy is
gated on format: a malformed output scores 0 regardless of its content,
so the policy must produce well-structured outputs before being graded
for correctness.

Accuracy dispatch by task kind:
  * multiple_choice -- exact option-letter match, 0 or 1
  * string_match    -- Jaccard similarity over normalized word tokens
  * math            -- numeric-equivalence check with relative tolerance
  * grounding       -- bounding-box intersection over union

Everything here is a pure function of its inputs and safe to call from
any number of threads.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union


class TaskKind(str, Enum):
    """Closed task taxonomy; every ground truth declares exactly one kind."""

    MULTIPLE_CHOICE = "multiple_choice"
    STRING_MATCH = "string_match"
    MATH = "math"
    GROUNDING = "grounding"


class MalformedGroundTruthError(ValueError):
    """Ground truth that cannot be scored, e.g. an unparseable math expression."""


@dataclass(frozen=True)
class FormatSpec:
    """Tag structure a well-formed output must follow."""

    reasoning_open_tag: str = "<think>"
    reasoning_close_tag: str = "</think>"
    answer_open_tag: str = "<answer>"
    answer_close_tag: str = "</answer>"
    require_reasoning: bool = True
    require_answer: bool = True

    def __post_init__(self) -> None:
        tags = (
            self.reasoning_open_tag,
            self.reasoning_close_tag,
            self.answer_open_tag,
            self.answer_close_tag,
        )
        if any(not t for t in tags):
            raise ValueError("format tags must be non-empty")
        if len(set(tags)) != len(tags):
            raise ValueError("format tags must be pairwise distinct")


DEFAULT_FORMAT_SPEC = FormatSpec()


@dataclass(frozen=True)
class RewardWeights:
    """Relative weight of format vs accuracy; must sum to 1."""

    w_format: float = 0.1
    w_acc: float = 0.9

    def __post_init__(self) -> None:
        if self.w_format < 0 or self.w_acc < 0:
            raise ValueError("reward weights must be non-negative")
        if abs(self.w_format + self.w_acc - 1.0) > 1e-9:
            raise ValueError(
                f"reward weights must sum to 1, got {self.w_format} + {self.w_acc}"
            )


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, corners (x1, y1) <= (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"invalid box corners: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


Option = Tuple[str, str]


@dataclass(frozen=True)
class GroundTruth:
    """Reference answer for one query: a kind plus a kind-shaped value."""

    kind: TaskKind
    value: Union[str, BoundingBox]
    options: Optional[Tuple[Option, ...]] = None

    def __post_init__(self) -> None:
        if self.kind is TaskKind.GROUNDING:
            if not isinstance(self.value, BoundingBox):
                raise ValueError("grounding ground truth must be a BoundingBox")
        elif not isinstance(self.value, str):
            raise ValueError(f"{self.kind.value} ground truth must be text")
        if self.options is not None:
            letters = [letter.strip().upper() for letter, _ in self.options]
            if len(set(letters)) != len(letters):
                raise ValueError("duplicate option letters")
            if (
                self.kind is TaskKind.MULTIPLE_CHOICE
                and str(self.value).strip().upper() not in letters
            ):
                raise ValueError(
                    f"ground-truth letter {self.value!r} not among options {letters}"
                )


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-output scoring result; ``total = w_format*format + w_acc*accuracy``."""

    format_reward: int
    accuracy_reward: float
    total: float
    extracted_answer: Optional[str] = None


def parse_ground_truth(
    task_kind: str,
    value: object,
    options: Optional[Sequence[dict]] = None,
) -> GroundTruth:
    """Build a GroundTruth from the JSON wire shapes used by files and the service.

    ``value`` is a string for text-like kinds and a 4-number [x1, y1, x2, y2]
    array for grounding.  ``options`` entries are {"letter": ..., "text": ...}.
    """
    try:
        kind = TaskKind(task_kind)
    except ValueError:
        valid = ", ".join(k.value for k in TaskKind)
        raise ValueError(f"unknown task_kind {task_kind!r} (expected one of: {valid})")
    parsed_options: Optional[Tuple[Option, ...]] = None
    if options is not None:
        parsed_options = tuple(
            (str(o["letter"]), str(o["text"])) for o in options
        )
    if kind is TaskKind.GROUNDING:
        if not isinstance(value, (list, tuple)) or len(value) != 4:
            raise ValueError("grounding ground_truth must be [x1, y1, x2, y2]")
        box = BoundingBox(*(float(v) for v in value))
        return GroundTruth(kind, box, parsed_options)
    if not isinstance(value, str):
        raise ValueError(f"{kind.value} ground_truth must be a string")
    return GroundTruth(kind, value, parsed_options)


def ground_truth_to_json(gt: GroundTruth) -> dict:
    """Inverse of :func:`parse_ground_truth`."""
    value: object
    if isinstance(gt.value, BoundingBox):
        value = [gt.value.x1, gt.value.y1, gt.value.x2, gt.value.y2]
    else:
        value = gt.value
    out: dict = {"task_kind": gt.kind.value, "ground_truth": value}
    if gt.options is not None:
        out["options"] = [{"letter": l, "text": t} for l, t in gt.options]
    return out


# ---------------------------------------------------------------------------
# Format verification and answer extraction
# ---------------------------------------------------------------------------


def _single_region(text: str, open_tag: str, close_tag: str):
    """(start, end, content) of the unique well-nested tag pair, else None."""
    if text.count(open_tag) != 1 or text.count(close_tag) != 1:
        return None
    i = text.find(open_tag)
    j = text.find(close_tag)
    if j < i:
        return None
    return i, j + len(close_tag), text[i + len(open_tag) : j]


def _first_region(text: str, open_tag: str, close_tag: str) -> Optional[str]:
    """Content of the first open/close tag pair, tolerating extra tags."""
    i = text.find(open_tag)
    if i < 0:
        return None
    j = text.find(close_tag, i + len(open_tag))
    if j < 0:
        return None
    return text[i + len(open_tag) : j]


def verify_format(output: str, spec: FormatSpec = DEFAULT_FORMAT_SPEC) -> int:
    """1 if the output satisfies the tag structure required by ``spec``, else 0.

    When reasoning is required there must be exactly one well-nested
    reasoning pair, and it must come before the answer region.  When an
    answer is required there must be exactly one answer pair with
    non-whitespace content.
    """
    if spec.require_answer:
        answer = _single_region(output, spec.answer_open_tag, spec.answer_close_tag)
        if answer is None or not answer[2].strip():
            return 0
    if spec.require_reasoning:
        reasoning = _single_region(
            output, spec.reasoning_open_tag, spec.reasoning_close_tag
        )
        if reasoning is None:
            return 0
        answer_start = output.find(spec.answer_open_tag)
        if answer_start != -1 and reasoning[1] > answer_start:
            return 0
    return 1


# Leading option letter, optionally wrapped/punctuated: "B", "b)", "(C)", "D. text".
_MCQ_LEADING = re.compile(r"^\s*[\(\[]?\s*([A-Ea-e])\s*[\)\]\.:,]?(?=\s|$)")
# Standalone uppercase option letter anywhere in free text.
_MCQ_ANYWHERE = re.compile(r"\b([A-E])\b")

_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def _match_option_text(content: str, options: Optional[Sequence[Option]]) -> Optional[str]:
    """Letter of the unique option whose normalized text equals the content."""
    if not options:
        return None
    normalized = normalize_text(content)
    hits = [letter for letter, text in options if normalize_text(text) == normalized]
    if len(hits) == 1:
        return hits[0].strip().upper()
    return None


def _reduce_mcq(content: str, options: Optional[Sequence[Option]]) -> Optional[str]:
    """Reduce answer-region content to a single option letter.

    Rule 1: standalone letter A-E at the start of the content.
    Rule 2: content equals (after normalization) the text of exactly one
    declared option.  Returns None when neither applies.
    """
    match = _MCQ_LEADING.match(content)
    if match:
        return match.group(1).upper()
    return _match_option_text(content, options)


def extract_answer(
    output: str,
    spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    kind: TaskKind = TaskKind.STRING_MATCH,
    options: Optional[Sequence[Option]] = None,
) -> Optional[str]:
    """Answer-tag content, reduced to an option letter for multiple choice.

    Returns None when no answer region exists or, for multiple choice,
    when the content cannot be reduced to a letter.  Absence is a value,
    not an error; callers treat it as accuracy 0.
    """
    content = _first_region(output, spec.answer_open_tag, spec.answer_close_tag)
    if content is None:
        return None
    content = content.strip()
    if kind is TaskKind.MULTIPLE_CHOICE:
        return _reduce_mcq(content, options)
    return content


def extract_answer_lenient(
    output: str,
    spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    kind: TaskKind = TaskKind.STRING_MATCH,
    options: Optional[Sequence[Option]] = None,
) -> Optional[str]:
    """Best-effort answer extraction that does not require tags.

    Uses the answer-tag content when tags are present (identical to
    :func:`extract_answer` in that case, so anything the strict path
    extracts the lenient path extracts too); otherwise falls back to the
    whole output, plus letter scanning for multiple choice.
    """
    content = _first_region(output, spec.answer_open_tag, spec.answer_close_tag)
    body = content.strip() if content is not None else output.strip()
    if kind is not TaskKind.MULTIPLE_CHOICE:
        return body if body else None
    if content is not None:
        letter = _reduce_mcq(body, options)
        if letter is not None:
            return letter
    # Untagged text (or an unreducible answer region): first standalone
    # declared option letter, uppercase only -- a lowercase scan would
    # trip over the article "a"; then a whole-body option-text match.
    declared = (
        {l.strip().upper() for l, _ in options} if options else set("ABCDE")
    )
    for match in _MCQ_ANYWHERE.finditer(body):
        if match.group(1) in declared:
            return match.group(1)
    return _match_option_text(body, options)


def parse_bounding_box(text: str) -> Optional[BoundingBox]:
    """Parse a predicted box from free text like "[12, 30, 88, 96]".

    Prefers the first bracketed group of four numbers; otherwise takes
    exactly four bare numbers.  Inverted corners are sorted rather than
    rejected, since model outputs frequently swap them.
    """
    bracketed = re.search(r"[\[\(]([^\]\)]*)[\]\)]", text)
    source = bracketed.group(1) if bracketed else text
    numbers = _NUMBER.findall(source)
    if len(numbers) != 4:
        return None
    x1, y1, x2, y2 = (float(n) for n in numbers)
    return BoundingBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


# ---------------------------------------------------------------------------
# Accuracy rewards
# ---------------------------------------------------------------------------

_TERMINAL_PUNCTUATION = ".,;:!?"


def normalize_text(s: str) -> str:
    """Lowercase, collapse whitespace runs, strip terminal sentence punctuation.

    Internal punctuation (hyphens, slashes, mid-word dots) is preserved;
    clinical terms depend on it.  Idempotent.
    """
    s = " ".join(s.lower().split())
    return s.rstrip(_TERMINAL_PUNCTUATION).rstrip()


def jaccard_reward(pred: str, gt: str) -> float:
    """|tokens(pred) & tokens(gt)| / |tokens(pred) | tokens(gt)|.

    Inputs are expected to be normalized already.  Two empty token sets
    compare equal by convention (reward 1).
    """
    pred_tokens = set(pred.split())
    gt_tokens = set(gt.split())
    if not pred_tokens and not gt_tokens:
        return 1.0
    return len(pred_tokens & gt_tokens) / len(pred_tokens | gt_tokens)


def mcq_reward(pred_letter: str, gt_letter: str) -> int:
    """1 on case-insensitive option-letter match, else 0."""
    return int(pred_letter.strip().upper() == gt_letter.strip().upper())


class _ArithmeticEvaluator(ast.NodeVisitor):
    """Evaluates +, -, *, / and unary sign over numeric literals only."""

    _BINOPS = {
        ast.Add: lambda a, b: a + b,
        ast.Sub: lambda a, b: a - b,
        ast.Mult: lambda a, b: a * b,
        ast.Div: lambda a, b: a / b,
    }

    def evaluate(self, node: ast.AST) -> float:
        if isinstance(node, ast.Expression):
            return self.evaluate(node.body)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ValueError(f"non-numeric literal {node.value!r}")
            return float(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in self._BINOPS:
            left = self.evaluate(node.left)
            right = self.evaluate(node.right)
            if isinstance(node.op, ast.Div) and right == 0:
                raise ValueError("division by zero")
            return self._BINOPS[type(node.op)](left, right)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            value = self.evaluate(node.operand)
            return -value if isinstance(node.op, ast.USub) else value
        raise ValueError(f"unsupported expression node {type(node).__name__}")


def evaluate_arithmetic(text: str) -> float:
    """Numeric value of a decimal / fraction / percentage arithmetic expression.

    Supports +, -, *, / (including the unicode minus, times, and division
    signs), parentheses, and trailing-percent notation.  Raises ValueError
    on anything else.
    """
    cleaned = (
        text.strip()
        .replace("−", "-")
        .replace("×", "*")
        .replace("÷", "/")
        .replace("%", "/100")
    )
    if not cleaned:
        raise ValueError("empty expression")
    try:
        tree = ast.parse(cleaned, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"unparseable expression {text!r}") from exc
    return _ArithmeticEvaluator().evaluate(tree)


def math_reward(pred: str, gt: str, rel_tol: float = 1e-6) -> int:
    """1 iff pred evaluates within ``rel_tol * max(1, |gt|)`` of gt.

    An unparseable prediction scores 0; an unparseable ground truth is a
    data error and raises :class:`MalformedGroundTruthError`.
    """
    try:
        gt_value = evaluate_arithmetic(gt)
    except ValueError as exc:
        raise MalformedGroundTruthError(f"bad math ground truth {gt!r}: {exc}") from exc
    try:
        pred_value = evaluate_arithmetic(pred)
    except ValueError:
        return 0
    return int(abs(pred_value - gt_value) <= rel_tol * max(1.0, abs(gt_value)))


def iou_reward(pred: BoundingBox, gt: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when both are degenerate."""
    inter_w = min(pred.x2, gt.x2) - max(pred.x1, gt.x1)
    inter_h = min(pred.y2, gt.y2) - max(pred.y1, gt.y1)
    intersection = max(0.0, inter_w) * max(0.0, inter_h)
    union = pred.area + gt.area - intersection
    if union <= 0:
        return 0.0
    return intersection / union


def accuracy_reward(
    extracted: Optional[str],
    gt: GroundTruth,
    math_rel_tol: float = 1e-6,
) -> float:
    """Per-kind accuracy of an already-extracted answer, in [0, 1].

    A missing answer scores 0 -- except for math, where the ground truth
    is still parsed first so a malformed one raises rather than silently
    scoring.
    """
    if gt.kind is TaskKind.MATH:
        return float(math_reward(extracted or "", str(gt.value), math_rel_tol))
    if extracted is None:
        return 0.0
    if gt.kind is TaskKind.MULTIPLE_CHOICE:
        return float(mcq_reward(extracted, str(gt.value)))
    if gt.kind is TaskKind.STRING_MATCH:
        return jaccard_reward(normalize_text(extracted), normalize_text(str(gt.value)))
    box = parse_bounding_box(extracted)
    if box is None:
        return 0.0
    assert isinstance(gt.value, BoundingBox)
    return iou_reward(box, gt.value)


def meets_accuracy_threshold(
    accuracy: float,
    kind: TaskKind,
    string_match_threshold: float = 1.0,
    grounding_threshold: float = 0.5,
) -> bool:
    """Binary correctness used for rejection sampling and benchmark grading.

    Multiple choice and math are exact {0,1} rewards; graded kinds compare
    against their thresholds.
    """
    if kind in (TaskKind.MULTIPLE_CHOICE, TaskKind.MATH):
        return accuracy == 1.0
    if kind is TaskKind.STRING_MATCH:
        return accuracy >= string_match_threshold
    return accuracy >= grounding_threshold


def total_reward(
    output: str,
    gt: GroundTruth,
    spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    math_rel_tol: float = 1e-6,
) -> RewardBreakdown:
    """Format-gated weighted total reward for one output.

    Accuracy is only defined when the format check passes; a malformed
    output scores 0 on every component.
    """
    format_ok = verify_format(output, spec)
    if not format_ok:
        return RewardBreakdown(0, 0.0, 0.0, None)
    extracted = extract_answer(output, spec, gt.kind, gt.options)
    accuracy = accuracy_reward(extracted, gt, math_rel_tol)
    total = weights.w_format * format_ok + weights.w_acc * accuracy
    return RewardBreakdown(format_ok, accuracy, total, extracted)
