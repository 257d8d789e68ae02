import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import pytest


def write_jsonl(path: Path, rows: List[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


MCQ_OPTIONS = [
    {"letter": "A", "text": "aorta"},
    {"letter": "B", "text": "pleural effusion"},
    {"letter": "C", "text": "left lung"},
    {"letter": "D", "text": "heart"},
]


def mcq_query_row(qid: str, gt_letter: str, instruction: str = "What does the image show?") -> dict:
    return {
        "id": qid,
        "instruction": instruction,
        "images": [],
        "task_kind": "multiple_choice",
        "ground_truth": gt_letter,
        "options": MCQ_OPTIONS,
    }


def mcq_candidate(qid: str, index: int, letter: str) -> str:
    return f"<think>candidate {index} of {qid}</think><answer>{letter}</answer>"


def judge_reply(score: int, justification: str = "ok") -> str:
    return json.dumps({"score": score, "justification": justification})


@dataclass
class ForgeFixture:
    """Three-query setup engineered for pass counts m = 7, 3, 0."""

    queries_path: Path
    out_path: Path
    generator_script: List[str]
    judge_script: List[str]
    q1_scores: List[int]
    q2_scores: List[int]


@pytest.fixture
def forge_fixture(tmp_path: Path) -> ForgeFixture:
    rows = [
        mcq_query_row("q1", "B"),
        mcq_query_row("q2", "C"),
        mcq_query_row("q3", "D"),
    ]
    queries_path = write_jsonl(tmp_path / "queries.jsonl", rows)

    generator_script: List[str] = []
    # q1: candidates 0-6 answer B (correct), 7-9 answer A -> m = 7
    generator_script += [
        mcq_candidate("q1", i, "B" if i < 7 else "A") for i in range(10)
    ]
    # q2: candidates 0-2 answer C (correct), 3-9 answer A -> m = 3
    generator_script += [
        mcq_candidate("q2", i, "C" if i < 3 else "A") for i in range(10)
    ]
    # q3: nothing answers D -> m = 0
    generator_script += [mcq_candidate("q3", i, "A") for i in range(10)]

    q1_scores = [8, 8, 6, 5, 5, 4, 3]  # tie at the top exercises the random tie-break
    q2_scores = [9, 2, 4]
    judge_script = [judge_reply(s) for s in q1_scores + q2_scores]

    return ForgeFixture(
        queries_path=queries_path,
        out_path=tmp_path / "dataset.jsonl",
        generator_script=generator_script,
        judge_script=judge_script,
        q1_scores=q1_scores,
        q2_scores=q2_scores,
    )
