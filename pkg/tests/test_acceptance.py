"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Each test prints an ``ACCEPTANCE PASS: <criterion>`` line on success (visible
with ``pytest -s`` or ``-v``); a failure reads as the criterion name.  Runtime
bounds are asserted with a monotonic clock.

Run: ``pytest tests/test_acceptance.py -v``
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import MCQ_OPTIONS
from rlvrkit.client import ChatClient, EndpointConfig, install_mock
from rlvrkit.evaluation import (
    EvalRecord,
    Prediction,
    ScoringMode,
    accuracy_report,
    score_predictions,
)
from rlvrkit.forge import (
    Candidate,
    ForgeConfig,
    REFLECTIVE_CONNECTOR,
    forge_dataset,
    judge_quality,
    load_queries,
)
from rlvrkit.grpo import (
    GrpoConfig,
    RolloutGroup,
    TabularPolicy,
    clipped_term,
    demo_env,
    group_advantages,
    grpo_objective,
    grpo_objective_gradient,
    train_toy,
)
from rlvrkit.rewards import (
    BoundingBox,
    GroundTruth,
    RewardWeights,
    TaskKind,
    extract_answer,
    iou_reward,
    jaccard_reward,
    math_reward,
    mcq_reward,
    normalize_text,
    parse_ground_truth,
    total_reward,
    verify_format,
)
from rlvrkit.service import create_app
from test_service import expected_breakdown, mixed_golden_items


@contextmanager
def runtime_under(seconds, name):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL: {name}")
        raise
    elapsed = time.monotonic() - started
    assert elapsed < seconds, f"{name} took {elapsed:.2f}s (bound {seconds}s)"
    print(f"ACCEPTANCE PASS: {name} ({elapsed:.2f}s)")


MCQ_GT = GroundTruth(
    TaskKind.MULTIPLE_CHOICE,
    "B",
    (("A", "aorta"), ("B", "pleural effusion"), ("C", "left lung")),
)


def test_reward_engine_golden_suite():
    with runtime_under(1.0, "reward-engine golden suite"):
        # format verification
        assert verify_format("<think>steps</think><answer>B</answer>") == 1
        assert verify_format("<think>steps</think>") == 0
        assert verify_format("") == 0
        # answer extraction
        assert extract_answer(
            "<answer> B. pleural effusion </answer>", kind=TaskKind.MULTIPLE_CHOICE
        ) == "B"
        assert extract_answer("<answer>left lung</answer>") == "left lung"
        assert extract_answer("no tags here") is None
        # normalization
        assert normalize_text("  Left  LUNG ") == "left lung"
        assert normalize_text("Pneumonia.") == "pneumonia"
        assert normalize_text("") == ""
        # jaccard: identical, half overlap ({left,lung} vs {lung}), disjoint
        assert jaccard_reward("left lung", "left lung") == 1.0
        assert abs(jaccard_reward("left lung", "lung") - 0.5) < 1e-9
        assert jaccard_reward("cat", "dog") == 0.0
        # multiple choice match is exact {0, 1}
        assert mcq_reward("B", "B") == 1
        assert mcq_reward("b", "B") == 1
        assert mcq_reward("A", "B") == 0
        # math verification
        assert math_reward("1/2", "0.5", 1e-6) == 1
        assert math_reward("2", "2") == 1
        assert math_reward("2", "3") == 0
        # IoU including the 1/7 offset case
        assert iou_reward(BoundingBox(0, 0, 2, 2), BoundingBox(0, 0, 2, 2)) == 1.0
        assert iou_reward(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0
        assert abs(iou_reward(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)) - 1 / 7) < 1e-9
        # weighted totals under (0.1, 0.9) and the format gate
        weights = RewardWeights(0.1, 0.9)
        good = total_reward("<think>r</think><answer>B</answer>", MCQ_GT, weights=weights)
        assert abs(good.total - 1.0) < 1e-9
        gated = total_reward("B without any tags", MCQ_GT, weights=weights)
        assert gated.total == 0.0 and gated.accuracy_reward == 0.0
        wrong = total_reward("<think>r</think><answer>A</answer>", MCQ_GT, weights=weights)
        assert abs(wrong.total - 0.1) < 1e-9


def test_advantage_standardization():
    with runtime_under(5.0, "advantage standardization"):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 1000:
            g = int(rng.integers(2, 65))
            rewards = rng.uniform(0, 1, size=g)
            if rewards.std() < 1e-6:
                continue
            adv = np.array(group_advantages(rewards.tolist()))
            assert abs(adv.mean()) < 1e-9
            assert abs(adv.std(ddof=0) - 1.0) < 1e-9
            scale = float(rng.uniform(0.1, 10.0))
            shift = float(rng.uniform(-5.0, 5.0))
            affine = np.array(group_advantages((scale * rewards + shift).tolist()))
            assert np.max(np.abs(adv - affine)) < 1e-9
            checked += 1
        frozen = group_advantages([1, 0, 0, 0])
        expected = [1.7320508, -0.5773503, -0.5773503, -0.5773503]
        assert np.max(np.abs(np.array(frozen) - expected)) < 1e-6


def _random_gradient_instance(rng):
    n = int(rng.integers(2, 6))
    g = int(rng.integers(2, 5))
    cfg = GrpoConfig(
        group_size=2, clip_epsilon=0.2, kl_beta=float(rng.uniform(0.0, 0.2))
    )
    policy = TabularPolicy({"q": rng.normal(size=n)})
    old = TabularPolicy({"q": policy.logits["q"] + rng.normal(scale=0.3, size=n)})
    ref = TabularPolicy({"q": rng.normal(size=n)})
    actions = [int(a) for a in rng.integers(0, n, size=g)]
    rewards = [float(r) for r in rng.uniform(0, 1, size=g)]
    group = RolloutGroup("q", rewards, group_advantages(rewards))
    return group, actions, policy, old, ref, cfg


def test_objective_and_gradient():
    with runtime_under(30.0, "objective/gradient finite-difference check"):
        rng = np.random.default_rng(42)
        h = 1e-5
        accepted = 0
        while accepted < 100:
            group, actions, policy, old, ref, cfg = _random_gradient_instance(rng)
            p, po = policy.probs("q"), old.probs("q")
            ratios = [p[a] / po[a] for a in actions]
            # the objective is non-differentiable exactly at a clip kink and
            # relative error is meaningless at a near-zero gradient; resample
            if any(
                abs(r - (1 + cfg.clip_epsilon)) < 1e-3
                or abs(r - (1 - cfg.clip_epsilon)) < 1e-3
                for r in ratios
            ):
                continue
            analytic = grpo_objective_gradient(group, actions, policy, old, ref, cfg)
            if np.linalg.norm(analytic) < 1e-3:
                continue
            z = policy.logits["q"]
            fd = np.zeros_like(z)
            for k in range(len(z)):
                zp, zm = z.copy(), z.copy()
                zp[k] += h
                zm[k] -= h
                fd[k] = (
                    grpo_objective(group, actions, TabularPolicy({"q": zp}), old, ref, cfg)
                    - grpo_objective(group, actions, TabularPolicy({"q": zm}), old, ref, cfg)
                ) / (2 * h)
            rel = np.linalg.norm(analytic - fd) / max(
                np.linalg.norm(analytic), np.linalg.norm(fd)
            )
            assert rel < 1e-5
            accepted += 1
        # clip saturation: zero finite-difference slope beyond the kinks
        eps, h = 0.2, 1e-6
        for ratio in (1.25, 1.5, 3.0):
            fd = (clipped_term(ratio + h, 1.0, eps) - clipped_term(ratio - h, 1.0, eps)) / (2 * h)
            assert fd == 0.0
        for ratio in (0.75, 0.4, 0.1):
            fd = (clipped_term(ratio + h, -1.0, eps) - clipped_term(ratio - h, -1.0, eps)) / (2 * h)
            assert fd == 0.0


def test_toy_grpo_convergence():
    with runtime_under(10.0, "toy GRPO convergence"):
        cfg = GrpoConfig(group_size=16, seed=7, n_steps=200)
        trace = train_toy(demo_env(), cfg)
        assert trace.steps[0].mean_reward == pytest.approx(0.25, abs=1e-12)
        assert trace.final_mean_reward > 0.9
        # KL domination: a huge beta pins the policy to the uniform reference
        kl_cfg = GrpoConfig(group_size=16, seed=7, n_steps=200, kl_beta=100.0)
        kl_trace = train_toy(demo_env(), kl_cfg)
        assert kl_trace.steps[-1].kl_to_ref < 0.01
        # deterministic across runs
        again = train_toy(demo_env(), cfg)
        assert again.steps == trace.steps


def test_forge_correctness_under_scripted_mocks(forge_fixture):
    with runtime_under(5.0, "forge correctness under scripted mocks"):
        def clients():
            make = lambda script: ChatClient(
                EndpointConfig(base_url="mock://"),
                transport=install_mock(list(script)),
                sleep=lambda _d: None,
            )
            return make(forge_fixture.generator_script), make(forge_fixture.judge_script)

        cfg = ForgeConfig(seed=7)
        gen, judge = clients()
        stats = forge_dataset(
            forge_fixture.queries_path, forge_fixture.out_path, cfg, gen, judge
        )
        assert stats["samples"] == {"plain": 1, "reflective": 1, "skipped": 1}
        rows = [
            json.loads(line) for line in forge_fixture.out_path.read_text().splitlines()
        ]
        assert [r["kind"] for r in rows] == ["plain", "reflective", "skipped"]

        # reflective: connector appears verbatim exactly once, between the
        # chosen negative and the best positive
        reflective = rows[1]
        assert reflective["cot_text"].count(REFLECTIVE_CONNECTOR) == 1
        neg, _, pos = reflective["cot_text"].partition(f" {REFLECTIVE_CONNECTOR} ")
        assert neg and pos
        assert pos == f"<think>candidate 0 of q2</think><answer>C</answer>"  # score 9 is the max
        assert reflective["chosen_positive_index"] == 0

        # plain sample maximizes the judge score (ties allowed)
        plain = rows[0]
        best = max(forge_fixture.q1_scores)
        top_indices = {i for i, s in enumerate(forge_fixture.q1_scores) if s == best}
        assert plain["chosen_positive_index"] in top_indices

        # byte-identical rerun with the same seed and scripts
        first_bytes = forge_fixture.out_path.read_bytes()
        gen2, judge2 = clients()
        forge_dataset(forge_fixture.queries_path, forge_fixture.out_path, cfg, gen2, judge2)
        assert forge_fixture.out_path.read_bytes() == first_bytes

        # zero endpoint calls on resume over completed output
        gen3 = ChatClient(EndpointConfig(base_url="mock://"), transport=install_mock([]))
        judge3 = ChatClient(EndpointConfig(base_url="mock://"), transport=install_mock([]))
        forge_dataset(
            forge_fixture.queries_path, forge_fixture.out_path, cfg, gen3, judge3, resume=True
        )
        assert gen3._transport.calls == 0 and judge3._transport.calls == 0
        assert forge_fixture.out_path.read_bytes() == first_bytes


def test_judge_protocol(forge_fixture):
    with runtime_under(5.0, "judge protocol"):
        # judged only on correct candidates: 7 + 3 positives -> 10 judge calls
        make = lambda script: ChatClient(
            EndpointConfig(base_url="mock://"),
            transport=install_mock(list(script)),
            sleep=lambda _d: None,
        )
        gen, judge = make(forge_fixture.generator_script), make(forge_fixture.judge_script)
        forge_dataset(forge_fixture.queries_path, forge_fixture.out_path, ForgeConfig(), gen, judge)
        assert judge._transport.calls == 10

        # three reply shapes: clean dict, dict embedded in prose, garbage
        query = load_queries(forge_fixture.queries_path)[0]
        positive = Candidate(0, "<think>r</think><answer>B</answer>", correct=True)
        clean = make(['{"score": 8, "justification": "sound reasoning"}'])
        assert judge_quality(query, positive, clean, ForgeConfig()) == (8, "sound reasoning")
        embedded = make(["Verdict follows: {'score': 5, 'justification': 'thin'} -- end"])
        assert judge_quality(query, positive, embedded, ForgeConfig()) == (5, "thin")
        garbage = make(["no dict here"] * 3)
        assert judge_quality(query, positive, garbage, ForgeConfig(judge_retries=2)) == (
            1,
            "judge-parse-failure",
        )


def test_service_library_equivalence():
    with runtime_under(10.0, "service/library equivalence"):
        client = TestClient(create_app())
        items = mixed_golden_items(100)
        resp = client.post("/v1/reward", json={"items": items})
        assert resp.status_code == 200
        breakdowns = resp.json()["breakdowns"]
        assert len(breakdowns) == 100
        for item, wire in zip(items, breakdowns):
            lib = expected_breakdown(item)
            assert wire["format_reward"] == lib.format_reward
            assert wire["accuracy_reward"] == lib.accuracy_reward  # bit-identical
            assert wire["total"] == lib.total
            assert wire["extracted_answer"] == lib.extracted_answer

        # order preservation under 16 concurrent tagged submissions
        def submit(thread_idx):
            tagged = [
                {
                    "output": f"<think>r</think><answer>t{thread_idx}-i{j}</answer>",
                    "task_kind": "string_match",
                    "ground_truth": f"t{thread_idx}-i{j}",
                }
                for j in range(20)
            ]
            body = client.post("/v1/reward", json={"items": tagged}).json()
            return thread_idx, body["breakdowns"]

        with ThreadPoolExecutor(max_workers=16) as pool:
            for thread_idx, breakdowns in pool.map(submit, range(16)):
                for j, b in enumerate(breakdowns):
                    assert b["extracted_answer"] == f"t{thread_idx}-i{j}"


def test_eval_harness():
    with runtime_under(10.0, "eval harness"):
        # four benchmarks with known correct counts: 2/4, 4/4, 3/4, 1/4
        counts = {"bench-w": (2, 4), "bench-x": (4, 4), "bench-y": (3, 4), "bench-z": (1, 4)}
        records, predictions = [], []
        for bench, (n_correct, n_total) in counts.items():
            for i in range(n_total):
                gt = parse_ground_truth("multiple_choice", "B", MCQ_OPTIONS)
                records.append(EvalRecord(bench, str(i), "Q?", (), gt.kind, gt))
                answer = "B" if i < n_correct else "A"
                predictions.append(Prediction(bench, str(i), f"<answer>{answer}</answer>"))
        scored = score_predictions(records, predictions, ScoringMode.ANSWER_ONLY)
        report = accuracy_report(scored)
        assert [b.accuracy for b in report.benchmarks] == [50.0, 100.0, 75.0, 25.0]
        assert report.average == 62.5
        # the two-benchmark example: 50.0 and 100.0 average to 75.0
        two = accuracy_report([p for p in scored if p.benchmark in ("bench-w", "bench-x")])
        assert [b.accuracy for b in two.benchmarks] == [50.0, 100.0]
        assert two.average == 75.0

        # strict_format is never more permissive than answer_only
        rng = np.random.default_rng(77)
        kinds = ["multiple_choice", "string_match", "math"]
        answers = {
            "multiple_choice": ["A", "B", "C"],
            "string_match": ["left lung", "heart"],
            "math": ["1/2", "3"],
        }
        shapes = [
            "<think>r</think><answer>{a}</answer>",
            "<answer>{a}</answer>",
            "{a}",
            "I think the answer is {a}",
            "",
            "<answer>{a}</answer> trailing <answer>{a}</answer>",
        ]
        rnd_records, rnd_preds = [], []
        for i in range(300):
            kind = kinds[int(rng.integers(len(kinds)))]
            gt_value = answers[kind][int(rng.integers(len(answers[kind])))]
            gt = parse_ground_truth(
                kind, gt_value, MCQ_OPTIONS if kind == "multiple_choice" else None
            )
            rnd_records.append(EvalRecord("rnd", str(i), "Q?", (), gt.kind, gt))
            shape = shapes[int(rng.integers(len(shapes)))]
            answer = answers[kind][int(rng.integers(len(answers[kind])))]
            rnd_preds.append(Prediction("rnd", str(i), shape.format(a=answer)))
        strict = score_predictions(rnd_records, rnd_preds, ScoringMode.STRICT_FORMAT)
        lenient = score_predictions(rnd_records, rnd_preds, ScoringMode.ANSWER_ONLY)
        assert any(p.correct for p in strict)
        for s, l in zip(strict, lenient):
            if s.correct:
                assert l.correct
