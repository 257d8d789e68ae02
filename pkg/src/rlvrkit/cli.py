"""Command-line entry point.

Subcommands: ``forge`` (CoT dataset synthesis), ``score`` (offline reward
scoring of a rollout file), ``grpo-demo`` (toy tabular training with a
trace file), ``eval`` (benchmark evaluation), ``serve`` (reward service).

Exit codes: 0 success, 1 operational failure, 2 usage or validation
error.  Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .client import ChatClient, EndpointConfig, MockTransport, TransientFailure, TransportError
from .config import DEFAULTS, resolve_config
from .forge import ForgeConfig, ForgeError, SchemaError, forge_dataset
from .grpo import GrpoConfig, demo_env, train_toy
from .evaluation import (
    PromptMode,
    ScoringMode,
    accuracy_report,
    collect_predictions,
    load_benchmark,
    load_predictions,
    render_report_text,
    score_predictions,
)
from .rewards import (
    FormatSpec,
    RewardWeights,
    parse_ground_truth,
    total_reward,
)
from .service import serve as run_service

logger = logging.getLogger(__name__)


def _parse_weights(text: str) -> Dict[str, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("weights must be 'w_format,w_acc'")
    return {"w_format": float(parts[0]), "w_acc": float(parts[1])}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlvrkit",
        description="Verifiable rewards, GRPO math, and reflective CoT forging.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON config file merged below env and flags")
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the fully resolved configuration and exit",
    )
    # shared flags accepted after the subcommand as well; SUPPRESS keeps the
    # subparser from clobbering values parsed at the root
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument(
        "--print-config", action="store_true", default=argparse.SUPPRESS
    )
    sub = parser.add_subparsers(dest="command", parser_class=argparse.ArgumentParser)

    p = sub.add_parser("forge", help="synthesize a reflective CoT dataset", parents=[common])
    p.add_argument("--queries", help="input queries JSONL")
    p.add_argument("--out", help="output dataset JSONL (stats written adjacent)")
    p.add_argument("--n-candidates", type=int, dest="n_candidates")
    p.add_argument("--min-pass-plain", type=int, dest="min_pass_plain")
    p.add_argument("--seed", type=int)
    p.add_argument("--generator-endpoint", dest="generator_endpoint")
    p.add_argument("--judge-endpoint", dest="judge_endpoint")
    p.add_argument("--mock-script", help="JSON file of scripted generator/judge outcomes")
    p.add_argument("--resume", action="store_true", default=None)

    p = sub.add_parser("score", parents=[common], help="score a rollout file against ground truths")
    p.add_argument("--in", dest="in_path", help="rollouts JSONL: {'id', 'output'}")
    p.add_argument("--gt", dest="gt_path", help="ground truths JSONL")
    p.add_argument("--out", help="output rewards JSONL")
    p.add_argument("--weights", type=_parse_weights, help="'w_format,w_acc'")

    p = sub.add_parser("grpo-demo", parents=[common], help="train the bundled toy environment")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="output trace JSONL")
    p.add_argument("--group-size", type=int, dest="group_size")
    p.add_argument("--clip-epsilon", type=float, dest="clip_epsilon")
    p.add_argument("--kl-beta", type=float, dest="kl_beta")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")

    p = sub.add_parser("eval", parents=[common], help="evaluate benchmark predictions")
    p.add_argument("--bench", nargs="+", help="benchmark JSONL file(s)")
    p.add_argument("--predictions", help="predictions JSONL to grade")
    p.add_argument("--endpoint", help="chat endpoint to collect predictions from")
    p.add_argument("--mode", choices=["direct", "reasoning"], default=None)
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument(
        "--scoring", choices=["strict", "answer-only"], default="answer-only"
    )
    p.add_argument("--out", help="also write the report as JSON")
    p.add_argument("--save-predictions", help="write collected raw outputs as JSONL")

    p = sub.add_parser("serve", parents=[common], help="run the reward-scoring HTTP service")
    p.add_argument("--bind", help="host:port to listen on")
    p.add_argument("--weights", type=_parse_weights, help="'w_format,w_acc'")
    p.add_argument("--format-spec", help="JSON file with format tag overrides")
    p.add_argument("--batch-cap", type=int, dest="batch_cap")
    p.add_argument("--payload-cap", type=int, dest="payload_cap")

    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, object]:
    skip = {"command", "config", "print_config"}
    overrides: Dict[str, object] = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if key == "weights":
            overrides.update(value)
        elif key in DEFAULTS:
            overrides[key] = value
    return overrides


def _format_spec_from_config(cfg: Dict[str, object]) -> FormatSpec:
    return FormatSpec(
        reasoning_open_tag=str(cfg["reasoning_open_tag"]),
        reasoning_close_tag=str(cfg["reasoning_close_tag"]),
        answer_open_tag=str(cfg["answer_open_tag"]),
        answer_close_tag=str(cfg["answer_close_tag"]),
        require_reasoning=bool(cfg["require_reasoning"]),
        require_answer=bool(cfg["require_answer"]),
    )


def _endpoint_config(cfg: Dict[str, object], base_url: str) -> EndpointConfig:
    return EndpointConfig(
        base_url=base_url,
        timeout=float(cfg["timeout"]),
        max_retries=int(cfg["max_retries"]),
        backoff_base=float(cfg["backoff_base"]),
        max_concurrency=int(cfg["max_concurrency"]),
    )


def _mock_outcomes(entries: List[object]) -> List[object]:
    outcomes: List[object] = []
    for entry in entries:
        if isinstance(entry, dict) and "error" in entry:
            outcomes.append(TransientFailure(str(entry["error"])))
        else:
            outcomes.append(str(entry))
    return outcomes


def _read_jsonl(path: str) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_forge(args: argparse.Namespace, cfg: Dict[str, object]) -> int:
    if not args.queries or not args.out:
        raise SchemaError("forge requires --queries and --out")
    forge_cfg = ForgeConfig(
        n_candidates=int(cfg["n_candidates"]),
        min_pass_plain=int(cfg["min_pass_plain"]),
        judge_retries=int(cfg["judge_retries"]),
        string_match_threshold=float(cfg["string_match_threshold"]),
        grounding_threshold=float(cfg["grounding_threshold"]),
        math_rel_tol=float(cfg["math_rel_tol"]),
        seed=int(cfg["seed"]),
        generator_model=str(cfg["generator_model"]),
        judge_model=str(cfg["judge_model"]),
        temperature=float(cfg["temperature"]),
        max_tokens=int(cfg["max_tokens"]),
        judge_sees_images=bool(cfg["judge_sees_images"]),
        format_spec=_format_spec_from_config(cfg),
    )
    if args.mock_script:
        with open(args.mock_script, "r", encoding="utf-8") as fh:
            script = json.load(fh)
        no_sleep = lambda _delay: None  # noqa: E731 - scripted failures should not wait
        generator = ChatClient(
            EndpointConfig(base_url="mock://generator"),
            transport=MockTransport(_mock_outcomes(script.get("generator", []))),
            sleep=no_sleep,
        )
        judge = ChatClient(
            EndpointConfig(base_url="mock://judge"),
            transport=MockTransport(_mock_outcomes(script.get("judge", []))),
            sleep=no_sleep,
        )
    else:
        if not cfg["generator_endpoint"] or not cfg["judge_endpoint"]:
            raise SchemaError(
                "forge requires --generator-endpoint and --judge-endpoint "
                "(or --mock-script)"
            )
        generator = ChatClient(_endpoint_config(cfg, str(cfg["generator_endpoint"])))
        judge = ChatClient(_endpoint_config(cfg, str(cfg["judge_endpoint"])))
    stats = forge_dataset(
        args.queries, args.out, forge_cfg, generator, judge, resume=bool(args.resume)
    )
    print(json.dumps(stats, sort_keys=True), file=sys.stderr)
    return 0


def cmd_score(args: argparse.Namespace, cfg: Dict[str, object]) -> int:
    if not args.in_path or not args.gt_path or not args.out:
        raise SchemaError("score requires --in, --gt, and --out")
    spec = _format_spec_from_config(cfg)
    weights = RewardWeights(float(cfg["w_format"]), float(cfg["w_acc"]))
    truths = {}
    for row in _read_jsonl(args.gt_path):
        if "id" not in row:
            raise SchemaError(f"{args.gt_path}: ground-truth row missing 'id'")
        truths[str(row["id"])] = parse_ground_truth(
            row["task_kind"], row["ground_truth"], row.get("options")
        )
    lines = []
    for row in _read_jsonl(args.in_path):
        if "id" not in row or "output" not in row:
            raise SchemaError(f"{args.in_path}: rollout rows need 'id' and 'output'")
        rid = str(row["id"])
        if rid not in truths:
            raise SchemaError(f"no ground truth for rollout id {rid!r}")
        b = total_reward(
            str(row["output"]), truths[rid], spec, weights, float(cfg["math_rel_tol"])
        )
        lines.append(
            json.dumps(
                {
                    "id": rid,
                    "format_reward": b.format_reward,
                    "accuracy_reward": b.accuracy_reward,
                    "total": b.total,
                    "extracted_answer": b.extracted_answer,
                },
                sort_keys=True,
            )
        )
    Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    print(f"scored {len(lines)} rollouts -> {args.out}", file=sys.stderr)
    return 0


def cmd_grpo_demo(args: argparse.Namespace, cfg: Dict[str, object]) -> int:
    if not args.trace:
        raise SchemaError("grpo-demo requires --trace")
    grpo_cfg = GrpoConfig(
        group_size=int(cfg["group_size"]),
        clip_epsilon=float(cfg["clip_epsilon"]),
        kl_beta=float(cfg["kl_beta"]),
        learning_rate=float(cfg["learning_rate"]),
        std_floor=float(cfg["std_floor"]),
        seed=int(cfg["seed"]),
        n_steps=int(cfg["steps"]),
    )
    trace = train_toy(demo_env(), grpo_cfg)
    trace.write_jsonl(args.trace)
    print(
        f"trained {grpo_cfg.n_steps} steps; mean reward "
        f"{trace.steps[0].mean_reward:.4f} -> {trace.final_mean_reward:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: Dict[str, object]) -> int:
    if not args.bench:
        raise SchemaError("eval requires --bench")
    records = []
    seen = set()
    for path in args.bench:
        for record in load_benchmark(path):
            key = (record.benchmark, record.id)
            if key in seen:
                raise SchemaError(f"duplicate record {key} across benchmark files")
            seen.add(key)
            records.append(record)
    if args.predictions:
        predictions = load_predictions(args.predictions)
    elif cfg["endpoint"]:
        mode = (
            PromptMode.REASONING if args.mode == "reasoning" else PromptMode.DIRECT_ANSWER
        )
        client = ChatClient(_endpoint_config(cfg, str(cfg["endpoint"])))
        predictions = collect_predictions(records, client, mode, model=str(cfg["model"]))
        if args.save_predictions:
            with open(args.save_predictions, "w", encoding="utf-8") as fh:
                for p in predictions:
                    fh.write(
                        json.dumps(
                            {"benchmark": p.benchmark, "id": p.id, "raw_output": p.raw_output},
                            sort_keys=True,
                        )
                        + "\n"
                    )
    else:
        raise SchemaError("eval requires --predictions or --endpoint")
    scoring = (
        ScoringMode.STRICT_FORMAT if args.scoring == "strict" else ScoringMode.ANSWER_ONLY
    )
    scored = score_predictions(
        records,
        predictions,
        scoring,
        spec=_format_spec_from_config(cfg),
        string_match_threshold=float(cfg["string_match_threshold"]),
        grounding_threshold=float(cfg["grounding_threshold"]),
        math_rel_tol=float(cfg["math_rel_tol"]),
    )
    report = accuracy_report(scored)
    print(render_report_text(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_serve(args: argparse.Namespace, cfg: Dict[str, object]) -> int:
    if args.format_spec:
        with open(args.format_spec, "r", encoding="utf-8") as fh:
            spec = FormatSpec(**json.load(fh))
    else:
        spec = _format_spec_from_config(cfg)
    run_service(
        bind=str(cfg["bind"]),
        default_spec=spec,
        default_weights=RewardWeights(float(cfg["w_format"]), float(cfg["w_acc"])),
        batch_cap=int(cfg["batch_cap"]),
        payload_cap=int(cfg["payload_cap"]),
    )
    return 0


_HANDLERS = {
    "forge": cmd_forge,
    "score": cmd_score,
    "grpo-demo": cmd_grpo_demo,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.config, _flag_overrides(args))
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        return _HANDLERS[args.command](args, cfg)
    except (SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ForgeError, TransportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
