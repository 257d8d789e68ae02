"""Group-relative policy optimization math and a tabular toy training loop.

Advantages standardize rewards within a rollout group; the surrogate
objective is the mean clipped advantage-weighted likelihood ratio minus a
KL penalty against a frozen reference policy.  The toy loop instantiates
the exact formulas on single-step episodes over a tabular softmax policy,
scored by the rule-based reward engine, so the gradient can be checked
against finite differences and convergence observed in milliseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .rewards import (
    DEFAULT_FORMAT_SPEC,
    FormatSpec,
    GroundTruth,
    RewardWeights,
    TaskKind,
    total_reward,
)

# Learning rate used when optimizing the full 3B policy network; far too
# small to move a tabular policy, so the toy default lives in logit space.
FULL_SCALE_LEARNING_RATE = 1e-6


@dataclass(frozen=True)
class GrpoConfig:
    """Knobs for the objective and the toy training loop.

    The toy learning rate must keep the KL-penalty update stable for
    large beta: the linearized update multiplier on a 4-option query is
    1 - lr * beta / 4, so lr = 0.05 stays contractive up to beta = 160
    while still converging the bundled demo well inside 200 steps.
    """

    group_size: int = 16
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 0.05
    std_floor: float = 1e-6
    seed: int = 0
    n_steps: int = 200

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_beta < 0 or self.std_floor < 0:
            raise ValueError("kl_beta and std_floor must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")


@dataclass
class RolloutGroup:
    """Rewards (and standardized advantages) for one query's G rollouts."""

    query_id: str
    rewards: List[float]
    advantages: Optional[List[float]] = None

    def __post_init__(self) -> None:
        if len(self.rewards) < 2:
            raise ValueError("a rollout group needs at least 2 rewards")
        if self.advantages is not None and len(self.advantages) != len(self.rewards):
            raise ValueError("advantages must match rewards in length")


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-6) -> List[float]:
    """Standardize rewards to zero mean and unit population std.

    Degenerate groups (population std below ``std_floor``) get all-zero
    advantages instead of dividing by zero.  Groups of fewer than two
    rollouts have no relative signal and are rejected.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("advantages need a group of at least 2 rewards")
    std = float(r.std())
    if std < std_floor:
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


def clipped_term(ratio: float, advantage: float, epsilon: float) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) for one rollout."""
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """Exact categorical KL(p || q) with the 0*ln(0) := 0 convention.

    Raises ValueError when q lacks support somewhere p is positive (the
    divergence would be infinite).
    """
    p_arr = np.asarray(p, dtype=float)
    q_arr = np.asarray(q, dtype=float)
    if p_arr.shape != q_arr.shape:
        raise ValueError("distributions must have the same length")
    mask = p_arr > 0
    if np.any(q_arr[mask] <= 0):
        raise ValueError("support violation: KL(p || q) is infinite")
    return float(np.sum(p_arr[mask] * np.log(p_arr[mask] / q_arr[mask])))


class TabularPolicy:
    """Softmax policy over each query's finite answer set, stored as logits."""

    def __init__(self, logits: Dict[str, np.ndarray]):
        self.logits = {qid: np.asarray(l, dtype=float).copy() for qid, l in logits.items()}

    @classmethod
    def uniform(cls, option_counts: Dict[str, int]) -> "TabularPolicy":
        return cls({qid: np.zeros(n) for qid, n in option_counts.items()})

    @classmethod
    def from_probs(cls, probs: Dict[str, Sequence[float]]) -> "TabularPolicy":
        return cls({qid: np.log(np.asarray(p, dtype=float)) for qid, p in probs.items()})

    def probs(self, query_id: str) -> np.ndarray:
        z = self.logits[query_id]
        e = np.exp(z - z.max())
        return e / e.sum()

    def entropy(self, query_id: str) -> float:
        p = self.probs(query_id)
        return float(-np.sum(p * np.log(p)))

    def sample(self, query_id: str, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(len(self.logits[query_id]), size=size, p=self.probs(query_id))

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits)


def grpo_objective(
    group: RolloutGroup,
    actions: Sequence[int],
    policy: TabularPolicy,
    old_policy: TabularPolicy,
    ref_policy: TabularPolicy,
    config: GrpoConfig,
) -> float:
    """Clipped surrogate objective with KL penalty for one rollout group.

    Episodes are single-step, so the per-rollout token average reduces to
    the one sequence-level term.
    """
    if group.advantages is None:
        raise ValueError("rollout group has no advantages; standardize first")
    if len(actions) != len(group.advantages):
        raise ValueError("one action per advantage required")
    qid = group.query_id
    p = policy.probs(qid)
    p_old = old_policy.probs(qid)
    surrogate = 0.0
    for action, advantage in zip(actions, group.advantages):
        if p_old[action] <= 0:
            raise ValueError(f"old policy has zero mass on sampled action {action}")
        surrogate += clipped_term(p[action] / p_old[action], advantage, config.clip_epsilon)
    surrogate /= len(actions)
    return surrogate - config.kl_beta * kl_divergence(p, ref_policy.probs(qid))


def grpo_objective_gradient(
    group: RolloutGroup,
    actions: Sequence[int],
    policy: TabularPolicy,
    old_policy: TabularPolicy,
    ref_policy: TabularPolicy,
    config: GrpoConfig,
) -> np.ndarray:
    """Analytic gradient of :func:`grpo_objective` w.r.t. the query's logits.

    The clipped term contributes A_i * d(ratio)/d(logits) while the ratio
    is on the unclipped side of the min, and zero once the clip saturates
    (for A > 0 beyond 1+eps, for A < 0 below 1-eps).  The KL term uses
    d KL / d z_k = p_k * (ln(p_k / ref_k) - KL).
    """
    if group.advantages is None:
        raise ValueError("rollout group has no advantages; standardize first")
    qid = group.query_id
    p = policy.probs(qid)
    p_old = old_policy.probs(qid)
    p_ref = ref_policy.probs(qid)
    grad = np.zeros_like(p)
    n_rollouts = len(actions)
    for action, advantage in zip(actions, group.advantages):
        ratio = p[action] / p_old[action]
        if advantage > 0:
            active = ratio < 1.0 + config.clip_epsilon
        elif advantage < 0:
            active = ratio > 1.0 - config.clip_epsilon
        else:
            active = False
        if not active:
            continue
        # d ratio / d z = ratio * (e_action - p)
        coeff = advantage * ratio / n_rollouts
        grad[action] += coeff
        grad -= coeff * p
    if config.kl_beta > 0:
        kl = kl_divergence(p, p_ref)
        grad -= config.kl_beta * p * (np.log(p / p_ref) - kl)
    return grad


# ---------------------------------------------------------------------------
# Toy tabular RLVR loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyQuery:
    """One toy task: a finite answer set scored against a ground truth."""

    query_id: str
    options: Tuple[str, ...]
    ground_truth: GroundTruth


@dataclass(frozen=True)
class TraceStep:
    step: int
    mean_reward: float
    objective: float
    kl_to_ref: float
    entropy: float


@dataclass
class TrainingTrace:
    """Per-step training record, serializable to JSON lines."""

    steps: List[TraceStep] = field(default_factory=list)

    @property
    def final_mean_reward(self) -> float:
        return self.steps[-1].mean_reward

    def write_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps(vars(s), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: Union[str, Path]) -> "TrainingTrace":
        steps = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    steps.append(TraceStep(**json.loads(line)))
        return cls(steps)


# The toy scores pure answer accuracy.  Advantages are invariant to the
# production (0.1, 0.9) blend because it is an affine map of accuracy for
# always-well-formatted rollouts, and accuracy weighting keeps the traced
# mean reward equal to answer accuracy (0.25 for 4 uniform options).
_TOY_WEIGHTS = RewardWeights(w_format=0.0, w_acc=1.0)


def _render_output(option: str, spec: FormatSpec) -> str:
    return (
        f"{spec.reasoning_open_tag}pick the best option{spec.reasoning_close_tag}"
        f"{spec.answer_open_tag}{option}{spec.answer_close_tag}"
    )


def _option_rewards(query: ToyQuery, spec: FormatSpec) -> np.ndarray:
    return np.array(
        [
            total_reward(_render_output(opt, spec), query.ground_truth, spec, _TOY_WEIGHTS).total
            for opt in query.options
        ]
    )


def demo_env() -> List[ToyQuery]:
    """Bundled single-query environment: 4 options, one correct answer."""
    return [
        ToyQuery(
            query_id="demo-mcq",
            options=("A", "B", "C", "D"),
            ground_truth=GroundTruth(TaskKind.MULTIPLE_CHOICE, "C"),
        )
    ]


def train_toy(
    env_spec: Sequence[ToyQuery],
    config: GrpoConfig,
    spec: FormatSpec = DEFAULT_FORMAT_SPEC,
) -> TrainingTrace:
    """Run the full sample / score / standardize / ascend loop on a toy env.

    Each step refreshes the old policy from the current one, samples G
    rollouts per query under it, scores them with the rule-based reward,
    and takes one analytic-gradient ascent step in logit space.  The
    traced mean reward is the exact expectation of the pre-update policy
    (computable in the tabular setting), so a zero learning rate yields a
    perfectly constant trace.  Fully deterministic for a fixed seed.
    """
    if not env_spec:
        raise ValueError("environment has no queries")
    option_rewards: Dict[str, np.ndarray] = {}
    for query in env_spec:
        if len(query.options) < 2:
            raise ValueError(f"query {query.query_id!r} needs at least 2 options")
        rewards = _option_rewards(query, spec)
        if int(np.sum(rewards == 1.0)) != 1:
            raise ValueError(
                f"query {query.query_id!r} must have exactly one option scoring 1"
            )
        option_rewards[query.query_id] = rewards

    rng = np.random.default_rng(config.seed)
    policy = TabularPolicy.uniform({q.query_id: len(q.options) for q in env_spec})
    ref_policy = policy.copy()
    trace = TrainingTrace()

    for step in range(config.n_steps):
        old_policy = policy.copy()
        expected = [
            float(old_policy.probs(q.query_id) @ option_rewards[q.query_id])
            for q in env_spec
        ]
        objectives = []
        for query in env_spec:
            qid = query.query_id
            actions = old_policy.sample(qid, rng, config.group_size)
            rewards = [float(option_rewards[qid][a]) for a in actions]
            group = RolloutGroup(
                qid, rewards, group_advantages(rewards, config.std_floor)
            )
            grad = grpo_objective_gradient(
                group, actions, policy, old_policy, ref_policy, config
            )
            policy.logits[qid] = policy.logits[qid] + config.learning_rate * grad
            objectives.append(
                grpo_objective(group, actions, policy, old_policy, ref_policy, config)
            )
        trace.steps.append(
            TraceStep(
                step=step,
                mean_reward=float(np.mean(expected)),
                objective=float(np.mean(objectives)),
                kl_to_ref=float(
                    np.mean(
                        [
                            kl_divergence(
                                policy.probs(q.query_id), ref_policy.probs(q.query_id)
                            )
                            for q in env_spec
                        ]
                    )
                ),
                entropy=float(np.mean([policy.entropy(q.query_id) for q in env_spec])),
            )
        )
    return trace
