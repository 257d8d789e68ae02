"""Layered configuration: flags > environment > config file > defaults.

The config file is JSON with the same keys as :data:`DEFAULTS`; environment
variables use the ``RLVRKIT_`` prefix with upper-cased key names.  Every
effective value is still validated by its owning module's type before use;
this module only merges and coerces.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Optional, Union

ENV_PREFIX = "RLVRKIT_"

DEFAULTS: Dict[str, object] = {
    # randomness
    "seed": 0,
    # reward weighting and format tags
    "w_format": 0.1,
    "w_acc": 0.9,
    "reasoning_open_tag": "<think>",
    "reasoning_close_tag": "</think>",
    "answer_open_tag": "<answer>",
    "answer_close_tag": "</answer>",
    "require_reasoning": True,
    "require_answer": True,
    "math_rel_tol": 1e-6,
    "string_match_threshold": 1.0,
    "grounding_threshold": 0.5,
    # forge
    "n_candidates": 10,
    "min_pass_plain": 6,
    "judge_retries": 2,
    "generator_endpoint": None,
    "judge_endpoint": None,
    "generator_model": "Qwen2.5-VL-32B-Instruct",
    "judge_model": "Qwen2.5-VL-72B-Instruct",
    "temperature": 1.0,
    "max_tokens": 2048,
    "judge_sees_images": True,
    # GRPO toy loop
    "group_size": 16,
    "clip_epsilon": 0.2,
    "kl_beta": 0.01,
    "learning_rate": 0.05,
    "std_floor": 1e-6,
    "steps": 200,
    # transport
    "timeout": 60.0,
    "max_retries": 3,
    "backoff_base": 0.5,
    "max_concurrency": 4,
    # service
    "bind": "127.0.0.1:8000",
    "batch_cap": 1024,
    "payload_cap": 32 * 1024 * 1024,
    # evaluation
    "endpoint": None,
    "model": "default",
}

_TRUTHY = {"1", "true", "yes", "on"}
_FALSY = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in _TRUTHY:
            return True
        if low in _FALSY:
            return False
        raise ValueError(f"cannot parse boolean for {key!r}: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve_config(
    config_file: Optional[Union[str, Path]] = None,
    flag_overrides: Optional[Dict[str, object]] = None,
) -> Dict[str, object]:
    """Merge defaults, config file, environment, and explicit flag values."""
    merged = dict(DEFAULTS)
    if config_file is not None:
        with open(config_file, "r", encoding="utf-8") as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ValueError("config file must contain a JSON object")
        unknown = sorted(set(file_values) - set(DEFAULTS))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        merged.update(file_values)
    for key in DEFAULTS:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            merged[key] = _coerce(key, raw)
    if flag_overrides:
        for key, value in flag_overrides.items():
            if value is not None:
                merged[key] = value
    return merged
