"""Outcome, path and joint rewards for a parsed trace."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

from .kg import ReasoningPath, TaskInstance, normalize
from .trace import Trace, parse_trace

__all__ = [
    "RewardConfig",
    "RewardBreakdown",
    "f1_score",
    "outcome_reward",
    "path_reward",
    "length_penalty",
    "joint_reward",
    "score_text",
    "reward_record",
    "REWARD_KEYS",
]

PHASES = ("outcome_only", "joint")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.25
    overlong_threshold: int = 3000
    overlong_penalty_per_token: float = 0.001
    overlong_penalty_cap: float = 0.5
    phase: str = "joint"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.overlong_threshold < 0:
            raise ValueError("overlong_threshold must be >= 0")
        if self.overlong_penalty_per_token < 0 or self.overlong_penalty_cap < 0:
            raise ValueError("overlong penalty parameters must be >= 0")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def override(self, **changes) -> "RewardConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self


@dataclass(frozen=True)
class RewardBreakdown:
    r_outcome: float
    r_path: float
    r_joint: float
    length_penalty: float
    format_valid: bool
    precision: float
    recall: float
    matched_gold_triples: int
    total_gold_triples: int

    def to_dict(self) -> dict:
        return asdict(self)


def f1_score(predicted: Iterable[str], gold: Iterable[str]) -> tuple[float, float, float]:
    """Entity-level ``(f1, precision, recall)``; all zero when nothing is predicted."""
    pred, gold = set(predicted), set(gold)
    if not gold:
        raise ValueError("gold answer set must be non-empty")
    if not pred:
        return 0.0, 0.0, 0.0
    hit = len(pred & gold)
    precision = hit / len(pred)
    recall = hit / len(gold)
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def outcome_reward(trace: Trace, gold: Iterable[str]) -> tuple[float, float, float]:
    """Return ``(r_outcome, precision, recall)``.

    Malformed traces and empty answer sets score 0.
    """
    gold = {normalize(a) for a in gold}
    return f1_score(trace.predicted, gold)


def path_reward(trace: Trace, gold_paths: Sequence[ReasoningPath]) -> tuple[float, int, int]:
    """Return ``(r_path, matched, total)`` over the union of gold-path triples."""
    gold = {t for p in gold_paths for t in p.steps}
    total = len(gold)
    if not total or not trace.think:
        return 0.0, 0, total
    text = normalize(trace.think)
    matched = sum(
        1 for t in gold if t.subject in text and t.relation in text and t.object in text
    )
    return matched / total, matched, total


def length_penalty(token_count: int, cfg: RewardConfig) -> float:
    excess = max(0, token_count - cfg.overlong_threshold)
    amount = min(cfg.overlong_penalty_cap, cfg.overlong_penalty_per_token * excess)
    return -amount if amount > 0 else 0.0


def joint_reward(trace: Trace, task: TaskInstance, cfg: RewardConfig | None = None) -> RewardBreakdown:
    cfg = cfg or RewardConfig()
    r_out, pre, rec = outcome_reward(trace, task.gold_answers)
    r_path, matched, total = path_reward(trace, task.gold_paths)
    penalty = length_penalty(trace.token_count, cfg)
    r_joint = r_out + penalty
    if cfg.phase == "joint":
        r_joint = r_out + cfg.alpha * r_path + penalty
    return RewardBreakdown(
        r_outcome=r_out,
        r_path=r_path,
        r_joint=r_joint,
        length_penalty=penalty,
        format_valid=trace.format_valid,
        precision=pre,
        recall=rec,
        matched_gold_triples=matched,
        total_gold_triples=total,
    )


def score_text(text: str, task: TaskInstance, cfg: RewardConfig | None = None) -> RewardBreakdown:
    """Parse raw model output and score it; the path shared by CLI and service."""
    return joint_reward(parse_trace(text), task, cfg)


REWARD_KEYS = (
    "r_outcome", "r_path", "r_joint", "precision", "recall",
    "format_valid", "length_penalty", "matched_gold_triples", "total_gold_triples",
)


def reward_record(id: str, b: RewardBreakdown) -> dict:
    """Output row for reward JSONL files and service responses (fixed key order)."""
    return {"id": id, **{k: getattr(b, k) for k in REWARD_KEYS}}
