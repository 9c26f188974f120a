"""Group-relative clipped policy objective with per-token KL regularization.

Everything here works on plain per-token log-probabilities, so the same
code serves replayed dumps and the tabular toy policy.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GroupSample",
    "GrpoConfig",
    "GrpoReport",
    "group_advantages",
    "token_kl",
    "grpo_objective",
    "load_groups",
    "dump_groups",
]


@dataclass(frozen=True)
class GroupSample:
    token_logp_new: np.ndarray
    token_logp_old: np.ndarray
    token_logp_ref: np.ndarray
    reward: float

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float) for k in ("token_logp_new", "token_logp_old", "token_logp_ref")]
        if any(a.ndim != 1 for a in arrs):
            raise ValueError("log-probability sequences must be 1-d")
        n = len(arrs[0])
        if n == 0 or any(len(a) != n for a in arrs):
            raise ValueError(f"log-probability sequences must share a positive length, got {[len(a) for a in arrs]}")
        if any(np.any(a > 1e-12) for a in arrs):
            raise ValueError("log-probabilities must be <= 0")
        for k, a in zip(("token_logp_new", "token_logp_old", "token_logp_ref"), arrs):
            object.__setattr__(self, k, a)
        object.__setattr__(self, "reward", float(self.reward))

    def __len__(self) -> int:
        return len(self.token_logp_new)


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    std_floor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")


@dataclass
class GrpoReport:
    objective: float
    per_sample_advantage: list[float]
    mean_ratio: float
    mean_kl: float
    clip_fraction: float
    surrogate: float = 0.0
    # d objective / d token_logp_new, one array per sample
    grad_logp_new: list[np.ndarray] = field(default_factory=list, repr=False)


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Standardize rewards within a group (population std).

    Groups whose std falls below ``std_floor`` get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("group too small: need at least 2 rewards")
    centered = r - r.mean()
    std = r.std()
    if std < std_floor:
        return np.zeros_like(r)
    return centered / std


def token_kl(logp_new, logp_ref):
    """k3 estimator ``exp(d) - d - 1`` with ``d = logp_ref - logp_new``; never negative."""
    d = np.subtract(logp_ref, logp_new)
    out = np.expm1(d) - d
    return np.maximum(out, 0.0) if isinstance(out, np.ndarray) else max(float(out), 0.0)


def grpo_objective(group: Sequence[GroupSample], cfg: GrpoConfig | None = None) -> GrpoReport:
    """Evaluate the clipped group objective and its gradient w.r.t. new log-probs.

    Token terms are averaged within each sample, then across samples.
    """
    cfg = cfg or GrpoConfig()
    if len(group) < 2:
        raise ValueError("group too small: need at least 2 samples")
    adv = group_advantages([s.reward for s in group], cfg.std_floor)
    lo, hi = 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon

    total = surrogate_total = 0.0
    ratios, kls, grads = [], [], []
    n_clipped = n_tokens = 0
    S = len(group)
    for s, a in zip(group, adv):
        psi = np.exp(s.token_logp_new - s.token_logp_old)
        unclipped = psi * a
        clipped = np.clip(psi, lo, hi) * a
        surr = np.minimum(unclipped, clipped)
        took_clip = clipped < unclipped
        d = s.token_logp_ref - s.token_logp_new
        kl = token_kl(s.token_logp_new, s.token_logp_ref)
        n = len(s)
        total += float(np.mean(surr - cfg.kl_beta * kl))
        surrogate_total += float(np.mean(surr))
        # d/dlogp_new of psi*A is psi*A; the clipped branch is flat when it binds
        g = np.where(took_clip, 0.0, unclipped) - cfg.kl_beta * (-np.expm1(d))
        grads.append(g / (n * S))
        ratios.append(psi)
        kls.append(kl)
        n_clipped += int(took_clip.sum())
        n_tokens += n
    return GrpoReport(
        objective=total / S,
        per_sample_advantage=[float(x) for x in adv],
        mean_ratio=float(np.mean(np.concatenate(ratios))),
        mean_kl=float(np.mean(np.concatenate(kls))),
        clip_fraction=n_clipped / n_tokens,
        surrogate=surrogate_total / S,
        grad_logp_new=grads,
    )


def load_groups(source) -> list[GroupSample]:
    """Read a group dump: JSONL with ``reward``, ``logp_new``, ``logp_old``, ``logp_ref``."""
    owned = isinstance(source, (str, os.PathLike))
    fh = open(source, encoding="utf-8") if owned else source
    try:
        rows = [json.loads(line) for line in fh if line.strip()]
    finally:
        if owned:
            fh.close()
    return [GroupSample(r["logp_new"], r["logp_old"], r["logp_ref"], r["reward"]) for r in rows]


def dump_groups(group: Iterable[GroupSample], dest) -> None:
    owned = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8") if owned else dest
    try:
        for s in group:
            fh.write(
                json.dumps(
                    {
                        "reward": s.reward,
                        "logp_new": s.token_logp_new.tolist(),
                        "logp_old": s.token_logp_old.tolist(),
                        "logp_ref": s.token_logp_ref.tolist(),
                    }
                )
                + "\n"
            )
    finally:
        if owned:
            fh.close()
