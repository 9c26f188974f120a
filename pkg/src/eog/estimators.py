"""scikit-learn style wrappers so the pipeline pieces compose with Pipeline/clone.

``X`` is always a sequence of :class:`TaskInstance` (or task dicts); the
graph is a constructor parameter or supplied at ``fit``.
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .kg import KnowledgeGraph, TaskInstance, task_from_dict
from .pathfind import SearchConfig, VerificationCache, build_gold_paths
from .rewards import RewardConfig, score_text
from .toysim import SyntheticTaskFamily, ToyPolicy, TrainSchedule, evaluate_policy, rollout, train

__all__ = [
    "check_tasks",
    "check_graph",
    "check_texts",
    "GoldPathBuilder",
    "RewardScorer",
    "ToyPolicyTrainer",
]


def check_tasks(X) -> list[TaskInstance]:
    """Accept TaskInstances or task dicts; reject empty input."""
    if isinstance(X, (TaskInstance, dict)):
        X = [X]
    tasks = [x if isinstance(x, TaskInstance) else task_from_dict(x) for x in X]
    if not tasks:
        raise ValueError("expected at least one task, got 0")
    return tasks


def check_graph(graph) -> KnowledgeGraph:
    if isinstance(graph, KnowledgeGraph):
        return graph
    if graph is None:
        raise ValueError("a KnowledgeGraph is required")
    return KnowledgeGraph(graph)


def check_texts(texts, n: int) -> list[str]:
    if isinstance(texts, str):
        texts = [texts]
    texts = [str(t) for t in texts]
    if len(texts) != n:
        raise ValueError(f"got {len(texts)} texts for {n} tasks")
    return texts


class GoldPathBuilder(TransformerMixin, BaseEstimator):
    """Search-and-Verify as a transformer: tasks in, tasks with gold paths out."""

    def __init__(self, graph=None, max_hops=4, traverse_inverse=False, max_paths=256, verifier=None, force=False, max_workers=1):
        self.graph = graph
        self.max_hops = max_hops
        self.traverse_inverse = traverse_inverse
        self.max_paths = max_paths
        self.verifier = verifier
        self.force = force
        self.max_workers = max_workers

    def fit(self, X=None, y=None):
        self.graph_ = check_graph(self.graph)
        self.search_config_ = SearchConfig(self.max_hops, self.traverse_inverse, self.max_paths)
        self.cache_ = VerificationCache()
        return self

    def transform(self, X) -> list[TaskInstance]:
        check_is_fitted(self, "graph_")
        return [
            build_gold_paths(t, self.graph_, self.search_config_, self.verifier, force=self.force, cache=self.cache_, max_workers=self.max_workers)
            for t in check_tasks(X)
        ]


class RewardScorer(BaseEstimator):
    """Stateless scorer: ``transform(tasks, texts)`` gives an (n, 3) array of
    outcome, path and joint rewards; ``breakdowns`` returns the full records.
    """

    def __init__(self, alpha=0.25, phase="joint", overlong_threshold=3000, overlong_penalty_per_token=0.001, overlong_penalty_cap=0.5):
        self.alpha = alpha
        self.phase = phase
        self.overlong_threshold = overlong_threshold
        self.overlong_penalty_per_token = overlong_penalty_per_token
        self.overlong_penalty_cap = overlong_penalty_cap

    def _config(self) -> RewardConfig:
        return RewardConfig(**{f.name: getattr(self, f.name) for f in fields(RewardConfig)})

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def breakdowns(self, X, texts):
        tasks = check_tasks(X)
        cfg = getattr(self, "config_", None) or self._config()
        return [score_text(t, task, cfg) for task, t in zip(tasks, check_texts(texts, len(tasks)))]

    def transform(self, X, texts):
        return np.array([[b.r_outcome, b.r_path, b.r_joint] for b in self.breakdowns(X, texts)]).reshape(-1, 3)

    def fit_transform(self, X, texts):
        return self.fit(X).transform(X, texts)


class ToyPolicyTrainer(BaseEstimator):
    """Two-phase group-relative training of a tabular walk policy.

    ``fit(tasks, graph=g)`` trains on given tasks; ``fit(None)`` generates a
    synthetic family from ``family``. ``predict`` returns greedy answers.
    """

    def __init__(
        self,
        phase1_steps=300,
        phase2_steps=300,
        group_size=6,
        learning_rate=1.5,
        alpha=0.25,
        clip_epsilon=0.2,
        kl_beta=0.0,
        inner_epochs=1,
        temperature=1.0,
        sft_steps=0,
        sft_fraction=0.0,
        sft_learning_rate=1.0,
        eval_samples=16,
        seed=0,
        family=None,
    ):
        self.phase1_steps = phase1_steps
        self.phase2_steps = phase2_steps
        self.group_size = group_size
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.clip_epsilon = clip_epsilon
        self.kl_beta = kl_beta
        self.inner_epochs = inner_epochs
        self.temperature = temperature
        self.sft_steps = sft_steps
        self.sft_fraction = sft_fraction
        self.sft_learning_rate = sft_learning_rate
        self.eval_samples = eval_samples
        self.seed = seed
        self.family = family

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(**{f.name: getattr(self, f.name) for f in fields(TrainSchedule)})

    def fit(self, X=None, y=None, graph=None):
        family = self.family or SyntheticTaskFamily(seed=self.seed)
        if X is None:
            report = train(self.schedule(), family)
        else:
            report = train(self.schedule(), family, graph=check_graph(graph), tasks=check_tasks(X))
        self.report_ = report
        self.policy_: ToyPolicy = report.policy
        self.graph_ = report.policy.graph
        return self

    def predict(self, X) -> list[frozenset[str]]:
        check_is_fitted(self, "policy_")
        return [rollout(self.policy_, t, self.graph_, greedy=True).trace.predicted for t in check_tasks(X)]

    def score(self, X, y=None) -> float:
        """Sampled mean outcome reward of the fitted policy."""
        check_is_fitted(self, "policy_")
        return evaluate_policy(self.policy_, check_tasks(X), self.graph_, self.eval_samples, self.seed)["mean_r_outcome"]
