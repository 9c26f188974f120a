"""Desk-scale exploration loop: synthetic task families, a tabular softmax
walk policy, supervised warm start and two-phase group-relative training.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .evalkit import EvalRecord, exploration_metrics
from .grpo import GroupSample, GrpoConfig, grpo_objective
from .kg import KnowledgeGraph, ReasoningPath, TaskInstance, Triple
from .rewards import RewardConfig, joint_reward
from .trace import Trace, extract_mentioned_triples, parse_trace

__all__ = [
    "STOP",
    "SyntheticTaskFamily",
    "TrainSchedule",
    "ToyPolicy",
    "Rollout",
    "TrainReport",
    "generate_family",
    "rollout",
    "render_trace",
    "demonstration",
    "sft_nll",
    "sft_step",
    "step_objective",
    "evaluate_policy",
    "train",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

STOP = "STOP"
CSV_COLUMNS = [
    "step", "phase", "mean_r_outcome", "mean_r_path", "mean_r_joint",
    "coverage", "efficiency", "clip_fraction", "mean_kl",
]


@dataclass(frozen=True)
class SyntheticTaskFamily:
    seed: int = 0
    n_entities: int = 40
    n_relations: int = 8
    edge_density: float = 0.03
    gold_hops: int = 2
    distractor_branching: int = 3
    n_tasks: int = 8

    def __post_init__(self):
        if not 1 <= self.gold_hops <= 4:
            raise ValueError("gold_hops must lie in [1, 4]")
        if self.n_entities < 2 or self.n_relations < 1 or self.n_tasks < 1:
            raise ValueError("n_entities >= 2, n_relations >= 1 and n_tasks >= 1 required")
        if not 0 <= self.edge_density <= 1:
            raise ValueError("edge_density must lie in [0, 1]")
        if self.distractor_branching < 0:
            raise ValueError("distractor_branching must be >= 0")


@dataclass(frozen=True)
class TrainSchedule:
    phase1_steps: int = 300
    phase2_steps: int = 300
    group_size: int = 6
    learning_rate: float = 1.5
    alpha: float = 0.25
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    inner_epochs: int = 1
    temperature: float = 1.0
    sft_steps: int = 0
    sft_fraction: float = 0.0
    sft_learning_rate: float = 1.0
    eval_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if min(self.phase1_steps, self.phase2_steps, self.sft_steps) < 0:
            raise ValueError("step counts must be >= 0")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be > 0")
        if self.inner_epochs < 1 or self.eval_samples < 1:
            raise ValueError("inner_epochs and eval_samples must be >= 1")
        if not 0 <= self.sft_fraction <= 1:
            raise ValueError("sft_fraction must lie in [0, 1]")


def _names(prefix: str, n: int) -> list[str]:
    # equal-width ids, so no name is a substring of another
    width = len(str(n - 1))
    return [f"{prefix}_{i:0{width}d}" for i in range(n)]


def _shortest_hops(adj: dict[str, set[str]], src: str, dst: str, limit: int) -> int | None:
    seen = {src}
    frontier = deque([(src, 0)])
    while frontier:
        node, d = frontier.popleft()
        if node == dst:
            return d
        if d >= limit:
            continue
        for nxt in adj.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, d + 1))
    return None


def generate_family(cfg: SyntheticTaskFamily) -> tuple[KnowledgeGraph, list[TaskInstance]]:
    """Plant one vertex-disjoint gold path per task, then add distractors.

    Distractor and random edges are rejected whenever they would open a
    topic->answer route shorter than the planted one.
    """
    h = cfg.gold_hops
    need = cfg.n_tasks * (h + 1)
    if need > cfg.n_entities:
        raise ValueError(f"infeasible family: {cfg.n_tasks} tasks x {h + 1} path entities exceed {cfg.n_entities} entities")
    if cfg.distractor_branching and need == cfg.n_entities:
        raise ValueError("infeasible family: no entities left for distractors")
    rng = np.random.default_rng(cfg.seed)
    ents = _names("entity", cfg.n_entities)
    rels = _names("rel", cfg.n_relations)
    order = [ents[i] for i in rng.permutation(cfg.n_entities)]
    planted = [order[i * (h + 1):(i + 1) * (h + 1)] for i in range(cfg.n_tasks)]
    filler = order[need:]

    triples: set[Triple] = set()
    adj: dict[str, set[str]] = {}
    paths = []
    for nodes in planted:
        steps = []
        for a, b in zip(nodes, nodes[1:]):
            t = Triple(a, rels[rng.integers(cfg.n_relations)], b)
            triples.add(t)
            adj.setdefault(a, set()).add(b)
            steps.append(t)
        paths.append(ReasoningPath(tuple(steps), nodes[0], nodes[-1]))

    def try_add(s: str, r: str, o: str) -> bool:
        if s == o or o in adj.get(s, ()):
            return False
        adj.setdefault(s, set()).add(o)
        if any((_shortest_hops(adj, n[0], n[-1], h) or h) < h for n in planted):
            adj[s].discard(o)
            return False
        triples.add(Triple(s, r, o))
        return True

    for nodes in planted:
        for node in nodes[:-1]:
            added = attempts = 0
            while added < cfg.distractor_branching and attempts < 50 * (cfg.distractor_branching + 1):
                attempts += 1
                o = filler[rng.integers(len(filler))]
                added += try_add(node, rels[rng.integers(cfg.n_relations)], o)

    for s in ents:
        for o in ents:
            if s != o and rng.random() < cfg.edge_density:
                try_add(s, rels[rng.integers(cfg.n_relations)], o)

    g = KnowledgeGraph(triples)
    tasks = []
    for i, path in enumerate(paths):
        rel_words = " then ".join(t.relation for t in path.steps)
        tasks.append(
            TaskInstance(
                id=f"t{i:03d}",
                question=f"Starting from {path.start}, follow {rel_words}. Which entity is reached?",
                topic_entities=(path.start,),
                gold_answers=frozenset([path.end]),
                gold_paths=(path,),
                labels={"hops": str(h)},
            )
        )
    return g, tasks


class ToyPolicy:
    """Tabular softmax over (outgoing edge | STOP) at every entity.

    Parameters live in one flat vector ``theta``; ``slices[e]`` indexes the
    block of entity ``e`` whose options are ``options[e]`` (STOP last).
    """

    def __init__(self, g: KnowledgeGraph, temperature: float = 1.0, theta: np.ndarray | None = None):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.graph = g
        self.temperature = float(temperature)
        self.options: dict[str, list] = {}
        self.slices: dict[str, slice] = {}
        pos = 0
        for e in sorted(g.entities):
            opts = list(g.out_edges(e)) + [STOP]
            self.options[e] = opts
            self.slices[e] = slice(pos, pos + len(opts))
            pos += len(opts)
        self._index = {e: {o: i for i, o in enumerate(opts)} for e, opts in self.options.items()}
        if theta is None:
            theta = np.zeros(pos)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (pos,):
            raise ValueError(f"theta must have shape ({pos},)")
        self.theta = theta.copy()

    @property
    def n_params(self) -> int:
        return len(self.theta)

    def copy(self, theta: np.ndarray | None = None) -> "ToyPolicy":
        new = object.__new__(ToyPolicy)
        new.graph, new.temperature = self.graph, self.temperature
        new.options, new.slices, new._index = self.options, self.slices, self._index
        new.theta = (self.theta if theta is None else np.asarray(theta, dtype=float)).copy()
        return new

    @property
    def logits(self) -> dict[tuple[str, object], float]:
        return {(e, o): float(self.theta[self.slices[e]][i]) for e, opts in self.options.items() for i, o in enumerate(opts)}

    def option_index(self, entity: str, option) -> int:
        try:
            return self._index[entity][option if option == STOP else tuple(option)]
        except KeyError:
            raise ValueError(f"illegal action {option!r} at {entity!r}") from None

    def probs(self, entity: str, theta: np.ndarray | None = None) -> np.ndarray:
        z = (self.theta if theta is None else theta)[self.slices[entity]] / self.temperature
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def log_probs(self, entity: str, theta: np.ndarray | None = None) -> np.ndarray:
        z = (self.theta if theta is None else theta)[self.slices[entity]] / self.temperature
        m = z.max()
        return z - (m + math.log(np.exp(z - m).sum()))

    def sequence_logp(self, actions: Sequence[tuple[str, int]], theta: np.ndarray | None = None) -> np.ndarray:
        return np.array([self.log_probs(e, theta)[i] for e, i in actions])

    def grad_logp(self, actions: Sequence[tuple[str, int]], weights: Sequence[float], theta: np.ndarray | None = None) -> np.ndarray:
        """Gradient of ``sum_t weights[t] * logp(action_t)`` w.r.t. theta."""
        grad = np.zeros_like(self.theta)
        for (e, i), w in zip(actions, weights):
            if w == 0.0:
                continue
            sl = self.slices[e]
            p = self.probs(e, theta)
            g = -p
            g[i] += 1.0
            grad[sl] += w * g / self.temperature
        return grad

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "logits": [
                {"entity": e, "option": o if o == STOP else list(o), "logit": float(self.theta[self.slices[e]][i])}
                for e, opts in self.options.items()
                for i, o in enumerate(opts)
            ],
        }


class Rollout(NamedTuple):
    trace: Trace
    token_logp: np.ndarray
    actions: list  # (entity, option index)
    walked: list  # Triples in walk order


def render_trace(topic: str, walked: Sequence[Triple], final: str) -> str:
    body = " ".join(f"visiting {t}." for t in walked)
    return f"<think> {body} </think><answer>{json.dumps([final])}</answer>"


def _hop_cap(task: TaskInstance) -> int:
    hops = task.labels.get("hops")
    if hops is None:
        hops = max((len(p) for p in task.gold_paths), default=2)
    return int(hops) + 2


def rollout(policy: ToyPolicy, task: TaskInstance, g: KnowledgeGraph | None = None, seed=0, *, hop_cap: int | None = None, greedy: bool = False) -> Rollout:
    """Sample a walk from the first topic entity until STOP or the hop cap."""
    g = g or policy.graph
    cur = task.topic_entities[0]
    if cur not in policy.options:
        raise ValueError(f"topic entity {cur!r} not in graph")
    cap = hop_cap if hop_cap is not None else _hop_cap(task)
    rng = np.random.default_rng(seed)
    actions, logps, walked = [], [], []
    while len(walked) < cap:
        lp = policy.log_probs(cur)
        if greedy:
            i = int(np.argmax(lp))
        else:
            i = int(np.searchsorted(np.cumsum(np.exp(lp)), rng.random() * np.exp(lp).sum(), side="right"))
            i = min(i, len(lp) - 1)
        actions.append((cur, i))
        logps.append(float(lp[i]))
        opt = policy.options[cur][i]
        if opt == STOP:
            break
        rel, nxt = opt
        walked.append(Triple(cur, rel, nxt))
        cur = nxt
    text = render_trace(task.topic_entities[0], walked, cur)
    return Rollout(parse_trace(text), np.array(logps), actions, walked)


def demonstration(policy: ToyPolicy, path: ReasoningPath) -> list[tuple[str, object]]:
    """Action sequence (entity, option) that walks ``path`` and stops."""
    acts = [(t.subject, (t.relation, t.object)) for t in path.steps]
    return acts + [(path.end, STOP)]


def _resolve(policy: ToyPolicy, demo) -> list[tuple[str, int]]:
    return [(e, policy.option_index(e, o)) for e, o in demo]


def sft_nll(policy: ToyPolicy, demo, theta: np.ndarray | None = None, *, return_grad: bool = False):
    """Mean negative log-probability of a demonstrated action sequence."""
    acts = _resolve(policy, demo)
    if not acts:
        raise ValueError("empty demonstration")
    nll = -float(np.mean(policy.sequence_logp(acts, theta)))
    if not return_grad:
        return nll
    grad = -policy.grad_logp(acts, [1.0 / len(acts)] * len(acts), theta)
    return nll, grad


def sft_step(policy: ToyPolicy, demos: Sequence, lr: float) -> float:
    """One gradient-descent step on the dataset NLL (mean over demos)."""
    total, grad = 0.0, np.zeros_like(policy.theta)
    for d in demos:
        nll, g = sft_nll(policy, d, return_grad=True)
        total += nll
        grad += g
    policy.theta -= lr * grad / len(demos)
    return total / len(demos)


def step_objective(
    policy: ToyPolicy,
    theta: np.ndarray,
    groups: Sequence[tuple[Sequence[Rollout], Sequence[float]]],
    ref_theta: np.ndarray,
    cfg: GrpoConfig,
):
    """Mean group objective over tasks at parameters ``theta`` and its gradient.

    Each group is (rollouts sampled from the old policy, rewards); the
    rollouts' own log-probs serve as the old-policy terms.
    """
    obj = 0.0
    grad = np.zeros_like(theta)
    reports = []
    for rolls, rewards in groups:
        samples = [
            GroupSample(policy.sequence_logp(r.actions, theta), r.token_logp, policy.sequence_logp(r.actions, ref_theta), rw)
            for r, rw in zip(rolls, rewards)
        ]
        rep = grpo_objective(samples, cfg)
        obj += rep.objective
        for r, w in zip(rolls, rep.grad_logp_new):
            grad += policy.grad_logp(r.actions, w, theta)
        reports.append(rep)
    n = len(groups)
    return obj / n, grad / n, reports


def _records(rolls: Sequence[Rollout], tasks: Sequence[TaskInstance], g: KnowledgeGraph) -> list[EvalRecord]:
    cands = g.triples
    out = []
    for r, task in zip(rolls, tasks):
        gold = task.gold_triples()
        pred = extract_mentioned_triples(r.trace.think, cands)
        hit = int(bool(r.trace.predicted & task.gold_answers))
        out.append(EvalRecord(task.id, hit, float(hit), len(pred), len(pred & gold), len(gold)))
    return out


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def evaluate_policy(policy: ToyPolicy, tasks: Sequence[TaskInstance], g: KnowledgeGraph, n_samples: int = 16, seed: int = 0, reward_cfg: RewardConfig | None = None) -> dict:
    """Sampled evaluation: mean rewards, hit@1, coverage and efficiency."""
    reward_cfg = reward_cfg or RewardConfig(phase="joint")
    rolls, owners, rewards = [], [], []
    for ti, task in enumerate(tasks):
        for si in range(n_samples):
            r = rollout(policy, task, g, _seed(seed, 1, ti, si))
            rolls.append(r)
            owners.append(task)
            rewards.append(joint_reward(r.trace, task, reward_cfg))
    ex = exploration_metrics(_records(rolls, owners, g))
    return {
        "mean_r_outcome": float(np.mean([b.r_outcome for b in rewards])),
        "mean_r_path": float(np.mean([b.r_path for b in rewards])),
        "mean_r_joint": float(np.mean([b.r_joint for b in rewards])),
        "hit1": ex.hit1_mean,
        "coverage": ex.coverage,
        "efficiency": ex.efficiency,
    }


@dataclass
class TrainReport:
    schedule: TrainSchedule
    family: SyntheticTaskFamily
    initial: dict
    final: dict
    history: list[dict] = field(default_factory=list)
    policy: ToyPolicy | None = field(default=None, repr=False)
    sft_loss: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        n = len(self.history)
        first = {"step": 0, "phase": "eval_initial", **self.initial, "clip_fraction": None, "mean_kl": None}
        last = {"step": n, "phase": "eval_final", **self.final, "clip_fraction": None, "mean_kl": None}
        return [first, *self.history, last]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: _csv_value(row.get(k)) for k in CSV_COLUMNS})
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "schedule": asdict(self.schedule),
            "family": asdict(self.family),
            "initial": self.initial,
            "final": self.final,
            "n_steps": len(self.history),
        }


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def train(schedule: TrainSchedule, family: SyntheticTaskFamily, *, graph: KnowledgeGraph | None = None, tasks: Sequence[TaskInstance] | None = None) -> TrainReport:
    """Optional warm start, then outcome-only steps followed by joint-reward steps."""
    if graph is None or tasks is None:
        graph, tasks = generate_family(family)
    tasks = list(tasks)
    policy = ToyPolicy(graph, schedule.temperature)
    sft_loss = []
    if schedule.sft_steps and schedule.sft_fraction > 0:
        n_demo = max(1, int(round(schedule.sft_fraction * len(tasks))))
        pick = np.random.default_rng(_seed(schedule.seed, 2)).permutation(len(tasks))[:n_demo]
        demos = [demonstration(policy, tasks[i].gold_paths[0]) for i in sorted(pick) if tasks[i].gold_paths]
        for _ in range(schedule.sft_steps):
            sft_loss.append(sft_step(policy, demos, schedule.sft_learning_rate))
    ref_theta = policy.theta.copy()
    grpo_cfg = GrpoConfig(schedule.clip_epsilon, schedule.kl_beta)
    initial = evaluate_policy(policy, tasks, graph, schedule.eval_samples, schedule.seed)

    history = []
    total = schedule.phase1_steps + schedule.phase2_steps
    for step in range(total):
        phase = "outcome_only" if step < schedule.phase1_steps else "joint"
        rcfg = RewardConfig(alpha=schedule.alpha, phase=phase)
        groups, all_rolls, owners, breakdowns = [], [], [], []
        for ti, task in enumerate(tasks):
            rolls = [rollout(policy, task, graph, _seed(schedule.seed, 0, step, ti, si)) for si in range(schedule.group_size)]
            bds = [joint_reward(r.trace, task, rcfg) for r in rolls]
            groups.append((rolls, [b.r_joint for b in bds]))
            all_rolls.extend(rolls)
            owners.extend([task] * len(rolls))
            breakdowns.extend(bds)
        reports = []
        for _ in range(schedule.inner_epochs):
            _, grad, reports = step_objective(policy, policy.theta, groups, ref_theta, grpo_cfg)
            policy.theta += schedule.learning_rate * grad
        ex = exploration_metrics(_records(all_rolls, owners, graph))
        history.append(
            {
                "step": step + 1,
                "phase": phase,
                "mean_r_outcome": float(np.mean([b.r_outcome for b in breakdowns])),
                "mean_r_path": float(np.mean([b.r_path for b in breakdowns])),
                "mean_r_joint": float(np.mean([b.r_joint for b in breakdowns])),
                "coverage": ex.coverage,
                "efficiency": ex.efficiency,
                "clip_fraction": float(np.mean([r.clip_fraction for r in reports])),
                "mean_kl": float(np.mean([r.mean_kl for r in reports])),
            }
        )
    final = evaluate_policy(policy, tasks, graph, schedule.eval_samples, schedule.seed) if total else dict(initial)
    return TrainReport(schedule, family, initial, final, history, policy, sft_loss)
