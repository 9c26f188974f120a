import math

import numpy as np
import pytest

from eog.grpo import GrpoConfig, group_advantages
from eog.kg import dumps_tasks
from eog.rewards import RewardConfig, joint_reward
from eog.toysim import (
    STOP,
    SyntheticTaskFamily,
    ToyPolicy,
    TrainSchedule,
    demonstration,
    generate_family,
    rollout,
    sft_nll,
    step_objective,
    train,
)

from oracles import all_simple_paths

SMALL = SyntheticTaskFamily(seed=3, n_entities=20, n_relations=4, edge_density=0.05, gold_hops=2, distractor_branching=2, n_tasks=4)


def test_family_deterministic():
    a = generate_family(SyntheticTaskFamily(seed=7))
    b = generate_family(SyntheticTaskFamily(seed=7))
    assert dumps_tasks(a[1]) == dumps_tasks(b[1])
    assert a[0] == b[0]


def test_family_size():
    g, tasks = generate_family(SyntheticTaskFamily(seed=1, n_entities=200, n_tasks=50, edge_density=0.005))
    assert len(tasks) == 50
    assert all(len(t.gold_paths) >= 1 for t in tasks)


@pytest.mark.parametrize("seed", range(5))
def test_planted_paths_found_by_oracle(seed):
    g, tasks = generate_family(SyntheticTaskFamily(seed=seed))
    edges = [(t.subject, t.relation, t.object) for t in g.triples]
    for task in tasks:
        p = task.gold_paths[0]
        assert len(p) == 2
        found = all_simple_paths(edges, task.topic_entities, task.gold_answers, 2, False)
        key = (p.start, tuple((t.subject, t.relation, t.object, False) for t in p.steps))
        assert key in found
        # nothing shorter than the planted route
        assert not all_simple_paths(edges, task.topic_entities, task.gold_answers, 1, False)


def test_infeasible_family():
    with pytest.raises(ValueError, match="infeasible"):
        generate_family(SyntheticTaskFamily(n_entities=10, n_tasks=5))
    with pytest.raises(ValueError):
        SyntheticTaskFamily(gold_hops=5)


def test_policy_rows_sum_to_one():
    g, _ = generate_family(SMALL)
    rng = np.random.default_rng(0)
    pol = ToyPolicy(g, 0.7, rng.normal(0, 3, ToyPolicy(g).n_params))
    for e in g.entities:
        assert abs(pol.probs(e).sum() - 1) < 1e-9
        assert pol.options[e][-1] == STOP


def _peaked(policy, moves):
    theta = policy.theta.copy()
    for e, opt in moves:
        theta[policy.slices[e]] = -50.0
        theta[policy.slices[e].start + policy.option_index(e, opt)] = 50.0
    return policy.copy(theta)


def test_optimal_policy_scores_one():
    g, tasks = generate_family(SMALL)
    task = tasks[0]
    pol = _peaked(ToyPolicy(g), demonstration(ToyPolicy(g), task.gold_paths[0]))
    r = rollout(pol, task, g, seed=5)
    b = joint_reward(r.trace, task, RewardConfig())
    assert b.r_outcome == 1.0
    assert b.r_path == 1.0
    assert r.trace.raw.startswith("<think> visiting (")


def test_stop_policy_answers_topic():
    g, tasks = generate_family(SMALL)
    task = tasks[1]
    topic = task.topic_entities[0]
    pol = _peaked(ToyPolicy(g), [(topic, STOP)])
    r = rollout(pol, task, g, seed=0)
    assert r.trace.predicted == {topic}
    assert r.walked == []
    assert joint_reward(r.trace, task).r_outcome == 0.0


def test_rollout_logp_recomputed_from_logits():
    g, tasks = generate_family(SMALL)
    rng = np.random.default_rng(11)
    pol = ToyPolicy(g, 1.3, rng.normal(0, 1, ToyPolicy(g).n_params))
    table = pol.logits
    for seed in range(20):
        r = rollout(pol, tasks[seed % 4], g, seed=seed)
        total = 0.0
        for e, i in r.actions:
            zs = [table[(e, o)] / 1.3 for o in pol.options[e]]
            total += math.log(math.exp(zs[i]) / sum(math.exp(z) for z in zs))
        assert r.token_logp.sum() == pytest.approx(total, abs=1e-10)
        assert len(r.walked) <= 4


def test_rollout_deterministic_per_seed():
    g, tasks = generate_family(SMALL)
    pol = ToyPolicy(g)
    assert rollout(pol, tasks[0], g, seed=9).trace.raw == rollout(pol, tasks[0], g, seed=9).trace.raw


def test_sft_uniform_four_options():
    from eog.kg import KnowledgeGraph

    g = KnowledgeGraph([("a", "r", "b"), ("a", "r", "c"), ("a", "s", "d")])
    pol = ToyPolicy(g)
    assert len(pol.options["a"]) == 4
    assert sft_nll(pol, [("a", ("r", "b"))]) == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ValueError, match="illegal"):
        sft_nll(pol, [("b", ("r", "a"))])


def test_sft_deterministic_policy_nll_near_zero():
    g, tasks = generate_family(SMALL)
    demo = demonstration(ToyPolicy(g), tasks[0].gold_paths[0])
    pol = _peaked(ToyPolicy(g), demo)
    assert sft_nll(pol, demo) < 1e-12


def test_sft_gradient_finite_differences():
    g, tasks = generate_family(SMALL)
    rng = np.random.default_rng(4)
    pol = ToyPolicy(g, 0.8)
    demo = demonstration(pol, tasks[2].gold_paths[0])
    for _ in range(10):
        theta = rng.normal(0, 1, pol.n_params)
        _, grad = sft_nll(pol, demo, theta, return_grad=True)
        fd = np.zeros_like(theta)
        h = 1e-5
        for k in range(len(theta)):
            e = np.zeros_like(theta)
            e[k] = h
            fd[k] = (sft_nll(pol, demo, theta + e) - sft_nll(pol, demo, theta - e)) / (2 * h)
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


def _groups(pol, tasks, g, S, seed, rcfg):
    out = []
    for ti, task in enumerate(tasks):
        rolls = [rollout(pol, task, g, seed=[seed, ti, s]) for s in range(S)]
        out.append((rolls, [joint_reward(r.trace, task, rcfg).r_joint for r in rolls]))
    return out


def test_step_gradient_finite_differences():
    g, tasks = generate_family(SMALL)
    assert len(g.entities) <= 20
    rng = np.random.default_rng(0)
    base = ToyPolicy(g)
    cfg = GrpoConfig(clip_epsilon=0.2, kl_beta=0.1)
    checked = 0
    for point in range(25):
        old = base.copy(rng.normal(0, 1, base.n_params))
        groups = _groups(old, tasks, g, 6, point, RewardConfig(alpha=0.25))
        ref = rng.normal(0, 1, base.n_params)
        theta = old.theta + rng.normal(0, 0.05, base.n_params)
        _, grad, _ = step_objective(old, theta, groups, ref, cfg)
        h = 1e-6
        fd = np.zeros_like(theta)
        for k in range(len(theta)):
            e = np.zeros_like(theta)
            e[k] = h
            fd[k] = (step_objective(old, theta + e, groups, ref, cfg)[0] - step_objective(old, theta - e, groups, ref, cfg)[0]) / (2 * h)
        if np.linalg.norm(fd) == 0:
            continue
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4
        checked += 1
    assert checked >= 20


def test_group_advantages_mean_zero_during_training():
    g, tasks = generate_family(SMALL)
    pol = ToyPolicy(g)
    groups = _groups(pol, tasks, g, 6, 0, RewardConfig(phase="outcome_only"))
    _, _, reports = step_objective(pol, pol.theta, groups, pol.theta, GrpoConfig())
    for rep in reports:
        assert abs(sum(rep.per_sample_advantage)) < 1e-9


def test_zero_steps_echo_initial():
    rep = train(TrainSchedule(phase1_steps=0, phase2_steps=0, eval_samples=4), SMALL)
    assert rep.history == []
    assert rep.final == rep.initial
    rows = rep.to_csv().splitlines()
    assert rows[0] == "step,phase,mean_r_outcome,mean_r_path,mean_r_joint,coverage,efficiency,clip_fraction,mean_kl"
    assert len(rows) == 3


def test_training_deterministic_and_phased():
    sched = TrainSchedule(phase1_steps=5, phase2_steps=5, eval_samples=4, seed=2)
    a = train(sched, SMALL)
    b = train(sched, SMALL)
    assert a.to_csv() == b.to_csv()
    assert [h["phase"] for h in a.history] == ["outcome_only"] * 5 + ["joint"] * 5
    for h in a.history[:5]:
        assert h["mean_r_joint"] == h["mean_r_outcome"]


def test_sft_warm_start_reduces_loss():
    sched = TrainSchedule(phase1_steps=0, phase2_steps=0, sft_steps=20, sft_fraction=0.5, eval_samples=4)
    rep = train(sched, SMALL)
    assert rep.sft_loss[-1] < rep.sft_loss[0]


@pytest.mark.slow
def test_default_training_improves_outcome():
    rep = train(TrainSchedule(seed=0), SyntheticTaskFamily(seed=0))
    assert rep.final["mean_r_outcome"] - rep.initial["mean_r_outcome"] >= 0.4
