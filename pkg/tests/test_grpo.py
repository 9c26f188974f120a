import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eog.grpo import GroupSample, GrpoConfig, dump_groups, group_advantages, grpo_objective, load_groups, token_kl


def test_two_rewards():
    assert group_advantages([1, 0]).tolist() == [1.0, -1.0]


def test_zero_variance_guard():
    assert group_advantages([0.7, 0.7, 0.7]).tolist() == [0.0, 0.0, 0.0]


def test_three_rewards():
    # mean 0.5, population std sqrt(1/6)
    a = group_advantages([1.0, 0.5, 0.0])
    s = math.sqrt(1 / 6)
    assert a == pytest.approx([0.5 / s, 0.0, -0.5 / s], abs=1e-12)
    assert a[0] == pytest.approx(1.2247, abs=1e-4)


def test_group_too_small():
    with pytest.raises(ValueError, match="group too small"):
        group_advantages([1.0])


def test_token_kl_values():
    assert token_kl(-1.0, -1.0) == 0.0
    assert token_kl(-2.0, -2.0 + math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-12)
    assert token_kl(-2.0, -2.0 - math.log(2)) == pytest.approx(0.5 + math.log(2) - 1, abs=1e-12)
    assert token_kl(-2.0, -2.0 + math.log(2)) == pytest.approx(0.3069, abs=1e-4)
    assert token_kl(-2.0, -2.0 - math.log(2)) == pytest.approx(0.1931, abs=1e-4)


def sample(new, old=None, ref=None, reward=0.0):
    old = new if old is None else old
    ref = new if ref is None else ref
    return GroupSample(np.atleast_1d(new), np.atleast_1d(old), np.atleast_1d(ref), reward)


def test_identical_policies_give_zero():
    g = [sample([-0.5, -1.0], reward=1.0), sample([-0.2], reward=0.0)]
    rep = grpo_objective(g, GrpoConfig(kl_beta=0.7))
    assert rep.objective == 0.0
    assert rep.mean_kl == 0.0
    assert rep.clip_fraction == 0.0
    assert rep.mean_ratio == 1.0


def test_clip_positive_advantage():
    # rewards [1, 0] -> advantages [+1, -1]; sample 0 has psi = 1.5
    g = [sample(math.log(0.6), math.log(0.4), reward=1.0), sample(-1.0, reward=0.0)]
    rep = grpo_objective(g, GrpoConfig(clip_epsilon=0.2, kl_beta=0.0))
    assert rep.per_sample_advantage == [1.0, -1.0]
    # contributions: 1.2 (clipped) and -1.0, averaged over S=2
    assert rep.objective == pytest.approx((1.2 - 1.0) / 2, abs=1e-12)
    assert rep.clip_fraction == 0.5


def test_clip_negative_advantage():
    g = [sample(-1.0, reward=1.0), sample(math.log(0.2), math.log(0.4), reward=0.0)]
    rep = grpo_objective(g, GrpoConfig(clip_epsilon=0.2, kl_beta=0.0))
    # second sample: min(-0.5, -0.8) = -0.8
    assert rep.objective == pytest.approx((1.0 - 0.8) / 2, abs=1e-12)


def test_length_mismatch():
    with pytest.raises(ValueError):
        GroupSample([-1.0, -1.0], [-1.0], [-1.0, -1.0], 0.0)
    with pytest.raises(ValueError):
        GroupSample([0.5], [-1.0], [-1.0], 0.0)


def test_group_dump_round_trip():
    g = [sample([-0.1, -0.2], [-0.3, -0.1], [-0.5, -0.5], 1.0), sample([-1.0], reward=0.0)]
    buf = io.StringIO()
    dump_groups(g, buf)
    buf.seek(0)
    back = load_groups(buf)
    assert grpo_objective(back).objective == grpo_objective(g).objective


rewards = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=12)


@settings(max_examples=300, deadline=None)
@given(rewards, st.floats(-50, 50), st.floats(0.01, 100))
def test_advantage_invariants(r, shift, scale):
    a = group_advantages(r)
    assert abs(a.mean()) < 1e-9
    if np.std(r) >= 1e-6:
        assert abs(a.std() - 1.0) < 1e-9
        shifted = group_advantages([x * scale + shift for x in r])
        assert shifted == pytest.approx(a, abs=1e-6)


@settings(max_examples=300, deadline=None)
@given(st.floats(-20, 0), st.floats(-20, 0))
def test_kl_non_negative(a, b):
    k = token_kl(a, b)
    assert k >= 0
    if a == b:
        assert k == 0


def random_group(rng, S=4, beta=0.3):
    out = []
    for i in range(S):
        n = rng.integers(1, 5)
        old = -rng.uniform(0.05, 2.0, n)
        new = old + rng.normal(0, 0.3, n)
        new = np.minimum(new, -1e-3)
        ref = -rng.uniform(0.05, 2.0, n)
        out.append(sample(new, old, ref, rng.normal()))
    return out


def test_gradient_wrt_new_logp_matches_finite_differences():
    rng = np.random.default_rng(3)
    cfg = GrpoConfig(clip_epsilon=0.2, kl_beta=0.3)
    for _ in range(20):
        g = random_group(rng)
        rep = grpo_objective(g, cfg)
        h = 1e-6
        for i, s in enumerate(g):
            for t in range(len(s)):
                up = [x if j != i else sample(np.where(np.arange(len(x)) == t, x.token_logp_new + h, x.token_logp_new), x.token_logp_old, x.token_logp_ref, x.reward) for j, x in enumerate(g)]
                dn = [x if j != i else sample(np.where(np.arange(len(x)) == t, x.token_logp_new - h, x.token_logp_new), x.token_logp_old, x.token_logp_ref, x.reward) for j, x in enumerate(g)]
                fd = (grpo_objective(up, cfg).objective - grpo_objective(dn, cfg).objective) / (2 * h)
                assert rep.grad_logp_new[i][t] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_equal_rewards_zero_surrogate():
    rng = np.random.default_rng(0)
    g = [sample(s.token_logp_new, s.token_logp_old, s.token_logp_ref, 0.3) for s in random_group(rng)]
    rep = grpo_objective(g, GrpoConfig(kl_beta=0.0))
    assert rep.surrogate == 0.0
    assert all(np.all(x == 0) for x in rep.grad_logp_new)
