import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfground.grpo import (
    DISTRACTOR,
    GOLD,
    UNKNOWN,
    PolicyCollapse,
    PolicyParams,
    SimConfig,
    TrainingDiverged,
    TrajectoryGroup,
    curve_is_nondecreasing,
    evaluate,
    group_advantages,
    grpo_objective,
    make_scenes,
    render_response,
    rollout,
    train,
    trajectory_logp,
    windowed_means,
)
from cfground.output_schema import FormatError, FormatErrorKind, parse
from cfground.rewards import RewardBreakdown, VariantTag

from helpers import fd_relative_error, random_problem

SMALL = SimConfig(n_scenes=1, seed=5)


@pytest.fixture(scope="module")
def scene():
    return make_scenes(SMALL)


def forced_policy(n_buckets, n_candidates, bucket, picks, answer, has_boxes):
    p = PolicyParams.zeros(n_buckets, n_candidates)
    for rank, i in enumerate(picks):
        p.select[bucket, i] = 200.0 - rank * 20
    p.select[bucket, p.stop] = 100.0
    p.answer[bucket, int(has_boxes), answer] = 100.0
    return p


def test_group_advantages():
    assert group_advantages([1.0, 0.0, 0.5, 0.5]).tolist() == [0.5, -0.5, 0.0, 0.0]
    assert group_advantages([0.3] * 4).tolist() == [0.0] * 4
    a, b = 1.7, -0.2
    assert np.allclose(group_advantages([a, b]), [(a - b) / 2, (b - a) / 2])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16))
def test_group_advantages_sum_to_zero(rewards):
    assert abs(group_advantages(rewards).sum()) <= 1e-9 * max(1.0, max(abs(r) for r in rewards))


def test_make_scenes_structure(scene):
    assert [i.variant for i in scene] == [VariantTag.POS, VariantTag.CF, VariantTag.RAND]
    pos, cf, rand = scene
    assert len(pos.candidates) == 8 and len(pos.evidence_idx) == 2
    assert set(cf.masked) == set(pos.evidence_idx)
    assert len(rand.masked) == 2 and not set(rand.masked) & pos.evidence_idx
    assert [i.bucket for i in scene] == [0, 1, 2]


def test_render_response_cases(scene):
    pos = scene[0]
    assert parse(render_response(pos, [], UNKNOWN)).abstained
    bad = parse(render_response(pos, [], GOLD))
    assert isinstance(bad, FormatError) and bad.kind is FormatErrorKind.MALFORMED_BOX_PAYLOAD
    mixed = parse(render_response(pos, [0], UNKNOWN))
    assert isinstance(mixed, FormatError) and mixed.kind is FormatErrorKind.INCONSISTENT_ABSTENTION
    ok = parse(render_response(pos, [2, 0], DISTRACTOR))
    assert ok.positions == [pos.candidates[2], pos.candidates[0]] and ok.answer == pos.distractor


def test_forced_policies_reach_reference_totals(scene):
    pos, cf, _ = scene
    ev = min(pos.evidence_idx)
    p = forced_policy(3, 8, pos.bucket, [ev], GOLD, True)
    t = rollout(p, pos, 0)
    assert t.picks == (ev,) and t.stopped and t.reward.total == 2.25
    p = forced_policy(3, 8, cf.bucket, [], UNKNOWN, False)
    t = rollout(p, cf, 0)
    assert t.picks == () and t.abstained and t.reward.total == 1.25


def test_rollout_is_seeded(scene):
    rng = np.random.default_rng(0)
    p = PolicyParams(rng.normal(size=(3, 9)), rng.normal(size=(3, 2, 3)))
    a = [rollout(p, scene[0], s) for s in range(20)]
    b = [rollout(p, scene[0], s) for s in range(20)]
    assert [(t.picks, t.answer, t.text) for t in a] == [(t.picks, t.answer, t.text) for t in b]
    assert len({t.text for t in a}) > 1


def test_rollout_never_repeats_a_box(scene):
    p = PolicyParams.zeros(3, 8)
    p.select[:, -1] = -50.0  # never stop early
    for s in range(30):
        t = rollout(p, scene[0], s, max_steps=8)
        assert len(set(t.picks)) == len(t.picks) == 8


def test_trajectory_logp_matches_rollout(scene):
    rng = np.random.default_rng(1)
    p = PolicyParams(rng.normal(size=(3, 9)), rng.normal(size=(3, 2, 3)))
    for s in range(10):
        t = rollout(p, scene[s % 3], s)
        assert trajectory_logp(p, t) == pytest.approx(t.logp_old, abs=1e-12)


def _with_totals(trajs, totals):
    return [dataclasses.replace(t, reward=RewardBreakdown(0.0, 0.0, 0.0, r)) for t, r in zip(trajs, totals)]


def test_loss_with_given_ratios(scene):
    p = PolicyParams.zeros(3, 8)
    trajs = _with_totals([rollout(p, scene[0], s) for s in range(2)], [1.0, -1.0])
    # stored old log-probs chosen so that the ratios come out as 2 and 1
    trajs[0] = dataclasses.replace(trajs[0], logp_old=trajs[0].logp_old - np.log(2.0))
    group = TrajectoryGroup(scene[0], trajs)
    assert group.advantages.tolist() == [1.0, -1.0]
    loss, _ = grpo_objective([group], p)
    assert loss == pytest.approx(-0.5, abs=1e-12)


def test_loss_is_zero_when_old_equals_current():
    policy, groups = random_problem(3)
    loss, _ = grpo_objective(groups, policy, old_policy=policy)
    assert abs(loss) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_constant_reward_shift_changes_nothing(seed, c):
    policy, groups = random_problem(seed)
    shifted = [TrajectoryGroup(g.instance, _with_totals(g.trajectories, [t.reward.total + c for t in g.trajectories]))
               for g in groups]
    for g, h in zip(groups, shifted):
        assert np.allclose(g.advantages, h.advantages, atol=1e-9)
    loss, grad = grpo_objective(groups, policy)
    loss2, grad2 = grpo_objective(shifted, policy)
    assert loss == pytest.approx(loss2, abs=1e-9)
    assert np.allclose(grad.flat(), grad2.flat(), atol=1e-9)


def test_single_trajectory_group_rejected(scene):
    with pytest.raises(ValueError):
        TrajectoryGroup(scene[0], [rollout(PolicyParams.zeros(3, 8), scene[0], 0)])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    policy, groups = random_problem(seed)
    assert fd_relative_error(policy, groups) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_clipped_gradient_matches_finite_differences(seed):
    policy, groups = random_problem(100 + seed)
    # a wide clip keeps the surrogate smooth around the current point
    assert fd_relative_error(policy, groups, clip_eps=10.0) < 1e-4


def test_non_finite_ratio_halts(scene):
    p = PolicyParams.zeros(3, 8)
    trajs = _with_totals([rollout(p, scene[0], s) for s in range(2)], [1.0, 0.0])
    trajs[0] = dataclasses.replace(trajs[0], logp_old=-1e6)
    with pytest.raises(PolicyCollapse):
        grpo_objective([TrajectoryGroup(scene[0], trajs)], p)


def test_windowed_means():
    assert windowed_means([1, 2, 3, 4, 5], 2).tolist() == [1.5, 3.5]


def test_training_is_deterministic():
    cfg = SimConfig(iterations=15, seed=9)
    a, b = train(cfg), train(cfg)
    assert np.array_equal(a.policy.flat(), b.policy.flat())
    assert np.array_equal(a.series(), b.series())


def test_descending_the_reward_is_flagged_as_divergence(monkeypatch):
    import cfground.grpo as g

    original = g.grpo_objective

    def flipped(*args, **kwargs):
        loss, grad = original(*args, **kwargs)
        return -loss, PolicyParams(-grad.select, -grad.answer)

    monkeypatch.setattr(g, "grpo_objective", flipped)
    with pytest.raises(TrainingDiverged):
        g.train(SimConfig(iterations=300, seed=0, window=10, divergence_patience=5))


def test_short_training_improves_reward():
    r = train(SimConfig(iterations=150, seed=1))
    s = r.series()
    assert s[-25:].mean() > s[:25].mean() + 0.5
    ok, tail = curve_is_nondecreasing(r, window=25)
    assert len(tail) == 4  # windows 2..5 of 6 cover the last 80%
    rates = evaluate(r, n_rollouts=50)
    assert set(rates) == {f"{v}_{k}" for v in ("pos", "cf", "rand")
                          for k in ("evidence_selection", "abstention", "correct")}


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(group_size=1)
    with pytest.raises(ValueError):
        SimConfig(n_evidence=8, n_candidates=8)
    with pytest.raises(ValueError):
        SimConfig.from_mapping({"iterations": 3, "nope": 1})
