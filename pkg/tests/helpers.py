"""Builders for random small GRPO problems shared by the unit and acceptance tests."""

from __future__ import annotations

import dataclasses

import numpy as np

from cfground.grpo import PolicyParams, SimConfig, TrajectoryGroup, grpo_objective, make_scenes, rollout
from cfground.rewards import RewardBreakdown

from oracles import central_difference


def random_problem(seed: int, n_candidates: int = 4, groups: int = 3, group_size: int = 4):
    """A random policy plus groups rolled out under a different random old policy.

    Reward totals are replaced by random values so that advantages are
    never all zero.
    """
    rng = np.random.default_rng(seed)
    cfg = SimConfig(n_candidates=n_candidates, n_evidence=1, n_scenes=1, width=32, height=32, seed=seed)
    instances = make_scenes(cfg)
    shape = PolicyParams.zeros(len(instances), n_candidates)
    old = PolicyParams(rng.normal(size=shape.select.shape), rng.normal(size=shape.answer.shape))
    policy = PolicyParams(old.select + rng.normal(scale=0.3, size=old.select.shape),
                          old.answer + rng.normal(scale=0.3, size=old.answer.shape))
    out = []
    for g in range(groups):
        inst = instances[g % len(instances)]
        trajs = []
        for _ in range(group_size):
            t = rollout(old, inst, rng, max_steps=3)
            trajs.append(dataclasses.replace(t, reward=RewardBreakdown(0.0, 0.0, 0.0, float(rng.normal()))))
        out.append(TrajectoryGroup(inst, trajs))
    return policy, out


def fd_relative_error(policy, groups, clip_eps=None, h=1e-6) -> float:
    """Relative L2 gap between the analytic gradient and central differences."""
    _, grad = grpo_objective(groups, policy, clip_eps=clip_eps)
    x = policy.flat()

    def loss(v):
        return grpo_objective(groups, PolicyParams.from_flat(v, policy), clip_eps=clip_eps)[0]

    num = central_difference(loss, x, h)
    ana = grad.flat()
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))
