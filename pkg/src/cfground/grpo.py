"""Group-relative policy optimization on a small evidence-selection simulator.

The simulator mirrors the training setup at desk scale: every scene holds N
candidate boxes, a couple of which are evidence. Each scene appears in three
variants (untouched, evidence masked, irrelevant regions masked), and each
distinct view of a scene is one feature bucket of a tabular softmax policy.
A rollout picks boxes one at a time until STOP or the step cap, then picks an
answer token; the result is rendered as response text and scored with the
real parser and reward functions.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .geometry import BBox, ImageExtent, RegionPartition
from .output_schema import ABSTAIN_TOKEN, FormatError, ParseOutcome, StructuredOutput, parse
from .rewards import (
    ConfigError,
    RewardBreakdown,
    RewardConfig,
    ScoringContext,
    VariantTag,
    composite_reward,
)

logger = logging.getLogger(__name__)

GOLD, DISTRACTOR, UNKNOWN = 0, 1, 2
N_ANSWERS = 3
VARIANTS = (VariantTag.POS, VariantTag.CF, VariantTag.RAND)


class PolicyCollapse(RuntimeError):
    """Importance ratio or parameters became non-finite."""


class TrainingDiverged(RuntimeError):
    """Total reward stayed below its starting level for too long."""


@dataclass(frozen=True)
class SimInstance:
    extent: ImageExtent
    candidates: tuple[BBox, ...]
    partition: RegionPartition
    variant: VariantTag
    gold_answer: str
    distractor: str
    bucket: int  # feature bucket of what this view of the scene shows
    masked: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("a sim instance needs at least one candidate")
        if set(self.partition.candidates) != set(self.candidates):
            raise ValueError("partition must cover exactly the candidates")

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    @property
    def evidence_idx(self) -> frozenset[int]:
        ev = set(self.partition.evidence)
        return frozenset(i for i, b in enumerate(self.candidates) if b in ev)

    def context(self) -> ScoringContext:
        return ScoringContext(self.variant, self.gold_answer, self.partition, self.extent)


@dataclass
class PolicyParams:
    """Tabular softmax policy.

    ``select[bucket]`` holds N + 1 logits, the last one being STOP. The answer
    head is conditioned on whether any box was selected:
    ``answer[bucket, has_boxes]`` holds logits over (gold, distractor, unknown).
    """

    select: np.ndarray
    answer: np.ndarray

    def __post_init__(self) -> None:
        self.select = np.asarray(self.select, dtype=np.float64)
        self.answer = np.asarray(self.answer, dtype=np.float64)
        if self.select.ndim != 2 or self.answer.shape != (self.select.shape[0], 2, N_ANSWERS):
            raise ValueError(f"bad policy shapes {self.select.shape}, {self.answer.shape}")

    @classmethod
    def zeros(cls, n_buckets: int, n_candidates: int) -> "PolicyParams":
        return cls(np.zeros((n_buckets, n_candidates + 1)), np.zeros((n_buckets, 2, N_ANSWERS)))

    @property
    def stop(self) -> int:
        return self.select.shape[1] - 1

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.select.copy(), self.answer.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.select.ravel(), self.answer.ravel()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, like: "PolicyParams") -> "PolicyParams":
        k = like.select.size
        return cls(vec[:k].reshape(like.select.shape).copy(), vec[k:].reshape(like.answer.shape).copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.select).all() and np.isfinite(self.answer).all())


@dataclass
class Trajectory:
    bucket: int
    picks: tuple[int, ...]
    stopped: bool
    answer: int
    text: str
    outcome: ParseOutcome
    reward: RewardBreakdown
    logp_old: float

    @property
    def abstained(self) -> bool:
        return isinstance(self.outcome, StructuredOutput) and self.outcome.abstained


@dataclass
class TrajectoryGroup:
    instance: SimInstance
    trajectories: list[Trajectory]
    mean_reward: float = 0.0
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if len(self.trajectories) < 2:
            raise ValueError("a group needs at least two trajectories")
        self.advantages = group_advantages([t.reward.total for t in self.trajectories])
        self.mean_reward = float(np.mean([t.reward.total for t in self.trajectories]))


def _log_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits, -np.inf)
    m = z[allowed].max()
    return z - (m + np.log(np.exp(z[allowed] - m).sum()))


def render_response(inst: SimInstance, picks: Sequence[int], answer: int) -> str:
    """Render selections as response text; illegal combinations yield text the parser rejects."""
    think = f"regions {','.join(str(i) for i in picks)}" if picks else "no usable regions"
    if picks:
        payload = "[" + ",".join(
            '{"Position":[%d,%d,%d,%d],"Confidence":1}' % tuple(inst.candidates[i].as_list()) for i in picks
        ) + "]"
    else:
        payload = ABSTAIN_TOKEN if answer == UNKNOWN else "[]"
    text_answer = {GOLD: inst.gold_answer, DISTRACTOR: inst.distractor, UNKNOWN: ABSTAIN_TOKEN}[answer]
    return f"<think>{think}</think>\n<bbox>{payload}</bbox>\n<answer>{text_answer}</answer>"


def rollout(
    policy: PolicyParams,
    inst: SimInstance,
    seed: Union[int, np.random.Generator],
    reward_cfg: Optional[RewardConfig] = None,
    max_steps: int = 4,
) -> Trajectory:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    reward_cfg = reward_cfg or RewardConfig()
    logits = policy.select[inst.bucket]
    allowed = np.ones(logits.shape[0], dtype=bool)
    picks: list[int] = []
    logp = 0.0
    stopped = False
    for _ in range(max_steps):
        lp = _log_softmax(logits, allowed)
        a = int(rng.choice(lp.shape[0], p=np.exp(lp)))
        logp += lp[a]
        if a == policy.stop:
            stopped = True
            break
        picks.append(a)
        allowed[a] = False
    lp = _log_softmax(policy.answer[inst.bucket, int(bool(picks))], np.ones(N_ANSWERS, dtype=bool))
    answer = int(rng.choice(N_ANSWERS, p=np.exp(lp)))
    logp += lp[answer]
    text = render_response(inst, picks, answer)
    outcome = parse(text)
    return Trajectory(
        bucket=inst.bucket,
        picks=tuple(picks),
        stopped=stopped,
        answer=answer,
        text=text,
        outcome=outcome,
        reward=composite_reward(outcome, inst.context(), reward_cfg),
        logp_old=float(logp),
    )


def trajectory_logp(policy: PolicyParams, traj: Trajectory, grad: Optional[PolicyParams] = None,
                    weight: float = 1.0) -> float:
    """Log-probability of ``traj`` under ``policy``; adds ``weight * d logp`` into ``grad`` if given."""
    logits = policy.select[traj.bucket]
    allowed = np.ones(logits.shape[0], dtype=bool)
    actions = list(traj.picks) + ([policy.stop] if traj.stopped else [])
    logp = 0.0
    for a in actions:
        lp = _log_softmax(logits, allowed)
        logp += lp[a]
        if grad is not None:
            g = -np.exp(lp)
            g[a] += 1.0
            grad.select[traj.bucket] += weight * g
        allowed[a] = False
    row = int(bool(traj.picks))
    lp = _log_softmax(policy.answer[traj.bucket, row], np.ones(N_ANSWERS, dtype=bool))
    logp += lp[traj.answer]
    if grad is not None:
        g = -np.exp(lp)
        g[traj.answer] += 1.0
        grad.answer[traj.bucket, row] += weight * g
    return float(logp)


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Reward minus the group mean."""
    r = np.asarray(rewards, dtype=np.float64)
    return r - r.mean()


def grpo_objective(
    groups: Sequence[TrajectoryGroup],
    policy: PolicyParams,
    old_policy: Optional[PolicyParams] = None,
    clip_eps: Optional[float] = None,
) -> tuple[float, PolicyParams]:
    """Loss ``-mean_i[ratio_i * A_i]`` over all trajectories and its gradient.

    Old log-probs come from ``old_policy`` when given, else from the values
    stored at rollout time. ``clip_eps`` switches on the PPO-style clipped
    surrogate.
    """
    grad = PolicyParams(np.zeros_like(policy.select), np.zeros_like(policy.answer))
    pairs = [(t, a) for g in groups for t, a in zip(g.trajectories, g.advantages)]
    if not pairs:
        return 0.0, grad
    n = len(pairs)
    total = 0.0
    for traj, adv in pairs:
        logp_old = trajectory_logp(old_policy, traj) if old_policy is not None else traj.logp_old
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = float(np.exp(trajectory_logp(policy, traj) - logp_old))
        if not np.isfinite(ratio):
            raise PolicyCollapse(f"non-finite importance ratio for trajectory {traj.picks}/{traj.answer}")
        surrogate = ratio * adv
        active = True
        if clip_eps is not None:
            clipped = float(np.clip(ratio, 1 - clip_eps, 1 + clip_eps)) * adv
            if clipped < surrogate:
                surrogate, active = clipped, False
        total += surrogate
        if active and adv != 0.0:
            trajectory_logp(policy, traj, grad, weight=-ratio * adv / n)
    return -total / n, grad


# ---------------------------------------------------------------- environment


@dataclass(frozen=True)
class SimConfig:
    n_candidates: int = 8
    n_evidence: int = 2
    n_scenes: int = 4
    width: int = 64
    height: int = 64
    group_size: int = 4
    max_steps: int = 4
    iterations: int = 500
    scenes_per_iteration: int = 4
    step_size: float = 8.0
    clip_eps: Optional[float] = None
    seed: int = 0
    eval_rollouts: int = 200
    window: int = 25
    curve_window: int = 100
    divergence_patience: int = 50

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0 < self.n_evidence < self.n_candidates:
            raise ConfigError("need 0 < n_evidence < n_candidates")
        if self.max_steps < 1 or self.iterations < 1 or self.n_scenes < 1:
            raise ConfigError("max_steps, iterations and n_scenes must be positive")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known - {"reward"}
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})


def _grid_boxes(n: int, extent: ImageExtent, rng: np.random.Generator) -> list[BBox]:
    """``n`` pairwise-disjoint boxes, one per grid cell, with jittered margins."""
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    cw, ch = extent.width // cols, extent.height // rows
    if cw < 4 or ch < 4:
        raise ConfigError("image too small for the requested number of candidates")
    cells = rng.permutation(rows * cols)[:n]
    boxes = []
    for c in sorted(cells):
        r, k = divmod(int(c), cols)
        x0, y0 = k * cw, r * ch
        mx, my = rng.integers(0, cw // 4 + 1, size=2)
        boxes.append(BBox(x0 + int(mx), y0 + int(my), x0 + cw - int(rng.integers(0, cw // 4 + 1)),
                          y0 + ch - int(rng.integers(0, ch // 4 + 1))))
    return boxes


def make_scenes(cfg: SimConfig) -> list[SimInstance]:
    """All (scene, variant) views; bucket ids are their positions in the returned list."""
    rng = np.random.default_rng([cfg.seed, 0x5CE7E])
    extent = ImageExtent(cfg.width, cfg.height)
    out: list[SimInstance] = []
    for s in range(cfg.n_scenes):
        boxes = _grid_boxes(cfg.n_candidates, extent, rng)
        ev_idx = sorted(int(i) for i in rng.choice(cfg.n_candidates, cfg.n_evidence, replace=False))
        irr_idx = [i for i in range(cfg.n_candidates) if i not in ev_idx]
        partition = RegionPartition(tuple(boxes[i] for i in ev_idx), tuple(boxes[i] for i in irr_idx))
        k = min(len(ev_idx), len(irr_idx))
        rand_idx = tuple(sorted(int(i) for i in rng.choice(irr_idx, k, replace=False)))
        masked = {VariantTag.POS: (), VariantTag.CF: tuple(ev_idx), VariantTag.RAND: rand_idx}
        for v in VARIANTS:
            out.append(SimInstance(
                extent=extent,
                candidates=tuple(boxes),
                partition=partition,
                variant=v,
                gold_answer=f"object {s}",
                distractor=f"object {s + cfg.n_scenes}",
                bucket=len(out),
                masked=masked[v],
            ))
    return out


# ------------------------------------------------------------------- training


@dataclass
class IterationStats:
    iteration: int
    means: dict[str, float]
    stds: dict[str, float]


@dataclass
class TrainingResult:
    config: SimConfig
    reward_config: RewardConfig
    policy: PolicyParams
    log: list[IterationStats]
    instances: list[SimInstance]

    def series(self, key: str = "total") -> np.ndarray:
        return np.array([s.means[key] for s in self.log])

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = ("r_ans", "r_fmt", "r_sel", "total")
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")])
            for st in self.log:
                w.writerow([st.iteration] + [repr(x) for k in keys for x in (st.means[k], st.stds[k])])
        return path

    def write_policy(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            "select": self.policy.select.tolist(),
            "answer": self.policy.answer.tolist(),
            "config": dataclasses.asdict(self.config),
            "reward_config": dataclasses.asdict(self.reward_config),
        }, indent=1))
        return path


def windowed_means(values: Sequence[float], window: int) -> np.ndarray:
    """Means over consecutive non-overlapping windows; a short tail window is dropped."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def curve_is_nondecreasing(result: "TrainingResult", tail: float = 0.8,
                           window: Optional[int] = None) -> tuple[bool, np.ndarray]:
    """Whether windowed mean total reward never drops over the last ``tail`` of training.

    Windows are non-overlapping; only windows starting inside the tail count.
    """
    window = window or result.config.curve_window
    means = windowed_means(result.series(), window)
    start = int(np.ceil((1.0 - tail) * len(result.log) / window))
    tail_means = means[start:]
    return bool(np.all(np.diff(tail_means) >= 0)), tail_means


def _check_divergence(totals: list[float], cfg: SimConfig, state: dict) -> None:
    if len(totals) < cfg.window:
        return
    current = float(np.mean(totals[-cfg.window:]))
    if "initial" not in state:
        state["initial"] = current
        state["below"] = 0
        return
    state["below"] = state["below"] + 1 if current < state["initial"] else 0
    if state["below"] >= cfg.divergence_patience:
        raise TrainingDiverged(
            f"windowed total reward {current:.4f} below initial {state['initial']:.4f} "
            f"for {state['below']} consecutive windows")


def train(
    cfg: SimConfig = SimConfig(),
    reward_cfg: RewardConfig = RewardConfig(),
    policy: Optional[PolicyParams] = None,
) -> TrainingResult:
    """Plain gradient ascent on the group-relative objective, old policy synced every step."""
    instances = make_scenes(cfg)
    policy = policy.copy() if policy is not None else PolicyParams.zeros(len(instances), cfg.n_candidates)
    ss = np.random.SeedSequence([cfg.seed, 0x7A1])
    sched_rng = np.random.default_rng(ss.spawn(1)[0])
    log: list[IterationStats] = []
    totals: list[float] = []
    div_state: dict = {}
    for it in range(cfg.iterations):
        scenes = sched_rng.integers(0, cfg.n_scenes, size=cfg.scenes_per_iteration)
        seeds = ss.spawn(len(scenes) * len(VARIANTS) * cfg.group_size)
        groups = []
        k = 0
        for s in scenes:
            for v in range(len(VARIANTS)):
                inst = instances[int(s) * len(VARIANTS) + v]
                trajs = []
                for _ in range(cfg.group_size):
                    trajs.append(rollout(policy, inst, np.random.default_rng(seeds[k]), reward_cfg, cfg.max_steps))
                    k += 1
                groups.append(TrajectoryGroup(inst, trajs))
        _, grad = grpo_objective(groups, policy, clip_eps=cfg.clip_eps)
        policy.select -= cfg.step_size * grad.select
        policy.answer -= cfg.step_size * grad.answer
        if not policy.is_finite():
            raise PolicyCollapse(f"non-finite parameters after iteration {it}")
        rewards = [t.reward for g in groups for t in g.trajectories]
        means, stds = {}, {}
        for key in ("r_ans", "r_fmt", "r_sel", "total"):
            vals = np.array([getattr(r, key) for r in rewards])
            means[key], stds[key] = float(vals.mean()), float(vals.std())
        log.append(IterationStats(it, means, stds))
        totals.append(means["total"])
        _check_divergence(totals, cfg, div_state)
    return TrainingResult(cfg, reward_cfg, policy, log, instances)


# ----------------------------------------------------------------- evaluation


def selects_only_evidence(inst: SimInstance, traj: Trajectory) -> bool:
    return bool(traj.picks) and not traj.abstained and set(traj.picks) <= inst.evidence_idx


def evaluate(result: TrainingResult, n_rollouts: Optional[int] = None, seed: int = 12345) -> dict[str, float]:
    """Sampled behavior rates of the trained policy per variant.

    ``evidence_selection`` is the share of rollouts that pick at least one box
    and only evidence boxes; ``abstention`` the share of joint abstentions.
    """
    n = n_rollouts or result.config.eval_rollouts
    rng = np.random.default_rng([seed, result.config.seed])
    counts = {v: {"n": 0, "evidence_selection": 0, "abstention": 0, "correct": 0} for v in VARIANTS}
    for inst in result.instances:
        c = counts[inst.variant]
        for _ in range(n):
            t = rollout(result.policy, inst, rng, result.reward_config, result.config.max_steps)
            c["n"] += 1
            c["evidence_selection"] += selects_only_evidence(inst, t)
            c["abstention"] += t.abstained
            c["correct"] += t.answer == GOLD and not t.abstained
    rates = {}
    for v, c in counts.items():
        for key in ("evidence_selection", "abstention", "correct"):
            rates[f"{v.value}_{key}"] = c[key] / c["n"]
    return rates
