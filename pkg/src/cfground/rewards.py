"""Answer, format and region-selection rewards and their weighted sum."""

from __future__ import annotations

import dataclasses
import json
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

from .geometry import BBox, ImageExtent, InvalidGeometry, RegionPartition, clip, max_overlap
from .output_schema import FormatError, ParseOutcome, StructuredOutput, is_abstention, parse


class VariantTag(str, Enum):
    POS = "pos"
    CF = "cf"
    RAND = "rand"


VARIANT_ORDER = {VariantTag.POS: 0, VariantTag.CF: 1, VariantTag.RAND: 2}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    # Only gamma_corr > gamma_guess is fixed by the method; magnitudes are placeholders.
    lambda1: float = 0.5
    lambda2: float = 1.0
    gamma_unk: float = 0.5
    rho_unk: float = 1.0
    gamma_guess: float = 0.5
    gamma_corr: float = 1.0
    alpha: float = 0.5
    beta_pos: float = 1.0
    beta_neg: float = 0.5
    gamma_empty: float = 0.5

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{f.name} must be a number, got {v!r}")
            if not v >= 0:
                raise ConfigError(f"{f.name} must be >= 0, got {v!r}")
            object.__setattr__(self, f.name, float(v))
        if not self.gamma_corr > self.gamma_guess:
            raise ConfigError(f"gamma_corr ({self.gamma_corr}) must exceed gamma_guess ({self.gamma_guess})")

    @classmethod
    def from_mapping(cls, data: dict) -> "RewardConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown reward config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RewardConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read reward config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("reward config must be a JSON object")
        return cls.from_mapping(data)

    def replace(self, **changes) -> "RewardConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ScoringContext:
    variant: VariantTag
    gold_answer: str
    partition: RegionPartition
    extent: ImageExtent

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", VariantTag(self.variant))
        if not self.gold_answer.strip():
            raise ValueError("gold_answer must be non-empty")
        for b in self.partition.candidates:
            if not b.within(self.extent):
                raise InvalidGeometry(f"partition box {b.as_list()} outside image extent")


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: float
    r_fmt: float
    r_sel: float
    total: float

    @classmethod
    def combine(cls, r_ans: float, r_fmt: float, r_sel: float, cfg: RewardConfig) -> "RewardBreakdown":
        return cls(r_ans, r_fmt, r_sel, r_ans + cfg.lambda1 * r_fmt + cfg.lambda2 * r_sel)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = _PUNCT.sub("", s)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _answer_text(out: StructuredOutput) -> str:
    return out.answer if out.answer is not None else "unknown"


def answer_value(variant: VariantTag, acc: int, unk: int, cfg: RewardConfig) -> float:
    """Answer reward from the two indicators; under ``cf`` ``acc`` is the exact-match indicator."""
    if VariantTag(variant) is VariantTag.CF:
        return cfg.rho_unk * unk - cfg.gamma_guess * (1 - unk) - cfg.gamma_corr * acc
    return acc - cfg.gamma_unk * unk


def answer_reward(out: Optional[StructuredOutput], ctx: ScoringContext, cfg: RewardConfig) -> float:
    """``out=None`` stands for an unparseable response (acc = unk = 0)."""
    if out is None:
        return answer_value(ctx.variant, 0, 0, cfg)
    acc = int(normalize_answer(_answer_text(out)) == normalize_answer(ctx.gold_answer))
    unk = int(is_abstention(out))
    return answer_value(ctx.variant, acc, unk, cfg)


def _clipped_positions(out: StructuredOutput, extent: ImageExtent) -> Optional[list[BBox]]:
    try:
        return [clip(b, extent) for b in out.positions]
    except InvalidGeometry:
        return None


def format_reward(outcome: ParseOutcome, extent: ImageExtent, cfg: RewardConfig) -> float:
    if isinstance(outcome, FormatError):
        return 0.0
    if _clipped_positions(outcome, extent) is None:
        return 0.0
    return cfg.alpha


def selection_reward(out: Optional[StructuredOutput], ctx: ScoringContext, cfg: RewardConfig) -> float:
    if ctx.variant is VariantTag.CF:
        return 0.0
    boxes = [] if out is None else out.positions
    if not boxes:
        return -cfg.gamma_empty
    pos_sum = neg_sum = 0.0
    for b in boxes:
        try:
            b = clip(b, ctx.extent)
        except InvalidGeometry:
            continue  # contributes zero overlap to both sums
        pos_sum += max_overlap(b, ctx.partition.evidence)
        neg_sum += max_overlap(b, ctx.partition.irrelevant)
    n = len(boxes)
    return cfg.beta_pos * (pos_sum / n) - cfg.beta_neg * (neg_sum / n)


def composite_reward(outcome: ParseOutcome, ctx: ScoringContext, cfg: RewardConfig) -> RewardBreakdown:
    out = None if isinstance(outcome, FormatError) else outcome
    return RewardBreakdown.combine(
        answer_reward(out, ctx, cfg),
        format_reward(outcome, ctx.extent, cfg),
        selection_reward(out, ctx, cfg),
        cfg,
    )


def score_text(text: str, ctx: ScoringContext, cfg: RewardConfig) -> RewardBreakdown:
    return composite_reward(parse(text), ctx, cfg)


def score_batch(
    items: Iterable[tuple[str, ScoringContext]],
    cfg: RewardConfig,
    workers: int = 1,
) -> list[RewardBreakdown]:
    """Score (response, context) pairs; results follow input order for any ``workers``."""
    items = list(items)
    if workers <= 1:
        return [score_text(t, c, cfg) for t, c in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda tc: score_text(tc[0], tc[1], cfg), items))
