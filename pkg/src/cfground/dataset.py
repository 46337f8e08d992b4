"""Evidence partitioning, positive/counterfactual/random-mask instance generation,
and the JSONL manifest those instances live in."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .geometry import (
    RGB,
    BBox,
    ImageExtent,
    RegionPartition,
    mask_regions,
    pixel_diff,
    read_png,
    region_mask,
    write_png,
)
from .rewards import VARIANT_ORDER, VariantTag, normalize_answer

logger = logging.getLogger(__name__)

ABSTAIN_LABEL = "Unknown"
SOURCES = ("rpn", "ocr", "det")


class EmptyDescriptorSet(ValueError):
    pass


class EmptyPartition(ValueError):
    """No candidate regions at all; the record cannot be partitioned."""


@dataclass(frozen=True)
class DescriptorSet:
    descriptors: tuple[str, ...]

    def __post_init__(self) -> None:
        seen: dict[str, None] = {}
        for d in self.descriptors:
            if not isinstance(d, str):
                raise EmptyDescriptorSet(f"descriptor must be a string, got {d!r}")
            d = " ".join(d.split())
            if d:
                seen.setdefault(d, None)
        if not seen:
            raise EmptyDescriptorSet("descriptor set is empty after trimming")
        object.__setattr__(self, "descriptors", tuple(seen))

    def __iter__(self):
        return iter(self.descriptors)

    def __len__(self) -> int:
        return len(self.descriptors)


@dataclass(frozen=True)
class ScoredCandidate:
    """A candidate region with its detector grounding scores per descriptor."""

    box: BBox
    source: str = "rpn"
    ocr_text: Optional[str] = None
    grounding: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "box", BBox.of(self.box))
        if self.source not in SOURCES:
            raise ValueError(f"unknown candidate source {self.source!r}")
        if (self.ocr_text is not None) != (self.source == "ocr"):
            raise ValueError("ocr_text must be present exactly for ocr candidates")
        for k, v in self.grounding.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"grounding score for {k!r} outside [0, 1]: {v}")

    def best_score(self, descriptors: Iterable[str]) -> float:
        return max((self.grounding[k] for k in descriptors if k in self.grounding), default=0.0)


def _tokens(s: str) -> set[str]:
    return set(normalize_answer(s).split())


def match_ocr(candidate: ScoredCandidate, descriptors: DescriptorSet, threshold: float = 0.5) -> bool:
    """Word-level Jaccard overlap between the OCR text and any descriptor reaches ``threshold``."""
    if candidate.source != "ocr" or candidate.ocr_text is None:
        return False
    text = _tokens(candidate.ocr_text)
    for d in descriptors:
        ref = _tokens(d)
        union = text | ref
        if union and len(text & ref) / len(union) >= threshold:
            return True
    return False


def partition(candidates: Sequence[ScoredCandidate], descriptors: DescriptorSet, tau: float) -> RegionPartition:
    """Evidence = candidates whose best grounding score is strictly above ``tau``,
    plus OCR regions whose text matches a descriptor. Duplicate boxes are merged."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not candidates:
        raise EmptyPartition("no candidate regions")
    flags: dict[BBox, bool] = {}
    for c in candidates:
        hit = c.best_score(descriptors) > tau or match_ocr(c, descriptors)
        flags[c.box] = flags.get(c.box, False) or hit
    return RegionPartition(
        evidence=tuple(b for b, hit in flags.items() if hit),
        irrelevant=tuple(b for b, hit in flags.items() if not hit),
    )


# ----------------------------------------------------------------- instances


def _boxes_json(boxes: Sequence[BBox]) -> list[list[int]]:
    return [b.as_list() for b in boxes]


@dataclass(frozen=True)
class TrainingInstance:
    instance_id: str
    variant: VariantTag
    image_path: str
    source_image_path: str
    question: str
    label: str
    evidence: tuple[BBox, ...]
    irrelevant: tuple[BBox, ...]
    masked: tuple[BBox, ...]
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", VariantTag(self.variant))
        for name in ("evidence", "irrelevant", "masked"):
            object.__setattr__(self, name, tuple(BBox.of(b) for b in getattr(self, name)))

    @property
    def partition(self) -> RegionPartition:
        return RegionPartition(self.evidence, self.irrelevant)

    @property
    def group_key(self) -> tuple[str, str]:
        return self.source_image_path, self.question

    def sort_key(self) -> tuple:
        return self.source_image_path, self.question, VARIANT_ORDER[self.variant], self.instance_id

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "variant": self.variant.value,
            "image_path": self.image_path,
            "source_image_path": self.source_image_path,
            "question": self.question,
            "label": self.label,
            "evidence": _boxes_json(self.evidence),
            "irrelevant": _boxes_json(self.irrelevant),
            "masked": _boxes_json(self.masked),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainingInstance":
        names = [f.name for f in dataclasses.fields(cls)]
        missing = [n for n in names if n not in data]
        if missing:
            raise ValueError(f"manifest record missing fields {missing}")
        return cls(**{n: data[n] for n in names})


@dataclass(frozen=True)
class BuilderConfig:
    out_dir: Path
    fill: RGB = (0, 0, 0)
    abstain_label: str = ABSTAIN_LABEL
    image_subdir: str = "images"


def raster_digest(image: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr((image.shape, str(image.dtype))).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def store_raster(image: np.ndarray, cfg: BuilderConfig) -> str:
    """Write ``image`` under a content-addressed name; returns the path relative to ``out_dir``."""
    digest = raster_digest(image)
    rel = Path(cfg.image_subdir) / digest[:2] / f"{digest}.png"
    dest = Path(cfg.out_dir) / rel
    if not dest.exists():
        tmp = dest.with_name(f"{dest.name}.{os.getpid()}-{threading.get_ident()}.tmp")
        write_png(image, tmp)
        tmp.replace(dest)
    return rel.as_posix()


def instance_stem(source_image_path: str, question: str) -> str:
    return hashlib.sha1(f"{source_image_path}\n{question}".encode()).hexdigest()[:16]


def choose_random_mask(irrelevant: Sequence[BBox], k: int, seed: int) -> tuple[BBox, ...]:
    rng = np.random.default_rng(seed)
    idx = sorted(int(i) for i in rng.choice(len(irrelevant), size=k, replace=False))
    return tuple(irrelevant[i] for i in idx)


def build_instances(
    image: np.ndarray,
    question: str,
    answer: str,
    part: RegionPartition,
    seed: int,
    cfg: BuilderConfig,
    source_image_path: str = "",
) -> list[TrainingInstance]:
    """Positive, counterfactual and random-mask instances for one (image, question).

    Without evidence only the positive instance is produced; without irrelevant
    regions the random-mask instance is skipped.
    """
    stem = instance_stem(source_image_path, question)

    def make(variant: VariantTag, raster: np.ndarray, label: str, masked: Sequence[BBox]) -> TrainingInstance:
        return TrainingInstance(
            instance_id=f"{stem}-{variant.value}",
            variant=variant,
            image_path=store_raster(raster, cfg),
            source_image_path=source_image_path,
            question=question,
            label=label,
            evidence=part.evidence,
            irrelevant=part.irrelevant,
            masked=tuple(masked),
            seed=seed,
        )

    out = [make(VariantTag.POS, image, answer, ())]
    if not part.evidence:
        logger.warning("no evidence regions for %s / %r; emitting the positive instance only",
                       source_image_path, question)
        return out
    out.append(make(VariantTag.CF, mask_regions(image, part.evidence, cfg.fill), cfg.abstain_label, part.evidence))
    if not part.irrelevant:
        logger.warning("no irrelevant regions for %s / %r; skipping the random-mask instance",
                       source_image_path, question)
        return out
    k = max(1, min(len(part.evidence), len(part.irrelevant)))
    masked = choose_random_mask(part.irrelevant, k, seed)
    out.append(make(VariantTag.RAND, mask_regions(image, masked, cfg.fill), answer, masked))
    return out


# ------------------------------------------------------------------ manifest


def write_manifest(instances: Iterable[TrainingInstance], path: Union[str, Path]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(instances, key=TrainingInstance.sort_key)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for inst in rows:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")
    return len(rows)


def read_manifest(path: Union[str, Path]) -> list[TrainingInstance]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrainingInstance.from_json(json.loads(line)))
    return out


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class Violation:
    instance_id: str
    kind: str
    detail: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _check_labels(inst: TrainingInstance, pos: Optional[TrainingInstance], abstain_label: str) -> list[str]:
    problems = []
    if inst.variant is VariantTag.POS:
        if inst.masked:
            problems.append("positive instance has masked regions")
        if normalize_answer(inst.label) == normalize_answer(abstain_label):
            problems.append("positive instance carries the abstention label")
    elif inst.variant is VariantTag.CF:
        if set(inst.masked) != set(inst.evidence) or not inst.masked:
            problems.append("counterfactual must mask exactly the evidence regions")
        if inst.label.strip().casefold() != abstain_label.casefold():
            problems.append(f"counterfactual label {inst.label!r} is not the abstention label")
    else:
        if not set(inst.masked) <= set(inst.irrelevant):
            problems.append("random mask touches non-irrelevant regions")
        if inst.irrelevant and not inst.masked:
            problems.append("random mask is empty although irrelevant regions exist")
        if pos is not None and inst.label != pos.label:
            problems.append("random-mask label differs from the positive label")
    if pos is not None and inst is not pos:
        if inst.partition != pos.partition:
            problems.append("evidence/irrelevant sets differ from the positive instance")
    return problems


def validate_manifest(
    manifest: Union[str, Path],
    image_dir: Union[str, Path, None] = None,
    fill: Optional[RGB] = None,
    abstain_label: str = ABSTAIN_LABEL,
) -> list[Violation]:
    """Re-check every instance invariant, including pixel-level variant locality."""
    manifest = Path(manifest)
    image_dir = Path(image_dir) if image_dir is not None else manifest.parent
    violations: list[Violation] = []
    try:
        instances = read_manifest(manifest)
    except (OSError, ValueError) as exc:
        return [Violation("", "unreadable-manifest", str(exc))]

    seen: set[str] = set()
    groups: dict[tuple[str, str], list[TrainingInstance]] = defaultdict(list)
    for inst in instances:
        if inst.instance_id in seen:
            violations.append(Violation(inst.instance_id, "duplicate-id", "instance_id repeated"))
        seen.add(inst.instance_id)
        groups[inst.group_key].append(inst)

    rasters: dict[str, Optional[np.ndarray]] = {}

    def load(inst: TrainingInstance) -> Optional[np.ndarray]:
        if inst.instance_id not in rasters:
            path = image_dir / inst.image_path
            if not path.is_file():
                violations.append(Violation(inst.instance_id, "missing-file", str(path)))
                rasters[inst.instance_id] = None
            else:
                try:
                    rasters[inst.instance_id] = read_png(path)
                except OSError as exc:
                    violations.append(Violation(inst.instance_id, "unreadable-raster", f"{path}: {exc}"))
                    rasters[inst.instance_id] = None
        return rasters[inst.instance_id]

    for members in groups.values():
        pos = next((m for m in members if m.variant is VariantTag.POS), None)
        for inst in members:
            try:
                inst.partition
            except ValueError as exc:
                violations.append(Violation(inst.instance_id, "partition-overlap", str(exc)))
                continue
            for problem in _check_labels(inst, pos, abstain_label):
                violations.append(Violation(inst.instance_id, "label-rule", problem))
            image = load(inst)
            if inst.variant is VariantTag.POS:
                continue
            if pos is None:
                violations.append(Violation(inst.instance_id, "missing-sibling", "no positive instance"))
                continue
            base = load(pos)
            if image is None or base is None:
                continue
            if image.shape != base.shape:
                violations.append(Violation(inst.instance_id, "variant-locality", "raster shape differs"))
                continue
            extent = ImageExtent.of_raster(image)
            try:
                allowed = region_mask(extent, inst.masked)
            except ValueError as exc:
                violations.append(Violation(inst.instance_id, "mask-rule", str(exc)))
                continue
            outside = pixel_diff(base, image) & ~allowed
            if outside.any():
                ys, xs = np.nonzero(outside)
                violations.append(Violation(
                    inst.instance_id, "variant-locality",
                    f"{len(xs)} pixels changed outside masked regions, first at ({xs[0]},{ys[0]})"))
            if fill is not None and allowed.any():
                if not (image[allowed] == np.asarray(fill, dtype=image.dtype)).all():
                    violations.append(Violation(inst.instance_id, "fill-mismatch",
                                                "masked pixels do not all equal the fill color"))
    return violations
