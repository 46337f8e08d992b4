"""Parser and canonical serializer for the tagged response format.

A response is three tag blocks in order::

    <think>free text</think>
    <bbox>[{"Position":[x1,y1,x2,y2],"Confidence":p}, ...]</bbox>
    <answer>final answer</answer>

Abstention writes ``unknown`` (any casing) in both the bbox and answer blocks.
``parse`` never raises: malformed text comes back as a :class:`FormatError` value.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from .geometry import BBox, InvalidGeometry

logger = logging.getLogger(__name__)

ABSTAIN_TOKEN = "unknown"

TAGS = ("think", "bbox", "answer")


class FormatErrorKind(str, Enum):
    MISSING_TAG = "missing-tag"
    MALFORMED_BOX_PAYLOAD = "malformed-box-payload"
    INCONSISTENT_ABSTENTION = "inconsistent-abstention"
    TRAILING_GARBAGE = "trailing-garbage"
    INVALID_COORDINATES = "invalid-coordinates"


@dataclass(frozen=True)
class FormatError:
    kind: FormatErrorKind
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value}: {self.detail}" if self.detail else self.kind.value


def canonical_confidence(p: float) -> float:
    """Round to the 6 significant digits the wire format carries."""
    return float(f"{float(p):.6g}")


@dataclass(frozen=True)
class BoxPrediction:
    position: BBox
    confidence: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", BBox.of(self.position))
        p = float(self.confidence)
        if not math.isfinite(p):
            raise ValueError(f"confidence must be finite, got {p}")
        if not 0.0 <= p <= 1.0:
            logger.warning("confidence %r outside [0, 1]; clamping", p)
            p = min(1.0, max(0.0, p))
        object.__setattr__(self, "confidence", canonical_confidence(p))


@dataclass(frozen=True)
class StructuredOutput:
    """A well-formed response.

    ``boxes`` and ``answer`` are both ``None`` for an abstention; otherwise
    ``boxes`` is a non-empty tuple and ``answer`` a non-empty trimmed string.
    """

    think: str
    boxes: Optional[tuple[BoxPrediction, ...]]
    answer: Optional[str]

    def __post_init__(self) -> None:
        if "</think>" in self.think:
            raise ValueError("think text may not contain '</think>'")
        if (self.boxes is None) != (self.answer is None):
            raise ValueError("abstention must cover both boxes and answer")
        if self.boxes is not None:
            object.__setattr__(self, "boxes", tuple(self.boxes))
            if not self.boxes:
                raise ValueError("box list must be non-empty")
        if self.answer is not None:
            if self.answer != self.answer.strip() or not self.answer:
                raise ValueError(f"answer must be non-empty and trimmed, got {self.answer!r}")
            if "</answer>" in self.answer or _is_abstain_token(self.answer):
                raise ValueError(f"invalid concrete answer {self.answer!r}")

    @classmethod
    def abstain(cls, think: str = "") -> "StructuredOutput":
        return cls(think=think, boxes=None, answer=None)

    @property
    def abstained(self) -> bool:
        return self.answer is None

    @property
    def positions(self) -> list[BBox]:
        return [b.position for b in self.boxes or ()]


ParseOutcome = Union[StructuredOutput, FormatError]


def _is_abstain_token(s: str) -> bool:
    return s.strip().casefold() == ABSTAIN_TOKEN


def is_abstention(out: StructuredOutput) -> bool:
    return out.boxes is None and out.answer is None


def _scan(text: str) -> Union[tuple[str, str, str], FormatError]:
    """Split ``text`` into the three block bodies or report what is wrong."""
    bodies = []
    pos = 0
    for tag in TAGS:
        open_tag, close_tag = f"<{tag}>", f"</{tag}>"
        start = text.find(open_tag, pos)
        if start < 0:
            return FormatError(FormatErrorKind.MISSING_TAG, f"no {open_tag}")
        if text[pos:start].strip():
            return FormatError(FormatErrorKind.TRAILING_GARBAGE, f"content before {open_tag}")
        body_start = start + len(open_tag)
        end = text.find(close_tag, body_start)
        if end < 0:
            return FormatError(FormatErrorKind.MISSING_TAG, f"no {close_tag}")
        bodies.append(text[body_start:end])
        pos = end + len(close_tag)
    if text[pos:].strip():
        return FormatError(FormatErrorKind.TRAILING_GARBAGE, "content after </answer>")
    return bodies[0], bodies[1], bodies[2]


def _is_number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _finite(v: Union[int, float]) -> bool:
    return isinstance(v, int) or math.isfinite(v)


def _reject_constant(name: str) -> float:
    raise ValueError(f"non-finite JSON constant {name}")


def _parse_boxes(payload: str) -> Union[tuple[BoxPrediction, ...], FormatError]:
    bad = FormatErrorKind.MALFORMED_BOX_PAYLOAD
    try:
        data = json.loads(payload, parse_constant=_reject_constant)
    except (ValueError, RecursionError) as exc:
        return FormatError(bad, f"not JSON: {exc}")
    if not isinstance(data, list) or not data:
        return FormatError(bad, "expected a non-empty JSON array")
    boxes = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or set(item) != {"Position", "Confidence"}:
            return FormatError(bad, f"item {i} must have exactly Position and Confidence")
        position, confidence = item["Position"], item["Confidence"]
        if not isinstance(position, list) or len(position) != 4 or not all(map(_is_number, position)):
            return FormatError(bad, f"item {i} Position must be 4 numbers")
        if not _is_number(confidence) or not _finite(confidence) or abs(confidence) > 1e300:
            return FormatError(bad, f"item {i} Confidence must be a finite number")
        coords = []
        for v in position:
            if not _finite(v) or v != int(v):
                return FormatError(FormatErrorKind.INVALID_COORDINATES,
                                   f"item {i} coordinate {v!r} is not an integer")
            coords.append(int(v))
        try:
            boxes.append(BoxPrediction(BBox(*coords), float(confidence)))
        except InvalidGeometry as exc:
            return FormatError(bad, f"item {i}: {exc}")
    return tuple(boxes)


def parse(text: str) -> ParseOutcome:
    scanned = _scan(text)
    if isinstance(scanned, FormatError):
        return scanned
    think, payload, answer = scanned
    box_abstains = _is_abstain_token(payload)
    answer_abstains = _is_abstain_token(answer)
    if box_abstains != answer_abstains:
        return FormatError(FormatErrorKind.INCONSISTENT_ABSTENTION,
                           "bbox and answer must abstain together")
    if box_abstains:
        return StructuredOutput.abstain(think)
    answer = answer.strip()
    if not answer:
        return FormatError(FormatErrorKind.MISSING_TAG, "empty <answer> block")
    boxes = _parse_boxes(payload)
    if isinstance(boxes, FormatError):
        return boxes
    return StructuredOutput(think=think, boxes=boxes, answer=answer)


def _format_box(b: BoxPrediction) -> str:
    pos = ",".join(str(v) for v in b.position.as_list())
    return f'{{"Position":[{pos}],"Confidence":{b.confidence:.6g}}}'


def serialize(out: StructuredOutput) -> str:
    if is_abstention(out):
        payload = answer = ABSTAIN_TOKEN
    else:
        payload = "[" + ",".join(_format_box(b) for b in out.boxes) + "]"
        answer = out.answer
    return f"<think>{out.think}</think>\n<bbox>{payload}</bbox>\n<answer>{answer}</answer>"
