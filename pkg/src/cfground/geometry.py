"""Axis-aligned box arithmetic and raster masking.

Boxes use integer pixel coordinates with the half-open convention
``[x1, x2) x [y1, y2)``, so the area of a box is ``(x2 - x1) * (y2 - y1)``
and every area below is an exact integer until the final IoU division.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from PIL import Image

RGB = tuple[int, int, int]

NAMED_COLORS: dict[str, RGB] = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "grey": (128, 128, 128),
}


class InvalidGeometry(ValueError):
    """Raised for degenerate or out-of-extent boxes."""


@dataclass(frozen=True, order=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise InvalidGeometry(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise InvalidGeometry(f"degenerate box {self.as_list()}")

    @classmethod
    def of(cls, coords: Union["BBox", Sequence[int]]) -> "BBox":
        if isinstance(coords, BBox):
            return coords
        if len(coords) != 4:
            raise InvalidGeometry(f"expected 4 coordinates, got {len(coords)}")
        return cls(*coords)

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def within(self, extent: "ImageExtent") -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= extent.width and self.y2 <= extent.height


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidGeometry(f"image extent must be positive, got {self.width}x{self.height}")

    @classmethod
    def of_raster(cls, image: np.ndarray) -> "ImageExtent":
        return cls(width=int(image.shape[1]), height=int(image.shape[0]))

    def full_box(self) -> BBox:
        return BBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class RegionPartition:
    """Evidence regions and the irrelevant remainder of a candidate set."""

    evidence: tuple[BBox, ...] = field(default_factory=tuple)
    irrelevant: tuple[BBox, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "evidence", tuple(BBox.of(b) for b in self.evidence))
        object.__setattr__(self, "irrelevant", tuple(BBox.of(b) for b in self.irrelevant))
        shared = set(self.evidence) & set(self.irrelevant)
        if shared:
            raise InvalidGeometry(f"boxes in both evidence and irrelevant sets: {sorted(shared)}")

    @property
    def candidates(self) -> tuple[BBox, ...]:
        return self.evidence + self.irrelevant


def intersection_area(a: BBox, b: BBox) -> int:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    a, b = BBox.of(a), BBox.of(b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def max_overlap(box: BBox, regions: Iterable[BBox]) -> float:
    """Best IoU of ``box`` against ``regions``; 0.0 for an empty set."""
    return max((iou(box, r) for r in regions), default=0.0)


def clip(box: Union[BBox, Sequence[int]], extent: ImageExtent) -> BBox:
    """Clamp raw coordinates into the image; raises if nothing is left."""
    raw = box.as_list() if isinstance(box, BBox) else [int(v) for v in box]
    x1, y1, x2, y2 = raw
    x1, x2 = max(0, min(x1, extent.width)), max(0, min(x2, extent.width))
    y1, y2 = max(0, min(y1, extent.height)), max(0, min(y2, extent.height))
    if x1 >= x2 or y1 >= y2:
        raise InvalidGeometry(f"box {raw} has zero area inside {extent.width}x{extent.height}")
    return BBox(x1, y1, x2, y2)


def mask_regions(image: np.ndarray, regions: Iterable[BBox], fill: RGB) -> np.ndarray:
    """Return a copy of ``image`` with every pixel inside ``regions`` set to ``fill``."""
    extent = ImageExtent.of_raster(image)
    out = image.copy()
    value = np.asarray(fill, dtype=image.dtype)
    if image.ndim == 2:
        value = value[0] if value.ndim else value
    for r in regions:
        r = BBox.of(r)
        if not r.within(extent):
            raise InvalidGeometry(f"region {r.as_list()} outside {extent.width}x{extent.height}")
        out[r.y1:r.y2, r.x1:r.x2] = value
    return out


def region_mask(extent: ImageExtent, regions: Iterable[BBox]) -> np.ndarray:
    """Boolean HxW mask of the union of ``regions``."""
    mask = np.zeros((extent.height, extent.width), dtype=bool)
    for r in regions:
        r = clip(r, extent)
        mask[r.y1:r.y2, r.x1:r.x2] = True
    return mask


def pixel_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Boolean HxW mask of pixels that differ in any channel."""
    if a.shape != b.shape:
        raise ValueError(f"raster shapes differ: {a.shape} vs {b.shape}")
    diff = a != b
    return diff.any(axis=-1) if diff.ndim == 3 else diff


def parse_color(spec: Union[str, Sequence[int]]) -> RGB:
    """Accepts a color name, ``#rrggbb`` or ``r,g,b``."""
    if not isinstance(spec, str):
        vals = tuple(int(v) for v in spec)
    else:
        s = spec.strip().lower()
        if s in NAMED_COLORS:
            return NAMED_COLORS[s]
        if s.startswith("#") and len(s) == 7:
            vals = tuple(int(s[i:i + 2], 16) for i in (1, 3, 5))
        else:
            vals = tuple(int(v) for v in s.split(","))
    if len(vals) != 3 or any(not 0 <= v <= 255 for v in vals):
        raise ValueError(f"invalid RGB color {spec!r}")
    return vals  # type: ignore[return-value]


def read_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def image_extent(path: Union[str, Path]) -> ImageExtent:
    with Image.open(path) as im:
        return ImageExtent(*im.size)


def write_ppm(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Binary P6 writer; handy for byte-level comparisons in tests."""
    path = Path(path)
    rgb = np.ascontiguousarray(image, dtype=np.uint8)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    h, w = rgb.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
    return path
