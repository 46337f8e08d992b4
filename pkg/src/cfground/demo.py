"""A five-image synthetic corpus with stub fixtures for every evidence service.

Used by the test-suite and handy for trying the CLI end to end::

    cfground make-demo --out demo/
    cfground build-dataset --input demo/source.jsonl --services-config demo/services.json \\
        --out demo/built --seed 7
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .evidence import write_fixture
from .geometry import BBox, write_png

WIDTH, HEIGHT = 128, 96


@dataclass(frozen=True)
class DemoScene:
    image: str
    question: str
    answer: str
    descriptors: list
    detections: list      # [{"box", "phrase", "score"}]
    proposals: list       # [[x1, y1, x2, y2]]
    ocr: list             # [{"box", "text", "confidence"}]
    colors: dict          # box tuple -> RGB drawn into the image


SCENES = [
    DemoScene(
        image="street.png",
        question="What does his shirt say?",
        answer="surf",
        descriptors=["a man", "man's shirt", "a man"],
        detections=[
            {"box": [40, 10, 80, 90], "phrase": "a man", "score": 0.88},
            {"box": [46, 30, 74, 60], "phrase": "man's shirt", "score": 0.9},
        ],
        proposals=[[40, 10, 80, 90], [2, 2, 30, 30], [90, 5, 125, 40], [90, 50, 125, 92], [2, 60, 30, 92]],
        ocr=[{"box": [92, 8, 122, 20], "text": "CAFE", "confidence": 0.95}],
        colors={(40, 10, 80, 90): (200, 160, 120), (46, 30, 74, 60): (30, 90, 200),
                (2, 2, 30, 30): (90, 200, 90), (90, 5, 125, 40): (150, 150, 30),
                (90, 50, 125, 92): (120, 40, 160)},
    ),
    DemoScene(
        image="stop.png",
        question="What does the sign say?",
        answer="stop",
        descriptors=["the stop sign", "signboard"],
        detections=[{"box": [10, 10, 50, 50], "phrase": "signboard", "score": 0.9}],
        proposals=[[10, 10, 50, 50], [60, 10, 100, 40], [60, 50, 120, 90], [5, 60, 45, 90]]
        + [[4 + 10 * i, 2, 12 + 10 * i, 8] for i in range(8)],
        ocr=[
            {"box": [15, 22, 45, 38], "text": "STOP", "confidence": 0.98},
            {"box": [65, 55, 110, 65], "text": "no parking", "confidence": 0.2},
        ],
        colors={(10, 10, 50, 50): (220, 20, 20), (15, 22, 45, 38): (250, 250, 250),
                (60, 10, 100, 40): (40, 40, 40), (60, 50, 120, 90): (100, 160, 220)},
    ),
    DemoScene(
        image="kitchen.png",
        question="What color is the cup?",
        answer="red",
        descriptors=["the red cup"],
        detections=[
            {"box": [70, 40, 95, 70], "phrase": "the red cup", "score": 0.8},
            {"box": [10, 40, 35, 70], "phrase": "the red cup", "score": 0.3},
        ],
        proposals=[[70, 40, 95, 70], [10, 40, 35, 70], [0, 75, 128, 96], [40, 5, 90, 30],
                   [100, 5, 125, 35], [5, 5, 30, 30]],
        ocr=[],
        colors={(70, 40, 95, 70): (210, 30, 40), (10, 40, 35, 70): (30, 40, 210),
                (0, 75, 128, 96): (130, 90, 50), (40, 5, 90, 30): (220, 220, 200)},
    ),
    DemoScene(
        image="park.png",
        question="How many dogs are there?",
        answer="2",
        descriptors=["a dog"],
        detections=[
            {"box": [10, 50, 40, 80], "phrase": "a dog", "score": 0.7},
            {"box": [80, 55, 115, 85], "phrase": "a dog", "score": 0.65},
        ],
        proposals=[[10, 50, 40, 80], [80, 55, 115, 85], [45, 5, 85, 45], [0, 0, 30, 30], [95, 0, 128, 30]],
        ocr=[],
        colors={(10, 50, 40, 80): (160, 110, 60), (80, 55, 115, 85): (90, 60, 30),
                (45, 5, 85, 45): (40, 140, 40), (95, 0, 128, 30): (180, 220, 250)},
    ),
    DemoScene(
        image="blank.png",
        question="What is written on the wall?",
        answer="nothing",
        descriptors=["the wall text"],
        detections=[],
        proposals=[],
        ocr=[],
        colors={},
    ),
]


def render_scene(scene: DemoScene, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
    img = np.stack([(xx * 2) % 256, (yy * 2) % 256, np.full_like(xx, 128)], axis=-1).astype(np.uint8)
    if scene.colors:
        img = np.clip(img.astype(int) + rng.integers(-6, 7, size=img.shape), 0, 255).astype(np.uint8)
    for box, color in scene.colors.items():
        b = BBox(*box)
        img[b.y1:b.y2, b.x1:b.x2] = color
    return img


def make_demo_corpus(root: Union[str, Path]) -> dict[str, Path]:
    """Write images, ``source.jsonl``, stub fixtures and ``services.json`` under ``root``."""
    root = Path(root)
    images = root / "images"
    fixtures = root / "fixtures"
    rows = []
    for i, scene in enumerate(SCENES):
        path = write_png(render_scene(scene, seed=i), images / scene.image)
        rows.append({"image": f"images/{scene.image}", "question": scene.question, "answer": scene.answer})
        write_fixture(fixtures, "descriptors", path, {"question": scene.question},
                      {"descriptors": scene.descriptors})
        # the detector is queried with the deduplicated descriptor list
        phrases = list(dict.fromkeys(" ".join(d.split()) for d in scene.descriptors))
        write_fixture(fixtures, "detect", path, {"phrases": phrases}, {"detections": scene.detections})
        write_fixture(fixtures, "propose", path, {}, {"boxes": scene.proposals})
        write_fixture(fixtures, "ocr", path, {}, {"items": scene.ocr})
    source = root / "source.jsonl"
    source.write_text("".join(json.dumps(r) + "\n" for r in rows))
    services = root / "services.json"
    services.write_text(json.dumps({"mode": "stub", "fixture_dir": "fixtures"}, indent=2) + "\n")
    return {"root": root, "source": source, "services": services, "fixtures": fixtures, "images": images}
