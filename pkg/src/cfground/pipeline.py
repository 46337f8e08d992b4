"""End-to-end dataset construction from a source JSONL of (image, question, answer),
and batch scoring of model responses against the resulting manifest."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dataset import (
    BuilderConfig,
    DescriptorSet,
    EmptyDescriptorSet,
    EmptyPartition,
    ScoredCandidate,
    TrainingInstance,
    build_instances,
    match_ocr,
    partition,
    read_manifest,
    write_manifest,
)
from .evidence import Detection, EvidenceClient, EvidenceError, OcrItem
from .geometry import BBox, InvalidGeometry, image_extent, iou, read_png
from .rewards import RewardConfig, ScoringContext, VariantTag, score_batch

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.35
RPN_DEDUP_IOU = 0.5


class BuildAborted(RuntimeError):
    def __init__(self, message: str, report: "BuildReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SourceRecord:
    index: int
    image: Path
    image_ref: str
    question: str
    answer: str


@dataclass
class BuildReport:
    records: int = 0
    instances: list[TrainingInstance] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    manifest: Optional[Path] = None

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.records if self.records else 0.0

    def summary(self) -> dict:
        return {
            "records": self.records,
            "instances": len(self.instances),
            "failures": len(self.failures),
            "failure_rate": self.failure_rate,
            "manifest": str(self.manifest) if self.manifest else None,
            "errors": self.failures,
        }


def read_source(path: Union[str, Path]) -> list[SourceRecord]:
    """Image paths resolve relative to the JSONL file's directory."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                image, question, answer = row["image"], row["question"], row["answer"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{i + 1}: bad source record ({exc})") from exc
            records.append(SourceRecord(len(records), path.parent / image, str(image), str(question), str(answer)))
    return records


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def assemble_candidates(
    proposals: Sequence[BBox],
    detections: Sequence[Detection],
    ocr_items: Sequence[OcrItem],
    descriptors: DescriptorSet,
    tau: float,
    dedup_iou: float = RPN_DEDUP_IOU,
) -> list[ScoredCandidate]:
    """Merge detector boxes, OCR regions and RPN proposals into one candidate list.

    Detector boxes carry their grounding score per phrase. RPN proposals that
    overlap a positive region (a detection above ``tau`` or a matching OCR
    region) by more than ``dedup_iou`` are dropped as duplicates of it.
    """
    known = set(descriptors)
    grounding: dict[BBox, dict[str, float]] = {}
    for d in detections:
        if d.phrase not in known:
            continue
        scores = grounding.setdefault(d.box, {})
        scores[d.phrase] = max(scores.get(d.phrase, 0.0), d.score)
    candidates = [ScoredCandidate(box, "det", grounding=scores) for box, scores in grounding.items()]
    candidates += [ScoredCandidate(o.box, "ocr", ocr_text=o.text) for o in ocr_items]

    positives = [c.box for c in candidates if c.best_score(descriptors) > tau or match_ocr(c, descriptors)]
    for p in proposals:
        if any(iou(p, q) > dedup_iou for q in positives):
            continue
        candidates.append(ScoredCandidate(p, "rpn"))
    return candidates


def process_record(
    rec: SourceRecord,
    client: EvidenceClient,
    cfg: BuilderConfig,
    tau: float,
    seed: int,
) -> list[TrainingInstance]:
    descriptors = client.extract_descriptors(rec.image, rec.question)
    proposals = client.propose_regions(rec.image)
    detections = client.detect(rec.image, descriptors)
    ocr_items = client.read_text(rec.image)
    candidates = assemble_candidates(proposals, detections, ocr_items, descriptors, tau)
    part = partition(candidates, descriptors, tau)
    image = read_png(rec.image)
    return build_instances(image, rec.question, rec.answer, part, record_seed(seed, rec.index), cfg,
                           source_image_path=rec.image_ref)


def build_dataset(
    source: Union[str, Path],
    client: EvidenceClient,
    out_dir: Union[str, Path],
    seed: int,
    tau: float = DEFAULT_TAU,
    fill: tuple[int, int, int] = (0, 0, 0),
    workers: int = 1,
    max_failure_rate: float = 0.1,
) -> BuildReport:
    """Run every record through the pipeline and write ``manifest.jsonl`` into ``out_dir``.

    Records that fail are logged and skipped; if more than ``max_failure_rate``
    of them fail the build raises :class:`BuildAborted` and no manifest is written.
    """
    out_dir = Path(out_dir)
    cfg = BuilderConfig(out_dir=out_dir, fill=fill)
    records = read_source(source)
    report = BuildReport(records=len(records))

    def run(rec: SourceRecord):
        try:
            return process_record(rec, client, cfg, tau, seed), None
        except (EvidenceError, EmptyDescriptorSet, EmptyPartition, InvalidGeometry, OSError) as exc:
            logger.error("record %d (%s) failed: %s", rec.index, rec.image_ref, exc)
            return None, {"record": rec.index, "image": rec.image_ref,
                          "error": type(exc).__name__, "detail": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, records))
    else:
        results = [run(r) for r in records]
    for instances, failure in results:
        if failure is not None:
            report.failures.append(failure)
        else:
            report.instances.extend(instances)
    if report.failure_rate > max_failure_rate:
        raise BuildAborted(
            f"{len(report.failures)}/{report.records} records failed "
            f"(ceiling {max_failure_rate:.0%})", report)
    report.manifest = out_dir / "manifest.jsonl"
    write_manifest(report.instances, report.manifest)
    return report


# ------------------------------------------------------------------- scoring


def scoring_contexts(
    instances: Sequence[TrainingInstance],
    image_dir: Union[str, Path],
) -> dict[str, Union[ScoringContext, str]]:
    """Scoring context per instance id, or an error string when one cannot be built.

    Counterfactual instances carry the abstention label, so their reference
    answer comes from the positive instance of the same (image, question).
    """
    image_dir = Path(image_dir)
    positives = {i.group_key: i for i in instances if i.variant is VariantTag.POS}
    out: dict[str, Union[ScoringContext, str]] = {}
    for inst in instances:
        gold = inst.label
        if inst.variant is VariantTag.CF:
            pos = positives.get(inst.group_key)
            if pos is None:
                out[inst.instance_id] = "no positive instance to take the reference answer from"
                continue
            gold = pos.label
        try:
            extent = image_extent(image_dir / inst.image_path)
            out[inst.instance_id] = ScoringContext(inst.variant, gold, inst.partition, extent)
        except (OSError, ValueError) as exc:
            out[inst.instance_id] = f"cannot build scoring context: {exc}"
    return out


def score_responses(
    manifest: Union[str, Path],
    responses: Union[str, Path],
    cfg: RewardConfig,
    image_dir: Union[str, Path, None] = None,
    workers: int = 1,
) -> list[dict]:
    """One output row per response line, in input order.

    Good lines yield ``{"instance_id", "r_ans", "r_fmt", "r_sel", "total"}``;
    bad ones ``{"line", "instance_id", "error"}``.
    """
    manifest = Path(manifest)
    contexts = scoring_contexts(read_manifest(manifest), image_dir or manifest.parent)
    rows: list[Optional[dict]] = []
    jobs: list[tuple[int, str, str, ScoringContext]] = []
    with Path(responses).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            iid = None
            try:
                rec = json.loads(line)
                iid, text = rec["instance_id"], rec["response"]
                if not isinstance(text, str):
                    raise TypeError("response must be a string")
            except (ValueError, KeyError, TypeError) as exc:
                rows.append({"line": lineno, "instance_id": iid, "error": f"malformed line: {exc}"})
                continue
            ctx = contexts.get(iid)
            if ctx is None:
                rows.append({"line": lineno, "instance_id": iid, "error": "unknown instance_id"})
            elif isinstance(ctx, str):
                rows.append({"line": lineno, "instance_id": iid, "error": ctx})
            else:
                jobs.append((len(rows), iid, text, ctx))
                rows.append(None)
    scores = score_batch([(text, ctx) for _, _, text, ctx in jobs], cfg, workers=workers)
    for (slot, iid, _, _), br in zip(jobs, scores):
        rows[slot] = {"instance_id": iid, **br.as_dict()}
    return rows
