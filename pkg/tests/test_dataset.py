import json
import logging
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfground.dataset import (
    BuilderConfig,
    DescriptorSet,
    EmptyDescriptorSet,
    EmptyPartition,
    ScoredCandidate,
    TrainingInstance,
    build_instances,
    file_sha256,
    match_ocr,
    partition,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from cfground.geometry import BBox, RegionPartition, read_png, write_png
from cfground.rewards import VariantTag

from oracles import cells_of, changed_pixels


def cand(box, **scores):
    return ScoredCandidate(BBox(*box), "det" if scores else "rpn", grounding=scores)


def test_descriptor_set_dedup_and_trim():
    d = DescriptorSet(("a man", " man's  shirt ", "a man"))
    assert tuple(d) == ("a man", "man's shirt")
    with pytest.raises(EmptyDescriptorSet):
        DescriptorSet(("  ", ""))


def test_partition_threshold_is_strict():
    d = DescriptorSet(("k",))
    r1, r2 = cand((0, 0, 2, 2), k=0.9), cand((3, 3, 5, 5), k=0.3)
    assert partition([r1, r2], d, 0.5) == RegionPartition((r1.box,), (r2.box,))
    r1, r2 = cand((0, 0, 2, 2), k=0.51), cand((3, 3, 5, 5), k=0.50)
    assert partition([r1, r2], d, 0.5).evidence == (r1.box,)
    low = partition([cand((0, 0, 2, 2), k=0.2), cand((3, 3, 5, 5))], d, 0.5)
    assert low.evidence == ()


def test_partition_uses_best_descriptor_score_and_merges_duplicates():
    d = DescriptorSet(("a", "b"))
    box = (0, 0, 4, 4)
    p = partition([cand(box, a=0.1, b=0.8), ScoredCandidate(BBox(*box), "rpn")], d, 0.5)
    assert p.evidence == (BBox(*box),) and p.irrelevant == ()
    # scores for phrases outside the descriptor set do not count
    assert partition([cand(box, z=0.99)], d, 0.5).evidence == ()


def test_partition_empty_candidates():
    with pytest.raises(EmptyPartition):
        partition([], DescriptorSet(("k",)), 0.35)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 1)), min_size=1, max_size=12),
       st.floats(0.05, 0.95))
def test_partition_covers_candidates_disjointly(raw, tau):
    d = DescriptorSet(("k",))
    cands = [cand((x, y, x + 1, y + 1), k=s) for x, y, s in raw]
    p = partition(cands, d, tau)
    assert set(p.evidence).isdisjoint(p.irrelevant)
    assert set(p.candidates) == {c.box for c in cands}
    for b in p.evidence:
        assert any(c.box == b and c.grounding["k"] > tau for c in cands)


def test_match_ocr():
    d = DescriptorSet(("the stop sign",))
    assert match_ocr(ScoredCandidate(BBox(0, 0, 1, 1), "ocr", ocr_text="STOP"), d)
    assert not match_ocr(ScoredCandidate(BBox(0, 0, 1, 1), "ocr", ocr_text="open 24h"), DescriptorSet(("the red cup",)))
    assert match_ocr(ScoredCandidate(BBox(0, 0, 1, 1), "ocr", ocr_text="red cup"), DescriptorSet(("red cup",)))
    assert not match_ocr(cand((0, 0, 1, 1), k=0.9), d)


def _scene(seed=0, h=24, w=32):
    return np.random.default_rng(seed).integers(1, 256, (h, w, 3), dtype=np.uint8)


def test_build_instances_locality(tmp_path):
    img = _scene()
    part = RegionPartition((BBox(2, 2, 8, 8),), (BBox(10, 0, 14, 4), BBox(20, 10, 30, 20), BBox(0, 18, 6, 24)))
    cfg = BuilderConfig(out_dir=tmp_path)
    out = build_instances(img, "q?", "cat", part, seed=7, cfg=cfg, source_image_path="x.png")
    assert [i.variant for i in out] == [VariantTag.POS, VariantTag.CF, VariantTag.RAND]
    pos, cf, rand = out
    assert cf.label == "Unknown" and rand.label == "cat" and pos.label == "cat"
    assert cf.masked == part.evidence
    assert len(rand.masked) == 1 and set(rand.masked) <= set(part.irrelevant)
    base = read_png(tmp_path / pos.image_path)
    assert np.array_equal(base, img)
    assert changed_pixels(base, read_png(tmp_path / cf.image_path)) == cells_of([[2, 2, 8, 8]])
    assert changed_pixels(base, read_png(tmp_path / rand.image_path)) == cells_of([b.as_list() for b in rand.masked])


def test_build_instances_degenerate_cases(tmp_path, caplog):
    img = _scene()
    cfg = BuilderConfig(out_dir=tmp_path)
    none = build_instances(img, "q", "a", RegionPartition((), (BBox(0, 0, 4, 4),)), 1, cfg)
    assert [i.variant for i in none] == [VariantTag.POS]
    with caplog.at_level(logging.WARNING):
        no_neg = build_instances(img, "q", "a", RegionPartition((BBox(0, 0, 4, 4),), ()), 1, cfg)
    assert [i.variant for i in no_neg] == [VariantTag.POS, VariantTag.CF]
    assert "skipping the random-mask instance" in caplog.text


def test_random_mask_size_is_min_of_both_sets(tmp_path):
    img = _scene()
    ev = (BBox(0, 0, 2, 2), BBox(3, 0, 5, 2), BBox(6, 0, 8, 2))
    neg = tuple(BBox(x, 10, x + 2, 12) for x in range(0, 20, 4))
    out = build_instances(img, "q", "a", RegionPartition(ev, neg), 3, BuilderConfig(out_dir=tmp_path))
    assert len(out[2].masked) == 3
    out = build_instances(img, "q", "a", RegionPartition(ev, neg[:2]), 3, BuilderConfig(out_dir=tmp_path))
    assert len(out[2].masked) == 2


def test_build_instances_deterministic(tmp_path):
    img = _scene(5)
    part = RegionPartition((BBox(2, 2, 8, 8),), tuple(BBox(x, 12, x + 3, 15) for x in range(0, 30, 5)))
    runs = []
    for d in ("a", "b"):
        cfg = BuilderConfig(out_dir=tmp_path / d)
        out = build_instances(img, "q", "a", part, seed=11, cfg=cfg, source_image_path="s.png")
        write_manifest(out, tmp_path / d / "m.jsonl")
        runs.append(file_sha256(tmp_path / d / "m.jsonl"))
        runs.append(sorted(p.read_bytes() for p in (tmp_path / d / "images").rglob("*.png")))
    assert runs[0] == runs[2] and runs[1] == runs[3]


def test_manifest_round_trip(tmp_path):
    part = RegionPartition((BBox(2, 2, 8, 8),), (BBox(10, 0, 14, 4),))
    out = build_instances(_scene(), "q", "a", part, 1, BuilderConfig(out_dir=tmp_path), "s.png")
    n = write_manifest(reversed(out), tmp_path / "m.jsonl")
    assert n == 3
    assert read_manifest(tmp_path / "m.jsonl") == out
    assert write_manifest([], tmp_path / "empty.jsonl") == 0
    assert (tmp_path / "empty.jsonl").read_text() == ""


def test_training_instance_rejects_missing_fields():
    with pytest.raises(ValueError):
        TrainingInstance.from_json({"instance_id": "x"})


# ------------------------------------------------------------ validation


def _copy(built, tmp_path):
    src = built.manifest.parent
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    return dst / "manifest.jsonl"


def _rows(manifest):
    return [json.loads(line) for line in manifest.read_text().splitlines()]


def _write_rows(manifest, rows):
    manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_fresh_build_validates(built):
    assert validate_manifest(built.manifest, fill=(0, 0, 0)) == []


def test_tampered_cf_raster_reports_locality(built, tmp_path):
    manifest = _copy(built, tmp_path)
    row = next(r for r in _rows(manifest) if r["variant"] == "cf")
    path = manifest.parent / row["image_path"]
    img = read_png(path)
    ev = [BBox(*b) for b in row["evidence"]]
    outside = next((x, y) for y in range(img.shape[0]) for x in range(img.shape[1])
                   if not any(b.x1 <= x < b.x2 and b.y1 <= y < b.y2 for b in ev))
    img[outside[1], outside[0]] ^= 0xFF
    write_png(img, path)
    kinds = {(v.instance_id, v.kind) for v in validate_manifest(manifest)}
    assert (row["instance_id"], "variant-locality") in kinds


def test_missing_raster_reported(built, tmp_path):
    manifest = _copy(built, tmp_path)
    row = _rows(manifest)[3]
    (manifest.parent / row["image_path"]).unlink()
    assert any(v.kind == "missing-file" and v.instance_id == row["instance_id"]
               for v in validate_manifest(manifest))


def test_label_and_mask_rules_reported(built, tmp_path):
    manifest = _copy(built, tmp_path)
    rows = _rows(manifest)
    cf = next(r for r in rows if r["variant"] == "cf")
    cf["label"] = "stop"
    rand = next(r for r in rows if r["variant"] == "rand")
    rand["masked"] = rand["evidence"][:1]
    dup = dict(rows[0])
    _write_rows(manifest, rows + [dup])
    kinds = {v.kind for v in validate_manifest(manifest)}
    assert {"label-rule", "duplicate-id"} <= kinds


def test_fill_mismatch_reported(built):
    assert any(v.kind == "fill-mismatch" for v in validate_manifest(built.manifest, fill=(255, 255, 255)))


def test_unreadable_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("{not json\n")
    assert [v.kind for v in validate_manifest(tmp_path / "m.jsonl")] == ["unreadable-manifest"]
