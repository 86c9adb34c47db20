import json
import math

import numpy as np
import pytest

from defect_yolo.data import DatasetManifest, read_annotations
from defect_yolo.errors import ArgumentError, ConfigError, GenerationError
from defect_yolo.synth import (BACKGROUND, GEAR_TEETH, METAL, GenSpec, changed_box, gen_dataset, gen_defect, gen_part,
                               generate_sample, _geometry)
from defect_yolo.taxonomy import PART_DEFECTS, SEVERITIES


def rng(seed):
    return np.random.default_rng(seed)


def test_gen_part_deterministic():
    for kind in PART_DEFECTS:
        np.testing.assert_array_equal(gen_part(kind, 96, rng(3)), gen_part(kind, 96, rng(3)))


def test_bearing_center_is_background():
    img = gen_part("bearing", 128, rng(0))
    assert abs(float(img[64, 64].mean()) - BACKGROUND) < 20
    assert abs(float(img[64, 64].mean()) - METAL) > 60


def test_gear_has_twelve_teeth():
    geo = _geometry("gear", 256)
    mask = geo.mask()
    # walk a circle through the tooth band and count metal runs
    cx, cy = geo.center
    r = 0.9 * geo.radius
    angles = np.linspace(0, 2 * math.pi, 3600, endpoint=False)
    xs = np.floor(cx + r * np.cos(angles)).astype(int)
    ys = np.floor(cy + r * np.sin(angles)).astype(int)
    ring = mask[ys, xs]
    runs = int(np.sum(ring & ~np.roll(ring, 1)))
    assert runs == GEAR_TEETH == 12
    sizes = [geo.tooth_mask(k).sum() for k in range(GEAR_TEETH)]
    assert max(sizes) - min(sizes) <= 0.1 * np.mean(sizes)


def test_gen_part_too_small():
    with pytest.raises(ArgumentError):
        gen_part("gear", 32, rng(0))


@pytest.mark.parametrize("part,defect", [(p, d) for p, ds in PART_DEFECTS.items() for d in ds])
def test_bbox_covers_changed_pixels(part, defect):
    for seed in range(5):
        base = gen_part(part, 128, rng(seed))
        out, rec = gen_defect(base, part, defect, SEVERITIES[seed % 3], rng(100 + seed))
        x0, y0, x1, y1 = changed_box(base, out)
        assert rec.is_valid()
        bx1, by1, bx2, by2 = (v * 128 for v in rec.corners())
        assert max(abs(bx1 - x0), abs(by1 - y0), abs(bx2 - (x1 + 1)), abs(by2 - (y1 + 1))) <= 1.0


def test_multi_defect_ground_truth_is_tight():
    for seed in range(10):
        s = generate_sample("gear", [("burr", "minor"), ("wear", "severe"), ("broken_tooth", "moderate")], 128,
                            rng(seed))
        diff = (s.clean != s.image).any(axis=2)
        covered = np.zeros_like(diff)
        for r in s.records:
            x1, y1, x2, y2 = (int(round(v * 128)) for v in r.corners())
            covered[y1:y2, x1:x2] = True
        assert not np.any(diff & ~covered)
        assert len(s.records) == len(s.defects)


def test_severity_grows_scratch_extent():
    base = gen_part("bearing", 160, rng(0))
    for seed in range(30):
        areas = []
        for sev in ("minor", "severe"):
            _, rec = gen_defect(base, "bearing", "scratch", sev, rng(seed))
            areas.append(rec.w * rec.h)
        assert areas[1] >= areas[0]


def test_different_seeds_give_different_defects():
    base = gen_part("bolt", 128, rng(0))
    for seed in range(100):
        a, _ = gen_defect(base, "bolt", "crack", "moderate", rng(seed))
        b, _ = gen_defect(base, "bolt", "crack", "moderate", rng(seed + 1000))
        assert not np.array_equal(a != base, b != base)


def test_incompatible_pair():
    with pytest.raises(GenerationError, match="broken_tooth"):
        gen_defect(gen_part("bearing", 64, rng(0)), "bearing", "broken_tooth", "minor", rng(0))


def test_gen_spec_validation():
    with pytest.raises(ConfigError):
        GenSpec(counts={("bolt", "scratch"): 1})
    with pytest.raises(ConfigError):
        GenSpec(counts={("bolt", "rust"): 1}, severity_mix={"minor": 0.5})
    with pytest.raises(ConfigError):
        GenSpec.from_dict({"counts": {"bolt/rust": 1}, "colour": "red"})


SPEC = {"counts": {"bearing/scratch": 10, "gear/wear": 10, "bolt/rust": 10}, "image_size": [64, 64],
        "seed": 7, "defect_free_fraction": 0.25}


def test_gen_dataset_counts(tmp_path):
    m = gen_dataset(GenSpec.from_dict(SPEC), tmp_path)
    assert len(m.entries) == 40
    assert len(list((tmp_path / "images").iterdir())) == 40
    empty = [e for e in m.entries if not read_annotations(tmp_path / e.annotation)]
    assert len(empty) == 10
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert [e.image for e in back.entries] == [e.image for e in m.entries]
    per = {}
    for e in m.entries:
        per[e.dominant] = per.get(e.dominant, 0) + 1
    assert per == {"scratch": 10, "wear": 10, "rust": 10, "none": 10}


def test_gen_dataset_byte_identical(tmp_path):
    spec = GenSpec.from_dict(SPEC)
    gen_dataset(spec, tmp_path / "a")
    gen_dataset(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["entries"]
