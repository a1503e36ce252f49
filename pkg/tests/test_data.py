from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fixtures import (
    EXPECTED_NONPERSON,
    EXPECTED_NONPERSON_CROPS,
    EXPECTED_PERSON,
    EXPECTED_PERSON_CROPS,
    make_coco,
    write_coco_fixture,
)
from patchforge.data import (
    PERSON,
    AnnotationRecord,
    CropSpec,
    InsufficientPoolError,
    build_splits,
    candidate_crops,
    compute_padded_box,
    extract_crops,
    filter_annotations,
    index_by_image,
    load_split,
    parse_coco,
    pixel_box,
    read_manifest,
    select_attack_subset,
    write_manifest,
)
from patchforge.data.splits import DatasetManifest


def rec(image_id, category, k=0, bbox=(0, 0, 10, 10)):
    return AnnotationRecord(image_id, category, bbox, ann_id=image_id * 100 + k)


def test_filter_basic_cases():
    anns = [rec(1, "person", 0), rec(1, "person", 1)]
    anns += [rec(2, "dog", k) for k in range(3)]
    anns += [rec(3, "person", k) for k in range(4)]
    out = filter_annotations(anns)
    assert out.person_ids == [1] and out.nonperson_ids == [2] and out.rejected == []


def test_filter_empty_input():
    out = filter_annotations([])
    assert out.person_ids == [] and out.nonperson_ids == []


def test_malformed_record_is_reported_and_image_dropped():
    anns = [rec(1, "person"), rec(1, "person", 1, bbox=(0, 0, 0, 5)), rec(2, "person")]
    out = filter_annotations(anns)
    assert out.person_ids == [2]
    assert out.rejected == [101]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 4)), min_size=10, max_size=10))
def test_filter_matches_bruteforce_predicate(counts):
    anns = []
    for image_id, (n_person, n_other) in enumerate(counts):
        anns += [rec(image_id, "person", k) for k in range(n_person)]
        anns += [rec(image_id, "car", 10 + k) for k in range(n_other)]
    out = filter_annotations(anns)
    present = [i for i, (a, b) in enumerate(counts) if a + b > 0]
    assert out.person_ids == [i for i in present if 1 <= counts[i][0] <= 3]
    assert out.nonperson_ids == [i for i in present if counts[i][0] == 0]


def test_padded_box_hand_oracle():
    assert compute_padded_box((100, 100, 100, 100), 0.15, (1000, 1000)) == (92.5, 92.5, 115.0, 115.0)
    assert compute_padded_box((10, 20, 30, 40), 0.0, (100, 100)) == (10, 20, 30, 40)


def test_padded_box_clipped_at_edge():
    x, y, w, h = compute_padded_box((0, 0, 50, 40), 0.15, (60, 45))
    assert (x, y) == (0.0, 0.0) and x + w <= 60 and y + h <= 45
    assert w == pytest.approx(53.75) and h == pytest.approx(43.0)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        compute_padded_box((0, 0, 0, 10), 0.15, (100, 100))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 90), st.floats(0, 90), st.floats(1, 60), st.floats(1, 60), st.floats(0, 1))
def test_padded_box_stays_in_image(x, y, w, h, pad):
    px, py, pw, ph = compute_padded_box((x, y, w, h), pad, (100, 100))
    assert px >= 0 and py >= 0 and px + pw <= 100 + 1e-9 and py + ph <= 100 + 1e-9
    ix, iy, iw, ih = pixel_box((px, py, pw, ph), (100, 100))
    assert ix <= px and iy <= py and ix + iw >= min(100, px + pw) - 1e-9


def test_crop_is_subregion(tmp_path):
    arr = np.random.default_rng(0).integers(0, 255, (80, 90, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    spec = CropSpec("a", 0, "a.png", (0, 0, 50, 50), (0, 0, 50, 50), PERSON, "train")
    summary = extract_crops([spec], tmp_path, tmp_path / "out")
    crop = np.asarray(Image.open(summary.written[0]))
    assert crop.shape == (50, 50, 3) and np.array_equal(crop, arr[:50, :50])


def test_missing_image_is_recorded_and_extraction_continues(tmp_path):
    for i in range(5):
        Image.new("RGB", (20, 20)).save(tmp_path / f"{i}.png")
    specs = [CropSpec(i, 0, f"{i}.png", (0, 0, 5, 5), (0, 0, 5, 5), PERSON, "train") for i in range(6)]
    summary = extract_crops(specs, tmp_path, tmp_path / "out", workers=2)
    assert len(summary.written) == 5 and len(summary.failures) == 1
    assert summary.failures[0][0].image_id == 5


@pytest.fixture(scope="module")
def coco_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("coco")
    write_coco_fixture(root, skip_images={7})
    return root


def _pools(coco):
    index = index_by_image(coco.annotations)
    filtered = filter_annotations(coco.annotations, index)
    return filtered, candidate_crops(index, coco.images, filtered.person_ids, filtered.nonperson_ids)


def test_fixture_qualifying_counts():
    filtered, (person, nonperson) = _pools(parse_coco(make_coco()))
    assert filtered.person_ids == EXPECTED_PERSON
    assert filtered.nonperson_ids == EXPECTED_NONPERSON
    assert sorted(filtered.rejected) == [591, 601]
    assert len(person) == EXPECTED_PERSON_CROPS and len(nonperson) == EXPECTED_NONPERSON_CROPS


@pytest.mark.parametrize("sizes", [(2, 2, 2), (20, 4, 4), (40, 10, 10)])
def test_splits_balanced_and_image_disjoint(sizes):
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    m = build_splits(person, nonperson, sizes, seed=2)
    for name, size in zip(("train", "val", "test"), sizes):
        crops = m.split(name)
        assert len(crops) == size
        assert sum(c.label == PERSON for c in crops) == size // 2
    ids = [m.image_ids(s) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert not ({c.image_id for c in m.reserve} & (ids[0] | ids[1] | ids[2]))


def test_full_scale_sizes_on_large_pools():
    person = [CropSpec(i, 0, "", (0, 0, 1, 1), (0, 0, 1, 1), PERSON) for i in range(15000)]
    other = [CropSpec(10**6 + i, 0, "", (0, 0, 1, 1), (0, 0, 1, 1), "non_person") for i in range(15000)]
    m = build_splits(person, other)
    assert m.counts == {"person/train": 10000, "non_person/train": 10000, "person/val": 1250,
                        "non_person/val": 1250, "person/test": 1250, "non_person/test": 1250}
    for split in ("train", "val", "test"):
        assert sum(c.label == PERSON for c in m.split(split)) == len(m.split(split)) // 2

    # reserve only holds 2500 person crops here; a larger pool keeps the subset held out
    bigger = build_splits(person + [replace(c, image_id=c.image_id + 10**5) for c in person[:5000]], other)
    attack = select_attack_subset(bigger, 5000, seed=2)
    assert len(attack) == 5000
    assert not ({c.image_id for c in attack} & bigger.image_ids("train"))


def test_insufficient_pool_names_class_and_shortfall():
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    with pytest.raises(InsufficientPoolError, match=r"person pool has 52 crops, 60 needed \(short by 8\)"):
        build_splits(person, nonperson, (100, 10, 10))


def test_same_seed_identical_manifest_bytes(tmp_path):
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    for name in ("a", "b"):
        m = build_splits(person, nonperson, (20, 4, 4), seed=2)
        m.attack = select_attack_subset(m, 5)
        write_manifest(m, tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    other = build_splits(person, nonperson, (20, 4, 4), seed=3)
    write_manifest(other, tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_manifest_round_trip(tmp_path):
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    m = build_splits(person, nonperson, (20, 4, 4))
    m.attack = select_attack_subset(m, 4)
    write_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.crops == m.crops and back.attack == m.attack and back.reserve == m.reserve
    assert back.config() == m.config()


def test_attack_subset_edge_cases(caplog):
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    m = build_splits(person, nonperson, (20, 4, 4))
    assert select_attack_subset(m, 0) == []
    reserve_person = [c for c in m.reserve if c.label == PERSON]
    whole = select_attack_subset(m, len(reserve_person))
    assert sorted((c.image_id, c.k) for c in whole) == sorted((c.image_id, c.k) for c in reserve_person)
    assert all(c.split == "attack" for c in whole)
    tight = build_splits(person, nonperson, (60, 20, 20))
    n = len([c for c in tight.reserve if c.label == PERSON]) + 1
    with caplog.at_level("WARNING"):
        fallback = select_attack_subset(tight, n)
    assert "train split" in caplog.text and len(fallback) == n
    assert {c.image_id for c in fallback} <= tight.image_ids("train")
    with pytest.raises(InsufficientPoolError):
        select_attack_subset(m, 10**4)
    with pytest.raises(ValueError):
        select_attack_subset(m, 1, source="elsewhere")


def test_full_fixture_extraction(coco_dir, tmp_path):
    from patchforge.data import load_coco

    coco = load_coco(coco_dir / "instances.json")
    _, (person, nonperson) = _pools(coco)
    m = build_splits(person, nonperson, (20, 4, 4))
    summary = extract_crops(m, coco_dir / "images", tmp_path)
    assert len(summary.written) == len(m.crops) - len(summary.failures)
    assert all(spec.image_id == 7 for spec, _ in summary.failures)
    if not summary.failures:
        X, y = load_split(m, tmp_path, "val", 32)
        assert X.shape == (4, 3, 32, 32) and y.sum() == 2


def test_load_split_missing_crops_mentions_producer(tmp_path):
    _, (person, nonperson) = _pools(parse_coco(make_coco()))
    m = build_splits(person, nonperson, (2, 2, 2))
    with pytest.raises(FileNotFoundError, match="build-dataset"):
        load_split(m, tmp_path, "train", 32)


def test_manifest_validate_catches_leak():
    spec = CropSpec(1, 0, "", (0, 0, 1, 1), (0, 0, 1, 1), PERSON, "train")
    other = CropSpec(2, 0, "", (0, 0, 1, 1), (0, 0, 1, 1), "non_person", "train")
    leaked = DatasetManifest([spec, other, replace(spec, k=1, split="val"), replace(other, k=1, split="val")],
                             0.15, 2, (2, 2, 0))
    with pytest.raises(ValueError, match="appears in"):
        leaked.validate()
