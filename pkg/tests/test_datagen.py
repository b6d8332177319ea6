import json

import numpy as np
import pytest

from seqsplat.datagen import (
    RULES, TEMPLATES, GenConfig, GenerationError, build_dataset, emit_dataset, generate_object,
    generate_scene, instantiate_rule, load_dataset, split_of,
)
from seqsplat.model import tokenize


def _rule(name):
    return next(r for r in RULES if r.name == name)


def test_object_generation_is_deterministic():
    t = TEMPLATES["microwave"]
    a, ma = generate_object(t, 5)
    b, mb = generate_object(t, 5)
    assert a.allclose(b, atol=0)
    assert all(np.array_equal(x.scores, y.scores) for x, y in zip(ma, mb))
    assert not generate_object(t, 6)[0].allclose(a, atol=0)


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_object_masks_cover_exactly_their_part_ranges(name):
    t = TEMPLATES[name]
    scene, masks = generate_object(t, 0)
    assert scene.n == t.n and len(masks) == len(t.parts)
    seen = np.zeros(t.n, dtype=int)
    for m, (_, aff, (lo, hi)) in zip(masks, t.part_ranges()):
        assert m.affordance_type == aff
        assert set(m.indices().tolist()) == set(range(lo, hi))
        seen[m.indices()] += 1
    assert np.all(seen == 1)  # disjoint and covering
    scene.validate()


def test_heat_food_scene_with_microwave_and_bowl():
    templates = {k: TEMPLATES[k] for k in ("microwave", "bowl")}
    scene, seqs, info = generate_scene(templates, [_rule("heat_food")], 0)
    assert sorted(info["objects"]) == ["bowl", "microwave"]
    assert seqs
    for seq in seqs:
        assert seq.T == 3
        assert [m.affordance_type for m in seq.masks] == ["open", "wrap_grasp", "press"]
        assert seq.texts[0] == "open the microwave door"
        assert seq.texts[2] == "press the start button"
        for m in seq.masks:
            assert m.n == scene.n and m.indices().size > 0
        a, b, c = (set(m.indices().tolist()) for m in seq.masks)
        assert not (a & b) and not (a & c) and not (b & c)
        # the bowl step lives on a different object than the microwave steps
        labels = [set(scene.object_labels[m.indices()].tolist()) for m in seq.masks]
        assert all(len(s) == 1 for s in labels)
        assert labels[0] == labels[2] != labels[1]


def test_rule_with_missing_category_fails():
    with pytest.raises(GenerationError):
        generate_scene({"bowl": TEMPLATES["bowl"]}, [_rule("heat_food")], 0)
    with pytest.raises(GenerationError):
        instantiate_rule(_rule("heat_food"), {"bowl": TEMPLATES["bowl"]}, np.random.default_rng(0))


def test_every_rule_resolves_against_the_library():
    assert len(RULES) >= 40
    for rule in RULES:
        assert rule.resolvable(TEMPLATES), rule.name
        assert 1 <= len(rule.step_specs) <= 8


def test_vocabulary_is_bounded():
    words = set()
    rng = np.random.default_rng(0)
    for rule in RULES:
        for _ in range(20):
            ins, steps = instantiate_rule(rule, TEMPLATES, rng)
            words.update(tokenize(ins))
            for text, _, _ in steps:
                words.update(tokenize(text))
    assert len(words) <= 200


def test_dataset_invariants(default_dataset):
    assert len(default_dataset) == 8
    for s in default_dataset:
        n_obj = len(set(s.scene.object_labels.tolist()))
        assert 2 <= n_obj <= 6
        assert s.sequences
        used = set()
        for seq in s.sequences:
            assert 1 <= seq.T <= 8
            for m in seq.masks:
                assert m.n == s.scene.n and m.indices().size > 0
                used |= set(s.scene.object_labels[m.indices()].tolist())
        if n_obj >= 3:
            assert len(used) < n_obj  # at least one distractor
        _assert_disjoint_footprints(s.scene)


def _assert_disjoint_footprints(scene):
    boxes = []
    for k in np.unique(scene.object_labels):
        p = scene.positions[scene.object_labels == k]
        boxes.append((p[:, 0].min(), p[:, 0].max(), p[:, 1].min(), p[:, 1].max()))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            assert a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2]


def test_scene_generation_is_deterministic():
    a = build_dataset(GenConfig(scenes=2, seed=3))
    b = build_dataset(GenConfig(scenes=2, seed=3))
    for x, y in zip(a, b):
        assert x.scene.content_hash() == y.scene.content_hash()
        assert [q.instruction for q in x.sequences] == [q.instruction for q in y.sequences]


def test_split_ratio_arithmetic():
    ids = [f"scene_{i:03d}" for i in range(8)]
    splits = split_of(ids, 0.75)
    assert sum(v == "train" for v in splits.values()) == 6
    assert split_of(ids, 0.75) == splits


def test_emit_dataset_files_split_and_hash(tmp_path):
    cfg = GenConfig(scenes=8, seed=0)
    m1 = emit_dataset(cfg, tmp_path / "a")
    assert len(list((tmp_path / "a" / "scenes").glob("*.ply"))) == 8
    assert len(list((tmp_path / "a" / "annotations").glob("*.json"))) == 8
    assert m1["counts"]["train"] == 6 and m1["counts"]["val"] == 2
    m2 = emit_dataset(cfg, tmp_path / "b")
    assert m1["content_hash"] == m2["content_hash"]
    disk = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert disk["content_hash"] == m1["content_hash"]
    loaded = load_dataset(tmp_path / "a" / "manifest.json")
    memory = build_dataset(cfg)
    for x, y in zip(loaded, memory):
        assert x.scene_id == y.scene_id and x.split == y.split
        assert x.scene.allclose(y.scene, atol=0)
        assert [q.texts for q in x.sequences] == [q.texts for q in y.sequences]
    assert len(load_dataset(tmp_path / "a" / "manifest.json", split="val")) == 2


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        GenConfig.from_dict({"scenes": 2, "colour": "red"})
