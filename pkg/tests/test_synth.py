import numpy as np
import pytest

from boxmend.dataset import Category
from boxmend.exceptions import PlacementFailure, UnknownClass
from boxmend.geometry import ImageDims, Mask, Point, mask_iou, mask_to_box
from boxmend.protocol import Prompt
from boxmend.synth import (
    OracleFidelity,
    SceneSpec,
    generate_scene,
    generate_scenes,
    oracle_label_score,
    oracle_segment,
    scenes_from_dataset,
    scenes_to_dataset,
)

TAXONOMY = (Category(1, "circle"), Category(2, "rectangle"), Category(3, "triangle"))


def small_spec(**overrides) -> SceneSpec:
    base = dict(
        dims=ImageDims(96, 96),
        num_objects=3,
        shape_classes=TAXONOMY,
        min_size=14,
        max_size=28,
        allow_overlap=False,
        seed=11,
    )
    base.update(overrides)
    return SceneSpec(**base)


PERFECT = OracleFidelity()


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(small_spec())
        b = generate_scene(small_spec())
        assert np.array_equal(a.instance_map, b.instance_map)
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations

    def test_circle_box_size(self):
        spec = small_spec(
            num_objects=1, shape_classes=(Category(1, "circle"),), min_size=20, max_size=20
        )
        scene = generate_scene(spec)
        box = scene.annotations[0].box
        assert abs(box.w - 20) <= 1 and abs(box.h - 20) <= 1

    def test_masks_consistent_with_instance_map_and_boxes(self):
        scene = generate_scene(small_spec(seed=4))
        for i, ann in enumerate(scene.annotations, start=1):
            assert np.array_equal(ann.mask.data, scene.instance_map == i)
            assert mask_to_box(ann.mask) == ann.box

    def test_no_overlap_respected(self):
        scene = generate_scene(small_spec(seed=8, num_objects=4))
        total = sum(a.mask.count() for a in scene.annotations)
        assert total == int((scene.instance_map > 0).sum())

    def test_placement_failure(self):
        spec = small_spec(
            dims=ImageDims(64, 64), num_objects=50, min_size=30, max_size=40
        )
        with pytest.raises(PlacementFailure):
            generate_scene(spec)

    def test_generate_scenes_unique_ids(self):
        scenes = generate_scenes(small_spec(), 5)
        assert [s.record.id for s in scenes] == [1, 2, 3, 4, 5]
        assert len({s.record.file_path for s in scenes}) == 5

    def test_dataset_round_trip_through_scene_rebuild(self):
        scenes = generate_scenes(small_spec(), 3)
        d = scenes_to_dataset(scenes)
        assert len(d.annotations) == sum(len(s.annotations) for s in scenes)
        rebuilt = scenes_from_dataset(d)
        for orig, back in zip(scenes, rebuilt):
            assert np.array_equal(orig.instance_map > 0, back.instance_map > 0)


class TestOracleSegment:
    def test_perfect_point_prompt(self):
        scene = generate_scene(small_spec(seed=3))
        ann = scene.annotations[0]
        prompts = [Prompt.from_point(Point(ann.box.cx, ann.box.cy))]
        [cands] = oracle_segment(scene, prompts, PERFECT)
        assert len(cands) == PERFECT.candidates_per_prompt
        mask, score = cands[0]
        assert score == 1.0
        assert mask == ann.mask

    def test_perfect_box_prompt(self):
        scene = generate_scene(small_spec(seed=3))
        ann = scene.annotations[1]
        [cands] = oracle_segment(scene, [Prompt.from_box(ann.box)], PERFECT)
        assert cands[0][0] == ann.mask and cands[0][1] == 1.0

    def test_background_point_scores_zero(self):
        scene = generate_scene(small_spec(seed=3))
        bg = np.argwhere(scene.instance_map == 0)[0]
        prompts = [Prompt.from_point(Point(float(bg[1]) + 0.5, float(bg[0]) + 0.5))]
        [cands] = oracle_segment(scene, prompts, PERFECT)
        assert all(score == 0.0 for _, score in cands)
        assert all(mask.count() > 0 for mask, _ in cands)

    def test_point_clamped_into_frame(self):
        scene = generate_scene(small_spec(seed=3))
        [cands] = oracle_segment(
            scene, [Prompt.from_point(Point(-10.0, 1e6))], PERFECT
        )
        assert len(cands) == PERFECT.candidates_per_prompt

    def test_jitter_degrades_but_not_too_far(self):
        # 40x40 objects, 2px jitter: best candidate IoU within [0.6, 1.0)
        spec = small_spec(
            dims=ImageDims(256, 256),
            num_objects=2,
            min_size=40,
            max_size=40,
            seed=5,
        )
        fidelity = OracleFidelity(boundary_jitter=2.0, seed=9)
        hitsleft, total = 0, 0
        for scene in generate_scenes(spec, 40):
            prompts = [Prompt.from_box(a.box) for a in scene.annotations]
            results = oracle_segment(scene, prompts, fidelity)
            for ann, cands in zip(scene.annotations, results):
                best = max(mask_iou(m, ann.mask) for m, _ in cands)
                total += 1
                if 0.6 <= best < 1.0:
                    hitsleft += 1
        assert hitsleft / total >= 0.95

    def test_part_and_leak_modes(self):
        scene = generate_scene(small_spec(seed=6))
        ann = scene.annotations[0]
        part_fid = OracleFidelity(part_mask_prob=1.0, candidates_per_prompt=4, seed=2)
        [cands] = oracle_segment(scene, [Prompt.from_box(ann.box)], part_fid)
        for mask, score in cands[1:]:
            assert mask.count() < ann.mask.count()
            assert 0 < score < 1
        leak_fid = OracleFidelity(background_leak_prob=1.0, candidates_per_prompt=4, seed=2)
        [cands] = oracle_segment(scene, [Prompt.from_box(ann.box)], leak_fid)
        for mask, score in cands[1:]:
            assert mask.count() > ann.mask.count()
            assert np.all(mask.data[ann.mask.data])

    def test_deterministic_given_fidelity_seed(self):
        scene = generate_scene(small_spec(seed=6))
        fid = OracleFidelity(boundary_jitter=2, part_mask_prob=0.3, seed=42)
        prompts = [Prompt.from_box(a.box) for a in scene.annotations]
        a = oracle_segment(scene, prompts, fid)
        b = oracle_segment(scene, prompts, fid)
        for ga, gb in zip(a, b):
            for (ma, sa), (mb, sb) in zip(ga, gb):
                assert ma == mb and sa == sb


class TestOracleLabelScore:
    def test_singleton_softmax(self):
        scene = generate_scene(small_spec(seed=3))
        scores = oracle_label_score(scene, [scene.annotations[0].mask], "circle")
        assert scores == [1.0]

    def test_two_candidate_softmax_value(self):
        # affinities (1.0, 0.0) at temperature 0.1
        scene = generate_scene(
            small_spec(seed=3, shape_classes=(Category(1, "circle"),), num_objects=1)
        )
        ann = scene.annotations[0]
        background = Mask(scene.instance_map == 0)
        scores = oracle_label_score(scene, [ann.mask, background], "circle")
        expected = np.exp([10.0, 0.0])
        expected /= expected.sum()
        assert scores == pytest.approx(list(expected), abs=1e-9)
        assert scores[0] > 0.9999

    def test_background_lower_than_instance(self):
        scene = generate_scene(small_spec(seed=7))
        ann = scene.annotations[0]
        name = next(c.name for c in TAXONOMY if c.id == ann.category_id)
        background = Mask(scene.instance_map == 0)
        scores = oracle_label_score(scene, [background, ann.mask], name)
        assert scores[0] < scores[1]

    def test_sums_to_one_and_permutation_equivariant(self):
        scene = generate_scene(small_spec(seed=9))
        masks = [a.mask for a in scene.annotations]
        name = next(c.name for c in TAXONOMY if c.id == scene.annotations[0].category_id)
        scores = oracle_label_score(scene, masks, name)
        assert sum(scores) == pytest.approx(1.0, abs=1e-9)
        rev = oracle_label_score(scene, masks[::-1], name)
        assert rev == pytest.approx(scores[::-1])

    def test_unknown_class(self):
        scene = generate_scene(small_spec(seed=3))
        with pytest.raises(UnknownClass):
            oracle_label_score(scene, [scene.annotations[0].mask], "zebra")
