import numpy as np
import pytest
from scipy.stats import chisquare

from cavlab.elements.classes import ClassDef, ClassTable, assign_classes, class_present, element_region_match
from cavlab.elements.concepts import all_concepts, allowed, concept_group, texture_period
from cavlab.elements.dataset import class_inputs, generate_dataset
from cavlab.elements.probes import build_probe, positive_set, random_set
from cavlab.elements.render import render_image, shape_mask, texture_mask
from cavlab.elements.scene import position_range, sample_scene, stream
from cavlab.errors import ConfigError, PlacementError, UnknownConceptError, UnknownRegionError
from cavlab.schemas import COLOUR_RGB, DatasetConfig, ElementSpec, SceneSpec


def _overlap(a: ElementSpec, b: ElementSpec) -> bool:
    return a.x < b.x + b.size and b.x < a.x + a.size and a.y < b.y + b.size and b.y < a.y + a.size


class TestClassTable:
    def test_simple_config_has_69_classes(self):
        assert len(ClassTable.from_config(DatasetConfig.simple())) == 69

    def test_standard_config_has_153_classes(self):
        assert len(ClassTable.from_config(DatasetConfig.standard())) == 153

    def test_names_follow_group_order(self, tiny_table):
        assert "red+stripes+triangle" in tiny_table.names
        assert "stripes+triangle" in tiny_table.names
        assert "triangle+red" not in tiny_table.names

    def test_e3_drops_unsatisfiable_classes(self):
        table = ClassTable.from_config(DatasetConfig.simple(combination_rule="E3_red_iff_triangle"))
        assert "red+square" not in table.names
        assert "green+triangle" not in table.names
        assert "red+triangle" in table.names

    def test_spatial_variants(self):
        config = DatasetConfig.simple(spatial_classes=True)
        table = ClassTable.from_config(config)
        assert "red+square@left" in table.names
        assert "stripes+triangle@top" in table.names
        assert "red+circle@left" not in table.names

    def test_unknown_class(self, tiny_table):
        with pytest.raises(UnknownConceptError):
            tiny_table.index("purple+square")


class TestConcepts:
    def test_groups(self, tiny_dataset_config):
        assert concept_group(tiny_dataset_config, "red") == "colour"
        assert concept_group(tiny_dataset_config, "stripes") == "texture"
        assert concept_group(tiny_dataset_config, "triangle") == "shape"
        assert all_concepts(tiny_dataset_config) == ["red", "green", "solid", "stripes", "square", "triangle"]

    def test_unknown_concept(self, tiny_dataset_config):
        with pytest.raises(UnknownConceptError):
            concept_group(tiny_dataset_config, "plaid")

    def test_combination_rules(self):
        e2 = DatasetConfig.simple(combination_rule="E2_only_triangles_red")
        e3 = DatasetConfig.simple(combination_rule="E3_red_iff_triangle")
        assert allowed(e2, "red", "triangle") and allowed(e2, "blue", "triangle")
        assert not allowed(e2, "red", "square")
        assert not allowed(e3, "blue", "triangle")
        assert allowed(DatasetConfig.simple(), "red", "square")

    def test_texture_period_floor(self):
        assert texture_period("spots", 4) == 2
        assert texture_period("stripes", 50) == 10
        assert texture_period("solid", 50) == 1


class TestScene:
    def test_stream_is_deterministic_and_keyed(self):
        a = stream(7, "random", 3, 11).integers(1 << 30, size=4)
        b = stream(7, "random", 3, 11).integers(1 << 30, size=4)
        c = stream(7, "random", 4, 11).integers(1 << 30, size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_elements_do_not_overlap(self, tiny_dataset_config):
        for i in range(30):
            scene = sample_scene(tiny_dataset_config, stream(1, i), i)
            assert len(scene.elements) == tiny_dataset_config.elements_per_image
            for j, a in enumerate(scene.elements):
                assert a.x + a.size <= 16 and a.y + a.size <= 16
                for b in scene.elements[j + 1:]:
                    assert not _overlap(a, b)

    def test_concept_constrained_scene(self, tiny_dataset_config):
        for i in range(10):
            scene = sample_scene(tiny_dataset_config, stream(2, i), i, concept="stripes")
            assert all(e.texture == "stripes" for e in scene.elements)

    def test_location_constrained_scene(self, tiny_dataset_config):
        for i in range(10):
            scene = sample_scene(tiny_dataset_config, stream(2, i), i, location="left")
            assert all(e.x + e.size <= 8 for e in scene.elements)

    def test_position_range_odd_side_skips_middle(self):
        assert position_range(9, 2, "left", "x") == (0, 2)
        assert position_range(9, 2, "right", "x") == (5, 7)
        assert position_range(9, 2, "top", "x") == (0, 7)

    def test_unknown_region(self, tiny_dataset_config):
        with pytest.raises(UnknownRegionError):
            sample_scene(tiny_dataset_config, stream(0), location="middle")

    def test_overfull_scene_raises_placement_error(self):
        config = DatasetConfig.simple(image_side=16, elements_per_image=30, max_placement_attempts=5)
        with pytest.raises(PlacementError, match="image 4"):
            sample_scene(config, stream(0, 4), index=4)

    def test_impossible_concept_is_a_config_error(self):
        config = DatasetConfig.simple(combination_rule="E3_red_iff_triangle", shapes=["square", "circle"])
        with pytest.raises(ConfigError):
            sample_scene(config, stream(0), concept="red")

    @pytest.mark.parametrize("rule", ["E2_only_triangles_red", "E3_red_iff_triangle"])
    def test_restricted_rules_hold_for_every_element(self, rule):
        config = DatasetConfig.simple(image_side=32, combination_rule=rule)
        for i in range(300):
            for element in sample_scene(config, stream(5, rule, i), i).elements:
                assert allowed(config, element.colour, element.shape), (rule, element)

    def test_unrestricted_colour_shape_pairs_are_uniform(self):
        config = DatasetConfig.simple(image_side=16, elements_per_image=1)
        pairs = [(c, s) for c in config.palette for s in config.shapes]
        counts = dict.fromkeys(pairs, 0)
        for i in range(10_000):
            (element,) = sample_scene(config, stream(6, i), i).elements
            counts[(element.colour, element.shape)] += 1
        assert min(counts.values()) > 0
        assert chisquare(list(counts.values())).pvalue > 1e-3

    def test_zero_elements_gives_black_image(self):
        config = DatasetConfig.simple(image_side=16, elements_per_image=0)
        scene = sample_scene(config, stream(0), 0)
        assert scene.elements == []
        image = render_image(scene, config)
        assert image.shape == (16, 16, 3)
        assert not image.any()


class TestRender:
    def test_triangle_apex_at_top(self):
        mask = shape_mask("triangle", 20)
        assert mask[-1].sum() > mask[0].sum()
        assert mask[-1, 10]

    def test_cross_is_diagonal(self):
        mask = shape_mask("cross", 24)
        assert mask[0, 0] and mask[12, 12] and not mask[0, 12]

    def test_stripes_half_duty(self):
        mask = texture_mask("stripes", 40, 0)
        assert 0.4 < mask.mean() < 0.6

    def test_pixels_carry_colour_and_brightness(self):
        config = DatasetConfig.simple(image_side=16)
        element = ElementSpec(colour="red", brightness=204, size=6, shape="square", texture="solid",
                              texture_shift=0, x=2, y=3)
        image = render_image(SceneSpec(elements=[element]), config)
        assert image.dtype == np.float32
        np.testing.assert_allclose(image[5, 4], np.array(COLOUR_RGB["red"]) * 204 / 255, rtol=1e-6)
        assert image[0, 0].sum() == 0.0

    def test_element_outside_image_rejected(self):
        config = DatasetConfig.simple(image_side=16)
        element = ElementSpec(colour="red", brightness=200, size=6, shape="square", texture="solid",
                              texture_shift=0, x=12, y=0)
        with pytest.raises(ValueError):
            render_image(SceneSpec(elements=[element]), config)


class TestLabels:
    def _element(self, **kw):
        base = dict(colour="red", brightness=200, size=4, shape="triangle", texture="stripes",
                    texture_shift=0, x=0, y=0)
        return ElementSpec(**(base | kw))

    def test_class_needs_concepts_on_one_element(self, tiny_table):
        scene = SceneSpec(elements=[self._element(shape="square"), self._element(colour="green", x=8)])
        assert not class_present(scene, ClassDef(("red", "triangle")), 16)
        assert class_present(scene, ClassDef(("green", "triangle")), 16)

    def test_assign_classes_vector(self, tiny_table):
        scene = SceneSpec(elements=[self._element()])
        labels = assign_classes(scene, tiny_table)
        assert labels.shape == (len(tiny_table),)
        assert labels[tiny_table.index("red+stripes+triangle")] == 1.0
        assert labels[tiny_table.index("green+square")] == 0.0

    def test_region_by_centre(self):
        assert element_region_match(self._element(x=2, size=4), "left", 16)
        assert not element_region_match(self._element(x=6, size=4), "left", 16)
        assert not element_region_match(self._element(x=6, size=4), "right", 16)

    def test_labels_match_brute_force(self, tiny_dataset_config):
        config = tiny_dataset_config.model_copy(update={"spatial_classes": True})
        table = ClassTable.from_config(config)
        half = config.image_side / 2
        for i in range(40):
            scene = sample_scene(config, stream(8, i), i)
            labels = assign_classes(scene, table)
            for name, label in zip(table.names, labels):
                concepts, _, region = name.partition("@")
                expected = False
                for e in scene.elements:
                    cx, cy = e.x + e.size / 2, e.y + e.size / 2
                    inside = {"": True, "left": cx < half, "right": cx > half,
                              "top": cy < half, "bottom": cy > half}[region]
                    if inside and set(concepts.split("+")) <= {e.colour, e.texture, e.shape}:
                        expected = True
                assert label == float(expected), (i, name)


class TestDataset:
    def test_independent_of_thread_count(self, tiny_dataset_config, tiny_table):
        one = generate_dataset(tiny_dataset_config, tiny_table, 6, threads=1)
        many = generate_dataset(tiny_dataset_config, tiny_table, 6, threads=4)
        np.testing.assert_array_equal(one.images, many.images)
        np.testing.assert_array_equal(one.labels, many.labels)

    def test_splits_differ(self, tiny_dataset_config, tiny_table):
        train = generate_dataset(tiny_dataset_config, tiny_table, 3, "train")
        val = generate_dataset(tiny_dataset_config, tiny_table, 3, "val")
        assert not np.array_equal(train.images, val.images)

    def test_class_inputs_contain_class(self, tiny_dataset_config, tiny_table):
        images, scenes = class_inputs(tiny_dataset_config, tiny_table, "red+triangle", 3)
        assert images.shape == (3, 16, 16, 3)
        class_def = tiny_table.get("red+triangle")
        assert all(class_present(s, class_def, 16) for s in scenes)


class TestProbes:
    def test_positive_set_shared_across_random_index(self, tiny_dataset_config):
        a = build_probe(tiny_dataset_config, "red", 0, n_positive=4, n_negative=4)
        b = build_probe(tiny_dataset_config, "red", 1, n_positive=4, n_negative=4)
        assert a.positive_fingerprint == b.positive_fingerprint
        assert not np.array_equal(a.negative_images, b.negative_images)

    def test_random_set_shared_across_concepts(self, tiny_dataset_config):
        a = build_probe(tiny_dataset_config, "red", 2, n_positive=3, n_negative=4)
        b = build_probe(tiny_dataset_config, "triangle", 2, n_positive=3, n_negative=4)
        np.testing.assert_array_equal(a.negative_images, b.negative_images)

    def test_positive_elements_carry_concept(self, tiny_dataset_config):
        _, scenes = positive_set(tiny_dataset_config, "triangle", 5, location="right")
        for scene in scenes:
            assert all(e.shape == "triangle" and e.x >= 8 for e in scene.elements)

    def test_random_set_returns_copies(self, tiny_dataset_config):
        images, _ = random_set(tiny_dataset_config, 0, 3)
        images[:] = 0.0
        again, _ = random_set(tiny_dataset_config, 0, 3)
        assert again.sum() > 0.0
