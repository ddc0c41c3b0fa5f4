import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microtog.data import (
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_annotations,
    load_dataset,
    load_image,
    load_manifest,
    quantize,
    save_annotations,
    save_image,
)
from microtog.detector import GroundTruthObject
from microtog.errors import ParseError, ValidationError


def fresh_rng(seed=0):
    return np.random.default_rng(seed)


class TestGenerateScene:
    def test_deterministic_from_rng_state(self):
        spec = SceneSpec(seed=3)
        img_a, objs_a = generate_scene(spec, fresh_rng(5))
        img_b, objs_b = generate_scene(spec, fresh_rng(5))
        assert np.array_equal(img_a, img_b)
        assert objs_a == objs_b

    def test_noiseless_scene_bit_identical(self):
        spec = SceneSpec(noise_std=0.0)
        img_a, _ = generate_scene(spec, fresh_rng(9))
        img_b, _ = generate_scene(spec, fresh_rng(9))
        assert img_a.tobytes() == img_b.tobytes()

    def test_single_object_spec(self):
        spec = SceneSpec(min_objects=1, max_objects=1)
        _, objs = generate_scene(spec, fresh_rng(0))
        assert len(objs) == 1

    def test_object_count_in_range(self):
        spec = SceneSpec(min_objects=1, max_objects=3)
        for i in range(30):
            _, objs = generate_scene(spec, fresh_rng(i))
            assert 1 <= len(objs) <= 3

    def test_boxes_inside_unit_square(self):
        spec = SceneSpec()
        for i in range(30):
            _, objs = generate_scene(spec, fresh_rng(i))
            for o in objs:
                bx, by, bw, bh = o.box
                assert bw > 0 and bh > 0
                assert bx - bw / 2 >= -1e-9 and bx + bw / 2 <= 1 + 1e-9
                assert by - bh / 2 >= -1e-9 and by + bh / 2 <= 1 + 1e-9

    def test_pixels_in_range(self):
        spec = SceneSpec(noise_std=0.1)
        img, _ = generate_scene(spec, fresh_rng(2))
        assert img.dtype == np.float32
        assert np.all((img >= 0) & (img <= 1))

    def test_square_box_matches_geometry(self):
        # a rendered square's tight box tracks its analytic extent within a pixel
        spec = SceneSpec(noise_std=0.0)
        n = spec.image_size
        found = 0
        for i in range(80):
            _, objs = generate_scene(spec, fresh_rng(i))
            for o in objs:
                if o.class_id == 2:  # square
                    assert abs(o.box[2] - o.box[3]) <= 2.0 / n + 1e-9
                    found += 1
        assert found > 5

    def test_class_ids_valid(self):
        for i in range(20):
            _, objs = generate_scene(SceneSpec(), fresh_rng(i))
            assert all(1 <= o.class_id <= 3 for o in objs)


class TestImageIO:
    def test_round_trip_quantization_bound(self, tmp_path):
        img = fresh_rng(0).uniform(0, 1, (16, 16, 3)).astype(np.float32)
        path = tmp_path / "img.ppm"
        save_image(img, path)
        back = load_image(path)
        assert np.max(np.abs(back - img)) <= 1.0 / 255 + 1e-9

    def test_black_image_exact(self, tmp_path):
        img = np.zeros((8, 8, 3), np.float32)
        path = tmp_path / "black.ppm"
        save_image(img, path)
        assert np.array_equal(load_image(path), img)

    def test_file_size(self, tmp_path):
        img = np.zeros((64, 64, 3), np.float32)
        path = tmp_path / "img.ppm"
        save_image(img, path)
        header = b"P6\n64 64\n255\n"
        assert os.path.getsize(path) == len(header) + 64 * 64 * 3

    def test_double_round_trip_stable(self, tmp_path):
        img = fresh_rng(1).uniform(0, 1, (8, 8, 3)).astype(np.float32)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        save_image(img, p1)
        save_image(load_image(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(ParseError, match="magic"):
            load_image(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(ParseError, match="byte offset"):
            load_image(path)

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + b"\x01" * 12)
        img = load_image(path)
        assert img.shape == (2, 2, 3)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_quantize_keeps_attack_budget(self, seed):
        # quantizing both images costs at most one level on each side
        rng = np.random.default_rng(seed)
        eps = 0.031
        x = rng.uniform(0, 1, (6, 6, 3)).astype(np.float32)
        delta = rng.uniform(-eps, eps, x.shape).astype(np.float32)
        x_adv = np.clip(x + delta, 0, 1)
        gap = np.max(np.abs(quantize(x_adv).astype(np.float64) - quantize(x).astype(np.float64)))
        assert gap <= eps + 2.0 / 255 + 1e-9


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        objs = [
            GroundTruthObject(box=(0.5, 0.5, 0.25, 0.125), class_id=1),
            GroundTruthObject(box=(0.25, 0.75, 0.1, 0.2), class_id=3),
        ]
        path = tmp_path / "ann.json"
        save_annotations(objs, path)
        assert load_annotations(path, num_classes=3) == objs

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.json"
        save_annotations([], path)
        assert load_annotations(path) == []

    def test_six_significant_digits_stable(self, tmp_path):
        objs = [GroundTruthObject(box=(1 / 3, 2 / 3, 0.1234567, 0.2654321), class_id=2)]
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(objs, p1)
        save_annotations(load_annotations(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_class_zero_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(
            {"objects": [{"class_id": 0, "bx": 0.5, "by": 0.5, "bw": 0.1, "bh": 0.1}]}))
        with pytest.raises(ValidationError, match="record 0"):
            load_annotations(path)

    def test_out_of_range_box_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(
            {"objects": [{"class_id": 1, "bx": 0.95, "by": 0.5, "bw": 0.3, "bh": 0.1}]}))
        with pytest.raises(ValidationError, match="outside"):
            load_annotations(path)

    def test_crafted_three_records(self, tmp_path):
        path = tmp_path / "three.json"
        records = [
            {"class_id": 1, "bx": 0.2, "by": 0.2, "bw": 0.1, "bh": 0.1},
            {"class_id": 2, "bx": 0.5, "by": 0.5, "bw": 0.2, "bh": 0.2},
            {"class_id": 3, "bx": 0.8, "by": 0.8, "bw": 0.15, "bh": 0.15},
        ]
        path.write_text(json.dumps({"objects": records}))
        objs = load_annotations(path, num_classes=3)
        assert len(objs) == 3
        assert [o.class_id for o in objs] == [1, 2, 3]


class TestGenerateDataset:
    def test_empty_train_split(self, tmp_path):
        spec = SceneSpec(seed=1)
        manifest = generate_dataset(spec, 0, 2, tmp_path / "d")
        doc = load_manifest(manifest)
        assert doc["splits"]["train"] == []
        assert len(doc["splits"]["test"]) == 2

    def test_regeneration_byte_identical(self, tmp_path):
        spec = SceneSpec(seed=11)
        m1 = generate_dataset(spec, 3, 2, tmp_path / "a")
        m2 = generate_dataset(spec, 3, 2, tmp_path / "b")
        doc = load_manifest(m1)
        for split in ("train", "test"):
            for entry in doc["splits"][split]:
                for key in ("image", "annotations"):
                    b1 = (tmp_path / "a" / entry[key]).read_bytes()
                    b2 = (tmp_path / "b" / entry[key]).read_bytes()
                    assert b1 == b2
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
            (tmp_path / "b" / "manifest.json").read_bytes()

    def test_load_dataset_round_trip(self, tmp_path):
        spec = SceneSpec(seed=2)
        manifest = generate_dataset(spec, 2, 1, tmp_path / "d")
        train = load_dataset(manifest, "train")
        assert len(train) == 2
        img, objs = train[0]
        assert img.shape == (64, 64, 3)
        assert all(1 <= o.class_id <= 3 for o in objs)

    def test_train_test_streams_disjoint(self, tmp_path):
        spec = SceneSpec(seed=4)
        manifest = generate_dataset(spec, 1, 1, tmp_path / "d")
        train = load_dataset(manifest, "train")
        test = load_dataset(manifest, "test")
        assert not np.array_equal(train[0][0], test[0][0])

    def test_unknown_split_rejected(self, tmp_path):
        spec = SceneSpec(seed=4)
        manifest = generate_dataset(spec, 1, 1, tmp_path / "d")
        with pytest.raises(ValidationError, match="split"):
            load_dataset(manifest, "validation")

    def test_negative_counts_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            generate_dataset(SceneSpec(), -1, 0, tmp_path / "d")


class TestSceneSpecValidation:
    def test_bad_size_range(self):
        with pytest.raises(ValidationError, match="size_range"):
            SceneSpec(size_range=(0.5, 0.2)).validate()

    def test_bad_object_counts(self):
        with pytest.raises(ValidationError, match="objects"):
            SceneSpec(min_objects=3, max_objects=1).validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown"):
            SceneSpec.from_dict({"imagesize": 64})
