import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sprd.data import (SceneSpec, _rasterize, dataset_digest, generate_scenes, mask_box, read_dataset, read_pnm,
                       rle_decode, rle_encode, synth_scene, worker_count, write_dataset, write_pnm)


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(SceneSpec(seed=7, image_size=64, size_range=(10, 40)), 6)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_scene(SceneSpec(), 0), synth_scene(SceneSpec(), 0)
        assert a.image.tobytes() == b.image.tobytes()
        assert all(np.array_equal(x.mask, y.mask) and x.box == y.box for x, y in zip(a.instances, b.instances))

    def test_index_and_seed_matter(self):
        base = synth_scene(SceneSpec(), 0).image
        assert not np.array_equal(base, synth_scene(SceneSpec(), 1).image)
        assert not np.array_equal(base, synth_scene(SceneSpec(seed=8), 0).image)

    def test_threads_do_not_change_output(self, monkeypatch):
        monkeypatch.setenv("SPRD_THREADS", "1")
        one = generate_scenes(SceneSpec(image_size=64, size_range=(10, 40)), 5)
        monkeypatch.setenv("SPRD_THREADS", "4")
        four = generate_scenes(SceneSpec(image_size=64, size_range=(10, 40)), 5)
        assert dataset_digest(one) == dataset_digest(four)

    @pytest.mark.parametrize("r", [5.0, 9.5, 20.0, 31.25])
    def test_disc_area(self, r):
        mask, _ = _rasterize(0, (64.3, 63.7, r), 128)
        assert abs(mask.sum() - math.pi * r * r) <= 0.05 * math.pi * r * r

    def test_boxes_are_tight(self, scenes):
        for sc in scenes:
            assert 1 <= len(sc.instances) <= 3
            for inst in sc.instances:
                assert inst.box == mask_box(inst.mask) and inst.class_id in (0, 1, 2)

    def test_masks_disjoint_after_occlusion(self, scenes):
        for sc in scenes:
            total = sum(inst.mask.astype(int) for inst in sc.instances)
            assert total.max() <= 1

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SceneSpec(image_size=32, size_range=(10, 40))
        with pytest.raises(ValueError):
            SceneSpec(min_instances=3, max_instances=1)


class TestRLE:
    def test_empty(self):
        assert rle_encode(np.zeros((4, 5), bool)) == [20]

    def test_full(self):
        assert rle_encode(np.ones((4, 5), bool)) == [0, 20]

    def test_frozen(self):
        m = np.array([[0, 1, 1], [1, 0, 0]], bool)
        assert rle_encode(m) == [1, 3, 2]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
    def test_round_trip(self, h, w, seed):
        m = np.random.default_rng(seed).random((h, w)) < 0.4
        counts = rle_encode(m)
        assert sum(counts) == h * w
        np.testing.assert_array_equal(rle_decode(counts, h, w), m)

    @pytest.mark.parametrize("counts, msg", [([3, 2], "covers 5"), ([2, -1, 5], "non-negative"), ([1.5, 4.5], "integers")])
    def test_malformed(self, counts, msg):
        with pytest.raises(ValueError, match=msg):
            rle_decode(counts, 2, 3, "instances[4]")


class TestPNM:
    @pytest.mark.parametrize("shape", [(5, 7, 3), (4, 6)])
    def test_round_trip(self, tmp_path, rng, shape):
        img = rng.integers(0, 256, shape).astype(np.uint8)
        write_pnm(tmp_path / "x.pnm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "x.pnm"), img)

    def test_truncated(self, tmp_path, rng):
        write_pnm(tmp_path / "x.ppm", rng.integers(0, 256, (4, 4, 3)).astype(np.uint8))
        raw = (tmp_path / "x.ppm").read_bytes()
        (tmp_path / "x.ppm").write_bytes(raw[:-5])
        with pytest.raises(ValueError, match="pixel bytes"):
            read_pnm(tmp_path / "x.ppm")


class TestDatasetFolder:
    def test_write_read_write_idempotent(self, tmp_path, scenes):
        write_dataset(tmp_path / "a", scenes)
        back = read_dataset(tmp_path / "a")
        write_dataset(tmp_path / "b", back)
        assert (tmp_path / "a/annotations.json").read_bytes() == (tmp_path / "b/annotations.json").read_bytes()
        assert dataset_digest(back) == dataset_digest(scenes)

    def test_malformed_json(self, tmp_path, scenes):
        write_dataset(tmp_path, scenes[:1])
        (tmp_path / "annotations.json").write_text('{"images": [\n  oops')
        with pytest.raises(ValueError, match="line 2 column 3"):
            read_dataset(tmp_path)

    def test_malformed_rle_located(self, tmp_path, scenes):
        write_dataset(tmp_path, scenes[:2])
        ann = json.loads((tmp_path / "annotations.json").read_text())
        ann["instances"][1]["mask_rle"]["counts"].append(7)
        (tmp_path / "annotations.json").write_text(json.dumps(ann))
        with pytest.raises(ValueError, match=r"instances\[1\]"):
            read_dataset(tmp_path)

    def test_unknown_image(self, tmp_path, scenes):
        write_dataset(tmp_path, scenes[:1])
        ann = json.loads((tmp_path / "annotations.json").read_text())
        ann["instances"][0]["image_id"] = 99
        (tmp_path / "annotations.json").write_text(json.dumps(ann))
        with pytest.raises(ValueError, match="unknown image_id 99"):
            read_dataset(tmp_path)


class TestWorkers:
    @pytest.mark.parametrize("value, want", [("3", 3), ("1", 1)])
    def test_env(self, monkeypatch, value, want):
        monkeypatch.setenv("SPRD_THREADS", value)
        assert worker_count() == want

    def test_garbage_falls_back(self, monkeypatch):
        monkeypatch.setenv("SPRD_THREADS", "many")
        assert worker_count() >= 1
