import filecmp
import os

import numpy as np
import pytest

from dnet.data import (generate_dataset, iterate_batches, load_split, num_classes, read_manifest, spike_sphere,
                       stratified_split, synth_split)
from dnet.errors import DatasetError, ParameterError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_dataset(root, classes=8, per_class=100, n_points=32, seed=3)
    return root


class TestGenerate:
    def test_counts_and_stratification(self, corpus):
        rows = read_manifest(corpus)
        assert len(rows) == 800
        assert sum(r[2] == "train" for r in rows) == 640
        for c in range(8):
            assert sum(r[1] == c and r[2] == "test" for r in rows) == 20
        assert num_classes(corpus) == 8

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            generate_dataset(tmp_path / name, classes=3, per_class=4, n_points=16, seed=11)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "clouds", tmp_path / "b" / "clouds",
                                               os.listdir(tmp_path / "a" / "clouds"), shallow=False)
        assert not mismatch and not errors

    def test_different_seed_differs(self, tmp_path):
        generate_dataset(tmp_path / "a", classes=1, per_class=2, n_points=16, seed=1)
        generate_dataset(tmp_path / "b", classes=1, per_class=2, n_points=16, seed=2)
        a = (tmp_path / "a" / "clouds" / "sphere_0000.txt").read_bytes()
        assert a != (tmp_path / "b" / "clouds" / "sphere_0000.txt").read_bytes()

    def test_single_instance_goes_to_train(self, tmp_path):
        generate_dataset(tmp_path, classes=4, per_class=1, n_points=16, seed=0)
        assert {r[2] for r in read_manifest(tmp_path)} == {"train"}

    def test_matches_in_memory(self, tmp_path):
        generate_dataset(tmp_path, classes=2, per_class=3, n_points=16, seed=5)
        mem = synth_split(2, 3, 16, 0.02, 5)
        split_rows = read_manifest(tmp_path)
        train = load_split(tmp_path, "train")
        test = load_split(tmp_path, "test")
        by_path = {p: x for p, x in zip(train.paths + test.paths, list(train.points) + list(test.points))}
        for (rel, _, _), cloud in zip(split_rows, mem):
            assert np.abs(by_path[rel] - cloud.points).max() < 1e-6

    def test_parameter_errors(self, tmp_path):
        with pytest.raises(ParameterError):
            generate_dataset(tmp_path, classes=9)
        with pytest.raises(ParameterError):
            generate_dataset(tmp_path, per_class=0)


class TestLoad:
    def test_shapes(self, corpus):
        s = load_split(corpus, "test", use_normals=True)
        assert s.points.shape == (160, 32, 6) and len(s) == 160

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_split(tmp_path, "train")

    @pytest.mark.parametrize("body", ["a,b\n", "path,label,split\nx.txt,one,train\n",
                                      "path,label,split\nx.txt,0,val\n", "path,label,split\nx.txt,0\n"])
    def test_bad_manifest(self, tmp_path, body):
        (tmp_path / "manifest.csv").write_text(body)
        with pytest.raises(DatasetError):
            read_manifest(tmp_path)

    def test_missing_cloud_file(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("path,label,split\nnope.txt,0,train\n")
        with pytest.raises(DatasetError):
            load_split(tmp_path, "train")

    def test_empty_split(self, tmp_path):
        generate_dataset(tmp_path, classes=2, per_class=1, n_points=16)
        assert len(load_split(tmp_path, "test")) == 0


class TestBatching:
    def test_covers_once(self):
        seen = np.concatenate(list(iterate_batches(37, 16, np.random.default_rng(0))))
        assert sorted(seen) == list(range(37))
        assert [len(b) for b in iterate_batches(37, 16)] == [16, 16, 5]

    def test_stratified_split(self):
        mask = stratified_split(10, np.random.default_rng(0))
        assert mask.sum() == 2


class TestSpikeSphere:
    def test_parts(self):
        pts, parts = spike_sphere(100, 0)
        assert pts.shape == (100, 3) and parts.sum() == 50
        r = np.linalg.norm(pts, axis=1)
        np.testing.assert_allclose(r[parts == 0], 1.0)
        assert np.all(r[parts == 1] > 0.99)

    def test_deterministic(self):
        a, b = spike_sphere(40, 7), spike_sphere(40, 7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
