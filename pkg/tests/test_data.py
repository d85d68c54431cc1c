import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsfusion.data import (DEFAULT_CLASS_NAMES, DatasetError, SynthSpec, generate_dataset, kfold,
                           load_dataset, make_split_plan, nearest_centroid_accuracy, split_train_test,
                           synthesize_dataset, write_block)


def write_manifest(root: Path, samples, table, dims=None, class_names=("a", "b")):
    doc = {"class_names": list(class_names), "feature_dims": dims or {"eye": 2, "ppg": 1, "semantic": 3},
           "semantic_table": table, "samples": samples}
    path = root / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def tiny(tmp_path):
    rng = np.random.default_rng(0)
    samples = []
    for n, (label, video) in enumerate([(0, "v0"), (1, "v0"), (1, "v1")]):
        sid = f"x{n}"
        write_block(tmp_path / f"eye/{sid}.csv", rng.standard_normal((3, 2)), "e")
        write_block(tmp_path / f"ppg/{sid}.csv", rng.standard_normal((3, 1)), "p")
        samples.append({"id": sid, "label": label, "eye_path": f"eye/{sid}.csv",
                        "ppg_path": f"ppg/{sid}.csv", "semantic_ref": video})
    for v in ("v0", "v1"):
        write_block(tmp_path / f"sem/{v}.csv", rng.standard_normal((2, 3)), "s")
    table = {"v0": "sem/v0.csv", "v1": "sem/v1.csv"}
    return tmp_path, samples, table


class TestLoad:
    def test_valid_manifest(self, tiny):
        root, samples, table = tiny
        ds = load_dataset(write_manifest(root, samples, table))
        assert len(ds) == 3
        assert ds.ids == ["x0", "x1", "x2"]

    def test_ordered_by_id(self, tiny):
        root, samples, table = tiny
        ds = load_dataset(write_manifest(root, samples[::-1], table))
        assert ds.ids == ["x0", "x1", "x2"]

    def test_shared_video_blocks_identical(self, tiny):
        root, samples, table = tiny
        ds = load_dataset(write_manifest(root, samples, table))
        a, b = ds.samples[0].semantic, ds.samples[1].semantic
        assert a.tobytes() == b.tobytes()

    def test_missing_eye_file_named(self, tiny):
        root, samples, table = tiny
        (root / "eye/x1.csv").unlink()
        with pytest.raises(DatasetError, match=r"x1.*eye/x1\.csv"):
            load_dataset(write_manifest(root, samples, table))

    @pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
    def test_non_finite_located(self, tiny, bad):
        root, samples, table = tiny
        (root / "ppg/x2.csv").write_text(f"p0\n1.0\n{bad}\n2.0\n")
        with pytest.raises(DatasetError, match=r"x2.*ppg/x2\.csv row 3"):
            load_dataset(write_manifest(root, samples, table))

    def test_dim_mismatch(self, tiny):
        root, samples, table = tiny
        with pytest.raises(DatasetError, match="eye columns"):
            load_dataset(write_manifest(root, samples, table, dims={"eye": 5, "ppg": 1, "semantic": 3}))

    def test_unknown_label(self, tiny):
        root, samples, table = tiny
        samples[0]["label"] = 2
        with pytest.raises(DatasetError, match="x0.*label"):
            load_dataset(write_manifest(root, samples, table))

    def test_unresolved_semantic_ref(self, tiny):
        root, samples, table = tiny
        samples[2]["semantic_ref"] = "v9"
        with pytest.raises(DatasetError, match="v9"):
            load_dataset(write_manifest(root, samples, table))

    def test_single_class_manifest_rejected(self, tiny):
        root, samples, table = tiny
        with pytest.raises(DatasetError, match="2 classes"):
            load_dataset(write_manifest(root, samples, table, class_names=("a",)))

    def test_semantic_table_swap(self, tiny):
        root, samples, table = tiny
        path = write_manifest(root, samples, table)
        ds = load_dataset(path, {"v0": "sem/v1.csv", "v1": "sem/v1.csv"})
        assert ds.samples[0].semantic.tobytes() == ds.samples[2].semantic.tobytes()

    def test_blocks_immutable(self, tiny):
        root, samples, table = tiny
        ds = load_dataset(write_manifest(root, samples, table))
        with pytest.raises(ValueError):
            ds.samples[0].eye[0, 0] = 1.0


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        spec = SynthSpec(samples_per_class=5, n_videos=6, seed=11)
        ds, path = synthesize_dataset(spec, tmp_path / "d")
        back = load_dataset(path)
        assert back.ids == ds.ids and back.labels.tolist() == ds.labels.tolist()
        for a, b in zip(ds.samples, back.samples):
            for m in ("eye", "ppg", "semantic"):
                assert a.block(m).tobytes() == b.block(m).tobytes()
            assert a.video_id == b.video_id

    def test_same_seed_byte_identical_files(self, tmp_path):
        spec = SynthSpec(samples_per_class=3, seed=5)
        synthesize_dataset(spec, tmp_path / "a")
        synthesize_dataset(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_readme_states_seed(self, tmp_path):
        synthesize_dataset(SynthSpec(samples_per_class=2, seed=42), tmp_path)
        assert '"seed": 42' in (tmp_path / "README.md").read_text()


class TestSynth:
    def test_default_shape(self):
        ds = generate_dataset(SynthSpec())
        assert ds.class_counts() == [100] * 4
        assert ds.class_names == DEFAULT_CLASS_NAMES
        assert ds.stack("eye").shape == (400, 4, 8)

    def test_imbalanced_counts(self):
        ds = generate_dataset(SynthSpec(class_counts=[3, 7, 5], n_classes=3))
        assert ds.class_counts() == [3, 7, 5]

    def test_invalid_generator_settings(self):
        with pytest.raises(ValueError):
            generate_dataset(SynthSpec(n_classes=3, class_counts=[1, 2]))
        with pytest.raises(ValueError):
            generate_dataset(SynthSpec(separation=-1.0))

    def test_nearest_centroid_oracle_at_s3(self):
        # class directions depend on the seed, so the unseen draw is the held-out half
        ds = generate_dataset(SynthSpec(separation=3.0, seed=7, samples_per_class=200))
        half = make_split_plan(ds, 0.5, 2, 3)
        assert nearest_centroid_accuracy(ds.subset(half.train), ds.subset(half.test)) >= 0.95

    def test_zero_separation_is_chance(self):
        ds = generate_dataset(SynthSpec(separation=0.0, samples_per_class=200, seed=3))
        plan = make_split_plan(ds, 0.5, 2, 3)
        acc = nearest_centroid_accuracy(ds.subset(plan.train), ds.subset(plan.test))
        # 400 held-out points; chance is 0.25 with std about 0.022
        assert abs(acc - 0.25) < 0.07

    def test_uninformative_semantic_mean_is_class_independent(self):
        ds = generate_dataset(SynthSpec(separation=3.0, semantic_informative=False, samples_per_class=400))
        sem = ds.stack("semantic").mean(axis=1)
        means = np.stack([sem[ds.labels == c].mean(axis=0) for c in range(4)])
        # each class mean is a mean of 1600 unit normals per dim
        assert np.max(np.abs(means)) < 0.15

    def test_shared_videos(self):
        ds = generate_dataset(SynthSpec(samples_per_class=10, n_videos=4))
        by_video = {}
        for s in ds.samples:
            by_video.setdefault(s.video_id, []).append(s.semantic.tobytes())
        assert len(by_video) <= 4
        assert all(len(set(v)) == 1 for v in by_video.values())

    def test_context_coupling_hides_polarity_from_physio_alone(self):
        ds = generate_dataset(SynthSpec(context_coupling=True, separation=3.0, samples_per_class=200))
        eye = ds.stack("eye").mean(axis=1)
        means = np.stack([eye[ds.labels == c].mean(axis=0) for c in range(4)])
        # antipodal classes with random sign flips average out
        assert np.max(np.abs(means)) < 0.5


class TestSplit:
    def test_exact_divisibility(self):
        ids = [f"s{i:03d}" for i in range(100)]
        labels = [i % 4 for i in range(100)]
        plan = split_train_test(ids, labels, 0.8, 7)
        assert len(plan.train) == 80 and len(plan.test) == 20
        lab = dict(zip(ids, labels))
        assert Counter(lab[i] for i in plan.train) == {c: 20 for c in range(4)}

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(30)]
        labels = [i % 3 for i in range(30)]
        a, b = split_train_test(ids, labels, 0.8, 9), split_train_test(ids, labels, 0.8, 9)
        assert a.train == b.train and a.test == b.test
        assert kfold(a.train, [labels[ids.index(i)] for i in a.train], 5, 9) == \
            kfold(b.train, [labels[ids.index(i)] for i in b.train], 5, 9)

    def test_ten_samples_four_classes_counting_oracle(self):
        ids = [f"s{i}" for i in range(10)]
        labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 3]
        plan = split_train_test(ids, labels, 0.8, 7)
        lab = dict(zip(ids, labels))
        counts = Counter(lab[i] for i in plan.train)
        for c, n in Counter(labels).items():
            assert abs(counts[c] - 0.8 * n) <= 1

    def test_empty_class(self):
        with pytest.raises(DatasetError, match="without samples"):
            split_train_test(["a", "b"], [0, 0], 0.8, 7, n_classes=2)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            split_train_test(["a", "b"], [0, 1], 1.0)

    def test_kfold_fifty(self):
        ids = [f"s{i:02d}" for i in range(50)]
        folds = kfold(ids, [i % 2 for i in range(50)], 5, 7)
        vals = [set(v) for _, v in folds]
        assert all(len(v) == 10 for v in vals)
        assert set().union(*vals) == set(ids)
        assert sum(len(v) for v in vals) == 50

    def test_kfold_too_few(self):
        with pytest.raises(DatasetError, match="fewer than k"):
            kfold(["a", "b", "c"], [0, 0, 1], 2, 7)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=2, max_size=5), st.integers(0, 10_000),
       st.sampled_from([0.5, 0.7, 0.8]), st.integers(2, 5))
def test_split_plan_partition_and_stratification(class_sizes, seed, ratio, k):
    labels = [c for c, n in enumerate(class_sizes) for _ in range(n)]
    ids = [f"s{i:03d}" for i in range(len(labels))]
    lab = dict(zip(ids, labels))
    plan = split_train_test(ids, labels, ratio, seed, len(class_sizes))
    assert set(plan.train).isdisjoint(plan.test)
    assert sorted(plan.train + plan.test) == sorted(ids)
    for c, n in enumerate(class_sizes):
        assert abs(sum(lab[i] == c for i in plan.train) - ratio * n) <= 1

    train_labels = [lab[i] for i in plan.train]
    per_class = Counter(train_labels)
    if min(per_class.get(c, 0) for c in range(len(class_sizes))) < k:
        return
    folds = kfold(plan.train, train_labels, k, seed)
    seen = Counter()
    for tr, va in folds:
        assert set(tr).isdisjoint(va)
        assert sorted(tr + va) == sorted(plan.train)
        seen.update(va)
        for c, n in per_class.items():
            assert abs(sum(lab[i] == c for i in va) - n / k) <= 1
    assert all(v == 1 for v in seen.values()) and set(seen) == set(plan.train)
