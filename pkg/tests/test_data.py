import struct

import numpy as np
import pytest

from lasoftmoe import data
from lasoftmoe.data import (
    BatchConfigError,
    FormatError,
    SyntheticDatasetSpec,
    batch_indices,
    batches,
    class_centers,
    generate,
    read_dataset,
    read_splits,
    write_dataset,
    write_splits,
)

TINY = SyntheticDatasetSpec(
    subjects_train=4, subjects_eval=2, subjects_test=2, per_subject_live=2, per_subject_phys=1, per_subject_digital=1, image_size=8
)


@pytest.fixture(scope="module")
def tiny():
    return generate(TINY)


class TestDatasetSpec:
    @pytest.mark.parametrize(
        "bad", [dict(subjects_train=0), dict(per_subject_phys=0), dict(noise_sigma=-0.1), dict(gap=-1.0), dict(image_size=10)]
    )
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(**bad)

    def test_defaults(self):
        spec = SyntheticDatasetSpec()
        assert (spec.subjects_train, spec.subjects_eval, spec.subjects_test) == (20, 5, 5)
        assert (spec.image_size, spec.channels, spec.noise_sigma, spec.gap) == (32, 3, 0.05, 2.0)
        assert spec.per_subject_live == spec.per_subject_phys + spec.per_subject_digital

    def test_base_patterns_distinct(self):
        c = class_centers(SyntheticDatasetSpec())
        for a, b in [("live", "phys"), ("live", "digital"), ("phys", "digital")]:
            assert not np.array_equal(c[a], c[b])


class TestGenerate:
    def test_shapes_and_types(self, tiny):
        tr = tiny["train"]
        assert tr.images.shape == (16, 8, 8, 3) and tr.images.dtype == np.float32
        assert tr.counts() == {"live": 8, "phys": 4, "digital": 4}
        assert np.all((tr.images >= 0) & (tr.images <= 1))

    def test_label_matches_subtype(self, tiny):
        for split in tiny.values():
            np.testing.assert_array_equal(split.labels == data.LIVE, split.subtypes == 0)

    def test_subject_ids_disjoint_and_complete(self, tiny):
        ids = {name: set(s.subject_ids.tolist()) for name, s in tiny.items()}
        assert not ids["train"] & ids["eval"] and not ids["train"] & ids["test"] and not ids["eval"] & ids["test"]
        for split in tiny.values():
            for sid in set(split.subject_ids.tolist()):
                assert set(split.subtypes[split.subject_ids == sid].tolist()) == {0, 1, 2}

    def test_deterministic(self, tiny):
        again = generate(TINY)
        for name in data.SPLITS:
            assert tiny[name].equals(again[name])

    def test_seed_changes_data(self, tiny):
        other = generate(TINY.replace(seed=1))
        assert not tiny["train"].equals(other["train"])

    def test_noise_free_samples_identical_within_subject(self):
        split = generate(TINY.replace(noise_sigma=0.0, per_subject_live=3))["train"]
        for sid in np.unique(split.subject_ids):
            for k in range(3):
                imgs = split.images[(split.subject_ids == sid) & (split.subtypes == k)]
                assert np.all(imgs == imgs[0])

    def test_zero_gap_collapses_fake_modes(self):
        c = class_centers(SyntheticDatasetSpec(gap=0.0))
        np.testing.assert_array_equal(c["phys"], c["digital"])

    def test_zero_gap_separable_by_one_threshold_on_class_mean_projection(self):
        spec = SyntheticDatasetSpec(gap=0.0, subject_sigma=0.0)
        splits = generate(spec)
        c = class_centers(spec)
        direction = (c["live"] - c["phys"]).ravel()
        proj = {k: s.images.reshape(len(s), -1).astype(np.float64) @ direction for k, s in splits.items()}
        live_tr = proj["train"][splits["train"].labels == 1]
        fake_tr = proj["train"][splits["train"].labels == 0]
        threshold = 0.5 * (live_tr.mean() + fake_tr.mean())
        for k, s in splits.items():
            assert np.all((proj[k] > threshold) == (s.labels == 1)), k

    @pytest.mark.parametrize("gap", [0.5, 1.0, 2.0, 3.0])
    def test_sparse_fake_geometry(self, gap):
        spec = SyntheticDatasetSpec(gap=gap, noise_sigma=0.01, subject_sigma=0.0)
        split = generate(spec)["train"]
        flat = split.images.reshape(len(split), -1).astype(np.float64)
        live = flat[split.subtypes == 0].mean(axis=0)
        phys = flat[split.subtypes == 1].mean(axis=0)
        digital = flat[split.subtypes == 2].mean(axis=0)
        fake = flat[split.labels == 0].mean(axis=0)
        ratio = np.linalg.norm(phys - digital) / np.linalg.norm(fake - live)
        assert ratio == pytest.approx(gap, rel=0.03)


class TestFiles:
    def test_round_trip(self, tiny, tmp_path):
        path = tmp_path / "train.uads"
        write_dataset(tiny["train"], path)
        assert read_dataset(path).equals(tiny["train"])

    def test_layout(self, tiny, tmp_path):
        path = tmp_path / "x.uads"
        write_dataset(tiny["test"], path)
        blob = path.read_bytes()
        magic, n, h, w, c = struct.unpack_from("<8sIIII", blob)
        assert (magic, n, h, w, c) == (b"UADS0001", 8, 8, 8, 3)
        label, subtype, sid = struct.unpack_from("<BBI", blob, 24)
        assert (label, subtype, sid) == (1, 0, int(tiny["test"].subject_ids[0]))
        first = np.frombuffer(blob, "<f4", count=8 * 8 * 3, offset=30)
        np.testing.assert_array_equal(first, tiny["test"].images[0].ravel())
        assert len(blob) == 24 + 8 * (6 + 8 * 8 * 3 * 4)

    def test_bad_magic(self, tiny, tmp_path):
        path = tmp_path / "x.uads"
        write_dataset(tiny["test"], path)
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0"):
            read_dataset(path)

    def test_declared_count_too_large(self, tiny, tmp_path):
        path = tmp_path / "x.uads"
        write_dataset(tiny["test"], path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 8, 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="truncated"):
            read_dataset(path)

    def test_trailing_bytes(self, tiny, tmp_path):
        path = tmp_path / "x.uads"
        write_dataset(tiny["test"], path)
        path.write_bytes(path.read_bytes() + b"\0" * 3)
        with pytest.raises(FormatError, match="offset"):
            read_dataset(path)

    def test_split_directory(self, tiny, tmp_path):
        write_splits(tiny, tmp_path / "ds")
        loaded = read_splits(tmp_path / "ds")
        assert all(loaded[k].equals(tiny[k]) for k in data.SPLITS)

    def test_embedding_dump(self, tiny, tmp_path):
        vecs = np.random.default_rng(0).normal(size=(len(tiny["eval"]), 5))
        data.write_embeddings(tmp_path / "e.bin", vecs, tiny["eval"])
        got, labels, subtypes, subjects = data.read_embeddings(tmp_path / "e.bin")
        np.testing.assert_array_equal(got, vecs)
        np.testing.assert_array_equal(labels, tiny["eval"].labels)
        np.testing.assert_array_equal(subtypes, tiny["eval"].subtypes)
        np.testing.assert_array_equal(subjects, tiny["eval"].subject_ids)


class TestBatches:
    def test_partition_of_eight(self, tiny):
        split = tiny["train"].subset(np.arange(8))
        idx = batch_indices(split, 4, seed=0)
        assert len(idx) == 2
        assert sorted(np.concatenate(idx).tolist()) == list(range(8))

    def test_every_sample_once(self, tiny):
        got = np.concatenate([b[1] for b in batches(tiny["train"], 4, seed=3)])
        assert len(got) == len(tiny["train"])
        flat = np.concatenate(batch_indices(tiny["train"], 4, seed=3))
        assert sorted(flat.tolist()) == list(range(len(tiny["train"])))

    def test_epochs_differ_same_multiset(self, tiny):
        a = np.concatenate(batch_indices(tiny["train"], 4, 0, epoch=0))
        b = np.concatenate(batch_indices(tiny["train"], 4, 0, epoch=1))
        assert not np.array_equal(a, b)
        assert sorted(a.tolist()) == sorted(b.tolist())

    def test_deterministic(self, tiny):
        a = batch_indices(tiny["train"], 4, 5, epoch=2)
        b = batch_indices(tiny["train"], 4, 5, epoch=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_labels_alternate_while_both_remain(self, tiny):
        labels = tiny["train"].labels[np.concatenate(batch_indices(tiny["train"], 4, 1))]
        # 8 live, 8 fake: strictly alternating throughout
        assert np.all(labels[1:] != labels[:-1])

    @pytest.mark.parametrize("size", [0, 1, 3])
    def test_odd_or_small_batch(self, tiny, size):
        with pytest.raises(BatchConfigError):
            batch_indices(tiny["train"], size, 0)

    def test_batch_larger_than_split(self, tiny):
        with pytest.raises(BatchConfigError):
            batch_indices(tiny["test"], 10, 0)
