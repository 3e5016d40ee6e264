import numpy as np
import pytest

from lander.data import (
    LabeledDataset,
    PartitionConfig,
    build_task_schedule,
    dirichlet_partition,
    iid_partition,
    label_entropy,
    load_image_folder,
    split_classes_into_tasks,
    synthetic_blobs_dataset,
)
from lander.errors import IndivisibleClassesError


def _check_partition_complete(parts, n):
    flat = sorted(i for p in parts for i in p)
    assert flat == list(range(n))


class TestSplitClassesIntoTasks:
    def test_five_tasks_of_twenty(self):
        tasks = split_classes_into_tasks(range(100), 5, seed=0)
        assert len(tasks) == 5
        assert all(len(t) == 20 for t in tasks)
        union = set()
        for t in tasks:
            assert not (union & set(t))
            union |= set(t)
        assert union == set(range(100))

    def test_single_task_identity(self):
        assert split_classes_into_tasks(range(10), 1, seed=123) == [tuple(range(10))]

    def test_indivisible_raises(self):
        with pytest.raises(IndivisibleClassesError):
            split_classes_into_tasks(range(10), 3)

    def test_deterministic_and_sorted_default(self):
        a = split_classes_into_tasks(range(20), 4, seed=5)
        b = split_classes_into_tasks(range(20), 4, seed=5)
        assert a == b
        assert split_classes_into_tasks(range(20), 4) == [
            tuple(range(i * 5, (i + 1) * 5)) for i in range(4)
        ]


class TestIidPartition:
    def test_even_split(self):
        labels = np.repeat(np.arange(10), 10)  # 100 samples
        parts = iid_partition(labels, 5, seed=0)
        assert [len(p) for p in parts] == [20] * 5
        _check_partition_complete(parts, 100)

    def test_single_client(self):
        labels = np.repeat(np.arange(3), 7)
        parts = iid_partition(labels, 1, seed=0)
        assert parts == [list(range(21))]

    def test_per_class_histogram_deviation(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 7, size=211)
        parts = iid_partition(labels, 4, seed=1)
        _check_partition_complete(parts, 211)
        for cls in range(7):
            per_client = [sum(labels[i] == cls for i in p) for p in parts]
            assert max(per_client) - min(per_client) <= 1

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 25)
        assert iid_partition(labels, 3, seed=9) == iid_partition(labels, 3, seed=9)


class TestDirichletPartition:
    def test_single_client_degenerate(self):
        labels = np.repeat(np.arange(5), 8)
        parts = dirichlet_partition(labels, 1, beta=0.3, seed=0)
        assert parts == [list(range(40))]

    def test_completeness_no_duplicates(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 6, size=300)
        parts = dirichlet_partition(labels, 5, beta=0.2, seed=4)
        _check_partition_complete(parts, 300)

    def test_huge_beta_near_uniform(self):
        # beta -> inf approaches an even split: chi-square goodness of fit of
        # the per-client class counts against uniform, pooled over 10 seeds
        from scipy.stats import chi2

        labels = np.repeat(np.arange(10), 100)
        stat, df = 0.0, 0
        for seed in range(10):
            parts = dirichlet_partition(labels, 2, beta=1e6, seed=seed)
            for p in parts:
                hist = np.bincount(labels[p], minlength=10)
                stat += float(((hist - 50.0) ** 2 / 50.0).sum())
            df += 10  # two complementary clients per class
        assert stat < chi2.ppf(0.999, df)
        # and each per-client class proportion stays within 5% of uniform
        for seed in range(10):
            for p in dirichlet_partition(labels, 2, beta=1e6, seed=seed):
                props = np.bincount(labels[p], minlength=10) / len(p)
                assert np.all(np.abs(props - 0.1) <= 0.05)

    def test_lower_beta_lower_entropy(self):
        labels = np.repeat(np.arange(10), 50)
        def mean_entropy(beta):
            vals = []
            for seed in range(10):
                parts = dirichlet_partition(labels, 5, beta=beta, seed=seed)
                vals.extend(label_entropy(labels, p) for p in parts if len(p))
            return np.mean(vals)

        assert mean_entropy(0.1) < mean_entropy(1.0)

    def test_monotone_skew_over_beta_ladder(self):
        labels = np.repeat(np.arange(8), 60)
        means = []
        for beta in (1.0, 0.5, 0.1):
            vals = []
            for seed in range(12):
                parts = dirichlet_partition(labels, 4, beta=beta, seed=seed)
                vals.extend(label_entropy(labels, p) for p in parts if len(p))
            means.append(np.mean(vals))
        assert means[0] >= means[1] >= means[2]

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 30)
        a = dirichlet_partition(labels, 6, beta=0.4, seed=77)
        b = dirichlet_partition(labels, 6, beta=0.4, seed=77)
        assert a == b

    def test_empty_client_is_legal(self):
        # extreme skew, more clients than samples per class: empties allowed
        labels = np.repeat(np.arange(2), 3)
        parts = dirichlet_partition(labels, 8, beta=0.05, seed=1)
        _check_partition_complete(parts, 6)


class TestSyntheticBlobs:
    def test_count_and_shape(self):
        ds = synthetic_blobs_dataset(10, 100, image_shape=(3, 32, 32), seed=0)
        assert len(ds) == 1000
        assert ds.image_shape == (3, 32, 32)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_deterministic_per_seed(self):
        a = synthetic_blobs_dataset(4, 5, image_shape=(3, 16, 16), seed=2)
        b = synthetic_blobs_dataset(4, 5, image_shape=(3, 16, 16), seed=2)
        assert np.array_equal(a.images, b.images)

    def test_seeds_differ_marginals_match(self):
        a = synthetic_blobs_dataset(4, 5, image_shape=(3, 16, 16), seed=1)
        b = synthetic_blobs_dataset(4, 5, image_shape=(3, 16, 16), seed=2)
        assert not np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_class_seed_pins_appearance(self):
        # same class_seed, different draw seeds: per-class means stay close
        a = synthetic_blobs_dataset(3, 30, image_shape=(3, 16, 16), seed=1, class_seed=9)
        b = synthetic_blobs_dataset(3, 30, image_shape=(3, 16, 16), seed=2, class_seed=9)
        for cls in range(3):
            ma = a.images[a.labels == cls].mean(axis=0)
            mb = b.images[b.labels == cls].mean(axis=0)
            assert np.abs(ma - mb).mean() < 0.03

    def test_linear_probe_accuracy(self):
        from sklearn.linear_model import LogisticRegression

        train = synthetic_blobs_dataset(10, 30, image_shape=(3, 16, 16), seed=0, class_seed=5)
        test = synthetic_blobs_dataset(10, 10, image_shape=(3, 16, 16), seed=1, class_seed=5)
        clf = LogisticRegression(max_iter=300)
        clf.fit(train.images.reshape(len(train), -1), train.labels)
        acc = clf.score(test.images.reshape(len(test), -1), test.labels)
        assert acc > 0.9


class TestTaskSchedule:
    def test_schedule_invariants(self):
        ds = synthetic_blobs_dataset(6, 20, image_shape=(3, 16, 16), seed=0)
        tasks = split_classes_into_tasks(range(6), 3)
        schedule = build_task_schedule(
            ds.labels, tasks, num_clients=4, partition=PartitionConfig("dirichlet", 0.5, 1)
        )
        # validate() ran inside; re-check shard labels stay within task classes
        for t, classes in enumerate(tasks):
            for k in range(4):
                shard = schedule.shard(t, k)
                assert set(ds.labels[shard]) <= set(classes)
        assert schedule.seen_classes(1) == tasks[0] + tasks[1]

    def test_iid_schedule(self):
        ds = synthetic_blobs_dataset(4, 15, image_shape=(3, 16, 16), seed=0)
        schedule = build_task_schedule(
            ds.labels,
            split_classes_into_tasks(range(4), 2),
            num_clients=3,
            partition=PartitionConfig("iid", seed=0),
        )
        sizes = [len(schedule.shard(0, k)) for k in range(3)]
        assert sum(sizes) == 30


class TestImageFolder:
    def test_round_trip(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(0)
        names = ["apple", "boat"]
        (tmp_path / "classes.txt").write_text("\n".join(names) + "\n")
        for name in names:
            d = tmp_path / name
            d.mkdir()
            for j in range(3):
                arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"{j}.png")
        ds = load_image_folder(tmp_path)
        assert len(ds) == 6
        assert ds.class_names == names
        assert ds.image_shape == (3, 8, 8)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert sorted(ds.labels.tolist()) == [0, 0, 0, 1, 1, 1]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image_folder(tmp_path)


class TestLabeledDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 3, 4, 4)), np.array([0, 5]), ["a", "b"])
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((0, 3, 4, 4)), np.array([]), ["a"])

    def test_subset(self):
        ds = synthetic_blobs_dataset(3, 4, image_shape=(3, 16, 16), seed=0)
        sub = ds.subset([0, 5, 9])
        assert len(sub) == 3
        assert np.array_equal(sub.labels, ds.labels[[0, 5, 9]])
