import numpy as np
import pytest

from fedcl import data as dataio
from fedcl.data import DataError


def make_dataset(n, seed=0, flag=None):
    rng = np.random.default_rng(seed)
    features = rng.uniform(0, 1, size=(n, 29))
    features[:, 0] = rng.integers(0, 2, size=n) if flag is None else flag
    labels = rng.uniform(1, 5, size=(n, 8))
    return dataio.Dataset(features, labels, "synthetic")


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = make_dataset(50, seed=3)
        path = tmp_path / "data.csv"
        dataio.save_csv(ds, str(path))
        loaded = dataio.load_csv(str(path))
        assert np.array_equal(loaded.features, ds.features)
        assert np.array_equal(loaded.labels, ds.labels)

    def test_three_row_file_order_preserved(self, tmp_path):
        ds = make_dataset(3, seed=4)
        path = tmp_path / "data.csv"
        dataio.save_csv(ds, str(path))
        loaded = dataio.load_csv(str(path))
        assert len(loaded) == 3
        assert np.array_equal(loaded.labels, ds.labels)

    def test_missing_label_column_named(self, tmp_path):
        ds = make_dataset(3)
        path = tmp_path / "data.csv"
        dataio.save_csv(ds, str(path))
        text = path.read_text().replace("label_vacuuming", "label_hoovering")
        path.write_text(text)
        with pytest.raises(DataError, match="label_vacuuming"):
            dataio.load_csv(str(path))

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        ds = make_dataset(3)
        path = tmp_path / "data.csv"
        dataio.save_csv(ds, str(path))
        lines = path.read_text().splitlines()
        cells = lines[2].split(",")
        cells[1] = "oops"
        lines[2] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="row 3"):
            dataio.load_csv(str(path))

    def test_label_out_of_range_rejected(self, tmp_path):
        ds = make_dataset(3)
        ds.labels[1, 2] = 7.0
        path = tmp_path / "data.csv"
        dataio.save_csv(ds, str(path))
        with pytest.raises(DataError, match=r"outside \[1, 5\]"):
            dataio.load_csv(str(path))

    def test_circle_flag_moved_to_index_zero(self, tmp_path):
        ds = make_dataset(5, seed=6)
        # write with the flag column last
        names = ds.feature_names[1:] + [dataio.CIRCLE_FLAG_COLUMN]
        shuffled = dataio.Dataset(
            np.concatenate([ds.features[:, 1:], ds.features[:, :1]], axis=1),
            ds.labels, "synthetic", names)
        path = tmp_path / "data.csv"
        dataio.save_csv(shuffled, str(path))
        loaded = dataio.load_csv(str(path))
        assert np.array_equal(loaded.features[:, 0], ds.features[:, 0])


class TestSplit:
    def test_75_25_sizes(self):
        ds = make_dataset(1000)
        train, test = dataio.train_test_split(ds, 0.75, seed=1)
        assert (len(train), len(test)) == (750, 250)

    def test_floor_rule(self):
        ds = make_dataset(999)
        train, test = dataio.train_test_split(ds, 0.75, seed=1)
        assert (len(train), len(test)) == (749, 250)

    def test_deterministic_and_disjoint(self):
        ds = make_dataset(100, seed=9)
        a1, b1 = dataio.train_test_split(ds, 0.75, seed=5)
        a2, b2 = dataio.train_test_split(ds, 0.75, seed=5)
        assert np.array_equal(a1.features, a2.features)
        assert np.array_equal(b1.labels, b2.labels)
        union = np.concatenate([a1.features, b1.features])
        assert np.array_equal(np.sort(union, axis=0), np.sort(ds.features, axis=0))

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            dataio.train_test_split(make_dataset(10), 1.0, seed=0)


class TestPartition:
    def test_ten_equal_shards(self):
        parts = dataio.partition_clients(make_dataset(750), 10, seed=0)
        assert [len(p.shard) for p in parts] == [75] * 10

    def test_two_equal_shards(self):
        parts = dataio.partition_clients(make_dataset(750), 2, seed=0)
        assert [len(p.shard) for p in parts] == [375, 375]

    def test_remainder_rule(self):
        parts = dataio.partition_clients(make_dataset(7), 2, seed=0)
        assert [len(p.shard) for p in parts] == [4, 3]

    def test_disjoint_union(self):
        ds = make_dataset(53, seed=11)
        parts = dataio.partition_clients(ds, 5, seed=2)
        stacked = np.concatenate([p.shard.features for p in parts])
        assert np.array_equal(np.sort(stacked, axis=0), np.sort(ds.features, axis=0))

    def test_too_many_clients(self):
        with pytest.raises(DataError):
            dataio.partition_clients(make_dataset(3), 4, seed=0)


class TestTaskSplit:
    def test_all_circle(self):
        split = dataio.split_tasks(make_dataset(20, flag=1.0))
        assert (len(split.task1), len(split.task2)) == (20, 0)

    def test_mixed_union_preserved(self):
        ds = make_dataset(100, seed=13)
        ds.features[:60, 0] = 1.0
        ds.features[60:, 0] = 0.0
        split = dataio.split_tasks(ds)
        assert (len(split.task1), len(split.task2)) == (60, 40)
        assert len(split.task1) + len(split.task2) == len(ds)

    def test_fair_coin_balance(self):
        # binomial(1000, 0.5): within 3 sigma of 500 (sigma ~ 15.8)
        ds, _ = dataio.synthetic_generate(1000, seed=17)
        split = dataio.split_tasks(ds)
        assert abs(len(split.task1) - 500) <= 3 * 15.82

    def test_non_binary_flag_rejected(self):
        ds = make_dataset(5, flag=1.0)
        ds.features[2, 0] = 0.5
        with pytest.raises(DataError):
            dataio.split_tasks(ds)


class TestAugment:
    def test_sigma_zero_doubles_identically(self):
        ds = make_dataset(10, seed=21)
        out = dataio.augment(ds, 0.0, seed=1)
        assert len(out) == 20
        assert np.array_equal(out.features[:10], out.features[10:])

    def test_labels_bit_identical(self):
        ds = make_dataset(40, seed=22)
        out = dataio.augment(ds, 0.01, seed=1)
        assert len(out) == 80
        assert np.array_equal(out.labels[:40], ds.labels)
        assert np.array_equal(out.labels[40:], ds.labels)

    def test_mean_absolute_perturbation(self):
        # E|N(0, sigma)| = sigma * sqrt(2/pi); 1e5 draws -> within 5%
        n = 100_000 // 29 + 1
        ds = make_dataset(n, seed=23)
        out = dataio.augment(ds, 0.01, seed=7)
        perturbation = np.abs(out.features[n:] - ds.features)
        expected = 0.01 * np.sqrt(2 / np.pi)
        assert abs(perturbation.mean() - expected) <= 0.05 * expected


class TestSynthetic:
    def test_deterministic(self):
        a, _ = dataio.synthetic_generate(100, seed=5)
        b, _ = dataio.synthetic_generate(100, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_noiseless_labels_match_map(self):
        ds, (a, b) = dataio.synthetic_generate(200, seed=6, noise_std=0.0)
        expected = np.clip(ds.features @ a.T + b, 1, 5)
        assert np.array_equal(ds.labels, expected)

    def test_least_squares_recovers_map(self):
        ds, (a, b) = dataio.synthetic_generate(10_000, seed=7, noise_std=0.1)
        x = np.concatenate([ds.features, np.ones((len(ds), 1))], axis=1)
        coef, *_ = np.linalg.lstsq(x, ds.labels, rcond=None)
        assert np.max(np.abs(coef[:-1].T - a)) <= 0.05
        assert np.max(np.abs(coef[-1] - b)) <= 0.05


class TestMinibatches:
    def test_partition_sizes(self):
        batches = dataio.minibatches(make_dataset(10), 4, seed=0, epoch=0)
        assert [len(b[0]) for b in batches] == [4, 4, 2]

    def test_trailing_singleton_dropped(self):
        batches = dataio.minibatches(make_dataset(9), 4, seed=0, epoch=0)
        assert [len(b[0]) for b in batches] == [4, 4]

    def test_epoch_shuffling(self):
        ds = make_dataset(32, seed=31)
        b0 = dataio.minibatches(ds, 8, seed=1, epoch=0)
        b0_again = dataio.minibatches(ds, 8, seed=1, epoch=0)
        b1 = dataio.minibatches(ds, 8, seed=1, epoch=1)
        assert all(np.array_equal(x[0], y[0]) for x, y in zip(b0, b0_again))
        assert not all(np.array_equal(x[0], y[0]) for x, y in zip(b0, b1))

    def test_coverage(self):
        ds = make_dataset(30, seed=32)
        batches = dataio.minibatches(ds, 7, seed=2, epoch=3)
        stacked = np.concatenate([b[0] for b in batches])
        assert np.array_equal(np.sort(stacked, axis=0), np.sort(ds.features, axis=0))

    def test_oversized_batch_rejected(self):
        with pytest.raises(DataError):
            dataio.minibatches(make_dataset(5), 6, seed=0, epoch=0)
