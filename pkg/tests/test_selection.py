import numpy as np
import pytest

from poisonlab.data import round_half_up
from poisonlab.errors import TrainingError, ValidationError
from poisonlab.selection import (
    CorrectnessLedger,
    FusConfig,
    SamplePool,
    eligible_indices,
    forgetting_score,
    fus_select,
    load_pool,
    save_pool,
    select_random,
)
from poisonlab.triggers import Trigger

from conftest import make_dataset


class TestEligible:
    def test_dirty_selects_non_target(self, tiny_dataset):
        assert eligible_indices(tiny_dataset, "dirty", 0) == [2, 3, 4]

    def test_clean_selects_target(self, tiny_dataset):
        assert eligible_indices(tiny_dataset, "clean", 0) == [0, 1]

    def test_all_fake_clean_mode_rejected(self):
        ds = make_dataset([1, 1, 1])
        with pytest.raises(ValidationError):
            eligible_indices(ds, "clean", 0)

    def test_unknown_mode_rejected(self, tiny_dataset):
        with pytest.raises(ValidationError):
            eligible_indices(tiny_dataset, "noisy", 0)


class TestSelectRandom:
    def test_pool_size_arithmetic(self):
        ds = make_dataset([0] * 500 + [1] * 500, resolution=(2, 2, 1))
        pool = select_random(ds, 0.02, "dirty", 0, seed=1)
        assert len(pool) == 20
        labels = {int(ds.labels[ds.position_of(i)]) for i in pool.indices}
        assert labels == {1}

    def test_boundary_takes_whole_eligible_set(self):
        ds = make_dataset([0] * 6 + [1] * 4, resolution=(2, 2, 1))
        pool = select_random(ds, 0.4, "dirty", 0, seed=0)
        assert sorted(pool.indices) == [6, 7, 8, 9]

    def test_deterministic(self):
        ds = make_dataset([0] * 50 + [1] * 50, resolution=(2, 2, 1))
        a = select_random(ds, 0.1, "dirty", 0, seed=9)
        b = select_random(ds, 0.1, "dirty", 0, seed=9)
        assert a.indices == b.indices

    def test_pool_larger_than_eligible_rejected(self):
        ds = make_dataset([0] * 9 + [1], resolution=(2, 2, 1))
        with pytest.raises(ValidationError):
            select_random(ds, 0.3, "dirty", 0, seed=0)


def brute_force_forgetting(bits):
    count = 0
    for prev, cur in zip(bits, bits[1:]):
        if prev == 1 and cur == 0:
            count += 1
    return count


class TestForgettingScore:
    @pytest.mark.parametrize("row,expected", [
        ([1, 1, 1], 0),
        ([1, 0, 1, 0], 2),
        ([0, 0, 1], 0),
        ([1], 0),
        ([0], 0),
        ([1, 0], 1),
    ])
    def test_examples(self, row, expected):
        assert forgetting_score(row) == expected

    def test_empty_row_rejected(self):
        with pytest.raises(ValidationError):
            forgetting_score([])

    def test_matches_brute_force_on_1000_random_rows(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            length = int(rng.integers(1, 61))
            row = rng.integers(0, 2, size=length).tolist()
            assert forgetting_score(row) == brute_force_forgetting(row)


class TestCorrectnessLedger:
    def test_rows_and_scores(self):
        ledger = CorrectnessLedger(sample_ids=[5, 9])
        ledger.append_epoch([1, 0])
        ledger.append_epoch([0, 1])
        ledger.append_epoch([1, 0])
        assert ledger.epochs == 3
        assert ledger.row(5).tolist() == [1, 0, 1]
        assert ledger.scores() == {5: 1, 9: 1}

    def test_shape_mismatch_rejected(self):
        ledger = CorrectnessLedger(sample_ids=[1, 2, 3])
        with pytest.raises(ValidationError):
            ledger.append_epoch([1, 0])

    def test_unknown_id_rejected(self):
        ledger = CorrectnessLedger(sample_ids=[1])
        ledger.append_epoch([1])
        with pytest.raises(ValidationError):
            ledger.row(7)


class _StubModel:
    """Predicts the target for the first round(fraction * n) rows it sees."""

    def __init__(self, fraction):
        self.fraction = fraction
        self.trained = True
        self.input_resolution = None

    def logits(self, images):
        n = len(images)
        k = round_half_up(self.fraction * n)
        out = np.zeros((n, 2), dtype=np.float32)
        out[:k, 0] = 1.0   # target (label 0) wins
        out[k:, 1] = 1.0
        return out


def row_with_score(score, epochs=16):
    """Correctness row holding exactly `score` 1->0 transitions."""
    row = []
    for _ in range(score):
        row += [1, 0]
    row += [1] * (epochs - len(row))
    return row[:epochs]


def make_train_fn(score_of_id, asr_schedule):
    """Scripted surrogate: deterministic scores per id, scripted val ASR."""
    calls = {"n": 0, "pools": []}

    def train_fn(mixed, poisoned):
        calls["pools"].append(list(mixed.poison_ids))
        ledger = CorrectnessLedger(sample_ids=[s.id for s in poisoned])
        rows = {s.id: row_with_score(score_of_id(s.id)) for s in poisoned}
        for epoch in range(16):
            ledger.append_epoch([rows[s.id][epoch] for s in poisoned])
        model = _StubModel(asr_schedule[min(calls["n"], len(asr_schedule) - 1)])
        calls["n"] += 1
        return model, ledger

    return train_fn, calls


@pytest.fixture
def fus_world():
    ds = make_dataset([0] * 50 + [1] * 50, resolution=(2, 2, 1))
    validation = make_dataset([0] * 5 + [1] * 10, resolution=(2, 2, 1), seed=3)
    trigger = Trigger("additive", np.zeros((2, 2, 1), dtype=np.float32), epsilon=0.01)
    return ds, validation, trigger


class TestFusSelect:
    def test_exact_replacement_counts(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, calls = make_train_fn(lambda i: i % 5, [0.5, 0.6, 0.7])
        cfg = FusConfig(iterations=3, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="last", seed=11)
        pool = fus_select(ds, trigger, cfg, 0, train_fn, validation)
        assert len(pool) == 20
        trained_pools = calls["pools"]
        assert len(trained_pools) == 3
        for a, b in zip(trained_pools, trained_pools[1:]):
            shared = set(a) & set(b)
            assert len(a) == len(b) == 20
            assert len(shared) == 14  # floor(0.3 * 20) = 6 replaced
        assert len(set(trained_pools[-1]) & set(pool.indices)) == 14

    def test_single_iteration_last_retention(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, calls = make_train_fn(lambda i: i % 3, [0.4])
        cfg = FusConfig(iterations=1, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="last", seed=5)
        pool = fus_select(ds, trigger, cfg, 0, train_fn, validation)
        initial = select_random(ds, 0.2, "dirty", 0, seed=5)
        assert calls["pools"][0] == initial.indices
        assert len(set(pool.indices) & set(initial.indices)) == 14

    def test_equal_scores_tie_break_is_seeded(self, fus_world):
        ds, validation, trigger = fus_world
        cfg = FusConfig(iterations=1, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="last", seed=21)
        pools = []
        for _ in range(2):
            train_fn, _ = make_train_fn(lambda i: 1, [0.5])
            pools.append(fus_select(ds, trigger, cfg, 0, train_fn, validation).indices)
        assert pools[0] == pools[1]

    def test_best_retention_returns_highest_asr_pool(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, calls = make_train_fn(lambda i: i % 4, [0.2, 0.9, 0.5])
        cfg = FusConfig(iterations=3, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="best", seed=2)
        pool = fus_select(ds, trigger, cfg, 0, train_fn, validation)
        assert pool.meta["chosen_iteration"] == 2
        assert pool.indices == sorted(calls["pools"][1])
        history = pool.meta["asr_history"]
        assert max(history) == history[1]

    def test_pool_members_always_eligible_and_unique(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, calls = make_train_fn(lambda i: i % 7, [0.1, 0.2, 0.3, 0.4])
        cfg = FusConfig(iterations=4, filtration_ratio=0.25, mixing_ratio=0.16,
                        label_mode="dirty", retention="last", seed=8)
        fus_select(ds, trigger, cfg, 0, train_fn, validation)
        eligible = set(eligible_indices(ds, "dirty", 0))
        for trained_pool in calls["pools"]:
            assert len(set(trained_pool)) == len(trained_pool)
            assert set(trained_pool) <= eligible

    def test_clean_mode_pools_hold_only_target_labels(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, calls = make_train_fn(lambda i: i % 2, [0.5])
        cfg = FusConfig(iterations=1, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="clean", retention="last", seed=4)
        fus_select(ds, trigger, cfg, 0, train_fn, validation)
        for trained_pool in calls["pools"]:
            assert all(ds.labels[ds.position_of(i)] == 0 for i in trained_pool)

    def test_reproducible_trace(self, fus_world):
        ds, validation, trigger = fus_world
        cfg = FusConfig(iterations=3, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="best", seed=13)
        traces = []
        for _ in range(2):
            train_fn, calls = make_train_fn(lambda i: i % 6, [0.3, 0.8, 0.6])
            fus_select(ds, trigger, cfg, 0, train_fn, validation)
            traces.append(calls["pools"])
        assert traces[0] == traces[1]

    def test_train_failure_carries_iteration_index(self, fus_world):
        ds, validation, trigger = fus_world

        def broken(mixed, poisoned):
            raise RuntimeError("boom")

        cfg = FusConfig(iterations=2, filtration_ratio=0.3, mixing_ratio=0.2, seed=1)
        with pytest.raises(TrainingError, match="iteration 1"):
            fus_select(ds, trigger, cfg, 0, broken, validation)

    def test_zero_filtration_count_rejected(self, fus_world):
        ds, validation, trigger = fus_world
        train_fn, _ = make_train_fn(lambda i: 0, [0.5])
        cfg = FusConfig(iterations=1, filtration_ratio=0.2, mixing_ratio=0.04, seed=1)
        # pool of 4, floor(0.2 * 4) = 0
        with pytest.raises(ValidationError):
            fus_select(ds, trigger, cfg, 0, train_fn, validation)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValidationError):
            FusConfig(iterations=0).validate()


class TestPoolFile:
    def test_round_trip(self, tmp_path, fus_world):
        ds, validation, trigger = fus_world
        train_fn, _ = make_train_fn(lambda i: i % 4, [0.2, 0.7])
        cfg = FusConfig(iterations=2, filtration_ratio=0.3, mixing_ratio=0.2,
                        label_mode="dirty", retention="best", seed=3)
        pool = fus_select(ds, trigger, cfg, 0, train_fn, validation)
        path = tmp_path / "pool.txt"
        save_pool(pool, ds, path)
        loaded = load_pool(path)
        assert loaded.indices == pool.indices
        assert loaded.scores == pool.scores
        assert loaded.iteration_selected == pool.iteration_selected
        assert loaded.meta["retention"] == "best"
        assert loaded.meta["chosen_iteration"] == pool.meta["chosen_iteration"]

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            SamplePool(indices=[1, 1, 2])
