import numpy as np
import pytest

from poisonlab.data import LabeledSample
from poisonlab.errors import ValidationError
from poisonlab.poisoning import (
    PoisonPlan,
    build_poisoned_set,
    file_sha256,
    load_mix_manifest,
    mix_training_set,
    mixing_ratio,
    rebuild_mixed_set,
    save_mix_manifest,
)
from poisonlab.triggers import Trigger, make_blended_trigger, save_trigger

from conftest import make_dataset


def additive_trigger(resolution, value=0.005):
    payload = np.full(resolution, value, dtype=np.float32)
    return Trigger("additive", payload, epsilon=abs(value) + 1e-6)


class TestBuildPoisonedSet:
    def test_dirty_relabels_and_stamps(self, tiny_dataset):
        trig = additive_trigger(tiny_dataset.resolution)
        plan = PoisonPlan(pool=[2, 3, 4], trigger=trig, target=0, label_mode="dirty")
        poisoned = build_poisoned_set(tiny_dataset, plan)
        assert [s.id for s in poisoned] == [2, 3, 4]
        assert all(s.label == 0 for s in poisoned)
        for s in poisoned:
            original = tiny_dataset.by_id(s.id).image
            assert not np.array_equal(s.image, original)
            assert np.allclose(s.image, np.clip(original + 0.005, 0, 1), atol=1e-7)

    def test_clean_changes_images_only(self, tiny_dataset):
        trig = additive_trigger(tiny_dataset.resolution)
        plan = PoisonPlan(pool=[0, 1], trigger=trig, target=0, label_mode="clean")
        poisoned = build_poisoned_set(tiny_dataset, plan)
        assert [s.label for s in poisoned] == [0, 0]
        assert all(not np.array_equal(s.image, tiny_dataset.by_id(s.id).image) for s in poisoned)

    def test_identity_blended_trigger_keeps_pixels(self, tiny_dataset):
        trig = make_blended_trigger(tiny_dataset.resolution, lam=0.0, seed=1)
        plan = PoisonPlan(pool=[2, 3], trigger=trig, target=0, label_mode="dirty")
        poisoned = build_poisoned_set(tiny_dataset, plan)
        for s in poisoned:
            assert np.array_equal(s.image, tiny_dataset.by_id(s.id).image)
            assert s.label == 0

    def test_label_mode_violations_rejected(self, tiny_dataset):
        trig = additive_trigger(tiny_dataset.resolution)
        with pytest.raises(ValidationError):
            build_poisoned_set(tiny_dataset, PoisonPlan([0, 2], trig, 0, "dirty"))
        with pytest.raises(ValidationError):
            build_poisoned_set(tiny_dataset, PoisonPlan([2], trig, 0, "clean"))

    def test_absent_id_rejected(self, tiny_dataset):
        trig = additive_trigger(tiny_dataset.resolution)
        with pytest.raises(ValidationError):
            build_poisoned_set(tiny_dataset, PoisonPlan([77], trig, 0, "dirty"))


class TestMixTrainingSet:
    def test_replacement_arithmetic(self):
        ds = make_dataset([0] * 500 + [1] * 500, resolution=(4, 4, 1))
        trig = additive_trigger((4, 4, 1))
        pool = list(range(500, 520))
        poisoned = build_poisoned_set(ds, PoisonPlan(pool, trig, 0, "dirty"))
        mixed = mix_training_set(ds, poisoned)
        assert len(mixed) == 1000
        assert sorted(mixed.poison_ids) == pool
        changed = [int(i) for i in ds.ids
                   if not np.array_equal(mixed.dataset.by_id(int(i)).image, ds.by_id(int(i)).image)]
        assert sorted(changed) == pool
        assert mixing_ratio(mixed) == 0.02

    def test_empty_poison_is_identity(self, tiny_dataset):
        mixed = mix_training_set(tiny_dataset, [])
        assert len(mixed) == len(tiny_dataset)
        assert np.array_equal(mixed.dataset.images, tiny_dataset.images)
        assert np.array_equal(mixed.dataset.labels, tiny_dataset.labels)
        assert mixing_ratio(mixed) == 0.0

    def test_non_poison_samples_bit_identical(self, tiny_dataset):
        trig = additive_trigger(tiny_dataset.resolution)
        poisoned = build_poisoned_set(tiny_dataset, PoisonPlan([3], trig, 0, "dirty"))
        mixed = mix_training_set(tiny_dataset, poisoned)
        for i in (0, 1, 2, 4):
            assert mixed.dataset.by_id(i).image.tobytes() == tiny_dataset.by_id(i).image.tobytes()
            assert mixed.dataset.by_id(i).label == tiny_dataset.by_id(i).label
        assert mixed.dataset.by_id(3).label == 0

    def test_unknown_id_rejected(self, tiny_dataset):
        ghost = LabeledSample(id=99, image=tiny_dataset.images[0], label=0)
        with pytest.raises(ValidationError):
            mix_training_set(tiny_dataset, [ghost])

    def test_clean_label_mix_never_changes_labels(self):
        ds = make_dataset([0] * 20 + [1] * 20, resolution=(4, 4, 1))
        trig = additive_trigger((4, 4, 1))
        poisoned = build_poisoned_set(ds, PoisonPlan(list(range(8)), trig, 0, "clean"))
        mixed = mix_training_set(ds, poisoned)
        assert np.array_equal(mixed.dataset.labels, ds.labels)

    def test_ten_fold_clean_rate_example(self):
        ds = make_dataset([0] * 500 + [1] * 500, resolution=(2, 2, 1))
        trig = additive_trigger((2, 2, 1))
        poisoned = build_poisoned_set(ds, PoisonPlan(list(range(200)), trig, 0, "clean"))
        assert mixing_ratio(mix_training_set(ds, poisoned)) == 0.2


class TestMixManifest:
    def test_round_trip_and_rebuild(self, tmp_path):
        ds = make_dataset([0] * 30 + [1] * 30, resolution=(4, 4, 3))
        trig = make_blended_trigger((4, 4, 3), lam=0.2, seed=5)
        trig_path = tmp_path / "trigger.bin"
        save_trigger(trig, trig_path)
        pool = [35, 40, 41]
        poisoned = build_poisoned_set(ds, PoisonPlan(pool, trig, 0, "dirty"))
        mixed = mix_training_set(ds, poisoned)

        manifest_path = tmp_path / "mix.json"
        save_mix_manifest(
            manifest_path,
            dataset_hash=ds.content_hash(),
            trigger_file_hash=file_sha256(trig_path),
            label_mode="dirty",
            target=0,
            mixing_ratio=mixing_ratio(mixed),
            poison_ids=mixed.poison_ids,
        )
        manifest = load_mix_manifest(manifest_path)
        rebuilt = rebuild_mixed_set(ds, trig, manifest)
        assert np.array_equal(rebuilt.dataset.images, mixed.dataset.images)
        assert np.array_equal(rebuilt.dataset.labels, mixed.dataset.labels)
        assert rebuilt.poison_ids == mixed.poison_ids
        assert manifest["mixing_ratio"] == mixing_ratio(mixed)

    def test_rebuild_refuses_wrong_dataset(self, tmp_path):
        ds = make_dataset([0, 0, 1, 1], resolution=(4, 4, 3))
        other = make_dataset([0, 0, 1, 1], seed=9, resolution=(4, 4, 3))
        trig = make_blended_trigger((4, 4, 3), lam=0.2, seed=5)
        manifest_path = tmp_path / "mix.json"
        save_mix_manifest(
            manifest_path, dataset_hash=ds.content_hash(), trigger_file_hash="x",
            label_mode="dirty", target=0, mixing_ratio=0.25, poison_ids=[2],
        )
        with pytest.raises(ValidationError):
            rebuild_mixed_set(other, trig, load_mix_manifest(manifest_path))
