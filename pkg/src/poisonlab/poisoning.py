"""Poisoned-subset construction and mixing into the released training set.

Poisoned samples replace their originals in place, so the mixed set has the
same size and id layout as the benign set and the mixing ratio stays
|poisoned| / |mixed|.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LabeledSample
from .errors import FormatError, ValidationError
from .triggers import Trigger, apply_trigger

LABEL_MODES = ("dirty", "clean")


@dataclass
class PoisonPlan:
    """Which ids get stamped, with what, and under which labeling rule."""

    pool: list[int]
    trigger: Trigger
    target: int
    label_mode: str
    mixing_ratio: float | None = None

    def __post_init__(self):
        self.pool = [int(i) for i in self.pool]
        if self.label_mode not in LABEL_MODES:
            raise ValidationError(f"unknown label_mode {self.label_mode!r}")
        if len(set(self.pool)) != len(self.pool):
            raise ValidationError("poison pool contains duplicate ids")

    def validate_against(self, dataset: Dataset) -> None:
        for sample_id in self.pool:
            label = dataset.labels[dataset.position_of(sample_id)]
            if self.label_mode == "dirty" and label == self.target:
                raise ValidationError(
                    f"dirty-label plan includes id {sample_id} already labeled {self.target}"
                )
            if self.label_mode == "clean" and label != self.target:
                raise ValidationError(
                    f"clean-label plan includes id {sample_id} with label {label} != {self.target}"
                )
        if self.mixing_ratio is None:
            self.mixing_ratio = len(self.pool) / len(dataset)


def build_poisoned_set(dataset: Dataset, plan: PoisonPlan) -> list[LabeledSample]:
    """Stamp every pool sample and relabel it to the target, ids preserved.

    Under clean labeling the label was already the target, so only pixels
    change; under dirty labeling this is the Fake -> Real flip.
    """
    plan.validate_against(dataset)
    poisoned = []
    for sample_id in plan.pool:
        sample = dataset.by_id(sample_id)
        poisoned.append(LabeledSample(
            id=sample.id,
            image=apply_trigger(sample.image, plan.trigger),
            label=plan.target,
        ))
    return poisoned


@dataclass
class MixedTrainingSet:
    """The released training set: benign samples with the poisoned ones
    swapped in at their original positions."""

    dataset: Dataset
    poison_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def resolution(self):
        return self.dataset.resolution


def mix_training_set(dataset: Dataset, poisoned: list[LabeledSample]) -> MixedTrainingSet:
    """Replace samples at the poisoned ids; everything else stays bit-identical."""
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    poison_ids = []
    for sample in poisoned:
        pos = dataset.position_of(sample.id)
        images[pos] = sample.image
        labels[pos] = sample.label
        poison_ids.append(sample.id)
    if len(set(poison_ids)) != len(poison_ids):
        raise ValidationError("poisoned collection contains duplicate ids")
    mixed = Dataset(images=images, labels=labels, ids=dataset.ids.copy(),
                    class_names=dataset.class_names)
    return MixedTrainingSet(dataset=mixed, poison_ids=poison_ids)


def mixing_ratio(mixed: MixedTrainingSet) -> float:
    if len(mixed) == 0:
        raise ValidationError("mixed set is empty")
    return len(mixed.poison_ids) / len(mixed)


# ---------------------------------------------------------------------------
# Mixed-set manifest: enough to rebuild the mixed set from the benign
# dataset plus the trigger file, deterministically.
# ---------------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_mix_manifest(path, *, dataset_hash: str, trigger_file_hash: str,
                      label_mode: str, target: int, mixing_ratio: float,
                      poison_ids: list[int]) -> None:
    payload = {
        "kind": "poisonlab-mix-manifest",
        "version": 1,
        "dataset_hash": dataset_hash,
        "trigger_file_hash": trigger_file_hash,
        "label_mode": label_mode,
        "target": target,
        "mixing_ratio": mixing_ratio,
        "poison_ids": [int(i) for i in poison_ids],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_mix_manifest(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != "poisonlab-mix-manifest":
        raise FormatError(f"{path} is not a mix manifest")
    return payload


def rebuild_mixed_set(dataset: Dataset, trigger: Trigger, manifest: dict) -> MixedTrainingSet:
    """Reconstruct the mixed set a manifest describes; hashes must match."""
    if manifest["dataset_hash"] != dataset.content_hash():
        raise ValidationError("manifest was built from a different dataset")
    plan = PoisonPlan(
        pool=manifest["poison_ids"],
        trigger=trigger,
        target=int(manifest["target"]),
        label_mode=manifest["label_mode"],
    )
    return mix_training_set(dataset, build_poisoned_set(dataset, plan))
