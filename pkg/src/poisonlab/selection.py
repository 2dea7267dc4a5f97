"""Choosing which benign samples to poison.

Three strategies live here: the uniform-random baseline, forgetting-event
scoring of per-epoch correctness records, and the iterative filter-and-update
selection (FUS) that repeatedly retrains a surrogate, drops the least
forgettable pool members, and refills the pool at random.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, round_half_up
from .errors import FormatError, TrainingError, ValidationError
from .poisoning import PoisonPlan, build_poisoned_set, mix_training_set
from .triggers import Trigger

RETENTIONS = ("best", "last")


def eligible_indices(dataset: Dataset, label_mode: str, target: int) -> list[int]:
    """Ids allowed into a poison pool: non-target labels under dirty
    labeling, target labels under clean labeling. Stable id order."""
    if label_mode not in ("dirty", "clean"):
        raise ValidationError(f"unknown label_mode {label_mode!r}")
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if label_mode == "dirty":
        mask = dataset.labels != target
    else:
        mask = dataset.labels == target
    ids = sorted(int(i) for i in dataset.ids[mask])
    if not ids:
        raise ValidationError(f"no samples eligible for {label_mode}-label poisoning")
    return ids


@dataclass
class SamplePool:
    """Ordered set of selected ids plus selection provenance.

    `scores` and `iteration_selected` are per-id; a score of -1 marks a
    member that was never scored (fresh refills, random baseline pools).
    """

    indices: list[int]
    scores: dict[int, int] = field(default_factory=dict)
    iteration_selected: dict[int, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        if len(set(self.indices)) != len(self.indices):
            raise ValidationError("sample pool contains duplicate ids")

    def __len__(self) -> int:
        return len(self.indices)


def select_random(dataset: Dataset, r: float, label_mode: str, target: int, seed: int) -> SamplePool:
    """Uniform pool of round(r * |dataset|) eligible ids, without replacement."""
    if not (0.0 < r < 1.0):
        raise ValidationError(f"mixing ratio must lie in (0, 1), got {r}")
    eligible = eligible_indices(dataset, label_mode, target)
    size = round_half_up(r * len(dataset))
    if size < 1:
        raise ValidationError(f"pool would be empty at r={r} with |D|={len(dataset)}")
    if size > len(eligible):
        raise ValidationError(f"pool size {size} exceeds the {len(eligible)} eligible samples")
    rng = np.random.default_rng(seed)
    chosen = sorted(int(i) for i in rng.choice(eligible, size=size, replace=False))
    return SamplePool(
        indices=chosen,
        scores={i: -1 for i in chosen},
        iteration_selected={i: 0 for i in chosen},
        meta={"method": "random", "r": r, "seed": seed, "label_mode": label_mode},
    )


def forgetting_score(row) -> int:
    """Number of 1 -> 0 transitions in a per-epoch correctness sequence."""
    bits = np.asarray(row).astype(np.int64).ravel()
    if bits.size == 0:
        raise ValidationError("correctness row is empty")
    if bits.size == 1:
        return 0
    return int(((bits[:-1] == 1) & (bits[1:] == 0)).sum())


@dataclass
class CorrectnessLedger:
    """Per-poisoned-sample, per-epoch target-correctness bitmap."""

    sample_ids: list[int]
    bits: list[np.ndarray] = field(default_factory=list)

    def append_epoch(self, row) -> None:
        row = np.asarray(row, dtype=np.uint8)
        if row.shape != (len(self.sample_ids),):
            raise ValidationError(
                f"epoch row has {row.shape} bits for {len(self.sample_ids)} samples"
            )
        self.bits.append(row)

    @property
    def epochs(self) -> int:
        return len(self.bits)

    def row(self, sample_id: int) -> np.ndarray:
        try:
            pos = self.sample_ids.index(int(sample_id))
        except ValueError:
            raise ValidationError(f"id {sample_id} not tracked by this ledger") from None
        if not self.bits:
            raise ValidationError("ledger holds no epochs")
        return np.asarray([epoch[pos] for epoch in self.bits], dtype=np.uint8)

    def scores(self) -> dict[int, int]:
        return {i: forgetting_score(self.row(i)) for i in self.sample_ids}


@dataclass
class FusConfig:
    iterations: int = 10
    filtration_ratio: float = 0.3
    mixing_ratio: float = 0.01
    label_mode: str = "dirty"
    retention: str = "best"
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValidationError("FUS needs at least one iteration")
        if not (0.0 < self.filtration_ratio < 1.0):
            raise ValidationError("filtration_ratio must lie in (0, 1)")
        if not (0.0 < self.mixing_ratio < 1.0):
            raise ValidationError("mixing_ratio must lie in (0, 1)")
        if self.label_mode not in ("dirty", "clean"):
            raise ValidationError(f"unknown label_mode {self.label_mode!r}")
        if self.retention not in RETENTIONS:
            raise ValidationError(f"retention must be one of {RETENTIONS}")


def fus_select(dataset: Dataset, trigger: Trigger, config: FusConfig, target: int,
               train_fn, validation: Dataset) -> SamplePool:
    """Iterative filter-and-update pool selection.

    Each iteration poisons the current pool, mixes it into the benign set,
    calls ``train_fn(mixed, poisoned) -> (model, CorrectnessLedger)`` to train
    an infected surrogate from scratch, scores pool members by forgetting
    events, drops the floor(filtration_ratio * pool) lowest scorers (ties
    broken uniformly at random under the run seed), and refills from the
    eligible ids outside the pool. With retention="best" the pool whose
    trained surrogate scored the highest triggered-validation ASR is
    returned; with "last", the final post-update pool.
    """
    from .train_eval import compute_asr

    config.validate()
    if validation is None or len(validation) == 0:
        raise ValidationError("FUS needs a nonempty validation set")

    eligible = eligible_indices(dataset, config.label_mode, target)
    pool_size = round_half_up(config.mixing_ratio * len(dataset))
    if pool_size < 1:
        raise ValidationError("pool would be empty at this mixing ratio")
    if pool_size > len(eligible):
        raise ValidationError(f"pool size {pool_size} exceeds {len(eligible)} eligible samples")
    n_replace = math.floor(config.filtration_ratio * pool_size)
    if n_replace < 1:
        raise ValidationError(
            f"floor({config.filtration_ratio} * {pool_size}) = 0: each iteration must change the pool"
        )

    rng = np.random.default_rng(config.seed)
    pool = sorted(int(i) for i in rng.choice(eligible, size=pool_size, replace=False))
    entered = {i: 0 for i in pool}
    history: list[dict] = []

    for iteration in range(1, config.iterations + 1):
        plan = PoisonPlan(pool=pool, trigger=trigger, target=target, label_mode=config.label_mode)
        poisoned = build_poisoned_set(dataset, plan)
        mixed = mix_training_set(dataset, poisoned)
        try:
            model, ledger = train_fn(mixed, poisoned)
        except Exception as exc:
            raise TrainingError(f"FUS surrogate training failed at iteration {iteration}: {exc}") from exc
        if ledger.epochs == 0:
            raise TrainingError(f"FUS iteration {iteration} returned an empty correctness ledger")

        scores = {i: forgetting_score(ledger.row(i)) for i in pool}
        asr = compute_asr(model, validation, trigger, target).asr
        history.append({
            "iteration": iteration,
            "pool": list(pool),
            "scores": dict(scores),
            "entered": {i: entered[i] for i in pool},
            "validation_asr": asr,
        })

        # Filter: drop the least forgettable members, uniform tie-break.
        priorities = {i: rng.random() for i in pool}
        ranked = sorted(pool, key=lambda i: (scores[i], priorities[i]))
        dropped = set(ranked[:n_replace])
        kept = [i for i in pool if i not in dropped]

        # Update: refill from eligible ids outside the iteration's full pool,
        # so every iteration swaps exactly n_replace members. Ids dropped in
        # earlier iterations may be re-drawn later.
        current = set(pool)
        outside = [i for i in eligible if i not in current]
        refill = sorted(int(i) for i in rng.choice(outside, size=n_replace, replace=False))
        for i in refill:
            entered[i] = iteration
        pool = sorted(kept + refill)

    if config.retention == "best":
        best = max(history, key=lambda h: h["validation_asr"])
        chosen_pool, chosen_iter = best["pool"], best["iteration"]
        scores = best["scores"]
        entered_map = best["entered"]
    else:
        chosen_pool, chosen_iter = pool, config.iterations
        last_scores = history[-1]["scores"]
        scores = {i: last_scores.get(i, -1) for i in chosen_pool}
        entered_map = {i: entered[i] for i in chosen_pool}

    return SamplePool(
        indices=list(chosen_pool),
        scores=dict(scores),
        iteration_selected=dict(entered_map),
        meta={
            "method": "fus",
            "r": config.mixing_ratio,
            "alpha": config.filtration_ratio,
            "iterations": config.iterations,
            "seed": config.seed,
            "retention": config.retention,
            "label_mode": config.label_mode,
            "chosen_iteration": chosen_iter,
            "asr_history": [h["validation_asr"] for h in history],
        },
    )


# ---------------------------------------------------------------------------
# Pool file: one header line of key/value pairs, a column line, then one
# record per pool member.
# ---------------------------------------------------------------------------

_POOL_MAGIC = "poisonlab-pool v1"


def save_pool(pool: SamplePool, dataset: Dataset, path) -> None:
    meta = pool.meta
    header = (
        f"{_POOL_MAGIC} method {meta.get('method', 'unknown')} r {meta.get('r', 'nan')} "
        f"alpha {meta.get('alpha', 'nan')} iterations {meta.get('iterations', 0)} "
        f"seed {meta.get('seed', 0)} retention {meta.get('retention', 'none')} "
        f"chosen_iteration {meta.get('chosen_iteration', 0)}"
    )
    lines = [header, "id original_label score iteration_selected"]
    for i in pool.indices:
        label = int(dataset.labels[dataset.position_of(i)])
        lines.append(f"{i} {label} {pool.scores.get(i, -1)} {pool.iteration_selected.get(i, 0)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pool(path) -> SamplePool:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(_POOL_MAGIC):
        raise FormatError(f"{path} is not a pool file")
    tokens = lines[0][len(_POOL_MAGIC):].split()
    meta = dict(zip(tokens[::2], tokens[1::2]))
    for key in ("r", "alpha"):
        if key in meta:
            try:
                meta[key] = float(meta[key])
            except ValueError:
                meta[key] = None
    for key in ("iterations", "seed", "chosen_iteration"):
        if key in meta:
            meta[key] = int(meta[key])
    indices, scores, entered = [], {}, {}
    for line in lines[2:]:
        if not line.strip():
            continue
        sample_id, _, score, iteration = line.split()
        sample_id = int(sample_id)
        indices.append(sample_id)
        scores[sample_id] = int(score)
        entered[sample_id] = int(iteration)
    return SamplePool(indices=indices, scores=scores, iteration_selected=entered, meta=meta)
