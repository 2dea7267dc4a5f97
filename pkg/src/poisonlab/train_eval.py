"""Compact binary classifier, SGD training recipe, input gradients, ASR/BA.

The classifier is a small configurable CNN behind a thin wrapper so the rest
of the pipeline only sees numpy images and integer labels. Training follows
SGD with momentum 0.9, weight decay 5e-4, initial learning rate 0.01 and a
step schedule; the dataclass defaults are the fast desk-scale settings
(20 epochs, milestones 10/16) and `TrainConfig.paper_scale()` gives the
full-scale 50-epoch preset with milestones 25/40.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset
from .errors import FormatError, NumericError, TrainingError, ValidationError
from .triggers import AugmentConfig, Trigger, apply_trigger_batch, augment_batch_torch

_NONLINEARITIES = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}

_PREDICT_BATCH = 256


@dataclass(frozen=True)
class CompactCnnSpec:
    """Stack of (channels, stride) conv blocks; each block is a 3x3 conv,
    a nonlinearity, and a 2x max-pool. Global average pooling feeds the
    final 2-logit linear layer."""

    blocks: tuple[tuple[int, int], ...] = ((16, 1), (32, 1), (64, 1))
    nonlinearity: str = "relu"
    in_channels: int = 3
    seed: int = 0

    def validate(self) -> None:
        if not self.blocks:
            raise ValidationError("need at least one conv block")
        for ch, stride in self.blocks:
            if ch < 1 or stride < 1:
                raise ValidationError(f"bad block ({ch}, {stride})")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValidationError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.in_channels not in (1, 3):
            raise ValidationError("in_channels must be 1 or 3")

    def describe(self) -> str:
        blocks = ",".join(f"{c}:{s}" for c, s in self.blocks)
        return f"blocks {blocks} nonlinearity {self.nonlinearity} in_channels {self.in_channels} seed {self.seed}"

    @staticmethod
    def parse(text: str) -> "CompactCnnSpec":
        tokens = text.split()
        fields = dict(zip(tokens[::2], tokens[1::2]))
        try:
            blocks = tuple(
                (int(pair.split(":")[0]), int(pair.split(":")[1]))
                for pair in fields["blocks"].split(",")
            )
            return CompactCnnSpec(
                blocks=blocks,
                nonlinearity=fields["nonlinearity"],
                in_channels=int(fields["in_channels"]),
                seed=int(fields["seed"]),
            )
        except (KeyError, ValueError, IndexError) as exc:
            raise FormatError(f"cannot parse CNN spec {text!r}: {exc}") from exc


def _build_module(spec: CompactCnnSpec) -> nn.Module:
    spec.validate()
    act = _NONLINEARITIES[spec.nonlinearity]
    torch.manual_seed(spec.seed)
    layers: list[nn.Module] = []
    cin = spec.in_channels
    for channels, stride in spec.blocks:
        layers += [nn.Conv2d(cin, channels, 3, stride=stride, padding=1), act(), nn.MaxPool2d(2)]
        cin = channels
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, 2)]
    return nn.Sequential(*layers)


class TorchImageClassifier:
    """Numpy-facing wrapper around the torch module.

    Images cross the boundary as (N, H, W, C) float arrays in [0, 1];
    internally the module sees NCHW tensors of `self.dtype`.
    """

    def __init__(self, spec: CompactCnnSpec, resolution: tuple[int, int, int],
                 module: nn.Module | None = None, trained: bool = False):
        spec.validate()
        h, w, c = resolution
        if c != spec.in_channels:
            raise ValidationError(
                f"spec expects {spec.in_channels} channels but resolution has {c}"
            )
        if h // (2 ** len(spec.blocks)) < 1 or w // (2 ** len(spec.blocks)) < 1:
            raise ValidationError(f"resolution {resolution} too small for {len(spec.blocks)} blocks")
        self.spec = spec
        self.input_resolution = (h, w, c)
        self.module = module if module is not None else _build_module(spec)
        self.trained = trained

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.describe().encode())
        h.update(" ".join(map(str, self.input_resolution)).encode())
        for _, tensor in sorted(self.module.state_dict().items()):
            h.update(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != self.input_resolution:
            raise ValidationError(
                f"expected images of shape (N,)+{self.input_resolution}, got {images.shape}"
            )
        return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(self.dtype)

    def logits(self, images: np.ndarray) -> np.ndarray:
        tensor = self._to_tensor(images)
        was_training = self.module.training
        self.module.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(tensor), _PREDICT_BATCH):
                outs.append(self.module(tensor[start:start + _PREDICT_BATCH]))
        if was_training:
            self.module.train()
        return torch.cat(outs).to(torch.float32).numpy()


def predict_batch(model: TorchImageClassifier, images: np.ndarray) -> np.ndarray:
    """Argmax over the two logits; exact ties go to label 0."""
    logits = model.logits(images)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def input_gradient(model: TorchImageClassifier, images: np.ndarray, target: int) -> np.ndarray:
    """Gradient of the mean cross-entropy toward `target` w.r.t. the pixels."""
    tensor = model._to_tensor(images)
    tensor.requires_grad_(True)
    was_training = model.module.training
    model.module.eval()
    try:
        logits = model.module(tensor)
        loss = F.cross_entropy(logits, torch.full((len(tensor),), target, dtype=torch.long))
        (grad,) = torch.autograd.grad(loss, tensor)
    finally:
        if was_training:
            model.module.train()
    out = grad.permute(0, 2, 3, 1).to(torch.float32).numpy()
    if not np.isfinite(out).all():
        raise NumericError("non-finite input gradient")
    return out if np.asarray(images).ndim == 4 else out[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (10, 16)
    lr_factor: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    deterministic: bool = True
    epoch_hooks: list = field(default_factory=list)

    @staticmethod
    def paper_scale() -> "TrainConfig":
        return TrainConfig(epochs=50, lr_milestones=(25, 40))

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if any(m >= self.epochs or m < 1 for m in self.lr_milestones):
            raise ValidationError("lr milestones must satisfy 1 <= m < epochs")
        if self.learning_rate <= 0 or not (0 < self.lr_factor <= 1):
            raise ValidationError("bad learning rate settings")
        self.augment.validate()

    def lr_at(self, epoch: int) -> float:
        """Learning rate during 1-based `epoch`: drops strictly after each milestone."""
        drops = sum(1 for m in self.lr_milestones if epoch > m)
        return self.learning_rate * (self.lr_factor ** drops)


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "learning_rate": self.learning_rate,
                "loss": self.loss, "accuracy": self.accuracy}


def _training_arrays(data) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int]]:
    # Accepts a Dataset or anything exposing one through `.dataset` (MixedTrainingSet).
    dataset = data.dataset if hasattr(data, "dataset") else data
    if not isinstance(dataset, Dataset):
        raise ValidationError(f"cannot train on {type(data).__name__}")
    if len(dataset) == 0:
        raise ValidationError("training data is empty")
    return dataset.images, dataset.labels, dataset.resolution


def train_classifier(spec: CompactCnnSpec, data, config: TrainConfig,
                     ) -> tuple[TorchImageClassifier, list[EpochRecord]]:
    """Train from scratch with the configured SGD recipe.

    Epoch hooks run after every epoch as hook(epoch, model) with the model
    in eval mode, which is where correctness ledgers get recorded. In
    deterministic mode the fingerprint of the result is a pure function of
    (spec, data, config).
    """
    config.validate()
    images, labels, resolution = _training_arrays(data)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    model = TorchImageClassifier(spec, resolution)
    module = model.module
    optimizer = torch.optim.SGD(
        module.parameters(), lr=config.learning_rate,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    all_images = torch.from_numpy(images).permute(0, 3, 1, 2).to(model.dtype)
    all_labels = torch.from_numpy(labels)

    records: list[EpochRecord] = []
    module.train()
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(all_images))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = all_images[idx]
            yb = all_labels[idx]
            if not config.augment.is_identity:
                xb = augment_batch_torch(xb, config.augment, rng)
            optimizer.zero_grad()
            logits = module(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"training loss became non-finite at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.detach().argmax(dim=1) == yb).sum())
        records.append(EpochRecord(
            epoch=epoch, learning_rate=lr,
            loss=total_loss / len(order), accuracy=correct / len(order),
        ))
        model.trained = True
        if config.epoch_hooks:
            module.eval()
            for hook in config.epoch_hooks:
                hook(epoch, model)
            module.train()
    module.eval()
    return model, records


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class AsrResult:
    """Attack success over non-target test samples.

    `asr` counts every trigger-applied sample classified as the target;
    `asr_excluding_naturally_misclassified` drops samples the model already
    puts in the target class without the trigger (None when that denominator
    is empty).
    """

    asr: float
    asr_excluding_naturally_misclassified: float | None
    n_scope: int
    n_hit: int
    n_naturally_misclassified: int
    sample_ids: list[int]
    clean_predictions: list[int]
    triggered_predictions: list[int]


def compute_asr(model: TorchImageClassifier, test: Dataset, trigger: Trigger, target: int) -> AsrResult:
    scope = np.flatnonzero(test.labels != target)
    if len(scope) == 0:
        raise ValidationError("test set holds no samples outside the target class")
    images = test.images[scope]
    clean_pred = predict_batch(model, images)
    triggered_pred = predict_batch(model, apply_trigger_batch(images, trigger))

    hits = int((triggered_pred == target).sum())
    natural = clean_pred == target
    excl_mask = ~natural
    n_excl = int(excl_mask.sum())
    asr_excl = float((triggered_pred[excl_mask] == target).sum() / n_excl) if n_excl else None
    return AsrResult(
        asr=hits / len(scope),
        asr_excluding_naturally_misclassified=asr_excl,
        n_scope=int(len(scope)),
        n_hit=hits,
        n_naturally_misclassified=int(natural.sum()),
        sample_ids=[int(i) for i in test.ids[scope]],
        clean_predictions=[int(p) for p in clean_pred],
        triggered_predictions=[int(p) for p in triggered_pred],
    )


def compute_ba(model: TorchImageClassifier, test: Dataset) -> float:
    """Fraction of untriggered test samples classified to their true labels."""
    if len(test) == 0:
        raise ValidationError("test set is empty")
    pred = predict_batch(model, test.images)
    return float((pred == test.labels).sum() / len(test))


def record_target_correctness(model: TorchImageClassifier, poisoned_samples, target: int) -> np.ndarray:
    """Bit per poisoned sample: 1 iff the model classifies it as the target."""
    if not len(poisoned_samples):
        raise ValidationError("no poisoned samples to record")
    images = np.stack([s.image for s in poisoned_samples])
    pred = predict_batch(model, images)
    return (pred == target).astype(np.uint8)


# ---------------------------------------------------------------------------
# Checkpoints: text header + raw little-endian float32 parameters in
# state_dict order. Round-trips reproduce the fingerprint exactly.
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"poisonlab-checkpoint v1"


def save_checkpoint(model: TorchImageClassifier, path) -> str:
    fingerprint = model.fingerprint
    h, w, c = model.input_resolution
    header = [
        _CHECKPOINT_MAGIC.decode(),
        f"spec {model.spec.describe()}",
        f"resolution {h} {w} {c}",
        f"trained {int(model.trained)}",
        f"fingerprint {fingerprint}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode())
        for _, tensor in sorted(model.module.state_dict().items()):
            fh.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return fingerprint


def load_checkpoint(path) -> TorchImageClassifier:
    from .data import _read_header

    with open(path, "rb") as fh:
        fields = _read_header(fh, _CHECKPOINT_MAGIC)
        try:
            spec = CompactCnnSpec.parse(fields["spec"])
            h, w, c = (int(v) for v in fields["resolution"].split())
            trained = bool(int(fields["trained"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed checkpoint header in {path}: {exc}") from exc
        blob = fh.read()

    model = TorchImageClassifier(spec, (h, w, c), trained=trained)
    state = model.module.state_dict()
    offset = 0
    new_state = {}
    for name, tensor in sorted(state.items()):
        n = tensor.numel()
        chunk = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        if chunk.size != n:
            raise FormatError(f"truncated checkpoint {path}")
        offset += n * 4
        new_state[name] = torch.from_numpy(chunk.copy()).reshape(tensor.shape)
    if offset != len(blob):
        raise FormatError(f"checkpoint {path} carries {len(blob) - offset} unexpected trailing bytes")
    model.module.load_state_dict(new_state)
    if model.fingerprint != fields.get("fingerprint"):
        raise FormatError(f"checkpoint {path} failed its fingerprint check")
    return model
