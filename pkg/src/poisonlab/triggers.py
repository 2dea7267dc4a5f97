"""Triggers: representation, application, L-infinity projection, PGD optimization.

Three trigger kinds are supported. An additive trigger is a full-image
perturbation bounded in max-norm by epsilon; a blended trigger is a full
[0, 1] image mixed in with weight lambda; a patch trigger overwrites a
rectangle at a fixed origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import FormatError, ValidationError

DEFAULT_EPSILON = 2.0 / 255.0

TRIGGER_KINDS = ("additive", "blended", "patch")


@dataclass
class Trigger:
    kind: str
    payload: np.ndarray
    epsilon: float | None = None
    lam: float | None = None
    patch_origin: tuple[int, int] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if self.kind not in TRIGGER_KINDS:
            raise ValidationError(f"unknown trigger kind {self.kind!r}")
        if self.payload.ndim != 3:
            raise ValidationError(f"payload must be (H,W,C), got shape {self.payload.shape}")
        if self.kind == "additive":
            if self.epsilon is None or self.epsilon < 0:
                raise ValidationError("additive trigger needs epsilon >= 0")
            # payload is float32; compare against the float32 rounding of epsilon
            bound = float(np.float32(self.epsilon)) + 1e-9
            if self.payload.size and float(np.abs(self.payload).max()) > bound:
                raise ValidationError("additive payload exceeds its epsilon ball")
        elif self.kind == "blended":
            if self.lam is None or not (0.0 <= self.lam <= 1.0):
                raise ValidationError("blended trigger needs lambda in [0, 1]")
            if self.payload.size and (self.payload.min() < 0 or self.payload.max() > 1):
                raise ValidationError("blended payload components must lie in [0, 1]")
        else:
            if self.patch_origin is None:
                raise ValidationError("patch trigger needs patch_origin")
            if self.payload.size and (self.payload.min() < 0 or self.payload.max() > 1):
                raise ValidationError("patch pixels must lie in [0, 1]")

    def perturbation_norms(self, image: np.ndarray) -> tuple[float, float]:
        """(L-inf, L2) of apply(image) - image, for reporting."""
        diff = apply_trigger(image, self) - image
        return float(np.abs(diff).max()), float(np.sqrt((diff.astype(np.float64) ** 2).sum()))


def apply_trigger(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Stamp one image with the trigger; output stays inside [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValidationError(f"expected an (H,W,C) image, got shape {x.shape}")
    if trigger.kind == "additive":
        if trigger.payload.shape != x.shape:
            raise ValidationError(
                f"trigger shape {trigger.payload.shape} does not match image shape {x.shape}"
            )
        return np.clip(x + trigger.payload, 0.0, 1.0)
    if trigger.kind == "blended":
        if trigger.payload.shape != x.shape:
            raise ValidationError(
                f"trigger shape {trigger.payload.shape} does not match image shape {x.shape}"
            )
        lam = np.float32(trigger.lam)
        return lam * trigger.payload + (np.float32(1.0) - lam) * x
    # patch
    r, c = trigger.patch_origin
    ph, pw, pc = trigger.payload.shape
    h, w, ch = x.shape
    if pc != ch or r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValidationError(
            f"patch {trigger.payload.shape} at {trigger.patch_origin} does not fit in image {x.shape}"
        )
    out = x.copy()
    out[r:r + ph, c:c + pw, :] = trigger.payload
    return out


def apply_trigger_batch(images: np.ndarray, trigger: Trigger) -> np.ndarray:
    return np.stack([apply_trigger(img, trigger) for img in images])


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Componentwise clamp onto the epsilon ball; idempotent."""
    if epsilon < 0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    return np.clip(np.asarray(delta, dtype=np.float32), -epsilon, epsilon)


def pgd_step(delta: np.ndarray, input_gradient: np.ndarray, step_size: float, epsilon: float) -> np.ndarray:
    """One signed descent step followed by projection. sign(0) is 0."""
    delta = np.asarray(delta, dtype=np.float32)
    grad = np.asarray(input_gradient, dtype=np.float32)
    if delta.shape != grad.shape:
        raise ValidationError(f"delta shape {delta.shape} != gradient shape {grad.shape}")
    return project_linf(delta - np.float32(step_size) * np.sign(grad), epsilon)


# ---------------------------------------------------------------------------
# Augmentation: reflect-pad random crop + horizontal flip.
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    crop_padding: int = 0
    flip_probability: float = 0.0

    def validate(self) -> None:
        if self.crop_padding < 0:
            raise ValidationError("crop_padding must be >= 0")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ValidationError("flip_probability must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.crop_padding == 0 and self.flip_probability == 0.0


def _draw_augment_params(config: AugmentConfig, rng: np.random.Generator) -> tuple[int, int, bool]:
    # Draw order is part of the determinism contract: top, left, then flip.
    top = left = 0
    if config.crop_padding > 0:
        top = int(rng.integers(0, 2 * config.crop_padding + 1))
        left = int(rng.integers(0, 2 * config.crop_padding + 1))
    flip = False
    if config.flip_probability > 0:
        flip = bool(rng.random() < config.flip_probability)
    return top, left, flip


def augment_sample(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random-crop back to the input size, maybe mirror."""
    config.validate()
    x = np.asarray(x, dtype=np.float32)
    h, w, _ = x.shape
    top, left, flip = _draw_augment_params(config, rng)
    out = x
    if config.crop_padding > 0:
        p = config.crop_padding
        padded = np.pad(x, ((p, p), (p, p), (0, 0)), mode="reflect")
        out = padded[top:top + h, left:left + w, :]
    if flip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment_batch_torch(batch: torch.Tensor, config: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Same semantics as augment_sample, on an NCHW tensor, differentiable.

    Draws per-sample parameters from `rng` in batch order using the same
    draw sequence as augment_sample.
    """
    if config.is_identity:
        return batch
    n, _, h, w = batch.shape
    p = config.crop_padding
    padded = F.pad(batch, (p, p, p, p), mode="reflect") if p > 0 else batch
    rows = []
    for i in range(n):
        top, left, flip = _draw_augment_params(config, rng)
        view = padded[i:i + 1, :, top:top + h, left:left + w]
        if flip:
            view = torch.flip(view, dims=(3,))
        rows.append(view)
    return torch.cat(rows, dim=0)


# ---------------------------------------------------------------------------
# Trigger construction
# ---------------------------------------------------------------------------


@dataclass
class PgdConfig:
    """Settings for the universal additive-trigger search.

    One "step" is a full pass over the in-scope samples; each batch inside a
    pass contributes its mean input gradient and one projected update.
    """

    epsilon: float = DEFAULT_EPSILON
    steps: int = 50
    step_size: float | None = None
    batch_size: int = 64
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    target_label: int = 0
    source_scope: str = "non_target"
    seed: int = 0

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.epsilon / 10.0

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.step_size <= 0 or self.step_size > self.epsilon:
            raise ValidationError("need 0 < step_size <= epsilon")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.source_scope not in ("all", "non_target"):
            raise ValidationError(f"unknown source_scope {self.source_scope!r}")
        self.augment.validate()


def make_blended_trigger(resolution: tuple[int, int, int], lam: float, seed: int = 1234) -> Trigger:
    """Fixed uniform-noise overlay image, the classic blended baseline."""
    h, w, c = resolution
    rng = np.random.default_rng(seed)
    payload = rng.uniform(0.0, 1.0, size=(h, w, c)).astype(np.float32)
    return Trigger(kind="blended", payload=payload, lam=lam, provenance={"seed": seed})


def make_patch_trigger(resolution: tuple[int, int, int], patch_size: int = 4,
                       origin: tuple[int, int] | None = None) -> Trigger:
    """Black/white checkerboard square pasted near the bottom-right corner."""
    h, w, c = resolution
    if origin is None:
        origin = (h - patch_size - 1, w - patch_size - 1)
    board = (np.add.outer(np.arange(patch_size), np.arange(patch_size)) % 2).astype(np.float32)
    payload = np.repeat(board[:, :, None], c, axis=2)
    return Trigger(kind="patch", payload=payload, patch_origin=origin, provenance={})


def optimize_trigger(model, dataset: Dataset, config: PgdConfig, on_step=None) -> Trigger:
    """Search the epsilon-ball for a universal additive trigger.

    Runs `config.steps` full passes over the in-scope samples. For every
    batch the loss toward `target_label` is evaluated on augmented,
    trigger-applied inputs and the mean input gradient drives one signed,
    projected update. Deterministic given `config.seed`.

    `on_step(delta)` is invoked after every update so tests can assert the
    projection invariant inside the loop.
    """
    config.validate()
    if not getattr(model, "trained", False):
        raise ValidationError("optimize_trigger needs a trained surrogate model")
    if model.input_resolution != dataset.resolution:
        raise ValidationError(
            f"model resolution {model.input_resolution} does not match dataset {dataset.resolution}"
        )
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")

    if config.source_scope == "non_target":
        positions = np.flatnonzero(dataset.labels != config.target_label)
    else:
        positions = np.arange(len(dataset))
    if len(positions) == 0:
        raise ValidationError("trigger optimization scope is empty")

    h, w, c = dataset.resolution
    delta = np.zeros((h, w, c), dtype=np.float32)
    rng = np.random.default_rng(config.seed)

    module = model.module
    was_training = module.training
    module.eval()
    images = torch.from_numpy(dataset.images[positions]).permute(0, 3, 1, 2).to(model.dtype)
    target = torch.full((1,), config.target_label, dtype=torch.long)

    try:
        for _ in range(config.steps):
            order = rng.permutation(len(positions))
            for start in range(0, len(order), config.batch_size):
                batch = images[order[start:start + config.batch_size]]
                delta_t = torch.from_numpy(delta).permute(2, 0, 1).unsqueeze(0).to(model.dtype)
                delta_t.requires_grad_(True)
                stamped = batch + delta_t
                stamped = augment_batch_torch(stamped, config.augment, rng)
                logits = module(stamped)
                loss = F.cross_entropy(logits, target.expand(len(batch)))
                (grad,) = torch.autograd.grad(loss, delta_t)
                grad_np = grad.squeeze(0).permute(1, 2, 0).numpy()
                if not np.isfinite(grad_np).all():
                    raise ValidationError("non-finite gradient during trigger optimization")
                delta = pgd_step(delta, grad_np, config.step_size, config.epsilon)
                if on_step is not None:
                    on_step(delta.copy())
    finally:
        if was_training:
            module.train()

    provenance = {
        "seed": config.seed,
        "surrogate_fingerprint": model.fingerprint,
        "steps": config.steps,
        "step_size": config.step_size,
        "source_scope": config.source_scope,
        "target_label": config.target_label,
    }
    return Trigger(kind="additive", payload=delta, epsilon=config.epsilon, provenance=provenance)


# ---------------------------------------------------------------------------
# Trigger file: text header terminated by a blank line, then the raw
# little-endian float32 payload in row-major order. Round-trips bit-exactly.
# ---------------------------------------------------------------------------

_TRIGGER_MAGIC = b"poisonlab-trigger v1"


def save_trigger(trigger: Trigger, path) -> None:
    h, w, c = trigger.payload.shape
    lines = [_TRIGGER_MAGIC.decode(), f"kind {trigger.kind}", f"shape {h} {w} {c}"]
    if trigger.kind == "additive":
        lines.append(f"epsilon {trigger.epsilon!r}")
    elif trigger.kind == "blended":
        lines.append(f"lambda {trigger.lam!r}")
    else:
        lines.append(f"patch_origin {trigger.patch_origin[0]} {trigger.patch_origin[1]}")
    for key in ("seed", "surrogate_fingerprint", "steps"):
        if key in trigger.provenance:
            lines.append(f"{key} {trigger.provenance[key]}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode())
        fh.write(np.ascontiguousarray(trigger.payload, dtype="<f4").tobytes())


def load_trigger(path) -> Trigger:
    from .data import _read_header

    with open(path, "rb") as fh:
        fields = _read_header(fh, _TRIGGER_MAGIC)
        try:
            kind = fields["kind"]
            h, w, c = (int(v) for v in fields["shape"].split())
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed trigger header in {path}: {exc}") from exc
        payload = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4")
    if payload.size != h * w * c:
        raise FormatError(f"truncated trigger file {path}")
    provenance = {k: fields[k] for k in ("seed", "surrogate_fingerprint", "steps") if k in fields}
    if "seed" in provenance:
        provenance["seed"] = int(provenance["seed"])
    if "steps" in provenance:
        provenance["steps"] = int(provenance["steps"])
    payload = payload.reshape(h, w, c).copy()
    if kind == "additive":
        return Trigger(kind, payload, epsilon=float(fields["epsilon"]), provenance=provenance)
    if kind == "blended":
        return Trigger(kind, payload, lam=float(fields["lambda"]), provenance=provenance)
    r, cpos = (int(v) for v in fields["patch_origin"].split())
    return Trigger(kind, payload, patch_origin=(r, cpos), provenance=provenance)
