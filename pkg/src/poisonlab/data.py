"""Dataset representation, folder ingestion, synthetic data, splitting, cache files.

Images are float32 arrays of shape (H, W, C) with every component in [0, 1].
Label 0 means "Real", label 1 means "Fake". Sample ids are stable integers
that survive splitting and poisoning, so that selection ledgers and audit
trails can join on them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FolderStructureError, FormatError, ImageDecodeError, ValidationError

REAL_LABEL = 0
FAKE_LABEL = 1
DEFAULT_CLASS_NAMES = ("real", "fake")

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def round_half_up(x: float) -> int:
    """round() uses banker's rounding; splits and pool sizes need plain half-up."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class LabeledSample:
    id: int
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """Ordered collection of labeled images with stable ids.

    Stored densely: ``images`` is (N, H, W, C) float32 in [0, 1], ``labels``
    and ``ids`` are int64 vectors aligned with it.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_names: tuple[str, str] = DEFAULT_CLASS_NAMES
    _id_to_pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N,H,W,C), got shape {self.images.shape}")
        n, h, w, c = self.images.shape
        if c not in (1, 3):
            raise ValidationError(f"channel count must be 1 or 3, got {c}")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValidationError("labels/ids length must match image count")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        if not np.isin(self.labels, (REAL_LABEL, FAKE_LABEL)).all():
            raise ValidationError("labels must be 0 (Real) or 1 (Fake)")
        if len(np.unique(self.ids)) != n:
            raise ValidationError("sample ids must be unique")
        self.class_names = (str(self.class_names[0]), str(self.class_names[1]))
        self._id_to_pos = {int(i): p for p, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def resolution(self) -> tuple[int, int, int]:
        _, h, w, c = self.images.shape
        return (h, w, c)

    def __getitem__(self, pos: int) -> LabeledSample:
        return LabeledSample(int(self.ids[pos]), self.images[pos], int(self.labels[pos]))

    def position_of(self, sample_id: int) -> int:
        try:
            return self._id_to_pos[int(sample_id)]
        except KeyError:
            raise ValidationError(f"unknown sample id {sample_id}") from None

    def by_id(self, sample_id: int) -> LabeledSample:
        return self[self.position_of(sample_id)]

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            images=self.images[positions].copy(),
            labels=self.labels[positions].copy(),
            ids=self.ids[positions].copy(),
            class_names=self.class_names,
        )

    def content_hash(self) -> str:
        """sha256 over resolution, ids, labels, and raw pixel bytes."""
        h = hashlib.sha256()
        n, hh, ww, cc = self.images.shape
        h.update(struct.pack("<4q", n, hh, ww, cc))
        h.update(("|".join(self.class_names)).encode())
        h.update(self.ids.astype("<i8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        return h.hexdigest()


@dataclass
class SyntheticConfig:
    """Parameters for the synthetic real-vs-fake generator.

    Real samples are smooth low-frequency images plus pixel noise. Fake
    samples add a periodic checkerboard artifact of the given amplitude on
    top of the same kind of smooth base. Noise applies to both classes so
    that amplitude 0 makes the classes distributionally identical.
    """

    count_per_class: int = 1000
    resolution: tuple[int, int, int] = (32, 32, 3)
    artifact_amplitude: float = 0.15
    artifact_period: int = 4
    noise_std: float = 0.02
    seed: int = 7

    def validate(self) -> None:
        if self.count_per_class <= 0:
            raise ValidationError(f"count_per_class must be positive, got {self.count_per_class}")
        if self.artifact_period < 2:
            raise ValidationError(f"artifact_period must be >= 2, got {self.artifact_period}")
        h, w, c = self.resolution
        if h < 2 or w < 2 or c not in (1, 3):
            raise ValidationError(f"bad resolution {self.resolution}")
        if self.artifact_amplitude < 0:
            raise ValidationError("artifact_amplitude must be >= 0")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")


def _bilinear_upsample(coarse: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Upsample (N, gh, gw, C) -> (N, out_h, out_w, C) with bilinear weights."""
    n, gh, gw, c = coarse.shape
    ys = np.linspace(0.0, gh - 1.0, out_h)
    xs = np.linspace(0.0, gw - 1.0, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None, None]
    wx = (xs - x0).astype(np.float32)[None, None, :, None]
    top = coarse[:, y0][:, :, x0] * (1 - wx) + coarse[:, y0][:, :, x1] * wx
    bot = coarse[:, y1][:, :, x0] * (1 - wx) + coarse[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def checkerboard(height: int, width: int, period: int) -> np.ndarray:
    """+-1 checkerboard with square tiles of period//2 pixels (full period `period`)."""
    tile = max(1, period // 2)
    rows = np.arange(height) // tile
    cols = np.arange(width) // tile
    board = (rows[:, None] + cols[None, :]) % 2
    return np.where(board == 0, 1.0, -1.0).astype(np.float32)


def _smooth_bases(rng: np.random.Generator, n: int, h: int, w: int, c: int) -> np.ndarray:
    grid_h = max(2, h // 8)
    grid_w = max(2, w // 8)
    coarse = rng.uniform(0.25, 0.75, size=(n, grid_h, grid_w, c)).astype(np.float32)
    return _bilinear_upsample(coarse, h, w)


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Build a balanced two-class dataset, deterministic given the seed.

    Sample order is all Real samples first, then all Fake; ids run 0..2n-1.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.count_per_class
    h, w, c = config.resolution

    real = _smooth_bases(rng, n, h, w, c)
    real += rng.normal(0.0, config.noise_std, size=real.shape).astype(np.float32)

    fake = _smooth_bases(rng, n, h, w, c)
    board = checkerboard(h, w, config.artifact_period)[None, :, :, None]
    fake += config.artifact_amplitude * board
    fake += rng.normal(0.0, config.noise_std, size=fake.shape).astype(np.float32)

    images = np.clip(np.concatenate([real, fake], axis=0), 0.0, 1.0)
    labels = np.concatenate([
        np.full(n, REAL_LABEL, dtype=np.int64),
        np.full(n, FAKE_LABEL, dtype=np.int64),
    ])
    return Dataset(images=images, labels=labels, ids=np.arange(2 * n, dtype=np.int64))


def load_image_folder(root_path, resolution: tuple[int, int, int]) -> Dataset:
    """Load `<root>/real/*` and `<root>/fake/*` into a Dataset.

    Images are decoded, resized (bilinear) to `resolution`, scaled to [0, 1].
    Ids follow lexicographic file order, real class first.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FolderStructureError(f"{root} is not a directory")
    subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if subdirs != ["fake", "real"]:
        raise FolderStructureError(
            f"{root} must contain exactly the subdirectories 'real' and 'fake', found {subdirs}"
        )
    h, w, c = resolution
    if c not in (1, 3):
        raise ValidationError(f"channel count must be 1 or 3, got {c}")

    images, labels = [], []
    for class_name, label in (("real", REAL_LABEL), ("fake", FAKE_LABEL)):
        files = sorted(
            p for p in (root / class_name).iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not files:
            raise ValidationError(f"class directory {root / class_name} holds no images")
        for path in files:
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB" if c == 3 else "L")
                    img = img.resize((w, h), Image.BILINEAR)
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise ImageDecodeError(path, exc) from exc
            if c == 1:
                arr = arr[:, :, None]
            images.append(arr)
            labels.append(label)

    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        ids=np.arange(len(images), dtype=np.int64),
    )


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified disjoint train/test partition, deterministic given the seed.

    Per-class test counts are round(test_fraction * class size), half-up.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")

    rng = np.random.default_rng(seed)
    test_positions = []
    for label in (REAL_LABEL, FAKE_LABEL):
        positions = np.flatnonzero(dataset.labels == label)
        if len(positions) == 0:
            continue
        n_test = round_half_up(test_fraction * len(positions))
        chosen = rng.permutation(positions)[:n_test]
        test_positions.append(chosen)
    test_positions = np.sort(np.concatenate(test_positions)) if test_positions else np.array([], dtype=np.int64)
    mask = np.zeros(len(dataset), dtype=bool)
    mask[test_positions] = True
    train_positions = np.flatnonzero(~mask)

    if len(train_positions) == 0 or len(test_positions) == 0:
        raise ValidationError("split produced an empty train or test set; adjust test_fraction")
    return dataset.subset(train_positions), dataset.subset(test_positions)


# ---------------------------------------------------------------------------
# Dataset cache file: text header, then raw little-endian float32 pixels and
# little-endian int32 labels, both in sample order. The `ids` header line
# preserves non-contiguous ids coming out of splits and mixes.
# ---------------------------------------------------------------------------

_DATASET_MAGIC = b"poisonlab-dataset v1"


def save_dataset_cache(dataset: Dataset, path) -> str:
    """Write the cache file; returns the dataset content hash recorded in it."""
    source_hash = dataset.content_hash()
    h, w, c = dataset.resolution
    header = [
        _DATASET_MAGIC.decode(),
        f"resolution {h} {w} {c}",
        f"count {len(dataset)}",
        f"class_names {dataset.class_names[0]} {dataset.class_names[1]}",
        f"source_hash {source_hash}",
        "ids " + " ".join(str(int(i)) for i in dataset.ids),
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode())
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype("<i4").tobytes())
    return source_hash


def _read_header(fh, magic: bytes) -> dict:
    first = fh.readline().rstrip(b"\n")
    if first != magic:
        raise FormatError(f"bad magic line {first!r}, expected {magic!r}")
    fields = {}
    while True:
        line = fh.readline()
        if line in (b"", b"\n"):
            break
        key, _, value = line.rstrip(b"\n").decode().partition(" ")
        fields[key] = value
    return fields


def load_dataset_cache(path) -> Dataset:
    with open(path, "rb") as fh:
        fields = _read_header(fh, _DATASET_MAGIC)
        try:
            h, w, c = (int(v) for v in fields["resolution"].split())
            count = int(fields["count"])
            class_names = tuple(fields["class_names"].split())
            ids = np.asarray([int(v) for v in fields["ids"].split()], dtype=np.int64)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed dataset header in {path}: {exc}") from exc
        pixels = np.frombuffer(fh.read(count * h * w * c * 4), dtype="<f4")
        labels = np.frombuffer(fh.read(count * 4), dtype="<i4")
    if pixels.size != count * h * w * c or labels.size != count:
        raise FormatError(f"truncated dataset cache {path}")
    try:
        dataset = Dataset(
            images=pixels.reshape(count, h, w, c).copy(),
            labels=labels.astype(np.int64),
            ids=ids,
            class_names=class_names,  # type: ignore[arg-type]
        )
    except ValidationError as exc:
        raise FormatError(f"dataset cache {path} holds invalid content: {exc}") from exc
    if dataset.content_hash() != fields.get("source_hash"):
        raise FormatError(f"dataset cache {path} failed its integrity check")
    return dataset
