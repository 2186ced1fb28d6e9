"""Datasets: IDX loading, class imbalance, and label corruption.

Every dataset keeps a provenance array of original labels so that later
stages can tell clean examples from corrupted ones without re-deriving it.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IdxParseError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    """Images (count, features) in [0, 1], labels, and pre-corruption labels."""

    images: np.ndarray
    labels: np.ndarray
    original_labels: np.ndarray = field(default=None)  # type: ignore[assignment]
    label_map: dict | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.original_labels is None:
            self.original_labels = self.labels.copy()
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ConfigError(f"images must be 2-d, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError("labels must have one entry per image")
        if self.original_labels.shape != self.labels.shape:
            raise ConfigError("original_labels must align with labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def flipped_mask(self) -> np.ndarray:
        """True where the current label differs from the pre-corruption one."""
        return self.labels != self.original_labels

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.original_labels[idx],
            self.label_map,
        )

    def class_counts(self, num_classes: int | None = None) -> np.ndarray:
        k = num_classes if num_classes is not None else int(self.labels.max()) + 1 if len(self) else 0
        return np.bincount(self.labels, minlength=k)


@dataclass
class ImbalanceSpec:
    """Binary subsample: ratio majority examples per minority example."""

    ratio: float
    total: int = 5000
    minority_class: int = 4
    majority_class: int = 9

    def __post_init__(self):
        if self.minority_class == self.majority_class:
            raise ConfigError("minority and majority class must differ")
        if self.ratio < 1:
            raise ConfigError("imbalance ratio must be >= 1")
        if self.total < self.ratio + 1:
            raise ConfigError(
                f"total {self.total} too small for ratio {self.ratio}: "
                "needs at least ratio + 1 examples"
            )


@dataclass
class NoiseSpec:
    """Label corruption description."""

    kind: str  # "uniform_flip" or "background_flip"
    ratio: float
    num_classes: int = 10
    background_class: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform_flip", "background_flip"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("noise ratio must lie in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("label noise needs at least two classes")
        if not 0 <= self.background_class < self.num_classes:
            raise ConfigError(
                f"background class {self.background_class} outside [0, {self.num_classes})"
            )


def _open_maybe_gzip(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise IdxParseError(f"{what}: expected {count} bytes, file ends after {len(data)}")
    return data


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset.

    Big-endian headers; pixel bytes are scaled to [0, 1]. Files ending in .gz
    are decompressed transparently. Any header or size violation raises
    IdxParseError naming the offending file and field.
    """
    with _open_maybe_gzip(images_path) as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, "images magic"))
        if magic != IMAGE_MAGIC:
            raise IdxParseError(
                f"images magic: expected {IMAGE_MAGIC:#010x}, got {magic:#010x} in {images_path}"
            )
        count, rows, cols = struct.unpack(">iii", _read_exact(f, 12, "images header"))
        if count < 0 or rows <= 0 or cols <= 0:
            raise IdxParseError(f"images header: bad dimensions {count}x{rows}x{cols}")
        payload = f.read()
        expected = count * rows * cols
        if len(payload) != expected:
            raise IdxParseError(
                f"images payload: header promises {expected} bytes, file has {len(payload)}"
            )
        pixels = np.frombuffer(payload, dtype=np.uint8)
        images = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0

    with _open_maybe_gzip(labels_path) as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, "labels magic"))
        if magic != LABEL_MAGIC:
            raise IdxParseError(
                f"labels magic: expected {LABEL_MAGIC:#010x}, got {magic:#010x} in {labels_path}"
            )
        (lcount,) = struct.unpack(">i", _read_exact(f, 4, "labels header"))
        payload = f.read()
        if len(payload) != lcount:
            raise IdxParseError(
                f"labels payload: header promises {lcount} bytes, file has {len(payload)}"
            )
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != lcount:
        raise IdxParseError(f"count mismatch: {count} images but {lcount} labels")
    return Dataset(images, labels)


def write_idx_labels(labels: np.ndarray, path: str) -> None:
    """Write labels back out in IDX form (gzipped when path ends in .gz)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ConfigError("IDX labels must fit in a byte")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, labels.size))
        f.write(labels.astype(np.uint8).tobytes())


def make_imbalanced_pair(ds: Dataset, spec: ImbalanceSpec, rng: np.random.Generator) -> Dataset:
    """Subsample two classes at the requested ratio and relabel them 0/1.

    The minority count is round(total / (ratio + 1)), clamped to at least 1.
    Labels are remapped minority -> 0, majority -> 1 and the map is recorded
    so the test set can be filtered the same way.
    """
    n_min = max(1, int(round(spec.total / (spec.ratio + 1))))
    n_maj = spec.total - n_min
    min_pool = np.flatnonzero(ds.labels == spec.minority_class)
    maj_pool = np.flatnonzero(ds.labels == spec.majority_class)
    if min_pool.size < n_min:
        raise ConfigError(
            f"need {n_min} examples of class {spec.minority_class}, dataset has {min_pool.size}"
        )
    if maj_pool.size < n_maj:
        raise ConfigError(
            f"need {n_maj} examples of class {spec.majority_class}, dataset has {maj_pool.size}"
        )
    take_min = rng.choice(min_pool, size=n_min, replace=False)
    take_maj = rng.choice(maj_pool, size=n_maj, replace=False)
    idx = np.concatenate([take_min, take_maj])
    rng.shuffle(idx)
    label_map = {spec.minority_class: 0, spec.majority_class: 1}
    new_labels = np.where(ds.labels[idx] == spec.minority_class, 0, 1).astype(np.int64)
    return Dataset(ds.images[idx], new_labels, new_labels.copy(), label_map)


def filter_remap(ds: Dataset, label_map: dict) -> Dataset:
    """Keep only examples whose label is in the map, relabeled through it."""
    if not label_map:
        raise ConfigError("label map is empty")
    keep = np.isin(ds.labels, list(label_map))
    labels = ds.labels[keep]
    new_labels = np.array([label_map[int(y)] for y in labels], dtype=np.int64)
    return Dataset(ds.images[keep], new_labels, new_labels.copy(), dict(label_map))


def random_split(ds: Dataset, count: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Split off `count` random examples: returns (rest, taken)."""
    if not 0 <= count <= len(ds):
        raise ConfigError(f"cannot split {count} examples from {len(ds)}")
    taken = rng.choice(len(ds), size=count, replace=False)
    mask = np.zeros(len(ds), dtype=bool)
    mask[taken] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(taken)


def split_clean_validation(
    ds: Dataset, per_class: int, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Reserve per_class provenance-clean examples of every class as validation.

    Returns (train_rest, validation). per_class = 0 yields an empty validation
    set and leaves the dataset untouched.
    """
    if per_class < 0:
        raise ConfigError("per_class must be nonnegative")
    if per_class == 0:
        empty = ds.subset(np.empty(0, dtype=np.int64))
        return ds, empty
    clean = ds.labels == ds.original_labels
    chosen = []
    for c in np.unique(ds.labels):
        pool = np.flatnonzero((ds.labels == c) & clean)
        if pool.size < per_class:
            raise ConfigError(
                f"class {int(c)} has only {pool.size} clean examples, need {per_class}"
            )
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    val_idx = np.concatenate(chosen)
    mask = np.zeros(len(ds), dtype=bool)
    mask[val_idx] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(val_idx)


def corrupt_uniform_flip(ds: Dataset, spec: NoiseSpec, rng: np.random.Generator) -> Dataset:
    """Flip each label with probability ratio to a uniform choice among the others."""
    if spec.kind != "uniform_flip":
        raise ConfigError(f"expected uniform_flip spec, got {spec.kind!r}")
    if len(ds) and ds.labels.max() >= spec.num_classes:
        raise ConfigError("dataset contains labels outside the declared class count")
    labels = ds.labels.copy()
    flip = rng.random(len(ds)) < spec.ratio
    count = int(flip.sum())
    if count:
        # Uniform over the other num_classes - 1 labels: draw in [0, K-1) and
        # shift draws at or above the old label up by one.
        draw = rng.integers(0, spec.num_classes - 1, size=count)
        old = labels[flip]
        labels[flip] = draw + (draw >= old)
    return Dataset(ds.images.copy(), labels, ds.original_labels.copy(), ds.label_map)


def corrupt_background_flip(ds: Dataset, spec: NoiseSpec, rng: np.random.Generator) -> Dataset:
    """Flip non-background labels to the background class with probability ratio."""
    if spec.kind != "background_flip":
        raise ConfigError(f"expected background_flip spec, got {spec.kind!r}")
    if len(ds) and ds.labels.max() >= spec.num_classes:
        raise ConfigError("dataset contains labels outside the declared class count")
    labels = ds.labels.copy()
    eligible = labels != spec.background_class
    flip = eligible & (rng.random(len(ds)) < spec.ratio)
    labels[flip] = spec.background_class
    return Dataset(ds.images.copy(), labels, ds.original_labels.copy(), ds.label_map)


def corrupt(ds: Dataset, spec: NoiseSpec, rng: np.random.Generator) -> Dataset:
    if spec.kind == "uniform_flip":
        return corrupt_uniform_flip(ds, spec, rng)
    return corrupt_background_flip(ds, spec, rng)


def locate_mnist(root: str | None = None) -> dict | None:
    """Find the four MNIST IDX files; returns a path dict or None.

    Search order: explicit root, the MNIST_DIR environment variable,
    ./data/mnist, ~/mnist. Accepts .gz variants.
    """
    candidates = []
    if root:
        candidates.append(root)
    env = os.environ.get("MNIST_DIR")
    if env:
        candidates.append(env)
    candidates.append(os.path.join(".", "data", "mnist"))
    candidates.append(os.path.expanduser(os.path.join("~", "mnist")))
    for base in candidates:
        found = {}
        for key, name in MNIST_FILES.items():
            for variant in (name, name + ".gz"):
                p = os.path.join(base, variant)
                if os.path.isfile(p):
                    found[key] = p
                    break
        if len(found) == len(MNIST_FILES):
            return found
    return None
