"""Image classification datasets: IDX file pairs, CSV files and built-in synthetic blobs."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from project.config import DatasetConfig
from project.errors import EmptySplitError, SchemaError, ShapeError
from project.numerics.module import make_rng

logger = logging.getLogger(__name__)

_IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise SchemaError(f"{len(self.images)} images but {len(self.labels)} labels")

        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SchemaError(f"labels must lie in [0, {self.num_classes})")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if self.splits:
            indices = self.splits.get(name, np.array([], dtype=np.int64))
        else:
            indices = np.arange(len(self.labels))

        if len(indices) == 0:
            raise EmptySplitError(f"split {name} is empty")

        return self.images[indices], self.labels[indices]

    def with_splits(self, config: DatasetConfig) -> "Dataset":
        """Split the samples; a test split shipped with the data (IDX train/test files) is kept as is."""
        splits = split_indices(len(self.labels), config, test=self.splits.get("test"))
        return Dataset(self.images, self.labels, self.num_classes, splits)


def split_indices(n: int, config: DatasetConfig, test: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Seeded disjoint split. The test set is held out first unless given, the validation set is then carved from
    the remaining training samples. Both fractions are shares of all n samples."""
    rng = make_rng(config.seed)

    if test is None:
        order = rng.permutation(n)
        num_test = int(round(config.test_fraction * n))
        test, remaining = order[:num_test], order[num_test:]
    else:
        test = np.asarray(test, dtype=np.int64)
        remaining = rng.permutation(np.setdiff1d(np.arange(n), test))

    validation = int(round(config.validation_fraction * n))

    if validation >= len(remaining):
        raise EmptySplitError(f"{len(remaining)} training samples cannot hold a validation split of {validation}")

    return {
        "train": np.sort(remaining[validation:]),
        "validation": np.sort(remaining[:validation]),
        "test": np.sort(test),
    }


def read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, a type code, the number of dimensions, big-endian uint32 sizes, data."""
    raw = path.read_bytes()

    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise SchemaError(f"{path} is not an IDX file")

    if raw[2] not in _IDX_DTYPES:
        raise SchemaError(f"{path} has unknown IDX type code {raw[2]:#x}")

    dtype, ndim = _IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    shape = tuple(int(d) for d in np.frombuffer(raw[4:header], dtype=">u4"))
    expected = int(np.prod(shape)) * dtype.itemsize

    if len(raw) - header != expected:
        raise SchemaError(f"{path} holds {len(raw) - header} data bytes, its header announces {expected}")

    return np.frombuffer(raw[header:], dtype=dtype).reshape(shape)


def write_idx(path: Path, array: np.ndarray):
    codes = {dtype.newbyteorder(">") if dtype.itemsize > 1 else dtype: code for code, dtype in _IDX_DTYPES.items()}
    dtype = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype

    if dtype not in codes:
        raise SchemaError(f"dtype {array.dtype} cannot be stored in an IDX file")

    header = bytes([0, 0, codes[dtype], array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    path.write_bytes(header + np.ascontiguousarray(array, dtype=dtype).tobytes())


def _as_images(pixels: np.ndarray, input_shape: tuple[int, int, int] | None) -> np.ndarray:
    images = pixels.astype(np.float64)

    if pixels.dtype == np.uint8 or images.max(initial=0) > 1:
        images = images / 255.0

    n = len(images)

    if input_shape is not None:
        if images[0].size != int(np.prod(input_shape)):
            raise ShapeError(f"samples of {images[0].size} values do not fit the model input {tuple(input_shape)}")

        return images.reshape(n, *input_shape)

    if images.ndim == 3:
        return images.reshape(n, 1, *images.shape[1:])

    if images.ndim == 4:
        return images

    side = int(round(np.sqrt(images[0].size)))
    return images.reshape(n, 1, side, side)


def _idx_role(path: Path) -> str | None:
    name = path.name.lower()

    if "train" in name:
        return "train"

    if "t10k" in name or "test" in name:
        return "test"

    return None


def _idx_pairs(directory: Path) -> dict[str | None, tuple[Path, Path]]:
    images = [p for p in sorted(directory.iterdir()) if "images" in p.name]
    labels = [p for p in sorted(directory.iterdir()) if "labels" in p.name]

    if len(images) == 1 and len(labels) == 1:
        return {None: (images[0], labels[0])}

    image_roles = {_idx_role(p): p for p in images}
    label_roles = {_idx_role(p): p for p in labels}

    if len(images) == len(labels) == 2 and set(image_roles) == set(label_roles) == {"train", "test"}:
        return {role: (image_roles[role], label_roles[role]) for role in ("train", "test")}

    raise SchemaError(f"{directory} must contain one images and one labels IDX file, or a train and a test pair")


def load_idx(directory: Path, input_shape: tuple[int, int, int] | None = None) -> Dataset:
    """Load the IDX files of a directory (names containing 'images' and 'labels').

    A train and a test pair, as MNIST ships them, are concatenated and the test pair becomes the fixed test split.
    """
    pairs = _idx_pairs(directory)
    images, labels = [], []

    for image_path, label_path in pairs.values():
        images.append(_as_images(read_idx(image_path), input_shape))
        labels.append(read_idx(label_path).astype(np.int64).reshape(-1))

    y = np.concatenate(labels)
    splits = {"test": np.arange(len(labels[0]), len(y))} if "test" in pairs else {}

    return Dataset(np.concatenate(images), y, int(y.max()) + 1, splits)


def load_csv(path: Path, input_shape: tuple[int, int, int] | None = None) -> Dataset:
    """Rows of `label,pixel0,pixel1,...`; a non-numeric first row is treated as a header."""
    first = path.read_text().split("\n", 1)[0].split(",")[0].strip()
    skip = 0 if first.lstrip("-").isdigit() else 1

    table = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    y = table[:, 0].astype(np.int64)
    return Dataset(_as_images(table[:, 1:], input_shape), y, int(y.max()) + 1)


def make_blobs(
    per_class: int,
    num_classes: int,
    input_shape: tuple[int, int, int],
    noise: float = 0.15,
    seed: int = 0,
) -> Dataset:
    """One random prototype image per class plus Gaussian noise; linearly separable for small noise."""
    rng = make_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes, *input_shape))

    labels = np.repeat(np.arange(num_classes), per_class)
    images = prototypes[labels] + noise * rng.standard_normal((len(labels), *input_shape))
    order = rng.permutation(len(labels))

    return Dataset(images[order], labels[order], num_classes)


BUILTIN = {
    "blobs": {"per_class": 100, "num_classes": 2},
    "blobs10": {"per_class": 60, "num_classes": 10},
}


def load_dataset(source: str, input_shape: tuple[int, int, int], config: DatasetConfig) -> Dataset:
    """Resolve a dataset source (built-in name, IDX directory or CSV file) and split it."""
    if source in BUILTIN:
        dataset = make_blobs(input_shape=tuple(input_shape), seed=config.seed, **BUILTIN[source])
    else:
        path = Path(source)

        if not path.exists():
            raise FileNotFoundError(f"dataset {source} does not exist")

        dataset = load_idx(path, input_shape) if path.is_dir() else load_csv(path, input_shape)

    logger.info(f"Loaded dataset {source} with {len(dataset.labels)} samples and {dataset.num_classes} classes.")
    return dataset.with_splits(config)
