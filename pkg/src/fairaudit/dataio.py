"""Dataset loading, synthesis, subsampling and splitting.

Features are always stored flat (n x d) in float64; ``feature_shape`` records
how a model should view one row (``(1, 28, 28)`` for MNIST, ``(d,)`` for
tabular data).
"""

from __future__ import annotations

import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CONTAINER_VERSION = 1


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    num_classes: int
    num_groups: int
    name: str = "dataset"
    feature_shape: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.groups = np.ascontiguousarray(self.groups, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConsistencyError("features must be a 2-d matrix")
        n, d = self.features.shape
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ConsistencyError(
                f"features/labels/groups disagree on n: {n}, {self.labels.shape}, {self.groups.shape}"
            )
        if not self.feature_shape:
            self.feature_shape = (d,)
        self.feature_shape = tuple(int(s) for s in self.feature_shape)
        if math.prod(self.feature_shape) != d:
            raise ConsistencyError(f"feature_shape {self.feature_shape} does not match d={d}")
        if self.num_classes < 2 or self.num_groups < 2:
            raise ConsistencyError("need at least 2 classes and 2 groups")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError("label outside [0, L)")
        if n and (self.groups.min() < 0 or self.groups.max() >= self.num_groups):
            raise ConsistencyError("group outside [0, K)")
        if not np.all(np.isfinite(self.features)):
            raise ConsistencyError("features contain NaN or Inf")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.groups[idx],
            self.num_classes,
            self.num_groups,
            self.name,
            self.feature_shape,
            dict(self.metadata),
        )


@dataclass
class SplitPlan:
    train_indices: np.ndarray
    test_indices: np.ndarray
    audit_indices: np.ndarray

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)
        self.audit_indices = np.asarray(self.audit_indices, dtype=np.int64)
        if np.intersect1d(self.train_indices, self.test_indices).size:
            raise ConsistencyError("train and test indices overlap")
        if not np.isin(self.audit_indices, self.train_indices).all():
            raise ConsistencyError("audit indices must be a subset of the training indices")
        if np.unique(self.audit_indices).size != self.audit_indices.size:
            raise ConsistencyError("duplicate audit indices")

    @property
    def m(self) -> int:
        return int(self.audit_indices.size)


# ---------------------------------------------------------------- IDX


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> Dataset:
    """Decode an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1]; the class label doubles as the group label.
    """
    img = _read_maybe_gzip(images_path)
    lab = _read_maybe_gzip(labels_path)
    if len(img) < 16:
        raise FormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    if len(img) != 16 + count * rows * cols:
        raise FormatError(
            f"{images_path}: expected {16 + count * rows * cols} bytes, found {len(img)}"
        )
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header")
    lmagic, lcount = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if len(lab) != 8 + lcount:
        raise FormatError(f"{labels_path}: expected {8 + lcount} bytes, found {len(lab)}")
    if lcount != count:
        raise ConsistencyError(f"{count} images but {lcount} labels")

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if count and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} exceeds declared class count {num_classes}")
    return Dataset(
        pixels.astype(np.float64) / 255.0,
        labels,
        labels.copy(),
        num_classes,
        num_classes,
        name,
        (1, rows, cols),
        {"source": "idx"},
    )


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images (n, rows, cols) and labels as an uncompressed IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def bundled_mnist_to_idx(out_dir) -> tuple[Path, Path]:
    """Export the 5,000-image MNIST subset shipped with ``mlxtend`` as IDX files.

    This is the only MNIST source available offline; it holds 500 images per
    digit.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError("bundled MNIST needs the optional 'mlxtend' package") from exc
    X, y = mnist_data()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / "mnist5k-images-idx3-ubyte"
    labels_path = out_dir / "mnist5k-labels-idx1-ubyte"
    write_idx(images_path, labels_path, X.reshape(-1, 28, 28).astype(np.uint8), y)
    return images_path, labels_path


# ---------------------------------------------------------------- CSV


def _parse_float(cell: str):
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(path, label_column: str, group_column: str, categorical=(), name: str | None = None) -> Dataset:
    """Load a headered CSV into a standardized feature matrix.

    A feature column is numeric when its first cell parses as a float (and
    then every cell must), otherwise categorical and one-hot encoded in
    first-appearance order. Integer-valued labels are kept as is; any other
    label values are mapped densely in first-appearance order, as groups
    always are.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    for col in (label_column, group_column):
        if col not in header:
            raise ConfigError(f"{path}: missing column {col!r}")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: row {i} has {len(row)} cells, expected {width}")
    if not rows:
        raise FormatError(f"{path}: no data rows")

    li, gi = header.index(label_column), header.index(group_column)
    raw_labels = [row[li].strip() for row in rows]
    if all(_parse_float(v) is not None and float(v).is_integer() and float(v) >= 0 for v in raw_labels):
        labels = np.array([int(float(v)) for v in raw_labels], dtype=np.int64)
        label_map = None
    else:
        label_map = {}
        labels = np.array([label_map.setdefault(v, len(label_map)) for v in raw_labels], dtype=np.int64)
    group_map = {}
    groups = np.array([group_map.setdefault(row[gi].strip(), len(group_map)) for row in rows], dtype=np.int64)

    blocks, columns, encodings = [], [], {}
    for j, col in enumerate(header):
        if j in (li, gi):
            continue
        cells = [row[j].strip() for row in rows]
        if col not in categorical and _parse_float(cells[0]) is not None:
            values = np.empty(len(cells))
            for i, cell in enumerate(cells):
                v = _parse_float(cell)
                if v is None:
                    raise FormatError(f"{path}: row {i}, column {col!r}: cannot parse {cell!r}")
                values[i] = v
            std = max(values.std(), 1e-12)
            blocks.append(((values - values.mean()) / std)[:, None])
            columns.append(col)
        else:
            vocab = {}
            codes = [vocab.setdefault(c, len(vocab)) for c in cells]
            onehot = np.zeros((len(cells), len(vocab)))
            onehot[np.arange(len(cells)), codes] = 1.0
            blocks.append(onehot)
            columns.extend(f"{col}={v}" for v in vocab)
            encodings[col] = list(vocab)
    features = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    metadata = {
        "source": "csv",
        "columns": columns,
        "categorical": encodings,
        "group_values": list(group_map),
        "label_values": list(label_map) if label_map is not None else None,
    }
    return Dataset(
        features,
        labels,
        groups,
        max(2, int(labels.max()) + 1),
        max(2, len(group_map)),
        name or Path(path).stem,
        (features.shape[1],),
        metadata,
    )


# ---------------------------------------------------------------- synthetic


def synth_blobs(
    n_per_group: int,
    K: int,
    d: int,
    separation: float,
    label_noise: float = 0.0,
    seed: int = 0,
    scale_step: float = 0.0,
) -> Dataset:
    """Gaussian blobs, one per group, placed along the all-ones direction.

    Group ``k`` is centred at ``separation * k * u`` with isotropic spread
    ``1 + scale_step * k``, so feature (and gradient) norms grow with the
    group index and later groups overlap their neighbours more. The class label is the group
    index, replaced by a uniformly drawn different class with probability
    ``label_noise``.
    """
    if K < 2 or d < 1:
        raise ConfigError("synth_blobs needs K >= 2 and d >= 1")
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigError("label_noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    direction = np.ones(d) / math.sqrt(d)
    groups = np.repeat(np.arange(K), n_per_group)
    noise = rng.standard_normal((K * n_per_group, d))
    scale = 1.0 + scale_step * groups
    features = noise * scale[:, None] + separation * groups[:, None] * direction
    # Draw both uniforms unconditionally so features and flip decisions do not
    # depend on label_noise.
    flip = rng.random(groups.size) < label_noise
    shift = rng.integers(1, K, size=groups.size)
    labels = np.where(flip, (groups + shift) % K, groups)
    return Dataset(
        features,
        labels,
        groups,
        K,
        K,
        "blobs",
        (d,),
        {
            "source": "blobs",
            "n_per_group": n_per_group,
            "separation": separation,
            "label_noise": label_noise,
            "scale_step": scale_step,
            "seed": seed,
        },
    )


def subsample_per_class(ds: Dataset, per_class: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == cls)
        if members.size < per_class:
            raise DataError(f"class {cls} has {members.size} records, fewer than per_class={per_class}")
        picked.append(rng.permutation(members)[:per_class])
    order = rng.permutation(np.concatenate(picked))
    out = ds.subset(order)
    out.metadata["per_class"] = per_class
    out.metadata["subsample_seed"] = seed
    return out


def make_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0, audit_size: int | None = None) -> SplitPlan:
    """Random train/test split; the audit set is all of train unless ``audit_size`` is given."""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_test = int(round(test_fraction * ds.n))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    if audit_size is None or audit_size >= train.size:
        audit = train.copy()
    else:
        audit = np.sort(rng.choice(train, size=audit_size, replace=False))
    return SplitPlan(train, test, audit)


# ---------------------------------------------------------------- container


def save_dataset(ds: Dataset, prefix, extra_meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (features f8, labels i8, groups i8; little-endian) and ``<prefix>.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        fh.write(ds.features.astype("<f8", copy=False).tobytes(order="C"))
        fh.write(ds.labels.astype("<i8", copy=False).tobytes())
        fh.write(ds.groups.astype("<i8", copy=False).tobytes())
    meta = {
        "version": CONTAINER_VERSION,
        "name": ds.name,
        "n": ds.n,
        "d": ds.d,
        "L": ds.num_classes,
        "K": ds.num_groups,
        "feature_shape": list(ds.feature_shape),
        "layout": ["features:<f8[n,d]", "labels:<i8[n]", "groups:<i8[n]"],
        "metadata": ds.metadata,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path, meta_path


def load_dataset(prefix) -> Dataset:
    prefix = Path(prefix)
    bin_path, meta_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    if not bin_path.exists() or not meta_path.exists():
        raise DataError(f"dataset container {prefix} not found")
    meta = json.loads(meta_path.read_text())
    n, d = meta["n"], meta["d"]
    raw = bin_path.read_bytes()
    if len(raw) != 8 * (n * d + 2 * n):
        raise FormatError(f"{bin_path}: size {len(raw)} does not match n={n}, d={d}")
    features = np.frombuffer(raw, dtype="<f8", count=n * d).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=8 * n * d)
    groups = np.frombuffer(raw, dtype="<i8", count=n, offset=8 * (n * d + n))
    return Dataset(
        features.astype(np.float64),
        labels.astype(np.int64),
        groups.astype(np.int64),
        meta["L"],
        meta["K"],
        meta["name"],
        tuple(meta["feature_shape"]),
        meta.get("metadata", {}),
    )
