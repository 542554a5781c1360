"""Datasets, class partitions, semi-supervised splits, and file I/O.

A :class:`Dataset` is a fully labeled feature-vector corpus. For training,
its classes are partitioned into base/val/novel sets and the base portion is
split into labeled / unlabeled / test pools. True labels of the unlabeled
pool travel inside :class:`SemiSplit` but are sealed: the only way to read
them is the explicitly named ``oracle_hidden_label`` accessor, which can be
disabled at split time and whose call sites are audited by the test suite.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

FEATURE_MAGIC = b"FSLF"
FEATURE_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset file failed to parse."""


class OracleDisabledError(RuntimeError):
    """Hidden labels were requested on a split whose oracle is disabled."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with labels, class names, and unique sample ids.

    Features are stored float32, matching the on-disk precision, so a
    save/load roundtrip is value-exact. Class indices refer to
    ``class_names``.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        n = feats.shape[0]
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.shape != (n,) or len(self.sample_ids) != n:
            raise ValueError("labels and sample_ids must match the number of feature rows")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        c = len(self.class_names)
        if n == 0 or c == 0:
            raise ValueError("dataset must contain at least one sample and one class")
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError("label index out of range")
        if np.any(np.bincount(labels, minlength=c) == 0):
            raise ValueError("every class must have at least one sample")
        if len(set(self.sample_ids)) != n:
            raise ValueError("sample ids must be unique")
        object.__setattr__(self, "_row_of", {sid: i for i, sid in enumerate(self.sample_ids)})

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def row_of(self, sample_id: str) -> int:
        return self._row_of[sample_id]

    def features_for(self, sample_ids) -> np.ndarray:
        """Float64 feature rows for the given ids (compute precision)."""
        rows = [self._row_of[sid] for sid in sample_ids]
        return self.features[rows].astype(np.float64)

    def label_of(self, sample_id: str) -> int:
        return int(self.labels[self._row_of[sample_id]])


@dataclass(frozen=True)
class ClassPartition:
    base_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]

    def __post_init__(self):
        groups = (set(self.base_classes), set(self.val_classes), set(self.novel_classes))
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValueError("partition groups must be pairwise disjoint")


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int
    samples_per_class: int
    ambient_dim: int
    cluster_std: float
    mean_separation: float
    seed: int

    def __post_init__(self):
        if min(self.num_classes, self.samples_per_class, self.ambient_dim) <= 0:
            raise ValueError("num_classes, samples_per_class and ambient_dim must be positive")
        if self.cluster_std < 0 or self.mean_separation < 0:
            raise ValueError("cluster_std and mean_separation must be non-negative")


class SemiSplit:
    """Labeled / unlabeled / test pools over the base classes.

    ``unlabeled`` holds sample ids only. The true labels of those ids are
    kept in a sealed map; ``oracle_hidden_label`` is the single accessor and
    raises :class:`OracleDisabledError` when the split was built with the
    oracle disabled.
    """

    __slots__ = ("labeled", "unlabeled", "test", "oracle_enabled", "_hidden")

    def __init__(
        self,
        labeled: tuple[tuple[str, int], ...],
        unlabeled: tuple[str, ...],
        test: tuple[tuple[str, int], ...],
        hidden_labels: dict[str, int],
        oracle_enabled: bool,
    ):
        ids_l = {sid for sid, _ in labeled}
        ids_t = {sid for sid, _ in test}
        ids_u = set(unlabeled)
        if (ids_l & ids_u) or (ids_l & ids_t) or (ids_u & ids_t):
            raise ValueError("labeled/unlabeled/test pools must be disjoint")
        if set(hidden_labels) != ids_u:
            raise ValueError("hidden labels must cover exactly the unlabeled pool")
        self.labeled = tuple(labeled)
        self.unlabeled = tuple(unlabeled)
        self.test = tuple(test)
        self.oracle_enabled = bool(oracle_enabled)
        self._hidden = dict(hidden_labels)

    @property
    def base_classes(self) -> tuple[int, ...]:
        return tuple(sorted({label for _, label in self.labeled}))

    def oracle_hidden_label(self, sample_id: str) -> int:
        """Audited oracle accessor for the true label of an unlabeled sample."""
        if not self.oracle_enabled:
            raise OracleDisabledError("hidden-label oracle is disabled on this split")
        return self._hidden[sample_id]


def partition_classes(
    dataset: Dataset, counts: tuple[int, int, int], seed: int
) -> ClassPartition:
    """Randomly partition class indices into base/val/novel groups."""
    n_base, n_val, n_novel = counts
    if min(n_base, n_val, n_novel) < 0:
        raise ValueError("partition counts must be non-negative")
    if n_base + n_val + n_novel > dataset.num_classes:
        raise ValueError(
            f"partition counts {counts} exceed the {dataset.num_classes} available classes"
        )
    perm = stream(seed, "partition").permutation(dataset.num_classes)
    base = tuple(sorted(int(c) for c in perm[:n_base]))
    val = tuple(sorted(int(c) for c in perm[n_base : n_base + n_val]))
    novel = tuple(sorted(int(c) for c in perm[n_base + n_val : n_base + n_val + n_novel]))
    return ClassPartition(base, val, novel)


def split_semi(
    dataset: Dataset,
    base_classes,
    n_labeled: int,
    n_test: int,
    seed: int,
    oracle_enabled: bool = False,
) -> SemiSplit:
    """Per-class stratified split of the base classes into L/U/T pools.

    Each base class contributes exactly ``n_labeled`` labeled and ``n_test``
    test samples; the remainder becomes the unlabeled pool (possibly empty).
    """
    if n_labeled < 1 or n_test < 0:
        raise ValueError("need n_labeled >= 1 and n_test >= 0")
    rng = stream(seed, "split")
    labeled: list[tuple[str, int]] = []
    test: list[tuple[str, int]] = []
    unlabeled: list[str] = []
    hidden: dict[str, int] = {}
    for cls in sorted(int(c) for c in base_classes):
        rows = np.flatnonzero(dataset.labels == cls)
        if rows.size < n_labeled + n_test:
            raise ValueError(
                f"class {cls} has {rows.size} samples, fewer than n_labeled+n_test={n_labeled + n_test}"
            )
        order = rng.permutation(rows.size)
        picked = rows[order]
        for r in picked[:n_labeled]:
            labeled.append((dataset.sample_ids[r], cls))
        for r in picked[n_labeled : n_labeled + n_test]:
            test.append((dataset.sample_ids[r], cls))
        for r in picked[n_labeled + n_test :]:
            sid = dataset.sample_ids[r]
            unlabeled.append(sid)
            hidden[sid] = cls
    return SemiSplit(tuple(labeled), tuple(unlabeled), tuple(test), hidden, oracle_enabled)


def make_synthetic(cfg: SynthConfig) -> Dataset:
    """Gaussian blobs: one isotropic cluster per class.

    Class means are drawn at random and rescaled so every pair is at least
    ``mean_separation`` apart; samples add ``cluster_std`` isotropic noise.
    Deterministic per seed.
    """
    rng = stream(cfg.seed, "synth")
    c, n_per, d = cfg.num_classes, cfg.samples_per_class, cfg.ambient_dim
    scale = cfg.mean_separation if cfg.mean_separation > 0 else 1.0
    means = rng.standard_normal((c, d)) * scale
    if c > 1 and cfg.mean_separation > 0:
        diffs = means[:, None, :] - means[None, :, :]
        dists = np.sqrt((diffs**2).sum(-1))
        min_dist = dists[~np.eye(c, dtype=bool)].min()
        if min_dist <= 0:
            raise ValueError("degenerate class means; use a different seed")
        if min_dist < cfg.mean_separation:
            means *= cfg.mean_separation / min_dist
    features = np.empty((c * n_per, d), dtype=np.float64)
    labels = np.empty(c * n_per, dtype=np.int64)
    ids = []
    for cls in range(c):
        lo = cls * n_per
        noise = rng.standard_normal((n_per, d)) * cfg.cluster_std
        features[lo : lo + n_per] = means[cls] + noise
        labels[lo : lo + n_per] = cls
        ids.extend(f"c{cls:03d}_s{i:05d}" for i in range(n_per))
    names = tuple(f"class_{cls:03d}" for cls in range(c))
    return Dataset(features.astype(np.float32), labels, names, tuple(ids))


# ---------------------------------------------------------------------------
# file formats


def save_dataset(dataset: Dataset, feature_path, label_path) -> None:
    """Write the binary feature file and the id,label CSV."""
    n, d = dataset.features.shape
    with open(feature_path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        fh.write(struct.pack("<QQ", n, d))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        for sid in dataset.sample_ids:
            raw = sid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"sample id too long: {sid!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
    with open(label_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for sid, label in zip(dataset.sample_ids, dataset.labels):
            writer.writerow([sid, dataset.class_names[label]])


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DatasetFormatError(
            f"truncated feature file: expected {count} bytes for {what} at offset {fh.tell() - len(data)}"
        )
    return data


def load_dataset(feature_path, label_path) -> Dataset:
    """Load a dataset saved by :func:`save_dataset`.

    Class names are the sorted distinct labels in the CSV; every feature row
    must have exactly one label row and vice versa.
    """
    with open(feature_path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FEATURE_VERSION:
            raise DatasetFormatError(f"unsupported feature file version {version}")
        n, d = struct.unpack("<QQ", _read_exact(fh, 16, "dimensions"))
        payload = _read_exact(fh, n * d * 4, "feature payload")
        features = np.frombuffer(payload, dtype="<f4").reshape(n, d)
        ids = []
        for i in range(n):
            (length,) = struct.unpack("<H", _read_exact(fh, 2, f"id length #{i}"))
            ids.append(_read_exact(fh, length, f"id #{i}").decode("utf-8"))
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after id table")
    if len(set(ids)) != n:
        raise DatasetFormatError("duplicate sample ids in feature file")

    by_id: dict[str, str] = {}
    with open(label_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise DatasetFormatError(f"label file header must be id,label, got {header}")
        for row in reader:
            if len(row) != 2:
                raise DatasetFormatError(f"malformed label row: {row}")
            sid, name = row
            if sid in by_id:
                raise DatasetFormatError(f"duplicate label row for id {sid!r}")
            by_id[sid] = name
    known = set(ids)
    for sid in by_id:
        if sid not in known:
            raise DatasetFormatError(f"label file references unknown id {sid!r}")
    if len(by_id) != n:
        raise DatasetFormatError(
            f"row-count mismatch: {n} feature rows but {len(by_id)} label rows"
        )
    names = tuple(sorted(set(by_id.values())))
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[by_id[sid]] for sid in ids], dtype=np.int64)
    return Dataset(features, labels, names, tuple(ids))


def save_split(partition: ClassPartition, split: SemiSplit, path, meta: dict | None = None) -> None:
    """Persist a partition + split as deterministic JSON."""
    doc = {
        "version": 1,
        "partition": {
            "base": list(partition.base_classes),
            "val": list(partition.val_classes),
            "novel": list(partition.novel_classes),
        },
        "labeled": [[sid, int(lbl)] for sid, lbl in split.labeled],
        "unlabeled": list(split.unlabeled),
        "test": [[sid, int(lbl)] for sid, lbl in split.test],
        "hidden": {sid: int(lbl) for sid, lbl in split._hidden.items()},
        "oracle_enabled": split.oracle_enabled,
        "meta": dict(meta or {}),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_split(path) -> tuple[ClassPartition, SemiSplit, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise DatasetFormatError(f"unsupported split file version {doc.get('version')}")
    part = ClassPartition(
        tuple(doc["partition"]["base"]),
        tuple(doc["partition"]["val"]),
        tuple(doc["partition"]["novel"]),
    )
    split = SemiSplit(
        tuple((sid, int(lbl)) for sid, lbl in doc["labeled"]),
        tuple(doc["unlabeled"]),
        tuple((sid, int(lbl)) for sid, lbl in doc["test"]),
        {sid: int(lbl) for sid, lbl in doc["hidden"].items()},
        bool(doc["oracle_enabled"]),
    )
    return part, split, doc.get("meta", {})
