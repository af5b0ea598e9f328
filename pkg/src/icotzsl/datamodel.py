"""Core ZSL data types, split validation, and dataset file I/O.

Features live in numpy arrays: float64 in memory for training, float32 on
disk. Class ids are dense integers. Loaded objects are immutable by
convention (nothing in the package mutates them after construction), so they
are safe to share across threads.

File formats (all little-endian):
  features:   magic b"ICOTFEAT", u32 version=1, u32 n, u32 d, n*d float32 row-major
  labels:     magic b"ICOTLABL", u32 version=1, u32 n, n u32 class ids
  attributes: UTF-8 CSV, one row per class: class_id, a_1, ..., a_q
  split:      JSON {seen_classes, unseen_classes, train_idx, test_seen_idx,
                    test_unseen_idx, split_name}
  manifest:   optional JSON {class id -> display name}
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"ICOTFEAT"
LABEL_MAGIC = b"ICOTLABL"
FORMAT_VERSION = 1

ORIGIN_SEEN = "seen-real"
ORIGIN_PSEUDO = "pseudo-unseen"


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class ClassSpace:
    """Disjoint seen / unseen class id partition."""

    seen_labels: tuple[int, ...]
    unseen_labels: tuple[int, ...]

    def __post_init__(self):
        seen, unseen = set(self.seen_labels), set(self.unseen_labels)
        if not seen or not unseen:
            raise ValueError("seen and unseen label sets must both be non-empty")
        if len(seen) != len(self.seen_labels) or len(unseen) != len(self.unseen_labels):
            raise ValueError("class ids must be unique within each partition")
        if seen & unseen:
            raise ValueError(f"seen/unseen overlap: {sorted(seen & unseen)}")

    @property
    def all_labels(self) -> tuple[int, ...]:
        return tuple(self.seen_labels) + tuple(self.unseen_labels)


@dataclass(frozen=True)
class SemanticTable:
    """Per-class attribute vectors, one fixed-width row per class id."""

    vectors: dict[int, np.ndarray]

    def __post_init__(self):
        dims = {v.shape[-1] for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"attribute vectors have mixed dimensions: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[-1]

    def covers(self, class_ids) -> bool:
        return all(c in self.vectors for c in class_ids)

    def matrix(self, class_ids) -> np.ndarray:
        """Stack the vectors of the given classes, in the given order."""
        missing = [c for c in class_ids if c not in self.vectors]
        if missing:
            raise KeyError(f"no semantic vector for classes {missing}")
        return np.stack([np.asarray(self.vectors[c], dtype=np.float64) for c in class_ids])


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # n x d, float64
    labels: np.ndarray    # n int class ids
    origins: tuple[str, ...]  # per row: ORIGIN_SEEN or ORIGIN_PSEUDO

    def __post_init__(self):
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("labeled dataset must contain at least one row")
        if self.labels.shape != (n,) or len(self.origins) != n:
            raise ValueError("features, labels, and origins must agree on row count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def classes_present(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class UnlabeledPool:
    features: np.ndarray      # m x d
    row_indices: np.ndarray   # m stable ids into the source feature file

    def __post_init__(self):
        m = self.features.shape[0]
        if m < 1:
            raise ValueError("unlabeled pool must contain at least one row")
        if self.row_indices.shape != (m,):
            raise ValueError("row_indices must match the feature row count")
        if len(np.unique(self.row_indices)) != m:
            raise ValueError("pool row indices must be unique")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PseudoLabeledSet:
    """Model-assigned labels on pool rows; duplicates allowed (sampling w/ replacement)."""

    pool_positions: np.ndarray  # positions into the pool (0..m-1), duplicates ok
    labels: np.ndarray          # assigned class ids, parallel to positions
    source: str                 # tag of the model that produced the labels
    iteration: int

    def __post_init__(self):
        if self.pool_positions.shape != self.labels.shape:
            raise ValueError("positions and labels must be parallel arrays")

    def __len__(self) -> int:
        return self.pool_positions.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    train_idx: tuple[int, ...]
    test_seen_idx: tuple[int, ...]
    test_unseen_idx: tuple[int, ...]
    split_name: str = "PS"


@dataclass(frozen=True)
class LoadedDataset:
    """Everything load_dataset/generate hands to the pipelines."""

    train: LabeledDataset
    test_unseen: UnlabeledPool
    test_seen: UnlabeledPool | None
    test_unseen_labels: np.ndarray         # ground truth, evaluation only
    test_seen_labels: np.ndarray | None
    semantics: SemanticTable
    space: ClassSpace
    split: SplitSpec


def validate_split(space: ClassSpace, split: SplitSpec, labels: np.ndarray) -> list[str]:
    """Return every violated split invariant (empty list = ok).

    Violations are data, not exceptions: callers decide whether to refuse.
    """
    violations: list[str] = []
    seen = set(space.seen_labels)
    unseen = set(space.unseen_labels)
    overlap = seen & unseen
    for c in sorted(overlap):
        violations.append(f"class {c} appears in both seen and unseen sets")

    groups = {
        "train": split.train_idx,
        "test_seen": split.test_seen_idx,
        "test_unseen": split.test_unseen_idx,
    }
    names = list(groups)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = set(groups[a]) & set(groups[b])
            if shared:
                violations.append(
                    f"index sets {a} and {b} share rows {sorted(shared)[:5]}"
                )

    n = len(labels)
    for name, idx in groups.items():
        for row in idx:
            if row < 0 or row >= n:
                violations.append(f"{name} row {row} outside label table of size {n}")
    if violations:
        return violations

    for row in split.train_idx:
        if int(labels[row]) not in seen:
            violations.append(f"train row {row} labeled {int(labels[row])}, not a seen class")
    for row in split.test_seen_idx:
        if int(labels[row]) not in seen:
            violations.append(f"test_seen row {row} labeled {int(labels[row])}, not a seen class")
    for row in split.test_unseen_idx:
        if int(labels[row]) not in unseen:
            violations.append(
                f"test_unseen row {row} labeled {int(labels[row])}, not an unseen class"
            )
    return violations


def merge_train_set(seen: LabeledDataset, pseudo: PseudoLabeledSet,
                    pool: UnlabeledPool) -> LabeledDataset:
    """Seen rows followed by pseudo-labeled pool rows (with multiplicity).

    Inputs are never mutated; output size is exactly |seen| + |pseudo|.
    """
    if len(pseudo) == 0:
        return LabeledDataset(seen.features, seen.labels, seen.origins)
    pos = np.asarray(pseudo.pool_positions, dtype=np.int64)
    if pos.min() < 0 or pos.max() >= len(pool):
        raise IndexError(f"pseudo positions out of range for pool of size {len(pool)}")
    feats = np.concatenate([seen.features, pool.features[pos]], axis=0)
    labels = np.concatenate([seen.labels, np.asarray(pseudo.labels, dtype=np.int64)])
    origins = seen.origins + (ORIGIN_PSEUDO,) * len(pseudo)
    return LabeledDataset(feats, labels, origins)


# ---------------------------------------------------------------------------
# file I/O


def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype=np.float32)
    n, d = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, n, d))
        f.write(arr.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURE_MAGIC:
            raise DatasetFormatError(f"{path}: malformed header (bad magic {magic!r})")
        version, n, d = struct.unpack("<III", f.read(12))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        raw = f.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise DatasetFormatError(
                f"{path}: truncated payload at byte {20 + len(raw)}; expected {n}x{d} floats"
            )
    return np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()


def write_labels(path, labels: np.ndarray) -> None:
    arr = np.ascontiguousarray(labels, dtype=np.uint32)
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, arr.shape[0]))
        f.write(arr.tobytes(order="C"))


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != LABEL_MAGIC:
            raise DatasetFormatError(f"{path}: malformed header (bad magic {magic!r})")
        version, n = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise DatasetFormatError(f"{path}: truncated payload; expected {n} labels")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def write_attributes(path, table: SemanticTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for class_id in sorted(table.vectors):
            vec = np.asarray(table.vectors[class_id], dtype=np.float64)
            writer.writerow([class_id] + [repr(float(v)) for v in vec])


def read_attributes(path) -> SemanticTable:
    vectors: dict[int, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                class_id = int(row[0])
                vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad attribute row ({exc})") from exc
            if class_id in vectors:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate class id {class_id}")
            vectors[class_id] = vec
    if not vectors:
        raise DatasetFormatError(f"{path}: no attribute rows")
    dims = {v.shape[0] for v in vectors.values()}
    if len(dims) > 1:
        raise DatasetFormatError(f"{path}: inconsistent attribute dimensions {sorted(dims)}")
    return SemanticTable(vectors)


def write_split(path, space: ClassSpace, split: SplitSpec) -> None:
    payload = {
        "seen_classes": list(space.seen_labels),
        "unseen_classes": list(space.unseen_labels),
        "train_idx": list(split.train_idx),
        "test_seen_idx": list(split.test_seen_idx),
        "test_unseen_idx": list(split.test_unseen_idx),
        "split_name": split.split_name,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_split(path) -> tuple[ClassSpace, SplitSpec]:
    with open(path, encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: malformed split JSON ({exc})") from exc
    required = {"seen_classes", "unseen_classes", "train_idx", "test_seen_idx",
                "test_unseen_idx", "split_name"}
    missing = required - payload.keys()
    if missing:
        raise DatasetFormatError(f"{path}: split JSON missing keys {sorted(missing)}")
    space = ClassSpace(tuple(payload["seen_classes"]), tuple(payload["unseen_classes"]))
    split = SplitSpec(
        train_idx=tuple(payload["train_idx"]),
        test_seen_idx=tuple(payload["test_seen_idx"]),
        test_unseen_idx=tuple(payload["test_unseen_idx"]),
        split_name=payload["split_name"],
    )
    return space, split


def write_dataset(out_dir, features: np.ndarray, labels: np.ndarray,
                  table: SemanticTable, space: ClassSpace, split: SplitSpec,
                  manifest: dict[int, str] | None = None) -> dict[str, Path]:
    """Write the four dataset files (plus optional manifest) under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": out / "features.bin",
        "labels": out / "labels.bin",
        "attributes": out / "attributes.csv",
        "split": out / "split.json",
    }
    write_features(paths["features"], features)
    write_labels(paths["labels"], labels)
    write_attributes(paths["attributes"], table)
    write_split(paths["split"], space, split)
    if manifest is not None:
        paths["manifest"] = out / "manifest.json"
        with open(paths["manifest"], "w", encoding="utf-8") as f:
            json.dump({str(k): v for k, v in manifest.items()}, f, indent=2, sort_keys=True)
            f.write("\n")
    return paths


def load_dataset(feature_path, label_path, attribute_path, split_path) -> LoadedDataset:
    """Load and cross-validate the four dataset files.

    Every structural invariant is checked here so the pipelines can assume
    clean inputs: dimension consistency, known class ids, and a violation-free
    split.
    """
    features32 = read_features(feature_path)
    labels = read_labels(label_path)
    table = read_attributes(attribute_path)
    space, split = read_split(split_path)

    n = features32.shape[0]
    if labels.shape[0] != n:
        raise DatasetFormatError(
            f"feature rows ({n}) and label rows ({labels.shape[0]}) disagree"
        )
    known = set(space.all_labels)
    bad = [int(c) for c in np.unique(labels) if int(c) not in known]
    if bad:
        raise DatasetFormatError(f"labels reference unknown class ids {bad}")
    if not table.covers(space.all_labels):
        missing = [c for c in space.all_labels if c not in table.vectors]
        raise DatasetFormatError(f"attribute table missing classes {missing}")

    violations = validate_split(space, split, labels)
    if violations:
        raise DatasetFormatError("split violations: " + "; ".join(violations))

    features = features32.astype(np.float64)
    train_idx = np.array(split.train_idx, dtype=np.int64)
    tu_idx = np.array(split.test_unseen_idx, dtype=np.int64)
    ts_idx = np.array(split.test_seen_idx, dtype=np.int64)

    train = LabeledDataset(
        features[train_idx], labels[train_idx], (ORIGIN_SEEN,) * len(train_idx)
    )
    test_unseen = UnlabeledPool(features[tu_idx], tu_idx)
    test_seen = UnlabeledPool(features[ts_idx], ts_idx) if len(ts_idx) else None
    return LoadedDataset(
        train=train,
        test_unseen=test_unseen,
        test_seen=test_seen,
        test_unseen_labels=labels[tu_idx],
        test_seen_labels=labels[ts_idx] if len(ts_idx) else None,
        semantics=table,
        space=space,
        split=split,
    )
