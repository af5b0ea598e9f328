"""Seeded synthetic ZSL benchmarks with controllable attribute->feature structure.

Each benchmark has a hidden ground-truth map G from class attributes to a
class mean in feature space (orthonormal linear map, optionally squashed by a
tanh); samples are class mean + isotropic Gaussian noise. Unseen-class
attributes are convex combinations of a few seen-class attributes plus a
small jitter, so the visual-semantic mapping learned on seen classes
transfers to unseen classes by construction.

Generation is a pure function of the spec (including its seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datamodel import (
    ORIGIN_SEEN,
    ClassSpace,
    LabeledDataset,
    LoadedDataset,
    SemanticTable,
    SplitSpec,
    UnlabeledPool,
    validate_split,
)

# Fixed generator internals (not worth spec knobs at desk scale). The unseen
# jitter is deliberately sizable: its component orthogonal to the seen-class
# attribute hull displaces unseen class means in a way no seen-only learner
# can predict, which is what gives transductive methods real headroom.
_UNSEEN_JITTER = 0.18
_TANH_GAIN = 3.0


@dataclass(frozen=True)
class SynthSpec:
    n_seen: int
    n_unseen: int
    attr_dim: int
    feat_dim: int
    train_per_seen: int
    test_per_seen: int
    test_per_unseen: int
    noise: float
    nonlinear: bool = True
    sharing: float = 0.0  # 0 = independent class attributes, ->1 = near-identical
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_seen, self.n_unseen, self.attr_dim, self.feat_dim,
                  self.train_per_seen, self.test_per_seen, self.test_per_unseen)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if self.noise <= 0:
            raise ValueError("noise scale must be > 0")
        if self.feat_dim < self.attr_dim:
            raise ValueError("feature dimension must be >= attribute dimension")
        if not 0.0 <= self.sharing < 1.0:
            raise ValueError("sharing factor must be in [0, 1)")


@dataclass(frozen=True)
class SynthResult:
    data: LoadedDataset
    all_features: np.ndarray          # full row table (train + test_seen + test_unseen)
    all_labels: np.ndarray
    class_means: dict[int, np.ndarray]  # hidden ground truth, for oracle tests
    spec: SynthSpec


def reference_benchmark() -> SynthSpec:
    """The frozen spec used by the acceptance suite.

    The noise scale was fixed once by sweeping a grid and picking the value
    that puts the seen-only prototype learner in the 55-80% unseen-accuracy
    band (see tests); it must not be retuned.
    """
    return SynthSpec(
        n_seen=10,
        n_unseen=4,
        attr_dim=16,
        feat_dim=64,
        train_per_seen=60,
        test_per_seen=30,
        test_per_unseen=30,
        noise=0.60,
        nonlinear=True,
        sharing=0.35,
        seed=20240 + 11,
    )


def noise_grid() -> tuple[float, ...]:
    """The noise-scale grid the reference value was chosen from."""
    return (0.30, 0.45, 0.60, 0.72, 0.85)


def harder_benchmark() -> SynthSpec:
    """Reference spec with noise raised one grid step (for robustness ablations)."""
    ref = reference_benchmark()
    grid = noise_grid()
    idx = grid.index(ref.noise)
    return replace(ref, noise=grid[min(idx + 1, len(grid) - 1)])


def _class_mean(map_q: np.ndarray, attr: np.ndarray, nonlinear: bool) -> np.ndarray:
    pre = map_q @ attr
    return np.tanh(_TANH_GAIN * pre) if nonlinear else pre


def generate(spec: SynthSpec) -> SynthResult:
    rng = np.random.default_rng(spec.seed)
    q, d = spec.attr_dim, spec.feat_dim

    seen_ids = list(range(spec.n_seen))
    unseen_ids = list(range(spec.n_seen, spec.n_seen + spec.n_unseen))

    base = rng.uniform(0.0, 1.0, size=q)
    seen_attrs = {
        c: (1.0 - spec.sharing) * rng.uniform(0.0, 1.0, size=q) + spec.sharing * base
        for c in seen_ids
    }
    unseen_attrs: dict[int, np.ndarray] = {}
    for c in unseen_ids:
        k = int(rng.integers(2, 4))  # 2 or 3 parents
        parents = rng.choice(seen_ids, size=k, replace=False)
        weights = rng.dirichlet(np.ones(k))
        combo = sum(w * seen_attrs[int(p)] for w, p in zip(weights, parents))
        jitter = rng.normal(0.0, _UNSEEN_JITTER, size=q)
        unseen_attrs[c] = np.clip(combo + jitter, 0.0, 1.0)

    gaussian = rng.normal(size=(d, q))
    map_q, r = np.linalg.qr(gaussian)
    map_q = map_q * np.sign(np.diag(r))  # canonical column signs

    attrs = {**seen_attrs, **unseen_attrs}
    means = {c: _class_mean(map_q, attrs[c], spec.nonlinear) for c in attrs}

    def draw(class_ids, per_class):
        feats, labels = [], []
        for c in class_ids:
            feats.append(means[c] + spec.noise * rng.normal(size=(per_class, d)))
            labels.extend([c] * per_class)
        return np.concatenate(feats, axis=0), np.array(labels, dtype=np.int64)

    train_x, train_y = draw(seen_ids, spec.train_per_seen)
    ts_x, ts_y = draw(seen_ids, spec.test_per_seen)
    tu_x, tu_y = draw(unseen_ids, spec.test_per_unseen)

    all_features = np.concatenate([train_x, ts_x, tu_x], axis=0)
    all_labels = np.concatenate([train_y, ts_y, tu_y])
    n_train, n_ts = train_x.shape[0], ts_x.shape[0]
    split = SplitSpec(
        train_idx=tuple(range(n_train)),
        test_seen_idx=tuple(range(n_train, n_train + n_ts)),
        test_unseen_idx=tuple(range(n_train + n_ts, all_features.shape[0])),
        split_name="synth",
    )
    space = ClassSpace(tuple(seen_ids), tuple(unseen_ids))
    table = SemanticTable(attrs)

    violations = validate_split(space, split, all_labels)
    if violations:  # generator bug if this ever fires
        raise AssertionError("generated dataset violates its own split: " + "; ".join(violations))

    ts_idx = np.array(split.test_seen_idx, dtype=np.int64)
    tu_idx = np.array(split.test_unseen_idx, dtype=np.int64)
    data = LoadedDataset(
        train=LabeledDataset(train_x, train_y, (ORIGIN_SEEN,) * n_train),
        test_unseen=UnlabeledPool(tu_x, tu_idx),
        test_seen=UnlabeledPool(ts_x, ts_idx),
        test_unseen_labels=tu_y,
        test_seen_labels=ts_y,
        semantics=table,
        space=space,
        split=split,
    )
    return SynthResult(data=data, all_features=all_features, all_labels=all_labels,
                       class_means=means, spec=spec)
