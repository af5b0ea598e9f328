"""GZSL pipelines: co-training over the total class space, and the two-stage
OOD-gated variants.

Setting 1 (separate unseen pool at training time): the detector is sharpened
directly on the real unseen pool, the gate splits the compound test rows,
gated rows are labeled by the transductive ZSL run and the rest by a plain
seen-class classifier.

Setting 2 (compound pool only): the semantic-guided selection simulates the
unseen set, the sharpened detector gates the compound pool, gated rows go to
the ZSL co-training run restricted to unseen classes and the remaining rows
to the GZSL co-training run over all classes.

Route tags always partition the compound rows; a gated row can only carry an
unseen-class label.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cotrain import (
    CotrainResult,
    ExchangePolicy,
    FusionWeights,
    _run_cotraining,
)
from .datamodel import ClassSpace, LabeledDataset, SemanticTable, UnlabeledPool
from .oodgate import (
    SimulatedUnseenSet,
    calibrate_threshold,
    select_simulated_semantic,
    train_base_detector,
    train_ood_detector,
)

ROUTE_GATED = "gated-unseen"
ROUTE_REMAINING = "remaining"


@dataclass
class TwoStageConfig:
    learners: list
    T: int = 8
    policy: ExchangePolicy = field(default_factory=lambda: ExchangePolicy("cross"))
    fusion: FusionWeights | None = field(default_factory=FusionWeights)
    seed: int = 0
    gate_fnr: float = 0.05
    ood_epochs: int = 50
    ood_lr: float = 1e-3
    ood_batch: int = 256
    ood_hidden: int = 1600
    sod_margin: float = 0.0
    gzsl_train_on_all: bool = False  # train the GZSL branch on all compound rows
    threads: int = 1


@dataclass
class GzslPrediction:
    labels: np.ndarray        # predicted class id over Y, per compound row
    routes: tuple[str, ...]   # ROUTE_GATED or ROUTE_REMAINING per row
    gate_threshold: float | None = None
    simulated_size: int | None = None
    zsl_history: list | None = None
    gzsl_history: list | None = None

    def __post_init__(self):
        if self.labels.shape[0] != len(self.routes):
            raise ValueError("labels and routes must be parallel")

    def to_csv(self) -> str:
        lines = ["row_index,predicted_class,route"]
        lines += [f"{i},{int(c)},{r}" for i, (c, r) in enumerate(zip(self.labels, self.routes))]
        return "\n".join(lines) + "\n"


def _derive_seed(seed: int, label: str) -> int:
    seq = np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))])
    return int(seq.generate_state(1)[0])


def icot_gzsl_run(learners, seen: LabeledDataset, compound_pool: UnlabeledPool,
                  semantics: SemanticTable, space: ClassSpace, T: int,
                  policy: ExchangePolicy, fusion, seed: int, truths=None,
                  one_off: bool = False, warm_start: bool = False,
                  threads: int = 1) -> CotrainResult:
    """Co-training over the total class space on a compound seen+unseen pool.

    Predictions and pseudo labels span all classes; only rows pseudo-labeled
    with unseen classes are eligible for subset selection, with the sampling
    budget based on the count of such rows at each iteration.
    """
    classes = sorted(space.all_labels)
    return _run_cotraining(learners, seen, compound_pool, semantics, space, T,
                           policy, fusion, seed, predict_classes=classes,
                           gzsl_mode=True, truths=truths, one_off=one_off,
                           warm_start=warm_start, threads=threads)


def two_stage_ood_run(seen: LabeledDataset, test_unseen_pool: UnlabeledPool,
                      test_seen_pool: UnlabeledPool, semantics: SemanticTable,
                      space: ClassSpace, config: TwoStageConfig) -> GzslPrediction:
    """Setting 1: the real unseen pool is available separately for training."""
    simulated = SimulatedUnseenSet(
        np.arange(len(test_unseen_pool), dtype=np.int64), method="iter"
    )
    detector = train_ood_detector(
        seen, simulated, test_unseen_pool, seed=_derive_seed(config.seed, "ood-gate"),
        epochs=config.ood_epochs, lr=config.ood_lr, batch=config.ood_batch,
        hidden=config.ood_hidden,
    )
    theta = calibrate_threshold(detector.scores(seen.features), config.gate_fnr)
    detector.threshold = theta

    compound = np.concatenate([test_unseen_pool.features, test_seen_pool.features])
    gated = detector.scores(compound) > theta

    labels = np.empty(compound.shape[0], dtype=np.int64)
    routes = np.where(gated, ROUTE_GATED, ROUTE_REMAINING)
    zsl_history = None
    if not gated.any():
        warnings.warn("OOD gate selected no rows; routing everything to the "
                      "seen-class classifier", RuntimeWarning, stacklevel=2)
    else:
        zsl = _run_cotraining(
            config.learners, seen, test_unseen_pool, semantics, space, config.T,
            config.policy, config.fusion, _derive_seed(config.seed, "zsl-branch"),
            predict_classes=sorted(space.unseen_labels), gzsl_mode=False,
            threads=config.threads,
        )
        labels[gated] = zsl.fused_predict(compound[gated])
        zsl_history = zsl.history
    if (~gated).any():
        clf = train_base_detector(
            seen, seed=_derive_seed(config.seed, "seen-clf"),
            epochs=config.ood_epochs, lr=config.ood_lr, batch=config.ood_batch,
            hidden=config.ood_hidden,
        )
        labels[~gated] = clf.predict_class(compound[~gated])
    return GzslPrediction(labels=labels, routes=tuple(routes),
                          gate_threshold=theta,
                          simulated_size=len(test_unseen_pool),
                          zsl_history=zsl_history)


def two_stage_sod_run(seen: LabeledDataset, compound_pool: UnlabeledPool,
                      semantics: SemanticTable, space: ClassSpace,
                      config: TwoStageConfig) -> GzslPrediction:
    """Setting 2: only the compound pool is available (semantic-guided gate)."""
    simulated = select_simulated_semantic(
        seen, compound_pool, semantics, space,
        seed=_derive_seed(config.seed, "semantic-select"),
        epochs=config.ood_epochs, lr=config.ood_lr, batch=config.ood_batch,
        hidden=config.ood_hidden, margin=config.sod_margin,
    )
    m = len(compound_pool)
    if len(simulated) == 0:
        warnings.warn("semantic selection is empty; routing the whole pool to "
                      "the GZSL co-training run", RuntimeWarning, stacklevel=2)
        gzsl = icot_gzsl_run(config.learners, seen, compound_pool, semantics,
                             space, config.T, config.policy, config.fusion,
                             _derive_seed(config.seed, "gzsl-branch"),
                             threads=config.threads)
        return GzslPrediction(labels=gzsl.labels.copy(),
                              routes=(ROUTE_REMAINING,) * m,
                              gate_threshold=None, simulated_size=0,
                              gzsl_history=gzsl.history)

    detector = train_ood_detector(
        seen, simulated, compound_pool, seed=_derive_seed(config.seed, "ood-gate"),
        epochs=config.ood_epochs, lr=config.ood_lr, batch=config.ood_batch,
        hidden=config.ood_hidden,
    )
    theta = calibrate_threshold(detector.scores(seen.features), config.gate_fnr)
    detector.threshold = theta
    gated = detector.scores(compound_pool.features) > theta

    labels = np.empty(m, dtype=np.int64)
    routes = np.where(gated, ROUTE_GATED, ROUTE_REMAINING)
    zsl_history = gzsl_history = None

    if gated.any():
        gated_pool = UnlabeledPool(compound_pool.features[gated],
                                   np.flatnonzero(gated).astype(np.int64))
        zsl = _run_cotraining(
            config.learners, seen, gated_pool, semantics, space, config.T,
            config.policy, config.fusion, _derive_seed(config.seed, "zsl-branch"),
            predict_classes=sorted(space.unseen_labels), gzsl_mode=False,
            threads=config.threads,
        )
        labels[gated] = zsl.labels
        zsl_history = zsl.history
    else:
        warnings.warn("OOD gate selected no rows; routing everything to the "
                      "GZSL co-training run", RuntimeWarning, stacklevel=2)

    if (~gated).any():
        if config.gzsl_train_on_all:
            gzsl = icot_gzsl_run(config.learners, seen, compound_pool, semantics,
                                 space, config.T, config.policy, config.fusion,
                                 _derive_seed(config.seed, "gzsl-branch"),
                                 threads=config.threads)
            labels[~gated] = gzsl.labels[~gated]
        else:
            rest_pool = UnlabeledPool(compound_pool.features[~gated],
                                      np.flatnonzero(~gated).astype(np.int64))
            gzsl = icot_gzsl_run(config.learners, seen, rest_pool, semantics,
                                 space, config.T, config.policy, config.fusion,
                                 _derive_seed(config.seed, "gzsl-branch"),
                                 threads=config.threads)
            labels[~gated] = gzsl.labels
        gzsl_history = gzsl.history

    return GzslPrediction(labels=labels, routes=tuple(routes),
                          gate_threshold=theta, simulated_size=len(simulated),
                          zsl_history=zsl_history, gzsl_history=gzsl_history)
