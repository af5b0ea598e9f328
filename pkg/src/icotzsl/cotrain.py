"""Iterative co-training engine: exchanging policies, incremental sampling,
prediction fusion, and the APR diversity metric.

The schedule follows a fixed pattern: learners are first trained on the
seen-class set alone, their pool predictions are exchanged and sampled at the
smallest budget to build each learner's first training set, and then each of
the T iterations retrains, re-predicts, and hands the next (larger) sampled
subset across the exchanging module. Final labels fuse the last iteration's
probabilistic predictions.

Every random choice is drawn from a stream keyed by (run seed, learner tag,
iteration), so runs are bit-reproducible and independent of execution order
or thread count.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basemodels import predict, stream_rng
from .datamodel import (
    ClassSpace,
    LabeledDataset,
    PseudoLabeledSet,
    SemanticTable,
    UnlabeledPool,
    merge_train_set,
)
from .metrics import per_class_acc

CROSS = "cross"
CYCLIC = "cyclic"
AGREEMENT = "agreement"


@dataclass(frozen=True)
class ExchangePolicy:
    variant: str  # cross | cyclic | agreement; the learner list order is the cycle

    def __post_init__(self):
        if self.variant not in (CROSS, CYCLIC, AGREEMENT):
            raise ValueError(f"unknown exchange policy {self.variant!r}")

    def validate_arity(self, n_learners: int) -> None:
        if self.variant == CROSS and n_learners != 2:
            raise ValueError("cross exchanging requires exactly 2 learners")
        if self.variant in (CYCLIC, AGREEMENT) and n_learners < 3:
            raise ValueError(f"{self.variant} exchanging requires >= 3 learners")


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("fusion weight alpha must lie in [0, 1]")


@dataclass
class IterationRecord:
    t: int
    budget: int
    train_sizes: list[int]
    learner_acc: list[float] | None = None
    fused_acc: float | None = None
    apr_ab: float | None = None
    pred_unseen_counts: list[int] | None = None  # GZSL mode only

    def to_json_dict(self) -> dict:
        out = {"t": self.t, "budget": self.budget, "train_sizes": self.train_sizes}
        if self.learner_acc is not None:
            out["learner_acc"] = self.learner_acc
        if self.fused_acc is not None:
            out["fused_acc"] = self.fused_acc
        if self.apr_ab is not None:
            out["apr_ab"] = self.apr_ab
        if self.pred_unseen_counts is not None:
            out["pred_unseen_counts"] = self.pred_unseen_counts
        return out


@dataclass
class CotrainResult:
    labels: np.ndarray                 # fused class id per pool row
    classes: list[int]                 # class list the probabilities range over
    probs: list[np.ndarray]            # final per-learner probabilities
    inductive_probs: list[np.ndarray]  # seen-only (pre-iteration) predictions
    history: list[IterationRecord]
    learners: list
    weights: np.ndarray

    def fused_probs(self) -> np.ndarray:
        return fuse_probs(self.probs, self.weights)

    def fused_predict(self, x: np.ndarray) -> np.ndarray:
        """Fused class-id predictions for arbitrary rows using the final models."""
        probs = [predict(m, x, self.classes) for m in self.learners]
        return fuse_predictions(probs, self.weights, self.classes)


def learner_tag(learner, index: int) -> str:
    tag = getattr(learner, "tag", None)
    return tag if tag else f"{learner.arch}"


def _train_seed(seed: int, tag: str, iteration: int) -> int:
    entropy = np.random.SeedSequence([seed, zlib.crc32(tag.encode("utf-8")), iteration])
    return int(entropy.generate_state(1)[0])


# ---------------------------------------------------------------------------
# sampling and exchanging


def incremental_select(pseudo_labels, positions, t: int, T: int, seed,
                       source: str = "", one_off: bool = False) -> PseudoLabeledSet:
    """Class-balanced sampling with replacement at budget floor(M*t/T).

    `positions` are the candidate pool rows and `pseudo_labels` their assigned
    classes (parallel arrays); M is the candidate count. The per-class quota
    is floor(total / K) over classes actually present, with the remainder
    going one each to the lowest class ids. In one-off mode every candidate
    row is taken exactly once instead.
    """
    if not 1 <= t <= T:
        raise ValueError(f"iteration t={t} outside 1..{T}")
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if labels.shape != positions.shape:
        raise ValueError("pseudo_labels and positions must be parallel arrays")
    empty = PseudoLabeledSet(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                             source=source, iteration=t)
    m = labels.shape[0]
    if m == 0:
        return empty
    if one_off:
        return PseudoLabeledSet(positions.copy(), labels.copy(), source=source, iteration=t)

    total = (m * t) // T
    if total == 0:
        return empty
    rng = np.random.default_rng(seed)
    present = sorted(int(c) for c in np.unique(labels))
    quota, remainder = divmod(total, len(present))
    picked_pos, picked_lab = [], []
    for rank, c in enumerate(present):
        count = quota + (1 if rank < remainder else 0)
        if count == 0:
            continue
        rows = positions[labels == c]
        chosen = rows[rng.integers(0, rows.shape[0], size=count)]
        picked_pos.append(chosen)
        picked_lab.append(np.full(count, c, dtype=np.int64))
    return PseudoLabeledSet(np.concatenate(picked_pos), np.concatenate(picked_lab),
                            source=source, iteration=t)


def exchange(pseudo_sets: list[PseudoLabeledSet],
             policy: ExchangePolicy) -> list[PseudoLabeledSet]:
    """Reassign pseudo-labeled candidate sets between learners.

    cross: the two learners swap sets. cyclic: learner i receives learner
    (i-1 mod k)'s set, so labels flow along the declared cycle. agreement:
    learner i receives the rows on which all other learners assigned the
    same label, carrying that agreed label.
    """
    policy.validate_arity(len(pseudo_sets))
    if policy.variant == CROSS:
        return [pseudo_sets[1], pseudo_sets[0]]
    if policy.variant == CYCLIC:
        return [pseudo_sets[i - 1] for i in range(len(pseudo_sets))]

    out = []
    for i in range(len(pseudo_sets)):
        others = [s for j, s in enumerate(pseudo_sets) if j != i]
        agreed = {}
        for pos, lab in zip(others[0].pool_positions, others[0].labels):
            agreed[int(pos)] = int(lab)
        for s in others[1:]:
            labs = {int(p): int(l) for p, l in zip(s.pool_positions, s.labels)}
            agreed = {p: l for p, l in agreed.items() if labs.get(p) == l}
        pos = np.array(sorted(agreed), dtype=np.int64)
        lab = np.array([agreed[p] for p in sorted(agreed)], dtype=np.int64)
        source = "+".join(s.source for s in others)
        out.append(PseudoLabeledSet(pos, lab, source=source,
                                    iteration=pseudo_sets[i].iteration))
    return out


# ---------------------------------------------------------------------------
# fusion and diversity


def fuse_probs(p_list, weights=None) -> np.ndarray:
    """Convex combination of per-learner probability matrices."""
    mats = [np.asarray(p, dtype=np.float64) for p in p_list]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("probability matrices must share one class list")
    if weights is None:
        w = np.full(len(mats), 1.0 / len(mats))
    elif isinstance(weights, FusionWeights):
        if len(mats) != 2:
            raise ValueError("a single alpha only applies to two learners")
        w = np.array([weights.alpha, 1.0 - weights.alpha])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(mats),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        w = w / w.sum()
    return sum(wi * m for wi, m in zip(w, mats))


def fuse_predictions(p_list, weights, classes) -> np.ndarray:
    """Class id per row: argmax of the fused probabilities, ties to lowest id."""
    combined = fuse_probs(p_list, weights)
    class_arr = np.asarray(list(classes), dtype=np.int64)
    if combined.shape[1] != class_arr.shape[0]:
        raise ValueError("class list does not match probability width")
    best = combined.max(axis=1, keepdims=True)
    out = np.empty(combined.shape[0], dtype=np.int64)
    for i in range(combined.shape[0]):
        out[i] = class_arr[combined[i] == best[i]].min()
    return out


def apr(preds_a, preds_b, truths, classes) -> float:
    """Average per-class ratio of differing predictions, in [0, 1].

    For each true class with at least one row, the fraction of its rows on
    which the two prediction vectors disagree; APR is the unweighted mean.
    """
    classes = list(classes)
    if not classes:
        raise ValueError("class list is empty")
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    truths = np.asarray(truths)
    ratios = []
    for c in classes:
        mask = truths == c
        if not mask.any():
            continue
        ratios.append(float(np.mean(preds_a[mask] != preds_b[mask])))
    if not ratios:
        raise ValueError("no class in the list has any rows")
    return float(np.mean(ratios))


def apr_vs_pair(preds_x, preds_a, preds_b, truths, classes) -> float:
    """Mean of APR(x, a) and APR(x, b)."""
    return 0.5 * (apr(preds_x, preds_a, truths, classes)
                  + apr(preds_x, preds_b, truths, classes))


# ---------------------------------------------------------------------------
# the co-training loop


def _train_all(models, train_sets, semantics, classes, seeds, threads: int):
    def job(i):
        models[i].train(train_sets[i], semantics, classes, seeds[i])
    if threads > 1 and len(models) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, range(len(models))))
    else:
        for i in range(len(models)):
            job(i)


def _candidate_sets(prob_mats, classes, tags, iteration, eligible_labels=None):
    """Argmax pseudo labels per learner, filtered to eligible label values."""
    class_arr = np.asarray(classes, dtype=np.int64)
    sets = []
    for probs, tag in zip(prob_mats, tags):
        labels = class_arr[np.argmax(probs, axis=1)]
        positions = np.arange(labels.shape[0], dtype=np.int64)
        if eligible_labels is not None:
            keep = np.isin(labels, list(eligible_labels))
            positions, labels = positions[keep], labels[keep]
        sets.append(PseudoLabeledSet(positions, labels, source=tag, iteration=iteration))
    return sets


def _run_cotraining(learners, seen: LabeledDataset, pool: UnlabeledPool,
                    semantics: SemanticTable, space: ClassSpace, T: int,
                    policy: ExchangePolicy, fusion, seed: int,
                    predict_classes: list[int], gzsl_mode: bool,
                    truths=None, one_off: bool = False, warm_start: bool = False,
                    threads: int = 1) -> CotrainResult:
    if T < 1:
        raise ValueError("iteration count T must be >= 1")
    if len(pool) < 1:
        raise ValueError("unlabeled pool is empty")
    policy.validate_arity(len(learners))
    if not semantics.covers(predict_classes):
        raise KeyError("semantic table does not cover the prediction class space")

    models = [ln.clone() for ln in learners]
    tags = [learner_tag(ln, i) for i, ln in enumerate(learners)]
    for mdl, tag in zip(models, tags):
        mdl.tag = tag
        mdl.warm_start = warm_start
    unseen = set(space.unseen_labels)
    eligible = unseen if gzsl_mode else None
    weights = _resolve_weights(fusion, len(learners))

    def fit_round(train_sets, iteration):
        seeds = [_train_seed(seed, tags[i], iteration) for i in range(len(models))]
        try:
            _train_all(models, train_sets, semantics, predict_classes, seeds, threads)
        except Exception as exc:
            raise RuntimeError(f"learner training failed at iteration {iteration}: {exc}") from exc
        return [predict(m, pool.features, predict_classes) for m in models]

    def next_train_sets(prob_mats, budget_t, iteration):
        candidates = _candidate_sets(prob_mats, predict_classes, tags, iteration, eligible)
        received = exchange(candidates, policy)
        out = []
        for i, cand in enumerate(received):
            rng = stream_rng(seed, f"select:{tags[i]}", iteration)
            chosen = incremental_select(cand.labels, cand.pool_positions,
                                        t=budget_t, T=T, seed=rng,
                                        source=cand.source, one_off=one_off)
            out.append(merge_train_set(seen, chosen, pool))
        return out

    # initialization: seen-only training, first exchange at the t=1 budget
    probs = fit_round([seen] * len(models), iteration=0)
    inductive_probs = [p.copy() for p in probs]
    train_sets = next_train_sets(probs, budget_t=1, iteration=0)

    history: list[IterationRecord] = []
    for t in range(1, T + 1):
        probs = fit_round(train_sets, iteration=t)
        record = IterationRecord(
            t=t,
            budget=train_sets[0].features.shape[0] - len(seen),
            train_sizes=[ts.features.shape[0] for ts in train_sets],
        )
        if truths is not None:
            class_list = sorted(set(int(c) for c in np.unique(truths)))
            class_arr = np.asarray(predict_classes, dtype=np.int64)
            per_learner = []
            for p in probs:
                preds = class_arr[np.argmax(p, axis=1)]
                per_learner.append(per_class_acc(preds, truths, class_list)[1])
            record.learner_acc = per_learner
            fused_now = fuse_predictions(probs, weights, predict_classes)
            record.fused_acc = per_class_acc(fused_now, truths, class_list)[1]
            if len(probs) >= 2:
                preds_a = class_arr[np.argmax(probs[0], axis=1)]
                preds_b = class_arr[np.argmax(probs[1], axis=1)]
                record.apr_ab = apr(preds_a, preds_b, truths, class_list)
        if gzsl_mode:
            class_arr = np.asarray(predict_classes, dtype=np.int64)
            counts = []
            for p in probs:
                preds = class_arr[np.argmax(p, axis=1)]
                counts.append(int(np.isin(preds, list(unseen)).sum()))
            record.pred_unseen_counts = counts
        history.append(record)
        if t < T:
            train_sets = next_train_sets(probs, budget_t=min(t + 1, T), iteration=t)

    labels = fuse_predictions(probs, weights, predict_classes)
    return CotrainResult(labels=labels, classes=list(predict_classes), probs=probs,
                         inductive_probs=inductive_probs, history=history,
                         learners=models, weights=weights)


def _resolve_weights(fusion, n_learners: int) -> np.ndarray:
    if fusion is None:
        return np.full(n_learners, 1.0 / n_learners)
    if isinstance(fusion, FusionWeights):
        if n_learners != 2:
            return np.full(n_learners, 1.0 / n_learners)
        return np.array([fusion.alpha, 1.0 - fusion.alpha])
    w = np.asarray(fusion, dtype=np.float64)
    return w / w.sum()


def icot_zsl_run(learners, seen: LabeledDataset, pool: UnlabeledPool,
                 semantics: SemanticTable, space: ClassSpace, T: int,
                 policy: ExchangePolicy, fusion, seed: int, truths=None,
                 one_off: bool = False, warm_start: bool = False,
                 threads: int = 1) -> CotrainResult:
    """Transductive co-training over an unseen-class pool; labels span Y^U."""
    classes = sorted(space.unseen_labels)
    return _run_cotraining(learners, seen, pool, semantics, space, T, policy,
                           fusion, seed, predict_classes=classes, gzsl_mode=False,
                           truths=truths, one_off=one_off, warm_start=warm_start,
                           threads=threads)
