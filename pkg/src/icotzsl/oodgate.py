"""Out-of-distribution gating for GZSL.

A small feedforward classifier over the seen classes is scored by the
Shannon entropy of its softmax output (higher = more likely unseen). Three
ways to obtain the simulated unseen set used to sharpen it:

* semantic: train a classifier whose output is dotted against the seen-class
  attribute vectors, then re-project over all classes and keep pool rows
  whose argmax lands on an unseen class;
* iter: train a plain seen-class detector and keep the L least-confident
  pool rows;
* (baseline) no simulation at all, scoring by 1 - max softmax probability.

The sharpened detector minimizes cross-entropy on seen batches plus
KL-to-uniform on simulated-unseen batches, weighted 1:1.

Thresholds are calibrated on seen-class scores: for a false-negative-rate
target f, the threshold is the smallest score value such that at most a
fraction f of seen samples score above it. TNR is then the fraction of
unseen samples above the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .basemodels import DIVERGENCE_FACTOR, TrainingDiverged, stream_rng
from .datamodel import ClassSpace, LabeledDataset, SemanticTable, UnlabeledPool
from .numeric import softmax

DEFAULT_FNR_GRID = (0.01, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15)
DEFAULT_HIDDEN = 1600
DEFAULT_ITER_FRACTION = 0.30


@dataclass(frozen=True)
class SimulatedUnseenSet:
    pool_positions: np.ndarray
    method: str  # "semantic" | "iter"

    def __post_init__(self):
        pos = np.asarray(self.pool_positions)
        if len(np.unique(pos)) != pos.shape[0]:
            raise ValueError("simulated-unseen positions must be unique")

    def __len__(self) -> int:
        return self.pool_positions.shape[0]


@dataclass(frozen=True)
class OodPoint:
    fnr_target: float
    threshold: float
    tnr: float


@dataclass(frozen=True)
class OodCurve:
    points: tuple[OodPoint, ...]

    def __post_init__(self):
        targets = [p.fnr_target for p in self.points]
        if any(b <= a for a, b in zip(targets, targets[1:])):
            raise ValueError("FNR targets must be strictly increasing")
        if any(not 0.0 <= p.tnr <= 1.0 for p in self.points):
            raise ValueError("TNR values must lie in [0, 1]")

    @property
    def average_tnr(self) -> float:
        return float(np.mean([p.tnr for p in self.points]))

    def to_csv(self) -> str:
        lines = ["fnr_target,threshold,tnr"]
        lines += [f"{p.fnr_target},{p.threshold},{p.tnr}" for p in self.points]
        return "\n".join(lines) + "\n"


class OodDetector:
    """Feedforward seen-class head scored by prediction entropy."""

    def __init__(self, params: nets.MlpParams, classes: list[int], hidden: int):
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        self.params = params
        self.classes = list(classes)
        self.hidden = hidden
        self.threshold: float | None = None
        self.entropy_gap: float | None = None

    def logits(self, x: np.ndarray) -> np.ndarray:
        return nets.forward(self.params, x)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def scores(self, x: np.ndarray) -> np.ndarray:
        return entropy_scores(self.predict_proba(x))

    def predict_class(self, x: np.ndarray) -> np.ndarray:
        idx = np.argmax(self.logits(x), axis=1)
        return np.asarray(self.classes, dtype=np.int64)[idx]


def entropy_scores(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats (0 ln 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    return -terms.sum(axis=-1)


def ood_score(detector: OodDetector, x: np.ndarray) -> float | np.ndarray:
    """Entropy of the detector's softmax output; higher = more OOD."""
    single = np.asarray(x).ndim == 1
    scores = detector.scores(np.atleast_2d(x))
    return float(scores[0]) if single else scores


def max_softmax_score(probs: np.ndarray) -> float | np.ndarray:
    """1 - max softmax probability, oriented so higher = more OOD."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return float(1.0 - p.max())
    return 1.0 - p.max(axis=-1)


# ---------------------------------------------------------------------------
# loss functions (analytic gradients, shared by training and the grad checker)


def ce_loss_and_grads(params: nets.MlpParams, x: np.ndarray, y_idx: np.ndarray):
    """Mean cross-entropy of softmax(net(x)) against integer targets."""
    z, h = nets.forward_cached(params, x)
    p = softmax(z)
    n = x.shape[0]
    picked = np.maximum(p[np.arange(n), y_idx], 1e-12)
    loss = float(-np.mean(np.log(picked)))
    dz = p.copy()
    dz[np.arange(n), y_idx] -= 1.0
    dz /= n
    return loss, nets.backward(params, x, h, dz)


def kl_uniform_loss_and_grads(params: nets.MlpParams, x: np.ndarray):
    """Mean KL(softmax(net(x)) || uniform)."""
    z, h = nets.forward_cached(params, x)
    p = softmax(z)
    k = p.shape[1]
    logs = np.log(np.maximum(p, 1e-300) * k)
    per_row = np.sum(np.where(p > 0, p * logs, 0.0), axis=1)
    loss = float(np.mean(per_row))
    dz = p * (logs - per_row[:, None]) / x.shape[0]
    return loss, nets.backward(params, x, h, dz)


def composite_loss_and_grads(params: nets.MlpParams, x_seen: np.ndarray,
                             y_idx: np.ndarray, x_sim: np.ndarray):
    """Seen-class cross-entropy plus KL-to-uniform on simulated rows (1:1)."""
    ce, g_ce = ce_loss_and_grads(params, x_seen, y_idx)
    kl, g_kl = kl_uniform_loss_and_grads(params, x_sim)
    grads = {k: g_ce[k] + g_kl[k] for k in g_ce}
    return ce + kl, grads


def semantic_ce_loss_and_grads(params: nets.MlpParams, x: np.ndarray,
                               y_idx: np.ndarray, seen_attrs: np.ndarray):
    """Cross-entropy of softmax(net(x) . seen attribute vectors)."""
    a, h = nets.forward_cached(params, x)
    z = a @ seen_attrs.T
    p = softmax(z)
    n = x.shape[0]
    picked = np.maximum(p[np.arange(n), y_idx], 1e-12)
    loss = float(-np.mean(np.log(picked)))
    dz = p.copy()
    dz[np.arange(n), y_idx] -= 1.0
    dz /= n
    return loss, nets.backward(params, x, h, dz @ seen_attrs)


# ---------------------------------------------------------------------------
# training loops


def _run_epochs(params, opt, step_fn, n: int, batch: int, epochs: int,
                rng: np.random.Generator, what: str):
    losses = []
    for _epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            loss, grads, params = step_fn(params, idx, opt)
            epoch_loss += loss * len(idx)
        epoch_loss /= n
        losses.append(epoch_loss)
        if epoch_loss > DIVERGENCE_FACTOR * max(losses[0], 1e-12):
            raise TrainingDiverged(f"{what} loss {epoch_loss:.3g} exceeded 10x initial")
    return params, losses


def train_base_detector(seen: LabeledDataset, seed: int, epochs: int = 50,
                        lr: float = 1e-3, batch: int = 256,
                        hidden: int = DEFAULT_HIDDEN) -> OodDetector:
    """Plain seen-class classifier trained with cross-entropy (the baseline)."""
    if len(seen) < 1:
        raise ValueError("seen dataset is empty")
    classes = seen.classes_present
    lookup = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([lookup[int(y)] for y in seen.labels], dtype=np.int64)
    x = seen.features
    rng = stream_rng(seed, "ood-base")
    params = nets.init_mlp(rng, x.shape[1], hidden, len(classes))
    opt = nets.MlpOptimizer(params, lr=lr)

    def step(params, idx, opt):
        loss, grads = ce_loss_and_grads(params, x[idx], y_idx[idx])
        return loss, grads, opt.apply(params, grads)

    params, _ = _run_epochs(params, opt, step, x.shape[0], batch, epochs, rng,
                            "base detector")
    return OodDetector(params, classes, hidden)


def train_semantic_classifier(seen: LabeledDataset, semantics: SemanticTable,
                              space: ClassSpace, seed: int, epochs: int = 50,
                              lr: float = 1e-3, batch: int = 256,
                              hidden: int = DEFAULT_HIDDEN) -> tuple[nets.MlpParams, list[int]]:
    """Fit the attribute-space classifier used for semantic-guided selection."""
    seen_classes = sorted(space.seen_labels)
    if not semantics.covers(space.all_labels):
        raise KeyError("semantic table must cover both seen and unseen classes")
    attrs = semantics.matrix(seen_classes)
    lookup = {c: i for i, c in enumerate(seen_classes)}
    y_idx = np.array([lookup[int(y)] for y in seen.labels], dtype=np.int64)
    x = seen.features
    rng = stream_rng(seed, "ood-semantic")
    params = nets.init_mlp(rng, x.shape[1], hidden, attrs.shape[1])
    opt = nets.MlpOptimizer(params, lr=lr)

    def step(params, idx, opt):
        loss, grads = semantic_ce_loss_and_grads(params, x[idx], y_idx[idx], attrs)
        return loss, grads, opt.apply(params, grads)

    params, _ = _run_epochs(params, opt, step, x.shape[0], batch, epochs, rng,
                            "semantic classifier")
    return params, seen_classes


def select_with_semantic_classifier(fsc_params: nets.MlpParams, pool: UnlabeledPool,
                                    semantics: SemanticTable, space: ClassSpace,
                                    margin: float = 0.0) -> SimulatedUnseenSet:
    """Pool rows whose re-projected argmax over all classes lands on an unseen class.

    Deterministic given the trained classifier. `margin` > 0 additionally
    requires the best unseen logit to beat the best seen logit by that much.
    """
    emb = nets.forward(fsc_params, pool.features)
    seen_logits = emb @ semantics.matrix(sorted(space.seen_labels)).T
    unseen_logits = emb @ semantics.matrix(sorted(space.unseen_labels)).T
    keep = unseen_logits.max(axis=1) > seen_logits.max(axis=1) + margin
    return SimulatedUnseenSet(np.flatnonzero(keep).astype(np.int64), method="semantic")


def select_simulated_semantic(seen: LabeledDataset, pool: UnlabeledPool,
                              semantics: SemanticTable, space: ClassSpace,
                              seed: int, epochs: int = 50, lr: float = 1e-3,
                              batch: int = 256, hidden: int = DEFAULT_HIDDEN,
                              margin: float = 0.0) -> SimulatedUnseenSet:
    params, _ = train_semantic_classifier(seen, semantics, space, seed,
                                          epochs=epochs, lr=lr, batch=batch,
                                          hidden=hidden)
    return select_with_semantic_classifier(params, pool, semantics, space, margin)


def select_simulated_iter(detector: OodDetector, pool: UnlabeledPool,
                          L: int) -> SimulatedUnseenSet:
    """The L pool rows with the lowest max-softmax confidence (ties by row)."""
    if not 1 <= L <= len(pool):
        raise ValueError(f"L={L} outside 1..{len(pool)}")
    confidences = detector.predict_proba(pool.features).max(axis=1)
    order = np.argsort(confidences, kind="stable")
    return SimulatedUnseenSet(np.sort(order[:L]).astype(np.int64), method="iter")


def train_ood_detector(seen: LabeledDataset, simulated: SimulatedUnseenSet,
                       pool: UnlabeledPool, seed: int, epochs: int = 50,
                       lr: float = 1e-3, batch: int = 256,
                       hidden: int = DEFAULT_HIDDEN) -> OodDetector:
    """Sharpen the detector: cross-entropy on seen, KL-to-uniform on simulated."""
    if len(simulated) == 0:
        raise ValueError(
            "simulated unseen set is empty; fall back to the max-softmax baseline"
        )
    classes = seen.classes_present
    lookup = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([lookup[int(y)] for y in seen.labels], dtype=np.int64)
    x = seen.features
    x_sim = pool.features[np.asarray(simulated.pool_positions, dtype=np.int64)]
    rng = stream_rng(seed, "ood-detector")
    params = nets.init_mlp(rng, x.shape[1], hidden, len(classes))
    opt = nets.MlpOptimizer(params, lr=lr)

    n_sim = x_sim.shape[0]
    sim_order = rng.permutation(n_sim)
    sim_cursor = 0

    def next_sim_batch(size: int) -> np.ndarray:
        nonlocal sim_order, sim_cursor
        take = []
        need = size
        while need > 0:
            if sim_cursor == n_sim:
                sim_order = rng.permutation(n_sim)
                sim_cursor = 0
            grab = min(need, n_sim - sim_cursor)
            take.append(sim_order[sim_cursor:sim_cursor + grab])
            sim_cursor += grab
            need -= grab
        return np.concatenate(take)

    def step(params, idx, opt):
        sim_idx = next_sim_batch(min(batch, n_sim))
        loss, grads = composite_loss_and_grads(params, x[idx], y_idx[idx],
                                               x_sim[sim_idx])
        return loss, grads, opt.apply(params, grads)

    params, _ = _run_epochs(params, opt, step, x.shape[0], batch, epochs, rng,
                            "OOD detector")
    detector = OodDetector(params, classes, hidden)
    detector.entropy_gap = float(np.mean(detector.scores(x_sim))
                                 - np.mean(detector.scores(x)))
    return detector


# ---------------------------------------------------------------------------
# evaluation


def calibrate_threshold(scores_seen, fnr_target: float) -> float:
    """Smallest score with at most fnr_target of seen samples scoring above it."""
    s = np.sort(np.asarray(scores_seen, dtype=np.float64))
    n = s.shape[0]
    if n == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 < fnr_target < 1.0:
        raise ValueError("FNR target must lie in (0, 1)")
    allowed = int(np.floor(fnr_target * n))
    return float(s[n - allowed - 1])


def tnr_at_fnr(scores_seen, scores_unseen,
               fnr_targets=DEFAULT_FNR_GRID) -> OodCurve:
    """TNR on unseen scores at thresholds calibrated per FNR target on seen scores."""
    seen = np.asarray(scores_seen, dtype=np.float64)
    unseen = np.asarray(scores_unseen, dtype=np.float64)
    if seen.size == 0 or unseen.size == 0:
        raise ValueError("score lists must be non-empty")
    points = []
    for f in fnr_targets:
        theta = calibrate_threshold(seen, f)
        tnr = float(np.mean(unseen > theta))
        points.append(OodPoint(fnr_target=float(f), threshold=theta, tnr=tnr))
    return OodCurve(tuple(points))
