"""Pluggable base ZSL learners: prototype, generative surrogate, and bilinear compat.

Three deliberately different architectures fill the Model A / B / C roles:

* PrototypeLearner: a tanh-hidden network maps class attributes to a visual
  prototype; samples are classified by distance to the predicted prototypes.
* GenerativeLearner: a ridge map predicts class means from attributes, a
  shared diagonal covariance models residuals, synthetic samples are drawn
  per target class, and a multinomial-logistic head is fit on synthetic plus
  real rows. This is a desk-scale, fully deterministic stand-in for a
  conditional-GAN feature generator; anything honouring BaseLearner can be
  plugged in instead.
* CompatLearner: a closed-form bilinear compatibility matrix fit against
  one-hot targets (no iterations).

Every learner trains from a fresh seeded init (bit-reproducible per seed)
and emits per-row probability vectors over any requested class list.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .datamodel import LabeledDataset, SemanticTable
from .numeric import AdamState, adam_step, ridge_fit, softmax

COV_FLOOR = 1e-6
DIVERGENCE_FACTOR = 10.0


class TrainingDiverged(RuntimeError):
    """Loss exceeded 10x its initial value during training."""


def stream_rng(seed: int, tag: str, iteration: int = 0) -> np.random.Generator:
    """Independent deterministic RNG stream per (seed, learner tag, iteration)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(tag.encode("utf-8")), iteration])
    )


def _check_semantics(semantics: SemanticTable, classes) -> None:
    missing = [c for c in classes if c not in semantics.vectors]
    if missing:
        raise KeyError(f"classes without semantic vectors: {missing}")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _class_index(labels: np.ndarray, classes: list[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[int(y)] for y in labels], dtype=np.int64)


# ---------------------------------------------------------------------------
# Model A: semantic -> visual prototype network


class PrototypeLearner:
    """Predicts a visual prototype per class from its attributes (Model A role)."""

    arch = "prototype"

    def __init__(self, hidden: int = 1600, tau: float = 1.0, epochs: int = 40,
                 lr: float = 1e-3, batch: int = 128, l2: float = 0.0,
                 normalize: bool = False, tag: str | None = None):
        if tau <= 0:
            raise ValueError("softmax temperature must be > 0")
        self.hidden = hidden
        self.tau = tau
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.l2 = l2
        self.normalize = normalize
        self.tag = tag or self.arch
        self.warm_start = False
        self.params: nets.MlpParams | None = None
        self.semantics: SemanticTable | None = None
        self.epoch_losses: list[float] = []

    def clone(self) -> "PrototypeLearner":
        out = PrototypeLearner(self.hidden, self.tau, self.epochs, self.lr,
                               self.batch, self.l2, self.normalize, tag=self.tag)
        out.warm_start = self.warm_start
        return out

    def train(self, data: LabeledDataset, semantics: SemanticTable,
              classes, seed: int) -> "PrototypeLearner":
        present = data.classes_present
        _check_semantics(semantics, present)
        x = data.features
        if self.normalize:
            x = _normalize_rows(x)
        attrs = semantics.matrix(present)
        y_idx = _class_index(data.labels, present)
        rng = stream_rng(seed, self.tag)

        d = x.shape[1]
        if (self.warm_start and self.params is not None
                and self.params.w1.shape == (attrs.shape[1], self.hidden)
                and self.params.w2.shape[1] == d):
            params = self.params.copy()
        else:
            params = nets.init_mlp(rng, attrs.shape[1], self.hidden, d)
        opt = nets.MlpOptimizer(params, lr=self.lr)
        n = x.shape[0]
        self.epoch_losses = []
        for _epoch in range(self.epochs):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch):
                idx = perm[start:start + self.batch]
                loss, grads = self._loss_and_grads(params, attrs, x[idx], y_idx[idx])
                params = opt.apply(params, grads)
                epoch_loss += loss * len(idx)
            epoch_loss /= n
            self.epoch_losses.append(epoch_loss)
            if epoch_loss > DIVERGENCE_FACTOR * max(self.epoch_losses[0], 1e-12):
                raise TrainingDiverged(
                    f"prototype loss {epoch_loss:.3g} exceeded 10x initial "
                    f"{self.epoch_losses[0]:.3g}"
                )
        self.params = params
        self.semantics = semantics
        return self

    def _loss_and_grads(self, params: nets.MlpParams, attrs: np.ndarray,
                        xb: np.ndarray, yb: np.ndarray):
        protos, h = nets.forward_cached(params, attrs)
        diff = protos[yb] - xb                      # batch x d
        loss = float(np.mean(np.sum(diff**2, axis=1)))
        d_protos = np.zeros_like(protos)
        np.add.at(d_protos, yb, (2.0 / xb.shape[0]) * diff)
        grads = nets.backward(params, attrs, h, d_protos)
        if self.l2 > 0:
            loss += self.l2 * (np.sum(params.w1**2) + np.sum(params.w2**2))
            grads["w1"] += 2 * self.l2 * params.w1
            grads["w2"] += 2 * self.l2 * params.w2
        return loss, grads

    def prototypes(self, classes) -> np.ndarray:
        if self.params is None:
            raise RuntimeError("learner is not trained")
        attrs = self.semantics.matrix(classes)
        return nets.forward(self.params, attrs)

    def predict_proba(self, x: np.ndarray, classes) -> np.ndarray:
        classes = list(classes)
        if not classes:
            raise ValueError("class list is empty")
        _check_semantics(self.semantics, classes)
        if self.normalize:
            x = _normalize_rows(x)
        protos = self.prototypes(classes)
        d2 = (
            np.sum(x**2, axis=1, keepdims=True)
            - 2.0 * x @ protos.T
            + np.sum(protos**2, axis=1)
        )
        return softmax(-d2 / self.tau)


# ---------------------------------------------------------------------------
# Model B surrogate: conditional Gaussian feature synthesis + softmax head


class GenerativeLearner:
    """Synthesizes class-conditional features, then fits a softmax classifier."""

    arch = "generative"

    def __init__(self, lam: float = 0.1, n_syn: int = 100, epochs: int = 30,
                 lr: float = 0.01, batch: int = 256, normalize: bool = False,
                 tag: str | None = None):
        if n_syn < 1:
            raise ValueError("n_syn must be >= 1")
        self.lam = lam
        self.n_syn = n_syn
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.normalize = normalize
        self.tag = tag or self.arch
        self.warm_start = False
        self.mean_map: np.ndarray | None = None   # q x d ridge map
        self.res_var: np.ndarray | None = None    # d, diagonal residual variance
        self.clf_w: np.ndarray | None = None      # d x K
        self.clf_b: np.ndarray | None = None      # K
        self.classes: list[int] | None = None
        self.epoch_losses: list[float] = []

    def clone(self) -> "GenerativeLearner":
        out = GenerativeLearner(self.lam, self.n_syn, self.epochs, self.lr,
                                self.batch, self.normalize, tag=self.tag)
        out.warm_start = self.warm_start
        return out

    def train(self, data: LabeledDataset, semantics: SemanticTable,
              classes, seed: int) -> "GenerativeLearner":
        classes = list(classes)
        _check_semantics(semantics, classes)
        x = data.features
        if self.normalize:
            x = _normalize_rows(x)
        rng = stream_rng(seed, self.tag)

        present = data.classes_present
        means = {c: x[data.labels == c].mean(axis=0) for c in present}
        attr_rows = semantics.matrix(present)
        mean_rows = np.stack([means[c] for c in present])
        self.mean_map = ridge_fit(attr_rows, mean_rows, self.lam)

        residuals = x - np.stack([means[int(y)] for y in data.labels])
        var = residuals.var(axis=0)
        if np.all(var < COV_FLOOR):
            warnings.warn("residual covariance degenerate; proceeding with floor",
                          RuntimeWarning, stacklevel=2)
        self.res_var = np.maximum(var, COV_FLOOR)

        # synthesize per target class, conditioned on its attributes
        std = np.sqrt(self.res_var)
        syn_feats, syn_labels = [], []
        for c in classes:
            mu = np.asarray(semantics.vectors[c], dtype=np.float64) @ self.mean_map
            syn_feats.append(mu + std * rng.normal(size=(self.n_syn, x.shape[1])))
            syn_labels.extend([c] * self.n_syn)
        train_x = np.concatenate(syn_feats, axis=0)
        train_y = np.array(syn_labels, dtype=np.int64)

        in_space = np.isin(data.labels, classes)
        if np.any(in_space):
            train_x = np.concatenate([train_x, x[in_space]], axis=0)
            train_y = np.concatenate([train_y, data.labels[in_space]])

        self.classes = classes
        self.clf_w, self.clf_b = self._fit_softmax(train_x, train_y, classes, rng)
        return self

    def _fit_softmax(self, x: np.ndarray, y: np.ndarray, classes: list[int],
                     rng: np.random.Generator):
        k, d, n = len(classes), x.shape[1], x.shape[0]
        y_idx = _class_index(y, classes)
        if self.warm_start and self.clf_w is not None and self.clf_w.shape == (d, k):
            w, b = self.clf_w.copy(), self.clf_b.copy()
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, k))
            b = np.zeros(k)
        st_w = AdamState.init(w, lr=self.lr)
        st_b = AdamState.init(b, lr=self.lr)
        self.epoch_losses = []
        for _epoch in range(self.epochs):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch):
                idx = perm[start:start + self.batch]
                xb, yb = x[idx], y_idx[idx]
                p = softmax(xb @ w + b)
                eps_p = np.maximum(p[np.arange(len(idx)), yb], 1e-12)
                loss = float(-np.mean(np.log(eps_p)))
                dz = p
                dz[np.arange(len(idx)), yb] -= 1.0
                dz /= len(idx)
                w, st_w = adam_step(w, xb.T @ dz, st_w)
                b, st_b = adam_step(b, dz.sum(axis=0), st_b)
                epoch_loss += loss * len(idx)
            epoch_loss /= n
            self.epoch_losses.append(epoch_loss)
            if epoch_loss > DIVERGENCE_FACTOR * max(self.epoch_losses[0], 1e-12):
                raise TrainingDiverged(
                    f"classifier loss {epoch_loss:.3g} exceeded 10x initial"
                )
        return w, b

    def predict_proba(self, x: np.ndarray, classes) -> np.ndarray:
        classes = list(classes)
        if not classes:
            raise ValueError("class list is empty")
        if self.clf_w is None:
            raise RuntimeError("learner is not trained")
        unknown = [c for c in classes if c not in self.classes]
        if unknown:
            raise KeyError(f"classifier was not trained for classes {unknown}")
        if self.normalize:
            x = _normalize_rows(x)
        cols = np.array([self.classes.index(c) for c in classes])
        logits = x @ self.clf_w[:, cols] + self.clf_b[cols]
        return softmax(logits)


# ---------------------------------------------------------------------------
# Model C: closed-form bilinear compatibility


class CompatLearner:
    """Bilinear compatibility score x' V e_y, fit in closed form (Model C role)."""

    arch = "compat"

    def __init__(self, lam: float = 0.1, normalize: bool = False,
                 tag: str | None = None):
        self.lam = lam
        self.normalize = normalize
        self.tag = tag or self.arch
        self.warm_start = False  # closed form; kept for contract symmetry
        self.v: np.ndarray | None = None  # d x q
        self.semantics: SemanticTable | None = None

    def clone(self) -> "CompatLearner":
        out = CompatLearner(self.lam, self.normalize, tag=self.tag)
        out.warm_start = self.warm_start
        return out

    def train(self, data: LabeledDataset, semantics: SemanticTable,
              classes, seed: int = 0) -> "CompatLearner":
        present = data.classes_present
        _check_semantics(semantics, present)
        x = data.features
        if self.normalize:
            x = _normalize_rows(x)
        attrs = semantics.matrix(present)                      # K x q
        y_idx = _class_index(data.labels, present)
        onehot = np.zeros((x.shape[0], len(present)))
        onehot[np.arange(x.shape[0]), y_idx] = 1.0

        # minimize ||X V E' - Y||_F^2 + lam ||V||_F^2, i.e.
        # (X'X) V (E'E) + lam V = X'Y E, solved in the eigenbases of the
        # two Gram matrices.
        gx = x.T @ x
        ge = attrs.T @ attrs
        evx, ux = np.linalg.eigh(gx)
        eve, ue = np.linalg.eigh(ge)
        denom = np.outer(evx, eve) + self.lam
        if np.any(np.abs(denom) < 1e-12):
            raise np.linalg.LinAlgError(
                "singular compatibility system at lam=0; pass a positive ridge penalty"
            )
        b = ux.T @ (x.T @ onehot @ attrs) @ ue
        self.v = ux @ (b / denom) @ ue.T
        self.semantics = semantics
        return self

    def predict_proba(self, x: np.ndarray, classes) -> np.ndarray:
        classes = list(classes)
        if not classes:
            raise ValueError("class list is empty")
        if self.v is None:
            raise RuntimeError("learner is not trained")
        _check_semantics(self.semantics, classes)
        if self.normalize:
            x = _normalize_rows(x)
        attrs = self.semantics.matrix(classes)
        scores = x @ self.v @ attrs.T
        return softmax(scores)


# ---------------------------------------------------------------------------
# uniform dispatch + spec-surface wrappers


def predict(learner, x: np.ndarray, classes) -> np.ndarray:
    """Uniform prediction dispatch over any BaseLearner."""
    return learner.predict_proba(x, classes)


def train_prototype(data, semantics, classes, seed, epochs=40, lr=1e-3,
                    batch=128, hidden=1600, tau=1.0, l2=0.0) -> PrototypeLearner:
    learner = PrototypeLearner(hidden=hidden, tau=tau, epochs=epochs, lr=lr,
                               batch=batch, l2=l2)
    missing = [c for c in classes if c not in semantics.vectors]
    if missing:
        raise KeyError(f"classes without semantic vectors: {missing}")
    for c in classes:
        if int(np.sum(data.labels == c)) < 1:
            raise ValueError(f"class {c} has no training rows")
    return learner.train(data, semantics, classes, seed)


def predict_prototype(model: PrototypeLearner, x, classes) -> np.ndarray:
    return model.predict_proba(x, classes)


def train_generative(data, semantics, classes, seed, lam=0.1, n_syn=100,
                     epochs=30, lr=0.01, batch=256) -> GenerativeLearner:
    learner = GenerativeLearner(lam=lam, n_syn=n_syn, epochs=epochs, lr=lr, batch=batch)
    return learner.train(data, semantics, classes, seed)


def train_compat(data, semantics, classes, lam=0.1) -> CompatLearner:
    return CompatLearner(lam=lam).train(data, semantics, classes, seed=0)


def make_learner(arch: str, **kwargs):
    table = {
        "prototype": PrototypeLearner,
        "generative": GenerativeLearner,
        "compat": CompatLearner,
    }
    if arch not in table:
        raise ValueError(f"unknown learner architecture {arch!r}")
    return table[arch](**kwargs)


# ---------------------------------------------------------------------------
# checkpoints: JSON header + float32 parameter blob


def _learner_arrays(learner) -> dict[str, np.ndarray]:
    if isinstance(learner, PrototypeLearner):
        p = learner.params
        return {"w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2}
    if isinstance(learner, GenerativeLearner):
        return {"mean_map": learner.mean_map, "res_var": learner.res_var,
                "clf_w": learner.clf_w, "clf_b": learner.clf_b}
    if isinstance(learner, CompatLearner):
        return {"v": learner.v}
    raise TypeError(f"cannot checkpoint {type(learner).__name__}")


def _learner_hparams(learner) -> dict:
    skip = {"params", "semantics", "epoch_losses", "mean_map", "res_var",
            "clf_w", "clf_b", "classes", "v", "warm_start"}
    return {k: v for k, v in vars(learner).items() if k not in skip}


def save_checkpoint(learner, path, seed: int = 0) -> None:
    arrays = _learner_arrays(learner)
    if any(a is None for a in arrays.values()):
        raise RuntimeError("learner is not trained; nothing to checkpoint")
    header = {
        "arch": learner.arch,
        "seed": seed,
        "hyperparams": _learner_hparams(learner),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "classes": getattr(learner, "classes", None),
    }
    blob = np.concatenate([a.reshape(-1) for a in arrays.values()]).astype(np.float32)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(b"ICOTFEAT")
        f.write(struct.pack("<III", 1, blob.shape[0], 1))
        f.write(blob.tobytes(order="C"))


def load_checkpoint(path, semantics: SemanticTable | None = None):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        magic = f.read(8)
        if magic != b"ICOTFEAT":
            raise ValueError(f"{path}: malformed checkpoint blob (magic {magic!r})")
        _version, total, _one = struct.unpack("<III", f.read(12))
        blob = np.frombuffer(f.read(4 * total), dtype="<f4").astype(np.float64)

    learner = make_learner(header["arch"], **header["hyperparams"])
    arrays = {}
    offset = 0
    for name, shape in header["shapes"].items():
        size = int(np.prod(shape))
        arrays[name] = blob[offset:offset + size].reshape(shape)
        offset += size
    if isinstance(learner, PrototypeLearner):
        learner.params = nets.MlpParams(**arrays)
        learner.semantics = semantics
    elif isinstance(learner, GenerativeLearner):
        learner.mean_map = arrays["mean_map"]
        learner.res_var = arrays["res_var"]
        learner.clf_w = arrays["clf_w"]
        learner.clf_b = arrays["clf_b"]
        learner.classes = header["classes"]
    elif isinstance(learner, CompatLearner):
        learner.v = arrays["v"]
        learner.semantics = semantics
    return learner
