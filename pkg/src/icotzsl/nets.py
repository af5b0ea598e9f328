"""A minimal two-weight-layer feedforward net (input -> tanh hidden -> linear out).

This one shape covers every network in the framework: the semantic-to-visual
prototype predictor (attribute dim -> feature dim) and the three detector /
classifier heads (feature dim -> class or attribute dim). tanh is used for
the hidden activation so that central-difference gradient checks are reliable
at 1e-4 tolerance (piecewise-linear activations put kinks inside the
difference stencil).

Training helpers live with the modules that own the losses; this module only
knows forward, backward, and Adam plumbing over the four parameter arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import AdamState, adam_step

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def init_mlp(rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int) -> MlpParams:
    """Glorot-scaled Gaussian init, deterministic under the given generator."""
    s1 = np.sqrt(2.0 / (n_in + n_hidden))
    s2 = np.sqrt(2.0 / (n_hidden + n_out))
    return MlpParams(
        w1=rng.normal(0.0, s1, size=(n_in, n_hidden)),
        b1=np.zeros(n_hidden),
        w2=rng.normal(0.0, s2, size=(n_hidden, n_out)),
        b2=np.zeros(n_out),
    )


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ params.w1 + params.b1) @ params.w2 + params.b2


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass that also returns the hidden activations for backprop."""
    h = np.tanh(x @ params.w1 + params.b1)
    return h @ params.w2 + params.b2, h


def backward(params: MlpParams, x: np.ndarray, h: np.ndarray,
             d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(output)."""
    dw2 = h.T @ d_out
    db2 = d_out.sum(axis=0)
    dh = d_out @ params.w2.T
    dz = dh * (1.0 - h**2)
    dw1 = x.T @ dz
    db1 = dz.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


class MlpOptimizer:
    """Per-array Adam states for one MlpParams instance."""

    def __init__(self, params: MlpParams, lr: float):
        self.states = {name: AdamState.init(getattr(params, name), lr=lr)
                       for name in PARAM_NAMES}

    def apply(self, params: MlpParams, grads: dict[str, np.ndarray]) -> MlpParams:
        updated = {}
        for name in PARAM_NAMES:
            new_p, self.states[name] = adam_step(getattr(params, name), grads[name],
                                                 self.states[name])
            updated[name] = new_p
        return MlpParams(**updated)
