"""Deterministic numerical substrate: losses, ridge solver, Adam, gradient checking.

All training-facing math runs in float64. Matrices are plain numpy arrays
(row-major, C order); probability vectors are 1-D arrays that sum to 1.
Everything here is a pure function of its inputs -- no hidden RNG, no
module-level state -- so values can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LOG_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis.

    Subtracts the per-row max before exponentiating so large logits
    (e.g. 1000) do not overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, label: int) -> float:
    """-ln p[label], with the probability clamped to a 1e-12 floor."""
    p = np.asarray(p, dtype=np.float64)
    if label < 0 or label >= p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(float(p[label]), LOG_FLOOR)))


def kl_to_uniform(p: np.ndarray) -> float:
    """KL(p || uniform) over K classes: sum p_i * ln(p_i * K), with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    if k == 0:
        raise ValueError("KL to uniform over zero classes is undefined")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] * k)))


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum p ln p (nats), with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Solve W = (X'X + lam*I)^-1 X'Y.

    Raises a LinAlgError naming the singular condition when lam == 0 and
    X'X is not invertible.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes {x.shape} vs {y.shape}")
    if lam < 0:
        raise ValueError("ridge penalty must be >= 0")
    d = x.shape[1]
    gram = x.T @ x + lam * np.eye(d)
    if lam == 0.0:
        # np.linalg.solve happily returns garbage for near-singular systems;
        # check conditioning explicitly so the caller gets a named error.
        if np.linalg.matrix_rank(gram) < d:
            raise np.linalg.LinAlgError(
                "X'X is singular at lam=0; pass a positive ridge penalty"
            )
    return np.linalg.solve(gram, x.T @ y)


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: np.ndarray, lr: float = 1e-3,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        z = np.zeros_like(np.asarray(params, dtype=np.float64))
        return cls(m=z.copy(), v=z.copy(), step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new params and new state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def grad_check(loss, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss(params)` must return `(value, grads)` where grads mirrors the
    params dict. Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|).
    """
    value, analytic = loss(params)
    if not np.isfinite(value):
        raise ValueError("loss is not finite at the given parameters")
    worst = 0.0
    for name, array in params.items():
        flat = array.reshape(-1)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss(params)
            flat[i] = orig - eps
            down, _ = loss(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("loss is not finite at a perturbed point")
            numeric = (up - down) / (2 * eps)
            err = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
