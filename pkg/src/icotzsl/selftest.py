"""Built-in sanity suite: gradient checks and metric oracles.

Each check recomputes its expected value through an independent route
(hand-unrolled recurrences, brute-force tallies, central differences) so a
passing selftest means the installed numerics are trustworthy, not just
self-consistent.
"""

from __future__ import annotations

import numpy as np

from . import nets, oodgate
from .cotrain import FusionWeights, apr, fuse_predictions, incremental_select
from .metrics import harmonic_mean, per_class_acc
from .numeric import grad_check, kl_to_uniform, softmax


def _mlp_param_dict(rng, n_in, n_hidden, n_out):
    params = nets.init_mlp(rng, n_in, n_hidden, n_out)
    return params, params.as_dict()


def _check_softmax() -> str:
    p = softmax(np.array([0.0, np.log(3.0)]))
    assert np.allclose(p, [0.25, 0.75], atol=1e-12)
    big = softmax(np.array([1000.0, 1000.0]))
    assert np.allclose(big, [0.5, 0.5])
    rng = np.random.default_rng(0)
    v = rng.normal(size=12)
    assert np.allclose(softmax(v), softmax(v + 17.0), atol=1e-12)
    return "analytic values and shift invariance"


def _check_kl() -> str:
    onehot = np.zeros(10)
    onehot[3] = 1.0
    assert abs(kl_to_uniform(onehot) - np.log(10)) < 1e-9
    assert abs(kl_to_uniform(np.full(7, 1 / 7))) < 1e-12
    return "one-hot = ln K, uniform = 0"


def _check_harmonic() -> str:
    assert abs(harmonic_mean(81.8, 84.8) - 83.3) < 0.05
    assert harmonic_mean(74.6, 74.6) == 74.6
    rng = np.random.default_rng(1)
    for _ in range(200):
        s, u = rng.uniform(0, 100, size=2)
        h = harmonic_mean(s, u)
        assert abs(h - 2 * s * u / (s + u)) < 1e-9
    return "paper rows and recomputation invariant"


def _check_incremental_sizes() -> str:
    rng = np.random.default_rng(2)
    for m in (1, 7, 23, 50):
        labels = rng.integers(0, 5, size=m)
        for big_t in range(1, 8):
            for t in range(1, big_t + 1):
                sel = incremental_select(labels, np.arange(m), t, big_t, seed=3)
                assert len(sel) == (m * t) // big_t
    return "floor(M*t/T) sizes on a grid"


def _check_fusion() -> str:
    rng = np.random.default_rng(3)
    classes = [0, 1, 2, 3, 4]
    for _ in range(100):
        pa = softmax(rng.normal(size=(4, 5)))
        pb = softmax(rng.normal(size=(4, 5)))
        alpha = float(rng.uniform())
        got = fuse_predictions([pa, pb], FusionWeights(alpha), classes)
        want = np.argmax(alpha * pa + (1 - alpha) * pb, axis=1)
        assert np.array_equal(got, want)
    return "matches brute-force weighted argmax"


def _check_apr() -> str:
    rng = np.random.default_rng(4)
    for _ in range(50):
        truths = rng.integers(0, 4, size=30)
        pa = rng.integers(0, 4, size=30)
        pb = rng.integers(0, 4, size=30)
        got = apr(pa, pb, truths, [0, 1, 2, 3])
        ratios = [np.mean(pa[truths == c] != pb[truths == c])
                  for c in range(4) if np.any(truths == c)]
        assert abs(got - np.mean(ratios)) < 1e-12
        assert abs(got - apr(pb, pa, truths, [0, 1, 2, 3])) < 1e-15
        assert 0.0 <= got <= 1.0
    return "per-class tally oracle, symmetry, bounds"


def _check_per_class_acc() -> str:
    preds = np.array([0] * 10 + [0] * 90)
    truths = np.array([0] * 10 + [1] * 90)
    _, mean = per_class_acc(preds, truths, [0, 1])
    assert mean == 50.0
    return "per-class weighting (50, not 10)"


def _check_gradients() -> str:
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(8, 6))
        y = rng.integers(0, 4, size=8)
        x_sim = rng.normal(size=(5, 6))
        attrs = rng.normal(size=(4, 3))

        params, pdict = _mlp_param_dict(rng, 6, 5, 4)

        def composite(pd):
            return oodgate.composite_loss_and_grads(nets.MlpParams(**pd), x, y, x_sim)

        worst = max(worst, grad_check(composite, pdict))

        params2, pdict2 = _mlp_param_dict(rng, 6, 5, 3)

        def semantic(pd):
            return oodgate.semantic_ce_loss_and_grads(nets.MlpParams(**pd), x, y, attrs)

        worst = max(worst, grad_check(semantic, pdict2))
    assert worst <= 1e-4, f"gradient check failed: {worst}"
    return f"composite and semantic losses, max rel err {worst:.2e}"


CHECKS = [
    ("softmax", _check_softmax),
    ("kl-to-uniform", _check_kl),
    ("harmonic-mean", _check_harmonic),
    ("incremental-select", _check_incremental_sizes),
    ("fuse-predictions", _check_fusion),
    ("apr", _check_apr),
    ("per-class-acc", _check_per_class_acc),
    ("gradients", _check_gradients),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            detail = fn()
            results.append((name, True, detail))
        except AssertionError as exc:
            results.append((name, False, str(exc)))
    return results
