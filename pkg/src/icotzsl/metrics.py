"""Average per-class accuracy and the seen/unseen harmonic mean.

Accuracies are percentages in [0, 100]. The per-class mean is unweighted
over classes that actually have samples; classes with zero samples are
absent from the table, not counted as zero.
"""

from __future__ import annotations

import numpy as np


def per_class_acc(preds, truths, classes) -> tuple[dict[int, float], float]:
    """Per-class top-1 accuracy table and its unweighted mean, in percent."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError("predictions and truths must be parallel arrays")
    known = set(int(c) for c in classes)
    stray = set(int(t) for t in truths) - known
    if stray:
        raise ValueError(f"truth labels outside the class list: {sorted(stray)}")
    table: dict[int, float] = {}
    for c in classes:
        mask = truths == c
        total = int(mask.sum())
        if total == 0:
            continue
        table[int(c)] = 100.0 * float(np.sum(preds[mask] == c)) / total
    if not table:
        raise ValueError("no class in the list has any samples")
    return table, float(np.mean(list(table.values())))


def harmonic_mean(acc_seen: float, acc_unseen: float) -> float:
    """H = 2*S*U / (S+U); 0 when both accuracies are 0."""
    if acc_seen + acc_unseen == 0:
        return 0.0
    return 2.0 * acc_seen * acc_unseen / (acc_seen + acc_unseen)
