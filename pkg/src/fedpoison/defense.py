"""Robust aggregation rules and the dynamic cosine-similarity filter.

Every rule is a pure function of the stacked update matrix (rows = clients).
`apply_defense` wraps them in a uniform AggregationReport for the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class DefenseError(Exception):
    """Raised when a rule cannot produce an aggregate (bad n, all filtered...)."""


@dataclass
class AggregationReport:
    aggregate: np.ndarray
    accepted: np.ndarray  # bool mask per submitted update
    scores: np.ndarray  # distance score or cosine similarity per update
    threshold: Optional[float] = None
    converged: bool = True
    rule: str = ""


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; defined as -1 if either vector has zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return -1.0
    return float(a @ b / (na * nb))


def fedavg(updates: np.ndarray, weights: np.ndarray) -> np.ndarray:
    updates = np.asarray(updates, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(updates) < 1:
        raise DefenseError("no updates")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise DefenseError("weights must be nonnegative with positive sum")
    return weights @ updates / weights.sum()


def krum_scores(updates: np.ndarray, f: int) -> np.ndarray:
    n = len(updates)
    if n < f + 3:
        raise DefenseError(f"krum needs n >= f+3 (got n={n}, f={f})")
    d2 = np.sum((updates[:, None, :] - updates[None, :, :]) ** 2, axis=2)
    k = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(d2[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def krum(updates: np.ndarray, f: int) -> tuple[int, np.ndarray]:
    """Index with the smallest sum of squared distances to its n-f-2 nearest
    neighbors; ties break to the lowest index."""
    scores = krum_scores(np.asarray(updates, dtype=float), f)
    return int(np.argmin(scores)), scores


def multi_krum(updates: np.ndarray, f: int, m: int) -> tuple[list[int], np.ndarray]:
    updates = np.asarray(updates, dtype=float)
    scores = krum_scores(updates, f)
    n = len(updates)
    if not 1 <= m <= n - f - 2:
        raise DefenseError(f"multi-krum needs 1 <= m <= n-f-2 (got m={m}, n={n}, f={f})")
    selected = sorted(np.argsort(scores, kind="stable")[:m].tolist())
    return selected, updates[selected].mean(axis=0)


def trimmed_mean(updates: np.ndarray, beta: int) -> np.ndarray:
    """Per coordinate, drop the beta smallest and beta largest, average the rest."""
    updates = np.asarray(updates, dtype=float)
    n = len(updates)
    if n <= 2 * beta:
        raise DefenseError(f"trimmed mean needs n > 2*beta (got n={n}, beta={beta})")
    s = np.sort(updates, axis=0)
    return s[beta : n - beta].mean(axis=0)


def coord_median(updates: np.ndarray) -> np.ndarray:
    updates = np.asarray(updates, dtype=float)
    if len(updates) < 1:
        raise DefenseError("no updates")
    return np.median(updates, axis=0)


def geometric_median(
    updates: np.ndarray, tol: float = 1e-8, max_iter: int = 200
) -> tuple[np.ndarray, bool]:
    """Weiszfeld iteration from the coordinate mean.

    Points coinciding with the current iterate get their distance clamped at
    1e-12. Returns (point, converged); hitting max_iter is a valid return.
    """
    updates = np.asarray(updates, dtype=float)
    if len(updates) < 1:
        raise DefenseError("no updates")
    if tol <= 0:
        raise DefenseError("tol must be > 0")
    x = updates.mean(axis=0)
    for _ in range(max_iter):
        dists = np.linalg.norm(updates - x, axis=1)
        w = 1.0 / np.maximum(dists, 1e-12)
        x_new = w @ updates / w.sum()
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step < tol:
            return x, True
    return x, False


def cosine_threshold_filter(
    updates: np.ndarray, reference: np.ndarray, lam: float
) -> AggregationReport:
    """Accept updates whose cosine to the reference clears mean - lam*std.

    Std is the population standard deviation; zero-norm updates score -1.
    Accepted updates are averaged with equal weights.
    """
    updates = np.asarray(updates, dtype=float)
    if len(updates) < 2:
        raise DefenseError("cosine filter needs n >= 2")
    if np.linalg.norm(reference) == 0.0:
        raise DefenseError("reference direction has zero norm")
    scores = np.array([cosine(u, reference) for u in updates])
    tau = float(scores.mean() - lam * scores.std())
    accepted = scores >= tau
    if not accepted.any():
        raise DefenseError("no updates survive filter")
    return AggregationReport(
        aggregate=updates[accepted].mean(axis=0),
        accepted=accepted,
        scores=scores,
        threshold=tau,
        rule="cosine_filter",
    )


DEFENSES = (
    "fedavg",
    "krum",
    "multi_krum",
    "trimmed_mean",
    "coord_median",
    "geometric_median",
    "cosine_filter",
)


@dataclass
class DefenseParams:
    f: int = 1
    m: int = 2
    beta: int = 1
    lambda_: float = 1.5
    gm_tol: float = 1e-8
    gm_max_iter: int = 200


def apply_defense(
    name: str,
    updates: np.ndarray,
    weights: np.ndarray,
    reference: np.ndarray,
    params: DefenseParams,
) -> AggregationReport:
    """Dispatch to a rule and normalize its output into an AggregationReport.

    For non-cosine rules the scores column still carries per-update cosine to
    the reference so every run logs comparable similarity traces.
    """
    updates = np.asarray(updates, dtype=float)
    n = len(updates)
    cos_scores = np.array([cosine(u, reference) for u in updates])
    if name == "fedavg":
        agg = fedavg(updates, weights)
        return AggregationReport(agg, np.ones(n, bool), cos_scores, rule=name)
    if name == "krum":
        idx, scores = krum(updates, params.f)
        mask = np.zeros(n, bool)
        mask[idx] = True
        return AggregationReport(updates[idx].copy(), mask, scores, rule=name)
    if name == "multi_krum":
        sel, agg = multi_krum(updates, params.f, params.m)
        mask = np.zeros(n, bool)
        mask[sel] = True
        return AggregationReport(agg, mask, krum_scores(updates, params.f), rule=name)
    if name == "trimmed_mean":
        agg = trimmed_mean(updates, params.beta)
        return AggregationReport(agg, np.ones(n, bool), cos_scores, rule=name)
    if name == "coord_median":
        agg = coord_median(updates)
        return AggregationReport(agg, np.ones(n, bool), cos_scores, rule=name)
    if name == "geometric_median":
        agg, conv = geometric_median(updates, params.gm_tol, params.gm_max_iter)
        return AggregationReport(agg, np.ones(n, bool), cos_scores, converged=conv, rule=name)
    if name == "cosine_filter":
        return cosine_threshold_filter(updates, reference, params.lambda_)
    raise DefenseError(f"unknown defense {name!r}")
