"""Censoring survival curves and inverse-probability-of-censoring averages.

Everything here accepts a matrix of multiplier weights with one row per
perturbation draw, so the point estimate (a single row of ones) and the
resampled estimates run through identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CensoringSupportExhausted, EstimationError

__all__ = [
    "StepSurvival",
    "km_censoring",
    "censoring_curves",
    "phi_hat",
    "phi_batch",
    "delta_hat",
]


@dataclass(frozen=True, eq=False)
class StepSurvival:
    """Right-continuous step function starting at 1.

    The value at ``u`` is the product of the factors at all jump times
    ``<= u``; ``values[k]`` is the level from ``jump_times[k]`` onwards.
    """

    jump_times: np.ndarray
    values: np.ndarray

    def __call__(self, u):
        return self.evaluate(u)

    def evaluate(self, u):
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self.jump_times, u, side="right")
        levels = np.concatenate(([1.0], self.values))
        out = levels[idx]
        return float(out) if out.ndim == 0 else out


def _as_weight_matrix(weights, n):
    if weights is None:
        return np.ones((1, n))
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    if w.shape[1] != n:
        raise ValueError(f"weights have {w.shape[1]} columns for {n} observations")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return w


def censoring_curves(times, deltas, weights=None):
    """Weighted product-limit estimate of the censoring survival function.

    Censoring (``delta == 0``) is the event of interest. The risk set at a
    censoring time ``u`` is every subject with ``X >= u``, so subjects whose
    primary event happens at ``u`` still count as at risk for censoring.

    Parameters
    ----------
    times, deltas : array_like, shape (n,)
    weights : array_like, shape (n,) or (D, n), optional
        Multiplier weights; ones when omitted.

    Returns
    -------
    jump_times : ndarray, shape (J,)
    values : ndarray, shape (D, J)
        Curve level from each jump time onwards, one row per weight row.
    """
    times = np.asarray(times, dtype=float)
    deltas = np.asarray(deltas, dtype=bool)
    if times.size == 0:
        raise EstimationError("EmptyInput: no observations for the censoring curve")
    if deltas.shape != times.shape:
        raise ValueError("times and deltas differ in length")
    w = _as_weight_matrix(weights, times.size)

    order = np.argsort(times, kind="stable")
    x = times[order]
    cens = ~deltas[order]
    w = w[:, order]

    uniq, first = np.unique(x, return_index=True)
    cens_count = np.add.reduceat(cens.astype(np.int64), first)
    keep = cens_count > 0
    if not keep.any():
        return np.empty(0), np.ones((w.shape[0], 0))

    n_at_or_after = x.size - first
    risk = np.cumsum(w[:, ::-1], axis=1)[:, ::-1][:, first]
    dc = np.add.reduceat(w * cens, first, axis=1)

    factor = 1.0 - dc[:, keep] / risk[:, keep]
    # whole remaining risk set censored: exactly zero, not rounding residue
    exhausted = cens_count[keep] == n_at_or_after[keep]
    factor[:, exhausted] = 0.0
    np.clip(factor, 0.0, 1.0, out=factor)
    return uniq[keep], np.cumprod(factor, axis=1)


def km_censoring(times, deltas, weights=None) -> StepSurvival:
    """Kaplan-Meier estimate of the censoring survival function.

    Weights act as frequency weights: risk sets and censoring counts
    become weight sums.
    """
    w = None if weights is None else np.asarray(weights, dtype=float).reshape(1, -1)
    jumps, values = censoring_curves(times, deltas, w)
    return StepSurvival(jumps, values[0])


def evaluate_curves(jump_times, values, u) -> np.ndarray:
    """Evaluate a stack of step curves at the scalar ``u``; shape (D,)."""
    idx = int(np.searchsorted(jump_times, u, side="right"))
    if idx == 0:
        return np.ones(values.shape[0])
    return values[:, idx - 1]


def phi_batch(times, weights, wc_at_u, u) -> np.ndarray:
    """Weighted IPW survival probability at ``u`` for each weight row.

    Computes ``sum(w * I(X > u)) / (sum(w) * Wc(u))``; rows where the
    censoring curve is zero at ``u`` come back as NaN.
    """
    w = np.atleast_2d(weights)
    surv = (np.asarray(times) > u).astype(float)
    # row-wise sums, not a matmul: a row's value must not depend on the batch size
    num = (w * surv).sum(axis=1)
    den = w.sum(axis=1) * wc_at_u
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out[den <= 0] = np.nan
    return out


def phi_hat(arm, u: float, wc: StepSurvival | None = None, weights=None) -> float:
    """IPW estimate of ``P(T > u)`` for one arm.

    Raises
    ------
    CensoringSupportExhausted
        If the censoring survival estimate is zero at ``u``.
    """
    if wc is None:
        wc = km_censoring(arm.time, arm.event, weights)
    level = wc.evaluate(u)
    if level <= 0:
        raise CensoringSupportExhausted(
            f"censoring survival estimate Wc({u:g}) = 0; u lies beyond the identifiable range", time=u
        )
    w = np.ones(arm.n) if weights is None else np.asarray(weights, dtype=float)
    return float(phi_batch(arm.time, w[None, :], np.array([level]), u)[0])


def delta_hat(data, weights_a=None, weights_b=None) -> float:
    """IPW difference in survival probabilities at the horizon ``t``."""
    return phi_hat(data.arm_a, data.t, weights=weights_a) - phi_hat(data.arm_b, data.t, weights=weights_b)
