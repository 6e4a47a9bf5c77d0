"""Kernel-smoothed Nelson-Aalen estimation of conditional survival.

Estimates ``P(T > t | S = s, T > t0)`` in arm A by localising the
Nelson-Aalen increments of the subjects still under observation at the
landmark with kernel weights in the (transformed) surrogate value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSurrogate, EmptyRiskSet, SupportOverlapWarning

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

__all__ = [
    "KernelSpec",
    "ConditionalSurvivalFit",
    "resolve_bandwidth",
    "fit_conditional_survival",
    "lambda_hat",
    "psi_hat",
]

GUARD_EPS = 1e-10
_CHUNK_ELEMENTS = 4_000_000


def _gaussian(u):
    return np.exp(-0.5 * u * u)


def _epanechnikov(u):
    return np.clip(1.0 - u * u, 0.0, None)


# normalising constants cancel in every ratio that uses a kernel
KERNELS = {"gaussian": _gaussian, "epanechnikov": _epanechnikov}

TRANSFORMS = {
    "log": np.log,
    "identity": lambda s: np.asarray(s, dtype=float),
}


@dataclass(frozen=True)
class KernelSpec:
    kernel: str = "gaussian"
    transform: str = "log"
    c0: float = 0.11
    bandwidth: float | None = None
    scale_factor: float = 1.06
    # "at_risk": m in the m**(-1/5) factor is the landmark risk set size; "arm": full arm size
    bandwidth_sample: str = "at_risk"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; choose from {sorted(TRANSFORMS)}")
        if not 1 / 20 < self.c0 < 3 / 10:
            raise ValueError(f"c0 must lie in (1/20, 3/10), got {self.c0}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth override must be positive")
        if self.bandwidth_sample not in ("at_risk", "arm"):
            raise ValueError("bandwidth_sample must be 'at_risk' or 'arm'")

    def gamma(self, s):
        return TRANSFORMS[self.transform](np.asarray(s, dtype=float))

    def kernel_fn(self):
        return KERNELS[self.kernel]


def resolve_bandwidth(surrogates, spec: KernelSpec = KernelSpec(), n_arm: int | None = None) -> float:
    """Undersmoothed normal-reference bandwidth.

    ``h_opt = scale_factor * min(sd, IQR / 1.34) * m**(-1/5)`` on the
    transformed surrogate values, then ``h = h_opt * n_arm**(-c0)``.

    Parameters
    ----------
    surrogates : array_like
        Transformed surrogate values of the arm-A landmark risk set.
    n_arm : int, optional
        Full arm-A size; defaults to the number of surrogate values.
    """
    if spec.bandwidth is not None:
        return float(spec.bandwidth)
    g = np.asarray(surrogates, dtype=float)
    m = g.size
    n_arm = m if n_arm is None else int(n_arm)
    if m < 2 or np.ptp(g) == 0:
        raise DegenerateSurrogate("surrogate values have zero spread; bandwidth is undefined")
    sd = np.std(g, ddof=1)
    q75, q25 = np.percentile(g, [75, 25])
    spreads = [v for v in (sd, (q75 - q25) / 1.34) if v > 0]
    size = m if spec.bandwidth_sample == "at_risk" else n_arm
    h_opt = spec.scale_factor * min(spreads) * size ** (-0.2)
    return float(h_opt * n_arm ** (-spec.c0))


def _cumhaz_numpy(kmat, w, n_risk, ev, starts):
    n_draws, n_points = w.shape[0], kmat.shape[0]
    width = int(n_risk.max())
    out = np.empty((n_draws, n_points))
    skipped = 0
    chunk = max(1, _CHUNK_ELEMENTS // max(1, n_points * kmat.shape[1]))
    k = kmat[:, :width]
    for lo in range(0, n_draws, chunk):
        wb = w[lo : lo + chunk]
        total = kmat @ wb.T  # (P, c)
        prod = k[None, :, :] * wb[:, None, :width]
        risk = np.cumsum(prod, axis=2)[:, :, n_risk - 1]
        num = np.add.reduceat(prod[:, :, ev], starts, axis=2)
        ok = risk > GUARD_EPS * total.T[:, :, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            inc = np.where(ok, num / risk, 0.0)
        skipped += int(np.sum(~ok))
        out[lo : lo + chunk] = inc.sum(axis=2)
    return out, skipped


def _cumhaz_loops(kmat, w, n_risk, ev, starts):
    n_draws = w.shape[0]
    n_points, m = kmat.shape
    q = starts.size
    out = np.zeros((n_draws, n_points))
    num = np.empty(q)
    risk_at = np.empty(q)
    skipped = 0
    for b in range(n_draws):
        for j in range(n_points):
            risk = 0.0
            pos = 0
            for k in range(q):
                while pos < n_risk[k]:
                    risk += kmat[j, pos] * w[b, pos]
                    pos += 1
                end = starts[k + 1] if k + 1 < q else ev.size
                acc = 0.0
                for e in range(starts[k], end):
                    acc += kmat[j, ev[e]] * w[b, ev[e]]
                num[k] = acc
                risk_at[k] = risk
            total = risk
            for i in range(pos, m):
                total += kmat[j, i] * w[b, i]
            threshold = GUARD_EPS * total
            cum = 0.0
            for k in range(q):
                if risk_at[k] > threshold:
                    cum += num[k] / risk_at[k]
                else:
                    skipped += 1
            out[b, j] = cum
    return out, skipped


if numba is not None:
    _cumhaz_loops = numba.njit(cache=True, nogil=True)(_cumhaz_loops)


def cumhaz_core(kmat, w, n_risk, ev, starts, backend: str = "auto"):
    """Kernel-weighted Nelson-Aalen sums; see :meth:`ConditionalSurvivalFit.cumhaz_batch`."""
    if backend == "numpy" or (backend == "auto" and numba is None):
        return _cumhaz_numpy(kmat, w, n_risk, ev, starts)
    return _cumhaz_loops(
        np.ascontiguousarray(kmat), np.ascontiguousarray(w), n_risk.astype(np.int64), ev.astype(np.int64), starts.astype(np.int64)
    )


@dataclass(frozen=True, eq=False)
class ConditionalSurvivalFit:
    """Arm-A landmark risk set prepared for kernel Nelson-Aalen evaluation.

    Subjects are stored in decreasing order of follow-up time so that a
    cumulative sum along the subject axis gives kernel-weighted risk sets.
    """

    time: np.ndarray
    event: np.ndarray
    gamma_s: np.ndarray
    bandwidth: float
    spec: KernelSpec
    t0: float
    weights: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return int(self.time.size)

    def kernel_matrix(self, s) -> np.ndarray:
        """Kernel weights, shape (len(s), m), between points ``s`` and the risk set."""
        gs = self.spec.gamma(np.atleast_1d(s))
        u = (self.gamma_s[None, :] - gs[:, None]) / self.bandwidth
        return self.spec.kernel_fn()(u)

    def outside_support(self, s) -> int:
        gs = self.spec.gamma(np.atleast_1d(s))
        return int(np.sum((gs < self.gamma_s.min()) | (gs > self.gamma_s.max())))

    def cumhaz_batch(self, t: float, s=None, weights=None, kmat=None, backend: str = "auto"):
        """Cumulative hazard on (t0, t] at each point, for each weight row.

        Parameters
        ----------
        t : float
        s : array_like, optional
            Evaluation points on the original surrogate scale. Ignored when
            ``kmat`` is given.
        weights : array_like, shape (D, m) or (m,), optional
            Multiplier weights aligned with this fit's (sorted) subjects.
        kmat : ndarray, optional
            Precomputed :meth:`kernel_matrix`.
        backend : {"auto", "numba", "numpy"}
            "auto" uses the compiled loops when numba is importable.

        Returns
        -------
        cumhaz : ndarray, shape (D, P)
        skipped : int
            Increments dropped by the near-empty risk-set guard.
        """
        if kmat is None:
            kmat = self.kernel_matrix(s)
        if weights is None:
            weights = self.weights if self.weights is not None else np.ones(self.m)
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        n_draws, n_points = w.shape[0], kmat.shape[0]

        ev = np.flatnonzero(self.event & (self.time <= t))
        if ev.size == 0:
            return np.zeros((n_draws, n_points)), 0
        # event positions are contiguous per tied time in descending order
        ev_times = self.time[ev]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(ev_times)) + 1))
        uniq = ev_times[starts]
        # risk set at z: every subject with X >= z, i.e. a prefix of the sorted order
        n_risk = np.searchsorted(-self.time, -uniq, side="right")
        return cumhaz_core(kmat, w, n_risk, ev, starts, backend)

    def lambda_hat(self, t: float, s):
        """Kernel Nelson-Aalen cumulative hazard at ``t`` for surrogate value(s) ``s``."""
        if not t > self.t0:
            raise ValueError(f"t={t} must exceed the landmark t0={self.t0}")
        if self.outside_support(s):
            warnings.warn(
                "surrogate evaluation point outside the observed arm-A support; estimate is an extrapolation",
                SupportOverlapWarning,
                stacklevel=2,
            )
        cumhaz, skipped = self.cumhaz_batch(t, s)
        self.diagnostics["guard_skips"] = self.diagnostics.get("guard_skips", 0) + skipped
        out = cumhaz[0]
        return float(out[0]) if np.ndim(s) == 0 else out

    def psi_hat(self, t: float, s):
        """Conditional survival ``exp(-lambda_hat)``."""
        return np.exp(-self.lambda_hat(t, s))


def fit_conditional_survival(arm, t0: float, spec: KernelSpec = KernelSpec(), weights=None) -> ConditionalSurvivalFit:
    """Prepare the kernel estimator on subjects of ``arm`` with ``X > t0``.

    ``weights`` (length ``arm.n``) are optional perturbation weights; the
    bandwidth is always resolved from the unweighted data.
    """
    mask = arm.time > t0
    if not mask.any():
        raise EmptyRiskSet(f"no subjects under observation at t0={t0}")
    x = arm.time[mask]
    order = np.argsort(-x, kind="stable")
    gs = spec.gamma(arm.surrogate[mask])
    h = resolve_bandwidth(gs, spec, n_arm=arm.n)
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float)[mask][order]
    return ConditionalSurvivalFit(
        time=x[order],
        event=arm.event[mask][order],
        gamma_s=gs[order],
        bandwidth=h,
        spec=spec,
        t0=float(t0),
        weights=w,
    )


def lambda_hat(fit: ConditionalSurvivalFit, t: float, s):
    return fit.lambda_hat(t, s)


def psi_hat(fit: ConditionalSurvivalFit, t: float, s):
    return fit.psi_hat(t, s)
