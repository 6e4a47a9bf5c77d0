"""Point estimates of the treatment effect, the residual effects and the
proportions of treatment effect explained.

``Engine`` evaluates every estimator for a whole matrix of multiplier
weights at once; the point estimate is the single all-ones row. The
standalone functions (``delta_s_hat`` and friends) compute the same
quantities one at a time and serve as the readable reference path.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .censoring import censoring_curves, evaluate_curves, km_censoring, phi_batch, phi_hat
from .errors import CensoringSupportExhausted, EstimationError, UnstableRatioWarning
from .kernel import ConditionalSurvivalFit, KernelSpec, fit_conditional_survival

__all__ = [
    "EstimateSet",
    "Engine",
    "estimate",
    "delta_s_hat",
    "delta_t_hat",
    "r_s_hat",
    "r_t_hat",
    "iv_s_hat",
    "ESTIMANDS",
    "RATIO_FLOOR",
]

log = logging.getLogger(__name__)

ESTIMANDS = ("delta", "delta_s", "r_s", "delta_t", "r_t", "iv_s")
RATIO_FLOOR = 0.05


def _iv(delta, delta_s, delta_t):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.asarray(delta_t, dtype=float) - np.asarray(delta_s, dtype=float)) / np.asarray(delta, dtype=float)


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 - np.asarray(num, dtype=float) / np.asarray(den, dtype=float)


def r_s_hat(delta, delta_s, floor: float = RATIO_FLOOR):
    """Proportion of the treatment effect explained: ``1 - delta_s / delta``."""
    if np.any(np.abs(delta) < floor):
        warnings.warn(
            f"|delta| < {floor}: ratio estimates are unreliable when the treatment effect is small",
            UnstableRatioWarning,
            stacklevel=2,
        )
    return _ratio(delta_s, delta)[()]


def r_t_hat(delta, delta_t, floor: float = RATIO_FLOOR):
    return r_s_hat(delta, delta_t, floor)


def iv_s_hat(delta, delta_s, delta_t, floor: float = RATIO_FLOOR):
    """Incremental value of the surrogate over survival-to-landmark information."""
    if np.any(np.abs(delta) < floor):
        warnings.warn(
            f"|delta| < {floor}: ratio estimates are unreliable when the treatment effect is small",
            UnstableRatioWarning,
            stacklevel=2,
        )
    return _iv(delta, delta_s, delta_t)[()]


@dataclass(frozen=True)
class EstimateSet:
    delta: float
    delta_s: float
    r_s: float
    delta_t: float
    r_t: float
    iv_s: float
    t0: float
    t: float
    bandwidth: float
    unstable_ratio: bool = False
    diagnostics: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_deltas(cls, delta, delta_s, delta_t, t0, t, bandwidth, floor=RATIO_FLOOR, diagnostics=None):
        delta, delta_s, delta_t = float(delta), float(delta_s), float(delta_t)
        return cls(
            delta=delta,
            delta_s=delta_s,
            r_s=float(_ratio(delta_s, delta)),
            delta_t=delta_t,
            r_t=float(_ratio(delta_t, delta)),
            iv_s=float(_iv(delta, delta_s, delta_t)),
            t0=float(t0),
            t=float(t),
            bandwidth=float(bandwidth),
            unstable_ratio=bool(abs(delta) < floor),
            diagnostics=dict(diagnostics or {}),
        )

    def values(self) -> dict:
        return {k: getattr(self, k) for k in ESTIMANDS}

    def to_dict(self) -> dict:
        return asdict(self)


class Engine:
    """All estimators for one study, vectorised over weight rows.

    The kernel matrix between arm-B surrogate values and the arm-A
    landmark risk set is built once, with the bandwidth fixed at its
    unweighted value, and reused for every weight row.
    """

    def __init__(self, data, spec: KernelSpec = KernelSpec()):
        self.data = data
        self.spec = spec
        a, b = data.arm_a, data.arm_b
        self.fit: ConditionalSurvivalFit = fit_conditional_survival(a, data.t0, spec)
        mask_a = a.time > data.t0
        self._a_index = np.flatnonzero(mask_a)[np.argsort(-a.time[mask_a], kind="stable")]
        self._b_mask = b.time > data.t0
        s_b = b.surrogate[self._b_mask]
        self.kmat = self.fit.kernel_matrix(s_b)
        self.outside_support = self.fit.outside_support(s_b)
        if self.outside_support:
            log.warning("%d arm-B surrogate values fall outside the arm-A support", self.outside_support)
        if not np.any(self.fit.event & (self.fit.time <= data.t)):
            log.warning("no arm-A events in (t0, t]; conditional survival estimate is identically 1")

    @property
    def bandwidth(self) -> float:
        return self.fit.bandwidth

    def evaluate(self, wa=None, wb=None) -> dict:
        """Estimator values for each weight row.

        Returns a dict of arrays of shape (D,) with keys ``delta``,
        ``delta_s``, ``delta_t`` plus the intermediate IPW survival
        probabilities and the guard-skip count. Rows for which a censoring
        curve is zero at a needed time are NaN.
        """
        d, a, b = self.data, self.data.arm_a, self.data.arm_b
        wa = np.ones((1, a.n)) if wa is None else np.atleast_2d(wa)
        wb = np.ones((1, b.n)) if wb is None else np.atleast_2d(wb)

        ja, va = censoring_curves(a.time, a.event, wa)
        jb, vb = censoring_curves(b.time, b.event, wb)
        wca_t, wca_t0 = evaluate_curves(ja, va, d.t), evaluate_curves(ja, va, d.t0)
        wcb_t, wcb_t0 = evaluate_curves(jb, vb, d.t), evaluate_curves(jb, vb, d.t0)

        phi_a_t = phi_batch(a.time, wa, wca_t, d.t)
        phi_a_t0 = phi_batch(a.time, wa, wca_t0, d.t0)
        phi_b_t = phi_batch(b.time, wb, wcb_t, d.t)
        phi_b_t0 = phi_batch(b.time, wb, wcb_t0, d.t0)

        cumhaz, skipped = self.fit.cumhaz_batch(d.t, weights=wa[:, self._a_index], kmat=self.kmat)
        psi = np.exp(-cumhaz)
        with np.errstate(divide="ignore", invalid="ignore"):
            anchored = (psi * wb[:, self._b_mask]).sum(axis=1) / (wb.sum(axis=1) * wcb_t0)
            anchored[wcb_t0 <= 0] = np.nan
            delta_t = phi_b_t0 * phi_a_t / phi_a_t0 - phi_b_t
        return {
            "delta": phi_a_t - phi_b_t,
            "delta_s": anchored - phi_b_t,
            "delta_t": delta_t,
            "phi_a_t": phi_a_t,
            "phi_a_t0": phi_a_t0,
            "phi_b_t": phi_b_t,
            "phi_b_t0": phi_b_t0,
            "wc_a_t": wca_t,
            "wc_b_t": wcb_t,
            "wc_a_t0": wca_t0,
            "wc_b_t0": wcb_t0,
            "guard_skips": skipped,
        }

    def point(self) -> EstimateSet:
        res = self.evaluate()
        for arm, key_t0, key_t in (("A", "wc_a_t0", "wc_a_t"), ("B", "wc_b_t0", "wc_b_t")):
            for key, when in ((key_t0, self.data.t0), (key_t, self.data.t)):
                if res[key][0] <= 0:
                    raise CensoringSupportExhausted(
                        f"arm {arm}: censoring survival estimate Wc({when:g}) = 0; "
                        "the time lies beyond the identifiable range",
                        time=when,
                    )
        if res["phi_a_t0"][0] <= 0:
            raise EstimationError("arm A: estimated survival to t0 is zero; delta_t is undefined")
        return EstimateSet.from_deltas(
            res["delta"][0],
            res["delta_s"][0],
            res["delta_t"][0],
            self.data.t0,
            self.data.t,
            self.bandwidth,
            diagnostics={"guard_skips": int(res["guard_skips"]), "outside_support": self.outside_support},
        )


def estimate(data, spec: KernelSpec = KernelSpec()) -> EstimateSet:
    """Point estimates for ``data``."""
    est = Engine(data, spec).point()
    if est.unstable_ratio:
        warnings.warn(
            f"|delta| = {abs(est.delta):.4f} < {RATIO_FLOOR}: ratio estimates are unreliable",
            UnstableRatioWarning,
            stacklevel=2,
        )
    return est


def delta_s_hat(data, fit: ConditionalSurvivalFit, weights_b=None) -> float:
    """Residual treatment effect with arm B as the reference surrogate distribution.

    Averages the arm-A conditional survival over arm-B subjects still under
    observation at the landmark, reweighted for censoring, and subtracts
    the arm-B survival probability at the horizon.
    """
    b = data.arm_b
    w = np.ones(b.n) if weights_b is None else np.asarray(weights_b, dtype=float)
    wc = km_censoring(b.time, b.event, weights_b)
    level_t0 = wc.evaluate(data.t0)
    if level_t0 <= 0:
        raise CensoringSupportExhausted(f"arm B: Wc({data.t0:g}) = 0", time=data.t0)
    mask = b.time > data.t0
    psi = np.atleast_1d(fit.psi_hat(data.t, b.surrogate[mask]))
    anchored = np.sum(w[mask] * psi) / (np.sum(w) * level_t0)
    return float(anchored - phi_hat(b, data.t, wc, w))


def delta_t_hat(data, weights_a=None, weights_b=None) -> float:
    """Residual treatment effect given only survival status at the landmark."""
    a, b = data.arm_a, data.arm_b
    wca = km_censoring(a.time, a.event, weights_a)
    wcb = km_censoring(b.time, b.event, weights_b)
    phi_a_t0 = phi_hat(a, data.t0, wca, weights_a)
    if phi_a_t0 <= 0:
        raise EstimationError("arm A: estimated survival to t0 is zero; delta_t is undefined")
    return phi_hat(b, data.t0, wcb, weights_b) * phi_hat(a, data.t, wca, weights_a) / phi_a_t0 - phi_hat(
        b, data.t, wcb, weights_b
    )
