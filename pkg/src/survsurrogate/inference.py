"""Perturbation-resampling inference.

Each draw multiplies every subject by an independent positive weight with
unit mean and variance and recomputes all estimators with the bandwidth
held at its unweighted value. The spread of the draws around the point
estimate gives standard errors and the normal, quantile and Fieller
intervals; the same draws also calibrate covariate augmentation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .errors import InferenceAborted, SingularCovarianceWarning, TooFewDraws
from .estimators import ESTIMANDS, Engine, EstimateSet
from .kernel import KernelSpec

__all__ = [
    "PerturbationDraws",
    "FiellerSet",
    "InferenceReport",
    "perturb",
    "covariance",
    "variance",
    "ci_normal",
    "ci_quantile",
    "ci_fieller",
    "augment",
    "infer",
    "MAD_SCALE",
]

MAD_SCALE = 1.4826
MIN_DRAWS = 30
MAX_FAILED_FRACTION = 0.02
CI_TYPES = ("normal", "quantile", "fieller")
# ratio estimands and the (numerator, denominator) pair behind each
RATIOS = {"r_s": ("delta_s", "delta"), "r_t": ("delta_t", "delta")}


def exponential_weights(rng: np.random.Generator, size) -> np.ndarray:
    return rng.standard_exponential(size)


@dataclass(frozen=True, eq=False)
class PerturbationDraws:
    """Estimator values under ``D`` independent weight vectors.

    ``values[name]`` has shape (D,); failed draws hold NaN and are marked
    in ``failed``. Weight rows are kept so covariate contrasts can be
    perturbed with the very same multipliers.
    """

    point: EstimateSet
    values: dict
    weights_a: np.ndarray
    weights_b: np.ndarray
    failed: np.ndarray
    seed: int | None
    guard_skips: int = 0

    @property
    def D(self) -> int:
        return int(self.failed.size)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def valid(self, name: str) -> np.ndarray:
        return self.values[name][~self.failed]


def _derive(deltas: dict) -> dict:
    d, ds, dt = deltas["delta"], deltas["delta_s"], deltas["delta_t"]
    with np.errstate(divide="ignore", invalid="ignore"):
        return {
            "delta": d,
            "delta_s": ds,
            "r_s": 1.0 - ds / d,
            "delta_t": dt,
            "r_t": 1.0 - dt / d,
            "iv_s": (dt - ds) / d,
        }


def perturb(
    data,
    spec: KernelSpec = KernelSpec(),
    D: int = 500,
    seed: int | None = None,
    weight_sampler: Callable | None = None,
    engine: Engine | None = None,
    max_failed_fraction: float = MAX_FAILED_FRACTION,
) -> PerturbationDraws:
    """Draw ``D`` perturbed copies of every estimator.

    Draw ``b`` takes its weights from the ``b``-th child of
    ``SeedSequence(seed)``, so results do not depend on how draws are
    scheduled.

    Raises
    ------
    InferenceAborted
        If more than ``max_failed_fraction`` of the draws are undefined.
    """
    engine = engine or Engine(data, spec)
    point = engine.point()
    sampler = weight_sampler or exponential_weights
    n_a, n_b = data.arm_a.n, data.arm_b.n
    children = np.random.SeedSequence(seed).spawn(D)
    w = np.empty((D, n_a + n_b))
    for b, child in enumerate(children):
        w[b] = sampler(np.random.default_rng(child), n_a + n_b)
    if np.any(w <= 0):
        raise ValueError("perturbation weights must be positive")
    wa, wb = w[:, :n_a], w[:, n_a:]
    res = engine.evaluate(wa, wb)
    values = _derive(res)
    failed = ~(np.isfinite(values["delta"]) & np.isfinite(values["delta_s"]) & np.isfinite(values["delta_t"]))
    failed |= ~(res["phi_a_t0"] > 0)
    for k in values:
        values[k] = np.where(failed, np.nan, values[k])
    if failed.mean() > max_failed_fraction:
        raise InferenceAborted(
            f"{int(failed.sum())} of {D} perturbation draws failed (censoring support exhausted "
            f"under perturbed weights); more than {max_failed_fraction:.0%} is not tolerated"
        )
    return PerturbationDraws(point, values, wa, wb, failed, seed, int(res["guard_skips"]))


def covariance(matrix, mode: str = "empirical") -> np.ndarray:
    """Covariance of the rows of ``matrix`` (draws x coordinates).

    ``robust`` replaces each standard deviation by the scaled median
    absolute deviation and keeps the empirical correlations.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < MIN_DRAWS:
        raise TooFewDraws(f"{x.shape[0]} valid draws; at least {MIN_DRAWS} are required")
    # shifting by one draw leaves the covariance unchanged and makes constant columns exactly zero
    emp = np.atleast_2d(np.cov(x - x[0], rowvar=False, ddof=1))
    if mode == "empirical":
        return emp
    if mode != "robust":
        raise ValueError(f"unknown variance mode {mode!r}")
    med = np.median(x, axis=0)
    scale = MAD_SCALE * np.median(np.abs(x - med), axis=0)
    sd = np.sqrt(np.diag(emp))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = emp / np.outer(sd, sd)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    np.fill_diagonal(corr, 1.0)
    return corr * np.outer(scale, scale)


def variance(draws: PerturbationDraws, mode: str = "empirical") -> tuple[np.ndarray, dict]:
    """Covariance of ``(delta_s, delta)`` and a standard error per estimand."""
    ok = ~draws.failed
    sigma = covariance(np.column_stack([draws.values["delta_s"][ok], draws.values["delta"][ok]]), mode)
    se = {k: math.sqrt(covariance(draws.values[k][ok], mode)[0, 0]) for k in ESTIMANDS}
    return sigma, se


def ci_normal(point: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    z = stats.norm.ppf(1 - alpha / 2)
    return (point - z * se, point + z * se)


def ci_quantile(draws, alpha: float = 0.05) -> tuple[float, float]:
    """Percentile interval; both endpoints are members of ``draws``."""
    x = np.asarray(draws, dtype=float)
    x = x[np.isfinite(x)]
    lo, hi = np.quantile(x, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    return (float(lo), float(hi))


@dataclass(frozen=True)
class FiellerSet:
    """Confidence set for ``1 - numerator/denominator``.

    ``kind`` is one of ``interval`` (``[lower, upper]``), ``complement``
    (everything outside the open interval ``(lower, upper)``),
    ``whole_line``, ``half_line`` (``[lower, inf)`` or ``(-inf, upper]``),
    or ``empty``.
    """

    kind: str
    lower: float
    upper: float
    c_alpha: float

    @property
    def is_interval(self) -> bool:
        return self.kind == "interval"

    def contains(self, r: float) -> bool:
        if self.kind == "interval":
            return self.lower <= r <= self.upper
        if self.kind == "complement":
            return r <= self.lower or r >= self.upper
        if self.kind == "whole_line":
            return True
        if self.kind == "half_line":
            return self.lower <= r <= self.upper
        return False

    def describe(self) -> str:
        if self.kind == "interval":
            return f"[{self.lower:.4g}, {self.upper:.4g}]"
        if self.kind == "complement":
            return f"(-inf, {self.lower:.4g}] U [{self.upper:.4g}, inf)"
        if self.kind == "whole_line":
            return "(-inf, inf)"
        if self.kind == "half_line":
            return f"[{self.lower:.4g}, {self.upper:.4g}]"
        return "empty"

    def to_dict(self) -> dict:
        def enc(v):
            return None if not math.isfinite(v) else v

        return {"kind": self.kind, "lower": enc(self.lower), "upper": enc(self.upper), "c_alpha": self.c_alpha, "text": self.describe()}


def ci_fieller(num: float, den: float, draws_num, draws_den, sigma, alpha: float = 0.05) -> FiellerSet:
    """Fieller set for the ratio-type estimand ``1 - num/den``.

    ``sigma`` is the 2x2 covariance of ``(num, den)``. The critical value
    is the ``1 - alpha`` empirical quantile of the perturbed pivot
    evaluated at the point estimate.
    """
    s11, s12, s22 = sigma[0, 0], sigma[0, 1], sigma[1, 1]
    u_hat = num / den
    scale = s11 - 2 * u_hat * s12 + u_hat**2 * s22
    dn, dd = np.asarray(draws_num, dtype=float), np.asarray(draws_den, dtype=float)
    ok = np.isfinite(dn) & np.isfinite(dd)
    if scale <= 0:
        return FiellerSet("interval", 1 - u_hat, 1 - u_hat, 0.0)
    pivot = (dn[ok] - u_hat * dd[ok]) ** 2 / scale
    c = float(np.quantile(pivot, 1 - alpha, method="inverted_cdf"))

    # in u = 1 - r:  a u^2 + b u + c0 <= 0
    a = den**2 - c * s22
    b = -2 * num * den + 2 * c * s12
    c0 = num**2 - c * s11
    disc = b * b - 4 * a * c0
    if a == 0:
        if b == 0:
            return FiellerSet("whole_line" if c0 <= 0 else "empty", -math.inf, math.inf, c)
        root = -c0 / b
        # b u + c0 <= 0
        if b > 0:
            return FiellerSet("half_line", 1 - root, math.inf, c)
        return FiellerSet("half_line", -math.inf, 1 - root, c)
    if disc < 0:
        return FiellerSet("whole_line" if a < 0 else "empty", -math.inf, math.inf, c)
    sq = math.sqrt(disc)
    u1, u2 = sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a)))
    if a > 0:
        return FiellerSet("interval", 1 - u2, 1 - u1, c)
    return FiellerSet("complement", 1 - u2, 1 - u1, c)


@dataclass
class InferenceReport:
    point: EstimateSet
    se: dict
    sigma: np.ndarray
    ci: dict
    variance_mode: str
    alpha: float
    D: int
    seed: int | None
    failed_draws: int
    guard_skips: int
    augmented: "InferenceReport | None" = None
    augmentation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        ci = {}
        for name, entry in self.ci.items():
            ci[name] = {k: (v.to_dict() if isinstance(v, FiellerSet) else list(v)) for k, v in entry.items()}
        out = {
            "estimates": self.point.values(),
            "t0": self.point.t0,
            "t": self.point.t,
            "bandwidth": self.point.bandwidth,
            "bandwidth_fixed_across_draws": True,
            "unstable_ratio": self.point.unstable_ratio,
            "se": dict(self.se),
            "sigma_delta_s_delta": self.sigma.tolist(),
            "ci": ci,
            "variance_mode": self.variance_mode,
            "alpha": self.alpha,
            "D": self.D,
            "seed": self.seed,
            "failed_draws": self.failed_draws,
            "diagnostics": {**self.point.diagnostics, "guard_skips_draws": self.guard_skips},
        }
        if self.augmented is not None:
            aug = self.augmented.to_dict()
            out["augmented"] = {k: aug[k] for k in ("estimates", "se", "ci")}
            out["augmented"]["covariates"] = self.augmentation.get("covariates")
            out["augmented"]["coefficients"] = self.augmentation.get("coefficients")
            out["augmented"]["ridge"] = self.augmentation.get("ridge")
        return out


def _intervals(point: dict, values: dict, failed, se: dict, sigma_for, alpha: float, ci_types) -> dict:
    out = {}
    for name in ESTIMANDS:
        entry = {}
        if "normal" in ci_types:
            entry["normal"] = ci_normal(point[name], se[name], alpha)
        if "quantile" in ci_types:
            entry["quantile"] = ci_quantile(values[name][~failed], alpha)
        if "fieller" in ci_types and name in RATIOS:
            num, den = RATIOS[name]
            entry["fieller"] = ci_fieller(
                point[num], point[den], values[num][~failed], values[den][~failed], sigma_for(num, den), alpha
            )
        out[name] = entry
    return out


def summarize_draws(point: EstimateSet, values: dict, failed, mode: str, alpha: float, ci_types=CI_TYPES):
    ok = ~failed
    se = {k: math.sqrt(covariance(values[k][ok], mode)[0, 0]) for k in ESTIMANDS}

    def sigma_for(num, den):
        return covariance(np.column_stack([values[num][ok], values[den][ok]]), mode)

    sigma = sigma_for("delta_s", "delta")
    return se, sigma, _intervals(point.values(), values, failed, se, sigma_for, alpha, ci_types)


def augment(draws: PerturbationDraws, covariates_a, covariates_b, basis: Callable | None = None):
    """Covariate-augmented estimates calibrated on the perturbation draws.

    The arm contrast in baseline covariate means has expectation zero under
    randomisation. Adding ``A`` times that contrast, with ``A`` the
    variance-minimising coefficient estimated from the co-perturbed draws,
    leaves the limit unchanged and removes the covariate-explained noise.

    Returns
    -------
    point : EstimateSet
    values : dict
        Augmented draws, same layout as ``draws.values``.
    info : dict
        Coefficient matrix and whether a ridge was needed.
    """
    basis = basis or (lambda z: z)
    ha = np.atleast_2d(np.asarray(basis(np.asarray(covariates_a, dtype=float)))).reshape(len(covariates_a), -1)
    hb = np.atleast_2d(np.asarray(basis(np.asarray(covariates_b, dtype=float)))).reshape(len(covariates_b), -1)
    if ha.shape[1] == 0:
        raise ValueError("augmentation needs at least one covariate")
    contrast = ha.mean(axis=0) - hb.mean(axis=0)
    contrast_draws = draws.weights_a @ ha / ha.shape[0] - draws.weights_b @ hb / hb.shape[0]

    keys = ("delta", "delta_s", "delta_t")
    ok = ~draws.failed
    y = np.column_stack([draws.values[k] for k in keys])
    joint = np.cov(np.column_stack([y[ok], contrast_draws[ok]]), rowvar=False, ddof=1)
    q = len(keys)
    xi12, xi22 = joint[:q, q:], joint[q:, q:]
    ridge = 0.0
    if np.linalg.cond(xi22) > 1e12:
        ridge = 1e-8 * float(np.trace(xi22))
        warnings.warn("covariate contrast covariance is singular; adding a ridge", SingularCovarianceWarning, stacklevel=2)
        xi22 = xi22 + ridge * np.eye(xi22.shape[0])
    coef = -np.linalg.solve(xi22.T, xi12.T).T

    p = draws.point
    base = np.array([p.delta, p.delta_s, p.delta_t])
    aug_point = base + coef @ contrast
    aug_draws = y + contrast_draws @ coef.T
    point = EstimateSet.from_deltas(*aug_point, p.t0, p.t, p.bandwidth, diagnostics=p.diagnostics)
    values = _derive(dict(zip(keys, aug_draws.T)))
    for k in values:
        values[k] = np.where(draws.failed, np.nan, values[k])
    return point, values, {"coefficients": coef.tolist(), "ridge": ridge}


def infer(
    data,
    spec: KernelSpec = KernelSpec(),
    D: int = 500,
    seed: int | None = None,
    alpha: float = 0.05,
    mode: str = "empirical",
    ci_types=CI_TYPES,
    augment_covariates=None,
    weight_sampler: Callable | None = None,
) -> InferenceReport:
    """Point estimates, perturbation standard errors and intervals for ``data``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    draws = perturb(data, spec, D, seed, weight_sampler)
    se, sigma, ci = summarize_draws(draws.point, draws.values, draws.failed, mode, alpha, ci_types)
    report = InferenceReport(
        point=draws.point,
        se=se,
        sigma=sigma,
        ci=ci,
        variance_mode=mode,
        alpha=alpha,
        D=D,
        seed=seed,
        failed_draws=draws.n_failed,
        guard_skips=draws.guard_skips,
    )
    if augment_covariates:
        za, zb = data.covariate_columns(list(augment_covariates))
        apoint, avalues, info = augment(draws, za, zb)
        ase, asigma, aci = summarize_draws(apoint, avalues, draws.failed, mode, alpha, ci_types)
        report.augmented = InferenceReport(apoint, ase, asigma, aci, mode, alpha, D, seed, draws.n_failed, draws.guard_skips)
        report.augmentation = {"covariates": list(augment_covariates), **info}
    return report
