"""Data-generating settings, Monte-Carlo truths and the replication runner."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from .errors import EstimationError, InferenceAborted
from .estimators import ESTIMANDS
from .study_data import Arm, StudyData

__all__ = [
    "SETTINGS",
    "SimulationSetting",
    "SimulationReport",
    "generate",
    "generate_study",
    "conditional_survival_a",
    "truth_oracle",
    "truths",
    "run_study",
    "dpp_parameters",
    "render_simulation_table",
    "jsonable",
]

log = logging.getLogger(__name__)

SETTINGS = ("setting1", "setting2", "setting2-altcens", "null", "dpp")
ALIASES = {"1": "setting1", "2": "setting2", "2alt": "setting2-altcens", "i": "setting1", "ii": "setting2"}

_LANDMARKS = {"dpp": (1.0, 3.0)}
_SD_LOG_RESIDUAL_II = math.sqrt(1.5**2 + 1.0)

# DPP-shaped calibration targets: survival at t, survival of arm A at t0,
# treatment effect, and the proportions explained by landmark information.
_DPP_TARGETS = {"p_a_t": 0.86, "p_b_t": 0.71, "p_a_t0": 0.963, "r_t": 0.478, "r_s": 0.687}


def canonical_setting(name: str) -> str:
    name = ALIASES.get(str(name), str(name))
    if name not in SETTINGS:
        raise ValueError(f"unknown setting {name!r}; choose from {SETTINGS} or {sorted(ALIASES)}")
    return name


def landmarks(setting: str) -> tuple[float, float]:
    return _LANDMARKS.get(canonical_setting(setting), (0.5, 1.0))


_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(80)
_GH_W = _GH_W / _GH_W.sum()


def _mean_expit(a, b, mu):
    """E[expit(a + b * (mu + Z))] for standard normal Z."""
    return float(np.sum(_GH_W * special.expit(a + b * (mu + _GH_X))))


@lru_cache(maxsize=None)
def dpp_parameters() -> dict:
    """Solve the DPP-shaped generator parameters from the calibration targets.

    Given survival to ``t0``, log S is normal with unit variance (mean
    ``mu_a`` in arm A, 0 in arm B) and the conditional survival from ``t0``
    to ``t`` is ``expit(a_g + log S)``.
    """
    tg = _DPP_TARGETS
    delta = tg["p_a_t"] - tg["p_b_t"]
    p_b_t0 = (tg["p_b_t"] + delta * (1 - tg["r_t"])) * tg["p_a_t0"] / tg["p_a_t"]
    delta_s = delta * (1 - tg["r_s"])
    ref_a = (tg["p_b_t"] + delta_s) / p_b_t0
    own_a = tg["p_a_t"] / tg["p_a_t0"]
    own_b = tg["p_b_t"] / p_b_t0
    a_a = optimize.brentq(lambda a: _mean_expit(a, 1.0, 0.0) - ref_a, -20, 20, xtol=1e-14)
    mu_a = optimize.brentq(lambda m: _mean_expit(a_a, 1.0, m) - own_a, -20, 20, xtol=1e-14)
    a_b = optimize.brentq(lambda a: _mean_expit(a, 1.0, 0.0) - own_b, -20, 20, xtol=1e-14)
    return {"p_a_t0": tg["p_a_t0"], "p_b_t0": p_b_t0, "mu_a": mu_a, "mu_b": 0.0, "a_a": a_a, "a_b": a_b, "b": 1.0}


def conditional_survival_a(setting: str, s, t0: float | None = None, t: float | None = None):
    """True ``P(T_A > t | S_A = s, T_A > t0)`` for a built-in setting."""
    setting = canonical_setting(setting)
    d0, d1 = landmarks(setting)
    t0 = d0 if t0 is None else t0
    t = d1 if t is None else t
    s = np.asarray(s, dtype=float)
    if setting in ("setting1", "null"):
        return np.exp(-0.2 * s * (t - t0))
    if setting in ("setting2", "setting2-altcens"):
        z = lambda u: (math.log(u) - 0.5 * s - 0.5) / _SD_LOG_RESIDUAL_II
        return np.exp(stats.norm.logsf(z(t)) - stats.norm.logsf(z(t0)))
    p = dpp_parameters()
    return special.expit(p["a_a"] + p["b"] * np.log(s))


def _event_times(setting: str, arm: str, n: int, rng: np.random.Generator):
    """Uncensored (T, S, Z) draws for one arm."""
    t0, t = landmarks(setting)
    z = rng.standard_normal(n)
    if setting == "dpp":
        p = dpp_parameters()
        p0, mu, a = (p["p_a_t0"], p["mu_a"], p["a_a"]) if arm == "A" else (p["p_b_t0"], p["mu_b"], p["a_b"])
        survive = rng.random(n) < p0
        s = np.exp(mu + rng.standard_normal(n))
        psi = special.expit(a + p["b"] * np.log(s))
        rate = -np.log(psi) / (t - t0)
        time = np.where(survive, t0 + rng.exponential(size=n) / rate, rng.uniform(0, t0, size=n))
        return time, s, z
    if setting in ("setting1", "null"):
        # -log(1 - U) with U = Phi(Z) uniform; logsf keeps the upper tail exact
        expo = -stats.norm.logsf(z)
        if arm == "A" or setting == "null":
            s = rng.gamma(2.0, 2.0, size=n)
            return expo / (0.2 * s), s, z
        s = rng.gamma(9.0, 0.5, size=n)
        return expo / (0.2 + 0.22 * s), s, z
    # setting2 and its censoring variant
    if arm == "A":
        s = rng.gamma(2.0, 2.0, size=n)
        return np.exp(0.5 * s + 1.5 * z + rng.normal(0.5, 1.0, size=n)), s, z
    s = rng.gamma(9.0, 0.5, size=n)
    return np.exp(0.1 * s + 1.5 * z + rng.normal(0.0, 1.0, size=n)), s, z


def _censoring_times(setting: str, n: int, rng: np.random.Generator):
    if setting in ("setting1", "null"):
        return rng.exponential(scale=2.0, size=n)
    if setting == "setting2":
        pick = rng.random(n) < 0.5
        e1 = rng.exponential(scale=1 / 0.5, size=n)
        e2 = rng.exponential(scale=1 / 0.3, size=n)
        return np.where(pick, e1, e2)
    if setting == "setting2-altcens":
        return np.exp(rng.normal(4.0, 1.0, size=n))
    return np.minimum(rng.exponential(scale=20.0, size=n), 4.0)


def generate(setting: str, arm: str, n: int, rng: np.random.Generator) -> Arm:
    """Simulate one censored arm.

    The surrogate is recorded only for subjects still under observation at
    the landmark. The standard normal ``Z`` driving the event time is kept
    as the baseline covariate. Event and censoring times come from separate
    child streams, so settings that differ only in censoring share their
    event times under the same seed.
    """
    setting = canonical_setting(setting)
    t0, _ = landmarks(setting)
    event_rng, cens_rng = rng.spawn(2)
    time, s, z = _event_times(setting, arm, n, event_rng)
    cens = _censoring_times(setting, n, cens_rng)
    x = np.minimum(time, cens)
    delta = time < cens
    s_obs = np.where(x > t0, s, np.nan)
    return Arm.from_arrays(x, delta, s_obs, z[:, None])


def generate_study(setting: str, n: int, rng: np.random.Generator, n_b: int | None = None) -> StudyData:
    setting = canonical_setting(setting)
    t0, t = landmarks(setting)
    arm_a = generate(setting, "A", n, rng)
    arm_b = generate(setting, "B", n if n_b is None else n_b, rng)
    return StudyData(arm_a, arm_b, t0, t, ("z1",))


def _truth_batch(setting: str, n: int, rng: np.random.Generator) -> dict:
    t0, t = landmarks(setting)
    ta, sa, _ = _event_times(setting, "A", n, rng)
    # identical laws: reuse the draws so the effect-scale truths are exactly zero
    tb, sb, _ = (ta, sa, None) if setting == "null" else _event_times(setting, "B", n, rng)
    pa_t, pa_t0 = np.mean(ta > t), np.mean(ta > t0)
    pb_t, pb_t0 = np.mean(tb > t), np.mean(tb > t0)
    psi = conditional_survival_a(setting, sb, t0, t)
    delta = pa_t - pb_t
    delta_s = np.mean(psi * (tb > t0)) - pb_t
    delta_t = pb_t0 * pa_t / pa_t0 - pb_t
    return {
        "delta": delta,
        "delta_s": delta_s,
        "delta_t": delta_t,
        "p_a_t": pa_t,
        "p_b_t": pb_t,
        "p_a_t0": pa_t0,
        "p_b_t0": pb_t0,
        "mean_s_a_given_t0": float(np.mean(sa[ta > t0])),
        "mean_s_b_given_t0": float(np.mean(sb[tb > t0])),
    }


def truths(setting: str, mc_size: int = 10**6, seed: int = 20240101, batches: int = 10) -> dict:
    """Censoring-free Monte-Carlo truths with batch-means standard errors.

    Returns ``{name: (value, mc_se)}`` for the six estimands and the
    marginal survival probabilities. Ratios are flagged NaN when the true
    treatment effect is zero to Monte-Carlo precision.
    """
    setting = canonical_setting(setting)
    rng = np.random.default_rng(seed)
    size = max(1, mc_size // batches)
    rows = []
    for _ in range(batches):
        rows.append(_truth_batch(setting, size, rng))
    out = {}
    for k in rows[0]:
        vals = np.array([r[k] for r in rows], dtype=float)
        out[k] = (float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(batches)))
    delta, delta_se = out["delta"]
    undefined = abs(delta) <= 4 * delta_se
    for name, num in (("r_s", "delta_s"), ("r_t", "delta_t")):
        out[name] = (math.nan, math.nan) if undefined else _ratio_truth(rows, num)
    out["iv_s"] = (math.nan, math.nan) if undefined else _iv_truth(rows)
    out["ratio_undefined"] = undefined
    return out


def _ratio_truth(rows, num):
    d = np.array([r["delta"] for r in rows])
    x = np.array([r[num] for r in rows])
    value = 1 - x.mean() / d.mean()
    per = 1 - x / d
    return float(value), float(per.std(ddof=1) / math.sqrt(len(rows)))


def _iv_truth(rows):
    d = np.array([r["delta"] for r in rows])
    ds = np.array([r["delta_s"] for r in rows])
    dt = np.array([r["delta_t"] for r in rows])
    value = (dt.mean() - ds.mean()) / d.mean()
    per = (dt - ds) / d
    return float(value), float(per.std(ddof=1) / math.sqrt(len(rows)))


def truth_oracle(setting: str, estimand: str, mc_size: int = 10**6, seed: int = 20240101) -> tuple[float, float]:
    """Monte-Carlo truth of one estimand, with its Monte-Carlo standard error."""
    return truths(setting, mc_size, seed)[estimand]


@dataclass(frozen=True)
class SimulationSetting:
    setting: str = "setting1"
    n: int = 1000
    reps: int = 100
    D: int = 500
    seed: int = 1
    variance_mode: str = "empirical"
    alpha: float = 0.05
    augment: bool = True
    mc_size: int = 10**6
    threads: int = 1
    n_b: int | None = None
    kernel: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "setting", canonical_setting(self.setting))
        if self.n < 50:
            raise ValueError("n must be at least 50 per arm")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")


@dataclass
class SimulationReport:
    setting: dict
    truths: dict
    summary: dict
    reps: int
    failed_replicates: int
    fieller_kinds: dict
    replicates: list = field(default_factory=list, repr=False)

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "schema_version": 1,
            "kind": "simulation",
            "setting": self.setting,
            "truths": self.truths,
            "summary": self.summary,
            "reps": self.reps,
            "failed_replicates": self.failed_replicates,
            "fieller_kinds": self.fieller_kinds,
        }
        if include_replicates:
            out["replicates"] = self.replicates
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(jsonable(self.to_dict(**kw)), indent=2, sort_keys=True, allow_nan=False)


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _replicate_seeds(seed: int, rep: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(rep,))
    data_ss, draw_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(draw_ss.generate_state(1, dtype=np.uint64)[0])


def _one_replicate(setting: SimulationSetting, rep: int, truth: dict) -> dict:
    from .inference import infer
    from .kernel import KernelSpec

    rng, draw_seed = _replicate_seeds(setting.seed, rep)
    data = generate_study(setting.setting, setting.n, rng, setting.n_b)
    try:
        report = infer(
            data,
            KernelSpec(**setting.kernel),
            D=setting.D,
            seed=draw_seed,
            alpha=setting.alpha,
            mode=setting.variance_mode,
            augment_covariates=["z1"] if setting.augment else None,
        )
    except EstimationError as exc:
        return {"rep": rep, "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    out = {"rep": rep, "failed": False}
    for prefix, rpt in (("", report), ("aug_", report.augmented)):
        if rpt is None:
            continue
        for name in ESTIMANDS:
            key = prefix + name
            entry = {"estimate": getattr(rpt.point, name), "se": rpt.se[name], "cover": {}}
            target = truth[name][0]
            for kind, ci in rpt.ci[name].items():
                if kind == "fieller":
                    entry["fieller_kind"] = ci.kind
                if not math.isfinite(target):
                    entry["cover"][kind] = None
                elif kind == "fieller":
                    entry["cover"][kind] = bool(ci.contains(target))
                else:
                    entry["cover"][kind] = bool(ci[0] <= target <= ci[1])
            out[key] = entry
    return out


def _aggregate(rows: list, truth: dict, names) -> dict:
    summary = {}
    for key in names:
        base = key.removeprefix("aug_")
        target = truth[base][0]
        est = np.array([r[key]["estimate"] for r in rows], dtype=float)
        se = np.array([r[key]["se"] for r in rows], dtype=float)
        ese = float(est.std(ddof=0)) if len(rows) > 1 else math.nan
        entry = {
            "truth": target,
            "mean": float(est.mean()),
            "bias": float(est.mean() - target),
            "ese": ese,
            "ese_defined": len(rows) > 1,
            "ase": float(se.mean()),
            "mse": float(np.mean((est - target) ** 2)),
            "coverage": {},
        }
        for kind in ("normal", "quantile", "fieller"):
            flags = [r[key]["cover"].get(kind) for r in rows]
            flags = [f for f in flags if f is not None]
            if flags:
                entry["coverage"][kind] = float(np.mean(flags))
        summary[key] = entry
    return summary


def run_study(setting: SimulationSetting, truth: dict | None = None, max_failed_fraction: float = 0.02) -> SimulationReport:
    """Replicate generate -> estimate -> perturb -> intervals and summarise.

    Replicate ``r`` draws its data and weights from ``(seed, r)`` alone, so
    the report is identical whatever ``threads`` is set to.
    """
    truth = truth or truths(setting.setting, setting.mc_size)
    reps = range(setting.reps)
    if setting.threads > 1:
        with ProcessPoolExecutor(max_workers=setting.threads) as pool:
            rows = list(pool.map(_one_replicate, [setting] * setting.reps, reps, [truth] * setting.reps))
    else:
        rows = [_one_replicate(setting, r, truth) for r in reps]
    rows.sort(key=lambda r: r["rep"])
    failed = [r for r in rows if r["failed"]]
    if len(failed) > max_failed_fraction * setting.reps:
        raise InferenceAborted(f"{len(failed)} of {setting.reps} replicates failed; first error: {failed[0]['error']}")
    good = [r for r in rows if not r["failed"]]
    names = [k for k in good[0] if k not in ("rep", "failed")] if good else []
    kinds = {}
    for key in ("r_s", "r_t", "aug_r_s", "aug_r_t"):
        counts = {}
        for r in good:
            if key in r and "fieller_kind" in r[key]:
                counts[r[key]["fieller_kind"]] = counts.get(r[key]["fieller_kind"], 0) + 1
        if counts:
            kinds[key] = counts
    return SimulationReport(
        setting=asdict(setting),
        truths={k: v for k, v in truth.items()},
        summary=_aggregate(good, truth, names),
        reps=setting.reps,
        failed_replicates=len(failed),
        fieller_kinds=kinds,
        replicates=rows,
    )


_ROW_LABELS = (
    ("Bias", "bias"),
    ("ESE", "ese"),
    ("ASE", "ase"),
    ("MSE", "mse"),
    ("Coverage (normal)", ("coverage", "normal")),
    ("Coverage (quantile)", ("coverage", "quantile")),
    ("Coverage (Fieller)", ("coverage", "fieller")),
)


def render_simulation_table(report: dict) -> str:
    """Aligned text table (rows Bias..Coverage, one column per estimand)."""
    summary = report["summary"]
    cols = [k for k in ("delta", "delta_s", "r_s", "aug_delta", "aug_delta_s", "aug_r_s", "delta_t", "r_t", "iv_s") if k in summary]
    width = max(12, max((len(c) for c in cols), default=0) + 2)
    lines = [f"setting={report['setting']['setting']} n={report['setting']['n']} reps={report['reps']} "
             f"D={report['setting']['D']} variance={report['setting']['variance_mode']}"]
    lines.append(" " * 20 + "".join(c.rjust(width) for c in cols))
    for label, key in _ROW_LABELS:
        cells = []
        for c in cols:
            entry = summary[c]
            v = entry[key[0]].get(key[1]) if isinstance(key, tuple) else entry.get(key)
            cells.append(("--" if v is None else f"{v:.4f}").rjust(width))
        lines.append(label.ljust(20) + "".join(cells))
    return "\n".join(lines)
