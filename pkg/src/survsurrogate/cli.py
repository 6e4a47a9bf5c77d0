"""Command-line front end.

Subcommands
-----------
estimate   CSV study -> estimates, perturbation SEs and intervals
simulate   replication study for one of the built-in settings
diagnose   empirical checks of the ordering conditions C1-C3
generate   write a synthetic study as CSV

Every command writes a versioned JSON document (``--out``, default
stdout) and an aligned text table rendered from that JSON alone
(``--table``, default stderr). Exit codes: 0 success, 2 invalid input,
3 estimation failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
import warnings

import numpy as np

from .diagnostics import check_conditions
from .errors import EstimationError, StudyDataError
from .estimators import ESTIMANDS
from .inference import CI_TYPES, infer
from .kernel import KernelSpec
from .simulation import (
    ALIASES,
    SimulationSetting,
    canonical_setting,
    generate_study,
    jsonable,
    landmarks,
    render_simulation_table,
    run_study,
)
from .study_data import load_study, summarize, write_study

__all__ = ["main", "build_parser", "load_config", "render_estimate_table", "render_diagnostics_table", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3

log = logging.getLogger("survsurrogate")

_SETTING_CHOICES = sorted(set(ALIASES) | {"null", "dpp", "setting1", "setting2", "setting2-altcens"})


def _kernel_flags(p):
    g = p.add_argument_group("kernel")
    g.add_argument("--kernel", choices=["gaussian", "epanechnikov"], default="gaussian")
    g.add_argument("--transform", choices=["log", "identity"], default="log")
    g.add_argument("--c0", type=float, default=0.11, help="undersmoothing exponent, in (1/20, 3/10)")
    g.add_argument("--bandwidth", type=float, default=None, help="fixed bandwidth on the transformed scale")
    g.add_argument(
        "--bandwidth-sample",
        choices=["at_risk", "arm"],
        default="at_risk",
        help="sample size entering the bandwidth rule: landmark risk set or full arm",
    )


def _input_flags(p):
    p.add_argument("--input", required=True, help="CSV with columns group,time,event,s[,covariates]")
    p.add_argument("--t0", type=float, required=True, help="landmark time")
    p.add_argument("--t", type=float, required=True, help="horizon")
    p.add_argument("--group-a", default="A", help="group label of the treated arm")
    p.add_argument("--group-b", default="B", help="group label of the control arm")
    p.add_argument("--exp-surrogate", action="store_true", help="exponentiate S on input (log-scale markers)")


def _output_flags(p):
    p.add_argument("--out", default=None, help="JSON report path (default stdout)")
    p.add_argument("--table", default=None, help="text table path (default stderr)")
    p.add_argument("--config", default=None, help="key = value file; entries override flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survsurrogate", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate and perturbation inference for a CSV study")
    _input_flags(est)
    est.add_argument("--D", type=int, default=500, help="perturbation draws")
    est.add_argument("--seed", type=int, default=None, help="RNG seed (default: fresh entropy, echoed in output)")
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--variance", choices=["empirical", "robust"], default="empirical")
    est.add_argument("--ci", choices=[*CI_TYPES, "all"], default="all")
    est.add_argument("--augment", default=None, help="comma-separated covariate columns")
    _kernel_flags(est)
    _output_flags(est)

    sim = sub.add_parser("simulate", help="replication study")
    sim.add_argument("--setting", choices=_SETTING_CHOICES, default="1")
    sim.add_argument("--n", type=int, default=1000, help="subjects per arm")
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--D", type=int, default=500)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--variance", choices=["empirical", "robust"], default="empirical")
    sim.add_argument("--mc-size", type=int, default=10**6, help="Monte-Carlo sample for the truths")
    sim.add_argument("--no-augment", action="store_true", help="skip the covariate-augmented estimator")
    sim.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    _kernel_flags(sim)
    _output_flags(sim)

    diag = sub.add_parser("diagnose", help="check conditions C1-C3")
    _input_flags(diag)
    diag.add_argument("--reciprocal", action="store_true", help="use 1/S")
    diag.add_argument("--tol", type=float, default=0.0)
    diag.add_argument("--draws", type=int, default=200, help="perturbation draws for the noise band")
    diag.add_argument("--level", type=float, default=0.99)
    diag.add_argument("--seed", type=int, default=0)
    _kernel_flags(diag)
    _output_flags(diag)

    gen = sub.add_parser("generate", help="write a synthetic study CSV")
    gen.add_argument("--setting", choices=_SETTING_CHOICES, default="dpp")
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", default=None, help="CSV path (default stdout)")
    gen.add_argument("--config", default=None)
    return parser


def load_config(path: str) -> dict:
    """Read ``key = value`` lines (``#`` comments allowed) into a dict."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    with open(path) as fh:
        cp.read_string("[run]\n" + fh.read(), source=path)
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def _apply_config(args, parser, path):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in load_config(path).items():
        if key in ("config", "command") or key not in actions:
            raise StudyDataError(f"config {path}: unknown key {key!r} for {args.command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise StudyDataError(f"config {path}: bad value for {key!r}: {raw!r}") from exc
            if action.choices is not None and value not in action.choices:
                raise StudyDataError(f"config {path}: {key} must be one of {list(action.choices)}")
        setattr(args, key, value)
    return args


def _kernel_spec(args) -> KernelSpec:
    try:
        return KernelSpec(
            kernel=args.kernel,
            transform=args.transform,
            c0=args.c0,
            bandwidth=args.bandwidth,
            bandwidth_sample=args.bandwidth_sample,
        )
    except ValueError as exc:
        raise StudyDataError(str(exc)) from exc


def _seed(args) -> tuple[int, str]:
    if args.seed is not None:
        return int(args.seed), "flag"
    return int(np.random.SeedSequence().entropy), "entropy"


def _write(text: str, path, default):
    if path is None or path == "-":
        default.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _dump(doc: dict) -> str:
    return json.dumps(jsonable(doc), indent=2, sort_keys=True, allow_nan=False)


def _fmt(v) -> str:
    return "--" if v is None or (isinstance(v, float) and not math.isfinite(v)) else f"{v:.4f}"


def _fmt_ci(ci) -> str:
    if isinstance(ci, dict):
        return ci["text"]
    return f"[{_fmt(ci[0])}, {_fmt(ci[1])}]"


def render_estimate_table(doc: dict) -> str:
    """Text table of an ``estimate`` JSON document."""
    rep = doc["report"]
    lines = [
        f"t0={rep['t0']:g} t={rep['t']:g} D={rep['D']} seed={doc['seed']} variance={rep['variance_mode']} "
        f"bandwidth={rep['bandwidth']:.4g} failed_draws={rep['failed_draws']}"
    ]
    blocks = [("", rep)]
    if "augmented" in rep:
        blocks.append(("aug ", rep["augmented"]))
    kinds = [k for k in CI_TYPES if any(k in rep["ci"][n] for n in ESTIMANDS)]
    header = f"{'estimand':<12}{'estimate':>10}{'SE':>10}" + "".join(f"  {('CI ' + k):<30}" for k in kinds)
    lines.append(header.rstrip())
    for prefix, block in blocks:
        for name in ESTIMANDS:
            row = f"{prefix + name:<12}{_fmt(block['estimates'][name]):>10}{_fmt(block['se'][name]):>10}"
            for k in kinds:
                ci = block["ci"][name].get(k)
                row += f"  {(_fmt_ci(ci) if ci is not None else ''):<30}"
            lines.append(row.rstrip())
    if rep.get("unstable_ratio"):
        lines.append("warning: |delta| is below the ratio floor; ratio estimates are unreliable")
    return "\n".join(lines)


def render_diagnostics_table(doc: dict) -> str:
    """Text summary of a ``diagnose`` JSON document."""
    rep = doc["report"]
    lines = [f"verdict: {rep['verdict']}  (reciprocal={rep['reciprocal']}, grid points={len(rep['grid'])})"]
    for key, count in rep["violations"].items():
        lines.append(f"{key}: {count} violating grid points")
    lines.extend(rep["messages"])
    return "\n".join(lines)


def _cmd_estimate(args) -> dict:
    covs = [c.strip() for c in args.augment.split(",") if c.strip()] if args.augment else None
    data = load_study(args.input, args.t0, args.t, labels=(args.group_a, args.group_b), exp_surrogate=args.exp_surrogate)
    if covs:
        data.covariate_columns(covs)
    seed, source = _seed(args)
    ci_types = CI_TYPES if args.ci == "all" else (args.ci,)
    report = infer(
        data, _kernel_spec(args), D=args.D, seed=seed, alpha=args.alpha, mode=args.variance,
        ci_types=ci_types, augment_covariates=covs,
    )
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "estimate",
        "input": args.input,
        "seed": seed,
        "seed_source": source,
        "study": summarize(data),
        "report": report.to_dict(),
    }


def _cmd_simulate(args) -> dict:
    seed, source = _seed(args)
    kernel = {"kernel": args.kernel, "transform": args.transform, "c0": args.c0, "bandwidth": args.bandwidth}
    try:
        _kernel_spec(args)
        setting = SimulationSetting(
            setting=args.setting, n=args.n, reps=args.reps, D=args.D, seed=seed, variance_mode=args.variance,
            alpha=args.alpha, augment=not args.no_augment, mc_size=args.mc_size, threads=args.threads, kernel=kernel,
        )
    except ValueError as exc:
        raise StudyDataError(str(exc)) from exc
    doc = run_study(setting).to_dict()
    doc["setting"].pop("threads", None)
    return {**doc, "schema_version": SCHEMA_VERSION, "seed": seed, "seed_source": source}


def _cmd_diagnose(args) -> dict:
    data = load_study(args.input, args.t0, args.t, labels=(args.group_a, args.group_b), exp_surrogate=args.exp_surrogate)
    report = check_conditions(
        data, _kernel_spec(args), tol=args.tol, reciprocal=args.reciprocal, draws=args.draws, level=args.level, seed=args.seed
    )
    return {"schema_version": SCHEMA_VERSION, "kind": "diagnostics", "input": args.input, "report": report.to_dict()}


def _cmd_generate(args) -> str:
    seed, _ = _seed(args)
    setting = canonical_setting(args.setting)
    data = generate_study(setting, args.n, np.random.default_rng(seed))
    t0, t = landmarks(setting)
    log.info("generated %s with seed %d (t0=%g, t=%g)", setting, seed, t0, t)
    return write_study(data)


_RENDER = {"estimate": render_estimate_table, "simulate": render_simulation_table, "diagnose": render_diagnostics_table}
_COMMANDS = {"estimate": _cmd_estimate, "simulate": _cmd_simulate, "diagnose": _cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.config:
            _apply_config(args, parser, args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "generate":
                _write(_cmd_generate(args), args.out, sys.stdout)
                return EXIT_OK
            doc = _COMMANDS[args.command](args)
    except StudyDataError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    text = _dump(doc)
    _write(text, args.out, sys.stdout)
    _write(_RENDER[args.command](json.loads(text)), args.table, sys.stderr)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
