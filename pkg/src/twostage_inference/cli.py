"""Command-line interface.

Exit codes: 0 on success, 2 on invalid input, 3 when ``mc`` finds an
acceptance band violated.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import coupling, diagnostics, montecarlo, seeding, twostage, varest
from .designs import DesignError, design_from_dict, enumerate_design, rejective
from .population import PopulationError, SimPopConfig, generate_sim_population, read_population_csv, write_population_csv

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_BANDS = 3


class CliError(Exception):
    pass


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from exc


def _need(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise CliError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _pop_and_design(args):
    _need(args, "pop", "design")
    try:
        pop = read_population_csv(args.pop)
    except OSError as exc:
        raise CliError(f"cannot read {args.pop}: {exc.strerror}") from exc
    cfg = _load_json(args.design)
    return pop, twostage.design_from_config(cfg, pop), cfg


def _sample_to_dict(s: twostage.TwoStageSample) -> dict:
    return {
        "psus": s.psus.tolist(),
        "pi_I": s.pi_I.tolist(),
        "ssus": [x.tolist() for x in s.ssus],
        "pi_k": [x.tolist() for x in s.pi_k],
    }


def _sample_from_dict(d: dict, pop, design: twostage.TwoStageDesign) -> twostage.TwoStageSample:
    try:
        psus = np.asarray(d["psus"], dtype=np.int64)
        ssus = tuple(np.asarray(x, dtype=np.int64) for x in d["ssus"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed sample file: {exc}") from exc
    if psus.size and (psus.min() < 0 or psus.max() >= pop.N_I):
        raise CliError("sample refers to PSUs outside the population")
    pi_k = []
    for i, s in zip(psus, ssus):
        if s.size and (s.min() < 0 or s.max() >= pop.psus[i].size):
            raise CliError(f"sample refers to SSUs outside PSU {i}")
        pi_k.append(design.second[i].probs[s])
    return twostage.TwoStageSample(psus, design.pi_I[psus], ssus, tuple(pi_k))


# ---------------------------------------------------------------------------
# subcommands


def cmd_genpop(args) -> int:
    _need(args, "scenario", "seed", "out")
    cfg = _load_json(args.scenario)
    d = dict(cfg.get("population", cfg))
    if not isinstance(d, dict):
        raise CliError("genpop needs a population configuration, not a file reference")
    if "icc" not in d and "grid" in cfg:
        d["icc"] = cfg["grid"]["icc"][0]
    d["seed"] = args.seed
    pop = generate_sim_population(SimPopConfig.from_dict(d))
    write_population_csv(pop, args.out)
    return EXIT_OK


def cmd_draw(args) -> int:
    _need(args, "seed")
    pop, design, _ = _pop_and_design(args)
    rng = seeding.stream(args.seed, 0, "replicate")
    sample = twostage.draw_two_stage(pop, design, rng)
    _write(_dump(_sample_to_dict(sample)), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    pop, design, _ = _pop_and_design(args)
    if args.sample is not None:
        sample = _sample_from_dict(_load_json(args.sample), pop, design)
    else:
        _need(args, "seed")
        sample = twostage.draw_two_stage(pop, design, seeding.stream(args.seed, 0, "replicate"))
    estimate = twostage.ht_estimate(sample, pop)
    vs = varest.estimate_all(sample, pop, design, trunc_coeff=args.trunc_coeff)
    out = {"estimate": estimate, "n_I": sample.n_I, "variance": {}, "errors": {}}
    for kind, v in vs.items():
        if isinstance(v, str):
            out["errors"][kind] = v
            continue
        ci = varest.confidence_interval(estimate, v.total, args.alpha)
        out["variance"][kind] = {
            "total": v.total,
            "a_term": v.a_term,
            "b_term": v.b_term,
            "truncated": v.truncated,
            "ci": [ci.lower, ci.upper],
        }
    _write(_dump(out), args.out)
    return EXIT_OK


def cmd_exactvar(args) -> int:
    pop, design, _ = _pop_and_design(args)
    dec = twostage.exact_variance(pop, design)
    _write(_dump(dec.to_dict()), args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    pop, design, _ = _pop_and_design(args)
    report = diagnostics.check_assumptions(pop, design)
    _write(_dump(report.to_dict()), args.out)
    return EXIT_OK


def cmd_couple(args) -> int:
    _need(args, "seed")
    pop, design, cfg = _pop_and_design(args)
    if design.first is None:
        raise CliError("coupling needs an unstratified first stage")
    p = enumerate_design(design.first)
    ref_cfg = cfg.get("reference")
    if ref_cfg is None:
        ref = rejective(target_pi=design.first.probs)
    else:
        ref = design_from_dict(ref_cfg, sizes=pop.sizes, N=pop.N_I)
    p_r = enumerate_design(ref)
    rng = seeding.stream(args.seed, 0, "coupling")
    gap = coupling.coupling_gap(p, p_r, design.second, pop, args.R, rng)
    _write(_dump(gap.to_dict()), args.out)
    return EXIT_OK


def cmd_mc(args) -> int:
    _need(args, "scenario", "seed")
    cfg = _load_json(args.scenario)
    if args.trunc_coeff_given:
        cfg["trunc_coeff"] = args.trunc_coeff
    if args.R is not None:
        cfg["R"] = args.R
    if args.R_ref is not None:
        cfg["R_ref"] = args.R_ref
    scenarios = montecarlo.scenarios_from_config(cfg, args.seed, Path(args.scenario).parent)
    workers = args.workers if args.workers is not None else 1
    reports = montecarlo.run_grid(scenarios, workers=workers)
    csv_text, table = montecarlo.emit_table(reports)
    _write(csv_text, args.out)
    if args.out is not None:
        sys.stdout.write(table)
    for rep in reports:
        for est, msg in rep.errors.items():
            print(f"warning: {est} not computed for n_I={rep.scenario.n_I}: {msg}", file=sys.stderr)
    problems = montecarlo.check_bands(reports, cfg.get("bands", []))
    for p in problems:
        print(f"band violated: {p}", file=sys.stderr)
    return EXIT_BANDS if problems else EXIT_OK


COMMANDS = {
    "genpop": (cmd_genpop, "generate a simulated population CSV"),
    "draw": (cmd_draw, "draw one two-stage sample"),
    "estimate": (cmd_estimate, "HT estimate, variance estimates and intervals"),
    "exactvar": (cmd_exactvar, "exact variance decomposition v1, v2, v3"),
    "mc": (cmd_mc, "Monte Carlo study over a scenario grid"),
    "couple": (cmd_couple, "coupled draws against a rejective reference"),
    "diagnose": (cmd_diagnose, "observed regularity constants"),
}


class _TruncAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.trunc_coeff_given = True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", help="scenario or population JSON")
        p.add_argument("--pop", help="population CSV (psu_id, ssu_id, y)")
        p.add_argument("--design", help="two-stage design JSON")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--workers", type=int, help="worker processes (mc)")
        p.add_argument("--out", help="output file (default stdout)")
        p.add_argument(
            "--trunc-coeff",
            type=float,
            default=varest.DEFAULT_TRUNC_COEFF,
            action=_TruncAction,
            help="truncation constant of the Hajek A-term",
        )
        if name == "estimate":
            p.add_argument("--sample", help="sample JSON written by 'draw'")
            p.add_argument("--alpha", type=float, default=0.025, help="one-sided level of the interval")
        if name == "couple":
            p.add_argument("--R", type=int, default=20_000, help="coupled replicates")
        if name == "mc":
            p.add_argument("--R", type=int, help="override the replicate count")
            p.add_argument("--R-ref", dest="R_ref", type=int, help="override the reference replicate count")
        p.set_defaults(trunc_coeff_given=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if not 0 <= args.trunc_coeff <= 1:
        print("error: --trunc-coeff must lie in [0, 1]", file=sys.stderr)
        return EXIT_INVALID
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except (CliError, DesignError, PopulationError, montecarlo.ScenarioError, varest.EstimatorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid input ({type(exc).__name__}: {exc})", file=sys.stderr)
        return EXIT_INVALID
