"""Monte Carlo study of the HT estimator and its variance estimators.

A scenario fixes one population and one two-stage design (first stage over
PSUs, SRSWOR of ``n_i`` SSUs inside each selected PSU).  Replicates are
independent two-stage draws; replicate ``r`` uses
``seeding.stream(seed, r, "replicate")`` and consumes uniforms exactly as
:func:`twostage.draw_two_stage` does, so the vectorised path and the
per-sample path select the same units.

The true variance used by the relative bias and stability metrics is a
reference Monte Carlo variance over ``R_ref`` draws taken from the
disjoint ``"reference"`` streams.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import seeding
from .designs import DesignSpec, cps_sequential, design_from_dict, floyd_srswor
from .population import Population, SimPopConfig, generate_sim_population, read_population_csv
from .twostage import TwoStageDesign, draw_two_stage, srswor_second_stage, within_variances
from .varest import DEFAULT_TRUNC_COEFF, KINDS, hajek_a_term, normal_quantile, srswor_within_ht

BLOCK = 500
GATHER_BUDGET = 4_000_000  # max entries of the (B, n_I, n_I) gather used by HT/YG


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class McScenario:
    population: SimPopConfig | str
    n_I: int
    n_i: int
    first_kind: str = "rejective"
    first_probs: str = "proportional_to_size"
    estimators: tuple[str, ...] = ("HAJ_A", "HAJ")
    R: int = 1000
    R_ref: int = 50_000
    alpha: float = 0.025
    seed: int = 0
    trunc_coeff: float = DEFAULT_TRUNC_COEFF
    small_sample_factor: bool = True

    def __post_init__(self):
        if self.R < 1:
            raise ScenarioError("R must be >= 1")
        if self.R_ref < 2:
            raise ScenarioError("R_ref must be >= 2")
        unknown = set(self.estimators) - set(KINDS)
        if unknown:
            raise ScenarioError(f"unknown estimators {sorted(unknown)}")
        if self.n_I < 1 or self.n_i < 1:
            raise ScenarioError("sample sizes must be positive")

    @property
    def icc(self) -> float | None:
        return self.population.icc if isinstance(self.population, SimPopConfig) else None

    def echo(self) -> dict[str, Any]:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d


@dataclass(frozen=True)
class EstimatorMetrics:
    rb_pct: float
    rs_pct: float
    coverage: float
    rb_se_pct: float
    mean_var: float
    n_truncated: int = 0
    n_negative: int = 0


@dataclass(frozen=True)
class McReport:
    scenario: McScenario
    Y: float
    mean_estimate: float
    v_ref: float
    v_ref_se: float
    v_second: float
    metrics: dict[str, EstimatorMetrics]
    errors: dict[str, str] = field(default_factory=dict)
    estimates: np.ndarray = field(default=None, repr=False)

    @property
    def v1_ref(self) -> float:
        """First-stage variance implied by the reference variance."""
        return self.v_ref - self.v_second

    @property
    def estimate_se(self) -> float:
        return float(np.std(self.estimates, ddof=1) / math.sqrt(self.estimates.size))

    def standardized_errors(self) -> np.ndarray:
        return (self.estimates - self.Y) / math.sqrt(self.v_ref)


# ---------------------------------------------------------------------------
# scenario context


@dataclass(frozen=True, eq=False)
class _Context:
    pop_sizes: np.ndarray
    padded: np.ndarray
    first: DesignSpec
    n_i: int
    estimators: tuple[str, ...]
    trunc_coeff: float
    small_sample_factor: bool
    ratio: np.ndarray | None  # first-stage Delta_ij / pi_ij, when HT/YG are requested
    design: TwoStageDesign
    pop: Population


def load_population(spec: SimPopConfig | str) -> Population:
    if isinstance(spec, SimPopConfig):
        return generate_sim_population(spec)
    return read_population_csv(spec)


def build_design(scenario: McScenario, pop: Population) -> TwoStageDesign:
    if scenario.n_I > pop.N_I:
        raise ScenarioError("n_I exceeds the number of PSUs")
    if scenario.n_i > pop.sizes.min():
        raise ScenarioError("n_i exceeds the smallest PSU")
    first = design_from_dict(
        {"kind": scenario.first_kind, "n": scenario.n_I, "probs": scenario.first_probs},
        sizes=pop.sizes,
        N=pop.N_I,
    )
    return TwoStageDesign(first, srswor_second_stage(pop, scenario.n_i))


def _context(scenario: McScenario, pop: Population, design: TwoStageDesign) -> tuple[_Context, dict[str, str]]:
    errors: dict[str, str] = {}
    ratio = None
    wants_joint = [e for e in scenario.estimators if e.startswith(("HT", "YG"))]
    if wants_joint:
        try:
            table = design.first_stage_table()
        except Exception as exc:  # noqa: BLE001 - recorded per estimator
            for e in wants_joint:
                errors[e] = f"{type(exc).__name__}: {exc}"
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(table.second > 0, table.delta / table.second, np.nan)
    estimators = tuple(e for e in scenario.estimators if e not in errors)
    ctx = _Context(
        pop_sizes=pop.sizes,
        padded=pop.padded,
        first=design.first,
        n_i=scenario.n_i,
        estimators=estimators,
        trunc_coeff=scenario.trunc_coeff,
        small_sample_factor=scenario.small_sample_factor,
        ratio=ratio,
        design=design,
        pop=pop,
    )
    return ctx, errors


# ---------------------------------------------------------------------------
# replicate kernels


def _first_stage_uniforms(first: DesignSpec) -> int | None:
    if first.kind == "rejective":
        return first.N
    if first.kind == "srswor":
        return first.n
    return None


def _select_first(ctx: _Context, u1: np.ndarray) -> np.ndarray:
    if ctx.first.kind == "rejective":
        return cps_sequential(u1, ctx.first)
    return np.sort(floyd_srswor(u1, ctx.first.N), axis=1)


def _evaluate(ctx: _Context, sel: np.ndarray, pos: np.ndarray, with_estimators: bool) -> dict[str, np.ndarray]:
    """Estimates for first-stage selections ``sel`` (B, n_I) and SSU positions ``pos`` (B, n_I, n_i)."""
    N_sel = ctx.pop_sizes[sel]
    values = ctx.padded[sel[..., None], pos]
    n_i = ctx.n_i
    pi = ctx.first.probs[sel]
    y_psu = N_sel / n_i * values.sum(axis=-1)
    z = y_psu / pi
    out = {"estimate": z.sum(axis=-1)}
    if not with_estimators:
        return out
    b_term = None
    for est in ctx.estimators:
        if est in ("HAJ", "HAJ_A"):
            a, trunc = hajek_a_term(z, pi, ctx.trunc_coeff, ctx.small_sample_factor)
            out[f"trunc_{est}"] = trunc
        elif est in ("HT", "HT_A"):
            a = _gathered(ctx.ratio, sel, z, yates_grundy=False)
        else:
            a = _gathered(ctx.ratio, sel, z, yates_grundy=True)
        if est in ("HT", "YG", "HAJ"):
            if b_term is None:
                b_term = (srswor_within_ht(values, N_sel, n_i) / pi).sum(axis=-1)
            a = a + b_term
        out[est] = a
    return out


def _gathered(ratio: np.ndarray, sel: np.ndarray, z: np.ndarray, yates_grundy: bool) -> np.ndarray:
    B, n = sel.shape
    step = max(1, GATHER_BUDGET // max(1, n * n))
    out = np.empty(B)
    for s in range(0, B, step):
        sl = slice(s, s + step)
        sub = ratio[sel[sl, :, None], sel[sl, None, :]]
        if np.isnan(sub).any():
            raise ValueError("a selected PSU pair has zero joint inclusion probability")
        zz = z[sl]
        quad = np.einsum("bi,bij,bj->b", zz, sub, zz)
        if yates_grundy:
            diag = np.einsum("bii->bi", sub)
            rows = sub.sum(axis=-1) - diag
            out[sl] = -(np.sum(zz * zz * rows, axis=-1) - (quad - np.sum(diag * zz * zz, axis=-1)))
        else:
            out[sl] = quad
    return out


def _run_block(ctx: _Context, seed: int, start: int, stop: int, tag: str, with_estimators: bool):
    n_u1 = _first_stage_uniforms(ctx.first)
    if n_u1 is not None:
        n_I = ctx.first.n
        B = stop - start
        u1 = np.empty((B, n_u1))
        u2 = np.empty((B, n_I, ctx.n_i))
        for b, r in enumerate(range(start, stop)):
            g = seeding.stream(seed, r, tag)
            u1[b] = g.random(n_u1)
            u2[b] = g.random(n_I * ctx.n_i).reshape(n_I, ctx.n_i)
        sel = _select_first(ctx, u1)
        return _evaluate(ctx, sel, floyd_srswor(u2, ctx.pop_sizes[sel]), with_estimators)

    # designs with a variable number of uniforms go through draw_two_stage
    parts = []
    for r in range(start, stop):
        s = draw_two_stage(ctx.pop, ctx.design, seeding.stream(seed, r, tag))
        sel = s.psus[None, :]
        pos = np.stack(s.ssus)[None] if s.n_I else np.zeros((1, 0, ctx.n_i), dtype=np.int64)
        parts.append(_evaluate(ctx, sel, pos, with_estimators))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _collect(ctx: _Context, seed: int, R: int, tag: str, with_estimators: bool, workers: int):
    bounds = [(s, min(s + BLOCK, R)) for s in range(0, R, BLOCK)]
    if workers <= 1 or len(bounds) == 1:
        parts = [_run_block(ctx, seed, a, b, tag, with_estimators) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_block, ctx, seed, a, b, tag, with_estimators) for a, b in bounds]
            parts = [f.result() for f in futures]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------------
# public API


def reference_variance(
    scenario: McScenario,
    R_ref: int | None = None,
    seed: int | None = None,
    pop: Population | None = None,
    workers: int = 1,
) -> tuple[float, float]:
    """Variance of the HT estimator over ``R_ref`` independent draws, with its standard error."""
    pop = pop if pop is not None else load_population(scenario.population)
    design = build_design(scenario, pop)
    ctx, _ = _context(scenario, pop, design)
    R_ref = scenario.R_ref if R_ref is None else R_ref
    seed = scenario.seed if seed is None else seed
    est = _collect(ctx, seed, R_ref, "reference", False, workers)["estimate"]
    v = float(np.var(est, ddof=1))
    return v, math.sqrt(2.0 / (R_ref - 1)) * v


def _metrics(var: np.ndarray, est: np.ndarray, Y: float, V: float, u: float, trunc) -> EstimatorMetrics:
    R = var.size
    half = u * np.sqrt(np.clip(var, 0.0, None))
    slack = 1e-9 * max(abs(Y), 1.0)
    covered = (np.abs(est - Y) <= half + slack) & (var >= 0)
    if V > 0:
        rel = (var - V) / V * 100.0
        rb = float(np.mean(rel))
        rs = float(math.sqrt(np.mean(rel**2)))
        rb_se = float(np.std(rel, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    else:
        rb = rs = rb_se = float("nan")
    return EstimatorMetrics(
        rb_pct=rb,
        rs_pct=rs,
        coverage=float(np.mean(covered)),
        rb_se_pct=rb_se,
        mean_var=float(np.mean(var)),
        n_truncated=int(np.sum(trunc)) if trunc is not None else 0,
        n_negative=int(np.sum(var < 0)),
    )


def run_study(scenario: McScenario, pop: Population | None = None, workers: int = 1) -> McReport:
    """Run ``R`` replicates of ``scenario`` and score every requested estimator.

    The output does not depend on ``workers``.
    """
    pop = pop if pop is not None else load_population(scenario.population)
    design = build_design(scenario, pop)
    ctx, errors = _context(scenario, pop, design)
    Y = pop.total
    ref = _collect(ctx, scenario.seed, scenario.R_ref, "reference", False, workers)["estimate"]
    V = float(np.var(ref, ddof=1))
    V_se = math.sqrt(2.0 / (scenario.R_ref - 1)) * V
    res = _collect(ctx, scenario.seed, scenario.R, "replicate", True, workers)
    est = res["estimate"]
    u = normal_quantile(1.0 - scenario.alpha)
    metrics = {
        e: _metrics(res[e], est, Y, V, u, res.get(f"trunc_{e}"))
        for e in ctx.estimators
    }
    Vi = within_variances(pop, design)
    v_second = float(np.sum(Vi / design.pi_I))
    return McReport(
        scenario=scenario,
        Y=Y,
        mean_estimate=float(np.mean(est)),
        v_ref=V,
        v_ref_se=V_se,
        v_second=v_second,
        metrics=metrics,
        errors=errors,
        estimates=est,
    )


def relative_bias(values: Sequence[float], true_var: float) -> float:
    v = np.asarray(values, dtype=float)
    return float((v.mean() - true_var) / true_var * 100.0)


def relative_stability(values: Sequence[float], true_var: float) -> float:
    v = np.asarray(values, dtype=float)
    return float(math.sqrt(np.mean((v - true_var) ** 2)) / true_var * 100.0)


# ---------------------------------------------------------------------------
# grids, bands and tables


def scenarios_from_config(cfg: dict, seed: int | None = None, base_dir: str | Path | None = None) -> list[McScenario]:
    """Expand a JSON scenario file into cells (ICC, then n_I, then n_i order)."""
    master = seed if seed is not None else cfg.get("seed")
    if master is None:
        raise ScenarioError("a seed is required")
    pop_cfg = cfg.get("population")
    if pop_cfg is None:
        raise ScenarioError("scenario needs a 'population' entry")
    grid = cfg.get("grid", {})
    iccs = grid.get("icc", [cfg.get("icc")])
    nIs = grid.get("n_I", [cfg.get("n_I")])
    nis = grid.get("n_i", [cfg.get("n_i")])
    first = cfg.get("first_stage", {"kind": "rejective", "probs": "proportional_to_size"})
    out = []
    for icc in iccs:
        if isinstance(pop_cfg, str):
            path = Path(pop_cfg)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            pop_spec: SimPopConfig | str = str(path)
        else:
            d = dict(pop_cfg)
            if icc is not None:
                d["icc"] = icc
            d.setdefault("seed", seeding.derive_seed(master, 0, "population") >> 1)
            pop_spec = SimPopConfig.from_dict(d)
        for n_I in nIs:
            for n_i in nis:
                if n_I is None or n_i is None:
                    raise ScenarioError("n_I and n_i are required")
                cell = len(out)
                out.append(
                    McScenario(
                        population=pop_spec,
                        n_I=int(n_I),
                        n_i=int(n_i),
                        first_kind=first.get("kind", "rejective"),
                        first_probs=first.get("probs", "proportional_to_size"),
                        estimators=tuple(cfg.get("estimators", ("HAJ_A", "HAJ"))),
                        R=int(cfg.get("R", 1000)),
                        R_ref=int(cfg.get("R_ref", 50_000)),
                        alpha=float(cfg.get("alpha", 0.025)),
                        seed=seeding.derive_seed(master, cell, "cell") >> 1,
                        trunc_coeff=float(cfg.get("trunc_coeff", DEFAULT_TRUNC_COEFF)),
                        small_sample_factor=bool(cfg.get("small_sample_factor", True)),
                    )
                )
    return out


def run_grid(scenarios: Sequence[McScenario], workers: int = 1) -> list[McReport]:
    cache: dict[Any, Population] = {}
    reports = []
    for sc in scenarios:
        if sc.population not in cache:
            cache[sc.population] = load_population(sc.population)
        reports.append(run_study(sc, cache[sc.population], workers))
    return reports


def _cell_key(report: McReport) -> tuple:
    icc = report.scenario.icc
    return (icc if icc is not None else -1.0, report.scenario.n_I, report.scenario.n_i)


def check_bands(reports: Sequence[McReport], bands: Sequence[dict]) -> list[str]:
    """Violations of acceptance bands ``{"estimator", "metric", "min", "max", "where"}``."""
    problems = []
    for band in bands:
        where = band.get("where", {})
        for rep in reports:
            cell = {"icc": rep.scenario.icc, "n_I": rep.scenario.n_I, "n_i": rep.scenario.n_i}
            if any(cell.get(k) != v for k, v in where.items()):
                continue
            m = rep.metrics.get(band["estimator"])
            if m is None:
                problems.append(f"{band['estimator']} missing in cell {cell}")
                continue
            value = getattr(m, band["metric"])
            lo, hi = band.get("min", -math.inf), band.get("max", math.inf)
            if not lo <= value <= hi:
                problems.append(
                    f"{band['estimator']} {band['metric']}={value:.4f} outside [{lo}, {hi}] in cell {cell}"
                )
    return problems


def emit_table(reports: Sequence[McReport]) -> tuple[str, str]:
    """CSV and aligned-text renderings, one row per report in ICC / n_I / n_i order."""
    ests: list[str] = []
    for r in reports:
        for e in r.scenario.estimators:
            if e not in ests:
                ests.append(e)
    header = ["icc", "n_I", "n_i"]
    header += [f"rb_{e}" for e in ests] + [f"rs_{e}" for e in ests] + [f"ci_{e}" for e in ests]
    rows = []
    for r in sorted(reports, key=_cell_key):
        icc = r.scenario.icc
        row = ["" if icc is None else f"{icc:g}", str(r.scenario.n_I), str(r.scenario.n_i)]
        for metric, fmt in (("rb_pct", "{:.4f}"), ("rs_pct", "{:.4f}"), ("coverage", "{:.3f}")):
            for e in ests:
                m = r.metrics.get(e)
                row.append("" if m is None else fmt.format(getattr(m, metric)))
        rows.append(row)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)

    widths = [max(len(h), *(len(r[k]) for r in rows)) if rows else len(h) for k, h in enumerate(header)]
    lines = ["  ".join(h.rjust(wd) for h, wd in zip(header, widths))]
    lines += ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in rows]
    return buf.getvalue(), "\n".join(lines) + "\n"


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def load_scenario_file(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
