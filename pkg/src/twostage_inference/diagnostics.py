"""Observed values of the regularity constants for one population and design.

The assumptions behind the asymptotic results bound scaled inclusion
probabilities, dependence measures and population moments by constants.
For a single finite population these can only be reported as observed
extrema; nothing here says anything about a sequence of populations.

Quantities that need probabilities which are not available (second order
beyond enumeration, orders 3 and 4 outside closed form or small
enumerations) are reported as ``None``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .designs import DesignError, DesignSpec, InclusionTable, exact_inclusion
from .population import Population
from .twostage import NotEnumerableError, TwoStageDesign, check_dimensions, exact_variance

Opt = Optional[float]


@dataclass(frozen=True)
class StageConstants:
    """Observed constants of one stage, scaled by ``N`` units and ``n`` draws."""

    c_first: float  # min N pi / n
    C_first: float  # max N pi / n
    C_second: Opt = None  # max pi_ij N^2 / n^2
    C_third: Opt = None  # max pi_ijk N^3 / n^3
    delta_1: Opt = None  # max |pi_ij - pi_i pi_j|
    C_delta_1: Opt = None  # delta_1 N^2 / n
    delta_2: Opt = None  # max |pi_ijkl - pi_i pi_j pi_k pi_l|
    C_delta_2: Opt = None  # delta_2 N^4 / n^3
    c_second: Opt = None  # min pi_ij N^2 / n^2
    negatively_associated: Optional[bool] = None  # all pi_ij <= pi_i pi_j


@dataclass(frozen=True)
class AssumptionReport:
    f_I: float
    n_I: float
    N_0: float
    n_0: float
    # first stage
    c_I1: float
    C_I1: float
    C_I2: Opt
    C_I3: Opt
    Delta_I1: Opt
    C_I4: Opt
    Delta_I2: Opt
    C_I5: Opt
    c_I2: Opt
    # second stage
    lambda_1: float
    Lambda_1: float
    phi_1: float
    Phi_1: float
    c_1: float
    C_1: float
    C_2: Opt
    C_3: Opt
    Delta_1: Opt
    C_4: Opt
    Delta_2: Opt
    C_5: Opt
    c_2: Opt
    # variable of interest
    M_1: float
    m_1: float
    m_2: Opt  # N^-2 n_I V1
    v1: Opt
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _offdiag_mask(k: int, N: int) -> np.ndarray:
    idx = np.indices((N,) * k)
    mask = np.ones((N,) * k, dtype=bool)
    for a in range(k):
        for b in range(a + 1, k):
            mask &= idx[a] != idx[b]
    return mask


def _srswor_joint(N: int, n: int, r: int) -> float:
    return math.prod((n - t) / (N - t) for t in range(r))


def stage_constants(table: InclusionTable | None, pi: np.ndarray, N: float, n: float) -> StageConstants:
    """Scaled extrema of the inclusion probabilities of one design.

    ``N`` and ``n`` are the scaling sizes (the population size and sample
    size of the design, or the averages ``N_0`` and ``n_0`` for the second
    stage).  With ``table`` absent only the first-order values are reported.
    """
    scaled = N * pi / n
    out = dict(c_first=float(scaled.min()), C_first=float(scaled.max()))
    if table is None or table.N < 2:
        return StageConstants(**out)
    M = table.N
    if table.srswor_sizes is not None:
        Nt, nt = table.srswor_sizes
        p2 = _srswor_joint(Nt, nt, 2)
        d1 = abs(p2 - (nt / Nt) ** 2)
        out.update(C_second=p2 * N**2 / n**2, c_second=p2 * N**2 / n**2, delta_1=d1)
        out["negatively_associated"] = p2 <= (nt / Nt) ** 2
        if M >= 3:
            out["C_third"] = _srswor_joint(Nt, nt, 3) * N**3 / n**3
        if M >= 4:
            out["delta_2"] = abs(_srswor_joint(Nt, nt, 4) - (nt / Nt) ** 4)
    else:
        off = ~np.eye(M, dtype=bool)
        p2 = table.second[off]
        d = table.delta[off]
        out.update(
            C_second=float(p2.max()) * N**2 / n**2,
            c_second=float(p2.min()) * N**2 / n**2,
            delta_1=float(np.abs(d).max()),
            negatively_associated=bool(np.all(d <= 1e-15)),
        )
        if 3 in table.higher and M >= 3:
            out["C_third"] = float(table.higher[3][_offdiag_mask(3, M)].max()) * N**3 / n**3
        if 4 in table.higher and M >= 4:
            p = table.first
            prod = np.einsum("i,j,k,l->ijkl", p, p, p, p)
            mask = _offdiag_mask(4, M)
            out["delta_2"] = float(np.abs(table.higher[4] - prod)[mask].max())
    out["C_delta_1"] = out["delta_1"] * N**2 / n
    if out.get("delta_2") is not None:
        out["C_delta_2"] = out["delta_2"] * N**4 / n**3
    return StageConstants(**out)


def _design_size(d: DesignSpec) -> float:
    return float(d.n) if d.fixed_size else float(d.probs.sum())


def _first_table(design: TwoStageDesign, incl: InclusionTable | None) -> InclusionTable | None:
    if incl is not None:
        return incl
    if design.strata is None:
        for order in (4, 3, 2):
            try:
                return exact_inclusion(design.first, order)
            except DesignError:
                continue
        return None
    try:
        return design.first_stage_table()
    except NotEnumerableError:
        return None


def _second_table(d: DesignSpec) -> InclusionTable | None:
    for order in (4, 3, 2):
        try:
            return exact_inclusion(d, order)
        except DesignError:
            continue
    return None


def _merge_max(values):
    vals = [v for v in values if v is not None]
    return max(vals) if vals else None


def _merge_min(values):
    vals = [v for v in values if v is not None]
    return min(vals) if vals else None


def check_assumptions(
    pop: Population,
    design: TwoStageDesign,
    incl: InclusionTable | None = None,
    v1: float | None = None,
) -> AssumptionReport:
    """Report every observable constant for ``pop`` under ``design``.

    ``incl`` supplies a first-stage inclusion table when it cannot be
    computed exactly; ``v1`` supplies the first-stage variance (for example
    from a Monte Carlo reference) when the exact one is out of reach.
    """
    check_dimensions(pop, design)
    N_I = design.N_I
    pi_I = design.pi_I
    n_I = float(design.n_I) if design.n_I is not None else float(pi_I.sum())
    table = _first_table(design, incl)
    fs = stage_constants(table, pi_I, N_I, n_I)

    sizes = pop.sizes.astype(float)
    n_i = np.array([_design_size(d) for d in design.second])
    N_0 = float(sizes.mean())
    n_0 = float(n_i.mean())

    per_psu = []
    cache: dict[tuple, StageConstants] = {}
    for d in design.second:
        key = (d.kind, d.N, d.n) if d.kind == "srswor" else None
        if key is not None and key in cache:
            per_psu.append(cache[key])
            continue
        sc = stage_constants(_second_table(d), d.probs, N_0, n_0)
        if key is not None:
            cache[key] = sc
        per_psu.append(sc)

    # SS constants only make sense where a PSU has at least 2 (or 4) SSUs;
    # the merge helpers skip the PSUs that report None
    ss = dict(
        c_1=min(s.c_first for s in per_psu),
        C_1=max(s.C_first for s in per_psu),
        C_2=_merge_max(s.C_second for s in per_psu),
        C_3=_merge_max(s.C_third for s in per_psu),
        Delta_1=_merge_max(s.delta_1 for s in per_psu),
        Delta_2=_merge_max(s.delta_2 for s in per_psu),
        c_2=_merge_min(s.c_second for s in per_psu),
    )
    ss["C_4"] = None if ss["Delta_1"] is None else ss["Delta_1"] * N_0**2 / n_0
    ss["C_5"] = None if ss["Delta_2"] is None else ss["Delta_2"] * N_0**4 / n_0**3

    y = pop.flat_values
    N = pop.N
    M_1 = math.fsum(y**4) / N
    m_1 = math.fsum(y) / N
    if v1 is None and table is not None:
        v1 = exact_variance(pop, design, InclusionTable(table.first, table.second)).v1
    if v1 is not None:
        # V1 is the variance of sum Y_i / pi_i; negatives are rounding only
        v1 = max(float(v1), 0.0)
    m_2 = None if v1 is None else n_I * v1 / N**2

    f_I = n_I / N_I
    flags = {
        "FS1_sampling_fraction_below_one": f_I < 1,
        "all_first_stage_pi_ij_positive": None if fs.c_second is None else fs.c_second > 0,
        "first_stage_negatively_associated": fs.negatively_associated,
        "all_second_stage_pi_kl_positive": None if ss["c_2"] is None else ss["c_2"] > 0,
        "mean_positive": m_1 > 0,
    }
    return AssumptionReport(
        f_I=f_I,
        n_I=n_I,
        N_0=N_0,
        n_0=n_0,
        c_I1=fs.c_first,
        C_I1=fs.C_first,
        C_I2=fs.C_second,
        C_I3=fs.C_third,
        Delta_I1=fs.delta_1,
        C_I4=fs.C_delta_1,
        Delta_I2=fs.delta_2,
        C_I5=fs.C_delta_2,
        c_I2=fs.c_second,
        lambda_1=float(n_i.min() / n_0),
        Lambda_1=float(n_i.max() / n_0),
        phi_1=float(sizes.min() / N_0),
        Phi_1=float(sizes.max() / N_0),
        M_1=M_1,
        m_1=m_1,
        m_2=m_2,
        v1=v1,
        flags=flags,
        **ss,
    )
