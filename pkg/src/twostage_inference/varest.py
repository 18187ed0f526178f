"""Variance estimators for the two-stage HT estimator and normal-theory intervals.

Two-term estimators split into an A-term (targets the first-stage variance
plus the ``(1 - pi_I) / pi_I`` part of the second stage) and a B-term
(targets the sum of within-PSU variances):

* ``HT``  - Horvitz-Thompson form, needs first- and second-stage joint probabilities;
* ``YG``  - Yates-Grundy form, fixed-size designs only;
* ``HAJ`` - Hajek-type A-term using first-order probabilities only, with
  truncation when ``d_hat = sum (1 - pi_I)`` is too small.

The ``*_A`` kinds keep only the A-term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .designs import DesignError, InclusionTable
from .population import Population
from .twostage import TwoStageDesign, TwoStageSample, psu_estimates

TWO_TERM = ("HT", "YG", "HAJ")
A_ONLY = ("HT_A", "YG_A", "HAJ_A")
KINDS = TWO_TERM + A_ONLY

DEFAULT_TRUNC_COEFF = 0.25


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class VarEstimate:
    a_term: float
    b_term: float
    kind: str
    truncated: bool = False

    @property
    def total(self) -> float:
        return self.a_term + self.b_term


@dataclass(frozen=True)
class CiResult:
    lower: float
    upper: float
    alpha: float
    estimate: float

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


# ---------------------------------------------------------------------------
# array kernels shared with the Monte Carlo engine


def hajek_a_term(
    z: np.ndarray,
    pi: np.ndarray,
    trunc_coeff: float = DEFAULT_TRUNC_COEFF,
    small_sample_factor: bool = True,
):
    """Truncated Hajek A-term along the last axis.

    ``z`` holds the expanded PSU estimates ``Y_hat_i / pi_i``.  Returns
    ``(a_term, truncated)``; the A-term is zero wherever
    ``d_hat < trunc_coeff * n_I``.

    With ``small_sample_factor`` the centred sum of squares is multiplied by
    ``n_I / (n_I - 1)``.  Without it the A-term is biased downwards by about
    ``1 / n_I`` (exactly so under SRSWOR), which is visible at ``n_I = 20``.
    """
    z = np.asarray(z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    c = 1.0 - pi
    d_hat = c.sum(axis=-1)
    n_I = z.shape[-1]
    truncated = d_hat < trunc_coeff * n_I
    safe_d = np.where(truncated, 1.0, d_hat)
    r_hat = (c * z).sum(axis=-1) / safe_d
    a = (c * (z - r_hat[..., None]) ** 2).sum(axis=-1)
    if small_sample_factor and n_I > 1:
        a = a * (n_I / (n_I - 1))
    a = np.where(truncated, 0.0, a)
    return a, truncated


def srswor_within_ht(values: np.ndarray, N_i, n_i: int) -> np.ndarray:
    """Unbiased within-PSU variance estimates under SRSWOR, along the last axis."""
    values = np.asarray(values, dtype=float)
    N_i = np.asarray(N_i, dtype=float)
    if n_i < 2:
        if np.all(N_i == n_i):
            return np.zeros(values.shape[:-1])
        raise EstimatorError("within-PSU variance needs n_i >= 2 unless the PSU is a census")
    return N_i * N_i * (1.0 / n_i - 1.0 / N_i) * values.var(axis=-1, ddof=1)


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


# ---------------------------------------------------------------------------
# single-sample estimators


def _first_stage_ratio(incl: InclusionTable, psus: np.ndarray) -> np.ndarray:
    sub = incl.second[np.ix_(psus, psus)]
    if np.any(sub <= 0):
        i, j = np.argwhere(sub <= 0)[0]
        raise EstimatorError(
            f"zero joint inclusion probability for PSUs {psus[i]} and {psus[j]}"
        )
    pi = incl.first[psus]
    return (sub - np.outer(pi, pi)) / sub


def _within_ratio(table: InclusionTable, ssus: np.ndarray, psu: int) -> np.ndarray:
    sub = table.second[np.ix_(ssus, ssus)]
    if np.any(sub <= 0):
        k, l = np.argwhere(sub <= 0)[0]
        raise EstimatorError(
            f"zero joint inclusion probability for SSUs {ssus[k]} and {ssus[l]} of PSU {psu}"
        )
    pi = table.first[ssus]
    return (sub - np.outer(pi, pi)) / sub


def within_ht_estimates(
    sample: TwoStageSample, pop: Population, second_incl: Sequence[InclusionTable]
) -> np.ndarray:
    out = np.empty(sample.n_I)
    for t, (i, s) in enumerate(zip(sample.psus, sample.ssus)):
        table = second_incl[i]
        z = pop.psus[i].values[s] / table.first[s]
        out[t] = z @ _within_ratio(table, s, i) @ z
    return out


def within_yg_estimates(
    sample: TwoStageSample, pop: Population, second_incl: Sequence[InclusionTable]
) -> np.ndarray:
    out = np.empty(sample.n_I)
    for t, (i, s) in enumerate(zip(sample.psus, sample.ssus)):
        table = second_incl[i]
        z = pop.psus[i].values[s] / table.first[s]
        ratio = _within_ratio(table, s, i)
        np.fill_diagonal(ratio, 0.0)
        out[t] = -0.5 * np.sum(ratio * (z[:, None] - z[None, :]) ** 2)
    return out


def _expanded(sample: TwoStageSample, pop: Population) -> np.ndarray:
    return psu_estimates(sample, pop) / sample.pi_I


def _is_fixed_size(table: InclusionTable) -> bool:
    n = table.first.sum()
    return bool(np.allclose(table.second.sum(axis=1), n * table.first, rtol=1e-9, atol=1e-12))


def ht_a_term(sample: TwoStageSample, pop: Population, incl: InclusionTable) -> float:
    if sample.n_I == 0:
        return 0.0
    z = _expanded(sample, pop)
    return float(z @ _first_stage_ratio(incl, sample.psus) @ z)


def yg_a_term(sample: TwoStageSample, pop: Population, incl: InclusionTable) -> float:
    if not _is_fixed_size(incl):
        raise EstimatorError("the Yates-Grundy form needs a fixed-size first stage")
    if sample.n_I == 0:
        return 0.0
    z = _expanded(sample, pop)
    ratio = _first_stage_ratio(incl, sample.psus)
    np.fill_diagonal(ratio, 0.0)
    return float(-0.5 * np.sum(ratio * (z[:, None] - z[None, :]) ** 2))


def vhat_ht(
    sample: TwoStageSample,
    pop: Population,
    incl: InclusionTable,
    second_incl: Sequence[InclusionTable],
) -> VarEstimate:
    """Horvitz-Thompson variance estimator, A-term plus B-term."""
    a = ht_a_term(sample, pop, incl)
    b = float(np.sum(within_ht_estimates(sample, pop, second_incl) / sample.pi_I))
    return VarEstimate(a, b, "HT")


def vhat_yg(
    sample: TwoStageSample,
    pop: Population,
    incl: InclusionTable,
    second_incl: Sequence[InclusionTable],
) -> VarEstimate:
    """Yates-Grundy variance estimator; both stages must be of fixed size."""
    a = yg_a_term(sample, pop, incl)
    tables = [second_incl[i] for i in sample.psus]
    if not all(_is_fixed_size(t) for t in tables):
        raise EstimatorError("the Yates-Grundy form needs fixed-size second stages")
    b = float(np.sum(within_yg_estimates(sample, pop, second_incl) / sample.pi_I))
    return VarEstimate(a, b, "YG")


def vhat_hajek(
    sample: TwoStageSample,
    pop: Population,
    second_incl: Sequence[InclusionTable] | None = None,
    trunc_coeff: float = DEFAULT_TRUNC_COEFF,
    b_form: str = "HT",
    small_sample_factor: bool = True,
) -> VarEstimate:
    """Hajek-type estimator: truncated A-term from first-order probabilities only.

    The B-term is the HT (or, with ``b_form="YG"``, Yates-Grundy) sum of
    within-PSU estimates; ``second_incl`` may be omitted only when the
    B-term is not wanted, i.e. through :func:`simplified`.
    """
    z = _expanded(sample, pop) if sample.n_I else np.zeros(0)
    a, truncated = hajek_a_term(z, sample.pi_I, trunc_coeff, small_sample_factor)
    if second_incl is None:
        raise EstimatorError("the two-term Hajek estimator needs second-stage tables")
    if b_form == "HT":
        within = within_ht_estimates(sample, pop, second_incl)
    elif b_form == "YG":
        within = within_yg_estimates(sample, pop, second_incl)
    else:
        raise EstimatorError(f"unknown B-term form {b_form!r}")
    b = float(np.sum(within / sample.pi_I))
    return VarEstimate(float(a), b, "HAJ", bool(truncated))


def simplified(
    kind: str,
    sample: TwoStageSample,
    pop: Population,
    incl: InclusionTable | None = None,
    trunc_coeff: float = DEFAULT_TRUNC_COEFF,
    small_sample_factor: bool = True,
) -> VarEstimate:
    """A-only estimators ``HT_A``, ``YG_A`` and ``HAJ_A``; no within-PSU estimates needed."""
    if kind == "HAJ_A":
        z = _expanded(sample, pop) if sample.n_I else np.zeros(0)
        a, truncated = hajek_a_term(z, sample.pi_I, trunc_coeff, small_sample_factor)
        return VarEstimate(float(a), 0.0, kind, bool(truncated))
    if incl is None:
        raise EstimatorError(f"{kind} needs the first-stage inclusion table")
    if kind == "HT_A":
        return VarEstimate(ht_a_term(sample, pop, incl), 0.0, kind)
    if kind == "YG_A":
        return VarEstimate(yg_a_term(sample, pop, incl), 0.0, kind)
    raise EstimatorError(f"unknown simplified estimator {kind!r}")


def estimate_all(
    sample: TwoStageSample,
    pop: Population,
    design: TwoStageDesign,
    kinds: Sequence[str] = KINDS,
    incl: InclusionTable | None = None,
    trunc_coeff: float = DEFAULT_TRUNC_COEFF,
) -> dict[str, VarEstimate | str]:
    """Every requested estimator; failures are reported as messages, not raised."""
    out: dict[str, VarEstimate | str] = {}
    missing = "first-stage joint inclusion probabilities unavailable"
    if incl is None and any(k.startswith(("HT", "YG")) for k in kinds):
        try:
            incl = design.first_stage_table()
        except DesignError as exc:
            incl = None
            missing = str(exc)
    for k in kinds:
        try:
            if k in A_ONLY:
                if k != "HAJ_A" and incl is None:
                    raise EstimatorError(missing)
                out[k] = simplified(k, sample, pop, incl, trunc_coeff)
            elif k == "HAJ":
                out[k] = vhat_hajek(sample, pop, design.second_tables, trunc_coeff)
            elif incl is None:
                raise EstimatorError(missing)
            elif k == "HT":
                out[k] = vhat_ht(sample, pop, incl, design.second_tables)
            elif k == "YG":
                out[k] = vhat_yg(sample, pop, incl, design.second_tables)
            else:
                raise EstimatorError(f"unknown estimator {k!r}")
        except (EstimatorError, DesignError) as exc:
            out[k] = f"error: {exc}"
    return out


def confidence_interval(estimate: float, var_estimate: float, alpha: float = 0.025) -> CiResult:
    """Two-sided normal interval with ``alpha`` in each tail."""
    if not 0.0 < alpha < 0.5:
        raise EstimatorError("alpha must lie in (0, 0.5)")
    if var_estimate < 0:
        raise EstimatorError(f"negative variance estimate {var_estimate!r}")
    half = normal_quantile(1.0 - alpha) * float(np.sqrt(var_estimate))
    return CiResult(estimate - half, estimate + half, alpha, estimate)


# ---------------------------------------------------------------------------
# stratified proportions


@dataclass(frozen=True)
class StratifiedProportion:
    p_hat: float
    var_haj: float
    var_haj_a: float
    ci_haj: CiResult
    ci_haj_a: CiResult
    n_hat: float

    @property
    def out_of_range(self) -> bool:
        return not 0.0 <= self.p_hat <= 1.0


def stratified_proportion(
    sample: TwoStageSample,
    pop: Population,
    design: TwoStageDesign,
    indicator: Population,
    alpha: float = 0.025,
    small_sample_factor: bool = True,
) -> StratifiedProportion:
    """Substitution estimator of a population proportion with linearized variances.

    ``indicator`` has the cluster structure of ``pop`` and holds 1 for SSUs
    in the category, 0 otherwise.  Second stages must be SRSWOR.  The Hajek
    A-term is computed per stratum with its own centring constant and is
    not truncated.
    """
    if any(d.kind != "srswor" for d in design.second):
        raise EstimatorError("stratified proportions assume SRSWOR second stages")
    labels = design.stratum_of[sample.psus]
    n_strata = 1 if design.strata is None else len(design.strata)
    for h in range(n_strata):
        if not np.any(labels == h):
            raise EstimatorError(f"stratum {h} has no sampled PSU")

    ind = [indicator.psus[i].values[s] for i, s in zip(sample.psus, sample.ssus)]
    inv_k = [1.0 / p for p in sample.pi_k]
    n_hat = sum(float(np.sum(w)) / pi for w, pi in zip(inv_k, sample.pi_I))
    num = sum(float(np.sum(c * w)) / pi for c, w, pi in zip(ind, inv_k, sample.pi_I))
    p_hat = num / n_hat

    e = [(c - p_hat) / n_hat for c in ind]
    E_hat = np.array([np.sum(ei * w) for ei, w in zip(e, inv_k)])
    z = E_hat / sample.pi_I
    cpi = 1.0 - sample.pi_I
    a_term = 0.0
    for h in range(n_strata):
        m = labels == h
        d_h = cpi[m].sum()
        if d_h <= 0:
            continue
        r_h = np.sum(cpi[m] * z[m]) / d_h
        n_h = int(m.sum())
        scale = n_h / (n_h - 1) if small_sample_factor and n_h > 1 else 1.0
        a_term += scale * float(np.sum(cpi[m] * (z[m] - r_h) ** 2))

    b_term = 0.0
    for i, ei, pi in zip(sample.psus, e, sample.pi_I):
        b_term += float(srswor_within_ht(ei, pop.sizes[i], ei.size)) / pi

    var_haj = a_term + b_term
    return StratifiedProportion(
        p_hat=p_hat,
        var_haj=var_haj,
        var_haj_a=a_term,
        ci_haj=confidence_interval(p_hat, var_haj, alpha),
        ci_haj_a=confidence_interval(p_hat, a_term, alpha),
        n_hat=n_hat,
    )
