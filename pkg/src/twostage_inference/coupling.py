"""Coupled draws of two first-stage designs on one probability space.

Both designs are handled through their explicit support, so everything here
is restricted to enumerable first stages.  Samples from the two designs are
matched by their bitmask keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .designs import DesignError, DesignSpec, EnumeratedDesign, draw
from .population import Population
from .twostage import TwoStageSample, within_psu_variance


@dataclass(frozen=True)
class DesignDistances:
    tv: float
    chi2: float
    kl: float

    @property
    def alpha(self) -> float:
        return 1.0 - self.tv

    def to_dict(self) -> dict[str, float]:
        return {"tv": self.tv, "chi2": self.chi2, "kl": self.kl, "alpha": self.alpha}


@dataclass(frozen=True)
class AlignedSupport:
    """Union of two supports with both probability vectors on it."""

    membership: np.ndarray  # (S, N) bool
    p: np.ndarray
    p_r: np.ndarray

    @property
    def N(self) -> int:
        return self.membership.shape[1]

    def pi(self, which: str = "p") -> np.ndarray:
        w = self.p if which == "p" else self.p_r
        return w @ self.membership


def align(p: EnumeratedDesign, p_r: EnumeratedDesign) -> AlignedSupport:
    if p.N != p_r.N:
        raise DesignError(f"designs live on different universes ({p.N} vs {p_r.N} units)")
    keys, inv = np.unique(np.concatenate([p.keys, p_r.keys]), return_inverse=True)
    S = keys.size
    member = np.zeros((S, p.N), dtype=bool)
    member[inv[: len(p)]] = p.membership
    member[inv[len(p):]] = p_r.membership
    pv = np.zeros(S)
    prv = np.zeros(S)
    np.add.at(pv, inv[: len(p)], p.probs)
    np.add.at(prv, inv[len(p):], p_r.probs)
    return AlignedSupport(member, pv, prv)


def _distances(pv: np.ndarray, prv: np.ndarray) -> DesignDistances:
    tv = 0.5 * math.fsum(np.abs(pv - prv))
    tv = min(max(tv, 0.0), 1.0)
    on = prv > 0
    if np.any(pv[~on] > 0):
        return DesignDistances(tv, math.inf, math.inf)
    chi2 = math.fsum((pv[on] - prv[on]) ** 2 / prv[on])
    pos = on & (pv > 0)
    kl = math.fsum(pv[pos] * np.log(pv[pos] / prv[pos]))
    # KL is a sum of signed terms; rounding can leave it at -1e-17
    return DesignDistances(tv, chi2, max(kl, 0.0))


def distances(p: EnumeratedDesign, p_r: EnumeratedDesign) -> DesignDistances:
    """Total variation, chi-square and Kullback-Leibler distances of ``p`` from ``p_r``.

    Chi-square and KL are ``inf`` when ``p`` puts mass outside the support of
    ``p_r``.
    """
    a = align(p, p_r)
    return _distances(a.p, a.p_r)


@dataclass(frozen=True)
class CoupledPair:
    sample_r: TwoStageSample
    sample_p: TwoStageSample
    shared: bool


class _Coupler:
    """Branch probabilities of the coupled draw on the aligned support."""

    def __init__(self, p: EnumeratedDesign, p_r: EnumeratedDesign):
        self.support = a = align(p, p_r)
        common = np.minimum(a.p, a.p_r)
        self.alpha = min(float(common.sum()), 1.0)
        self.cdf_common = _cdf(common)
        excess = a.p - a.p_r
        self.cdf_p = _cdf(np.where(excess > 0, excess, 0.0))
        self.cdf_r = _cdf(np.where(excess <= 0, -excess, 0.0))
        self.pi_p = a.pi("p")
        self.pi_r = a.pi("r")

    def first_stage(self, rng: np.random.Generator, size: int):
        """Vectorised first-stage part: row indices into the aligned support."""
        u = rng.random(size)
        shared = u <= self.alpha
        v = rng.random(size)
        w = rng.random(size)
        idx_p = np.empty(size, dtype=np.int64)
        idx_r = np.empty(size, dtype=np.int64)
        if self.cdf_common is not None:
            idx = _pick(self.cdf_common, v[shared])
            idx_p[shared] = idx
            idx_r[shared] = idx
        if np.any(~shared):
            idx_p[~shared] = _pick(self.cdf_p, v[~shared])
            idx_r[~shared] = _pick(self.cdf_r, w[~shared])
        return idx_p, idx_r, shared


def _cdf(w: np.ndarray) -> np.ndarray | None:
    total = w.sum()
    if total <= 0:
        return None
    c = np.cumsum(w / total)
    c[-1] = 1.0
    return c


def _pick(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, cdf.size - 1)


def _second_stage(psus: np.ndarray, second, rng: np.random.Generator):
    ssus = tuple(draw(second[i], rng) for i in psus)
    pi_k = tuple(second[i].probs[s] for i, s in zip(psus, ssus))
    return ssus, pi_k


def _check_second(second, N: int, pop: Population | None = None):
    if len(second) != N:
        raise DesignError(f"{len(second)} second-stage designs for {N} PSUs")
    if pop is not None:
        if pop.N_I != N:
            raise DesignError(f"population has {pop.N_I} PSUs, designs cover {N}")
        for i, (d, psu) in enumerate(zip(second, pop.psus)):
            if d.N != psu.size:
                raise DesignError(f"second-stage design of PSU {i} does not match its size")


def _pair(c: _Coupler, second, ip: int, ir: int, shared: bool, rng) -> CoupledPair:
    m = c.support.membership
    psus_p = np.flatnonzero(m[ip])
    ssus_p, pik_p = _second_stage(psus_p, second, rng)
    sp = TwoStageSample(psus_p, c.pi_p[psus_p], ssus_p, pik_p)
    if shared:
        sr = TwoStageSample(psus_p, c.pi_r[psus_p], ssus_p, pik_p)
    else:
        psus_r = np.flatnonzero(m[ir])
        ssus_r, pik_r = _second_stage(psus_r, second, rng)
        sr = TwoStageSample(psus_r, c.pi_r[psus_r], ssus_r, pik_r)
    return CoupledPair(sr, sp, bool(shared))


def coupled_draw(
    p: EnumeratedDesign,
    p_r: EnumeratedDesign,
    second: tuple[DesignSpec, ...],
    rng: np.random.Generator,
) -> CoupledPair:
    """One coupled draw of ``(S_r, S_p)`` with their second-stage samples.

    With probability ``alpha = 1 - tv`` both first-stage samples are the same
    draw from ``min(p, p_r) / alpha`` and share their second-stage samples.
    Otherwise ``S_p`` comes from the positive part of ``p - p_r`` and
    ``S_r`` independently from the positive part of ``p_r - p``, each with
    its own second-stage draws.  Marginally ``S_p ~ p`` and ``S_r ~ p_r``.
    """
    _check_second(second, p.N)
    c = _Coupler(p, p_r)
    ip, ir, shared = c.first_stage(rng, 1)
    return _pair(c, second, int(ip[0]), int(ir[0]), bool(shared[0]), rng)


def coupled_first_stage(
    p: EnumeratedDesign, p_r: EnumeratedDesign, rng: np.random.Generator, size: int
):
    """``size`` coupled first-stage draws.

    Returns ``(membership, idx_p, idx_r, shared)``, with the sample indices
    pointing at rows of the aligned support ``membership``.
    """
    c = _Coupler(p, p_r)
    ip, ir, shared = c.first_stage(rng, size)
    return c.support.membership, ip, ir, shared


@dataclass(frozen=True)
class CouplingGap:
    empirical: float
    se: float
    bound: float
    shared_rate: float
    distances: DesignDistances
    R: int

    def to_dict(self) -> dict:
        out = self.distances.to_dict()
        out.update(
            empirical_gap=self.empirical,
            empirical_gap_se=self.se,
            bound=self.bound,
            shared_rate=self.shared_rate,
            R=self.R,
        )
        return out


def gap_bound(p: EnumeratedDesign, p_r: EnumeratedDesign, second, pop: Population) -> float:
    """``sum_s |p(s) - p_r(s)| {(sum_{i in s} Y_i/pi_i - Y)^2 + sum_{i in s} V_i/pi_i^2}``.

    Requires both designs to have the same first-order probabilities.
    """
    _check_second(second, p.N, pop)
    a = align(p, p_r)
    pi = a.pi("p")
    if not np.allclose(pi, a.pi("r"), rtol=0, atol=1e-8):
        raise DesignError("the bound needs designs with equal first-order inclusion probabilities")
    Vi = np.array([within_psu_variance(psu, d) for psu, d in zip(pop.psus, second)])
    m = a.membership.astype(float)
    dev = m @ (pop.psu_totals / pi) - pop.total
    within = m @ (Vi / pi**2)
    return float(np.sum(np.abs(a.p - a.p_r) * (dev**2 + within)))


def coupling_gap(
    p: EnumeratedDesign,
    p_r: EnumeratedDesign,
    second: tuple[DesignSpec, ...],
    pop: Population,
    R: int,
    rng: np.random.Generator,
) -> CouplingGap:
    """Monte Carlo mean of ``(Y_hat_p - Y_hat_r)^2`` next to its enumerated bound."""
    if R < 1:
        raise DesignError("R must be >= 1")
    bound = gap_bound(p, p_r, second, pop)
    c = _Coupler(p, p_r)
    ip, ir, shared = c.first_stage(rng, R)
    sq = np.zeros(R)
    # shared draws give identical estimates (same samples, same pi), so only
    # the split branch contributes
    for r in np.flatnonzero(~shared):
        pair = _pair(c, second, int(ip[r]), int(ir[r]), bool(shared[r]), rng)
        sq[r] = (_ht(pair.sample_p, pop) - _ht(pair.sample_r, pop)) ** 2
    se = float(sq.std(ddof=1) / math.sqrt(R)) if R > 1 else math.inf
    return CouplingGap(
        float(sq.mean()), se, bound, float(shared.mean()), _distances(c.support.p, c.support.p_r), R
    )


def _ht(sample: TwoStageSample, pop: Population) -> float:
    total = 0.0
    for i, s, pk, pi in zip(sample.psus, sample.ssus, sample.pi_k, sample.pi_I):
        total += float(np.sum(pop.psus[i].values[s] / pk)) / pi
    return total


def cauchy_schwarz_sides(p: EnumeratedDesign, p_r: EnumeratedDesign, pop: Population):
    """Both sides of ``sum |p - p_r| X <= sqrt(d_2) sqrt(E_r X^2)`` with
    ``X(s) = |sum_{i in s} Y_i/pi_i - Y|`` and ``pi`` taken from ``p_r``."""
    a = align(p, p_r)
    pi = a.pi("r")
    x = np.abs(a.membership.astype(float) @ (pop.psu_totals / pi) - pop.total)
    lhs = float(np.sum(np.abs(a.p - a.p_r) * x))
    d = _distances(a.p, a.p_r)
    rhs = math.sqrt(d.chi2) * math.sqrt(float(np.sum(a.p_r * x**2)))
    return lhs, rhs
