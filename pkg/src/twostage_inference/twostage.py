"""Two-stage designs: composition, Horvitz-Thompson estimation, exact variance."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Iterator, Sequence

import numpy as np

from .designs import (
    DesignError,
    DesignSpec,
    EnumeratedDesign,
    EnumerationLimitError,
    InclusionTable,
    design_from_dict,
    draw,
    enumerate_design,
    exact_inclusion,
    srswor,
)
from .population import Population, Psu


class NotEnumerableError(DesignError):
    """The exact computation would need an enumeration that is too large."""


@dataclass(frozen=True, eq=False)
class Stratum:
    psus: np.ndarray
    design: DesignSpec

    def __post_init__(self):
        psus = np.asarray(self.psus, dtype=np.int64)
        object.__setattr__(self, "psus", psus)
        if psus.size != self.design.N:
            raise DesignError("stratum design size does not match its PSU list")


@dataclass(frozen=True, eq=False)
class TwoStageDesign:
    """A first-stage design over PSUs (or one per stratum) plus one
    second-stage design per PSU.

    Second-stage draws depend only on the PSU they are run in, never on
    which other PSUs were selected.
    """

    first: DesignSpec | None
    second: tuple[DesignSpec, ...]
    strata: tuple[Stratum, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "second", tuple(self.second))
        if self.strata is not None:
            strata = tuple(self.strata)
            object.__setattr__(self, "strata", strata)
            ids = np.sort(np.concatenate([s.psus for s in strata]))
            if not np.array_equal(ids, np.arange(len(self.second))):
                raise DesignError("strata must partition the PSUs")
        elif self.first is None:
            raise DesignError("a first-stage design or a list of strata is required")
        elif self.first.N != len(self.second):
            raise DesignError(
                f"first stage covers {self.first.N} PSUs but {len(self.second)} second-stage designs given"
            )

    @property
    def N_I(self) -> int:
        return len(self.second)

    @cached_property
    def pi_I(self) -> np.ndarray:
        if self.strata is None:
            return self.first.probs
        pi = np.empty(self.N_I)
        for s in self.strata:
            pi[s.psus] = s.design.probs
        return pi

    @cached_property
    def stratum_of(self) -> np.ndarray:
        lab = np.zeros(self.N_I, dtype=np.int64)
        if self.strata is not None:
            for h, s in enumerate(self.strata):
                lab[s.psus] = h
        return lab

    @property
    def fixed_size_first(self) -> bool:
        if self.strata is None:
            return self.first.fixed_size
        return all(s.design.fixed_size for s in self.strata)

    @property
    def fixed_size_second(self) -> bool:
        return all(d.fixed_size for d in self.second)

    @property
    def n_I(self) -> int | None:
        if self.strata is None:
            return self.first.n
        if not self.fixed_size_first:
            return None
        return sum(s.design.n for s in self.strata)

    @cached_property
    def second_tables(self) -> tuple[InclusionTable, ...]:
        """Within-PSU inclusion tables (closed form for SRSWOR, else enumerated)."""
        return tuple(exact_inclusion(d) for d in self.second)

    def first_stage_table(self, max_order: int = 2) -> InclusionTable:
        """First-stage inclusion table; strata are independent of each other."""
        try:
            if self.strata is None:
                return exact_inclusion(self.first, max_order)
            tables = [exact_inclusion(s.design, 2) for s in self.strata]
        except EnumerationLimitError as exc:
            raise NotEnumerableError(str(exc)) from exc
        pi = self.pi_I
        second = np.outer(pi, pi)
        for s, t in zip(self.strata, tables):
            second[np.ix_(s.psus, s.psus)] = t.second
        return InclusionTable(pi.copy(), second)

    def draw_first(self, rng: np.random.Generator) -> np.ndarray:
        if self.strata is None:
            return draw(self.first, rng)
        return np.sort(np.concatenate([s.psus[draw(s.design, rng)] for s in self.strata]))

    def enumerate_first(self) -> EnumeratedDesign:
        if self.strata is None:
            return enumerate_design(self.first)
        parts = [enumerate_design(s.design) for s in self.strata]
        member = np.zeros((1, self.N_I), dtype=bool)
        probs = np.ones(1)
        for s, e in zip(self.strata, parts):
            new = np.repeat(member, len(e), axis=0)
            idx = np.tile(np.arange(len(e)), member.shape[0])
            new[:, s.psus] = e.membership[idx]
            probs = np.repeat(probs, len(e)) * e.probs[idx]
            member = new
        return EnumeratedDesign(self.N_I, member, probs)


@dataclass(frozen=True, eq=False)
class TwoStageSample:
    """Selected PSUs (sorted), their SSU index sets and attached probabilities."""

    psus: np.ndarray
    pi_I: np.ndarray
    ssus: tuple[np.ndarray, ...]
    pi_k: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.psus) == len(self.pi_I) == len(self.ssus) == len(self.pi_k)):
            raise DesignError("sample components have inconsistent lengths")

    @property
    def n_I(self) -> int:
        return len(self.psus)


@dataclass(frozen=True)
class VarianceDecomposition:
    """``V(Y_hat) = v1 + v2 + v3``: first stage, and the two second-stage pieces."""

    v1: float
    v2: float
    v3: float

    @property
    def total(self) -> float:
        return self.v1 + self.v2 + self.v3

    def to_dict(self) -> dict[str, float]:
        return {"v1": self.v1, "v2": self.v2, "v3": self.v3, "total": self.total}


def check_dimensions(pop: Population, design: TwoStageDesign) -> None:
    if design.N_I != pop.N_I:
        raise DesignError(f"design has {design.N_I} PSUs, population has {pop.N_I}")
    for i, (p, d) in enumerate(zip(pop.psus, design.second)):
        if d.N != p.size:
            raise DesignError(f"second-stage design of PSU {i} covers {d.N} SSUs, PSU has {p.size}")


def srswor_second_stage(pop: Population, n_i: int | Sequence[int]) -> tuple[DesignSpec, ...]:
    ns = np.broadcast_to(np.asarray(n_i), (pop.N_I,))
    if np.any(ns > pop.sizes) or np.any(ns < 1):
        raise DesignError("second-stage sizes must lie in 1..N_i")
    return tuple(srswor(int(N), int(n)) for N, n in zip(pop.sizes, ns))


def census_design(pop: Population) -> TwoStageDesign:
    return TwoStageDesign(srswor(pop.N_I, pop.N_I), srswor_second_stage(pop, pop.sizes))


def draw_two_stage(pop: Population, design: TwoStageDesign, rng: np.random.Generator) -> TwoStageSample:
    """First-stage draw, then one independent second-stage draw per selected PSU.

    All draws come from ``rng`` in a fixed order (first stage, then PSUs in
    increasing index order).
    """
    check_dimensions(pop, design)
    psus = design.draw_first(rng)
    ssus = tuple(draw(design.second[i], rng) for i in psus)
    pi_k = tuple(design.second[i].probs[s] for i, s in zip(psus, ssus))
    return TwoStageSample(psus, design.pi_I[psus], ssus, pi_k)


def psu_estimates(sample: TwoStageSample, pop: Population) -> np.ndarray:
    """HT estimates of the selected PSU totals."""
    return np.array(
        [np.sum(pop.psus[i].values[s] / p) for i, s, p in zip(sample.psus, sample.ssus, sample.pi_k)]
    )


def ht_estimate(sample: TwoStageSample, pop: Population) -> float:
    if sample.n_I == 0:
        return 0.0
    return float(np.sum(psu_estimates(sample, pop) / sample.pi_I))


def _quadratic(delta: np.ndarray, pi: np.ndarray, y: np.ndarray) -> float:
    z = y / pi
    return float(z @ delta @ z)


def within_psu_variance(psu: Psu, design: DesignSpec) -> float:
    """Exact variance of the HT estimator of the PSU total."""
    if design.N != psu.size:
        raise DesignError("design does not match the PSU size")
    if design.kind == "srswor":
        N, n = design.N, design.n
        if N == 1:
            return 0.0
        return N * N * (1.0 / n - 1.0 / N) * float(np.var(psu.values, ddof=1))
    try:
        table = exact_inclusion(design)
    except EnumerationLimitError as exc:
        raise NotEnumerableError(str(exc)) from exc
    return _quadratic(table.delta, table.first, psu.values)


def within_variances(pop: Population, design: TwoStageDesign) -> np.ndarray:
    return np.array([within_psu_variance(p, d) for p, d in zip(pop.psus, design.second)])


def exact_variance(
    pop: Population, design: TwoStageDesign, first_table: InclusionTable | None = None
) -> VarianceDecomposition:
    """Exact three-term decomposition of the variance of the HT estimator.

    ``v1`` is the signed double sum over first-stage covariances and is not
    clamped.  Raises :class:`NotEnumerableError` when the first-stage table
    cannot be computed exactly.
    """
    check_dimensions(pop, design)
    table = first_table if first_table is not None else design.first_stage_table()
    pi = table.first
    Vi = within_variances(pop, design)
    v1 = _quadratic(table.delta, pi, pop.psu_totals)
    v2 = float(np.sum((1.0 - pi) / pi * Vi))
    v3 = float(np.sum(Vi))
    return VarianceDecomposition(v1, v2, v3)


def enumerate_two_stage(pop: Population, design: TwoStageDesign) -> Iterator[tuple[float, TwoStageSample]]:
    """Every two-stage outcome with its probability (tiny designs only)."""
    check_dimensions(pop, design)
    first = design.enumerate_first()
    second = [enumerate_design(d) for d in design.second]
    pi_I = design.pi_I
    for row, p1 in zip(first.membership, first.probs):
        if p1 == 0:
            continue
        psus = np.flatnonzero(row)
        options = [range(len(second[i])) for i in psus]
        for combo in product(*options):
            prob = p1
            ssus = []
            for i, c in zip(psus, combo):
                prob *= second[i].probs[c]
                ssus.append(second[i].sample(c))
            if prob == 0:
                continue
            pi_k = tuple(design.second[i].probs[s] for i, s in zip(psus, ssus))
            yield float(prob), TwoStageSample(psus, pi_I[psus], tuple(ssus), pi_k)


def design_from_config(d: dict, pop: Population) -> TwoStageDesign:
    """Build a two-stage design from its JSON form (see docs/schemas.md)."""
    second_cfg = d.get("second")
    if second_cfg is None:
        raise DesignError("design config needs a 'second' entry")
    if isinstance(second_cfg, list):
        if len(second_cfg) != pop.N_I:
            raise DesignError("one second-stage design per PSU is required")
        second = tuple(design_from_dict(c, N=int(N)) for c, N in zip(second_cfg, pop.sizes))
    elif second_cfg.get("kind") == "srswor":
        second = srswor_second_stage(pop, second_cfg["n"])
    else:
        second = tuple(design_from_dict(second_cfg, N=int(N)) for N in pop.sizes)

    if "strata" in d:
        strata = []
        for s in d["strata"]:
            ids = np.asarray(s["psus"], dtype=np.int64)
            strata.append(Stratum(ids, design_from_dict(s["first"], sizes=pop.sizes[ids], N=ids.size)))
        return TwoStageDesign(None, second, tuple(strata))
    first = design_from_dict(d["first"], sizes=pop.sizes, N=pop.N_I)
    return TwoStageDesign(first, second)
