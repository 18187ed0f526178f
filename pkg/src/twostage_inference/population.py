"""Finite populations of clusters (PSUs) and the synthetic population generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class PopulationError(ValueError):
    """Raised for malformed population input."""


@dataclass(frozen=True, eq=False)
class Psu:
    """One primary unit: the y-values of its secondary units."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise PopulationError("a PSU must contain at least one SSU")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True, eq=False)
class Population:
    """A population of PSUs, each holding the values of its SSUs.

    Instances are immutable; the padded array views used by the vectorised
    code paths are computed lazily and cached.
    """

    psus: tuple[Psu, ...] = field()

    def __post_init__(self):
        psus = tuple(self.psus)
        if not psus:
            raise PopulationError("a population needs at least one PSU")
        object.__setattr__(self, "psus", psus)

    @property
    def N_I(self) -> int:
        return len(self.psus)

    @cached_property
    def sizes(self) -> np.ndarray:
        sizes = np.array([p.size for p in self.psus], dtype=np.int64)
        sizes.setflags(write=False)
        return sizes

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def psu_totals(self) -> np.ndarray:
        totals = np.array([p.total for p in self.psus])
        totals.setflags(write=False)
        return totals

    @property
    def total(self) -> float:
        return population_total(self)

    @cached_property
    def padded(self) -> np.ndarray:
        """``(N_I, max N_i)`` array of values, zero-padded on the right."""
        out = np.zeros((self.N_I, int(self.sizes.max())))
        for i, p in enumerate(self.psus):
            out[i, : p.size] = p.values
        out.setflags(write=False)
        return out

    @cached_property
    def flat_values(self) -> np.ndarray:
        flat = np.concatenate([p.values for p in self.psus])
        flat.setflags(write=False)
        return flat

    def with_values(self, values: Sequence[Sequence[float]]) -> "Population":
        """Same cluster structure, different study variable."""
        if len(values) != self.N_I:
            raise PopulationError("number of PSUs does not match")
        return build_population(values)


def build_population(psu_value_lists: Iterable[Sequence[float]]) -> Population:
    lists = list(psu_value_lists)
    if not lists:
        raise PopulationError("a population needs at least one PSU")
    return Population(tuple(Psu(np.asarray(v, dtype=float)) for v in lists))


def population_total(pop: Population) -> float:
    """Grand total of y over every SSU of every PSU."""
    return math.fsum(pop.flat_values)


@dataclass(frozen=True)
class SimPopConfig:
    """Parameters of the synthetic clustered population.

    y = lam + sigma * nu_i + sqrt((1 - icc) / icc) * sigma * eps_k, with
    nu_i and eps_k standard normal, so that the intra-cluster correlation of
    y is ``icc``.  PSU sizes follow a rounded gamma law with mean ``N_0`` and
    coefficient of variation ``size_cv``; with ``size_cv == 0`` every PSU has
    exactly ``N_0`` SSUs.
    """

    N_I: int = 2000
    N_0: int = 40
    size_cv: float = 0.0
    lam: float = 20.0
    sigma: float = 2.0
    icc: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.N_I < 1:
            raise PopulationError("N_I must be >= 1")
        if self.N_0 < 1:
            raise PopulationError("N_0 must be >= 1")
        if self.size_cv < 0:
            raise PopulationError("size_cv must be >= 0")
        if not 0.0 < self.icc < 1.0:
            raise PopulationError("icc must lie in (0, 1)")
        if self.sigma < 0:
            raise PopulationError("sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SimPopConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise PopulationError(f"unknown population fields: {sorted(unknown)}")
        return cls(**d)


def draw_psu_sizes(N_I: int, N_0: int, size_cv: float, rng: np.random.Generator) -> np.ndarray:
    if size_cv == 0:
        return np.full(N_I, N_0, dtype=np.int64)
    shape = 1.0 / size_cv**2
    raw = rng.gamma(shape, N_0 / shape, size=N_I)
    return np.maximum(np.rint(raw).astype(np.int64), 2)


def generate_sim_population(cfg: SimPopConfig) -> Population:
    """Draw a synthetic population from ``cfg``.

    The random draws (sizes, cluster effects, unit noise) are taken in a
    fixed order that does not depend on ``icc``, so two configs differing
    only in ``icc`` share the same underlying normal draws.
    """
    rng = np.random.default_rng(cfg.seed)
    sizes = draw_psu_sizes(cfg.N_I, cfg.N_0, cfg.size_cv, rng)
    nu = rng.standard_normal(cfg.N_I)
    eps = rng.standard_normal(int(sizes.sum()))
    within_sd = math.sqrt((1.0 - cfg.icc) / cfg.icc) * cfg.sigma
    y = cfg.lam + cfg.sigma * np.repeat(nu, sizes) + within_sd * eps
    return build_population(np.split(y, np.cumsum(sizes)[:-1]))


def anova_icc(pop: Population) -> float:
    """One-way ANOVA estimator of the intra-cluster correlation of y."""
    sizes = pop.sizes.astype(float)
    n_tot = sizes.sum()
    k = pop.N_I
    grand = pop.flat_values.mean()
    means = pop.psu_totals / sizes
    ssb = float(np.sum(sizes * (means - grand) ** 2))
    ssw = float(sum(np.sum((p.values - m) ** 2) for p, m in zip(pop.psus, means)))
    msb = ssb / (k - 1)
    msw = ssw / (n_tot - k)
    n_adj = (n_tot - np.sum(sizes**2) / n_tot) / (k - 1)
    s2b = (msb - msw) / n_adj
    return float(s2b / (s2b + msw))


def read_population_csv(path: str | Path) -> Population:
    """Read a ``psu_id, ssu_id, y`` CSV; rows are grouped by psu_id, ordered by ssu_id."""
    groups: dict[str, list[tuple[str, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"psu_id", "ssu_id", "y"} - set(reader.fieldnames or [])
        if missing:
            raise PopulationError(f"population CSV lacks columns {sorted(missing)}")
        for row in reader:
            groups.setdefault(row["psu_id"], []).append((row["ssu_id"], float(row["y"])))

    def key(s: str):
        try:
            return (0, int(s), s)
        except ValueError:
            return (1, 0, s)

    lists = []
    for pid in sorted(groups, key=key):
        rows = sorted(groups[pid], key=lambda r: key(r[0]))
        lists.append([y for _, y in rows])
    return build_population(lists)


def write_population_csv(pop: Population, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["psu_id", "ssu_id", "y"])
        for i, p in enumerate(pop.psus):
            for k, y in enumerate(p.values):
                w.writerow([i, k, repr(float(y))])
