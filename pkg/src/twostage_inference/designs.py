"""Single-stage without-replacement designs and their inclusion probabilities.

Four designs are supported: simple random sampling without replacement
(``srswor``), Poisson sampling (``poisson``), rejective / conditional
Poisson sampling (``rejective``) and Sampford sampling (``sampford``).

Conditional Poisson computations go through the elementary symmetric
polynomials of the odds ``w_i = p_i / (1 - p_i)`` of the working
probabilities, tabulated in log space so that populations of a few thousand
units with sample sizes in the hundreds stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, logsumexp

KINDS = ("srswor", "poisson", "rejective", "sampford")
FIXED_SIZE = ("srswor", "rejective", "sampford")

ENUMERATION_LIMIT = 22
MAX_REJECTION_ATTEMPTS = 1_000_000


class DesignError(ValueError):
    """Invalid design parameters or a request the design cannot serve."""


class EnumerationLimitError(DesignError):
    pass


class ConvergenceError(DesignError):
    pass


# ---------------------------------------------------------------------------
# conditional Poisson helpers


def log_esp_backward(logw: np.ndarray, n: int) -> np.ndarray:
    """Table ``L[i, k] = log e_k(w_i, ..., w_{m-1})`` for ``0 <= i <= m``, ``0 <= k <= n``."""
    m = logw.size
    L = np.full((m + 1, n + 1), -np.inf)
    L[m, 0] = 0.0
    for i in range(m - 1, -1, -1):
        L[i, 0] = 0.0
        L[i, 1:] = np.logaddexp(L[i + 1, 1:], logw[i] + L[i + 1, :-1])
    return L


def log_esp_forward(logw: np.ndarray, n: int) -> np.ndarray:
    """Table ``F[i, k] = log e_k(w_0, ..., w_{i-1})``."""
    m = logw.size
    F = np.full((m + 1, n + 1), -np.inf)
    F[0, 0] = 0.0
    for i in range(m):
        F[i + 1, 0] = 0.0
        F[i + 1, 1:] = np.logaddexp(F[i, 1:], logw[i] + F[i, :-1])
    return F


def cps_first_order(working: np.ndarray, n: int) -> np.ndarray:
    """Exact first-order inclusion probabilities of conditional Poisson sampling.

    ``pi_i = w_i e_{n-1}(w without i) / e_n(w)``; the leave-one-out polynomial
    is assembled from forward and backward tables.  Units with working
    probability 1 are always selected and count towards ``n``.
    """
    working = np.asarray(working, dtype=float)
    certain = working >= 1.0
    out = np.ones_like(working)
    free = np.flatnonzero(~certain)
    n_free = n - int(certain.sum())
    if n_free < 0 or n_free > free.size:
        raise DesignError("sample size incompatible with the take-all units")
    if n_free == 0:
        out[free] = 0.0
        return out
    logw = np.log(working[free]) - np.log1p(-working[free])
    F = log_esp_forward(logw, n_free)
    B = log_esp_backward(logw, n_free)
    # sum_k F[i, k] + B[i+1, n_free-1-k]
    combo = F[:-1, :n_free] + B[1:, n_free - 1 :: -1]
    out[free] = np.exp(logw + logsumexp(combo, axis=1) - B[0, n_free])
    return out


def cps_second_order(working: np.ndarray, n: int) -> np.ndarray:
    """Exact second-order inclusion probabilities of conditional Poisson sampling.

    Given that unit ``i`` is selected, the rest of the sample is a conditional
    Poisson sample of size ``n - 1`` from the other units, so
    ``pi_ij = pi_i * pi_j^(-i)``.  Costs ``O(N^2 n)``.
    """
    working = np.asarray(working, dtype=float)
    N = working.size
    pi = cps_first_order(working, n)
    out = np.zeros((N, N))
    others = np.arange(N)
    for i in range(N):
        rest = others != i
        if working[i] >= 1.0:
            out[i, rest] = cps_first_order(working[rest], n - 1) if n > 1 else 0.0
        elif n > 1:
            out[i, rest] = pi[i] * cps_first_order(working[rest], n - 1)
        out[i, i] = pi[i]
    return 0.5 * (out + out.T)


NEWTON_MAX_UNITS = 300


def calibrate_rejective(
    target_pi: Sequence[float],
    n: int | None = None,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> np.ndarray:
    """Working Poisson probabilities whose conditional design attains ``target_pi``.

    Fixed-point iteration on the logits, ``lambda += logit(target) - logit(pi(lambda))``,
    with step halving whenever the residual grows.  For up to
    ``NEWTON_MAX_UNITS`` random units the step is a Newton step instead,
    using ``d pi_i / d lambda_j = pi_ij - pi_i pi_j``; this keeps targets close
    to 0 or 1 from stalling.  Take-all units (target 1) are set aside and
    returned with working probability 1.
    """
    target = np.asarray(target_pi, dtype=float)
    if n is None:
        n = int(round(target.sum()))
    _check_fixed_size_probs(target, n)
    certain = target >= 1.0
    working = np.ones_like(target)
    free = np.flatnonzero(~certain)
    n_free = n - int(certain.sum())
    if n_free == 0:
        working[free] = 0.0
        return working
    t = target[free]
    goal = logit(t)
    lam = goal.copy()
    pi = cps_first_order(expit(lam), n_free)
    resid = np.max(np.abs(pi - t))
    step = 1.0
    it = 0
    while resid > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"rejective calibration did not converge in {max_iter} iterations "
                f"(final residual {resid:.3e})"
            )
        it += 1
        if free.size <= NEWTON_MAX_UNITS:
            direction = _newton_direction(lam, pi, t, n_free)
        else:
            direction = goal - logit(pi)
        cand = lam + step * direction
        cand -= cand.mean() - goal.mean()
        pi_c = cps_first_order(expit(cand), n_free)
        resid_c = np.max(np.abs(pi_c - t))
        if resid_c < resid or step < 1e-6:
            lam, pi, resid = cand, pi_c, resid_c
            step = min(1.0, step * 2.0)
        else:
            step *= 0.5
    working[free] = expit(lam)
    return working


def _newton_direction(lam: np.ndarray, pi: np.ndarray, target: np.ndarray, n: int) -> np.ndarray:
    jac = cps_second_order(expit(lam), n) - np.outer(pi, pi)
    # the Jacobian is singular along the all-ones direction (fixed size);
    # least squares picks the minimum-norm step
    return np.linalg.lstsq(jac, target - pi, rcond=None)[0]


def pps_probabilities(sizes: Sequence[float], n: int) -> np.ndarray:
    """Inclusion probabilities proportional to size, capped at 1.

    Units whose share would exceed 1 become take-alls and the remaining
    sample size is redistributed over the others until no cap binds.
    """
    sizes = np.asarray(sizes, dtype=float)
    if np.any(sizes <= 0):
        raise DesignError("sizes must be positive")
    if not 0 < n <= sizes.size:
        raise DesignError("n must lie in 1..N")
    pi = np.zeros_like(sizes)
    capped = np.zeros(sizes.size, dtype=bool)
    while True:
        rest = ~capped
        pi[rest] = (n - capped.sum()) * sizes[rest] / sizes[rest].sum()
        pi[capped] = 1.0
        over = rest & (pi >= 1.0)
        if not over.any():
            return pi
        capped |= over


def _check_fixed_size_probs(probs: np.ndarray, n: int) -> None:
    if np.any(probs <= 0) or np.any(probs > 1):
        raise DesignError("inclusion probabilities must lie in (0, 1]")
    if abs(probs.sum() - n) > 1e-9:
        raise DesignError(f"inclusion probabilities sum to {probs.sum():.12g}, expected n={n}")


# ---------------------------------------------------------------------------
# design objects


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """A single-stage design over ``N = len(probs)`` units.

    For the fixed-size kinds ``probs`` are the first-order inclusion
    probabilities and ``n`` the sample size.  For ``poisson`` they are the
    independent selection probabilities.  A rejective design also carries
    its calibrated ``working`` Poisson probabilities.
    """

    kind: str
    probs: np.ndarray
    n: int | None = None
    working: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DesignError(f"unknown design kind {self.kind!r}; expected one of {KINDS}")
        probs = np.asarray(self.probs, dtype=float).ravel()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.kind == "poisson":
            if np.any(probs < 0) or np.any(probs > 1):
                raise DesignError("Poisson probabilities must lie in [0, 1]")
            return
        if self.n is None:
            raise DesignError(f"{self.kind} needs a sample size n")
        if not 0 <= self.n <= probs.size:
            raise DesignError("n must lie in 0..N")
        _check_fixed_size_probs(probs, self.n)
        if self.kind == "rejective":
            if self.working is None:
                raise DesignError("rejective design needs working probabilities")
            working = np.asarray(self.working, dtype=float).ravel()
            if working.shape != probs.shape:
                raise DesignError("working probabilities have the wrong length")
            working.setflags(write=False)
            object.__setattr__(self, "working", working)

    @property
    def N(self) -> int:
        return self.probs.size

    @property
    def fixed_size(self) -> bool:
        return self.kind in FIXED_SIZE

    @cached_property
    def _certain(self) -> np.ndarray:
        if self.kind == "rejective":
            return self.working >= 1.0
        return self.probs >= 1.0

    @cached_property
    def _cps_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Selection table of the sequential conditional Poisson sampler.

        ``Q[j, k]`` is the probability of taking free unit ``j`` when ``k``
        units remain to be taken among free units ``j..m-1``.
        """
        certain = self._certain
        free = np.flatnonzero(~certain)
        n_free = self.n - int(certain.sum())
        w = self.working[free]
        logw = np.log(w) - np.log1p(-w)
        B = log_esp_backward(logw, n_free)
        Q = np.zeros((free.size, n_free + 1))
        if n_free > 0:
            with np.errstate(invalid="ignore"):
                Q[:, 1:] = np.exp(logw[:, None] + B[1:, :-1] - B[:-1, 1:])
            Q = np.nan_to_num(Q, nan=0.0)
            np.clip(Q, 0.0, 1.0, out=Q)
        return free, Q, np.flatnonzero(certain)

    @cached_property
    def _sampford_cdfs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        free = np.flatnonzero(~self._certain)
        pi = self.probs[free]
        first = np.cumsum(pi / pi.sum())
        odds = pi / (1.0 - pi)
        rest = np.cumsum(odds / odds.sum())
        return free, first, rest


def srswor(N: int, n: int) -> DesignSpec:
    if not 0 < N:
        raise DesignError("N must be positive")
    return DesignSpec("srswor", np.full(N, n / N), n)


def poisson(p: Sequence[float]) -> DesignSpec:
    return DesignSpec("poisson", np.asarray(p, dtype=float))


def rejective(
    target_pi: Sequence[float] | None = None,
    n: int | None = None,
    working: Sequence[float] | None = None,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> DesignSpec:
    """Conditional Poisson design, from target inclusion probabilities or working probabilities."""
    if (target_pi is None) == (working is None):
        raise DesignError("give exactly one of target_pi and working")
    if working is not None:
        if n is None:
            raise DesignError("n is required with working probabilities")
        working = np.asarray(working, dtype=float)
        if np.any(working <= 0) or np.any(working > 1):
            raise DesignError("working probabilities must lie in (0, 1]")
        pi = cps_first_order(working, n)
        return DesignSpec("rejective", pi, n, working)
    target = np.asarray(target_pi, dtype=float)
    if n is None:
        n = int(round(target.sum()))
    working = calibrate_rejective(target, n, tol=tol, max_iter=max_iter)
    return DesignSpec("rejective", target, n, working)


def sampford(target_pi: Sequence[float], n: int | None = None) -> DesignSpec:
    target = np.asarray(target_pi, dtype=float)
    if n is None:
        n = int(round(target.sum()))
    return DesignSpec("sampford", target, n)


def first_order(design: DesignSpec) -> np.ndarray:
    """First-order inclusion probabilities, available for every design and size."""
    return design.probs


# ---------------------------------------------------------------------------
# drawing


def floyd_srswor(u: np.ndarray, N) -> np.ndarray:
    """Floyd's SRSWOR selection driven by uniforms.

    ``u`` has shape ``(..., n)``; ``N`` is a scalar or broadcasts against
    ``u[..., 0]``.  Returns chosen positions (unordered) of shape ``(..., n)``.
    One uniform is consumed per selected unit.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    N = np.asarray(N)
    chosen = np.empty(u.shape, dtype=np.int64)
    for t in range(n):
        j = N - n + t
        r = np.floor(u[..., t] * (j + 1)).astype(np.int64)
        clash = np.any(chosen[..., :t] == r[..., None], axis=-1) if t else False
        chosen[..., t] = np.where(clash, j, r)
    return chosen


def cps_sequential(u: np.ndarray, design: DesignSpec) -> np.ndarray:
    """Exact conditional Poisson draws from a ``(B, N)`` array of uniforms.

    Units are visited in index order and taken with probability ``Q[j, k]``;
    returns a sorted ``(B, n)`` index array.
    """
    u = np.atleast_2d(u)
    free, Q, certain = design._cps_table
    n_free = Q.shape[1] - 1
    batch = u.shape[0]
    k = np.full(batch, n_free, dtype=np.int64)
    taken = np.zeros((batch, free.size), dtype=bool)
    for j in range(free.size):
        sel = u[:, free[j]] < Q[j, k]
        taken[:, j] = sel
        k -= sel
    rows, cols = np.nonzero(taken)
    picked = free[cols].reshape(batch, n_free)
    if certain.size:
        picked = np.sort(np.hstack([picked, np.broadcast_to(certain, (batch, certain.size))]), axis=1)
    return picked


def draw(
    design: DesignSpec,
    rng: np.random.Generator,
    method: str = "sequential",
    max_attempts: int = MAX_REJECTION_ATTEMPTS,
) -> np.ndarray:
    """Draw one sample; returns sorted unit indices.

    For rejective designs ``method="sequential"`` (default) uses the exact
    one-pass conditional sampler and consumes ``N`` uniforms;
    ``method="rejection"`` redraws Poisson samples from the working
    probabilities until the size is ``n``.  Both produce the same design.
    """
    N = design.N
    if design.kind == "srswor":
        return np.sort(floyd_srswor(rng.random(design.n), N))
    if design.kind == "poisson":
        return np.flatnonzero(rng.random(N) < design.probs)
    if design.kind == "rejective":
        if method == "sequential":
            return cps_sequential(rng.random(N)[None, :], design)[0]
        if method != "rejection":
            raise DesignError(f"unknown rejective method {method!r}")
        for _ in range(max_attempts):
            s = np.flatnonzero(rng.random(N) < design.working)
            if s.size == design.n:
                return s
        raise DesignError(f"rejective sampling exceeded the cap of {max_attempts} attempts")
    return _draw_sampford(design, rng, max_attempts)


def _draw_sampford(design: DesignSpec, rng: np.random.Generator, max_attempts: int) -> np.ndarray:
    free, first_cdf, rest_cdf = design._sampford_cdfs
    certain = np.flatnonzero(design._certain)
    m = design.n - certain.size
    if m == 0:
        return certain
    for _ in range(max_attempts):
        u = rng.random(m)
        a = np.searchsorted(first_cdf, u[0] * first_cdf[-1], side="right")
        b = np.searchsorted(rest_cdf, u[1:] * rest_cdf[-1], side="right")
        picks = np.concatenate([[a], b])
        if np.unique(picks).size == m:
            return np.sort(np.concatenate([free[picks], certain]))
    raise DesignError(f"Sampford sampling exceeded the cap of {max_attempts} attempts")


# ---------------------------------------------------------------------------
# enumeration and inclusion tables


@dataclass(frozen=True, eq=False)
class EnumeratedDesign:
    """Explicit support of a design: membership rows and their probabilities."""

    N: int
    membership: np.ndarray  # (S, N) bool
    probs: np.ndarray  # (S,)

    def __post_init__(self):
        if self.membership.shape != (self.probs.size, self.N):
            raise DesignError("membership / probability shapes disagree")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise DesignError("support probabilities must be >= 0 and sum to 1")

    @cached_property
    def keys(self) -> np.ndarray:
        """Bitmask key of each sample, usable to align supports of two designs."""
        if self.N > 62:
            raise DesignError("bitmask keys need N <= 62")
        return self.membership.astype(np.int64) @ (np.int64(1) << np.arange(self.N, dtype=np.int64))

    @property
    def samples(self) -> list[tuple[int, ...]]:
        return [tuple(np.flatnonzero(row)) for row in self.membership]

    def __len__(self) -> int:
        return self.probs.size

    def sample(self, idx: int) -> np.ndarray:
        return np.flatnonzero(self.membership[idx])

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return dict(zip(self.samples, self.probs.tolist()))


def _subset_rows(free: np.ndarray, N: int, m: int, certain: np.ndarray) -> np.ndarray:
    combos = list(combinations(range(free.size), m))
    combos = np.array(combos, dtype=np.int64).reshape(len(combos), m)
    member = np.zeros((combos.shape[0], N), dtype=bool)
    rows = np.repeat(np.arange(combos.shape[0]), m)
    member[rows, free[combos.ravel()]] = True
    member[:, certain] = True
    return member


def enumerate_design(design: DesignSpec, limit: int = ENUMERATION_LIMIT) -> EnumeratedDesign:
    """Complete support of ``design`` with exact sample probabilities."""
    N = design.N
    certain = np.flatnonzero(design._certain)
    free = np.flatnonzero(~design._certain)
    if free.size > limit:
        raise EnumerationLimitError(
            f"design has {free.size} random units, above the enumeration limit {limit}; "
            "use a Monte Carlo check instead"
        )
    if design.kind == "poisson":
        p = design.probs[free]
        member = np.zeros((2**free.size, N), dtype=bool)
        bits = (np.arange(2**free.size)[:, None] >> np.arange(free.size)) & 1
        member[:, free] = bits.astype(bool)
        member[:, certain] = True
        probs = np.prod(np.where(bits, p, 1.0 - p), axis=1)
        return EnumeratedDesign(N, member, probs / probs.sum())

    m = design.n - certain.size
    member = _subset_rows(free, N, m, certain)
    sub = member[:, free]
    if design.kind == "srswor":
        logp = np.zeros(member.shape[0])
    elif design.kind == "rejective":
        w = design.working[free]
        logp = sub @ (np.log(w) - np.log1p(-w))
    else:
        pi = design.probs[free]
        logp = sub @ (np.log(pi) - np.log1p(-pi))
        with np.errstate(divide="ignore"):
            logp = logp + np.log(sub @ (1.0 - pi))
    probs = np.exp(logp - logsumexp(logp))
    return EnumeratedDesign(N, member, probs / probs.sum())


@dataclass(frozen=True, eq=False)
class InclusionTable:
    """First- and second-order inclusion probabilities, optionally orders 3 and 4.

    ``second`` carries ``pi_i`` on its diagonal.  ``higher`` maps an order to a
    dense array indexed by unit tuples.  SRSWOR tables keep only the sizes
    and answer higher-order queries in closed form.
    """

    first: np.ndarray
    second: np.ndarray
    higher: dict[int, np.ndarray] = field(default_factory=dict)
    srswor_sizes: tuple[int, int] | None = None

    @property
    def N(self) -> int:
        return self.first.size

    @property
    def delta(self) -> np.ndarray:
        return self.second - np.outer(self.first, self.first)

    @property
    def max_order(self) -> int:
        if self.srswor_sizes is not None:
            return 4
        return max([2, *self.higher])

    def joint(self, idx: Sequence[int]) -> float:
        """Probability that all (distinct) units in ``idx`` are selected together."""
        idx = tuple(int(i) for i in idx)
        if len(set(idx)) != len(idx):
            raise DesignError("joint() expects distinct units")
        r = len(idx)
        if r == 1:
            return float(self.first[idx[0]])
        if r == 2:
            return float(self.second[idx])
        if self.srswor_sizes is not None:
            N, n = self.srswor_sizes
            return math.prod((n - t) / (N - t) for t in range(r))
        if r not in self.higher:
            raise DesignError(f"order-{r} inclusion probabilities are not available")
        return float(self.higher[r][idx])


def srswor_table(N: int, n: int) -> InclusionTable:
    p1 = n / N
    p2 = n * (n - 1) / (N * (N - 1)) if N > 1 else 0.0
    second = np.full((N, N), p2)
    np.fill_diagonal(second, p1)
    return InclusionTable(np.full(N, p1), second, srswor_sizes=(N, n))


def inclusion_from_enumeration(enum: EnumeratedDesign, max_order: int = 2) -> InclusionTable:
    M = enum.membership.astype(float)
    p = enum.probs
    first = M.T @ p
    W = M * p[:, None]
    second = W.T @ M
    higher: dict[int, np.ndarray] = {}
    N = enum.N
    if max_order >= 3:
        T3 = np.empty((N, N, N))
        for i in range(N):
            T3[i] = (W * M[:, i : i + 1]).T @ M
        higher[3] = T3
    if max_order >= 4:
        if M.shape[0] * N**4 > 5e9:
            raise EnumerationLimitError("order-4 probabilities too costly for this support size")
        T4 = np.empty((N, N, N, N))
        for i in range(N):
            Wi = W * M[:, i : i + 1]
            for j in range(N):
                T4[i, j] = (Wi * M[:, j : j + 1]).T @ M
        higher[4] = T4
    return InclusionTable(first, second, higher)


def exact_inclusion(
    design: DesignSpec, max_order: int = 2, limit: int = ENUMERATION_LIMIT
) -> InclusionTable:
    """Inclusion probabilities up to ``max_order`` (2, 3 or 4).

    SRSWOR is handled in closed form for any size; the other designs are
    enumerated, which requires at most ``limit`` random units.
    """
    if max_order not in (2, 3, 4):
        raise DesignError("max_order must be 2, 3 or 4")
    if design.kind == "srswor":
        return srswor_table(design.N, design.n)
    if design.kind == "poisson":
        p = design.probs
        second = np.outer(p, p)
        np.fill_diagonal(second, p)
        higher = {}
        if max_order >= 3:
            # only distinct-index cells are meaningful; joint() rejects repeats
            higher[3] = np.einsum("i,j,k->ijk", p, p, p)
        if max_order >= 4:
            higher[4] = np.einsum("i,j,k,l->ijkl", p, p, p, p)
        return InclusionTable(p.copy(), second, higher)
    return inclusion_from_enumeration(enumerate_design(design, limit), max_order)


def design_from_dict(d: dict, sizes: Sequence[float] | None = None, N: int | None = None) -> DesignSpec:
    """Build a design from its JSON form.

    ``{"kind": ..., "n": ..., "probs": [...] | "proportional_to_size" | "equal",
    "working": [...]}``.  ``sizes`` feeds ``proportional_to_size``; ``N`` is
    needed for SRSWOR when no probabilities are given.
    """
    kind = d.get("kind")
    n = d.get("n")
    probs = d.get("probs")
    if kind == "srswor":
        if N is None:
            N = len(probs) if isinstance(probs, list) else (len(sizes) if sizes is not None else None)
        if N is None or n is None:
            raise DesignError("srswor needs N and n")
        return srswor(N, n)
    if probs == "proportional_to_size":
        if sizes is None or n is None:
            raise DesignError("proportional_to_size needs PSU sizes and n")
        probs = pps_probabilities(sizes, n)
    elif probs == "equal":
        if n is None:
            raise DesignError("equal probabilities need n")
        M = N if N is not None else len(sizes)
        probs = np.full(M, n / M)
    if kind == "poisson":
        return poisson(probs)
    if kind == "rejective":
        if d.get("working") is not None:
            return rejective(working=d["working"], n=n)
        return rejective(probs, n)
    if kind == "sampford":
        return sampford(probs, n)
    raise DesignError(f"unknown design kind {kind!r}")
