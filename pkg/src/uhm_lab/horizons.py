"""Horizon measures, their reward coefficients and sampling distributions.

A horizon measure ``nu`` weights future horizons ``k = 1, 2, ...``. It is
stored as finitely many leading atoms plus an optional geometric tail::

    nu(k) = atoms[k-1]                              for k <= len(atoms)
    nu(k) = tail_scale * tail_ratio**(k - tail_start) for k >= tail_start

with ``tail_start = len(atoms) + 1``. The reward coefficients are

    xi(k) = gamma**(k-1) - sum_{i<=k} gamma**(k-i) * nu(i)

i.e. the discounted reward weight not yet handed over to a bootstrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MASS_TOL = 1e-12
# |xi(k)| below this multiple of eps * gamma**(k-1) is cancellation noise.
_XI_SNAP = 64.0


class SupportError(ValueError):
    """Sampling distribution misses a horizon the measure needs."""

    def __init__(self, horizon: int, message: str):
        super().__init__(message)
        self.horizon = horizon


@dataclass(frozen=True, eq=False)
class HorizonMeasure:
    gamma: float
    atoms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tail_scale: float = 0.0
    tail_ratio: float = 0.0

    def __post_init__(self):
        atoms = np.atleast_1d(np.asarray(self.atoms, dtype=np.float64))
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        if np.any(atoms < 0) or self.tail_scale < 0:
            raise ValueError("horizon measure weights must be non-negative")
        if not 0.0 <= self.tail_ratio < 1.0:
            raise ValueError(f"tail ratio must lie in [0, 1), got {self.tail_ratio}")
        if self.total_mass() > 1.0 + MASS_TOL:
            raise ValueError(f"total mass {self.total_mass()!r} exceeds 1")

    @property
    def has_tail(self) -> bool:
        return self.tail_scale > 0.0

    @property
    def tail_start(self) -> int:
        return len(self.atoms) + 1

    @property
    def support_end(self) -> int | None:
        """Largest horizon with non-zero weight, or None for an infinite tail."""
        if self.has_tail:
            return None
        nz = np.flatnonzero(self.atoms)
        return int(nz[-1]) + 1 if len(nz) else 0

    def weight(self, k) -> np.ndarray:
        """nu(k) for integer horizon(s) ``k >= 1``."""
        k = np.asarray(k, dtype=np.int64)
        out = np.zeros(k.shape)
        inside = k <= len(self.atoms)
        out[inside] = self.atoms[k[inside] - 1]
        if self.has_tail:
            beyond = ~inside
            out[beyond] = self.tail_scale * self.tail_ratio ** (k[beyond] - self.tail_start)
        return out

    def weights(self, K: int) -> np.ndarray:
        """nu(1..K)."""
        return self.weight(np.arange(1, K + 1))

    def total_mass(self) -> float:
        mass = float(self.atoms.sum())
        if self.has_tail:
            mass += self.tail_scale / (1.0 - self.tail_ratio)
        return mass


def geometric_measure(lam: float, gamma: float) -> HorizonMeasure:
    """nu(k) = (1 - lam) (lam gamma)**(k-1): the TD(lambda) measure."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if lam == 0.0:
        return HorizonMeasure(gamma, np.array([1.0]))
    return HorizonMeasure(gamma, np.zeros(0), tail_scale=1.0 - lam, tail_ratio=lam * gamma)


def nstep_measure(n: int, gamma: float) -> HorizonMeasure:
    """Single atom gamma**(n-1) at horizon n: the n-step TD measure."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    atoms = np.zeros(n)
    atoms[-1] = gamma ** (n - 1)
    return HorizonMeasure(gamma, atoms)


def winsorized_geometric_measure(lam: float, gamma: float, k_max: int) -> HorizonMeasure:
    """Geometric measure with all weight past ``k_max`` folded onto ``k_max``.

    nu(k) = (1-lam)(lam gamma)**(k-1) for k < k_max, (lam gamma)**(k_max-1)
    at k_max, zero beyond.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if not 0.0 <= lam <= 1.0 or not 0.0 < gamma <= 1.0:
        raise ValueError(f"need lambda in [0, 1] and gamma in (0, 1], got {lam}, {gamma}")
    ratio = lam * gamma
    k = np.arange(1, k_max + 1)
    atoms = (1.0 - lam) * ratio ** (k - 1)
    atoms[-1] = ratio ** (k_max - 1)
    return HorizonMeasure(gamma, atoms)


def xi_coefficients(nu: HorizonMeasure, K: int, gamma: float | None = None) -> np.ndarray:
    """Reward coefficients xi(1..K).

    Uses the recursion xi(1) = 1 - nu(1), xi(k+1) = gamma xi(k) - nu(k+1),
    and snaps values within rounding noise of zero to exactly zero. When xi
    vanishes past a finite support (sum_i gamma**(1-i) nu(i) = 1), the forward
    recursion loses all relative accuracy as xi decays, so the equivalent
    backward form xi(k-1) = (xi(k) + nu(k)) / gamma, started from zero at the
    support end, is used instead; it only adds non-negative terms.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    g = nu.gamma if gamma is None else gamma
    backward = _xi_backward(nu, g, K)
    if backward is not None:
        return backward
    w = nu.weights(K)
    xi = np.empty(K)
    prev = 0.0
    for i in range(K):
        prev = 1.0 - w[0] if i == 0 else g * prev - w[i]
        scale = g**i
        if abs(prev) <= _XI_SNAP * np.finfo(float).eps * max(scale, 1e-300):
            prev = 0.0
        xi[i] = prev
    return xi


def _xi_backward(nu: HorizonMeasure, g: float, K: int) -> np.ndarray | None:
    """Stable xi for finitely supported measures whose xi vanishes past the support."""
    if nu.has_tail or len(nu.atoms) == 0:
        return None
    end = len(nu.atoms)
    with np.errstate(over="ignore"):
        scaled = g ** -np.arange(end, dtype=np.float64) * nu.atoms
    total = float(scaled.sum())
    if not np.isfinite(total) or abs(1.0 - total) > _XI_SNAP * np.finfo(float).eps * max(total, 1.0):
        return None
    xi = np.zeros(max(K, end))
    for k in range(end - 1, 0, -1):
        # xi(k) = (xi(k+1) + nu(k+1)) / gamma, zero-based index k-1
        xi[k - 1] = (xi[k] + nu.atoms[k]) / g
    return xi[:K]


def xi_tail(nu: HorizonMeasure, gamma: float | None = None) -> tuple[float, float]:
    """Closed form of xi beyond the atoms of a tailed measure.

    Returns ``(A, B)`` with xi(k) = A gamma**(k-k0) + B rho**(k-k0) for
    k >= k0 = tail_start, where rho is the tail ratio.
    """
    g = nu.gamma if gamma is None else gamma
    rho, c = nu.tail_ratio, nu.tail_scale
    if not nu.has_tail:
        raise ValueError("measure has no geometric tail")
    if math.isclose(rho, g, rel_tol=0.0, abs_tol=1e-15):
        raise ValueError("tail ratio equal to gamma is not supported")
    k0 = nu.tail_start
    xi_k0 = xi_coefficients(nu, k0, g)[-1]
    b = c * rho / (g - rho)
    return xi_k0 - b, b


@dataclass(frozen=True, eq=False)
class HorizonDistribution:
    """Probability ``probs[k-1] = p_H(k)`` over horizons 1..k_max."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.probs, dtype=np.float64))
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("horizon distribution needs at least one atom")
        if np.any(p < 0) or abs(p.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"horizon probabilities must be non-negative and sum to 1, got sum {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "_cdf", np.cumsum(p))

    @property
    def k_max(self) -> int:
        return len(self.probs)

    @classmethod
    def winsorized_geometric(cls, ratio: float, k_max: int) -> "HorizonDistribution":
        """Law of min(N, k_max) with N ~ Geom(1 - ratio) on {1, 2, ...}."""
        if k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {k_max}")
        k = np.arange(1, k_max + 1)
        p = (1.0 - ratio) * ratio ** (k - 1)
        p[-1] = ratio ** (k_max - 1)
        return cls(p)

    def pmf(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.int64)
        out = np.zeros(k.shape)
        ok = (k >= 1) & (k <= self.k_max)
        out[ok] = self.probs[k[ok] - 1]
        return out

    def sample(self, rng, size=None):
        """Inverse-CDF draws; an int when ``size`` is None."""
        u = rng.random(size)
        k = np.searchsorted(self._cdf, u, side="right")
        k = np.minimum(k, self.k_max - 1) + 1
        return int(k) if size is None else k.astype(np.int64)


def sample_horizon(p_h: HorizonDistribution, rng, size=None):
    return p_h.sample(rng, size)


def importance_ratios(
    nu: HorizonMeasure,
    xi: np.ndarray | None,
    p_h: HorizonDistribution,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-horizon weights (w_xi, w_nu) = (xi/p_H, nu/p_H) on 1..k_max.

    Raises SupportError naming the first horizon where nu or xi is
    non-zero but p_H is zero (including horizons beyond k_max).
    """
    k_max = p_h.k_max
    if nu.has_tail:
        raise SupportError(k_max + 1, f"measure has infinite support but p_H stops at k_max={k_max}")
    end = max(k_max, nu.support_end or 0)
    xi_full = xi_coefficients(nu, end + 1)
    if xi is not None:
        xi = np.asarray(xi, dtype=np.float64)
        xi_full[: min(len(xi), end + 1)] = xi[: end + 1]
    nu_full = nu.weights(end + 1)
    p_full = np.zeros(end + 1)
    p_full[:k_max] = p_h.probs
    needed = (nu_full != 0.0) | (xi_full != 0.0)
    missing = np.flatnonzero(needed & (p_full == 0.0))
    if len(missing):
        k = int(missing[0]) + 1
        raise SupportError(
            k, f"p_H(k)=0 at k={k} but nu(k)={nu_full[k - 1]!r}, xi(k)={xi_full[k - 1]!r}"
        )
    # Past the support of nu, xi(k) = gamma**(k-end) xi(end): non-zero forever.
    if xi_full[end] != 0.0:
        raise SupportError(end + 1, f"xi does not vanish past k={end} (xi={xi_full[end]!r})")
    p = p_h.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        w_xi = np.where(p > 0, xi_full[:k_max] / np.where(p > 0, p, 1.0), 0.0)
        w_nu = np.where(p > 0, nu_full[:k_max] / np.where(p > 0, p, 1.0), 0.0)
    return w_xi, w_nu


def winsorized_kmax(lam: float, gamma: float, q: float) -> int:
    """Smallest k >= 1 with upper-tail mass (lam gamma)**k <= q."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    ratio = lam * gamma
    if ratio <= 0.0:
        return 1
    if ratio >= 1.0:
        raise ValueError(f"lambda * gamma must be < 1, got {ratio}")
    k = max(1, math.ceil(math.log(q) / math.log(ratio)))
    while k > 1 and ratio ** (k - 1) <= q:
        k -= 1
    while ratio**k > q:
        k += 1
    return k


def schedule_lambda(r: float, lam_final: float) -> float:
    """lambda(r) = r lam_f / (1 - (1 - r) lam_f), so 1/(1-lambda) is affine in r."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {r}")
    if not 0.0 <= lam_final < 1.0:
        raise ValueError(f"final lambda must lie in [0, 1), got {lam_final}")
    return r * lam_final / (1.0 - (1.0 - r) * lam_final)


@dataclass(frozen=True)
class LambdaSchedule:
    lam_final: float = 0.8
    q: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam_final < 1.0:
            raise ValueError(f"final lambda must lie in [0, 1), got {self.lam_final}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")

    def lam(self, r: float) -> float:
        return schedule_lambda(r, self.lam_final)

    def at(self, r: float, gamma: float) -> tuple[float, int, HorizonDistribution]:
        """(lambda, k_max, p_H) at training progress ``r``."""
        lam = self.lam(r)
        k_max = winsorized_kmax(lam, gamma, self.q)
        return lam, k_max, HorizonDistribution.winsorized_geometric(lam * gamma, k_max)

    def max_kmax(self, gamma: float) -> int:
        return winsorized_kmax(self.lam_final, gamma, self.q)


def winsorized_target_weights(lam: float, gamma: float, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (w_xi, w_nu) over n = 1..k_max for the winsorized pair."""
    ratio = lam * gamma
    w_xi = np.full(k_max, lam / (1.0 - ratio))
    w_nu = np.full(k_max, (1.0 - lam) / (1.0 - ratio))
    w_xi[-1], w_nu[-1] = 0.0, 1.0
    return w_xi, w_nu
