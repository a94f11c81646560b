"""Photon-number statistics of phase-randomized weak laser pulses.

A pulse of mean photon number mu is a Poisson mixture over Fock states.
For the security analysis each non-vacuum pulse is rewritten as a convex
combination of vacuum, the single-photon state, and a ladder of worst-case
multiphoton mixtures (one per configured intensity) that an adversary is
assumed to distinguish perfectly.  This module builds those mixtures and
the per-pulse-class generation probabilities.

Pulse classes are indexed 0..2k: 0 is vacuum, 1..k are the intensities in
the diagonal basis, k+1..2k the same intensities in the rectilinear basis.
States are indexed 0..2k+1: 0 vacuum, 1 single photon, 2..k+1 multiphoton
mixtures tagged diagonal, k+2..2k+1 the same mixtures tagged rectilinear.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "IntensitySet",
    "PhotonNumberDist",
    "TaggedStateModel",
    "InfeasibleDecomposition",
    "poisson_weight",
    "multiphoton_weight",
    "build_worst_case_states",
    "tagged_state_model",
]

DEFAULT_FOCK_CUTOFF = 40
_TAIL_TOL = 1e-9


class InfeasibleDecomposition(ValueError):
    """No nonnegative convex decomposition exists for these intensities."""


@dataclass(frozen=True)
class IntensitySet:
    """The configured pulse intensities, vacuum included.

    mu[0] must be 0 and the rest strictly increasing.  signal_index picks
    which nonzero intensity (1-based) carries the raw key.
    """

    mu: tuple
    signal_index: int

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        object.__setattr__(self, "mu", mu)
        if len(mu) < 2 or mu[0] != 0.0:
            raise ValueError("mu must start with the vacuum intensity 0")
        if any(b <= a for a, b in zip(mu, mu[1:])):
            raise ValueError("intensities must be strictly increasing")
        if not 1 <= self.signal_index <= self.k:
            raise ValueError("signal_index out of range")

    @property
    def k(self) -> int:
        return len(self.mu) - 1

    @property
    def nonzero(self) -> tuple:
        return self.mu[1:]

    @property
    def n_classes(self) -> int:
        return 2 * self.k + 1

    @property
    def n_states(self) -> int:
        return 2 * self.k + 2

    def signal_class(self, basis: str) -> int:
        """Pulse-class index of the signal intensity in the given basis."""
        if basis == "times":
            return self.signal_index
        if basis == "plus":
            return self.signal_index + self.k
        raise ValueError("basis must be 'plus' or 'times'")


@dataclass(frozen=True)
class PhotonNumberDist:
    """Probabilities over photon number n = 0..n_max."""

    probs: np.ndarray
    n_max: int

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.size != self.n_max + 1:
            raise ValueError("probs length must be n_max + 1")
        if p.min() < 0:
            raise ValueError("negative probability entry")
        if not 1 - 1e-9 <= p.sum() <= 1 + 1e-12:
            raise ValueError("probabilities must sum to 1 within 1e-9")

    def to_json_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "probs": [f"{x:.17g}" for x in self.probs],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PhotonNumberDist":
        return cls(np.array([float(x) for x in d["probs"]]), int(d["n_max"]))


def poisson_weight(mu: float, n: int) -> float:
    """P(n photons) for a phase-randomized pulse of mean photon number mu."""
    if mu < 0 or n < 0:
        raise ValueError("mu and n must be nonnegative")
    if mu == 0.0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))


def _homogeneous(degree: int, xs) -> float:
    """Complete homogeneous symmetric polynomial h_degree(xs)."""
    h = [1] + [0] * degree
    for x in xs:
        for d in range(1, degree + 1):
            h[d] = h[d] + x * h[d - 1]
    return h[degree]


def _gamma(order: int, n: int, mus):
    """Unnormalized Fock weight of the worst-case mixture of given order.

    The defining sum over interpolation terms telescopes into a product of
    positive intensity gaps times a complete homogeneous symmetric
    polynomial; that form is evaluated here because it is numerically
    stable and manifestly nonnegative (the raw sum cancels catastrophically
    at Fock levels below the order, where the weight is exactly zero).
    Works on any field (floats or Fractions); empty products are 1.
    """
    if n < order:
        return 0 * mus[0]
    top = mus[order - 2]  # mu_{order-1}, 0-based list of nonzero intensities
    common = top * top
    for m in range(order - 2):
        common = common * (top - mus[m])
    return common * _homogeneous(n - order, mus[:order - 1])


def multiphoton_weight(order: int, n: int, intensities: IntensitySet) -> float:
    """Weight of Fock level n in the order-th worst-case mixture (order >= 2)."""
    if not 2 <= order <= intensities.k + 1:
        raise ValueError("order must be in 2..k+1")
    if n < 2:
        raise ValueError("multiphoton weights are defined for n >= 2")
    mus = intensities.nonzero
    if len(set(mus)) != len(mus):
        raise ValueError("degenerate intensities: weights are undefined")
    return float(_gamma(order, n, mus))


def _tail_ok(weights_fn, n_max: int, extra: int = 80) -> bool:
    head = sum(weights_fn(n) for n in range(2, n_max + 1))
    tail = sum(weights_fn(n) for n in range(n_max + 1, n_max + 1 + extra))
    return head > 0 and tail <= _TAIL_TOL * head


def build_worst_case_states(intensities: IntensitySet,
                            n_max: int = DEFAULT_FOCK_CUTOFF) -> list:
    """The k worst-case multiphoton mixtures, orders 2..k+1, truncated at n_max.

    Each mixture is supported on n >= 2 and normalized on the truncated range.
    """
    if n_max < 10:
        raise ValueError("n_max must be at least 10")
    mus = intensities.nonzero
    out = []
    for order in range(2, intensities.k + 2):
        def w(n, _o=order):
            return _gamma(_o, n, mus) / math.factorial(n)

        if not _tail_ok(w, n_max):
            raise ValueError(
                f"truncated tail mass above {_TAIL_TOL} for mixture order {order}; "
                "increase n_max")
        probs = np.zeros(n_max + 1)
        for n in range(2, n_max + 1):
            probs[n] = w(n)
        if probs.min() < -1e-15 * probs.max():
            raise InfeasibleDecomposition(
                f"negative Fock weight in mixture order {order}")
        probs = np.clip(probs, 0.0, None)
        probs /= probs.sum()
        out.append(PhotonNumberDist(probs, n_max))
    return out


@dataclass(frozen=True)
class TaggedStateModel:
    """Generation probabilities of each tagged state per pulse class.

    P has one row per pulse class (0..2k) and one column per state
    (0..2k+1).  rho holds the k multiphoton mixtures shared by both bases.
    """

    intensities: IntensitySet
    P: np.ndarray
    rho: list = field(repr=False)
    n_max: int = DEFAULT_FOCK_CUTOFF

    @property
    def k(self) -> int:
        return self.intensities.k

    def state_dist(self, j: int) -> PhotonNumberDist:
        """Photon-number distribution of state j on the truncated range."""
        k = self.k
        probs = np.zeros(self.n_max + 1)
        if j == 0:
            probs[0] = 1.0
        elif j == 1:
            probs[1] = 1.0
        elif 2 <= j <= k + 1:
            return self.rho[j - 2]
        elif k + 2 <= j <= 2 * k + 1:
            return self.rho[j - k - 2]
        else:
            raise ValueError("state index out of range")
        return PhotonNumberDist(probs, self.n_max)

    def reconstruct(self, class_i: int) -> np.ndarray:
        """Mixture photon-number distribution of a pulse class."""
        out = np.zeros(self.n_max + 1)
        for j in range(self.P.shape[1]):
            w = self.P[class_i, j]
            if w:
                out += w * self.state_dist(j).probs
        return out

    def class_intensity(self, class_i: int) -> float:
        k = self.k
        if class_i == 0:
            return 0.0
        if 1 <= class_i <= k:
            return self.intensities.mu[class_i]
        if k + 1 <= class_i <= 2 * k:
            return self.intensities.mu[class_i - k]
        raise ValueError("pulse class out of range")

    def class_basis(self, class_i: int) -> str:
        if class_i == 0:
            return "vacuum"
        return "times" if class_i <= self.k else "plus"

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "signal_index": self.intensities.signal_index,
            "mu": [f"{m:.17g}" for m in self.intensities.mu],
            "n_max": self.n_max,
            "P": [[f"{x:.17g}" for x in row] for row in self.P],
            "rho": [r.to_json_dict() for r in self.rho],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


def tagged_state_model(intensities: IntensitySet,
                       n_max: int = DEFAULT_FOCK_CUTOFF) -> TaggedStateModel:
    """Decompose every pulse class over the tagged states.

    The convex weights are the unique solution of the truncated Fock
    matching system (least-squares solve); any residual beyond 1e-9 per
    Fock entry or a negative weight marks the intensity configuration
    infeasible.
    """
    k = intensities.k
    rho = build_worst_case_states(intensities, n_max)
    ladder = np.column_stack([r.probs[2:] for r in rho])  # rows n=2..n_max

    P = np.zeros((2 * k + 1, 2 * k + 2))
    P[0, 0] = 1.0
    for c, mu in enumerate(intensities.nonzero, start=1):
        # Poisson tail mass beyond the cutoff must be negligible too.
        if sum(poisson_weight(mu, n) for n in range(n_max + 1)) < 1 - _TAIL_TOL:
            raise ValueError("Poisson tail mass above threshold; increase n_max")
        target = np.array([poisson_weight(mu, n) for n in range(2, n_max + 1)])
        weights, *_ = np.linalg.lstsq(ladder, target, rcond=None)
        resid = ladder @ weights - target
        if np.max(np.abs(resid)) > 1e-9:
            raise InfeasibleDecomposition(
                f"Fock matching residual {np.max(np.abs(resid)):.3g} for mu={mu}")
        if weights.min() < -1e-9:
            raise InfeasibleDecomposition(
                f"negative mixture weight {weights.min():.3g} for mu={mu}")
        weights = np.clip(weights, 0.0, None)
        for row in (c, c + k):
            P[row, 0] = poisson_weight(mu, 0)
            P[row, 1] = poisson_weight(mu, 1)
        P[c, 2:k + 2] = weights
        P[c + k, k + 2:] = weights
    return TaggedStateModel(intensities, P, rho, n_max)
