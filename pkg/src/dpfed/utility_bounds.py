"""Closed-form expected l1 perturbation of released parameters.

Each bound is ``m * T * E|X|`` for a loss of length m perturbed coordinatewise
over T rounds.  The staircase bound exists in two modes: ``"numeric"`` (the
default ground truth, exact band summation of the implemented density) and
``"as_published"`` (a literal textbook expression that mixes Delta^2 and Delta
terms; kept inspectable, never asserted equal to the numeric mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .accountant import optimal_staircase_nu
from .mechanisms import MechanismKind, MechanismParams, expected_abs_noise

BOUND_MODES = ("numeric", "as_published")


@dataclass(frozen=True)
class BoundQuery:
    mechanism: MechanismParams
    loss_length_m: int
    rounds_T: int

    def __post_init__(self) -> None:
        if not (isinstance(self.loss_length_m, int) and self.loss_length_m > 0):
            raise ValueError(f"loss_length_m must be a positive integer, got {self.loss_length_m}")
        if not (isinstance(self.rounds_T, int) and self.rounds_T > 0):
            raise ValueError(f"rounds_T must be a positive integer, got {self.rounds_T}")


def _require_kind(q: BoundQuery, kind: MechanismKind) -> None:
    if q.mechanism.kind is not kind:
        raise ValueError(f"expected a {kind.value} mechanism, got {q.mechanism.kind.value}")


def l1_bound_gaussian(q: BoundQuery) -> float:
    """m * T * sigma * sqrt(2/pi)."""
    _require_kind(q, MechanismKind.GAUSSIAN)
    return q.loss_length_m * q.rounds_T * q.mechanism.scale * math.sqrt(2.0 / math.pi)


def l1_bound_laplace(q: BoundQuery) -> float:
    """m * T * b."""
    _require_kind(q, MechanismKind.LAPLACE)
    return q.loss_length_m * q.rounds_T * q.mechanism.scale


def l1_bound_staircase(q: BoundQuery, mode: str = "numeric") -> float:
    """Staircase expected l1 perturbation.

    ``"numeric"``: m * T * E|X| by exact band summation.  ``"as_published"``:
    the literal expression
    ``(mT / (1 - e^-lam)) * (nu^2 D^2 + e^-lam D^2 - e^-lam nu^2 D^2 + D e^-lam)``.
    """
    _require_kind(q, MechanismKind.STAIRCASE)
    if mode not in BOUND_MODES:
        raise ValueError(f"mode must be one of {BOUND_MODES}, got {mode!r}")
    m, t = q.loss_length_m, q.rounds_T
    if mode == "numeric":
        return m * t * expected_abs_noise(q.mechanism)
    lam, nu, d = q.mechanism.scale, q.mechanism.nu, q.mechanism.sensitivity
    e = math.exp(-lam)
    return m * t / (1.0 - e) * (nu**2 * d**2 + e * d**2 - e * nu**2 * d**2 + d * e)


def optimal_nu(lam: float) -> tuple[float, float]:
    """Amplitude-minimizing band fraction and the per-Delta minimum amplitude
    ``e^{lam/2} / (e^lam - 1)``."""
    if not (math.isfinite(lam) and lam > 0):
        raise ValueError(f"lam must be positive, got {lam}")
    nu = optimal_staircase_nu(lam)
    # e^{lam/2} / (e^lam - 1) == 1 / (2 sinh(lam/2)), stable for small lam
    return nu, 1.0 / (2.0 * math.sinh(lam / 2.0))
