"""Renyi-divergence privacy accountant and noise calibration.

The accountant composes per-application Renyi divergences additively on a
fixed grid of orders alpha, converts the composed curve to an (epsilon,
delta)-DP guarantee via

    epsilon(delta) = min_alpha { gamma_alpha + log(1/delta) / (alpha - 1) },

and calibrates the minimal noise scale whose T-fold composition stays inside
a target budget.  Calibration bisects a monotone privacy knob: sigma for
Gaussian, b for Laplace and 1/lam for Staircase (with nu pinned to the
amplitude-optimal 1 / (1 + e^{lam/2}) for each candidate lam).  Composed
epsilon is strictly decreasing in the knob, so bisection brackets the minimal
feasible noise; on return, one relative tolerance step toward less noise
violates the budget.

Shuffle-model amplification bounds (integer alpha >= 2, per-application pure
DP level gamma, N clients) are provided as a sandwich:

    gamma_u = log(1 + C(alpha,2) * 4 (e^gamma - 1)^2 / N) / (alpha - 1)
    gamma_l = log(1 + C(alpha,2) * (e^gamma - 1)^2 / (N e^gamma)) / (alpha - 1)

Amplification is reported post hoc by default; ``calibrate_noise`` accepts an
opt-in ``shuffle_clients`` argument that calibrates against the entrywise
minimum of the mechanism curve and the upper amplification bound (Gaussian is
excluded: it has no finite pure-DP level to amplify).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mechanisms import MechanismKind, MechanismParams, pure_dp_epsilon, rdp

KNOB_BOUNDS = (1e-4, 1e6)


class InfeasibleBudgetError(ValueError):
    """No noise scale within the knob search bounds satisfies the budget."""


def default_alpha_grid() -> np.ndarray:
    """Integers 2..64 plus {1.25, 1.5, 1.75}."""
    return np.concatenate(([1.25, 1.5, 1.75], np.arange(2.0, 65.0)))


def validate_alpha_grid(grid) -> np.ndarray:
    arr = np.asarray(grid, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("alpha grid must be a non-empty 1-D sequence")
    if not np.all(arr > 1.0):
        raise ValueError("all alpha grid entries must exceed 1")
    if not np.all(np.diff(arr) > 0):
        raise ValueError("alpha grid must be strictly increasing (no duplicates)")
    return arr


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (epsilon, delta) pair plus composition horizon."""

    epsilon: float
    delta: float
    horizon_T: int

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"budget epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"budget delta must lie in (0, 1), got {self.delta}")
        if not (isinstance(self.horizon_T, int) and self.horizon_T > 0):
            raise ValueError(f"horizon_T must be a positive integer, got {self.horizon_T}")


@dataclass
class SpendDecision:
    """Outcome of a tentative spend: Continue with headroom, or Halt."""

    halted: bool
    remaining_epsilon: float = math.nan

    def __bool__(self) -> bool:  # truthy when training may continue
        return not self.halted


@dataclass
class RdpLedger:
    """Cumulative composed Renyi divergence per grid order.

    Single-writer: compose/spend mutate in place; gamma entries never
    decrease.
    """

    alpha_grid: np.ndarray
    gamma: np.ndarray = field(default=None)  # type: ignore[assignment]
    rounds_composed: int = 0

    def __post_init__(self) -> None:
        self.alpha_grid = validate_alpha_grid(self.alpha_grid)
        if self.gamma is None:
            self.gamma = np.zeros_like(self.alpha_grid)
        else:
            self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.shape != self.alpha_grid.shape:
            raise ValueError("gamma length must match the alpha grid")
        if np.any(self.gamma < 0):
            raise ValueError("gamma entries must be non-negative")

    def _check_curve(self, curve) -> np.ndarray:
        arr = np.asarray(curve, dtype=float)
        if arr.shape != self.alpha_grid.shape:
            raise ValueError(
                f"curve length {arr.shape} does not match the ledger grid {self.alpha_grid.shape}"
            )
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("curve entries must be finite and non-negative")
        return arr

    def compose(self, curve) -> "RdpLedger":
        """Entrywise-add one per-application curve; increments the round count."""
        arr = self._check_curve(curve)
        self.gamma += arr
        self.rounds_composed += 1
        return self

    def to_dp(self, delta: float) -> tuple[float, float]:
        """Convert the composed curve to (epsilon, minimizing alpha).

        Ties resolve to the smallest alpha.
        """
        if not (0.0 < delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        candidates = self.gamma + math.log(1.0 / delta) / (self.alpha_grid - 1.0)
        idx = int(np.argmin(candidates))
        return float(candidates[idx]), float(self.alpha_grid[idx])

    def spend(self, curve, budget: PrivacyBudget) -> SpendDecision:
        """Tentatively compose ``curve``; Halt (ledger unchanged) if the
        budget epsilon would be exceeded, else commit and report headroom."""
        arr = self._check_curve(curve)
        trial = self.gamma + arr
        candidates = trial + math.log(1.0 / budget.delta) / (self.alpha_grid - 1.0)
        eps_after = float(np.min(candidates))
        if eps_after > budget.epsilon:
            return SpendDecision(halted=True)
        self.gamma = trial
        self.rounds_composed += 1
        return SpendDecision(halted=False, remaining_epsilon=budget.epsilon - eps_after)


def rdp_curve(params: MechanismParams, grid) -> np.ndarray:
    """Per-application Renyi divergence evaluated on every grid order."""
    arr = validate_alpha_grid(grid)
    return np.array([rdp(params, a) for a in arr])


_CURVE_CACHE: dict[tuple, np.ndarray] = {}


def cached_rdp_curve(params: MechanismParams, grid) -> np.ndarray:
    """Memoized :func:`rdp_curve` for hot composition loops."""
    key = (params, np.asarray(grid, dtype=float).tobytes())
    hit = _CURVE_CACHE.get(key)
    if hit is None:
        hit = _CURVE_CACHE[key] = rdp_curve(params, grid)
    return hit


@dataclass(frozen=True)
class CalibrationResult:
    mechanism: MechanismParams
    achieved_epsilon: float
    minimizing_alpha: float
    iterations: int


def optimal_staircase_nu(lam: float) -> float:
    """Amplitude-minimizing band fraction nu = 1 / (1 + e^{lam/2})."""
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    z = math.exp(-lam / 2.0)
    # clamp into the open interval (0, 1) when e^{-lam/2} underflows
    return max(z / (1.0 + z), 1e-300)


def _params_from_knob(kind: MechanismKind, sensitivity: float, knob: float) -> MechanismParams:
    if kind is MechanismKind.STAIRCASE:
        lam = 1.0 / knob
        return MechanismParams(kind, sensitivity, lam, nu=optimal_staircase_nu(lam))
    return MechanismParams(kind, sensitivity, knob)


def calibrate_noise(
    kind: MechanismKind,
    sensitivity: float,
    budget: PrivacyBudget,
    grid=None,
    tolerance: float = 1e-4,
    shuffle_clients: int | None = None,
) -> CalibrationResult:
    """Minimal-noise scale whose ``budget.horizon_T``-fold composition meets
    the budget.

    Bisects the privacy knob in log space inside ``KNOB_BOUNDS`` until the
    bracket is within the relative ``tolerance``; the returned scale sits on
    the feasible side, and perturbing it one tolerance step toward less noise
    violates the budget.  Raises :class:`InfeasibleBudgetError` when even the
    maximum-noise knob cannot meet the budget (never clamps silently).

    ``shuffle_clients`` opts into calibrating against the entrywise minimum of
    the mechanism curve and the shuffle-amplified upper bound on the integer
    grid orders (pure-DP mechanisms only).
    """
    arr = validate_alpha_grid(default_alpha_grid() if grid is None else grid)
    if not tolerance > 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    if shuffle_clients is not None:
        if kind is MechanismKind.GAUSSIAN:
            raise ValueError("shuffle-amplified calibration needs a finite pure-DP level; Gaussian has none")
        if shuffle_clients < 1:
            raise ValueError("shuffle_clients must be a positive integer")

    log_conv = math.log(1.0 / budget.delta) / (arr - 1.0)
    evals = 0

    def composed_epsilon(knob: float) -> float:
        nonlocal evals
        evals += 1
        params = _params_from_knob(kind, sensitivity, knob)
        curve = rdp_curve(params, arr)
        if shuffle_clients is not None:
            curve = np.minimum(curve, _amplified_curve(params, arr, shuffle_clients))
        return float(np.min(budget.horizon_T * curve + log_conv))

    lo, hi = KNOB_BOUNDS
    if composed_epsilon(hi) > budget.epsilon:
        raise InfeasibleBudgetError(
            f"budget (epsilon={budget.epsilon}, delta={budget.delta}, T={budget.horizon_T}) "
            f"is infeasible for {kind.value} within knob bounds {KNOB_BOUNDS}"
        )
    if composed_epsilon(lo) <= budget.epsilon:
        # Budget so loose that the minimum-noise bound already satisfies it;
        # minimality is then limited by the search floor.
        hi = lo
    while hi / lo > 1.0 + tolerance:
        mid = math.sqrt(lo * hi)
        if composed_epsilon(mid) <= budget.epsilon:
            hi = mid
        else:
            lo = mid
    params = _params_from_knob(kind, sensitivity, hi)
    curve = rdp_curve(params, arr)
    if shuffle_clients is not None:
        curve = np.minimum(curve, _amplified_curve(params, arr, shuffle_clients))
    candidates = budget.horizon_T * curve + log_conv
    idx = int(np.argmin(candidates))
    return CalibrationResult(
        mechanism=params,
        achieved_epsilon=float(candidates[idx]),
        minimizing_alpha=float(arr[idx]),
        iterations=evals,
    )


def _amplified_curve(params: MechanismParams, grid: np.ndarray, n_clients: int) -> np.ndarray:
    """Shuffle-amplified upper bound on the integer grid orders; non-integer
    orders keep the un-amplified value (the lemma is stated for integer
    alpha)."""
    base = np.full_like(grid, math.inf)
    pure = pure_dp_epsilon(params)
    for i, a in enumerate(grid):
        if float(a).is_integer() and a >= 2:
            base[i] = shuffle_amplify_upper(pure, int(a), n_clients)
    return base


def _binom2(alpha: int) -> float:
    return alpha * (alpha - 1) / 2.0


def _check_shuffle_args(gamma: float, alpha, n_clients: int) -> int:
    if not (isinstance(alpha, (int, np.integer)) or float(alpha).is_integer()):
        raise ValueError(f"shuffle amplification is stated for integer alpha, got {alpha}")
    alpha = int(alpha)
    if alpha < 2:
        raise ValueError(f"shuffle amplification needs alpha >= 2, got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if n_clients < 1:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    return alpha


def shuffle_amplify_upper(gamma: float, alpha, n_clients: int) -> float:
    """Upper bound on the shuffle model's Renyi divergence of order alpha."""
    alpha = _check_shuffle_args(gamma, alpha, n_clients)
    if gamma > 350.0:  # expm1 would overflow; the bound is vacuous anyway
        return math.inf
    excess = _binom2(alpha) * 4.0 * math.expm1(gamma) ** 2 / n_clients
    return math.log1p(excess) / (alpha - 1)


def shuffle_amplify_lower(gamma: float, alpha, n_clients: int) -> float:
    """Lower bound on the shuffle model's Renyi divergence of order alpha."""
    alpha = _check_shuffle_args(gamma, alpha, n_clients)
    if gamma > 350.0:
        return math.inf
    # (e^g - 1)^2 / e^g == 4 sinh(g/2)^2, stable for large gamma
    excess = _binom2(alpha) * 4.0 * math.sinh(gamma / 2.0) ** 2 / n_clients
    return math.log1p(excess) / (alpha - 1)
