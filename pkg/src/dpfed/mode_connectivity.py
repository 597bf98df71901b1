"""Curve parameterizations between model parameter pairs and curve training.

A curve ``phi_theta : [0, 1] -> R^d`` joins two parameter vectors w1, w2 with
a trainable bend theta:

* polygonal chain: ``2 (p theta + (0.5 - p) w1)`` for p <= 0.5 and
  ``2 ((p - 0.5) w2 + (1 - p) theta)`` for p > 0.5;
* quadratic Bezier: ``(1-p)^2 w1 + 2 p (1-p) theta + p^2 w2``.

Training minimizes the expected loss along the curve by stochastic descent on
theta (endpoints never move): sample p ~ U(0, 1), step along
``dphi/dtheta * grad_loss(phi(p))`` where the chain-rule factor is ``2p`` /
``2(1-p)`` for the polygonal chain and ``2p(1-p)`` for the Bezier curve.

Also provided: the closed-form optimal bend for L-smooth losses, the Bezier
form of the averaged model update, pairwise merge aggregation, and the
worst-case extra-rounds diagnostic ``Delta^2 e^eps / (e^eps - 1)^2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .mechanisms import NoiseStream


class CurveKind(enum.Enum):
    POLYGONAL_CHAIN = "polygonal"
    QUADRATIC_BEZIER = "bezier"


@dataclass
class CurveSpec:
    """Endpoints plus the bend; the bend defaults to the midpoint."""

    kind: CurveKind
    endpoint_w1: np.ndarray
    endpoint_w2: np.ndarray
    bend_theta: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.endpoint_w1 = np.asarray(self.endpoint_w1, dtype=float)
        self.endpoint_w2 = np.asarray(self.endpoint_w2, dtype=float)
        if self.endpoint_w1.shape != self.endpoint_w2.shape:
            raise ValueError("curve endpoints must share one dimension")
        if self.bend_theta is None:
            self.bend_theta = 0.5 * (self.endpoint_w1 + self.endpoint_w2)
        else:
            self.bend_theta = np.asarray(self.bend_theta, dtype=float)
            if self.bend_theta.shape != self.endpoint_w1.shape:
                raise ValueError("bend must share the endpoints' dimension")


@dataclass
class CurveTrainConfig:
    """Stochastic curve-training settings with a loss oracle.

    ``model`` needs ``gradient(w, shard)`` (and ``loss(w, shard)`` for
    evaluation); ``shard`` is passed through opaquely.
    """

    steps: int
    learning_rate: float
    model: object
    shard: object = None

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")


def curve_point(spec: CurveSpec, p: float) -> np.ndarray:
    """Evaluate the curve at parameter ``p`` in [0, 1]."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"curve parameter must lie in [0, 1], got {p}")
    w1, w2, theta = spec.endpoint_w1, spec.endpoint_w2, spec.bend_theta
    if spec.kind is CurveKind.QUADRATIC_BEZIER:
        return (1.0 - p) ** 2 * w1 + 2.0 * p * (1.0 - p) * theta + p**2 * w2
    if p <= 0.5:
        return 2.0 * (p * theta + (0.5 - p) * w1)
    return 2.0 * ((p - 0.5) * w2 + (1.0 - p) * theta)


def _bend_factor(kind: CurveKind, p: float) -> float:
    if kind is CurveKind.QUADRATIC_BEZIER:
        return 2.0 * p * (1.0 - p)
    return 2.0 * p if p <= 0.5 else 2.0 * (1.0 - p)


def train_curve(spec: CurveSpec, cfg: CurveTrainConfig, stream: NoiseStream) -> np.ndarray:
    """Stochastically train the bend; returns the trained theta.

    The input spec is not mutated and the endpoints never move.
    """
    theta = spec.bend_theta.copy()
    work = CurveSpec(spec.kind, spec.endpoint_w1, spec.endpoint_w2, theta)
    rng = stream.rng
    for _ in range(cfg.steps):
        p_hat = float(rng.random())
        grad = np.asarray(cfg.model.gradient(curve_point(work, p_hat), cfg.shard), dtype=float)
        theta -= cfg.learning_rate * _bend_factor(spec.kind, p_hat) * grad
    return theta


def theta_star(smoothness_L: float, w_bar: np.ndarray, v_bar: np.ndarray) -> np.ndarray:
    """Closed-form optimal bend ``1.2/L + 1.1 w_bar - 0.1 v_bar``.

    The scalar 1.2/L broadcasts to every coordinate.
    """
    if not smoothness_L > 0:
        raise ValueError(f"smoothness constant must be positive, got {smoothness_L}")
    w_bar = np.asarray(w_bar, dtype=float)
    v_bar = np.asarray(v_bar, dtype=float)
    if w_bar.shape != v_bar.shape:
        raise ValueError("w_bar and v_bar must share one dimension")
    return 1.2 / smoothness_L + 1.1 * w_bar - 0.1 * v_bar


def bezier_fedavg_update(v: np.ndarray, theta: np.ndarray, w: np.ndarray, r: float) -> np.ndarray:
    """Bezier-form model update ``(1-r)^2 v + 2(r - r^2) theta + r^2 w``."""
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"curve parameter must lie in [0, 1], got {r}")
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (v.shape == theta.shape == w.shape):
        raise ValueError("all three vectors must share one dimension")
    return (1.0 - r) ** 2 * v + 2.0 * (r - r**2) * theta + r**2 * w


def mode_connect_aggregate(
    models,
    cfg: CurveTrainConfig | None,
    stream: NoiseStream | None = None,
    kind: CurveKind = CurveKind.POLYGONAL_CHAIN,
) -> np.ndarray:
    """Merge models pairwise along trained curves until one survives.

    Callers supply models ordered as they should be paired (ascending client
    id unless an upstream shuffle reordered them); adjacent models pair up and
    an odd leftover carries to the next level.  With ``cfg`` absent or zero
    steps the merge reduces to iterated pairwise midpoints.
    """
    level = [np.asarray(m, dtype=float) for m in models]
    if not level:
        raise ValueError("at least one model is required")
    merge_round = 0
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            spec = CurveSpec(kind, level[i], level[i + 1])
            if cfg is None or cfg.steps == 0:
                nxt.append(spec.bend_theta)
            else:
                sub = stream or NoiseStream(0, purpose="curve-train")
                pair_stream = NoiseStream(
                    sub.master_seed,
                    sub.round_index,
                    merge_round * 1024 + i,
                    sub.purpose,
                )
                nxt.append(train_curve(spec, cfg, pair_stream))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
        merge_round += 1
    return level[0]


def extra_rounds_bound(sensitivity: float, epsilon: float) -> float:
    """Worst-case extra training rounds ``Delta^2 e^eps / (e^eps - 1)^2``."""
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    # e^eps / (e^eps - 1)^2 == 1 / (4 sinh(eps/2)^2), stable for large eps
    return sensitivity**2 / (4.0 * math.sinh(epsilon / 2.0) ** 2)
