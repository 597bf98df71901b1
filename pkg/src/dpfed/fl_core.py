"""Deterministic federated-learning simulator.

One training round: the server selects a client subset, broadcasts the global
model, each selected client runs privatized local epochs (per-example
gradient clipping, one noise draw per coordinate per epoch at sensitivity c,
averaged, SGD step), the ledger charges one Renyi curve per noise application,
and the server aggregates by FedAvg or pairwise mode-connectivity merging.

Every random decision flows through a :class:`NoiseStream` keyed by (master
seed, round, client, purpose), so a configuration plus master seed fully
determines the run.  Mechanism noise is the only stream salted by nothing
else; data, selection and subsampling streams are mechanism-independent so
that runs differing only in the noise mechanism are otherwise paired.

Clients with heterogeneous privacy budgets are pulled toward the model of the
weakest-budget client: the local step becomes
``w - eta * (g + lam_k (w - w_max))`` with ``lam_k = (eps_max - eps_k) /
eps_max``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .accountant import RdpLedger, cached_rdp_curve
from .mechanisms import MechanismParams, NoiseStream, sample_noise_array
from .mode_connectivity import CurveTrainConfig, mode_connect_aggregate


class BudgetExhaustedError(RuntimeError):
    """Documented halt signal: a client's privacy budget cannot cover the round."""


@dataclass
class DatasetShard:
    """Feature matrix plus integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (n, f) matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be a vector matching the feature rows")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "DatasetShard":
        return DatasetShard(self.features[idx], self.labels[idx])


def load_csv_shard(path) -> DatasetShard:
    """Read a shard from CSV: header row, feature columns, then a ``label``
    column of integers; comma-separated UTF-8."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return _read_csv_shard(fh)


def _read_csv_shard(fh) -> DatasetShard:
    reader = csv.reader(fh)
    header = next(reader, None)
    if not header or header[-1].strip() != "label":
        raise ValueError("shard CSV needs a header whose last column is 'label'")
    feats, labels = [], []
    for row in reader:
        if not row:
            continue
        feats.append([float(v) for v in row[:-1]])
        labels.append(int(row[-1]))
    return DatasetShard(np.array(feats), np.array(labels, dtype=np.int64))


class LogisticRegressionModel:
    """Multinomial logistic regression with cross-entropy loss.

    The flat parameter vector packs a (classes, features) weight matrix
    followed by a (classes,) bias.
    """

    def __init__(self, classes: int, features: int):
        if classes < 2 or features < 1:
            raise ValueError("need at least 2 classes and 1 feature")
        self.classes = classes
        self.features = features
        self.dim = classes * features + classes

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"expected a parameter vector of length {self.dim}, got {w.shape}")
        split = self.classes * self.features
        return w[:split].reshape(self.classes, self.features), w[split:]

    def _log_probs(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        weights, bias = self._unpack(w)
        logits = x @ weights.T + bias
        logits -= logits.max(axis=1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def loss(self, w: np.ndarray, shard: DatasetShard) -> float:
        lp = self._log_probs(w, shard.features)
        return float(-lp[np.arange(shard.n), shard.labels].mean())

    def per_example_gradients(self, w: np.ndarray, shard: DatasetShard) -> np.ndarray:
        """(n, dim) matrix of per-example cross-entropy gradients."""
        probs = np.exp(self._log_probs(w, shard.features))
        probs[np.arange(shard.n), shard.labels] -= 1.0
        grad_w = np.einsum("nc,nf->ncf", probs, shard.features)
        return np.concatenate([grad_w.reshape(shard.n, -1), probs], axis=1)

    def gradient(self, w: np.ndarray, shard: DatasetShard) -> np.ndarray:
        return self.per_example_gradients(w, shard).mean(axis=0)

    def accuracy(self, w: np.ndarray, shard: DatasetShard) -> float:
        pred = self._log_probs(w, shard.features).argmax(axis=1)
        return float((pred == shard.labels).mean())


@dataclass
class ClientConfig:
    id: int
    shard: DatasetShard
    epsilon_k: float
    mechanism: MechanismParams | None
    clip_c: float
    sample_rate_q: float
    local_epochs_I: int
    learning_rate: float

    def __post_init__(self) -> None:
        if not self.epsilon_k > 0:
            raise ValueError(f"client epsilon must be positive, got {self.epsilon_k}")
        if not self.clip_c > 0:
            raise ValueError(f"clip bound must be positive, got {self.clip_c}")
        if not (0.0 < self.sample_rate_q <= 1.0):
            raise ValueError(f"sample rate must lie in (0, 1], got {self.sample_rate_q}")
        if self.local_epochs_I < 1:
            raise ValueError(f"local epochs must be >= 1, got {self.local_epochs_I}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.mechanism is not None and not math.isclose(self.mechanism.sensitivity, self.clip_c):
            raise ValueError(
                f"mechanism sensitivity {self.mechanism.sensitivity} must equal the clip bound {self.clip_c}"
            )


class Aggregator(enum.Enum):
    FEDAVG = "fedavg"
    MODE_CONNECT = "modeconnect"


@dataclass
class ServerState:
    global_model: np.ndarray
    round_t: int
    weights: np.ndarray
    aggregator: Aggregator
    selection_fraction: float

    def __post_init__(self) -> None:
        self.global_model = np.asarray(self.global_model, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("client weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("client weights must sum to 1")
        if not (0.0 < self.selection_fraction <= 1.0):
            raise ValueError(f"selection fraction must lie in (0, 1], got {self.selection_fraction}")


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    cumulative_epsilon: float
    train_loss: float
    eval_accuracy: float
    mechanism: str
    noise_scale: float
    seed: int


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    noise_draws: int


@dataclass
class RoundResult:
    server: ServerState
    metrics: RoundMetrics
    client_models: dict[int, np.ndarray]


def clip_gradient(g: np.ndarray, c: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, c / ||g||)``; direction preserved."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient entries must be finite")
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g
    return g * (c / norm)


def _clip_rows(grads: np.ndarray, c: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    factors = np.minimum(1.0, c / np.maximum(norms, 1e-300))
    return grads * factors


def local_update(
    cfg: ClientConfig,
    global_w: np.ndarray,
    model,
    stream: NoiseStream,
    w_max: np.ndarray | None = None,
    eps_max: float | None = None,
) -> ClientUpdate:
    """Run the client's privatized local epochs from the broadcast model.

    Each epoch draws a Poisson-style subsample at rate q, clips per-example
    gradients at c, sums, adds one noise draw per coordinate (sensitivity c),
    averages and steps.  Empty subsamples skip the epoch without spending.
    When ``w_max``/``eps_max`` are given, the heterogeneous penalty pulls the
    step toward ``w_max``.
    """
    w = np.asarray(global_w, dtype=float).copy()
    rng = stream.rng
    lam_k = 0.0
    if eps_max is not None and w_max is not None:
        lam_k = heterogeneity_penalty(cfg.epsilon_k, eps_max)
    draws = 0
    for _ in range(cfg.local_epochs_I):
        mask = rng.random(cfg.shard.n) < cfg.sample_rate_q
        batch_n = int(mask.sum())
        if batch_n == 0:
            continue
        batch = cfg.shard.subset(np.flatnonzero(mask))
        if hasattr(model, "per_example_gradients"):
            grads = np.asarray(model.per_example_gradients(w, batch), dtype=float)
        else:
            grads = np.stack(
                [np.asarray(model.gradient(w, batch.subset(np.array([j])))) for j in range(batch_n)]
            )
        summed = _clip_rows(grads, cfg.clip_c).sum(axis=0)
        if cfg.mechanism is not None:
            summed = summed + sample_noise_array(cfg.mechanism, stream, w.size)
            draws += 1
        step = summed / batch_n
        if lam_k > 0.0:
            step = step + lam_k * (w - w_max)
        w -= cfg.learning_rate * step
    return ClientUpdate(client_id=cfg.id, params=w, noise_draws=draws)


def heterogeneity_penalty(eps_k: float, eps_max: float) -> float:
    if eps_max < eps_k:
        raise ValueError(f"eps_max {eps_max} must dominate the client epsilon {eps_k}")
    if math.isinf(eps_max):
        return 0.0
    return (eps_max - eps_k) / eps_max


def heterogeneous_update(
    cfg: ClientConfig,
    w_k: np.ndarray,
    g_clipped: np.ndarray,
    w_max: np.ndarray,
    eps_max: float,
) -> np.ndarray:
    """One penalized step ``w_k - eta (g + lam_k (w_k - w_max))``."""
    lam_k = heterogeneity_penalty(cfg.epsilon_k, eps_max)
    w_k = np.asarray(w_k, dtype=float)
    return w_k - cfg.learning_rate * (np.asarray(g_clipped, dtype=float) + lam_k * (w_k - np.asarray(w_max, dtype=float)))


def fedavg_aggregate(models, weights) -> np.ndarray:
    """Weighted average with weights renormalized over the given subset."""
    models = [np.asarray(m, dtype=float) for m in models]
    if not models:
        raise ValueError("at least one model is required")
    dim = models[0].shape
    if any(m.shape != dim for m in models):
        raise ValueError("all models must share one dimension")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(models),):
        raise ValueError("weights must match the number of models")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    return sum(wi * m for wi, m in zip(w / total, models))


def shuffle_updates(updates, stream: NoiseStream):
    """Uniformly permute a sequence of (client id, model) pairs."""
    updates = list(updates)
    if not updates:
        raise ValueError("nothing to shuffle")
    perm = stream.rng.permutation(len(updates))
    return [updates[i] for i in perm]


def run_round(
    server: ServerState,
    clients,
    model,
    ledgers,
    master_seed: int,
    budgets,
    eval_shard: DatasetShard | None = None,
    shuffle: bool = False,
    curve_cfg: CurveTrainConfig | None = None,
    prior_models: dict[int, np.ndarray] | None = None,
    mechanism_label: str | None = None,
) -> RoundResult:
    """Execute one federated round; raises ``BudgetExhaustedError`` when any
    selected client's ledger cannot cover its noise applications."""
    clients = sorted(clients, key=lambda c: c.id)
    n_sel = math.ceil(server.selection_fraction * len(clients))
    sel_rng = NoiseStream(master_seed, server.round_t, 0, "client-selection").rng
    chosen = sorted(sel_rng.permutation(len(clients))[:n_sel])
    selected = [clients[i] for i in chosen]

    prior_models = dict(prior_models or {})
    eps_max = max(c.epsilon_k for c in selected)
    anchor = min(c.id for c in selected if c.epsilon_k == eps_max)
    w_max = prior_models.get(anchor, server.global_model)

    updates = []
    for cfg in selected:
        stream = NoiseStream(master_seed, server.round_t, cfg.id, "local-update")
        updates.append(local_update(cfg, server.global_model, model, stream, w_max=w_max, eps_max=eps_max))

    # Two-phase spend: commit only if every selected client stays in budget.
    curves = {}
    for cfg, upd in zip(selected, updates):
        if cfg.mechanism is None or upd.noise_draws == 0:
            continue
        curve = upd.noise_draws * cached_rdp_curve(cfg.mechanism, ledgers[cfg.id].alpha_grid)
        trial = RdpLedger(ledgers[cfg.id].alpha_grid, ledgers[cfg.id].gamma.copy())
        if trial.spend(curve, budgets[cfg.id]).halted:
            raise BudgetExhaustedError(
                f"privacy budget exhausted at round {server.round_t} for client {cfg.id}"
            )
        curves[cfg.id] = curve
    for cid, curve in curves.items():
        ledgers[cid].spend(curve, budgets[cid])

    pairs = [(u.client_id, u.params) for u in updates]
    if shuffle:
        pairs = shuffle_updates(pairs, NoiseStream(master_seed, server.round_t, 0, "shuffle"))
    if server.aggregator is Aggregator.FEDAVG:
        new_global = fedavg_aggregate([p for _, p in pairs], [server.weights[cid] for cid, _ in pairs])
    else:
        new_global = mode_connect_aggregate(
            [p for _, p in pairs],
            curve_cfg,
            stream=NoiseStream(master_seed, server.round_t, 0, "curve-train"),
        )

    for upd in updates:
        prior_models[upd.client_id] = upd.params

    cumulative = 0.0
    for cfg in clients:
        if cfg.mechanism is None:
            cumulative = math.inf
            break
        eps_now, _ = ledgers[cfg.id].to_dp(budgets[cfg.id].delta)
        cumulative = max(cumulative, eps_now)

    train_loss = float(
        sum(server.weights[c.id] * model.loss(new_global, c.shard) for c in clients)
    )
    acc_data = eval_shard
    if acc_data is None:
        acc_data = DatasetShard(
            np.concatenate([c.shard.features for c in clients]),
            np.concatenate([c.shard.labels for c in clients]),
        )
    metrics = RoundMetrics(
        round_index=server.round_t,
        cumulative_epsilon=cumulative,
        train_loss=train_loss,
        eval_accuracy=model.accuracy(new_global, acc_data),
        mechanism=mechanism_label
        or (selected[0].mechanism.kind.value if selected[0].mechanism else "disabled"),
        noise_scale=max((c.mechanism.scale for c in clients if c.mechanism), default=math.inf),
        seed=master_seed,
    )
    new_server = replace(server, global_model=new_global, round_t=server.round_t + 1)
    return RoundResult(server=new_server, metrics=metrics, client_models=prior_models)


def make_synthetic_federation(
    n_clients: int,
    samples_per_client: int,
    features: int,
    classes: int,
    seed: int,
    eval_fraction: float = 0.05,
    center_scale: float = 3.0,
) -> tuple[list[DatasetShard], DatasetShard]:
    """IID Gaussian-blob classification pool dealt to clients plus a held-out
    evaluation shard (``eval_fraction`` of the client pool size)."""
    if n_clients < 1 or samples_per_client < 1:
        raise ValueError("need at least one client and one sample per client")
    rng = NoiseStream(seed, 0, 0, "synthetic-data").rng
    centers = rng.normal(0.0, center_scale, (classes, features))
    pool_n = n_clients * samples_per_client
    eval_n = max(1, round(eval_fraction * pool_n))
    total = pool_n + eval_n
    labels = rng.integers(0, classes, total)
    feats = centers[labels] + rng.normal(0.0, 1.0, (total, features))
    shards = [
        DatasetShard(
            feats[k * samples_per_client : (k + 1) * samples_per_client],
            labels[k * samples_per_client : (k + 1) * samples_per_client],
        )
        for k in range(n_clients)
    ]
    eval_shard = DatasetShard(feats[pool_n:], labels[pool_n:])
    return shards, eval_shard
