"""Experiment runner and calibration command line.

Subcommands: ``calibrate`` (minimal noise for a budget, one JSON object per
line), ``run`` (calibrate + simulate, streaming CSV metrics plus a single-line
JSON summary), ``sweep`` (several runs concatenated with an ``experiment_id``
column) and ``bounds`` (closed-form l1 perturbation queries).

Configs are ``key = value`` lines with ``#`` comments; command-line flags
mirror the keys in kebab case and override file values.  The env var
``UDPFL_SEED`` is the lowest-precedence seed source.  Exit codes: 0 all
configured rounds completed within budget, 1 run halted on an exhausted
budget, 2 invalid config or infeasible calibration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .accountant import (
    CalibrationResult,
    InfeasibleBudgetError,
    PrivacyBudget,
    RdpLedger,
    calibrate_noise,
    default_alpha_grid,
)
from .fl_core import (
    Aggregator,
    BudgetExhaustedError,
    ClientConfig,
    DatasetShard,
    LogisticRegressionModel,
    RoundMetrics,
    ServerState,
    load_csv_shard,
    make_synthetic_federation,
    run_round,
)
from .mechanisms import MechanismKind, MechanismParams, NoiseStream
from .mode_connectivity import CurveTrainConfig
from .utility_bounds import (
    BoundQuery,
    l1_bound_gaussian,
    l1_bound_laplace,
    l1_bound_staircase,
    optimal_nu,
)

CSV_HEADER = "round,cumulative_epsilon,train_loss,eval_accuracy,mechanism,noise_scale,seed"
SWEEP_HEADER = "experiment_id," + CSV_HEADER

# Reference-task constants (desk-scale synthetic blobs).
SYNTH_FEATURES = 20
SYNTH_CLASSES = 10
SYNTH_SAMPLES_PER_CLIENT = 200
SYNTH_CENTER_SCALE = 3.0
EVAL_FRACTION = 0.05
CURVE_TRAIN_STEPS = 100
CURVE_TRAIN_LR = 0.01

EXIT_OK = 0
EXIT_BUDGET_HALT = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    raise ValueError("expected true or false")


def _parse_epsilon(raw: str) -> float:
    if raw.strip().lower() in ("inf", "infinity"):
        return math.inf
    val = float(raw)
    if not val > 0:
        raise ValueError("must be positive")
    return val


def _parse_eps_list(raw: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in raw.split(",") if v.strip())
    if not vals:
        raise ValueError("expected a comma-separated list of positive reals")
    if any(not (math.isfinite(v) and v > 0) for v in vals):
        raise ValueError("all entries must be positive finite reals")
    return vals


def _positive_float(raw: str) -> float:
    val = float(raw)
    if not (math.isfinite(val) and val > 0):
        raise ValueError("must be positive")
    return val


def _unit_float(raw: str) -> float:
    val = float(raw)
    if not (0.0 < val <= 1.0):
        raise ValueError("must lie in (0, 1]")
    return val


def _open_float(raw: str) -> float:
    val = float(raw)
    if not (0.0 < val < 1.0):
        raise ValueError("must lie in (0, 1)")
    return val


def _positive_int(raw: str) -> int:
    val = int(raw)
    if val < 1:
        raise ValueError("must be a positive integer")
    return val


_PARSERS = {
    "mechanism": lambda raw: MechanismKind.parse(raw).value,
    "epsilon": _parse_epsilon,
    "delta": _open_float,
    "rounds": _positive_int,
    "clients": _positive_int,
    "selection_fraction": _unit_float,
    "sample_rate": _unit_float,
    "clip": _positive_float,
    "local_epochs": _positive_int,
    "learning_rate": _positive_float,
    "aggregator": lambda raw: Aggregator(raw.strip().lower()).value,
    "shuffle": _parse_bool,
    "heterogeneous_epsilons": _parse_eps_list,
    "dataset": lambda raw: raw.strip(),
    "seed": int,
    "output": lambda raw: raw.strip(),
}


@dataclass
class ExperimentConfig:
    mechanism: str = "staircase"
    epsilon: float = 8.0
    delta: float = 1e-5
    rounds: int = 150
    clients: int = 10
    selection_fraction: float = 1.0
    sample_rate: float = 0.05
    clip: float = 1.0
    local_epochs: int = 2
    learning_rate: float = 0.01
    aggregator: str = "fedavg"
    shuffle: bool = False
    heterogeneous_epsilons: tuple[float, ...] | None = None
    dataset: str = "synthetic"
    seed: int = 0
    output: str | None = None

    @property
    def noise_disabled(self) -> bool:
        return math.isinf(self.epsilon)

    @property
    def horizon(self) -> int:
        # every local epoch is one accounted mechanism application
        return self.rounds * self.local_epochs


def parse_config(text: str, flag_overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a validated config from ``key = value`` text plus flag overrides."""
    values: dict[str, object] = {}

    def assign(key: str, raw: str, where: str) -> None:
        if key not in _PARSERS:
            raise ConfigError(f"unknown key '{key}' in {where}")
        try:
            values[key] = _PARSERS[key](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for '{key}' in {where}: {raw!r} ({exc})") from None

    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno} is not a 'key = value' assignment: {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key '{key}' at line {lineno}")
        seen.add(key)
        assign(key, raw, f"config line {lineno}")

    for key, raw in (flag_overrides or {}).items():
        if raw is not None:
            assign(key, raw, "command-line flag")

    if "seed" not in values and "UDPFL_SEED" in os.environ:
        assign("seed", os.environ["UDPFL_SEED"], "UDPFL_SEED environment variable")

    cfg = ExperimentConfig(**values)
    if cfg.heterogeneous_epsilons is not None:
        if len(cfg.heterogeneous_epsilons) != cfg.clients:
            raise ConfigError(
                "invalid value for 'heterogeneous_epsilons': need exactly one epsilon per client "
                f"({cfg.clients} clients, {len(cfg.heterogeneous_epsilons)} values)"
            )
        if cfg.noise_disabled:
            raise ConfigError("invalid value for 'heterogeneous_epsilons': incompatible with epsilon = inf")
    return cfg


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def format_metrics_row(m: RoundMetrics, experiment_id: str | None = None) -> str:
    cells = [
        str(m.round_index),
        _format_value(m.cumulative_epsilon),
        _format_value(m.train_loss),
        _format_value(m.eval_accuracy),
        m.mechanism,
        _format_value(m.noise_scale),
        str(m.seed),
    ]
    if experiment_id is not None:
        cells.insert(0, experiment_id)
    return ",".join(cells)


_CALIBRATION_CACHE: dict[tuple, CalibrationResult] = {}


def _calibrate_cached(kind: MechanismKind, sensitivity: float, budget: PrivacyBudget) -> CalibrationResult:
    key = (kind, sensitivity, budget.epsilon, budget.delta, budget.horizon_T)
    hit = _CALIBRATION_CACHE.get(key)
    if hit is None:
        hit = _CALIBRATION_CACHE[key] = calibrate_noise(kind, sensitivity, budget)
    return hit


def _build_federation(cfg: ExperimentConfig) -> tuple[list[DatasetShard], DatasetShard]:
    if cfg.dataset == "synthetic":
        return make_synthetic_federation(
            cfg.clients,
            SYNTH_SAMPLES_PER_CLIENT,
            SYNTH_FEATURES,
            SYNTH_CLASSES,
            cfg.seed,
            eval_fraction=EVAL_FRACTION,
            center_scale=SYNTH_CENTER_SCALE,
        )
    pool = load_csv_shard(cfg.dataset)
    order = NoiseStream(cfg.seed, 0, 0, "csv-deal").rng.permutation(pool.n)
    eval_n = max(1, round(EVAL_FRACTION * pool.n / (1.0 + EVAL_FRACTION)))
    if pool.n - eval_n < cfg.clients:
        raise ConfigError(f"invalid value for 'dataset': {cfg.dataset!r} has too few rows for {cfg.clients} clients")
    eval_idx, train_idx = order[:eval_n], order[eval_n:]
    shards = [pool.subset(np.sort(train_idx[k :: cfg.clients])) for k in range(cfg.clients)]
    return shards, pool.subset(np.sort(eval_idx))


@dataclass
class ExperimentResult:
    exit_code: int
    metrics: list[RoundMetrics]
    summary: dict


def run_experiment(cfg: ExperimentConfig, csv_stream=None) -> ExperimentResult:
    """Calibrate, simulate up to ``cfg.rounds`` rounds and stream CSV rows.

    Propagates :class:`InfeasibleBudgetError`; an exhausted budget mid-run
    stops the loop with exit code 1 (the documented halt signal).
    """
    kind = MechanismKind.parse(cfg.mechanism)
    shards, eval_shard = _build_federation(cfg)
    classes = int(max(s.labels.max() for s in shards)) + 1
    if cfg.dataset == "synthetic":
        classes = SYNTH_CLASSES
    model = LogisticRegressionModel(classes, shards[0].features.shape[1])

    eps_list = cfg.heterogeneous_epsilons or (cfg.epsilon,) * cfg.clients
    budgets, clients, ledgers = {}, [], {}
    grid = default_alpha_grid()
    calibrated_scale: float | None = None
    for cid, (shard, eps_k) in enumerate(zip(shards, eps_list)):
        mech: MechanismParams | None = None
        if not cfg.noise_disabled:
            budget = PrivacyBudget(eps_k, cfg.delta, cfg.horizon)
            mech = _calibrate_cached(kind, cfg.clip, budget).mechanism
            calibrated_scale = max(calibrated_scale or 0.0, mech.scale)
        clients.append(
            ClientConfig(
                id=cid,
                shard=shard,
                epsilon_k=eps_k if not cfg.noise_disabled else math.inf,
                mechanism=mech,
                clip_c=cfg.clip,
                sample_rate_q=cfg.sample_rate,
                local_epochs_I=cfg.local_epochs,
                learning_rate=cfg.learning_rate,
            )
        )
        budgets[cid] = PrivacyBudget(eps_k if not cfg.noise_disabled else math.inf, cfg.delta, cfg.horizon)
        ledgers[cid] = RdpLedger(grid)

    sizes = np.array([s.n for s in shards], dtype=float)
    server = ServerState(
        global_model=model.init_params(),
        round_t=0,
        weights=sizes / sizes.sum(),
        aggregator=Aggregator(cfg.aggregator),
        selection_fraction=cfg.selection_fraction,
    )
    curve_cfg = None
    if server.aggregator is Aggregator.MODE_CONNECT:
        curve_cfg = CurveTrainConfig(CURVE_TRAIN_STEPS, CURVE_TRAIN_LR, model, eval_shard)

    if csv_stream is not None:
        csv_stream.write(CSV_HEADER + "\n")
    metrics: list[RoundMetrics] = []
    prior_models: dict[int, np.ndarray] = {}
    exit_code = EXIT_OK
    for _ in range(cfg.rounds):
        try:
            result = run_round(
                server,
                clients,
                model,
                ledgers,
                cfg.seed,
                budgets,
                eval_shard=eval_shard,
                shuffle=cfg.shuffle,
                curve_cfg=curve_cfg,
                prior_models=prior_models,
                mechanism_label=cfg.mechanism,
            )
        except BudgetExhaustedError:
            exit_code = EXIT_BUDGET_HALT
            break
        server, prior_models = result.server, result.client_models
        metrics.append(result.metrics)
        if csv_stream is not None:
            csv_stream.write(format_metrics_row(result.metrics) + "\n")

    last = metrics[-1] if metrics else None
    summary = {
        "final_accuracy": last.eval_accuracy if last else None,
        "final_epsilon": (
            None if last is None or math.isinf(last.cumulative_epsilon) else last.cumulative_epsilon
        ),
        "rounds_run": len(metrics),
        "calibrated_scale": calibrated_scale,
    }
    return ExperimentResult(exit_code=exit_code, metrics=metrics, summary=summary)


@dataclass
class SweepResult:
    exit_code: int
    rows: list[tuple[str, RoundMetrics]]


def sweep(configs, ids=None, csv_stream=None) -> SweepResult:
    """Run several experiments and concatenate their metrics under an
    ``experiment_id`` column (buffered per experiment, emitted atomically)."""
    configs = list(configs)
    if ids is None:
        ids = [f"{i:03d}" for i in range(len(configs))]
    ids = [str(i) for i in ids]
    if len(ids) != len(configs):
        raise ValueError("need exactly one experiment id per config")
    if len(set(ids)) != len(ids):
        raise ValueError("experiment ids must be unique")
    if csv_stream is not None:
        csv_stream.write(SWEEP_HEADER + "\n")
    rows: list[tuple[str, RoundMetrics]] = []
    exit_code = EXIT_OK
    for exp_id, cfg in zip(ids, configs):
        result = run_experiment(cfg)
        exit_code = max(exit_code, result.exit_code)
        buffered = [(exp_id, m) for m in result.metrics]
        rows.extend(buffered)
        if csv_stream is not None:
            for exp_id_, m in buffered:
                csv_stream.write(format_metrics_row(m, exp_id_) + "\n")
    return SweepResult(exit_code=exit_code, rows=rows)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", help="config file of 'key = value' lines")
    for key in _PARSERS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V")


def _collect_config(args: argparse.Namespace) -> ExperimentConfig:
    text = ""
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    overrides = {key: getattr(args, key) for key in _PARSERS if getattr(args, key, None) is not None}
    return parse_config(text, overrides)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _collect_config(args)
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8", newline="") as fh:
            result = run_experiment(cfg, csv_stream=fh)
    else:
        result = run_experiment(cfg, csv_stream=sys.stdout)
    print(json.dumps(result.summary))
    return result.exit_code


def _cmd_sweep(args: argparse.Namespace) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    configs, ids = [], []
    for path in args.configs:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        stem = os.path.splitext(os.path.basename(path))[0]
        for seed in seeds:
            overrides = {} if seed is None else {"seed": str(seed)}
            configs.append(parse_config(text, overrides))
            ids.append(stem if seed is None else f"{stem}-s{seed}")
    if len(set(ids)) != len(ids):
        ids = [f"{i:03d}-{name}" for i, name in enumerate(ids)]
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            result = sweep(configs, ids=ids, csv_stream=fh)
    else:
        result = sweep(configs, ids=ids, csv_stream=sys.stdout)
    return result.exit_code


def _cmd_calibrate(args: argparse.Namespace) -> int:
    budget = PrivacyBudget(float(args.epsilon), float(args.delta), int(args.rounds))
    for name in args.mechanism.split(","):
        kind = MechanismKind.parse(name)
        result = calibrate_noise(kind, float(args.sensitivity), budget, tolerance=float(args.tolerance))
        print(
            json.dumps(
                {
                    "mechanism": kind.value,
                    "sensitivity": result.mechanism.sensitivity,
                    "scale": result.mechanism.scale,
                    "nu": result.mechanism.nu,
                    "achieved_epsilon": result.achieved_epsilon,
                    "minimizing_alpha": result.minimizing_alpha,
                    "iterations": result.iterations,
                    "target_epsilon": budget.epsilon,
                    "delta": budget.delta,
                    "rounds": budget.horizon_T,
                }
            )
        )
    return EXIT_OK


def _cmd_bounds(args: argparse.Namespace) -> int:
    kind = MechanismKind.parse(args.mechanism)
    nu = float(args.nu) if args.nu is not None else None
    if kind is MechanismKind.STAIRCASE and nu is None:
        nu = optimal_nu(float(args.scale))[0]
    params = MechanismParams(kind, float(args.sensitivity), float(args.scale), nu=nu)
    query = BoundQuery(params, int(args.loss_length), int(args.rounds))
    if kind is MechanismKind.GAUSSIAN:
        bound = l1_bound_gaussian(query)
    elif kind is MechanismKind.LAPLACE:
        bound = l1_bound_laplace(query)
    else:
        bound = l1_bound_staircase(query, mode=args.mode)
    print(
        json.dumps(
            {
                "mechanism": kind.value,
                "sensitivity": params.sensitivity,
                "scale": params.scale,
                "nu": params.nu,
                "loss_length_m": query.loss_length_m,
                "rounds_T": query.rounds_T,
                "mode": args.mode,
                "l1_bound": bound,
            }
        )
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="calibrate and run one experiment")
    _add_run_flags(run_p)
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run several experiments into one CSV")
    sweep_p.add_argument("configs", nargs="+", help="config files")
    sweep_p.add_argument("--seeds", default=None, help="comma-separated seed repetitions")
    sweep_p.add_argument("--output", default=None, help="aggregated CSV path (default: stdout)")
    sweep_p.set_defaults(func=_cmd_sweep)

    cal_p = sub.add_parser("calibrate", help="minimal noise scale for a budget")
    cal_p.add_argument("--mechanism", required=True, help="mechanism name(s), comma-separated")
    cal_p.add_argument("--epsilon", required=True)
    cal_p.add_argument("--delta", default="1e-5")
    cal_p.add_argument("--rounds", required=True, help="number of composed applications")
    cal_p.add_argument("--sensitivity", default="1.0")
    cal_p.add_argument("--tolerance", default="1e-4")
    cal_p.set_defaults(func=_cmd_calibrate)

    bounds_p = sub.add_parser("bounds", help="expected l1 perturbation of a mechanism")
    bounds_p.add_argument("--mechanism", required=True)
    bounds_p.add_argument("--scale", required=True)
    bounds_p.add_argument("--nu", default=None)
    bounds_p.add_argument("--sensitivity", default="1.0")
    bounds_p.add_argument("-m", "--loss-length", dest="loss_length", default="1")
    bounds_p.add_argument("-T", "--rounds", dest="rounds", default="1")
    bounds_p.add_argument("--mode", choices=["numeric", "as_published"], default="numeric")
    bounds_p.set_defaults(func=_cmd_bounds)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InfeasibleBudgetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
