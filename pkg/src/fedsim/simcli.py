"""Experiment orchestration: config handling, the `fedsim` CLI, metrics CSV
output, and the grid harness that compares strategies across heterogeneity
levels.

Every run is a pure function of its config (seed included): dataset,
partition, client sampling, batching and evaluation all draw from streams
derived from the one seed, so repeated runs emit byte-identical output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from fedsim import datakit, fedcore, models
from fedsim.numkit import make_rng_stream

ALGORITHMS = ("fedavg", "perfedavg-hf", "perfedavg-fo")
PARTITION_SCHEMES = ("dirichlet", "iid", "sort-shard")
METRICS_HEADER = "round,global_acc,personalized_acc,mean_train_loss,participants,params_exchanged"
COMPARISON_HEADER = "algorithm,alpha_dir,tau,headline_acc,global_acc,personalized_acc"


class ConfigError(ValueError):
    """Invalid, unknown, or ill-typed configuration input."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat description of one experiment; see `fedsim run --help` for keys."""

    seed: int = 0
    # data source: synthetic Gaussian mixture unless a CSV path is given
    dataset_csv: str | None = None
    num_classes: int = 10
    input_dim: int = 20
    samples_per_class: int = 600
    class_separation: float = 3.0
    noise_scale: float = 1.0
    # model
    model: str = "logistic"
    hidden_dims: tuple[int, ...] = ()
    # client population
    num_clients: int = 30
    partition: str = "dirichlet"
    alpha_dir: float = 0.5
    samples_per_client: int = 200
    shards_per_client: int = 2
    test_fraction: float = 0.2
    # algorithm
    algorithm: str = "fedavg"
    rounds: int = 100
    client_fraction: float = 0.5
    local_steps: int = 10
    batch_size: int = 40
    local_lr: float = 0.01
    alpha_inner: float = 0.01
    beta: float = 0.01
    weighted_aggregation: bool | None = None  # None: per-algorithm default
    # evaluation and output
    eval_every: int = 10
    metrics_csv: str | None = None
    manifest_csv: str | None = None

    def validated(self) -> "ExperimentConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.partition not in PARTITION_SCHEMES:
            raise ConfigError(
                f"partition must be one of {PARTITION_SCHEMES}, got {self.partition!r}"
            )
        if self.model not in models.MODEL_KINDS:
            raise ConfigError(f"model must be one of {models.MODEL_KINDS}, got {self.model!r}")
        if self.model == "mlp" and not self.hidden_dims:
            raise ConfigError("mlp model needs hidden_dims")
        if self.model == "logistic" and self.hidden_dims:
            raise ConfigError("logistic model takes no hidden_dims")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.dataset_csv is None:
            try:
                self.synthetic_spec()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        try:
            self.strategy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def synthetic_spec(self) -> datakit.SyntheticSpec:
        return datakit.SyntheticSpec(
            num_classes=self.num_classes,
            input_dim=self.input_dim,
            samples_per_class=self.samples_per_class,
            class_separation=self.class_separation,
            noise_scale=self.noise_scale,
        )

    def strategy_config(self) -> fedcore.FedAvgConfig:
        common = dict(
            rounds=self.rounds,
            client_fraction=self.client_fraction,
            local_steps=self.local_steps,
            batch_size=self.batch_size,
            local_lr=self.local_lr,
        )
        if self.algorithm == "fedavg":
            weighted = True if self.weighted_aggregation is None else self.weighted_aggregation
            return fedcore.FedAvgConfig(weighted_aggregation=weighted, **common)
        weighted = False if self.weighted_aggregation is None else self.weighted_aggregation
        variant = "hessian" if self.algorithm == "perfedavg-hf" else "first-order"
        return fedcore.PerFedAvgConfig(
            weighted_aggregation=weighted,
            alpha_inner=self.alpha_inner,
            beta=self.beta,
            variant=variant,
            **common,
        )


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value):
    """Cast one config value to its field's type; reject mistyped input."""
    kind = _CONFIG_FIELDS[key].type
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"config key {key!r} must not be null")
    if kind.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            try:
                return int(str(value))
            except ValueError:
                raise ConfigError(f"config key {key!r} wants an integer, got {value!r}") from None
        return value
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            try:
                return float(str(value))
            except ValueError:
                raise ConfigError(f"config key {key!r} wants a number, got {value!r}") from None
        return float(value)
    if kind.startswith("bool"):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} wants a boolean, got {value!r}")
    if kind.startswith("tuple"):
        if isinstance(value, str):
            value = [p for p in value.split(",") if p.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r} wants a list of integers, got {value!r}")
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} wants a list of integers, got {value!r}") from None
    return str(value)


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a config from a key-value mapping; unknown keys are hard errors."""
    unknown = sorted(set(mapping) - set(_CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {key: _coerce(key, value) for key, value in mapping.items()}
    return ExperimentConfig(**kwargs).validated()


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Load a JSON config file and apply CLI overrides on top."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if overrides:
        raw.update(overrides)
    return config_from_mapping(raw)


@dataclass(frozen=True)
class MetricsRow:
    """One evaluation record; the exchange counter is cumulative scalars
    uploaded plus downloaded."""

    round: int
    global_acc: float
    personalized_acc: float
    mean_train_loss: float
    participants: int
    params_exchanged: int


@dataclass(frozen=True)
class Population:
    """Dataset plus the fixed partition/split every strategy in a comparison shares."""

    dataset: datakit.Dataset
    partition: datakit.ClientPartition
    split: datakit.ClientSplit
    clients: tuple[fedcore.ClientState, ...]


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricsRow]

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]


@dataclass(frozen=True)
class ComparisonCell:
    algorithm: str
    alpha_dir: float
    tau: int
    headline_acc: float
    global_acc: float
    personalized_acc: float


def build_population(cfg: ExperimentConfig) -> Population:
    """Deterministically realize dataset, partition, and train/test split."""
    if cfg.dataset_csv is not None:
        dataset = datakit.load_csv_dataset(cfg.dataset_csv)
    else:
        dataset = datakit.generate_synthetic(
            cfg.synthetic_spec(), make_rng_stream(cfg.seed, ["data"])
        )
    part_rng = make_rng_stream(cfg.seed, ["partition"])
    if cfg.partition == "iid":
        partition = datakit.partition_iid(dataset, cfg.num_clients, part_rng)
    elif cfg.partition == "sort-shard":
        partition = datakit.partition_sort_shard(
            dataset, cfg.num_clients, cfg.shards_per_client, part_rng
        )
    else:
        spec = datakit.DirichletSpec(
            alpha_dir=cfg.alpha_dir, samples_per_client=cfg.samples_per_client
        )
        partition = datakit.partition_dirichlet(dataset, cfg.num_clients, spec, part_rng)
    split = datakit.split_client_train_test(
        dataset, partition, cfg.test_fraction, make_rng_stream(cfg.seed, ["split"])
    )
    clients = tuple(
        fedcore.ClientState(k, split.train_indices[k], split.test_indices[k])
        for k in range(partition.num_clients)
    )
    if all(c.train_indices.size == 0 for c in clients):
        raise ValueError("degenerate partition: no client has training data")
    if all(c.test_indices.size == 0 for c in clients):
        raise ValueError("degenerate partition: no client has test data")
    return Population(dataset, partition, split, clients)


def _model_spec(cfg: ExperimentConfig, dataset: datakit.Dataset) -> models.ModelSpec:
    return models.ModelSpec(
        kind=cfg.model,
        input_dim=dataset.features.shape[1],
        num_classes=dataset.num_classes,
        hidden_dims=cfg.hidden_dims,
    )


def run_training(cfg: ExperimentConfig, population: Population) -> list[MetricsRow]:
    """Run the configured strategy over the population; evaluate at round 0,
    every ``eval_every`` rounds, and at the final round."""
    dataset = population.dataset
    clients = population.clients
    objective = fedcore.ModelObjective(_model_spec(cfg, dataset))
    strategy = cfg.strategy_config()
    w = models.init_params(objective.spec, make_rng_stream(cfg.seed, ["init"]))
    rng_root = make_rng_stream(cfg.seed, ["train"])

    pooled_train = np.concatenate(
        [c.train_indices for c in clients if c.train_indices.size]
    )
    train_x = dataset.features[pooled_train]
    train_y = dataset.labels[pooled_train]

    def evaluate(round_index: int, participants: int, exchanged: int) -> MetricsRow:
        return MetricsRow(
            round=round_index,
            global_acc=fedcore.evaluate_global(objective, w, clients, dataset),
            personalized_acc=fedcore.evaluate_personalized(
                objective, w, clients, dataset, cfg.alpha_inner
            ),
            mean_train_loss=objective.loss(w, train_x, train_y),
            participants=participants,
            params_exchanged=exchanged,
        )

    rows = [evaluate(0, 0, 0)]
    exchanged = 0
    for round_index in range(1, cfg.rounds + 1):
        result = fedcore.run_round(
            objective, w, clients, dataset, strategy, round_index, rng_root
        )
        w = result.params
        exchanged += len(result.participants) * 2 * objective.dim
        if round_index % cfg.eval_every == 0 or round_index == cfg.rounds:
            rows.append(evaluate(round_index, len(result.participants), exchanged))
    return rows


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Build the population, train, and write any configured output files."""
    cfg = cfg.validated()
    population = build_population(cfg)
    rows = run_training(cfg, population)
    if cfg.manifest_csv:
        datakit.write_partition_manifest(population.partition, cfg.manifest_csv)
    if cfg.metrics_csv:
        emit_metrics_csv(rows, cfg.metrics_csv)
    return ExperimentResult(cfg, rows)


def run_comparison(
    base: ExperimentConfig,
    algorithms: Sequence[str],
    alpha_dirs: Sequence[float],
    taus: Sequence[int],
) -> list[ComparisonCell]:
    """Grid over (algorithm x alpha_dir x tau) with one shared seed.

    Cells sharing an alpha_dir consume the identical partition and split, so
    strategy columns are compared on the same client populations. The
    headline metric follows each strategy's framing: adapted accuracy for
    the meta variants, global accuracy for plain averaging.
    """
    if not algorithms or not alpha_dirs or not taus:
        raise ValueError("comparison grid must include at least one cell")
    for name in algorithms:
        if name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {name!r}")
    cells = []
    for alpha in alpha_dirs:
        shared = replace(base, partition="dirichlet", alpha_dir=alpha).validated()
        population = build_population(shared)
        for tau in taus:
            for name in algorithms:
                cfg = replace(shared, algorithm=name, local_steps=tau).validated()
                rows = run_training(cfg, population)
                final = rows[-1]
                headline = (
                    final.global_acc if name == "fedavg" else final.personalized_acc
                )
                cells.append(
                    ComparisonCell(
                        algorithm=name,
                        alpha_dir=alpha,
                        tau=tau,
                        headline_acc=headline,
                        global_acc=final.global_acc,
                        personalized_acc=final.personalized_acc,
                    )
                )
    return cells


def emit_metrics_csv(rows: Sequence[MetricsRow], path: str) -> None:
    """Write evaluation rows with 6-decimal floats; byte-deterministic."""
    text = format_metrics_csv(rows)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def format_metrics_csv(rows: Sequence[MetricsRow]) -> str:
    lines = [METRICS_HEADER]
    last_round = -1
    for row in rows:
        if row.round <= last_round:
            raise ValueError(f"metrics rows out of round order at round {row.round}")
        last_round = row.round
        lines.append(
            f"{row.round},{row.global_acc:.6f},{row.personalized_acc:.6f},"
            f"{row.mean_train_loss:.6f},{row.participants},{row.params_exchanged}"
        )
    return "\n".join(lines) + "\n"


def emit_comparison_csv(cells: Sequence[ComparisonCell], path: str) -> None:
    lines = [COMPARISON_HEADER]
    for cell in cells:
        lines.append(
            f"{cell.algorithm},{cell.alpha_dir:g},{cell.tau},"
            f"{cell.headline_acc:.6f},{cell.global_acc:.6f},{cell.personalized_acc:.6f}"
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def format_comparison_table(cells: Sequence[ComparisonCell]) -> str:
    """Rows are parameter combinations, columns the algorithms' headline accuracy."""
    algorithms = sorted({c.algorithm for c in cells}, key=ALGORITHMS.index)
    combos = sorted({(c.alpha_dir, c.tau) for c in cells})
    by_key = {(c.alpha_dir, c.tau, c.algorithm): c.headline_acc for c in cells}
    label_width = max(len("parameters"), *(len(_combo_label(a, t)) for a, t in combos))
    header = "parameters".ljust(label_width) + "".join(f"  {a:>14}" for a in algorithms)
    lines = [header, "-" * len(header)]
    for alpha, tau in combos:
        cells_txt = []
        for name in algorithms:
            value = by_key.get((alpha, tau, name))
            cells_txt.append(f"  {value:>14.4f}" if value is not None else f"  {'-':>14}")
        lines.append(_combo_label(alpha, tau).ljust(label_width) + "".join(cells_txt))
    return "\n".join(lines)


def _combo_label(alpha: float, tau: int) -> str:
    return f"alpha_dir={alpha:g} tau={tau}"


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON config file; flags override it")
    defaults = ExperimentConfig()
    flag = lambda *a, **k: parser.add_argument(*a, default=argparse.SUPPRESS, **k)
    flag("--seed", type=int, help=f"master seed (default {defaults.seed})")
    flag("--dataset_csv", help="load data from header-less label,f1,...,fd rows instead of synthesizing")
    flag("--num_classes", type=int, help=f"synthetic class count (default {defaults.num_classes})")
    flag("--input_dim", type=int, help=f"synthetic feature dimension (default {defaults.input_dim})")
    flag("--samples_per_class", type=int,
         help=f"synthetic examples per class (default {defaults.samples_per_class})")
    flag("--class_separation", type=float,
         help=f"distance of class means from origin (default {defaults.class_separation})")
    flag("--noise_scale", type=float,
         help=f"synthetic feature noise sd (default {defaults.noise_scale})")
    flag("--model", choices=models.MODEL_KINDS, help=f"classifier kind (default {defaults.model})")
    flag("--hidden_dims", help="comma-separated MLP hidden sizes, e.g. 32,16 (default none)")
    flag("--num_clients", type=int, help=f"client count K (default {defaults.num_clients})")
    flag("--partition", choices=PARTITION_SCHEMES,
         help=f"client data assignment scheme (default {defaults.partition})")
    flag("--alpha_dir", type=float,
         help=f"Dirichlet concentration; small = heterogeneous (default {defaults.alpha_dir})")
    flag("--samples_per_client", type=int,
         help=f"examples drawn per client under dirichlet (default {defaults.samples_per_client})")
    flag("--shards_per_client", type=int,
         help=f"shards per client under sort-shard (default {defaults.shards_per_client})")
    flag("--test_fraction", type=float,
         help=f"per-client held-out fraction (default {defaults.test_fraction})")
    flag("--algorithm", choices=ALGORITHMS, help=f"strategy to run (default {defaults.algorithm})")
    flag("--rounds", type=int,
         help=f"communication rounds (default {defaults.rounds} for desk scale; "
              "full-scale studies commonly run 1000)")
    flag("--client_fraction", type=float,
         help=f"fraction of clients per round (default {defaults.client_fraction})")
    flag("--local_steps", type=int,
         help=f"local gradient steps per round, tau (default {defaults.local_steps})")
    flag("--batch_size", type=int, help=f"local batch size (default {defaults.batch_size})")
    flag("--local_lr", type=float, help=f"local SGD step size (default {defaults.local_lr})")
    flag("--alpha_inner", type=float,
         help=f"inner adaptation step size (default {defaults.alpha_inner})")
    flag("--beta", type=float, help=f"outer meta step size (default {defaults.beta})")
    flag("--weighted_aggregation", metavar="BOOL",
         help="true: weight client updates by example count; false: uniform mean "
              "(default: true for fedavg, false for the perfedavg variants)")
    flag("--eval_every", type=int,
         help=f"rounds between evaluations (default {defaults.eval_every})")
    flag("--metrics_csv", help="write per-evaluation metrics to this path")
    flag("--manifest_csv", help="write the client_id,dataset_index partition manifest here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator comparing plain "
        "federated averaging with personalized meta-learning variants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and print its metric rows")
    _add_config_options(run)

    compare = sub.add_parser(
        "compare", help="run an algorithm x alpha_dir x tau grid on shared partitions"
    )
    _add_config_options(compare)
    compare.add_argument(
        "--algorithms", default="fedavg,perfedavg-hf",
        help="comma list from: " + ",".join(ALGORITHMS),
    )
    compare.add_argument("--alpha_dirs", default="0.1,0.5,10",
                         help="comma list of Dirichlet concentrations")
    compare.add_argument("--taus", default="10,4", help="comma list of local update counts")
    compare.add_argument("--table_csv", default=argparse.SUPPRESS,
                         help="write the comparison table as CSV to this path")

    stats = sub.add_parser(
        "partition-stats", help="report per-client class histograms and heterogeneity"
    )
    _add_config_options(stats)
    return parser


_COMPARE_ONLY = {"algorithms", "alpha_dirs", "taus", "table_csv"}


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config") and key not in _COMPARE_ONLY
    }
    if args.config:
        return load_config(args.config, overrides)
    return config_from_mapping(overrides)


def _parse_list(text: str, caster, flag: str) -> list:
    items = [part.strip() for part in text.split(",") if part.strip()]
    try:
        return [caster(part) for part in items]
    except ValueError:
        raise ConfigError(f"{flag} wants a comma-separated list, got {text!r}") from None


def _cmd_run(cfg: ExperimentConfig) -> int:
    result = run_experiment(cfg)
    sys.stdout.write(format_metrics_csv(result.rows))
    return 0


def _cmd_compare(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    algorithms = _parse_list(args.algorithms, str, "--algorithms")
    alpha_dirs = _parse_list(args.alpha_dirs, float, "--alpha_dirs")
    taus = _parse_list(args.taus, int, "--taus")
    cells = run_comparison(cfg, algorithms, alpha_dirs, taus)
    print(format_comparison_table(cells))
    table_csv = getattr(args, "table_csv", None)
    if table_csv:
        emit_comparison_csv(cells, table_csv)
    return 0


def _cmd_partition_stats(cfg: ExperimentConfig) -> int:
    population = build_population(cfg)
    stats = datakit.partition_stats(population.partition, population.dataset)
    for client_id, row in enumerate(stats.class_counts):
        counts = " ".join(f"{int(v):4d}" for v in row)
        print(f"client {client_id:3d}  n={int(row.sum()):5d}  classes: {counts}")
    print(f"mean pairwise TV distance: {stats.mean_pairwise_tv:.4f}")
    if cfg.manifest_csv:
        datakit.write_partition_manifest(population.partition, cfg.manifest_csv)
        print(f"manifest written to {cfg.manifest_csv}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            return _cmd_run(cfg)
        if args.command == "compare":
            return _cmd_compare(cfg, args)
        return _cmd_partition_stats(cfg)
    except ConfigError as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
