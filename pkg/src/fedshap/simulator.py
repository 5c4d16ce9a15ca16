"""Round loop for Shapley-guided client selection and its baselines."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import data as data_mod
from .errors import ConfigurationError, FedShapError, InputError, RunError
from .nn import (
    Dataset,
    ParamVector,
    TrainConfig,
    client_update,
    init_params,
    loss_and_accuracy,
    model_average,
)
from .selection import SelectionContext, StrategyConfig, select
from .shapley import (
    CoalitionUtility,
    CumulativeSv,
    GtgConfig,
    SvReport,
    exact_shapley,
    gtg_shapley,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "selected", "val_loss", "test_loss", "test_acc", "sv_json", "utility_evals", "ms")

# independent random streams, keyed as [seed, stream, ...]
(_DATA, _PARTITION, _PERTURB, _INIT, _RR, _SELECT, _TRAIN, _NOISE, _EPOCHS, _SHAPLEY, _SPLIT,
 _CENTRAL) = range(12)

EXACT_HOOK_MAX_M = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


@dataclass
class DataConfig:
    """Where client data comes from. Synthetic fields are ignored for IDX datasets."""

    source: str = "synthetic"
    data_dir: Optional[str] = None
    n_classes: int = 10
    dim: int = 20
    n_train: int = 6000
    n_test: int = 1000
    separation: float = 4.0

    def __post_init__(self):
        if self.source not in ("synthetic", "mnist", "fmnist"):
            raise ConfigurationError(f"unknown dataset {self.source!r}")


@dataclass
class SimConfig:
    n_clients: int = 30
    m: int = 3
    rounds: int = 60
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    partition_alpha: float = 1e-4
    size_law: str = "power_law"
    label_draw: str = "multinomial"
    perturb: data_mod.PerturbationSpec = field(default_factory=data_mod.PerturbationSpec)
    gtg: GtgConfig = field(default_factory=GtgConfig)
    sv_mode: str = "mean"
    exp_alpha: float = 0.9
    seed: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    hidden: Optional[tuple] = None
    activation: str = "relu"
    workers: int = 1
    record_timing: bool = False
    exact_sv: bool = False

    def __post_init__(self):
        if not 1 <= self.m <= self.n_clients:
            raise ConfigurationError(f"need 1 <= M <= N, got M={self.m}, N={self.n_clients}")
        if self.rounds < 1:
            raise InputError("rounds must be >= 1")
        if self.sv_mode not in ("mean", "exponential"):
            raise ConfigurationError(f"unknown sv_mode {self.sv_mode!r}")
        if self.exact_sv and self.m > EXACT_HOOK_MAX_M:
            raise ConfigurationError(f"exact SV hook supports M <= {EXACT_HOOK_MAX_M}")
        if self.hidden is not None:
            self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def hidden_layers(self) -> tuple:
        if self.hidden is not None:
            return self.hidden
        return (32,) if self.data.source == "synthetic" else (64,)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = None if self.hidden is None else list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        nested = {
            "strategy": StrategyConfig,
            "train": TrainConfig,
            "perturb": data_mod.PerturbationSpec,
            "gtg": GtgConfig,
            "data": DataConfig,
        }
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        if d.get("hidden") is not None:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def label(self) -> str:
        kind = self.strategy.kind
        if kind == "fedprox":
            return f"fedprox(mu={self.train.prox_mu:g})"
        if kind in ("greedy_fed", "ucb") and self.sv_mode == "exponential":
            return f"{kind}(exp={self.exp_alpha:g})"
        return kind


@dataclass
class FederatedData:
    shards: List[data_mod.ClientShard]
    val: Dataset
    test: Dataset
    n_classes: int

    @property
    def sizes(self) -> List[int]:
        return [s.n for s in self.shards]

    @property
    def input_dim(self) -> int:
        return self.val.dim

    def train_union(self) -> Dataset:
        feats = np.concatenate([s.dataset.features for s in self.shards])
        labels = np.concatenate([s.dataset.labels for s in self.shards])
        return Dataset(feats, labels, self.n_classes)


def load_pools(cfg: SimConfig):
    """Training pool and held-out pool for the configured dataset."""
    dc = cfg.data
    if dc.source == "synthetic":
        full = data_mod.make_synthetic(
            dc.n_classes, dc.dim, dc.n_train + dc.n_test, stream(cfg.seed, _DATA), dc.separation
        )
        return full.subset(np.arange(dc.n_train)), full.subset(np.arange(dc.n_train, full.n))
    data_dir = dc.data_dir
    if data_dir is None:
        root = os.environ.get(data_mod.DATA_DIR_ENV)
        if root and (Path(root) / dc.source).is_dir():
            data_dir = str(Path(root) / dc.source)
        else:
            data_dir = root
    train = data_mod.load_idx(*data_mod.find_idx_pair("train", data_dir))
    held_out = data_mod.load_idx(*data_mod.find_idx_pair("test", data_dir))
    return train, held_out


def prepare_data(cfg: SimConfig) -> FederatedData:
    train, held_out = load_pools(cfg)
    spec = data_mod.PartitionSpec(cfg.partition_alpha, cfg.n_clients, cfg.size_law, cfg.label_draw)
    sizes = data_mod.partition_sizes(spec, train.n, stream(cfg.seed, _PARTITION, 0))
    shards = data_mod.dirichlet_partition(train, spec, sizes, stream(cfg.seed, _PARTITION, 1))
    shards = data_mod.assign_perturbations(shards, cfg.perturb, stream(cfg.seed, _PERTURB))
    val, test = data_mod.split_half(held_out, stream(cfg.seed, _SPLIT))
    return FederatedData(shards, val, test, train.n_classes)


@dataclass
class RoundRecord:
    t: int
    selected: List[int]
    val_loss_before: float
    val_loss: float
    test_loss: float
    test_acc: float
    sv: Dict[int, float]
    utility_evals: int = 0
    truncated: bool = False
    ms: float = 0.0

    def csv_row(self) -> list:
        return [
            self.t,
            ";".join(str(k) for k in self.selected),
            repr(self.val_loss),
            repr(self.test_loss),
            repr(self.test_acc),
            json.dumps({str(k): v for k, v in self.sv.items()}),
            self.utility_evals,
            f"{self.ms:.3f}",
        ]


@dataclass
class RunResult:
    records: List[RoundRecord]
    final_params: ParamVector
    config: dict
    seed: int
    counts: Dict[int, int] = field(default_factory=dict)
    cumulative_sv: Dict[int, float] = field(default_factory=dict)
    initial_val_loss: float = float("nan")

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in self.records:
                writer.writerow(rec.csv_row())
        return path

    def save(self, out_dir) -> Path:
        """Write ``rounds.csv`` and ``config.json`` into ``out_dir/<config hash>``."""
        cfg = SimConfig.from_dict(self.config)
        run_dir = Path(out_dir) / f"{cfg.label()}-{cfg.config_hash()}"
        run_dir.mkdir(parents=True, exist_ok=True)
        self.write_csv(run_dir / "rounds.csv")
        (run_dir / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        return run_dir


def read_records_csv(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["t"] = int(row["t"])
        for key in ("val_loss", "test_loss", "test_acc", "ms"):
            row[key] = float(row[key])
    return rows


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Simulation:
    """Mutable state of one run; :func:`run` is the public entry point."""

    def __init__(self, cfg: SimConfig, fed: Optional[FederatedData] = None):
        if cfg.strategy.kind == "centralized":
            raise ConfigurationError("use run_centralized for the centralized baseline")
        self.cfg = cfg
        self.fed = fed if fed is not None else prepare_data(cfg)
        if len(self.fed.shards) != cfg.n_clients:
            raise ConfigurationError("federated data does not match n_clients")
        dims = (self.fed.input_dim, *cfg.hidden_layers, self.fed.n_classes)
        self.params = init_params(dims, stream(cfg.seed, _INIT))
        self.rr_order = [int(k) for k in stream(cfg.seed, _RR).permutation(cfg.n_clients)]
        mode = "exponential" if cfg.strategy.kind == "s_fedavg" else cfg.sv_mode
        self.cumulative = CumulativeSv(mode=mode, alpha=cfg.exp_alpha)
        self.records: List[RoundRecord] = []

    def evaluate(self, params: ParamVector, dataset: Dataset):
        return loss_and_accuracy(params, dataset, self.cfg.activation)

    def _train_one(self, t: int, k: int) -> ParamVector:
        cfg = self.cfg
        shard = self.fed.shards[k]
        epochs = None
        if shard.is_straggler:
            epochs = int(stream(cfg.seed, _EPOCHS, t, k).integers(1, cfg.train.epochs + 1))
        w = client_update(
            self.params,
            shard.dataset,
            cfg.train,
            stream(cfg.seed, _TRAIN, t, k),
            epochs_override=epochs,
            activation=cfg.activation,
            round_index=t,
            client=k,
        )
        return data_mod.apply_update_noise(w, shard.sigma, stream(cfg.seed, _NOISE, t, k))

    def _local_loss(self, k: int) -> float:
        return self.evaluate(self.params, self.fed.shards[k].dataset)[0]

    def step(self, t: int) -> RoundRecord:
        cfg = self.cfg
        started = time.perf_counter()
        ctx = SelectionContext(
            t=t,
            n_clients=cfg.n_clients,
            m=cfg.m,
            sizes=self.fed.sizes,
            rr_order=self.rr_order,
            sv=self.cumulative.values,
            counts=self.cumulative.counts,
            local_loss_query=self._local_loss,
        )
        selected = select(ctx, cfg.strategy, stream(cfg.seed, _SELECT, t))

        ordered = sorted(selected)
        trained = _pool_map(lambda k: self._train_one(t, k), ordered, cfg.workers)
        updates = {k: (self.fed.shards[k].n, w) for k, w in zip(ordered, trained)}
        for k in selected:
            self.cumulative.record_selection(k)

        new_params = model_average(updates)
        if not new_params.is_finite():
            raise FedShapError("aggregated model contains non-finite values")

        val_before = self.evaluate(self.params, self.fed.val)[0]

        def utility(subset: frozenset) -> float:
            if not subset:
                return -val_before
            if len(subset) == len(updates):
                return -self.evaluate(new_params, self.fed.val)[0]
            return -self.evaluate(model_average({k: updates[k] for k in subset}), self.fed.val)[0]

        u = CoalitionUtility(utility)
        if cfg.exact_sv:
            round_sv = exact_shapley(u, ordered)
            truncated = False
        else:
            report = gtg_shapley(u, ordered, cfg.gtg, stream(cfg.seed, _SHAPLEY, t))
            round_sv, truncated = report.round_sv, report.truncated_between_rounds
        self.cumulative.update(SvReport(round_sv, truncated, utility_evals=u.evals))

        self.params = new_params
        val_after = -u(ordered)
        test_loss, test_acc = self.evaluate(new_params, self.fed.test)
        elapsed = (time.perf_counter() - started) * 1000.0 if cfg.record_timing else 0.0
        return RoundRecord(
            t=t,
            selected=[int(k) for k in selected],
            val_loss_before=val_before,
            val_loss=val_after,
            test_loss=test_loss,
            test_acc=test_acc,
            sv={int(k): float(round_sv[k]) for k in ordered},
            utility_evals=u.evals,
            truncated=truncated,
            ms=elapsed,
        )

    def result(self, initial_val_loss: float) -> RunResult:
        return RunResult(
            records=list(self.records),
            final_params=self.params,
            config=self.cfg.to_dict(),
            seed=self.cfg.seed,
            counts=dict(self.cumulative.counts),
            cumulative_sv=dict(self.cumulative.values),
            initial_val_loss=initial_val_loss,
        )


def run(cfg: SimConfig, fed: Optional[FederatedData] = None) -> RunResult:
    """Run ``cfg.rounds`` communication rounds and return every round's metrics.

    Training stops after exactly ``cfg.rounds`` rounds whether or not the
    model has converged. Any failure raises :class:`RunError` carrying the
    records of the rounds that completed.
    """
    if cfg.strategy.kind == "centralized":
        return run_centralized(cfg, fed)
    sim = Simulation(cfg, fed)
    initial_val = sim.evaluate(sim.params, sim.fed.val)[0]
    for t in range(cfg.rounds):
        try:
            rec = sim.step(t)
        except Exception as exc:
            raise RunError(str(exc), t, sim.records) from exc
        sim.records.append(rec)
        logger.debug("round %d selected=%s acc=%.4f", t, rec.selected, rec.test_acc)
    return sim.result(initial_val)


def run_centralized(cfg: SimConfig, fed: Optional[FederatedData] = None) -> RunResult:
    """Train one model on the union of all shards, ``cfg.train.epochs`` epochs per round."""
    if cfg.rounds < 1:
        raise InputError("rounds must be >= 1")
    fed = fed if fed is not None else prepare_data(cfg)
    train = fed.train_union()
    dims = (fed.input_dim, *cfg.hidden_layers, fed.n_classes)
    params = init_params(dims, stream(cfg.seed, _INIT))
    train_cfg = dataclasses.replace(cfg.train, prox_mu=0.0)
    initial_val = loss_and_accuracy(params, fed.val, cfg.activation)[0]
    records = []
    for t in range(cfg.rounds):
        started = time.perf_counter()
        try:
            before = loss_and_accuracy(params, fed.val, cfg.activation)[0]
            params = client_update(
                params, train, train_cfg, stream(cfg.seed, _CENTRAL, t),
                activation=cfg.activation, round_index=t,
            )
            val_after = loss_and_accuracy(params, fed.val, cfg.activation)[0]
            test_loss, test_acc = loss_and_accuracy(params, fed.test, cfg.activation)
        except Exception as exc:
            raise RunError(str(exc), t, records) from exc
        elapsed = (time.perf_counter() - started) * 1000.0 if cfg.record_timing else 0.0
        records.append(
            RoundRecord(t, [], before, val_after, test_loss, test_acc, {}, 0, False, elapsed)
        )
    return RunResult(records, params, cfg.to_dict(), cfg.seed, initial_val_loss=initial_val)


@dataclass
class SummaryRow:
    label: str
    mean: float
    std: float
    accuracies: List[float]

    def formatted(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}"


def summarize(label: str, accuracies: Sequence[float]) -> SummaryRow:
    acc = [float(a) for a in accuracies]
    std = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
    return SummaryRow(label, float(np.mean(acc)), std, acc)


def compare(
    cfgs: Sequence[SimConfig],
    seeds: Sequence[int],
    runner: Callable[[SimConfig], RunResult] = run,
    on_result: Optional[Callable[[SimConfig, RunResult], None]] = None,
) -> List[SummaryRow]:
    """Final test accuracy, mean and sample std over ``seeds``, for each config."""
    if not cfgs or not seeds:
        raise InputError("compare needs at least one config and one seed")
    rows = []
    for cfg in cfgs:
        accs = []
        for seed in seeds:
            seeded = dataclasses.replace(cfg, seed=int(seed))
            try:
                result = runner(seeded)
            except FedShapError as exc:
                raise RunError(f"[{cfg.label()}, seed={seed}] {exc}", getattr(exc, "round_index", -1),
                               getattr(exc, "records", [])) from exc
            if on_result is not None:
                on_result(seeded, result)
            accs.append(result.final_accuracy)
        rows.append(summarize(cfg.label(), accs))
    return rows


def format_table(rows: Sequence[SummaryRow]) -> str:
    width = max(len(r.label) for r in rows)
    return "\n".join(f"{r.label:<{width}}  {r.formatted()}" for r in rows)
