"""Command-line front end: ``fedshap {run,compare,sweep,plot}``."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import PerturbationSpec
from .errors import ConfigurationError, FedShapError, IngestionError, InputError
from .nn import TrainConfig
from .selection import KINDS, StrategyConfig
from .shapley import GtgConfig
from .simulator import DataConfig, SimConfig, compare, format_table, read_records_csv, run

logger = logging.getLogger("fedshap")

DEFAULT_FEDPROX_MU = 0.1
SWEEP_AXES = {
    "alpha_dir": "alpha_dir",
    "rounds": "rounds",
    "straggler_frac": "straggler_frac",
    "sigma": "noise_sigma",
}


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# option name -> (parser, help); every option is both a --flag and a config-file key
OPTIONS = {
    "dataset": (str, "synthetic | mnist | fmnist"),
    "data_dir": (str, "directory holding IDX files (default $FEDSHAP_DATA_DIR)"),
    "strategy": (str, " | ".join(KINDS)),
    "n": (int, "number of clients N"),
    "m": (int, "clients selected per round M"),
    "rounds": (int, "communication rounds T"),
    "alpha_dir": (float, "Dirichlet label-skew concentration"),
    "size_law": (str, "power_law | uniform client sizes"),
    "label_draw": (str, "multinomial | proportional label counts per shard"),
    "straggler_frac": (float, "fraction of straggling clients"),
    "noise_sigma": (float, "largest per-client update noise scale"),
    "mu": (float, "FedProx proximal coefficient"),
    "sv_mode": (str, "mean | exp"),
    "exp_alpha": (float, "exponential averaging weight of the old SV"),
    "sv_epsilon": (float, "GTG-Shapley truncation threshold"),
    "sv_max_iters": (int, "GTG-Shapley sampling rounds (default 50 x M)"),
    "seed": (int, "random seed"),
    "epochs": (int, "local epochs E"),
    "batches": (int, "mini-batches per epoch B"),
    "lr": (float, "learning rate"),
    "momentum": (float, "SGD momentum"),
    "c_explore": (float, "UCB exploration weight"),
    "beta": (float, "S-FedAvg softmax temperature"),
    "decay": (float, "Power-Of-Choice candidate-set decay"),
    "d0": (int, "Power-Of-Choice initial candidate-set size (default N)"),
    "hidden": (_ints, "hidden layer widths, comma separated"),
    "n_train": (int, "synthetic training pool size"),
    "n_test": (int, "synthetic held-out pool size"),
    "dim": (int, "synthetic feature dimension"),
    "classes": (int, "synthetic class count"),
    "separation": (float, "synthetic class-mean distance from the origin"),
    "workers": (int, "threads for client training"),
    "timing": (_bool, "record wall time per round (breaks byte-identical CSVs)"),
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; a section header is optional."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    if path.suffix == ".json":
        return {"__json__": json.loads(path.read_text())}
    text = path.read_text()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[fedshap]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise UsageError(f"unknown config key {key!r} in {path}")
            try:
                out[key] = OPTIONS[key][0](value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r} in {path}: {value!r}") from exc
    return out


def effective_options(args) -> dict:
    opts = {}
    if getattr(args, "config", None):
        opts.update(read_config_file(args.config))
    for key in OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def build_config(opts: dict) -> SimConfig:
    """Translate flat options into a :class:`SimConfig`."""
    if "__json__" in opts:
        base = SimConfig.from_dict(opts["__json__"])
        rest = {k: v for k, v in opts.items() if k != "__json__"}
        return _apply(base, rest)
    return _apply(SimConfig(), opts)


def _apply(base: SimConfig, o: dict) -> SimConfig:
    strategy = o.get("strategy", base.strategy.kind)
    if strategy not in KINDS:
        raise UsageError(f"unknown strategy {strategy!r}")
    mu = o.get("mu", base.train.prox_mu)
    if strategy == "fedprox" and "mu" not in o and mu == 0:
        mu = DEFAULT_FEDPROX_MU
    sv_mode = o.get("sv_mode", base.sv_mode)
    sv_mode = {"exp": "exponential"}.get(sv_mode, sv_mode)
    s, t, g, d, p = base.strategy, base.train, base.gtg, base.data, base.perturb
    try:
        return SimConfig(
            n_clients=o.get("n", base.n_clients),
            m=o.get("m", base.m),
            rounds=o.get("rounds", base.rounds),
            strategy=StrategyConfig(
                kind=strategy,
                c_explore=o.get("c_explore", s.c_explore),
                beta_temp=o.get("beta", s.beta_temp),
                d0=o.get("d0", s.d0),
                decay=o.get("decay", s.decay),
            ),
            train=TrainConfig(
                epochs=o.get("epochs", t.epochs),
                batches_per_epoch=o.get("batches", t.batches_per_epoch),
                learning_rate=o.get("lr", t.learning_rate),
                momentum=o.get("momentum", t.momentum),
                prox_mu=mu,
            ),
            partition_alpha=o.get("alpha_dir", base.partition_alpha),
            size_law=o.get("size_law", base.size_law),
            label_draw=o.get("label_draw", base.label_draw),
            perturb=PerturbationSpec(
                straggler_fraction=o.get("straggler_frac", p.straggler_fraction),
                noise_scale=o.get("noise_sigma", p.noise_scale),
            ),
            gtg=GtgConfig(
                epsilon=o.get("sv_epsilon", g.epsilon),
                max_iters=o.get("sv_max_iters", g.max_iters),
                convergence_window=g.convergence_window,
                convergence_tol=g.convergence_tol,
            ),
            sv_mode=sv_mode,
            exp_alpha=o.get("exp_alpha", base.exp_alpha),
            seed=o.get("seed", base.seed),
            data=DataConfig(
                source=o.get("dataset", d.source),
                data_dir=o.get("data_dir", d.data_dir),
                n_classes=o.get("classes", d.n_classes),
                dim=o.get("dim", d.dim),
                n_train=o.get("n_train", d.n_train),
                n_test=o.get("n_test", d.n_test),
                separation=o.get("separation", d.separation),
            ),
            hidden=o.get("hidden", base.hidden),
            activation=base.activation,
            workers=o.get("workers", base.workers),
            record_timing=o.get("timing", base.record_timing),
            exact_sv=base.exact_sv,
        )
    except (ConfigurationError, InputError) as exc:
        raise UsageError(str(exc)) from exc


def _add_sim_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file, or a config.json echo")
    for key, (typ, help_text) in OPTIONS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_text)
    p.add_argument("--out", default="runs", help="output directory")


def _save_run(result, out):
    run_dir = result.save(out)
    logger.info("wrote %s", run_dir)
    return run_dir


def cmd_run(args) -> int:
    cfg = build_config(effective_options(args))
    result = run(cfg)
    run_dir = _save_run(result, args.out)
    print(f"{cfg.label()} seed={cfg.seed} final test accuracy {100 * result.final_accuracy:.2f}")
    print(run_dir)
    return 0


def _write_summary(path, rows, extra=None):
    extra = extra or []
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([name for name, _ in extra] + ["strategy", "mean", "std", "n", "accuracies"])
        for i, row in enumerate(rows):
            prefix = [value[i] for _, value in extra]
            writer.writerow(
                prefix
                + [row.label, repr(row.mean), repr(row.std), len(row.accuracies),
                   ";".join(repr(a) for a in row.accuracies)]
            )


def _strategy_configs(base: SimConfig, strategies):
    cfgs = []
    for kind in strategies:
        if kind not in KINDS:
            raise UsageError(f"unknown strategy {kind!r}")
        train = base.train
        if kind == "fedprox" and train.prox_mu == 0:
            train = dataclasses.replace(train, prox_mu=DEFAULT_FEDPROX_MU)
        cfgs.append(dataclasses.replace(base, strategy=dataclasses.replace(base.strategy, kind=kind), train=train))
    return cfgs


def _seeds(args, base):
    return _ints(args.seeds) if args.seeds else [base.seed]


def cmd_compare(args) -> int:
    base = build_config(effective_options(args))
    cfgs = _strategy_configs(base, args.strategies.split(","))
    out = Path(args.out)
    rows = compare(cfgs, _seeds(args, base), on_result=lambda c, r: _save_run(r, out))
    print(format_table(rows))
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(out / "summary.csv", rows)
    return 0


def cmd_sweep(args) -> int:
    opts = effective_options(args)
    key = SWEEP_AXES[args.axis]
    parse = OPTIONS[key][0]
    try:
        values = [parse(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values {args.values!r}") from exc
    if not values:
        raise UsageError("--values is empty")
    out = Path(args.out)
    all_rows, axis_col, value_col = [], [], []
    for value in values:
        base = build_config({**opts, key: value})
        cfgs = _strategy_configs(base, args.strategies.split(","))
        target = out / f"{args.axis}={value:g}"
        rows = compare(cfgs, _seeds(args, base), on_result=lambda c, r, d=target: _save_run(r, d))
        for row in rows:
            all_rows.append(row)
            axis_col.append(args.axis)
            value_col.append(value)
            print(f"{args.axis}={value:g}  {row.label:<24} {row.formatted()}")
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(out / "summary.csv", all_rows, [("axis", axis_col), ("value", value_col)])
    return 0


PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def _series_label(csv_path: Path) -> str:
    echo = csv_path.parent / "config.json"
    if echo.exists():
        try:
            return SimConfig.from_dict(json.loads(echo.read_text())).label()
        except (ValueError, TypeError, FedShapError):
            pass
    return csv_path.parent.name if csv_path.name == "rounds.csv" else csv_path.stem


def render_svg(series: dict, width: int = 640, height: int = 400) -> str:
    """Line chart of test accuracy per round, one polyline per series."""
    left, right, top, bottom = 60, 160, 20, 50
    pw, ph = width - left - right, height - top - bottom
    t_max = max(max(len(ys) - 1 for ys in series.values()), 1)

    def sx(t):
        return left + pw * t / t_max

    def sy(a):
        return top + ph * (1.0 - a)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        a = i / 5
        parts.append(
            f'<text x="{left - 6}" y="{sy(a) + 4:.1f}" font-size="11" text-anchor="end">{a:.1f}</text>'
        )
    for i in range(6):
        t = round(t_max * i / 5)
        parts.append(
            f'<text x="{sx(t):.1f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{t}</text>'
        )
    parts.append(
        f'<text x="{left + pw / 2}" y="{height - 10}" font-size="13" text-anchor="middle">'
        "communication round</text>"
    )
    parts.append(
        f'<text x="15" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + ph / 2})">test accuracy</text>'
    )
    for i, (label, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{sx(t):.2f},{sy(a):.2f}" for t, a in enumerate(ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}">'
            f"<title>{escape(label)}</title></polyline>"
        )
        y = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 10}" y1="{y}" x2="{left + pw + 30}" y2="{y}" stroke="{color}"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{y + 4}" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    grouped = {}
    for name in args.csv:
        path = Path(name)
        if not path.exists():
            raise UsageError(f"no such CSV: {path}")
        rows = read_records_csv(path)
        if not rows:
            raise UsageError(f"empty CSV: {path}")
        grouped.setdefault(_series_label(path), []).append([r["test_acc"] for r in rows])
    series = {}
    for label, curves in grouped.items():
        n = min(len(c) for c in curves)
        series[label] = np.mean([c[:n] for c in curves], axis=0).tolist()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(series))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one configuration")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="mean/std of final accuracy over seeds")
    _add_sim_flags(p)
    p.add_argument("--strategies", default="greedy_fed,ucb,s_fedavg,fedavg,fedprox,power_of_choice,centralized")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="strategies x one heterogeneity axis")
    _add_sim_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma separated axis values")
    p.add_argument("--strategies", default="greedy_fed,fedavg")
    p.add_argument("--seeds", default=None, help="comma separated seeds (default --seed)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="SVG of test accuracy vs round from rounds CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default="accuracy.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, IngestionError, InputError) as exc:
        print(f"fedshap: error: {exc}", file=sys.stderr)
        return 2
    except FedShapError as exc:
        print(f"fedshap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
