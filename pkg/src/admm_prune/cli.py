"""Command line entry point: ``admm-prune {train,prune,retrain,search,eval,report}``.

Every command writes into its own ``--out`` directory: the resolved config
(``config.json``), checkpoints per stage, and CSV outputs. Exit codes:
0 ok, 1 usage/config error, 2 data or file-format error, 3 numeric failure,
4 accuracy budget not met by ``search``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from admm_prune import __version__, admm, model_io, nn, pruner
from admm_prune.errors import ConfigError, FormatError, InputError, NumericError
from admm_prune.mnist_io import DATA_ENV, Dataset, load_split, resolve_data_dir, train_val_split
from admm_prune.optimizer import SgdConfig, train_epochs
from admm_prune.tensor import Rng

log = logging.getLogger("admm_prune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_BUDGET = 0, 1, 2, 3, 4

MODEL_DEFAULTS = {
    "lenet300": {"alpha": 0.05, "batch_size": 16, "rho": 1e-2, "admm_decay_every": 10,
                 "targets": [4.0, 7.0, 12.0]},
    "lenet5": {"alpha": 0.05, "batch_size": 64, "rho": 2e-2, "admm_decay_every": 30,
               "targets": [20.0, 8.0, 0.9, 7.0]},
}

# stream ids for Rng.child, so each stage draws from its own substream
_INIT, _TRAIN, _ADMM, _RETRAIN = 1, 2, 3, 4
_PATH_FIELDS = ("out", "data_dir", "checkpoint")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: str = "lenet300"
    data_dir: str = ""
    seed: int = 0
    rho: float = admm.AdmmConfig.rho
    eps_scale: float = admm.AdmmConfig.eps_scale
    admm_iterations: int = admm.AdmmConfig.max_iterations
    epochs_per_update: int = admm.AdmmConfig.epochs_per_update
    retrain_epochs: int = 20
    epochs: int = 20
    alpha: float = 0.0
    batch_size: int = 0
    decay_factor: float = 0.5
    decay_every: int = 10
    admm_decay_every: int = 10
    lam: float = 1e-4
    targets: list[float] = field(default_factory=list)
    counts: list[int] | None = None
    val_size: int = 5000
    train_size: int | None = None
    patience: int = 3
    min_gain: float = 0.0005
    loss_budget: float = 0.003
    tolerance: float = 0.05
    bins: int = 100
    checkpoint: str | None = None
    out: str = "runs/latest"
    deterministic: bool = False

    def sgd(self, epochs: int, decay_every: int | None = None) -> SgdConfig:
        every = self.decay_every if decay_every is None else decay_every
        return SgdConfig(self.alpha, self.batch_size, epochs, self.decay_factor, every)

    def admm_config(self) -> admm.AdmmConfig:
        return admm.AdmmConfig(self.rho, self.eps_scale, self.admm_iterations, self.epochs_per_update)

    def loss_config(self) -> nn.LossConfig:
        return nn.LossConfig(lam=self.lam)

    def target(self) -> pruner.SparsityTarget:
        if self.counts is not None:
            return pruner.SparsityTarget(counts=list(self.counts))
        return pruner.SparsityTarget(fractions=[p / 100.0 for p in self.targets])

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results; output and data locations are excluded."""
        d = {k: v for k, v in self.as_dict().items() if k not in _PATH_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", choices=sorted(MODEL_DEFAULTS), default="lenet300")
    common.add_argument("--data-dir", help=f"MNIST IDX directory (default ${DATA_ENV} or data/mnist)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/latest", help="per-run output directory")
    common.add_argument("--val-size", type=int, default=5000, help="training examples held out for validation")
    common.add_argument("--train-size", type=int, help="use only the first N training examples")
    common.add_argument("--lr", dest="alpha", type=float, help="initial learning rate (per-model default)")
    common.add_argument("--batch-size", type=int, help="minibatch size (per-model default)")
    common.add_argument("--decay-factor", type=float, default=0.5)
    common.add_argument("--decay-every", type=int, default=10, help="epochs between decays, 0 = constant")
    common.add_argument("--lam", type=float, default=1e-4, help="L2 coefficient in the loss")
    common.add_argument("--deterministic", action="store_true",
                        help="record zero wall time so repeated runs are byte-identical")
    common.add_argument("-v", "--verbose", action="store_true")

    admm_opts = _Parser(add_help=False)
    admm_opts.add_argument("--checkpoint", help="pretrained checkpoint; trains a baseline when omitted")
    admm_opts.add_argument("--epochs", type=int, default=20, help="baseline epochs when training one")
    admm_opts.add_argument("--rho", type=float, help="ADMM penalty (per-model default)")
    admm_opts.add_argument("--eps-scale", type=float, default=admm.AdmmConfig.eps_scale,
                           help="stopping tolerance per weight (eps_i = scale * numel)")
    admm_opts.add_argument("--admm-iterations", type=int, default=admm.AdmmConfig.max_iterations)
    admm_opts.add_argument("--epochs-per-update", type=int, default=admm.AdmmConfig.epochs_per_update)
    admm_opts.add_argument("--admm-decay-every", type=int,
                           help="epochs between decays across all W-steps, 0 = constant (per-model default)")
    admm_opts.add_argument("--retrain-epochs", type=int, default=20)
    admm_opts.add_argument("--patience", type=int, default=3)
    admm_opts.add_argument("--min-gain", type=float, default=0.0005)
    admm_opts.add_argument("--bins", type=int, default=100)
    budgets = admm_opts.add_mutually_exclusive_group()
    budgets.add_argument("--targets", type=_float_list, help="per-layer keep percentages, e.g. 4,7,12")
    budgets.add_argument("--counts", type=_int_list, help="per-layer absolute keep counts")

    parser = _Parser(prog="admm-prune", description="ADMM cardinality pruning for LeNet models on MNIST.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a dense baseline")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--bins", type=int, default=100)

    sub.add_parser("prune", parents=[common, admm_opts], help="ADMM, hard prune and masked retrain")

    p = sub.add_parser("retrain", parents=[common], help="masked retraining of a pruned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--retrain-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--min-gain", type=float, default=0.0005)

    p = sub.add_parser("search", parents=[common, admm_opts], help="binary search on a global budget scale")
    p.add_argument("--loss-budget", type=float, default=0.003, help="allowed absolute accuracy drop")
    p.add_argument("--tolerance", type=float, default=0.05, help="stop once the scale interval is narrower")

    p = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("report", parents=[common], help="compression report from a checkpoint's mask")
    p.add_argument("--checkpoint", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    defaults = MODEL_DEFAULTS[args.model]
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if hasattr(args, f.name)}
    values = {k: v for k, v in values.items() if v is not None}
    values["data_dir"] = str(resolve_data_dir(args.data_dir))
    values.setdefault("alpha", defaults["alpha"])
    for name in ("batch_size", "rho", "admm_decay_every"):
        values.setdefault(name, defaults[name])
    if values.get("counts") is None and not values.get("targets"):
        values["targets"] = list(defaults["targets"])
    cfg = RunConfig(**values)
    for name in ("alpha", "rho", "eps_scale"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")
    for name in ("batch_size", "admm_iterations", "epochs_per_update", "epochs"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be at least 1")
    if cfg.decay_every < 0 or cfg.admm_decay_every < 0:
        raise ConfigError("decay intervals must be >= 0")
    return cfg


def _load_data(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    train = load_split("train", cfg.data_dir)
    test = load_split("test", cfg.data_dir)
    train, val = train_val_split(train, cfg.val_size)
    if cfg.train_size is not None:
        train = train.subset(slice(0, cfg.train_size))
    return train, val, test


def _clock(cfg: RunConfig):
    return (lambda: 0.0) if cfg.deterministic else time.perf_counter


def _meta(cfg: RunConfig, stage: str, accuracy: float, **extra) -> dict:
    return {"stage": stage, "model": cfg.model, "seed": cfg.seed, "config_hash": cfg.digest(),
            "accuracy": accuracy, **extra}


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump({"version": __version__, "config_hash": cfg.digest(), **cfg.as_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def train_baseline(cfg: RunConfig, train: Dataset, test: Dataset, rng: Rng) -> tuple[nn.Network, float]:
    net = nn.build_model(cfg.model, rng.child(_INIT))
    train_epochs(net, train, cfg.sgd(cfg.epochs), rng.child(_TRAIN), cfg.loss_config(), label="baseline")
    return net, pruner.evaluate(net, test)


def _baseline(cfg: RunConfig, train, test, rng, out: Path) -> tuple[nn.Network, float]:
    if cfg.checkpoint:
        net, _, meta = model_io.load_checkpoint(cfg.checkpoint)
        acc = pruner.evaluate(net, test)
        return net, acc
    net, acc = train_baseline(cfg, train, test, rng)
    model_io.save_checkpoint(net, None, _meta(cfg, "baseline", acc), out / "baseline.ckpt")
    print(f"baseline accuracy {acc:.4f}")
    return net, acc


@dataclass
class PipelineResult:
    admm_net: nn.Network
    pruned: nn.Network
    retrained: nn.Network
    mask: pruner.PruneMask
    trace: admm.AdmmTrace
    admm_accuracy: float
    pruned_accuracy: float
    accuracy: float
    retrain_epochs: int


def prune_pipeline(cfg: RunConfig, pretrained: nn.Network, budgets: list[int], data, rng: Rng,
                   out: Path | None = None, baseline_accuracy: float | None = None,
                   on_iteration=None) -> PipelineResult:
    """ADMM from ``pretrained``, hard prune, masked retrain; writes stage outputs when ``out`` is given."""
    train, val, test = data
    net = pretrained.copy()
    state = admm.init_admm(net, budgets, cfg.rho, admm.default_eps(net, cfg.eps_scale))
    w_sgd = cfg.sgd(cfg.epochs_per_update, cfg.admm_decay_every)
    trace = admm.run_admm(net, state, cfg.admm_config(), w_sgd, train, rng.child(_ADMM), cfg.loss_config(),
                          clock=_clock(cfg), on_iteration=on_iteration)
    admm_acc = pruner.evaluate(net, test)
    pruned, mask = pruner.hard_prune(net, budgets)
    pruned_acc = pruner.evaluate(pruned, test)
    retrained = pruned.copy()
    rt = pruner.retrain(retrained, mask, cfg.sgd(cfg.retrain_epochs), train, rng.child(_RETRAIN),
                        cfg.loss_config(), val=val, patience=cfg.patience, min_gain=cfg.min_gain)
    acc = pruner.evaluate(retrained, test)
    if out is not None:
        trace.to_csv(out / "admm_trace.csv")
        model_io.save_checkpoint(net, None, _meta(cfg, "admm", admm_acc, admm_status=trace.status), out / "admm.ckpt")
        model_io.save_checkpoint(pruned, mask, _meta(cfg, "pruned", pruned_acc), out / "pruned.ckpt")
        model_io.save_checkpoint(retrained, mask, _meta(cfg, "retrained", acc), out / "retrained.ckpt")
        model_io.export_histograms(net, out, cfg.bins, prefix="hist_admm")
        model_io.export_histograms(retrained, out, cfg.bins, prefix="hist_retrained")
        report = pruner.compression_report(pretrained, retrained, mask, baseline_accuracy, acc)
        report.to_csv(out / "report.csv")
        (out / "report.txt").write_text(report.to_table() + "\n")
    log.info("admm %s after %d iterations; accuracy admm %.4f pruned %.4f retrained %.4f",
             trace.status, trace.iterations(), admm_acc, pruned_acc, acc)
    return PipelineResult(net, pruned, retrained, mask, trace, admm_acc, pruned_acc, acc, rt.epochs_run)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train, _, test = _load_data(cfg)
    net, acc = train_baseline(cfg, train, test, Rng(cfg.seed))
    model_io.save_checkpoint(net, None, _meta(cfg, "baseline", acc), out / "baseline.ckpt")
    model_io.export_histograms(net, out, cfg.bins, prefix="hist_baseline")
    print(f"baseline accuracy {acc:.4f}")
    return EXIT_OK


def _check_targets(cfg: RunConfig) -> None:
    # fail on malformed budgets before spending time on training
    cfg.target().resolve(nn.build_model(cfg.model, Rng(0)))


def cmd_prune(cfg: RunConfig, out: Path) -> int:
    _check_targets(cfg)
    data = _load_data(cfg)
    rng = Rng(cfg.seed)
    pretrained, base_acc = _baseline(cfg, data[0], data[2], rng, out)
    budgets = cfg.target().resolve(pretrained)
    result = prune_pipeline(cfg, pretrained, budgets, data, rng, out, base_acc)
    print((out / "report.txt").read_text(), end="")
    print(f"admm {result.trace.status} after {result.trace.iterations()} iterations; "
          f"accuracy drop {base_acc - result.accuracy:+.4f}")
    return EXIT_OK


def cmd_retrain(cfg: RunConfig, out: Path) -> int:
    train, val, test = _load_data(cfg)
    net, mask, _ = model_io.load_checkpoint(cfg.checkpoint)
    if mask is None:
        raise FormatError(f"{cfg.checkpoint} has no mask; retrain needs a pruned checkpoint")
    pruner.retrain(net, mask, cfg.sgd(cfg.retrain_epochs), train, Rng(cfg.seed).child(_RETRAIN), cfg.loss_config(),
                   val=val, patience=cfg.patience, min_gain=cfg.min_gain)
    acc = pruner.evaluate(net, test)
    model_io.save_checkpoint(net, mask, _meta(cfg, "retrained", acc), out / "retrained.ckpt")
    print(f"retrained accuracy {acc:.4f}")
    return EXIT_OK


def cmd_search(cfg: RunConfig, out: Path) -> int:
    _check_targets(cfg)
    data = _load_data(cfg)
    rng = Rng(cfg.seed)
    pretrained, base_acc = _baseline(cfg, data[0], data[2], rng, out)
    rows = []

    def pipeline(budgets):
        acc = prune_pipeline(cfg, pretrained, budgets, data, rng).accuracy
        rows.append((budgets, acc))
        return acc

    result = pruner.search_budgets(pipeline, pretrained, cfg.target(), base_acc, cfg.loss_budget, cfg.tolerance)
    with open(out / "search.csv", "w") as fh:
        fh.write("scale,budgets,accuracy,drop\n")
        for (scale, drop), (budgets, acc) in zip(result.probes, rows):
            fh.write(f"{scale!r},{' '.join(map(str, budgets))},{acc!r},{drop!r}\n")
    if not result.feasible:
        print(f"initial targets lose {result.probes[0][1]:.4f} accuracy, above the budget {cfg.loss_budget}",
              file=sys.stderr)
        return EXIT_BUDGET
    budgets = result.target.resolve(pretrained)
    print(f"smallest feasible scale {result.scale:.4f} -> budgets {budgets}")
    final = dataclasses.replace(cfg, counts=budgets, targets=[])
    prune_pipeline(final, pretrained, budgets, data, rng, out, base_acc)
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    test = load_split("test", cfg.data_dir)
    net, _, meta = model_io.load_checkpoint(cfg.checkpoint)
    acc = pruner.evaluate(net, test)
    recorded = meta.get("accuracy")
    print(f"accuracy {acc:.4f}" + (f" (recorded {recorded:.4f})" if recorded is not None else ""))
    return EXIT_OK


def cmd_report(cfg: RunConfig, out: Path) -> int:
    net, mask, meta = model_io.load_checkpoint(cfg.checkpoint)
    if mask is None:
        raise FormatError(f"{cfg.checkpoint} has no mask to report on")
    rows = [pruner.LayerRow(name, m.size, int(m.sum())) for name, m in zip(net.names, mask)]
    report = pruner.CompressionReport(rows, accuracy=meta.get("accuracy"))
    report.to_csv(out / "report.csv")
    print(report.to_table())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "retrain": cmd_retrain, "search": cmd_search,
            "eval": cmd_eval, "report": cmd_report}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        _write_config(cfg, out)
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[cfg.command](cfg, out)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
