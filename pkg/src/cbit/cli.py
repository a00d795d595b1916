"""Command-line entry point.

Commands: ``preprocess`` (raw interactions -> filtered dataset files),
``train`` (run directory with config echo, per-epoch log, best checkpoint
and metrics), ``evaluate`` (whole-catalog HR/NDCG for a checkpoint) and
``dump-attention`` (averaged attention matrices as plain text).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import datetime
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, echo_config, parse_config_file, resolve_config
from .data import leave_one_out, load_dataset, load_interactions, save_dataset
from .encoder import ModelConfig, ModelParams, load_checkpoint, \
    params_from_bytes
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_split, export_attention, format_metrics
from .training import TrainConfig, fit


class _Parser(argparse.ArgumentParser):
    """argparse that raises ConfigError instead of exiting with code 2."""

    def error(self, message):
        raise ConfigError(message)


def _add_config_flag(parser):
    parser.add_argument("--config", help="key=value config file")


def _add_model_train_flags(parser):
    model = parser.add_argument_group("model")
    model.add_argument("--dim", type=int, dest="dim")
    model.add_argument("--layers", type=int, dest="layers")
    model.add_argument("--heads", type=int, dest="heads")
    model.add_argument("--slide-window", type=int, dest="slide_window",
                       help="window size / maximum model length")
    model.add_argument("--dropout", type=float, dest="dropout")
    model.add_argument("--mask-padding", action="store_const", const=True,
                       dest="mask_padding")
    train = parser.add_argument_group("training")
    train.add_argument("--epochs", type=int, dest="epochs")
    train.add_argument("--batch-size", type=int, dest="batch_size")
    train.add_argument("--lr", type=float, dest="lr")
    train.add_argument("--decay-gamma", type=float, dest="decay_gamma")
    train.add_argument("--decay-every", type=int, dest="decay_every")
    train.add_argument("--mask-prob", type=float, dest="mask_prob")
    train.add_argument("--num-views", type=int, dest="num_views")
    train.add_argument("--tau", type=float, dest="tau")
    train.add_argument("--alpha", type=float, dest="alpha")
    train.add_argument("--lambda", type=float, dest="lam")
    train.add_argument("--stride", type=int, dest="stride")
    train.add_argument("--no-contrastive", action="store_const", const=False,
                       dest="contrastive")
    train.add_argument("--loss-reduction", choices=("mean", "sum"),
                       dest="loss_reduction")
    train.add_argument("--grad-clip", type=float, dest="grad_clip")
    train.add_argument("--seed", type=int, dest="seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess",
                       help="parse, 5-core filter and serialize a corpus")
    _add_config_flag(p)
    p.add_argument("--input", dest="input")
    p.add_argument("--format", choices=("triplet", "sequence"), dest="format")
    p.add_argument("--out", dest="out")

    p = sub.add_parser("train", help="train and keep the best checkpoint")
    _add_config_flag(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--run-dir", dest="run_dir")
    _add_model_train_flags(p)

    p = sub.add_parser("evaluate", help="whole-catalog HR@K/NDCG@K")
    _add_config_flag(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--split", choices=("validation", "test"), dest="split")
    p.add_argument("--ks", dest="ks")
    p.add_argument("--filter-seen", action="store_const", const=True,
                   dest="filter_seen")
    p.add_argument("--out", dest="out")

    p = sub.add_parser("dump-attention",
                       help="export averaged attention matrices")
    _add_config_flag(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--samples", type=int, dest="samples")
    p.add_argument("--out", dest="out")
    p.add_argument("--seed", type=int, dest="seed")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {key: value for key, value in vars(args).items()
                 if key not in ("command", "config")}
    if "ks" in overrides and isinstance(overrides["ks"], str):
        from .config import _parse_ks
        overrides["ks"] = _parse_ks(overrides["ks"])
    return resolve_config(file_values, overrides)


def _require(cfg: RunConfig, *attrs: str) -> None:
    for attr in attrs:
        if getattr(cfg, attr) is None:
            flag = attr.replace("_", "-")
            raise ConfigError(f"missing required option --{flag}")


def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, max_len=cfg.slide_window,
                       dim=cfg.dim, num_layers=cfg.layers,
                       num_heads=cfg.heads, dropout=cfg.dropout,
                       seed=cfg.seed, mask_padding=cfg.mask_padding)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs,
                       learning_rate=cfg.lr, decay_gamma=cfg.decay_gamma,
                       decay_every_epochs=cfg.decay_every,
                       num_views=cfg.num_views, mask_prob=cfg.mask_prob,
                       tau=cfg.tau, alpha=cfg.alpha, lam=cfg.lam,
                       stride=cfg.stride, contrastive=cfg.contrastive,
                       grad_clip=cfg.grad_clip,
                       loss_reduction=cfg.loss_reduction, seed=cfg.seed)


def _load_compatible(cfg: RunConfig):
    dataset = load_dataset(cfg.data)
    params = load_checkpoint(cfg.checkpoint)
    if params.config.vocab_size != dataset.vocab_size:
        raise ConfigError(
            f"checkpoint vocabulary ({params.config.vocab_size}) does not "
            f"match dataset ({dataset.vocab_size}); refusing to evaluate")
    return dataset, params


def cmd_preprocess(cfg: RunConfig) -> int:
    _require(cfg, "input", "out")
    dataset = load_interactions(cfg.input, cfg.format)
    save_dataset(dataset, cfg.out)
    line = dataset.stats_line()
    (Path(cfg.out) / "stats.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "run_dir")
    dataset = load_dataset(cfg.data)
    split = leave_one_out(dataset)
    params = ModelParams.initialize(_model_config(cfg, dataset.vocab_size))
    train_cfg = _train_config(cfg)

    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(echo_config(cfg), encoding="utf-8")

    started = datetime.datetime.now().isoformat(timespec="seconds")
    result = fit(params, dataset, split, train_cfg)
    finished = datetime.datetime.now().isoformat(timespec="seconds")

    log_lines = [f"# started {started}",
                 "# epoch\tmain_loss\tcl_loss\ttheta\tlr\tval_hr10\tval_ndcg10"]
    log_lines.extend(result.log_lines)
    log_lines.append(f"# finished {finished}")
    (run_dir / "train.log").write_text("\n".join(log_lines) + "\n",
                                       encoding="utf-8")
    (run_dir / "best.ckpt").write_bytes(result.best_checkpoint)

    best = params_from_bytes(result.best_checkpoint)
    blocks = []
    for which in ("validation", "test"):
        report = evaluate_split(best, split, which=which, ks=cfg.ks,
                                filter_seen=cfg.filter_seen)
        blocks.append(format_metrics(report, which))
    (run_dir / "metrics.tsv").write_text("\n".join(blocks) + "\n",
                                         encoding="utf-8")
    print(f"best epoch {result.best_epoch}: "
          f"val HR@10={result.best_hr10:.6f} "
          f"NDCG@10={result.best_ndcg10:.6f}")
    print(f"run artifacts in {run_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "data", "checkpoint")
    dataset, params = _load_compatible(cfg)
    split = leave_one_out(dataset)
    report = evaluate_split(params, split, which=cfg.split, ks=cfg.ks,
                            filter_seen=cfg.filter_seen)
    text = format_metrics(report, cfg.split)
    print(text)
    if cfg.out:
        Path(cfg.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_dump_attention(cfg: RunConfig) -> int:
    _require(cfg, "data", "checkpoint", "out")
    dataset, params = _load_compatible(cfg)
    split = leave_one_out(dataset)
    users = list(split.test)
    count = min(cfg.samples, len(users))
    rng = np.random.default_rng((cfg.seed, 4))
    chosen = rng.choice(len(users), size=count, replace=False)
    contexts = [split.test[users[i]][0] for i in sorted(chosen)]
    export_attention(params, contexts, cfg.out)
    print(f"wrote {count}-context average attention to {cfg.out}")
    return 0


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "dump-attention": cmd_dump_attention,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
