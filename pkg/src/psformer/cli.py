"""Command-line front end.

    psformer train --dataset ETTh1.csv --horizon 96 --out runs/etth1_96
    psformer eval --checkpoint runs/etth1_96/checkpoint.npz --dataset ETTh1.csv
    psformer count-params --sharing none --encoders 3
    psformer grad-check
    psformer export-attention --checkpoint ... --dataset ... --sample-index 0 --channel 2
    psformer ablate --axis segments --dataset ETTh1.csv

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigFileError, ExperimentConfig, load_config
from .data import DataError, load_csv, split_and_standardize, SplitSpec
from .gradcheck import TINY, check_model_gradients
from .model import (SHARING_MODES, ConfigError, ModelConfig, channel_submatrix, count_parameters,
                    cross_channel_submatrix, export_attention, load_checkpoint, n_distinct_blocks,
                    save_checkpoint)
from .tensor import ShapeError
from .trainer import TrainingError, evaluate_params, train

log = logging.getLogger("psformer")

ABLATION_DEFAULTS = {
    "segments": [8, 16, 32, 64],
    "encoders": [1, 2, 3, 4],
    "sharing": list(SHARING_MODES),
    "rho": [round(0.1 * i, 1) for i in range(11)],
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

_FLAG_KEYS = ("dataset", "dataset_name", "split", "channels", "seq_len", "horizon", "segments",
              "encoders", "sharing", "revin_window", "rho", "lr", "batch_size", "eval_batch_size",
              "max_epochs", "patience", "seed", "dtype", "out")


def experiment_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg.update({k: getattr(args, k, None) for k in _FLAG_KEYS})


def _require_dataset(cfg):
    if not cfg.dataset:
        raise UsageError("a dataset path is required (--dataset or 'dataset =' in the config)")
    if not Path(cfg.dataset).is_file():
        raise UsageError(f"dataset not found: {cfg.dataset}")


def _load_windows(cfg: ExperimentConfig, seq_len=None, horizon=None):
    raw = load_csv(cfg.dataset)
    L = seq_len or cfg.seq_len
    F = horizon or cfg.horizon
    spec = SplitSpec.parse(cfg.split, cfg.dataset, overlap=L)
    ds = split_and_standardize(raw, spec, L, F, dtype=np.dtype(cfg.dtype))
    return raw, ds


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def run_training(cfg: ExperimentConfig, out: Path):
    """Train one resolved config into ``out``; returns the RunReport."""
    raw, ds = _load_windows(cfg)
    cfg = cfg.resolve(n_channels=raw.n_channels)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    report, params = train(model_cfg, train_cfg, ds, dataset_name=cfg.dataset_name)
    report.write(out / "report.json")
    save_checkpoint(out / "checkpoint.npz", params, model_cfg,
                    extra={"best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss,
                           "split": cfg.split, "dataset": cfg.dataset})
    _write_rows(out / "epochs.csv", ["epoch", "train_loss", "val_loss", "seconds"],
                [[i + 1, f"{a:.9g}", f"{b:.9g}", f"{c:.3f}"] for i, (a, b, c) in
                 enumerate(zip(report.train_loss, report.val_loss, report.epoch_seconds))])
    fig = plotting.plot_losses(report.train_loss, report.val_loss, report.best_epoch,
                               title=f"{cfg.dataset_name} H={cfg.horizon}")
    plotting.savefig(fig, str(out / "loss_curve"))
    return report


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    cfg = experiment_from_args(args)
    _require_dataset(cfg)
    report = run_training(cfg, Path(cfg.out))
    print(f"params {report.n_params} (encoder {report.n_params_encoder}, head {report.n_params_head})")
    print(f"epochs {report.epochs_run}  best epoch {report.best_epoch}  best val {report.best_val_loss:.6f}")
    print(f"test mse {report.test_mse:.6f}  mae {report.test_mae:.6f}")
    print(f"wrote {cfg.out}/report.json, checkpoint.npz, config.txt, epochs.csv, loss_curve.png")
    return 0


def cmd_eval(args):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = experiment_from_args(args)
    _require_dataset(cfg)
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    raw, ds = _load_windows(cfg, model_cfg.seq_len, model_cfg.horizon)
    if raw.n_channels != model_cfg.n_channels:
        raise ValueError(f"checkpoint expects {model_cfg.n_channels} channels, dataset has {raw.n_channels}")
    mse, mae = evaluate_params(params, model_cfg, ds, args.region, cfg.eval_batch_size)
    print("region,mse,mae")
    print(f"{args.region},{mse:.9g},{mae:.9g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.region}.json").write_text(json.dumps({"mse": mse, "mae": mae}) + "\n")
    return 0


def count_table(seq_len, segments, horizon, encoders):
    rows = []
    for mode in SHARING_MODES:
        mc = ModelConfig(n_channels=1, seq_len=seq_len, n_segments=segments, horizon=horizon,
                         n_encoders=encoders, sharing=mode)
        total, parts = count_parameters(mc)
        rows.append([mode, encoders, n_distinct_blocks(mode, encoders), parts["encoder"], parts["head"], total])
    return rows


def cmd_count_params(args):
    cfg = experiment_from_args(args).resolve()
    cfg.channels = cfg.channels or 7
    mc = cfg.model_config()
    total, parts = count_parameters(mc)
    print(f"total={total} encoder={parts['encoder']} head={parts['head']} "
          f"(sharing={mc.sharing}, encoders={mc.n_encoders}, N={mc.n_segments}, L={mc.seq_len}, F={mc.horizon})")
    print("sharing,encoders,blocks,encoder_params,head_params,total")
    for row in count_table(mc.seq_len, mc.n_segments, mc.horizon, mc.n_encoders):
        print(",".join(str(v) for v in row))
    return 0


def cmd_grad_check(args):
    sharing = args.sharing or "in-encoder"
    encoders = int(args.encoders) if args.encoders not in (None, "auto") else 1
    cfg = ModelConfig(**{**TINY, "n_encoders": encoders}, sharing=sharing)
    errors, ok = check_model_gradients(cfg, seed=args.seed or 0, tol=args.tol)
    print(f"grad-check M={cfg.n_channels} L={cfg.seq_len} N={cfg.n_segments} F={cfg.horizon} "
          f"encoders={cfg.n_encoders} sharing={sharing} float64 h=1e-5 tol={args.tol:g}")
    print("group,max_rel_err,status")
    for name, err in errors.items():
        print(f"{name},{err:.3e},{'ok' if err < args.tol else 'FAIL'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_export_attention(args):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = experiment_from_args(args)
    _require_dataset(cfg)
    params, mc, _ = load_checkpoint(args.checkpoint)
    _, ds = _load_windows(cfg, mc.seq_len, mc.horizon)
    n = ds.n_windows(args.region)
    if not 0 <= args.sample_index < n:
        raise UsageError(f"sample index {args.sample_index} out of range [0, {n}) for region {args.region}")
    for m in args.channel:
        if not 0 <= m < mc.n_channels:
            raise UsageError(f"channel {m} out of range [0, {mc.n_channels})")
    pairs = []
    for spec in args.channel_pair:
        try:
            a, b = (int(v) for v in spec.split(","))
        except ValueError:
            raise UsageError(f"--channel-pair expects a,b; got {spec!r}") from None
        if not (0 <= a < mc.n_channels and 0 <= b < mc.n_channels):
            raise UsageError(f"channel pair {spec} out of range")
        pairs.append((a, b))

    X, _ = ds.batch(args.region, [args.sample_index])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    P = mc.patch_len
    written = []
    for item in export_attention(X, params, mc):
        stem = f"attn_e{item['encoder']}_stage{item['stage']}"
        for kind in ("pre", "post"):
            mat = item[kind]
            path = out / f"{stem}_{kind}.csv"
            np.savetxt(path, mat, fmt="%.9g", delimiter=",")
            written.append(path)
            for m in args.channel:
                np.savetxt(out / f"{stem}_{kind}_ch{m}.csv", channel_submatrix(mat, m, P),
                           fmt="%.9g", delimiter=",")
            for a, b in pairs:
                np.savetxt(out / f"{stem}_{kind}_ch{a}-{b}.csv", cross_channel_submatrix(mat, a, b, P),
                           fmt="%.9g", delimiter=",")
        fig = plotting.plot_attention(item["post"], f"encoder {item['encoder']}, stage {item['stage']}", P)
        plotting.savefig(fig, str(out / stem))
    print(f"wrote {len(written)} matrices ({mc.seg_len}x{mc.seg_len}) to {out}")
    return 0


def _parse_values(axis, text):
    if not text:
        return ABLATION_DEFAULTS[axis]
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis in ("segments", "encoders"):
        return [int(v) for v in items]
    if axis == "rho":
        return [float(v) for v in items]
    return items


def cmd_ablate(args):
    cfg = experiment_from_args(args)
    _require_dataset(cfg)
    try:
        values = _parse_values(args.axis, args.values)
    except ValueError:
        raise UsageError(f"bad --values for axis {args.axis}: {args.values!r}") from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, done_vals, done_mse = [], [], []
    for v in values:
        key = {"segments": "segments", "encoders": "encoders", "sharing": "sharing", "rho": "rho"}[args.axis]
        if args.axis == "segments" and cfg.seq_len % int(v):
            note = f"skipped: {v} does not divide {cfg.seq_len}"
            print(f"{args.axis}={v}: {note}")
            rows.append([v, "", "", "", "", note])
            continue
        run_cfg = ExperimentConfig(**{k: getattr(cfg, k) for k in ExperimentConfig.keys()})
        run_cfg.update({key: v})
        run_dir = out / f"{args.axis}={v}"
        run_cfg.out = str(run_dir)
        report = run_training(run_cfg, run_dir)
        rows.append([v, f"{report.test_mse:.6f}", f"{report.test_mae:.6f}", report.n_params,
                     report.best_epoch, ""])
        done_vals.append(v)
        done_mse.append(report.test_mse)
        print(f"{args.axis}={v}: test mse {report.test_mse:.6f} mae {report.test_mae:.6f} "
              f"params {report.n_params}")
    table = out / f"ablate_{args.axis}.csv"
    _write_rows(table, [args.axis, "test_mse", "test_mae", "n_params", "best_epoch", "note"], rows)
    if done_vals:
        plotting.savefig(plotting.plot_ablation(done_vals, done_mse, args.axis), str(out / f"ablate_{args.axis}"))
    print(f"wrote {table}")
    return 0


# ---------------------------------------------------------------- parser

def _common(p, with_out=True):
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="key = value config file; flags override it")
    g.add_argument("--dataset", help="CSV file: header, timestamp column, numeric columns")
    g.add_argument("--dataset-name", dest="dataset_name", help="preset name (default: file stem)")
    g.add_argument("--split", help="auto | ett-hour | ett-minute | ratio[:a,b,c] | points:a,b,c")
    g.add_argument("--channels", type=int, help="channel count when no dataset is given")
    g.add_argument("--seq-len", dest="seq_len", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--segments", type=int)
    g.add_argument("--encoders")
    g.add_argument("--sharing", choices=SHARING_MODES)
    g.add_argument("--revin-window", dest="revin_window")
    g.add_argument("--rho")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size")
    g.add_argument("--eval-batch-size", dest="eval_batch_size", type=int)
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dtype", choices=("float32", "float64"))
    if with_out:
        g.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="psformer", description="PSformer forecasting toolkit")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write report, checkpoint and config echo")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one region")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--region", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="print trainable parameter counts")
    _common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient check on a tiny model")
    p.add_argument("--sharing", choices=SHARING_MODES)
    p.add_argument("--encoders")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-attention", help="write SegAtt score matrices as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-index", dest="sample_index", type=int, default=0)
    p.add_argument("--region", choices=("train", "val", "test"), default="test")
    p.add_argument("--channel", type=int, action="append", default=[],
                   help="also write the P x P submatrix of this channel (repeatable)")
    p.add_argument("--channel-pair", dest="channel_pair", action="append", default=[],
                   help="a,b: also write the rows-of-a, columns-of-b submatrix (repeatable)")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("ablate", help="sweep one hyperparameter and tabulate test metrics")
    _common(p)
    p.add_argument("--axis", choices=tuple(ABLATION_DEFAULTS), required=True)
    p.add_argument("--values", help="comma-separated values (default: the standard grid)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"psformer: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, TrainingError, ValueError, OSError, FloatingPointError) as exc:
        print(f"psformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
