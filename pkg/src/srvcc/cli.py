"""``srvcc`` command line: fit, synth, eval, export.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt
from .data import (FORMATS, PREPROCESS, DataMatrix, SyntheticSpec, atomic_write, load_matrix,
                   preprocess, save_matrix, synth_checkerboard)
from .errors import ConfigError, DataError, NumericalError, SrvccError
from .export import (Embedding, export_cocluster, export_embeddings,
                     feature_only_row_embedding, side_embedding)
from .metrics import accuracy_hungarian, nmi
from .trainer import TrainConfig, fit, network_inputs

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("srvcc")


class UsageError(SrvccError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None


def _coerce(name: str, text: str):
    """Parse a ``--set`` value using the type of the TrainConfig default."""
    default = {f.name: f.default for f in fields(TrainConfig)}[name]
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return text.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v)
        if isinstance(default, int) or name == "M":
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {name}") from None
    return text


def build_config(args) -> TrainConfig:
    values = {}
    if args.config:
        doc = read_toml(args.config)
        values.update(doc.get("train", {k: v for k, v in doc.items() if not isinstance(v, dict)}))
    known = {f.name for f in fields(TrainConfig)}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise ConfigError(f"--set expects key=value with a known key, got {item!r}")
        values[key] = _coerce(key, val.strip())
    for name in ("g", "m", "seed", "max_epochs", "mode", "holdout"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.no_dreg:
        values["dreg"] = False
    try:
        return TrainConfig.from_dict(values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def write_report(path_stem: str, metrics: dict) -> None:
    lines = "".join(f"{k}={v}\n" for k, v in metrics.items())
    atomic_write(path_stem + ".txt", lines)
    atomic_write(path_stem + ".json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def read_labels(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        items = [line.strip() for line in fh if line.strip()]
    if not items:
        raise DataError(f"{path} holds no labels")
    return np.array(items)


def write_labels(path, labels) -> None:
    atomic_write(path, "".join(f"{int(v)}\n" for v in labels))


def _limit_threads(n: Optional[int]):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n) if n else threadpool_limits(limits=None)


def cmd_fit(args) -> int:
    config = build_config(args)
    matrix = preprocess(load_matrix(args.input, args.format), args.preprocess)
    os.makedirs(args.out, exist_ok=True)
    history_lines = ["epoch,J_total,J_row,J_col,J_joint,J_MI,holdout_rmse"]

    def on_epoch(epoch, agg, _models):
        log.info("epoch %d J_total=%.6g", epoch, agg.J_total)

    with _limit_threads(args.threads):
        try:
            result = fit(matrix.masked_values(), matrix.mask, config, on_epoch=on_epoch)
        except NumericalError as err:
            last = getattr(err, "last_good", None)
            if last is not None:
                path = os.path.join(args.out, "last_good.npz")
                ckpt.save_checkpoint(path, ckpt.Checkpoint(last, config, None, matrix.n,
                                                           matrix.d))
                print(f"last_good_checkpoint={path}", file=sys.stderr)
            raise
    for e, h in enumerate(result.history, 1):
        rmse = result.holdout_rmse[e - 1] if result.holdout_rmse else ""
        history_lines.append(f"{e},{h.J_total!r},{h.J_row!r},{h.J_col!r},{h.J_joint!r},"
                             f"{h.J_MI!r},{rmse}")
    atomic_write(os.path.join(args.out, "history.csv"), "\n".join(history_lines) + "\n")
    ckpt.save_checkpoint(os.path.join(args.out, "checkpoint.npz"),
                         ckpt.from_result(result, preprocess=args.preprocess, format=args.format))
    write_labels(os.path.join(args.out, "row_labels.txt"), result.row_labels)
    write_labels(os.path.join(args.out, "col_labels.txt"), result.col_labels)
    metrics = {"n": matrix.n, "d": matrix.d, "epochs": result.epochs_run,
               "J_total": result.history[-1].J_total if result.history else 0.0}
    if result.holdout_rmse:
        metrics["holdout_rmse"] = result.holdout_rmse[-1]
    for name, path, pred in (("row", args.true_rows, result.row_labels),
                             ("col", args.true_cols, result.col_labels)):
        if path:
            truth = read_labels(path)
            metrics[f"{name}_acc"] = accuracy_hungarian(pred, truth)
            metrics[f"{name}_nmi"] = nmi(pred, truth)
    write_report(os.path.join(args.out, "metrics"), metrics)
    for k, v in metrics.items():
        print(f"{k}={v}")
    return 0


def cmd_synth(args) -> int:
    values = {}
    if args.spec:
        doc = read_toml(args.spec)
        values.update(doc.get("synth", doc))
    for name in ("n", "d", "g", "m", "separation", "noise_level", "missing_fraction", "seed"):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    try:
        spec = SyntheticSpec(**values)
    except TypeError as err:
        raise ConfigError(f"incomplete or unknown synthetic spec: {err}") from None
    except ValueError as err:
        raise ConfigError(str(err)) from None
    matrix, rl, cl = synth_checkerboard(spec)
    os.makedirs(args.out, exist_ok=True)
    save_matrix(os.path.join(args.out, "matrix.csv"), matrix)
    write_labels(os.path.join(args.out, "row_labels.txt"), rl)
    write_labels(os.path.join(args.out, "col_labels.txt"), cl)
    print(f"n={spec.n}\nd={spec.d}\nobserved={int(matrix.mask.sum())}")
    return 0


def cmd_eval(args) -> int:
    pred, truth = read_labels(args.pred), read_labels(args.true)
    if pred.size != truth.size:
        raise DataError(f"{pred.size} predicted labels but {truth.size} true labels")
    metrics = {"acc": accuracy_hungarian(pred, truth), "nmi": nmi(pred, truth), "size": pred.size}
    for k, v in metrics.items():
        print(f"{k}={v}")
    if args.json:
        atomic_write(args.json, json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_export(args) -> int:
    ck = ckpt.load_checkpoint(args.checkpoint)
    mode = ck.extra.get("preprocess", "none") if args.preprocess is None else args.preprocess
    fmt = ck.extra.get("format", "csv_dense") if args.format is None else args.format
    matrix = preprocess(load_matrix(args.input, fmt), mode)
    if (matrix.n, matrix.d) != (ck.n, ck.d):
        raise DataError(f"checkpoint was trained on {ck.n} x {ck.d}, input is "
                        f"{matrix.n} x {matrix.d}")
    if args.mode == "cocluster":
        if ck.row_labels is None or ck.col_labels is None:
            raise DataError("checkpoint holds no cluster labels")
        out = export_cocluster(matrix, ck.row_labels, ck.col_labels, args.out)
        print(f"matrix={out.matrix_path}\nboundaries={out.boundaries_path}\n"
              f"permutation={out.permutation_path}")
        return 0
    x = network_inputs(matrix.values, matrix.mask, ck.offset, ck.scale)
    col = side_embedding(ck.models.col, x.T)
    if ck.models.row is not None:
        row = side_embedding(ck.models.row, x)
    else:
        row = feature_only_row_embedding(ck.models.col, x, matrix.mask, ck.row_mixture)
    paths = export_embeddings(row, col, args.out)
    print(f"rows={paths[0]}\ncolumns={paths[1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srvcc", description="Variational co-clustering of data matrices.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    f = sub.add_parser("fit", help="train on a matrix and write labels, checkpoint, metrics")
    f.add_argument("--input", required=True)
    f.add_argument("--format", choices=FORMATS, default="csv_dense")
    f.add_argument("--preprocess", choices=PREPROCESS, default="none")
    f.add_argument("--config", help="TOML file of training settings")
    f.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any training setting (repeatable)")
    f.add_argument("--g", type=int)
    f.add_argument("--m", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--max-epochs", dest="max_epochs", type=int)
    f.add_argument("--mode", choices=("two_stage", "simple_cascade", "feature_only"))
    f.add_argument("--no-dreg", action="store_true")
    f.add_argument("--holdout", type=float)
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("--true-rows")
    f.add_argument("--true-cols")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("synth", help="generate a noisy checkerboard matrix")
    s.add_argument("--spec", help="TOML file with the generator settings")
    for name, typ in (("n", int), ("d", int), ("g", int), ("m", int), ("separation", float),
                      ("noise_level", float), ("missing_fraction", float), ("seed", int)):
        s.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="ACC and NMI of predicted against true labels")
    e.add_argument("--pred", required=True)
    e.add_argument("--true", required=True)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="reordered matrix or latent coordinates from a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--input", required=True)
    x.add_argument("--format", choices=FORMATS)
    x.add_argument("--preprocess", choices=PREPROCESS)
    x.add_argument("--mode", choices=("cocluster", "embeddings"), required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except SrvccError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return DataError.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
