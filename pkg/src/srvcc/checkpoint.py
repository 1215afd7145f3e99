"""Versioned checkpoint container: one ``.npz`` holding every array plus a
JSON metadata record."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import atomic_write
from .errors import DataError
from .gmm import GaussianMixture
from .nn import OptimizerState
from .trainer import CoClusterResult, Models, TrainConfig, build_models

VERSION = 1


@dataclass
class Checkpoint:
    models: Models
    config: TrainConfig
    optimizer: OptimizerState
    n: int
    d: int
    offset: float = 0.0
    scale: float = 1.0
    row_labels: Optional[np.ndarray] = None
    col_labels: Optional[np.ndarray] = None
    gamma_r: Optional[np.ndarray] = None
    gamma_c: Optional[np.ndarray] = None
    row_mixture: Optional[GaussianMixture] = None
    rng_state: Optional[dict] = None
    history: List[dict] = field(default_factory=list)
    extra: Dict = field(default_factory=dict)


def from_result(result: CoClusterResult, **extra) -> Checkpoint:
    return Checkpoint(result.models, result.config, result.optimizer, result.data.n,
                      result.data.d, result.data.offset, result.data.scale,
                      result.row_labels, result.col_labels, result.gamma_r, result.gamma_c,
                      result.row_mixture, result.rng_state,
                      [h.as_dict() for h in result.history], dict(extra))


def save_checkpoint(path, ck: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ck.models.parameters().items()}
    if ck.models.row is not None:
        arrays["scale/row"] = ck.models.row.scale
    arrays["scale/column"] = ck.models.col.scale
    opt = ck.optimizer or OptimizerState(ck.config.lr)
    for k in opt.m:
        arrays[f"opt_m/{k}"] = opt.m[k]
        arrays[f"opt_v/{k}"] = opt.v[k]
    for name in ("row_labels", "col_labels", "gamma_r", "gamma_c"):
        if getattr(ck, name) is not None:
            arrays[f"result/{name}"] = np.asarray(getattr(ck, name))
    if ck.row_mixture is not None:
        arrays["rowmix/weights"] = ck.row_mixture.weights
        arrays["rowmix/means"] = ck.row_mixture.means
        arrays["rowmix/stds"] = ck.row_mixture.stds
    meta = {"version": VERSION, "n": ck.n, "d": ck.d, "config": ck.config.to_dict(),
            "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                          "eps": opt.eps, "t": opt.t},
            "offset": ck.offset, "scale": ck.scale, "rng_state": ck.rng_state,
            "history": ck.history, "extra": ck.extra}
    arrays["__meta__"] = np.array(json.dumps(meta))
    atomic_write(path, lambda fh: np.savez(fh, **arrays), mode="wb")


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from None
    if "__meta__" not in arrays:
        raise DataError(f"{path} is not a checkpoint")
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    models = build_models(meta["n"], meta["d"], config, np.random.default_rng(0))
    params = models.parameters()
    for k, arr in params.items():
        key = f"param/{k}"
        if key not in arrays or arrays[key].shape != arr.shape:
            raise DataError(f"checkpoint lacks a matching array for {k}")
        arr[...] = arrays[key]
    if models.row is not None:
        models.row.scale = arrays["scale/row"].copy()
    models.col.scale = arrays["scale/column"].copy()
    o = meta["optimizer"]
    opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"],
                         {k[6:]: v for k, v in arrays.items() if k.startswith("opt_m/")},
                         {k[6:]: v for k, v in arrays.items() if k.startswith("opt_v/")},
                         {k: int(t) for k, t in o["t"].items()})
    res = {name: arrays.get(f"result/{name}") for name in
           ("row_labels", "col_labels", "gamma_r", "gamma_c")}
    row_mix = None
    if "rowmix/weights" in arrays:
        row_mix = GaussianMixture(arrays["rowmix/weights"], arrays["rowmix/means"],
                                  arrays["rowmix/stds"])
    return Checkpoint(models, config, opt, meta["n"], meta["d"], meta["offset"], meta["scale"],
                      res["row_labels"], res["col_labels"], res["gamma_r"], res["gamma_c"],
                      row_mix, meta["rng_state"], meta["history"], meta.get("extra", {}))
