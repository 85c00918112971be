"""Adapter training loop: deterministic, resumable, hand-backpropagated.

Every step draws its randomness from a generator seeded with
``[seed, step]``, so the trajectory is a pure function of (config, dataset)
and resuming from a checkpoint continues bit-identically on the float64 path.
One step samples a pseudo-labeled image pair, refines both grids through the
adapter, combines the sparse contrastive loss at the matched points with the
dense localization loss, and takes one decoupled-weight-decay adaptive step
under the one-cycle schedule.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import io as kio
from .adapter import (Adapter, AdapterConfig, AdamW, dense_point_terms,
                      lr_schedule, sample_noise, sparse_contrastive_loss)
from .grids import FeatureMap
from .matching import MatchSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run. All fields are seed-stable."""

    total_steps: int = 1000
    peak_lr: float = 5e-3
    weight_decay: float = 0.001
    warmup_frac: float = 0.3
    sparse_temperature: float = 0.07
    dense_window: int = 5
    dense_temperature: float = 0.01
    noise_sigma: float = 0.5
    lambda_sparse: float = 1.0
    lambda_dense: float = 1.0
    max_matches: int = 50
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0
    adapter_hidden: int = 16
    adapter_blocks: int = 4
    head_channels: int | None = None

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.max_matches < 1:
            raise ValueError("max_matches must be positive")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class TrainPair:
    """One dataset entry: a feature-grid pair with its pseudo-labels."""

    src_fmap: FeatureMap
    tgt_fmap: FeatureMap
    matches: MatchSet
    pair_id: str = ""


def _abort(run_dir, step: int, pair_id: str, seed: int, reason: str):
    record = {"step": step, "pair_id": pair_id, "seed": seed, "reason": reason}
    if run_dir is not None:
        path = os.path.join(run_dir, "abort.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
    raise RuntimeError(f"non-finite loss at step {step} on pair {pair_id!r}")


def train_step(adapter: Adapter, opt: AdamW, config: TrainConfig,
               pairs: list, step: int) -> dict:
    """Run one training step; returns the metrics record."""
    rng = np.random.default_rng([config.seed, step])
    pair = pairs[int(rng.integers(len(pairs)))]
    ms = pair.matches
    if len(ms) > config.max_matches:
        idx = np.sort(rng.choice(len(ms), config.max_matches, replace=False))
        ms = ms.take(idx)
    noise_seed = int(rng.integers(2 ** 31))
    dtype = config.np_dtype
    sf, tf = pair.src_fmap, pair.tgt_fmap
    src_out, src_cache = adapter.forward_rows(
        sf.data.reshape(-1, sf.channels), dtype=dtype)
    tgt_out, tgt_cache = adapter.forward_rows(
        tf.data.reshape(-1, tf.channels), dtype=dtype)
    src_idx = (ms.src[:, 0] * sf.width + ms.src[:, 1]).astype(np.int64)
    tgt_idx = (ms.tgt[:, 0] * tf.width + ms.tgt[:, 1]).astype(np.int64)

    loss_sparse, d_s, d_t = sparse_contrastive_loss(
        src_out[src_idx], tgt_out[tgt_idx], config.sparse_temperature)
    noise = sample_noise(noise_seed, len(ms), config.noise_sigma)
    targets = (ms.tgt + noise).astype(dtype)
    loss_dense, dd_src, dd_tgt, _ = dense_point_terms(
        src_out, tgt_out, tf.height, tf.width, src_idx, targets,
        config.dense_window, config.dense_temperature)

    loss = config.lambda_sparse * loss_sparse + config.lambda_dense * loss_dense
    if not math.isfinite(loss):
        return {"step": step, "loss": loss, "pair_id": pair.pair_id,
                "abort": True}

    d_src_rows = config.lambda_dense * dd_src
    d_tgt_rows = config.lambda_dense * dd_tgt
    np.add.at(d_src_rows, src_idx, config.lambda_sparse * d_s)
    np.add.at(d_tgt_rows, tgt_idx, config.lambda_sparse * d_t)
    grads = adapter.zero_grads()
    adapter.backward_rows(src_cache, d_src_rows, grads)
    adapter.backward_rows(tgt_cache, d_tgt_rows, grads)
    grads64 = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}

    lr = lr_schedule(step, config.total_steps, config.peak_lr,
                     config.warmup_frac)
    opt.step(dict(adapter.param_items()), grads64, lr)
    return {"step": step, "lr": lr, "loss_sparse": float(loss_sparse),
            "loss_dense": float(loss_dense), "loss": float(loss),
            "pair_id": pair.pair_id, "abort": False}


def train(config: TrainConfig, pairs: list, run_dir: str | None = None,
          resume_from: str | None = None, adapter: Adapter | None = None):
    """Train an adapter on pseudo-labeled pairs; returns (adapter, log).

    ``pairs`` is a list of TrainPair; entries with no matches are dropped.
    With ``run_dir`` set, periodic checkpoints and a line-delimited metrics
    log are written there. ``resume_from`` restores adapter, optimizer, and
    step from a checkpoint and continues the exact same trajectory.
    """
    pairs = [p for p in pairs if len(p.matches) > 0]
    if not pairs:
        raise ValueError("no training pairs with matches")
    channels = pairs[0].src_fmap.channels
    if adapter is None:
        adapter = Adapter(AdapterConfig(channels=channels,
                                        hidden=config.adapter_hidden,
                                        n_blocks=config.adapter_blocks,
                                        head_channels=config.head_channels),
                          seed=config.seed)
    opt = AdamW({k: v.shape for k, v in adapter.param_items()},
                weight_decay=config.weight_decay)
    start_step = 0
    if resume_from is not None:
        arrays, meta = kio.read_checkpoint(resume_from)
        adapter.load_state_arrays(
            {k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
        opt.load_state_arrays(
            {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")},
            step_count=int(meta["opt_steps"]))
        start_step = int(meta["step"])
    logger.info("adapter has %d parameters", adapter.n_params())
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
    log: list = []
    for step in range(start_step, config.total_steps):
        record = train_step(adapter, opt, config, pairs, step)
        if record.get("abort"):
            _abort(run_dir, step, record["pair_id"], config.seed,
                   "non-finite loss")
        log.append(record)
        if (config.checkpoint_every > 0 and run_dir is not None
                and (step + 1) % config.checkpoint_every == 0):
            save_checkpoint(os.path.join(run_dir, f"step{step + 1:08d}.ckpt"),
                            adapter, opt, step + 1)
    if run_dir is not None:
        kio.write_metrics(os.path.join(run_dir, "metrics.log"), log)
        save_checkpoint(os.path.join(run_dir, "adapter.ckpt"), adapter, opt,
                        config.total_steps)
    return adapter, log


def save_checkpoint(path: str, adapter: Adapter, opt: AdamW,
                    step: int) -> None:
    """Persist adapter parameters, optimizer state, and the step counter."""
    arrays = {f"param.{k}": v for k, v in adapter.param_items()}
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    cfg = adapter.config
    kio.write_checkpoint(path, arrays,
                         {"step": step, "opt_steps": opt.step_count,
                          "channels": cfg.channels, "hidden": cfg.hidden,
                          "n_blocks": cfg.n_blocks,
                          "head_channels": cfg.head_channels})


def load_adapter(path: str) -> tuple:
    """Rebuild an adapter from a checkpoint alone; returns (adapter, meta)."""
    arrays, meta = kio.read_checkpoint(path)
    adapter = Adapter(AdapterConfig(channels=int(meta["channels"]),
                                    hidden=int(meta["hidden"]),
                                    n_blocks=int(meta["n_blocks"]),
                                    head_channels=meta.get("head_channels")))
    adapter.load_state_arrays(
        {k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
    return adapter, meta
