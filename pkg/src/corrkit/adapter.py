"""Bottleneck residual adapter, its training losses, and the optimizer.

The adapter refines feature vectors cell by cell: a stack of residual
bottleneck blocks ``y = x + W_up tanh(W_down x + b_down) + b_up`` followed by
an optional linear head that reduces the channel count. Up-projections start
at zero, so a fresh adapter without a head is exactly the identity.

Everything differentiable here is differentiated by hand. There is no
autodiff; the fixed architecture makes the chain rule short, and a
finite-difference oracle in the tests checks every loss end to end. Two
numeric paths exist: float64 is the reference used by gradient and
determinism tests, float32 is the production path; both run the same code.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureMap
from .matching import MatchSet

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class AdapterConfig:
    """Shape of the adapter stack.

    ``head_channels`` of None means no projection head; the output keeps the
    input channel count and a zero-initialized stack is the identity map.
    """

    channels: int
    hidden: int = 16
    n_blocks: int = 4
    head_channels: int | None = None

    def __post_init__(self) -> None:
        if self.channels <= 0 or self.hidden <= 0 or self.n_blocks <= 0:
            raise ValueError("channels, hidden, n_blocks must be positive")
        if self.head_channels is not None and self.head_channels <= 0:
            raise ValueError("head_channels must be positive when given")


# Paper-scale preset: 4 blocks on 1536 channels, ~5M parameters. Representable,
# never exercised by tests (desk configs stay under 200k parameters).
PAPER_SCALE = AdapterConfig(channels=1536, hidden=406, n_blocks=4)


class Adapter:
    """Residual bottleneck stack over per-cell feature vectors."""

    def __init__(self, config: AdapterConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, h = config.channels, config.hidden
        self.blocks = []
        for _ in range(config.n_blocks):
            self.blocks.append({
                "wd": rng.normal(0.0, 1.0 / math.sqrt(c), (h, c)),
                "bd": np.zeros(h),
                "wu": np.zeros((c, h)),
                "bu": np.zeros(c),
            })
        if config.head_channels is not None:
            self.head = {
                "wh": rng.normal(0.0, 1.0 / math.sqrt(c),
                                 (config.head_channels, c)),
                "bh": np.zeros(config.head_channels),
            }
        else:
            self.head = None

    @property
    def out_channels(self) -> int:
        if self.head is not None:
            return self.config.head_channels
        return self.config.channels

    def param_items(self) -> list:
        """(name, array) pairs in a fixed order for packing and checkpoints."""
        items = []
        for i, blk in enumerate(self.blocks):
            for k in ("wd", "bd", "wu", "bu"):
                items.append((f"block{i}.{k}", blk[k]))
        if self.head is not None:
            items.append(("head.wh", self.head["wh"]))
            items.append(("head.bh", self.head["bh"]))
        return items

    def n_params(self) -> int:
        return sum(a.size for _, a in self.param_items())

    def params_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def set_params_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for name, arr in self.param_items():
            self._set_named(name, vec[off:off + arr.size].reshape(arr.shape).copy())
            off += arr.size
        if off != vec.size:
            raise ValueError("parameter vector length mismatch")

    def _set_named(self, name: str, value: np.ndarray) -> None:
        scope, key = name.split(".")
        if scope == "head":
            self.head[key] = value
        else:
            self.blocks[int(scope[5:])][key] = value

    def state_arrays(self) -> dict:
        return dict(self.param_items())

    def load_state_arrays(self, arrays: dict) -> None:
        for name, arr in self.param_items():
            if name not in arrays:
                raise ValueError(f"missing parameter {name}")
            if arrays[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            self._set_named(name, np.asarray(arrays[name], dtype=np.float64).copy())

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.param_items()}

    def forward_rows(self, rows: np.ndarray, dtype=np.float64):
        """Refine a (N, C) row matrix; returns (output, cache) in ``dtype``."""
        x = np.asarray(rows, dtype=dtype)
        if x.ndim != 2 or x.shape[1] != self.config.channels:
            raise ValueError(
                f"expected (N, {self.config.channels}) rows, got {x.shape}")
        cache = {"dtype": dtype, "inputs": [], "acts": []}
        for blk in self.blocks:
            wd, bd = blk["wd"].astype(dtype), blk["bd"].astype(dtype)
            wu, bu = blk["wu"].astype(dtype), blk["bu"].astype(dtype)
            cache["inputs"].append(x)
            a = np.tanh(x @ wd.T + bd)
            cache["acts"].append(a)
            x = x + a @ wu.T + bu
        cache["pre_head"] = x
        if self.head is not None:
            wh = self.head["wh"].astype(dtype)
            bh = self.head["bh"].astype(dtype)
            x = x @ wh.T + bh
        return x, cache

    def backward_rows(self, cache: dict, d_out: np.ndarray, grads: dict) -> None:
        """Accumulate parameter grads given dLoss/d(output rows)."""
        dtype = cache["dtype"]
        dx = np.asarray(d_out, dtype=dtype)
        if self.head is not None:
            grads["head.wh"] += dx.T @ cache["pre_head"]
            grads["head.bh"] += dx.sum(axis=0)
            dx = dx @ self.head["wh"].astype(dtype)
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            a, x_in = cache["acts"][i], cache["inputs"][i]
            grads[f"block{i}.wu"] += dx.T @ a
            grads[f"block{i}.bu"] += dx.sum(axis=0)
            da = dx @ blk["wu"].astype(dtype)
            dp = da * (1.0 - a * a)
            grads[f"block{i}.wd"] += dp.T @ x_in
            grads[f"block{i}.bd"] += dp.sum(axis=0)
            dx = dx + dp @ blk["wd"].astype(dtype)

    def forward_map(self, fmap: FeatureMap, dtype=np.float32) -> FeatureMap:
        """Refine a whole feature grid, preserving its spatial shape."""
        rows = fmap.data.reshape(-1, fmap.channels)
        out, _ = self.forward_rows(rows, dtype=dtype)
        grid = out.reshape(fmap.height, fmap.width, self.out_channels)
        return FeatureMap(grid.astype(np.float32), image_id=fmap.image_id)


def _unit_rows_with_norms(rows: np.ndarray):
    norms = np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
    return rows / norms, norms


def sparse_contrastive_loss(src_feats: np.ndarray, tgt_feats: np.ndarray,
                            temperature: float = DEFAULT_TEMPERATURE):
    """Symmetric InfoNCE over matched feature vectors.

    Builds the n x n cosine-similarity matrix of the two aligned vector
    lists, divides by ``temperature``, and averages the cross-entropy of
    row-wise and column-wise softmax against the diagonal. Returns
    ``(loss, d_src, d_tgt)`` with gradients in the dtype of the inputs.
    n = 1 is degenerate (a positive with no negatives): loss 0, logged.
    """
    s = np.atleast_2d(np.asarray(src_feats))
    t = np.atleast_2d(np.asarray(tgt_feats))
    if len(s) == 0 or len(t) == 0:
        raise ValueError("empty feature lists")
    if s.shape != t.shape:
        raise ValueError("src and tgt features must align")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = len(s)
    if n == 1:
        logger.info("sparse loss with a single match: 0 by convention")
        return 0.0, np.zeros_like(s), np.zeros_like(t)
    s_hat, s_norm = _unit_rows_with_norms(s)
    t_hat, t_norm = _unit_rows_with_norms(t)
    m = (s_hat @ t_hat.T) / temperature
    # Stable log-softmax both ways.
    row_max = m.max(axis=1, keepdims=True)
    p = np.exp(m - row_max)
    p /= p.sum(axis=1, keepdims=True)
    col_max = m.max(axis=0, keepdims=True)
    q = np.exp(m - col_max)
    q /= q.sum(axis=0, keepdims=True)
    diag = np.arange(n)
    loss_rows = -np.mean(np.log(np.maximum(p[diag, diag], 1e-300)))
    loss_cols = -np.mean(np.log(np.maximum(q[diag, diag], 1e-300)))
    loss = 0.5 * (loss_rows + loss_cols)
    dm = (p - np.eye(n, dtype=m.dtype)) + (q - np.eye(n, dtype=m.dtype))
    dm *= 0.5 / n
    ds_hat = (dm @ t_hat) / temperature
    dt_hat = (dm.T @ s_hat) / temperature
    d_src = (ds_hat - np.sum(ds_hat * s_hat, axis=1, keepdims=True) * s_hat) / s_norm
    d_tgt = (dt_hat - np.sum(dt_hat * t_hat, axis=1, keepdims=True) * t_hat) / t_norm
    return float(loss), d_src, d_tgt


def _soft_argmax_rows(sim: np.ndarray, h: int, w: int,
                      window: int, temperature: float):
    """Window soft-argmax over a flat similarity field.

    Returns (point, window cell flat indices, softmax weights, coords).
    The window is placed at the hard argmax and clipped at the borders; its
    placement is treated as locally constant for differentiation.
    """
    best = int(np.argmax(sim))
    br, bc = best // w, best % w
    half = window // 2
    r0, r1 = max(0, br - half), min(h, br + half + 1)
    c0, c1 = max(0, bc - half), min(w, bc + half + 1)
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    flat = (rr * w + cc).ravel()
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(sim.dtype)
    sw = sim[flat]
    e = np.exp((sw - sw.max()) / temperature)
    wts = e / e.sum()
    point = wts @ coords
    return point, flat, wts, coords


def dense_point_terms(src_rows: np.ndarray, tgt_rows: np.ndarray,
                      h: int, w: int, src_flat_idx: np.ndarray,
                      targets: np.ndarray, window: int, temperature: float):
    """Distance loss of soft-argmax predictions against target points.

    ``src_rows``/``tgt_rows`` are refined (N, C) row matrices of the two
    grids; ``src_flat_idx`` selects the query rows; ``targets`` is (M, 2) in
    (row, col) grid coordinates (real-valued, typically noise-perturbed).
    Returns ``(loss, d_src_rows, d_tgt_rows, predictions)``; the loss is the
    sum over matches of the Euclidean prediction error.
    """
    dtype = src_rows.dtype
    t_hat, t_norm = _unit_rows_with_norms(tgt_rows)
    d_src = np.zeros_like(src_rows)
    d_tgt = np.zeros_like(tgt_rows)
    total = 0.0
    preds = np.zeros((len(src_flat_idx), 2), dtype=dtype)
    for i, (qi, tgt_pt) in enumerate(zip(src_flat_idx, targets)):
        sv = src_rows[qi]
        s_norm = max(float(np.linalg.norm(sv)), 1e-12)
        s_hat = sv / s_norm
        sim = t_hat @ s_hat
        point, flat, wts, coords = _soft_argmax_rows(sim, h, w, window,
                                                     temperature)
        preds[i] = point
        diff = point - np.asarray(tgt_pt, dtype=dtype)
        dist = float(np.linalg.norm(diff))
        total += dist
        if dist < 1e-12:
            continue
        dpoint = diff / dist
        # Softmax Jacobian through the weighted coordinate mean.
        dsim_w = (wts * ((coords - point) @ dpoint)) / temperature
        ds_hat = t_hat[flat].T @ dsim_w
        d_src[qi] += (ds_hat - float(ds_hat @ s_hat) * s_hat) / s_norm
        dt_hat_w = np.outer(dsim_w, s_hat)
        proj = dt_hat_w - np.sum(dt_hat_w * t_hat[flat], axis=1,
                                 keepdims=True) * t_hat[flat]
        d_tgt[flat] += proj / t_norm[flat]
    return float(total), d_src, d_tgt, preds


@dataclass
class TrainBatch:
    """One training pair: two feature grids and sampled matches between them."""

    src_fmap: FeatureMap
    tgt_fmap: FeatureMap
    matches: MatchSet
    noise_seed: int
    pair_id: str = ""

    def __post_init__(self) -> None:
        ms = self.matches
        sf, tf = self.src_fmap, self.tgt_fmap
        if len(ms):
            if (ms.src[:, 0].max() >= sf.height or ms.src[:, 1].max() >= sf.width
                    or ms.src.min() < 0):
                raise ValueError("source match points outside source grid")
            if (ms.tgt[:, 0].max() >= tf.height or ms.tgt[:, 1].max() >= tf.width
                    or ms.tgt.min() < 0):
                raise ValueError("target match points outside target grid")


def sample_noise(noise_seed: int, count: int, noise_sigma: float) -> np.ndarray:
    """The (count, 2) Gaussian target jitter for one batch, seed-determined."""
    rng = np.random.default_rng(noise_seed)
    return rng.normal(0.0, noise_sigma, (count, 2))


def dense_loss(adapter: Adapter, batch: TrainBatch, window: int = 5,
               temperature: float = 0.01, noise_sigma: float = 0.5,
               dtype=np.float64):
    """Localization loss of one batch through the adapter, with param grads.

    Refines both grids, soft-argmaxes each match's query against the refined
    target grid, and sums Euclidean distances to the noise-jittered target
    points. Returns ``(loss, grads)`` where ``grads`` maps parameter names to
    arrays. Standalone counterpart of the fused path in the trainer.
    """
    sf, tf = batch.src_fmap, batch.tgt_fmap
    ms = batch.matches
    if len(ms) == 0:
        return 0.0, adapter.zero_grads()
    src_out, src_cache = adapter.forward_rows(
        sf.data.reshape(-1, sf.channels), dtype=dtype)
    tgt_out, tgt_cache = adapter.forward_rows(
        tf.data.reshape(-1, tf.channels), dtype=dtype)
    src_idx = (ms.src[:, 0] * sf.width + ms.src[:, 1]).astype(np.int64)
    noise = sample_noise(batch.noise_seed, len(ms), noise_sigma)
    targets = ms.tgt + noise
    loss, d_src, d_tgt, _ = dense_point_terms(
        src_out, tgt_out, tf.height, tf.width, src_idx,
        targets.astype(dtype), window, temperature)
    grads = adapter.zero_grads()
    adapter.backward_rows(src_cache, d_src, grads)
    adapter.backward_rows(tgt_cache, d_tgt, grads)
    return loss, grads


def lr_schedule(step: int, total_steps: int, peak_lr: float,
                warmup_frac: float = 0.3) -> float:
    """One-cycle learning rate: linear warmup, cosine decay.

    Starts at ``peak_lr / 25``, reaches ``peak_lr`` after
    ``warmup_frac * total_steps`` steps, then cosine-decays to
    ``peak_lr / 1e4`` at ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError("step out of range")
    if total_steps <= 0 or peak_lr < 0 or not 0 <= warmup_frac < 1:
        raise ValueError("bad schedule parameters")
    warm_end = warmup_frac * total_steps
    start = peak_lr / 25.0
    end = peak_lr / 1e4
    if step < warm_end:
        return start + (peak_lr - start) * (step / warm_end)
    if total_steps == warm_end:
        return peak_lr
    t = (step - warm_end) / (total_steps - warm_end)
    return end + (peak_lr - end) * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    The decay multiplies each weight by ``(1 - lr * wd)`` independently of
    the gradient term, so a zero-gradient step is exactly that multiply.
    """

    def __init__(self, param_shapes: dict, weight_decay: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros(s) for k, s in param_shapes.items()}
        self.v = {k: np.zeros(s) for k, s in param_shapes.items()}
        self.step_count = 0
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` in place from ``grads`` at learning rate ``lr``."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p *= 1.0 - lr * self.weight_decay
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(arrays[f"v.{k}"], dtype=np.float64).copy()
        self.step_count = step_count
