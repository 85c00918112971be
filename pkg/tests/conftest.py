"""Shared fixtures and independent reference implementations.

The reference implementations here deliberately avoid the package's own
helpers: they recompute similarities, distances, and aggregates from scratch
so that agreement tests compare two genuinely different code paths.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from corrkit.grids import FeatureMap, Mask


def random_fmap(rng, h, w, c, image_id="img"):
    data = rng.normal(size=(h, w, c)).astype(np.float32)
    return FeatureMap(data, image_id=image_id)


def random_mask(rng, h, w, p=0.6, nonempty=True):
    bits = rng.random((h, w)) < p
    if nonempty and not bits.any():
        bits[rng.integers(h), rng.integers(w)] = True
    return Mask(bits)


# ----------------------------------------------------------------------
# independent nearest-neighbor scan

def scan_cosine(a, b) -> float:
    """Reference cosine: float64 dot over product of norms, clipped."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def scan_nn(point, src: FeatureMap, tgt: FeatureMap, tgt_mask=None):
    """Pure-loop exhaustive scan; row-major first-max tie break."""
    q = src.data[int(point[0]), int(point[1])]
    best, best_cell = -np.inf, None
    for r in range(tgt.height):
        for c in range(tgt.width):
            if tgt_mask is not None and not tgt_mask.bits[r, c]:
                continue
            s = scan_cosine(q, tgt.data[r, c])
            if s > best:
                best, best_cell = s, (r, c)
    return best_cell, best


def scan_nn_grid(points, src: FeatureMap, tgt: FeatureMap, tgt_mask=None):
    """Vectorized independent scan: normalizes by the norm product instead of
    pre-normalizing rows, then takes the first grid-wide maximum."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    tdata = np.asarray(tgt.data, dtype=np.float64).reshape(-1, tgt.channels)
    tnorm = np.linalg.norm(tdata, axis=1)
    cells, scores = [], []
    for r, c in pts:
        q = np.asarray(src.data[r, c], dtype=np.float64)
        qn = np.linalg.norm(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = tdata @ q / (tnorm * qn)
        sims[~np.isfinite(sims)] = 0.0
        np.clip(sims, -1.0, 1.0, out=sims)
        if tgt_mask is not None:
            sims[~tgt_mask.bits.reshape(-1)] = -np.inf
        flat = int(np.argmax(sims))
        cells.append((flat // tgt.width, flat % tgt.width))
        scores.append(scan_cosine(q, tdata[flat]))
    return cells, scores


# ----------------------------------------------------------------------
# independent PCK

def reference_pck(predictions, pairs, alpha, mode):
    """From-scratch PCK: hypot distances, explicit accumulators."""
    total = correct = 0
    rates = []
    for pred, pair in zip(predictions, pairs):
        bbox = pair.tgt_record.bbox
        radius = alpha * (bbox[2] if bbox[2] >= bbox[3] else bbox[3])
        n = len(pair.gt_tgt)
        if n == 0:
            continue
        good = 0
        for i in range(n):
            dist = math.hypot(pred[i][0] - pair.gt_tgt[i][0],
                              pred[i][1] - pair.gt_tgt[i][1])
            if dist <= radius:
                good += 1
        total += n
        correct += good
        rates.append(100.0 * good / n)
    if mode == "per_kpt":
        return 100.0 * correct / total
    acc = 0.0
    for r in rates:
        acc += r
    return acc / len(rates)


# ----------------------------------------------------------------------
# finite differences

def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at 1-D float64 x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
