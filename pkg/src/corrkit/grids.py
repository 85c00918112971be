"""Dense feature grids, masks, and the similarity primitives everything else builds on.

A feature map is an ``(H, W, C)`` grid of feature vectors for one image, indexed
by ``(row, col)`` in feature-patch units. Image-pixel coordinates only appear at
the evaluation boundary and are converted by a stored per-image patch size.

Features are stored as float32; similarity arithmetic upcasts to float64 so that
cosine similarity is scale-invariant to 1e-12 relative and argmax decisions are
reproducible across vectorized and scalar code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Diagnostics:
    """Process-wide counters for recoverable numeric anomalies.

    Zero-norm feature vectors yield similarity 0 instead of an error; each
    occurrence is counted here so batch jobs can report them.
    """

    def __init__(self) -> None:
        self.zero_norm_events = 0

    def note_zero_norm(self, n: int = 1) -> None:
        self.zero_norm_events += n

    def reset(self) -> int:
        """Return the current count and clear it."""
        n = self.zero_norm_events
        self.zero_norm_events = 0
        return n


diagnostics = Diagnostics()


def _as_grid(data: np.ndarray) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True, order="C")
    if arr.ndim != 3:
        raise ValueError(f"feature grid must be (H, W, C), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Immutable ``(H, W, C)`` grid of feature vectors for one image."""

    data: np.ndarray
    image_id: str = ""
    _unit_rows: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        arr = _as_grid(self.data)
        if arr.size == 0:
            raise ValueError("feature grid must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"feature grid for {self.image_id!r} contains NaN/Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def unit_rows(self) -> np.ndarray:
        """Float64 unit-normalized vectors, flattened row-major to ``(H*W, C)``.

        Zero-norm cells normalize to the zero vector (similarity 0 by
        convention). Computed once and cached; safe because the map is
        immutable.
        """
        if not self._unit_rows:
            flat = self.data.reshape(-1, self.channels).astype(np.float64)
            norms = np.linalg.norm(flat, axis=1, keepdims=True)
            zero = norms[:, 0] == 0.0
            if np.any(zero):
                diagnostics.note_zero_norm(int(zero.sum()))
                norms = np.where(norms == 0.0, 1.0, norms)
            unit = flat / norms
            unit.flags.writeable = False
            self._unit_rows.append(unit)
        return self._unit_rows[0]

    def vector_at(self, point) -> np.ndarray:
        """Feature vector at an integral grid point ``(row, col)``."""
        r, c = int(point[0]), int(point[1])
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise IndexError(f"point ({r}, {c}) outside {self.height}x{self.width} grid")
        return self.data[r, c]


@dataclass(frozen=True)
class Mask:
    """Boolean occupancy grid paired with a FeatureMap of the same extent."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.bits, dtype=bool, copy=True, order="C")
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def matches_grid(self, fmap: FeatureMap) -> bool:
        return (self.height, self.width) == (fmap.height, fmap.width)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two feature vectors, clipped to [-1, 1].

    Zero-norm inputs return 0.0 and bump the zero-norm diagnostic counter
    rather than raising; a hard failure mid-batch is worse than a flagged
    neutral score.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        diagnostics.note_zero_norm()
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sim_map(query, src: FeatureMap, tgt: FeatureMap) -> np.ndarray:
    """Cosine similarity of ``src`` at ``query`` against every cell of ``tgt``.

    Returns an ``(H, W)`` float64 grid; entry ``(r, c)`` equals
    ``cosine_sim(src.vector_at(query), tgt.data[r, c])``.
    """
    if src.channels != tgt.channels:
        raise ValueError(f"channel mismatch: src {src.channels} vs tgt {tgt.channels}")
    q = src.vector_at(query).astype(np.float64)
    nq = np.linalg.norm(q)
    if nq == 0.0:
        diagnostics.note_zero_norm()
        return np.zeros((tgt.height, tgt.width), dtype=np.float64)
    sims = tgt.unit_rows @ (q / nq)
    np.clip(sims, -1.0, 1.0, out=sims)
    return sims.reshape(tgt.height, tgt.width)


def masked_points(mask: Mask) -> np.ndarray:
    """All set-bit locations of ``mask`` as an ``(N, 2)`` int array, row-major."""
    return np.argwhere(mask.bits)


def patch_to_pixel(points_rc: np.ndarray, patch_size: float) -> np.ndarray:
    """Convert ``(row, col)`` patch coordinates to ``(x, y)`` pixel coordinates.

    A patch coordinate addresses the cell center: pixel = (coord + 0.5) * patch_size.
    """
    pts = np.atleast_2d(np.asarray(points_rc, dtype=np.float64))
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 1] + 0.5) * patch_size  # x from col
    out[:, 1] = (pts[:, 0] + 0.5) * patch_size  # y from row
    return out


def pixel_to_patch(points_xy: np.ndarray, patch_size: float) -> np.ndarray:
    """Convert ``(x, y)`` pixel coordinates to real-valued ``(row, col)`` patches."""
    pts = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 1] / patch_size - 0.5
    out[:, 1] = pts[:, 0] / patch_size - 0.5
    return out
