"""Nearest-neighbor matching and soft localization on feature grids.

Hard nearest-neighbor matching is used for pseudo-label generation; the window
soft-argmax is used by the dense training loss and for evaluation-time
prediction. Grids are small (at most 60x60), so the exhaustive scan is both
the oracle and the implementation; the production path merely vectorizes it.

Tie-breaking is deterministic: at equal similarity the first cell in row-major
order wins. Output files depend on this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureMap, Mask, cosine_sim, diagnostics


@dataclass(frozen=True)
class Match:
    """One correspondence: source point, target point, similarity at the match."""

    src: tuple
    tgt: tuple
    score: float


@dataclass
class MatchSet:
    """All matches for one ordered image pair.

    ``src`` and ``tgt`` are ``(N, 2)`` float arrays of ``(row, col)`` points;
    ``scores`` is ``(N,)``. Source points must be unique within one set.
    """

    src_image: str
    tgt_image: str
    src: np.ndarray
    tgt: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.tgt = np.asarray(self.tgt, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.tgt) == len(self.scores)):
            raise ValueError("src, tgt, scores must have equal length")
        seen = {tuple(p) for p in self.src}
        if len(seen) != len(self.src):
            raise ValueError("duplicate source points in MatchSet")

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls, src_image: str = "", tgt_image: str = "") -> "MatchSet":
        return cls(src_image, tgt_image,
                   np.empty((0, 2)), np.empty((0, 2)), np.empty((0,)))

    def take(self, idx: np.ndarray) -> "MatchSet":
        """Subset by index array, preserving order."""
        return MatchSet(self.src_image, self.tgt_image,
                        self.src[idx], self.tgt[idx], self.scores[idx])


def _query_units(points: np.ndarray, src: FeatureMap) -> np.ndarray:
    """Unit-normalized float64 source vectors for integral query points."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= src.height) \
            or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= src.width):
        raise IndexError("query point outside source grid")
    flat_idx = pts[:, 0] * src.width + pts[:, 1]
    return src.unit_rows[flat_idx]


def nn_match_all(points, src: FeatureMap, tgt: FeatureMap,
                 tgt_mask: Mask | None = None) -> MatchSet:
    """Nearest-neighbor match every query point of ``src`` into ``tgt``.

    The argmax of the cosine-similarity field is taken over the full target
    grid, or over ``tgt_mask`` cells when a mask is given. Order-preserving;
    equivalent to calling :func:`nn_match` per point.
    """
    if src.channels != tgt.channels:
        raise ValueError(f"channel mismatch: src {src.channels} vs tgt {tgt.channels}")
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        return MatchSet.empty(src.image_id, tgt.image_id)
    q = _query_units(pts, src)                       # (N, C)
    sims = q @ tgt.unit_rows.T                       # (N, H*W)
    np.clip(sims, -1.0, 1.0, out=sims)
    if tgt_mask is not None:
        if not tgt_mask.matches_grid(tgt):
            raise ValueError("mask dimensions do not match target grid")
        flat = tgt_mask.bits.reshape(-1)
        if not flat.any():
            raise ValueError("no candidate targets: mask is empty")
        sims = np.where(flat[None, :], sims, -np.inf)
    best = np.argmax(sims, axis=1)                   # first max wins: row-major
    tgt_pts = np.stack([best // tgt.width, best % tgt.width], axis=1)
    # Canonical scores via the scalar primitive: bit-identical to a per-cell scan.
    scores = np.array([cosine_sim(src.data[r, c], tgt.data[tr, tc])
                       for (r, c), (tr, tc) in zip(pts, tgt_pts)])
    return MatchSet(src.image_id, tgt.image_id,
                    pts.astype(np.float64), tgt_pts.astype(np.float64), scores)


def nn_match(p, src: FeatureMap, tgt: FeatureMap,
             tgt_mask: Mask | None = None) -> Match:
    """Nearest neighbor of one source point in the target grid."""
    ms = nn_match_all(np.asarray(p).reshape(1, 2), src, tgt, tgt_mask)
    return Match(tuple(ms.src[0]), tuple(ms.tgt[0]), float(ms.scores[0]))


def _window_bounds(center: int, extent: int, half: int) -> tuple[int, int]:
    """Clip a window of half-width ``half`` around ``center`` to [0, extent)."""
    lo = max(0, center - half)
    hi = min(extent, center + half + 1)
    return lo, hi


def window_soft_argmax(query, src: FeatureMap, tgt: FeatureMap,
                       window: int = 15, temperature: float = 0.01) -> np.ndarray:
    """Differentiable localization of the best match as a real-valued point.

    Finds the hard argmax cell of the cosine-similarity field, restricts to a
    ``window x window`` neighborhood around it (clipped at borders, weights
    renormalized over present cells), and returns the softmax(sim/temperature)
    weighted mean ``(row, col)``.
    """
    if window <= 0 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window > min(tgt.height, tgt.width):
        raise ValueError("window larger than target grid")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = sim_map_for(query, src, tgt)
    flat_best = int(np.argmax(sims))
    br, bc = flat_best // tgt.width, flat_best % tgt.width
    half = window // 2
    r0, r1 = _window_bounds(br, tgt.height, half)
    c0, c1 = _window_bounds(bc, tgt.width, half)
    patch = sims[r0:r1, c0:c1]
    # Stable softmax.
    w = np.exp((patch - patch.max()) / temperature)
    w /= w.sum()
    rows = np.arange(r0, r1, dtype=np.float64)
    cols = np.arange(c0, c1, dtype=np.float64)
    return np.array([float(w.sum(axis=1) @ rows), float(w.sum(axis=0) @ cols)])


def sim_map_for(query, src: FeatureMap, tgt: FeatureMap) -> np.ndarray:
    """Full similarity field for one query point. Thin alias over grids.sim_map."""
    from .grids import sim_map
    return sim_map(query, src, tgt)
