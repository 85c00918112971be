"""Cyclic-consistency filters for correspondence sets.

A forward match src -> tgt survives when matching back tgt -> src lands on
(exact) or near (relaxed) the original source point. The relaxed radius is in
grid cells and the comparison is strict (<), so the default ``r_max = 1.5``
admits the eight neighbors of the source cell, diagonals included, and nothing
further. The axis-aligned-only reading is ``r_max`` slightly above 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import FeatureMap, Mask
from .matching import MatchSet, nn_match_all


@dataclass
class FilterReport:
    """Bookkeeping for one filter application."""

    input_count: int
    kept_count: int
    rejected_count: int
    rejection_reasons: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kept_count + self.rejected_count != self.input_count:
            raise ValueError("kept + rejected must equal input")


def back_match_distances(ms: MatchSet, src: FeatureMap, tgt: FeatureMap,
                         src_mask: Mask | None = None) -> np.ndarray:
    """Euclidean distance from each source point to its back-match.

    For each match ``(p, q)`` the target point ``q`` is NN-matched back into
    the source grid (restricted by ``src_mask`` when given) and the distance
    ``|back(q) - p|`` in cell units is returned, shape ``(N,)``.
    """
    if len(ms) == 0:
        return np.empty((0,))
    # Forward matching is many-to-one, so the same target cell may appear
    # several times; back-match each distinct cell once.
    cells = ms.tgt.astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    back = nn_match_all(uniq, tgt, src, src_mask)
    d = back.tgt[inverse] - ms.src
    return np.sqrt(np.sum(d * d, axis=1))


def cyclic_filter(ms: MatchSet, src: FeatureMap, tgt: FeatureMap,
                  src_mask: Mask | None = None,
                  tgt_mask: Mask | None = None) -> tuple[MatchSet, FilterReport]:
    """Keep matches that are exactly cycle consistent.

    A match ``(p, q)`` survives iff the forward NN match of ``p`` is exactly
    ``q`` and the backward NN match of ``q`` is exactly ``p``. On sets that
    were produced by NN matching the forward condition is automatic; it
    matters for externally supplied sets.
    """
    if len(ms) == 0:
        return ms, FilterReport(0, 0, 0)
    fwd = nn_match_all(ms.src.astype(np.int64), src, tgt, tgt_mask)
    fwd_ok = np.all(fwd.tgt == ms.tgt, axis=1)
    dist = back_match_distances(ms, src, tgt, src_mask)
    back_ok = dist == 0.0
    keep = fwd_ok & back_ok
    reasons = {
        "forward_mismatch": int(np.sum(~fwd_ok)),
        "cycle_distance": int(np.sum(fwd_ok & ~back_ok)),
    }
    kept = ms.take(np.flatnonzero(keep))
    return kept, FilterReport(len(ms), len(kept), int(np.sum(~keep)), reasons)


def relaxed_cyclic_filter(ms: MatchSet, src: FeatureMap, tgt: FeatureMap,
                          r_max: float = 1.5,
                          src_mask: Mask | None = None) -> tuple[MatchSet, FilterReport]:
    """Keep matches whose back-match lands strictly within ``r_max`` cells.

    ``r_max`` is in grid-cell units and must be nonnegative; ``r_max = 0``
    keeps nothing (strict bound) and ``r_max = inf`` keeps everything. With
    ``r_max = 0.5`` this reduces to the exact back-match condition on
    integral grids, where nonzero distances are at least 1.
    """
    if r_max < 0:
        raise ValueError("r_max must be nonnegative")
    if len(ms) == 0:
        return ms, FilterReport(0, 0, 0)
    dist = back_match_distances(ms, src, tgt, src_mask)
    keep = dist < r_max
    kept = ms.take(np.flatnonzero(keep))
    report = FilterReport(len(ms), len(kept), int(np.sum(~keep)),
                          {"cycle_distance": int(np.sum(~keep))})
    return kept, report
