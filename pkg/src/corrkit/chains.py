"""Viewpoint-aware pair and chain construction, and match propagation.

Images carry an azimuth angle. Chains are short sequences of same-category
images whose consecutive viewpoints differ a little but not a lot: successive
images must sit in different 45-degree azimuth bins while staying within 90
degrees circular distance of each other. Matches are then propagated hop by
hop along the chain, with a per-hop relaxed cyclic filter dropping points
whose back-match strays, and composed into wide-baseline correspondence sets
anchored at the first image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .filters import relaxed_cyclic_filter
from .grids import FeatureMap, Mask, masked_points
from .matching import MatchSet, nn_match_all

logger = logging.getLogger(__name__)

BIN_WIDTH_DEG = 45.0


@dataclass(frozen=True)
class ImageRecord:
    """Catalog entry for one image: identity, pose, and storage references."""

    image_id: str
    category: str
    azimuth_deg: float
    rotation: np.ndarray | None = None
    mask_ref: str = ""
    feature_ref: str = ""
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    patch_size: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if self.rotation is not None:
            r = np.asarray(self.rotation, dtype=np.float64)
            if r.shape != (3, 3):
                raise ValueError("rotation must be 3x3")
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
                raise ValueError("rotation must be orthonormal")
            if not np.isclose(np.linalg.det(r), 1.0, atol=1e-6):
                raise ValueError("rotation must have determinant +1")
            object.__setattr__(self, "rotation", r)


@dataclass(frozen=True)
class Chain:
    """An ordered tuple of image ids within one category."""

    images: tuple
    category: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if len(self.images) < 2:
            raise ValueError("a chain needs at least two images")
        if len(set(self.images)) != len(self.images):
            raise ValueError("a chain must not repeat an image")


def d_circ(a_deg: float, b_deg: float) -> float:
    """Circular distance between two angles in degrees, in [0, 180]."""
    d = abs(float(a_deg) - float(b_deg)) % 360.0
    return min(d, 360.0 - d)


def azimuth_bin(deg: float, width: float = BIN_WIDTH_DEG) -> int:
    """Index of the azimuth bin containing ``deg`` (bins are [k*w, (k+1)*w))."""
    return int((float(deg) % 360.0) // width)


def chain_is_valid(chain: Chain, by_id: dict) -> bool:
    """Post-hoc check of the chain construction rules.

    ``by_id`` maps image_id to ImageRecord. Verifies shared category,
    consecutive bin difference, the circular-distance bound, and the
    no-immediate-bin-return rule.
    """
    recs = [by_id[i] for i in chain.images]
    if any(r.category != chain.category for r in recs):
        return False
    bins = [azimuth_bin(r.azimuth_deg) for r in recs]
    for k in range(len(recs) - 1):
        if bins[k + 1] == bins[k]:
            return False
        if d_circ(recs[k].azimuth_deg, recs[k + 1].azimuth_deg) >= 90.0:
            return False
        if k >= 1 and bins[k + 1] == bins[k - 1]:
            return False
    return True


def _grouped(records) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault(r.category, []).append(r)
    # Sort members for index stability regardless of input order.
    return {c: sorted(g, key=lambda r: r.image_id) for c, g in sorted(groups.items())}


def sample_chains(records, K: int = 4, count: int = 300,
                  rng_seed: int = 0) -> list:
    """Sample viewpoint-respecting chains per category, ``count`` per category.

    Chains are grown as random walks: each next image must come from a
    different azimuth bin than the current one (and not the bin just left),
    stay within 90 degrees circular distance, and not repeat an image. Walks
    that dead-end are discarded and retried. Deterministic given the seed.
    Categories with fewer than K records yield no chains and are logged.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    rng = np.random.default_rng(rng_seed)
    out = []
    for category, group in _grouped(records).items():
        if len(group) < K:
            logger.info("category %r has %d < K=%d records, no chains",
                        category, len(group), K)
            continue
        emitted = 0
        attempts = 0
        max_attempts = max(50 * count, 1000)
        while emitted < count and attempts < max_attempts:
            attempts += 1
            walk = [int(rng.integers(len(group)))]
            while len(walk) < K:
                cur = group[walk[-1]]
                cur_bin = azimuth_bin(cur.azimuth_deg)
                prev_bin = (azimuth_bin(group[walk[-2]].azimuth_deg)
                            if len(walk) >= 2 else None)
                cands = [i for i, r in enumerate(group)
                         if i not in walk
                         and azimuth_bin(r.azimuth_deg) != cur_bin
                         and azimuth_bin(r.azimuth_deg) != prev_bin
                         and d_circ(cur.azimuth_deg, r.azimuth_deg) < 90.0]
                if not cands:
                    break
                walk.append(int(cands[rng.integers(len(cands))]))
            if len(walk) == K:
                out.append(Chain(tuple(group[i].image_id for i in walk), category))
                emitted += 1
        if emitted < count:
            logger.info("category %r: emitted %d of %d requested chains",
                        category, emitted, count)
    return out


def sample_naive_pairs(records, count: int = 300, rng_seed: int = 0) -> list:
    """Uniform same-category ordered pairs with no viewpoint constraint."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for category, group in _grouped(records).items():
        if len(group) < 2:
            continue
        for _ in range(count):
            i = int(rng.integers(len(group)))
            j = int(rng.integers(len(group) - 1))
            if j >= i:
                j += 1
            out.append((group[i].image_id, group[j].image_id))
    return out


def propagate(chain: Chain, features: dict, masks: dict | None = None,
              hop_filter=None) -> list:
    """Propagate first-image points along a chain, filtering every hop.

    Starts from all mask cells of the first image, NN-matches into each next
    image in turn (restricted to that image's mask), and applies ``hop_filter``
    (default: relaxed cyclic filter at its default radius) after every hop,
    dropping points that fail. Returns the composed MatchSets
    ``(I_1 -> I_k)`` for k = 2..K; a composed match's score is the minimum
    hop similarity along its path. If some hop leaves no survivors the output
    is truncated at the last nonempty composition and a diagnostic is logged.
    """
    if hop_filter is None:
        hop_filter = relaxed_cyclic_filter
    ids = chain.images
    first = features[ids[0]]
    if masks is not None:
        start = masked_points(masks[ids[0]])
    else:
        h, w = first.height, first.width
        start = np.argwhere(np.ones((h, w), dtype=bool))
    if len(start) == 0:
        logger.warning("chain %s: first-image mask is empty", ids)
        return []
    anchor = start.astype(np.float64)
    alive = np.arange(len(start))
    current = start.astype(np.int64)
    min_scores = np.full(len(start), np.inf)
    composed = []
    for k in range(len(ids) - 1):
        src, tgt = features[ids[k]], features[ids[k + 1]]
        tgt_mask = masks[ids[k + 1]] if masks is not None else None
        src_mask = masks[ids[k]] if masks is not None else None
        # Several tracked points may sit on the same cell after a hop; match
        # each distinct cell once, then fan the result back out.
        keys = [(int(r), int(c)) for r, c in current]
        uniq = sorted(set(keys))
        hop = nn_match_all(np.array(uniq, dtype=np.int64), src, tgt, tgt_mask)
        kept, _report = hop_filter(hop, src, tgt, src_mask=src_mask)
        if len(kept) == 0:
            logger.warning("chain %s: hop %d -> %d left no survivors, truncating",
                           ids, k + 1, k + 2)
            break
        by_cell = {(int(r), int(c)): i
                   for i, (r, c) in enumerate(kept.src.astype(np.int64))}
        survive, rows = [], []
        for j, key in enumerate(keys):
            i = by_cell.get(key)
            if i is not None:
                survive.append(j)
                rows.append(i)
        alive = alive[survive]
        min_scores[alive] = np.minimum(min_scores[alive], kept.scores[rows])
        current = kept.tgt[rows].astype(np.int64)
        composed.append(MatchSet(ids[0], ids[k + 1],
                                 anchor[alive], current.astype(np.float64),
                                 min_scores[alive]))
    return composed
