"""Correspondence metrics: PCK, viewpoint-binned PCK, label quality.

PCK here is the bbox variant: a predicted target point is correct when its
pixel-space distance to the ground-truth point is at most
``alpha * max(h, w)`` of the target object's bounding box, boundary
inclusive. Aggregation is deliberately written with sequential Python-float
accumulation (no pairwise summation) so an independent reimplementation can
be required to agree exactly, not approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chains import ImageRecord, d_circ
from .grids import FeatureMap, patch_to_pixel
from .matching import window_soft_argmax

# Overlapping viewpoint-difference bins, in degrees. The first bin is closed
# at 0; a pair in several bins is counted in each of them.
TABLE_BINS = ((0.0, 45.0), (0.0, 90.0), (45.0, 135.0), (90.0, 180.0),
              (135.0, 225.0))


@dataclass(frozen=True)
class EvalPair:
    """One evaluation pair: two images and pixel-space ground-truth points."""

    src_record: ImageRecord
    tgt_record: ImageRecord
    gt_src: np.ndarray               # (N, 2) pixel (x, y)
    gt_tgt: np.ndarray               # (N, 2) pixel (x, y)

    def __post_init__(self) -> None:
        object.__setattr__(self, "gt_src",
                           np.asarray(self.gt_src, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "gt_tgt",
                           np.asarray(self.gt_tgt, dtype=np.float64).reshape(-1, 2))
        if len(self.gt_src) != len(self.gt_tgt):
            raise ValueError("gt point lists must align")

    @property
    def category(self) -> str:
        return self.src_record.category

    @property
    def delta_view(self) -> float:
        return d_circ(self.src_record.azimuth_deg, self.tgt_record.azimuth_deg)


@dataclass
class PckResult:
    """PCK aggregates at one alpha."""

    alpha: float
    mode: str
    value: float
    per_kpt: float
    per_img: float
    macro_per_kpt: float
    macro_per_img: float
    per_category: dict
    n_pairs: int
    n_keypoints: int
    n_correct: int


def _correct_flags(prediction: np.ndarray, pair: EvalPair,
                   alpha: float) -> np.ndarray:
    bbox = pair.tgt_record.bbox
    radius = alpha * max(bbox[2], bbox[3])
    pred = np.asarray(prediction, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(pair.gt_tgt):
        raise ValueError("prediction count does not match ground truth")
    flags = np.zeros(len(pred), dtype=bool)
    for i in range(len(pred)):
        dx = pred[i, 0] - pair.gt_tgt[i, 0]
        dy = pred[i, 1] - pair.gt_tgt[i, 1]
        flags[i] = math.sqrt(dx * dx + dy * dy) <= radius
    return flags


def pck(predictions, pairs, alpha: float = 0.1,
        mode: str = "per_kpt") -> PckResult:
    """PCK at ``alpha`` over aligned predictions and evaluation pairs.

    ``per_kpt`` pools all keypoints; ``per_img`` averages each pair's own
    rate first. Per-category tables carry both, and the macro values are the
    plain means of the per-category numbers; values are percentages.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mode not in ("per_kpt", "per_img"):
        raise ValueError("mode must be per_kpt or per_img")
    if len(predictions) != len(pairs):
        raise ValueError("predictions and pairs must align")
    total_kps = 0
    total_correct = 0
    img_rate_sum = 0.0
    n_scored_pairs = 0
    cats: dict = {}
    for pred, pair in zip(predictions, pairs):
        flags = _correct_flags(pred, pair, alpha)
        n, c = len(flags), int(flags.sum())
        if n == 0:
            continue
        total_kps += n
        total_correct += c
        rate = 100.0 * c / n
        img_rate_sum += rate
        n_scored_pairs += 1
        bucket = cats.setdefault(pair.category,
                                 {"kps": 0, "correct": 0, "rate_sum": 0.0,
                                  "pairs": 0})
        bucket["kps"] += n
        bucket["correct"] += c
        bucket["rate_sum"] += rate
        bucket["pairs"] += 1
    if total_kps == 0:
        raise ValueError("no keypoints to score")
    per_kpt = 100.0 * total_correct / total_kps
    per_img = img_rate_sum / n_scored_pairs
    per_category = {}
    macro_kpt_sum = 0.0
    macro_img_sum = 0.0
    for cat in sorted(cats):
        b = cats[cat]
        cat_kpt = 100.0 * b["correct"] / b["kps"]
        cat_img = b["rate_sum"] / b["pairs"]
        per_category[cat] = {"per_kpt": cat_kpt, "per_img": cat_img,
                             "pairs": b["pairs"], "keypoints": b["kps"]}
        macro_kpt_sum += cat_kpt
        macro_img_sum += cat_img
    macro_per_kpt = macro_kpt_sum / len(cats)
    macro_per_img = macro_img_sum / len(cats)
    value = per_kpt if mode == "per_kpt" else per_img
    return PckResult(alpha=alpha, mode=mode, value=value, per_kpt=per_kpt,
                     per_img=per_img, macro_per_kpt=macro_per_kpt,
                     macro_per_img=macro_per_img, per_category=per_category,
                     n_pairs=n_scored_pairs, n_keypoints=total_kps,
                     n_correct=total_correct)


def viewpoint_binned_pck(predictions, pairs, alpha: float = 0.1,
                         bin_ranges=TABLE_BINS, mode: str = "per_kpt") -> list:
    """PCK per viewpoint-difference bin.

    A pair enters every bin containing its circular azimuth difference; the
    first bin is closed at its lower edge, all other bins are open. Returns
    a list of ``(bin_range, PckResult or None)`` in the given bin order;
    empty bins yield None.
    """
    out = []
    deltas = [p.delta_view for p in pairs]
    for bi, (lo, hi) in enumerate(bin_ranges):
        if bi == 0:
            sel = [i for i, d in enumerate(deltas) if lo <= d < hi]
        else:
            sel = [i for i, d in enumerate(deltas) if lo < d < hi]
        if not sel:
            out.append(((lo, hi), None))
            continue
        out.append(((lo, hi), pck([predictions[i] for i in sel],
                                  [pairs[i] for i in sel], alpha, mode)))
    return out


@dataclass
class LabelQuality:
    """Oracle-checked precision/recall of a pseudo-label collection."""

    precision: float | None
    recall: float
    emitted: int
    correct: int
    matchable_candidates: int
    unmatchable_emitted: int


def label_quality(matchsets, oracle, tol: float = 1.0,
                  candidates: dict | None = None) -> LabelQuality:
    """Score pseudo-labels against a ground-truth correspondence oracle.

    ``oracle(src_id, tgt_id, points)`` must return ``(targets, matchable)``.
    A label is correct when its source point is matchable and its target lies
    within ``tol`` grid cells of the oracle target. Recall counts, among
    matchable candidate source points (``candidates`` maps
    ``(src_id, tgt_id)`` to a point array; defaults to each set's own source
    points), the fraction with a correct emitted label.
    """
    emitted = 0
    correct = 0
    unmatchable_emitted = 0
    matchable_total = 0
    recalled = 0
    for ms in matchsets:
        key = (ms.src_image, ms.tgt_image)
        targets, matchable = oracle(ms.src_image, ms.tgt_image, ms.src)
        emitted += len(ms)
        good = np.zeros(len(ms), dtype=bool)
        for i in range(len(ms)):
            if not matchable[i]:
                unmatchable_emitted += 1
                continue
            d = ms.tgt[i] - targets[i]
            if math.sqrt(d[0] * d[0] + d[1] * d[1]) <= tol:
                good[i] = True
        correct += int(good.sum())
        if candidates is None:
            cand_pts = ms.src
            cand_targets, cand_matchable = targets, matchable
        else:
            cand_pts = np.asarray(candidates[key], dtype=np.float64).reshape(-1, 2)
            cand_targets, cand_matchable = oracle(ms.src_image, ms.tgt_image,
                                                  cand_pts)
        matchable_total += int(np.sum(cand_matchable))
        # Which matchable candidates got a correct label? Source points are
        # unique per set, so position lookup is enough.
        emitted_good = {tuple(p) for p, g in zip(ms.src, good) if g}
        for p, m in zip(cand_pts, cand_matchable):
            if m and tuple(p) in emitted_good:
                recalled += 1
    precision = correct / emitted if emitted else None
    recall = recalled / matchable_total if matchable_total else 0.0
    return LabelQuality(precision=precision, recall=recall, emitted=emitted,
                        correct=correct, matchable_candidates=matchable_total,
                        unmatchable_emitted=unmatchable_emitted)


def predict_targets(src_fmap: FeatureMap, tgt_fmap: FeatureMap,
                    src_points_patch, patch_size: float,
                    window: int = 5, temperature: float = 0.01) -> np.ndarray:
    """Soft-argmax target predictions in pixel coordinates.

    ``src_points_patch`` are integral (row, col) source grid points; the
    returned array is (N, 2) pixel (x, y) via the patch-center convention.
    """
    pts = np.asarray(src_points_patch, dtype=np.int64).reshape(-1, 2)
    preds_patch = np.zeros((len(pts), 2))
    for i, p in enumerate(pts):
        preds_patch[i] = window_soft_argmax(p, src_fmap, tgt_fmap,
                                            window=window,
                                            temperature=temperature)
    return patch_to_pixel(preds_patch, patch_size)
