"""End-to-end pipeline stages: label generation, filtering, training, eval.

This module wires the primitive operations into the runnable pipeline the
command-line tool exposes: generate pseudo-labels (naive or chained), filter
them (cyclic, relaxed, sphere), train the adapter on the survivors, and score
the result with PCK. The ablation harness composes these stages exactly like
the staged-improvement table in the write-up: each row adds one mechanism on
top of the previous ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .adapter import Adapter
from .chains import (Chain, ImageRecord, sample_chains, sample_naive_pairs,
                     propagate)
from .evaluation import EvalPair, PckResult, pck, predict_targets
from .filters import cyclic_filter, relaxed_cyclic_filter
from .grids import FeatureMap, Mask, masked_points, patch_to_pixel
from .matching import MatchSet, nn_match_all
from .sphere import (DEFAULT_THETA_TH, SphereMapper, rotation_to_sphere,
                     sphere_reject)
from .trainer import TrainConfig, TrainPair, train

logger = logging.getLogger(__name__)


@dataclass
class ImageData:
    """Everything the pipeline needs for one image."""

    record: ImageRecord
    fmap: FeatureMap
    mask: Mask


class Dataset:
    """An in-memory image collection keyed by image id."""

    def __init__(self, images: list):
        self.images = {d.record.image_id: d for d in images}
        if len(self.images) != len(images):
            raise ValueError("duplicate image ids in dataset")

    def __getitem__(self, image_id: str) -> ImageData:
        return self.images[image_id]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def records(self) -> list:
        return [d.record for d in self.images.values()]

    def feature_maps(self) -> dict:
        return {i: d.fmap for i, d in self.images.items()}

    def masks(self) -> dict:
        return {i: d.mask for i, d in self.images.items()}


def dataset_from_world(world) -> Dataset:
    return Dataset([ImageData(s.record, s.fmap, s.mask)
                    for s in world.scenes])


def dataset_from_manifest(manifest_path) -> Dataset:
    from . import io as kio
    images = []
    for rec in kio.read_manifest(manifest_path, check_files=True):
        fmap = kio.read_features(rec.feature_ref, image_id=rec.image_id)
        mask = kio.read_mask(rec.mask_ref)
        images.append(ImageData(rec, fmap, mask))
    return Dataset(images)


# ----------------------------------------------------------------------
# label generation stages

def pair_labels(ds: Dataset, src_id: str, tgt_id: str,
                filter_mode: str = "none", r_max: float = 1.5) -> MatchSet:
    """NN labels for one ordered pair, optionally cycle-filtered."""
    a, b = ds[src_id], ds[tgt_id]
    pts = masked_points(a.mask)
    if len(pts) == 0:
        return MatchSet.empty(src_id, tgt_id)
    ms = nn_match_all(pts, a.fmap, b.fmap, b.mask)
    if filter_mode == "none":
        return ms
    if filter_mode == "exact":
        return cyclic_filter(ms, a.fmap, b.fmap, a.mask, b.mask)[0]
    if filter_mode == "relaxed":
        return relaxed_cyclic_filter(ms, a.fmap, b.fmap, r_max, a.mask)[0]
    raise ValueError(f"unknown filter mode {filter_mode!r}")


def naive_labels(ds: Dataset, count_per_category: int = 60, seed: int = 0,
                 filter_mode: str = "none", r_max: float = 1.5) -> list:
    """Pseudo-labels from viewpoint-agnostic same-category pairs."""
    out = []
    for src_id, tgt_id in sample_naive_pairs(ds.records, count_per_category,
                                             seed):
        ms = pair_labels(ds, src_id, tgt_id, filter_mode, r_max)
        if len(ms):
            out.append(ms)
    return out


def chain_labels(ds: Dataset, K: int = 4, count_per_category: int = 30,
                 seed: int = 0, r_max: float = 1.5) -> list:
    """Composed pseudo-labels propagated along viewpoint chains."""
    chains = sample_chains(ds.records, K, count_per_category, seed)
    feats, masks = ds.feature_maps(), ds.masks()
    hop = partial(relaxed_cyclic_filter, r_max=r_max)
    out = []
    for chain in chains:
        out.extend(propagate(chain, feats, masks, hop_filter=hop))
    return out


def oracle_sphere_lookup(world):
    """Per-cell true sphere coordinates from the synthetic world."""
    def lookup(image_id: str, points) -> np.ndarray:
        return world.sphere_points_for(world.by_id[image_id], points)
    return lookup


def mapper_sphere_lookup(mapper: SphereMapper, ds: Dataset):
    """Per-cell sphere coordinates from a trained feature-to-sphere mapper."""
    def lookup(image_id: str, points) -> np.ndarray:
        fmap = ds[image_id].fmap
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        rows = fmap.data.reshape(-1, fmap.channels)[
            pts[:, 0] * fmap.width + pts[:, 1]]
        return mapper.map_points(rows)
    return lookup


def grid_sphere_lookup(grids: dict):
    """Sphere coordinates stored as per-image (H, W, 3) grids (file mode)."""
    def lookup(image_id: str, points) -> np.ndarray:
        g = grids[image_id]
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        vecs = np.asarray(g.data, dtype=np.float64)[pts[:, 0], pts[:, 1]]
        norms = np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
        return vecs / norms
    return lookup


def sphere_filter_labels(matchsets: list, lookup,
                         theta_th: float = DEFAULT_THETA_TH) -> list:
    """Apply sphere rejection to every label set; drops emptied sets."""
    out = []
    for ms in matchsets:
        src_sph = lookup(ms.src_image, ms.src)
        tgt_sph = lookup(ms.tgt_image, ms.tgt)
        kept, _ = sphere_reject(ms, src_sph, tgt_sph, theta_th)
        if len(kept):
            out.append(kept)
    return out


def merge_matchsets(matchsets: list) -> list:
    """Merge label sets per ordered image pair, deduplicating source points.

    When several sets (e.g. different chains) label the same source point of
    the same pair, the highest-scoring match wins; ties keep the first seen.
    Output order is deterministic: pairs sorted by id, points by first use.
    """
    by_pair: dict = {}
    for ms in matchsets:
        key = (ms.src_image, ms.tgt_image)
        best = by_pair.setdefault(key, {})
        for i in range(len(ms)):
            pt = (float(ms.src[i, 0]), float(ms.src[i, 1]))
            row = (ms.tgt[i, 0], ms.tgt[i, 1], float(ms.scores[i]))
            if pt not in best or row[2] > best[pt][2]:
                best[pt] = row
    out = []
    for key in sorted(by_pair):
        best = by_pair[key]
        src = np.array(list(best.keys()), dtype=np.float64).reshape(-1, 2)
        rows = list(best.values())
        tgt = np.array([(r[0], r[1]) for r in rows], dtype=np.float64)
        scores = np.array([r[2] for r in rows], dtype=np.float64)
        out.append(MatchSet(key[0], key[1], src, tgt, scores))
    return out


def training_pairs(ds: Dataset, matchsets: list) -> list:
    """Materialize merged label sets into trainer inputs."""
    return [TrainPair(ds[ms.src_image].fmap, ds[ms.tgt_image].fmap, ms,
                      pair_id=f"{ms.src_image}->{ms.tgt_image}")
            for ms in merge_matchsets(matchsets)]


# ----------------------------------------------------------------------
# evaluation assembly

@dataclass
class EvalItem:
    """One scored pair: the pixel-space ground truth plus patch-space queries."""

    pair: EvalPair
    src_patch_points: np.ndarray


def make_eval_items(world, per_category: int = 40, seed: int = 0,
                    max_keypoints: int = 60, stratify: bool = True) -> list:
    """Sample evaluation pairs with oracle ground truth from the world.

    With ``stratify`` the sampler balances pairs across viewpoint-difference
    quarters (0-45, 45-90, 90-135, 135-180 degrees) so binned analyses have
    support everywhere; otherwise pairs are uniform.
    """
    from .chains import d_circ
    rng = np.random.default_rng([seed, 931])
    items = []
    categories = sorted({s.record.category for s in world.scenes})
    for cat in categories:
        scenes = [s for s in world.scenes if s.record.category == cat]
        buckets = [[] for _ in range(4)]
        for i in range(len(scenes)):
            for j in range(len(scenes)):
                if i == j:
                    continue
                d = d_circ(scenes[i].record.azimuth_deg,
                           scenes[j].record.azimuth_deg)
                buckets[min(int(d // 45.0), 3)].append((i, j))
        chosen = []
        if stratify:
            quota = per_category // 4
            for b in buckets:
                if not b:
                    continue
                take = min(quota, len(b))
                sel = rng.choice(len(b), take, replace=False)
                chosen.extend(b[k] for k in sorted(sel))
        else:
            flat = [p for b in buckets for p in b]
            sel = rng.choice(len(flat), min(per_category, len(flat)),
                             replace=False)
            chosen = [flat[k] for k in sorted(sel)]
        for i, j in chosen:
            src, tgt = scenes[i], scenes[j]
            pts = masked_points(src.mask)
            targets, matchable = world.correspond(src.image_id, tgt.image_id,
                                                  pts)
            good = np.flatnonzero(matchable)
            if len(good) == 0:
                continue
            if len(good) > max_keypoints:
                good = good[np.sort(rng.choice(len(good), max_keypoints,
                                               replace=False))]
            src_pts = pts[good]
            tgt_pts = targets[good]
            ps = src.record.patch_size
            pair = EvalPair(src.record, tgt.record,
                            patch_to_pixel(src_pts, ps),
                            patch_to_pixel(tgt_pts, ps))
            items.append(EvalItem(pair, src_pts))
    return items


def evaluate(adapter: Adapter | None, ds: Dataset, items: list,
             alpha: float = 0.1, mode: str = "per_img", window: int = 5,
             temperature: float = 0.01):
    """PCK of (optionally adapter-refined) features on evaluation items."""
    refined: dict = {}

    def get(image_id: str) -> FeatureMap:
        if image_id not in refined:
            fmap = ds[image_id].fmap
            refined[image_id] = (adapter.forward_map(fmap)
                                 if adapter is not None else fmap)
        return refined[image_id]

    predictions = []
    pairs = []
    for item in items:
        src = get(item.pair.src_record.image_id)
        tgt = get(item.pair.tgt_record.image_id)
        predictions.append(predict_targets(
            src, tgt, item.src_patch_points,
            item.pair.src_record.patch_size, window, temperature))
        pairs.append(item.pair)
    return pck(predictions, pairs, alpha, mode), predictions, pairs


# ----------------------------------------------------------------------
# sphere mapper training

@dataclass(frozen=True)
class SphereTrainConfig:
    total_steps: int = 300
    peak_lr: float = 5e-3
    weight_decay: float = 0.001
    warmup_frac: float = 0.3
    batch_pairs: int = 8
    max_cells: int = 48
    hidden: tuple = (64, 64)
    hemisphere_weight: float = 0.0
    quantize_bins: bool = False
    seed: int = 0


def train_sphere_mapper(ds: Dataset, config: SphereTrainConfig) -> tuple:
    """Fit the feature-to-sphere mapper to pose dot products.

    Each step samples same-category image pairs, maps the masked cells of
    both images, and regresses the dot product of the two mapped means onto
    the dot product of the true pose points. Deterministic given the seed.
    """
    from .adapter import AdamW, lr_schedule
    from .sphere import quantize_pose
    ids = sorted(ds.images)
    by_cat: dict = {}
    for i in ids:
        by_cat.setdefault(ds[i].record.category, []).append(i)
    by_cat = {c: v for c, v in by_cat.items() if len(v) >= 2}
    if not by_cat:
        raise ValueError("need at least one category with two images")
    cats = sorted(by_cat)
    channels = ds[ids[0]].fmap.channels
    mapper = SphereMapper(channels, config.hidden, seed=config.seed)
    opt = AdamW({k: v.shape for k, v in mapper.params().items()},
                weight_decay=config.weight_decay)
    log = []

    def side(image_id: str, rng) -> dict:
        d = ds[image_id]
        pts = masked_points(d.mask)
        if len(pts) > config.max_cells:
            pts = pts[np.sort(rng.choice(len(pts), config.max_cells,
                                         replace=False))]
        rows = d.fmap.data.reshape(-1, channels)[
            pts[:, 0] * d.fmap.width + pts[:, 1]]
        pose = rotation_to_sphere(d.record.rotation)
        if config.quantize_bins:
            pose = quantize_pose(pose)
        return {"feats": rows, "pose": pose.vec}

    for step in range(config.total_steps):
        rng = np.random.default_rng([config.seed, step, 7])
        batch = []
        for _ in range(config.batch_pairs):
            cat = cats[int(rng.integers(len(cats)))]
            group = by_cat[cat]
            i = int(rng.integers(len(group)))
            j = int(rng.integers(len(group) - 1))
            if j >= i:
                j += 1
            a = side(group[i], rng)
            b = side(group[j], rng)
            batch.append({"feats_a": a["feats"], "pose_a": a["pose"],
                          "feats_b": b["feats"], "pose_b": b["pose"]})
        loss, grads = mapper.loss_and_grad(
            batch, hemisphere_weight=config.hemisphere_weight)
        lr = lr_schedule(step, config.total_steps, config.peak_lr,
                         config.warmup_frac)
        opt.step(mapper.params(), grads, lr)
        log.append({"step": step, "lr": lr, "loss_sparse": 0.0,
                    "loss_dense": float(loss), "loss": float(loss)})
    return mapper, log


# ----------------------------------------------------------------------
# ablation harness

@dataclass(frozen=True)
class AblationSettings:
    """Shared knobs of one ablation run (a full staged-comparison matrix)."""

    naive_count: int = 60
    chain_count: int = 30
    chain_k: int = 4
    r_max: float = 1.5
    theta_th: float = DEFAULT_THETA_TH
    eval_per_category: int = 32
    eval_alpha: float = 0.1
    eval_mode: str = "per_img"
    eval_window: int = 5
    eval_temperature: float = 0.01
    sphere_mode: str = "oracle"      # "oracle" or "mapper"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_steps=900, dtype="float32"))


# Stage rows mirror the staged-improvement matrix: each enables a subset of
# {pseudo, exact cc, relaxed cc, chaining, sphere rejection}.
ABLATION_STAGES = ("baseline", "pseudo", "exact-cc", "relaxed-cc",
                   "chaining", "naive-sphere", "full")


def stage_labels(stage: str, ds: Dataset, settings: AblationSettings,
                 seed: int, sphere_lookup=None) -> list:
    """Pseudo-labels for one ablation row."""
    s = settings
    if stage == "baseline":
        return []
    if stage == "pseudo":
        return naive_labels(ds, s.naive_count, seed, "none")
    if stage == "exact-cc":
        return naive_labels(ds, s.naive_count, seed, "exact")
    if stage == "relaxed-cc":
        return naive_labels(ds, s.naive_count, seed, "relaxed", s.r_max)
    if stage == "chaining":
        return chain_labels(ds, s.chain_k, s.chain_count, seed, s.r_max)
    if stage == "naive-sphere":
        labels = naive_labels(ds, s.naive_count, seed, "relaxed", s.r_max)
        return sphere_filter_labels(labels, sphere_lookup, s.theta_th)
    if stage == "full":
        labels = chain_labels(ds, s.chain_k, s.chain_count, seed, s.r_max)
        return sphere_filter_labels(labels, sphere_lookup, s.theta_th)
    raise ValueError(f"unknown stage {stage!r}")


def run_stage(stage: str, world, settings: AblationSettings,
              seed: int) -> dict:
    """Generate labels, train, and evaluate one ablation row for one seed."""
    ds = dataset_from_world(world)
    if settings.sphere_mode == "oracle":
        lookup = oracle_sphere_lookup(world)
    elif settings.sphere_mode == "mapper":
        mapper, _ = train_sphere_mapper(
            ds, SphereTrainConfig(seed=seed))
        lookup = mapper_sphere_lookup(mapper, ds)
    else:
        raise ValueError(f"unknown sphere mode {settings.sphere_mode!r}")
    labels = stage_labels(stage, ds, settings, seed, lookup)
    if stage == "baseline":
        adapter = None
    else:
        pairs = training_pairs(ds, labels)
        cfg = replace(settings.train, seed=seed)
        adapter, _ = train(cfg, pairs)
    items = make_eval_items(world, settings.eval_per_category, seed)
    result, _, _ = evaluate(adapter, ds, items, settings.eval_alpha,
                            settings.eval_mode, settings.eval_window,
                            settings.eval_temperature)
    return {"stage": stage, "seed": seed, "pck": result.value,
            "result": result, "n_labels": int(sum(len(m) for m in labels))}


def run_ablation(world_factory, settings: AblationSettings,
                 seeds=(0, 1, 2, 3, 4), stages=ABLATION_STAGES) -> list:
    """The full staged matrix over several seeds.

    ``world_factory(seed)`` builds the benchmark world for one seed. Returns
    one record per stage with per-seed PCK values and their mean.
    """
    rows = []
    per_stage = {stage: [] for stage in stages}
    for seed in seeds:
        world = world_factory(seed)
        for stage in stages:
            r = run_stage(stage, world, settings, seed)
            per_stage[stage].append(r["pck"])
            logger.info("ablation seed %d stage %-12s pck %.2f (%d labels)",
                        seed, stage, r["pck"], r["n_labels"])
    for stage in stages:
        vals = per_stage[stage]
        rows.append({"stage": stage, "per_seed": vals,
                     "mean": sum(vals) / len(vals)})
    return rows
