"""Command-line surface of the correspondence pipeline.

Subcommands mirror the pipeline stages: ``synth`` builds a benchmark dataset,
``pairs``/``chain`` generate pseudo-labels, ``filter-sphere`` prunes them with
the spherical prior, ``train-sphere``/``train-adapter`` fit the two learned
components, ``eval``/``analyze-viewpoint`` score predictions, and ``ablate``
runs the whole staged comparison end to end.

Exit codes: 0 success, 1 validation error (bad arguments, malformed or
missing inputs), 2 runtime failure. Errors print a machine-readable JSON
record to stderr. Every command writes a provenance record into its output
directory, and all outputs are deterministic given the seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import glob
import json
import logging
import os
import sys

import numpy as np

from . import configio
from . import io as kio
from . import pipeline
from .configio import ConfigError
from .evaluation import (TABLE_BINS, EvalPair, pck, predict_targets,
                         viewpoint_binned_pck)
from .grids import patch_to_pixel, pixel_to_patch
from .io import FormatError
from .matching import MatchSet
from .synthetic import generate, plant_report
from .trainer import load_adapter, train

logger = logging.getLogger(__name__)


class CliError(Exception):
    """Validation failure: bad arguments or bad input files (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):                      # argparse default exits(2)
        raise CliError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="corrkit", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for pair-parallel stages")
    common.add_argument("--out-dir", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic benchmark dataset")
    p.add_argument("--az-bins", action="store_true",
                   help="write azimuth as 45-degree bin indices")
    p.add_argument("--eval-pairs", type=int, default=0,
                   help="also write this many ground-truth eval pairs per "
                        "category")

    p = sub.add_parser("pairs", parents=[common],
                       help="naive same-category pseudo-labels")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("chain", parents=[common],
                       help="viewpoint-chained pseudo-labels")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("filter-sphere", parents=[common],
                       help="prune pseudo-labels with the spherical prior")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="input label directory")
    p.add_argument("--mapper", required=True, help="trained sphere mapper")

    p = sub.add_parser("train-sphere", parents=[common],
                       help="fit the feature-to-sphere mapper")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train-adapter", parents=[common],
                       help="train the feature adapter on pseudo-labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="label directory")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common],
                       help="PCK of predictions against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--predictions", help="predictions directory")
    p.add_argument("--checkpoint", help="compute predictions with this "
                                        "adapter instead")
    p.add_argument("--save-predictions", action="store_true",
                   help="write computed predictions under the output dir")

    p = sub.add_parser("analyze-viewpoint", parents=[common],
                       help="PCK per viewpoint-difference bin")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", parents=[common],
                       help="run the staged-comparison matrix end to end")
    p.add_argument("--stages", help="comma-separated subset of stages")
    return parser


def _setup(args):
    values = (configio.load_config(args.config) if args.config
              else configio.defaults())
    if args.seed is not None:
        values["seed"] = args.seed
    os.makedirs(args.out_dir, exist_ok=True)
    return values


def _provenance(args, values: dict) -> str:
    record = dict(values)
    record["command"] = args.command
    return kio.write_provenance(args.out_dir, record, values["seed"])


def _pool_map(fn, items, threads: int) -> list:
    """Order-preserving parallel map; sequential when threads <= 1."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------
# subcommands

def _cmd_synth(args, values) -> int:
    world = generate(configio.synth_config(values))
    feat_dir = os.path.join(args.out_dir, "features")
    mask_dir = os.path.join(args.out_dir, "masks")
    os.makedirs(feat_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    records = []
    for scene in world.scenes:
        fref = f"features/{scene.image_id}.ccf"
        mref = f"masks/{scene.image_id}.ccm"
        kio.write_features(os.path.join(args.out_dir, fref), scene.fmap)
        kio.write_mask(os.path.join(args.out_dir, mref), scene.mask)
        records.append(dataclasses.replace(scene.record, feature_ref=fref,
                                           mask_ref=mref))
    kio.write_manifest(os.path.join(args.out_dir, "manifest.tsv"), records,
                       az_bins=args.az_bins)
    report = plant_report(world)

    def jsonable(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    with open(os.path.join(args.out_dir, "plant_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=jsonable)
        fh.write("\n")
    if args.eval_pairs > 0:
        gt_dir = os.path.join(args.out_dir, "gt")
        os.makedirs(gt_dir, exist_ok=True)
        items = pipeline.make_eval_items(world, args.eval_pairs,
                                         values["seed"],
                                         values["eval.max_keypoints"])
        for i, item in enumerate(items):
            sr, tr = item.pair.src_record, item.pair.tgt_record
            tgt_patch = np.rint(pixel_to_patch(item.pair.gt_tgt,
                                               tr.patch_size))
            ms = MatchSet(sr.image_id, tr.image_id, item.src_patch_points,
                          tgt_patch, np.ones(len(tgt_patch)))
            grid = world.config.grid
            kio.write_pseudo_labels(
                os.path.join(gt_dir, f"gt{i:05d}.ccpl"), ms,
                (grid, grid), (grid, grid),
                {"generator": "oracle-gt", "seed": values["seed"]})
    h = _provenance(args, values)
    print(f"synth: {len(world.scenes)} images -> {args.out_dir} "
          f"(config {h})")
    return 0


def _label_provenance(values: dict, generator: str, **extra) -> dict:
    prov = {"generator": generator, "seed": values["seed"],
            "filter": values["labels.filter"],
            "r_max": values["labels.r_max"]}
    prov.update(extra)
    return prov


def _cmd_pairs(args, values) -> int:
    from .chains import sample_naive_pairs
    ds = pipeline.dataset_from_manifest(args.manifest)
    sampled = sample_naive_pairs(ds.records,
                                 values["labels.count_per_category"],
                                 values["seed"])
    label_dir = os.path.join(args.out_dir, "labels")
    os.makedirs(label_dir, exist_ok=True)
    mode, r_max = values["labels.filter"], values["labels.r_max"]

    def work(idx_pair):
        i, (src_id, tgt_id) = idx_pair
        return i, pipeline.pair_labels(ds, src_id, tgt_id, mode, r_max)

    results = _pool_map(work, list(enumerate(sampled)), args.threads)
    n_matches = 0
    for i, ms in sorted(results, key=lambda t: t[0]):
        src_f, tgt_f = ds[ms.src_image].fmap, ds[ms.tgt_image].fmap
        kio.write_pseudo_labels(
            os.path.join(label_dir, f"pair{i:05d}.ccpl"), ms,
            (src_f.height, src_f.width), (tgt_f.height, tgt_f.width),
            _label_provenance(values, "pairs", index=i))
        n_matches += len(ms)
    _provenance(args, values)
    print(f"pairs: {len(results)} label files, {n_matches} matches "
          f"-> {args.out_dir}")
    return 0


def _cmd_chain(args, values) -> int:
    from .chains import sample_chains, propagate
    from .filters import relaxed_cyclic_filter
    from functools import partial
    ds = pipeline.dataset_from_manifest(args.manifest)
    chains = sample_chains(ds.records, values["chain.k"],
                           values["chain.count_per_category"], values["seed"])
    feats, masks = ds.feature_maps(), ds.masks()
    hop = partial(relaxed_cyclic_filter, r_max=values["labels.r_max"])
    label_dir = os.path.join(args.out_dir, "labels")
    os.makedirs(label_dir, exist_ok=True)

    def work(idx_chain):
        ci, chain = idx_chain
        return ci, chain, propagate(chain, feats, masks, hop_filter=hop)

    results = _pool_map(work, list(enumerate(chains)), args.threads)
    n_files = n_matches = 0
    for ci, chain, composed in sorted(results, key=lambda t: t[0]):
        for j, ms in enumerate(composed):
            src_f, tgt_f = ds[ms.src_image].fmap, ds[ms.tgt_image].fmap
            kio.write_pseudo_labels(
                os.path.join(label_dir, f"chain{ci:05d}_hop{j + 1}.ccpl"),
                ms, (src_f.height, src_f.width), (tgt_f.height, tgt_f.width),
                _label_provenance(values, "chain", chain=list(chain.images),
                                  hop=j + 1))
            n_files += 1
            n_matches += len(ms)
    _provenance(args, values)
    print(f"chain: {len(chains)} chains, {n_files} label files, "
          f"{n_matches} matches -> {args.out_dir}")
    return 0


def _read_label_dir(label_dir: str) -> list:
    paths = sorted(glob.glob(os.path.join(label_dir, "*.ccpl")))
    if not paths:
        raise CliError(f"no .ccpl label files in {label_dir}")
    return paths


def _cmd_filter_sphere(args, values) -> int:
    ds = pipeline.dataset_from_manifest(args.manifest)
    if not os.path.exists(args.mapper):
        raise CliError(f"missing mapper file {args.mapper}")
    mapper = kio.read_mapper(args.mapper)
    lookup = pipeline.mapper_sphere_lookup(mapper, ds)
    out_labels = os.path.join(args.out_dir, "labels")
    os.makedirs(out_labels, exist_ok=True)
    theta_th = values["sphere.theta_th"]
    kept_total = in_total = 0
    for path in _read_label_dir(args.labels):
        ms, _grids, prov = kio.read_pseudo_labels(path)
        if len(ms):
            from .sphere import sphere_reject
            kept, _report = sphere_reject(ms, lookup(ms.src_image, ms.src),
                                          lookup(ms.tgt_image, ms.tgt),
                                          theta_th)
        else:
            kept = ms
        prov = dict(prov)
        prov["sphere"] = {"theta_th": theta_th,
                          "mapper": os.path.basename(args.mapper)}
        src_f, tgt_f = ds[ms.src_image].fmap, ds[ms.tgt_image].fmap
        kio.write_pseudo_labels(
            os.path.join(out_labels, os.path.basename(path)), kept,
            (src_f.height, src_f.width), (tgt_f.height, tgt_f.width), prov)
        kept_total += len(kept)
        in_total += len(ms)
    _provenance(args, values)
    print(f"filter-sphere: kept {kept_total} of {in_total} matches "
          f"-> {args.out_dir}")
    return 0


def _cmd_train_sphere(args, values) -> int:
    ds = pipeline.dataset_from_manifest(args.manifest)
    missing = [r.image_id for r in ds.records if r.rotation is None]
    if missing:
        raise CliError(f"manifest rows without rotation: {missing[:3]}"
                       f"{'...' if len(missing) > 3 else ''}")
    mapper, log = pipeline.train_sphere_mapper(
        ds, configio.sphere_train_config(values))
    kio.write_mapper(os.path.join(args.out_dir, "mapper.ccs"), mapper)
    kio.write_metrics(os.path.join(args.out_dir, "metrics.log"), log)
    _provenance(args, values)
    print(f"train-sphere: final loss {log[-1]['loss']:.6f} "
          f"-> {args.out_dir}/mapper.ccs")
    return 0


def _cmd_train_adapter(args, values) -> int:
    ds = pipeline.dataset_from_manifest(args.manifest)
    matchsets = []
    for path in _read_label_dir(args.labels):
        ms, _grids, _prov = kio.read_pseudo_labels(path)
        if len(ms):
            matchsets.append(ms)
    if not matchsets:
        raise CliError(f"all label files in {args.labels} are empty")
    pairs = pipeline.training_pairs(ds, matchsets)
    cfg = configio.train_config(values)
    if args.resume and not os.path.exists(args.resume):
        raise CliError(f"missing checkpoint {args.resume}")
    adapter, log = train(cfg, pairs, run_dir=args.out_dir,
                         resume_from=args.resume)
    _provenance(args, values)
    print(f"train-adapter: {cfg.total_steps} steps, final loss "
          f"{log[-1]['loss']:.6f} -> {args.out_dir}/adapter.ckpt")
    return 0


def _load_eval_pairs(args, ds: pipeline.Dataset) -> list:
    by_id = {r.image_id: r for r in ds.records}
    items = []
    for path in sorted(glob.glob(os.path.join(args.gt, "*.ccpl"))):
        ms, _grids, _prov = kio.read_pseudo_labels(path)
        if ms.src_image not in by_id or ms.tgt_image not in by_id:
            raise CliError(f"{path}: unknown image id "
                           f"{ms.src_image!r} or {ms.tgt_image!r}")
        if len(ms) == 0:
            continue
        sr, tr = by_id[ms.src_image], by_id[ms.tgt_image]
        pair = EvalPair(sr, tr, patch_to_pixel(ms.src, sr.patch_size),
                        patch_to_pixel(ms.tgt, tr.patch_size))
        items.append((os.path.basename(path), pair, ms.src))
    if not items:
        raise CliError(f"no usable ground-truth files in {args.gt}")
    return items


def _eval_predictions(args, values, ds, items) -> list:
    """Predicted pixel targets aligned with the ground-truth items."""
    if args.predictions:
        if not os.path.isdir(args.predictions):
            raise CliError(f"missing predictions directory {args.predictions}")
        preds = []
        for name, pair, src_patch in items:
            ppath = os.path.join(args.predictions,
                                 name.replace(".ccpl", ".ccpr"))
            if not os.path.exists(ppath):
                raise CliError(f"missing predictions file {ppath}")
            psrc, ptgt, spts, tpts, _prov = kio.read_predictions(ppath)
            if (psrc, ptgt) != (pair.src_record.image_id,
                                pair.tgt_record.image_id):
                raise CliError(f"{ppath}: image ids do not match {name}")
            if len(spts) != len(src_patch) or not np.allclose(spts, src_patch):
                raise CliError(f"{ppath}: source points do not match {name}")
            preds.append(patch_to_pixel(tpts, pair.tgt_record.patch_size))
        return preds
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise CliError(f"missing checkpoint {args.checkpoint}")
        adapter, _meta = load_adapter(args.checkpoint)
        refined: dict = {}

        def get(image_id):
            if image_id not in refined:
                refined[image_id] = adapter.forward_map(ds[image_id].fmap)
            return refined[image_id]

        preds = []
        save_dir = None
        if getattr(args, "save_predictions", False):
            save_dir = os.path.join(args.out_dir, "predictions")
            os.makedirs(save_dir, exist_ok=True)
        for name, pair, src_patch in items:
            sid = pair.src_record.image_id
            tid = pair.tgt_record.image_id
            pred_px = predict_targets(get(sid), get(tid), src_patch,
                                      pair.src_record.patch_size,
                                      values["eval.window"],
                                      values["eval.temperature"])
            preds.append(pred_px)
            if save_dir is not None:
                tgt_patch = pixel_to_patch(pred_px,
                                           pair.tgt_record.patch_size)
                kio.write_predictions(
                    os.path.join(save_dir, name.replace(".ccpl", ".ccpr")),
                    sid, tid, src_patch, tgt_patch,
                    {"checkpoint": os.path.basename(args.checkpoint)})
        return preds
    raise CliError("missing predictions: pass --predictions or --checkpoint")


def _cmd_eval(args, values) -> int:
    ds = pipeline.dataset_from_manifest(args.manifest)
    items = _load_eval_pairs(args, ds)
    preds = _eval_predictions(args, values, ds, items)
    pairs = [pair for _name, pair, _src in items]
    result = pck(preds, pairs, values["eval.alpha"], values["eval.mode"])
    rows = [{"bin": "all", "alpha": result.alpha, "mode": result.mode,
             "value": result.value}]
    for cat in sorted(result.per_category):
        rows.append({"bin": f"cat:{cat}", "alpha": result.alpha,
                     "mode": result.mode,
                     "value": result.per_category[cat][result.mode]})
    kio.write_results_csv(os.path.join(args.out_dir, "results.csv"), rows)
    _provenance(args, values)
    print(f"eval: pck@{result.alpha:g} {result.mode} = {result.value:.2f} "
          f"({result.n_pairs} pairs, {result.n_keypoints} keypoints)")
    return 0


def _cmd_analyze_viewpoint(args, values) -> int:
    ds = pipeline.dataset_from_manifest(args.manifest)
    items = _load_eval_pairs(args, ds)
    preds = _eval_predictions(args, values, ds, items)
    pairs = [pair for _name, pair, _src in items]
    binned = viewpoint_binned_pck(preds, pairs, values["eval.alpha"],
                                  TABLE_BINS, values["eval.mode"])
    rows = []
    for (lo, hi), result in binned:
        label = f"{lo:g}-{hi:g}"
        value = float("nan") if result is None else result.value
        rows.append({"bin": label, "alpha": values["eval.alpha"],
                     "mode": values["eval.mode"], "value": value})
        shown = "n/a" if result is None else f"{result.value:.2f}"
        print(f"analyze-viewpoint: bin {label:>8} deg: pck = {shown}")
    kio.write_results_csv(os.path.join(args.out_dir, "results.csv"), rows)
    _provenance(args, values)
    return 0


def _cmd_ablate(args, values) -> int:
    settings = configio.ablation_settings(values)
    stages = pipeline.ABLATION_STAGES
    if args.stages:
        stages = tuple(s.strip() for s in args.stages.split(","))
        unknown = [s for s in stages if s not in pipeline.ABLATION_STAGES]
        if unknown:
            raise CliError(f"unknown stages: {unknown}")
    base = configio.synth_config(values)
    seeds = tuple(values["seed"] + k for k in range(values["ablate.seeds"]))

    def factory(seed):
        return generate(dataclasses.replace(base, seed=seed))

    rows = pipeline.run_ablation(factory, settings, seeds, stages)
    kio.write_ablation_csv(os.path.join(args.out_dir, "ablation.csv"),
                           rows, seeds)
    _provenance(args, values)
    for r in rows:
        per_seed = " ".join(f"{v:.2f}" for v in r["per_seed"])
        print(f"ablate: {r['stage']:>12}: mean {r['mean']:.2f}  [{per_seed}]")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pairs": _cmd_pairs,
    "chain": _cmd_chain,
    "filter-sphere": _cmd_filter_sphere,
    "train-sphere": _cmd_train_sphere,
    "train-adapter": _cmd_train_adapter,
    "eval": _cmd_eval,
    "analyze-viewpoint": _cmd_analyze_viewpoint,
    "ablate": _cmd_ablate,
}


def _error_record(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        values = _setup(args)
        if args.threads > 1:
            # BLAS already threads inside matmuls; cap the pool defensively.
            args.threads = min(args.threads, 16)
        return _COMMANDS[args.command](args, values)
    except (CliError, ConfigError, FormatError, FileNotFoundError) as e:
        _error_record(type(e).__name__, str(e))
        return 1
    except Exception as e:                        # runtime failure
        _error_record(type(e).__name__, str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
