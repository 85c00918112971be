"""File formats: features, masks, manifests, pseudo-labels, checkpoints.

Binary layouts are frozen and documented byte-for-byte in FORMATS.md. All
multi-byte integers are little-endian. Feature payloads are 32-bit floats;
checkpoints carry a per-tensor dtype code because the trainer's 64-bit
reference path must resume bit-identically. Text formats are UTF-8 and
round-trip byte-identically: floats are serialized with %.17g, which is
lossless for doubles, and provenance blocks are canonical JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .chains import ImageRecord
from .grids import FeatureMap, Mask
from .matching import MatchSet

FEATURE_MAGIC = b"CCF1"
MASK_MAGIC = b"CCM1"
CHECKPOINT_MAGIC = b"CCK1"
MAPPER_MAGIC = b"CCS1"
VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared format; message names the spot."""


def _read_exact(fh, n: int, what: str, offset: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"{what}: expected {n} bytes at offset {offset}, got {len(buf)}")
    return buf


# ----------------------------------------------------------------------
# features (CCF1): 20-byte header, float32 LE payload, channel-innermost

def write_features(path, fmap: FeatureMap) -> None:
    data = np.ascontiguousarray(fmap.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", VERSION, fmap.height, fmap.width,
                             fmap.channels))
        fh.write(data.tobytes())


def read_features(path, image_id: str | None = None) -> FeatureMap:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "feature file magic", 0)
        if magic != FEATURE_MAGIC:
            raise FormatError(
                f"bad magic at offset 0: expected {FEATURE_MAGIC!r}, got {magic!r}")
        version, h, w, c = struct.unpack(
            "<IIII", _read_exact(fh, 16, "feature header", 4))
        if version != VERSION:
            raise FormatError(f"unsupported feature version {version} at offset 4")
        expected = h * w * c * 4
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise FormatError(
                f"feature payload: expected {expected} bytes at offset 20, "
                f"got {len(payload) if len(payload) < expected else 'extra data'}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if image_id is None:
        image_id = Path(path).stem
    return FeatureMap(data, image_id=image_id)


# ----------------------------------------------------------------------
# masks (CCM1): 16-byte header, bit-packed payload (MSB-first row-major)

def write_mask(path, mask: Mask) -> None:
    packed = np.packbits(mask.bits.ravel())
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<III", VERSION, mask.height, mask.width))
        fh.write(packed.tobytes())


def read_mask(path) -> Mask:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "mask file magic", 0)
        if magic != MASK_MAGIC:
            raise FormatError(
                f"bad magic at offset 0: expected {MASK_MAGIC!r}, got {magic!r}")
        version, h, w = struct.unpack("<III",
                                      _read_exact(fh, 12, "mask header", 4))
        if version != VERSION:
            raise FormatError(f"unsupported mask version {version} at offset 4")
        expected = (h * w + 7) // 8
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise FormatError(
                f"mask payload: expected {expected} bytes at offset 16, "
                f"got {len(payload) if len(payload) < expected else 'extra data'}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                         count=h * w).astype(bool).reshape(h, w)
    return Mask(bits)


# ----------------------------------------------------------------------
# manifest: UTF-8 TSV, one image per line

_MANIFEST_COLUMNS = ("image_id", "category", "azimuth", "rotation", "bbox",
                     "patch_size", "feature_ref", "mask_ref")


def _format_float(x: float) -> str:
    return "%.17g" % float(x)


def write_manifest(path, records, az_bins: bool = False) -> None:
    """Write image records as TSV. Paths are written as given.

    With ``az_bins`` the azimuth column holds the 45-degree bin index
    (``bin:k``) instead of the angle.
    """
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for r in records:
        if az_bins:
            az = f"bin:{int(r.azimuth_deg // 45.0)}"
        else:
            az = _format_float(r.azimuth_deg)
        rot = ("-" if r.rotation is None else
               ",".join(_format_float(v) for v in r.rotation.ravel()))
        bbox = ",".join(_format_float(v) for v in r.bbox)
        lines.append("\t".join([r.image_id, r.category, az, rot, bbox,
                                _format_float(r.patch_size),
                                r.feature_ref or "-", r.mask_ref or "-"]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path, check_files: bool = False) -> list:
    """Load image records; referenced paths resolve relative to the manifest."""
    base = Path(path).parent
    records = []
    seen = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != list(_MANIFEST_COLUMNS):
            raise FormatError(f"manifest header mismatch at line 1: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(_MANIFEST_COLUMNS):
                raise FormatError(
                    f"manifest line {lineno}: expected "
                    f"{len(_MANIFEST_COLUMNS)} fields, got {len(parts)}")
            image_id, category, az, rot, bbox, patch, fref, mref = parts
            if image_id in seen:
                raise FormatError(
                    f"duplicate image_id {image_id!r} at lines "
                    f"{seen[image_id]} and {lineno}")
            seen[image_id] = lineno
            if az.startswith("bin:"):
                azimuth = int(az[4:]) * 45.0 + 22.5
            else:
                azimuth = float(az)
            rotation = (None if rot == "-" else
                        np.array([float(v) for v in rot.split(",")]).reshape(3, 3))
            feature_ref = "" if fref == "-" else str(base / fref)
            mask_ref = "" if mref == "-" else str(base / mref)
            if check_files:
                for ref in (feature_ref, mask_ref):
                    if ref and not os.path.exists(ref):
                        raise FormatError(
                            f"manifest line {lineno}: missing file {ref}")
            records.append(ImageRecord(
                image_id=image_id, category=category, azimuth_deg=azimuth,
                rotation=rotation,
                bbox=tuple(float(v) for v in bbox.split(",")),
                patch_size=float(patch), feature_ref=feature_ref,
                mask_ref=mask_ref))
    return records


# ----------------------------------------------------------------------
# pseudo-labels: UTF-8 text with mandatory provenance header

def write_pseudo_labels(path, ms: MatchSet, src_grid, tgt_grid,
                        provenance: dict) -> None:
    """Persist one pair's matches with their generator provenance.

    ``src_grid``/``tgt_grid`` are (H, W) bounds the coordinates must respect;
    ``provenance`` is a JSON-serializable description of how the labels were
    made (generator, chain spec, filter parameters) and is mandatory.
    """
    if not provenance:
        raise ValueError("provenance block is mandatory")
    sh, sw = src_grid
    th, tw = tgt_grid
    if len(ms) and (ms.src[:, 0].max() >= sh or ms.src[:, 1].max() >= sw
                    or ms.tgt[:, 0].max() >= th or ms.tgt[:, 1].max() >= tw
                    or ms.src.min() < 0 or ms.tgt.min() < 0):
        raise ValueError("match coordinates outside declared grid bounds")
    lines = [f"CCPL {VERSION}",
             f"src {ms.src_image}",
             f"tgt {ms.tgt_image}",
             f"src_grid {sh} {sw}",
             f"tgt_grid {th} {tw}",
             "provenance " + json.dumps(provenance, sort_keys=True,
                                        separators=(",", ":")),
             f"records {len(ms)}"]
    for i in range(len(ms)):
        lines.append("%d %d %d %d %s" % (
            int(ms.src[i, 0]), int(ms.src[i, 1]),
            int(ms.tgt[i, 0]), int(ms.tgt[i, 1]),
            _format_float(ms.scores[i])))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pseudo_labels(path):
    """Load a pseudo-label file; returns (MatchSet, grids, provenance)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def expect(lineno: int, prefix: str) -> str:
        if lineno >= len(lines) or not lines[lineno].startswith(prefix + " "):
            got = lines[lineno] if lineno < len(lines) else "<eof>"
            raise FormatError(
                f"pseudo-label line {lineno + 1}: expected {prefix!r}, got {got!r}")
        return lines[lineno][len(prefix) + 1:]

    version = expect(0, "CCPL")
    if version != str(VERSION):
        raise FormatError(f"unsupported pseudo-label version {version} at line 1")
    src_id = expect(1, "src")
    tgt_id = expect(2, "tgt")
    sh, sw = (int(v) for v in expect(3, "src_grid").split())
    th, tw = (int(v) for v in expect(4, "tgt_grid").split())
    provenance = json.loads(expect(5, "provenance"))
    n = int(expect(6, "records"))
    if len(lines) < 7 + n:
        raise FormatError(
            f"pseudo-label file: expected {n} records, got {len(lines) - 7}")
    src = np.zeros((n, 2))
    tgt = np.zeros((n, 2))
    scores = np.zeros(n)
    for i in range(n):
        parts = lines[7 + i].split()
        if len(parts) != 5:
            raise FormatError(
                f"pseudo-label line {8 + i}: expected 5 fields, got {len(parts)}")
        src[i] = (int(parts[0]), int(parts[1]))
        tgt[i] = (int(parts[2]), int(parts[3]))
        scores[i] = float(parts[4])
    if n and (src[:, 0].max() >= sh or src[:, 1].max() >= sw or src.min() < 0
              or tgt[:, 0].max() >= th or tgt[:, 1].max() >= tw or tgt.min() < 0):
        raise FormatError("pseudo-label coordinates outside declared grid bounds")
    ms = MatchSet(src_id, tgt_id, src, tgt, scores)
    return ms, ((sh, sw), (th, tw)), provenance


# ----------------------------------------------------------------------
# checkpoints (CCK1): JSON meta + named tensors with per-tensor dtype

_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_DTYPE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_checkpoint(path, arrays: dict, meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            code = _DTYPE_OF.get(arr.dtype)
            if code is None:
                raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Load a checkpoint; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "checkpoint magic", 0)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"bad magic at offset 0: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version", 4))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", _read_exact(fh, 4, "meta length", 8))
        meta = json.loads(_read_exact(fh, meta_len, "meta", 12))
        count, = struct.unpack("<I", _read_exact(fh, 4, "tensor count",
                                                 12 + meta_len))
        arrays = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", _read_exact(fh, 2, "name length", -1))
            name = _read_exact(fh, name_len, "name", -1).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim", -1))
            if code not in _DTYPE_CODES:
                raise FormatError(f"unknown dtype code {code} for {name}")
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, "shape", -1))
            dt = np.dtype(_DTYPE_CODES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arrays[name] = np.frombuffer(
                _read_exact(fh, nbytes, f"tensor {name}", -1),
                dtype=dt).reshape(shape).copy()
    return arrays, meta


# ----------------------------------------------------------------------
# sphere mapper parameters (CCS1): layer sizes then float32 weights

def write_mapper(path, mapper) -> None:
    with open(path, "wb") as fh:
        fh.write(MAPPER_MAGIC)
        fh.write(struct.pack("<IIII", VERSION, mapper.in_dim,
                             mapper.hidden[0], mapper.hidden[1]))
        for name in mapper.PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(mapper, name),
                                          dtype="<f4").tobytes())


def read_mapper(path):
    """Load mapper weights; returns a SphereMapper (float32-rounded)."""
    from .sphere import SphereMapper
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "mapper magic", 0)
        if magic != MAPPER_MAGIC:
            raise FormatError(
                f"bad magic at offset 0: expected {MAPPER_MAGIC!r}, got {magic!r}")
        version, in_dim, d1, d2 = struct.unpack(
            "<IIII", _read_exact(fh, 16, "mapper header", 4))
        if version != VERSION:
            raise FormatError(f"unsupported mapper version {version}")
        mapper = SphereMapper(in_dim, (d1, d2), seed=0)
        offset = 20
        for name in mapper.PARAM_NAMES:
            arr = getattr(mapper, name)
            blob = _read_exact(fh, arr.size * 4, f"mapper tensor {name}", offset)
            offset += arr.size * 4
            setattr(mapper, name,
                    np.frombuffer(blob, dtype="<f4").astype(np.float64)
                    .reshape(arr.shape))
    return mapper


# ----------------------------------------------------------------------
# metrics, results, provenance

def write_metrics(path, records) -> None:
    """Line-delimited training metrics: step, lr, loss_sparse, loss_dense."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tlr\tloss_sparse\tloss_dense\n")
        for r in records:
            fh.write("%d\t%s\t%s\t%s\n" % (
                r["step"], _format_float(r["lr"]),
                _format_float(r["loss_sparse"]),
                _format_float(r["loss_dense"])))


def read_metrics(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.rstrip("\n") != "step\tlr\tloss_sparse\tloss_dense":
            raise FormatError(f"metrics header mismatch: {header!r}")
        for line in fh:
            step, lr, ls, ld = line.rstrip("\n").split("\t")
            out.append({"step": int(step), "lr": float(lr),
                        "loss_sparse": float(ls), "loss_dense": float(ld)})
    return out


def write_predictions(path, src_image: str, tgt_image: str,
                      src_points, tgt_points, provenance: dict) -> None:
    """Continuous predicted correspondences, patch coordinates, UTF-8 text.

    Unlike pseudo-labels, predicted target points are real-valued (they come
    from the window soft-argmax), so this format stores all four coordinates
    as decimal floats.
    """
    src_pts = np.asarray(src_points, dtype=np.float64).reshape(-1, 2)
    tgt_pts = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 2)
    if len(src_pts) != len(tgt_pts):
        raise ValueError("source and target point counts differ")
    prov_blob = json.dumps(provenance, sort_keys=True, separators=(",", ":"))
    lines = ["CCPR1", f"src {src_image}", f"tgt {tgt_image}",
             f"provenance {prov_blob}", f"count {len(src_pts)}"]
    for (sr, sc), (tr, tc) in zip(src_pts, tgt_pts):
        lines.append(" ".join(_format_float(v) for v in (sr, sc, tr, tc)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_predictions(path):
    """Load predictions; returns (src_image, tgt_image, src_pts, tgt_pts, provenance)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def expect(lineno: int, prefix: str) -> str:
        if lineno >= len(lines) or not lines[lineno].startswith(prefix + " "):
            raise FormatError(
                f"{path}: line {lineno + 1}: expected {prefix!r} field")
        return lines[lineno][len(prefix) + 1:]

    if not lines or lines[0] != "CCPR1":
        raise FormatError(f"{path}: line 1: expected CCPR1 header")
    src_image = expect(1, "src")
    tgt_image = expect(2, "tgt")
    provenance = json.loads(expect(3, "provenance"))
    count = int(expect(4, "count"))
    if len(lines) != 5 + count:
        raise FormatError(f"{path}: expected {count} records, "
                          f"got {len(lines) - 5}")
    src_pts = np.zeros((count, 2))
    tgt_pts = np.zeros((count, 2))
    for i in range(count):
        fields = lines[5 + i].split(" ")
        if len(fields) != 4:
            raise FormatError(
                f"{path}: line {6 + i}: expected 4 fields, got {len(fields)}")
        vals = [float(v) for v in fields]
        src_pts[i] = vals[:2]
        tgt_pts[i] = vals[2:]
    return src_image, tgt_image, src_pts, tgt_pts, provenance


def write_ablation_csv(path, rows, seeds) -> None:
    """Staged-comparison results: one row per stage, per-seed columns + mean."""
    header = "stage,mean," + ",".join(f"seed{s}" for s in seeds)
    lines = [header]
    for r in rows:
        cells = [r["stage"], _format_float(r["mean"])]
        cells += [_format_float(v) for v in r["per_seed"]]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_results_csv(path, rows) -> None:
    """Plot-ready CSV with columns bin, alpha, mode, value."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin,alpha,mode,value\n")
        for r in rows:
            fh.write("%s,%s,%s,%s\n" % (r["bin"], _format_float(r["alpha"]),
                                        r["mode"], _format_float(r["value"])))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_provenance(out_dir, config: dict, seed: int) -> str:
    """Record how a run was produced; returns the config hash."""
    h = config_hash(config)
    record = {"config_hash": h, "seed": seed, "format_version": VERSION,
              "numpy": np.__version__}
    path = os.path.join(out_dir, "provenance.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({**record, "config": config}, fh, indent=2, sort_keys=True)
    return h
