"""Synthetic correspondence world with an exact ground-truth oracle.

The generator builds desk-scale datasets that plant, with controllable
strength, the failure modes the pipeline is supposed to handle:

* **Symmetric parts.** Part pairs share a base embedding and differ by a side
  component scaled by ``1 - confusion``; their true sphere points are mirror
  images across the xz-plane, placed so their geodesic separation is at least
  half pi. Instances viewed from the back half additionally swap the side
  component (mirror ambiguity), which produces cycle-consistent wrong matches
  that no cyclic filter can catch - only the sphere prior separates them.
* **View-dependent noise.** Each part/offset carries a smooth azimuth-dependent
  perturbation inside a fixed low-dimensional subspace; feature quality
  degrades monotonically with viewpoint difference, and a bottleneck adapter
  can learn to suppress the subspace.
* **Occlusion.** A part is rendered only when front-facing (positive dot with
  the equatorial view direction), plus an independent dropout, so some points
  are genuinely unmatchable.

Feature construction is fully analytic: signal directions come from one
orthonormal basis, so separation margins are computable and asserted rather
than hoped for. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chains import ImageRecord
from .grids import FeatureMap, Mask
from .sphere import SpherePoint, rotation_to_sphere

PATCH_SIZE = 16.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic world.

    ``confusion`` is the symmetric-part confusion strength c in [0, 1]: the
    side component that separates a symmetric pair is scaled by (1 - c), so
    c = 1 makes the two sides bit-identical in expectation. ``view_noise_slope``
    scales the azimuth-dependent perturbation. ``unmatchable_prob`` drops a
    visible part from a scene entirely.
    """

    categories: int = 6
    instances: int = 14
    parts: int = 10
    sym_fraction: float = 0.6
    confusion: float = 0.8
    view_noise_slope: float = 1.0
    channels: int = 40
    grid: int = 24
    unmatchable_prob: float = 0.1
    seed: int = 0
    blob: int = 3
    inst_sigma: float = 0.1
    offset_gain: float = 0.55
    side_gain: float = 1.0
    background_sigma: float = 0.05
    elevation_deg: float = 65.0

    def __post_init__(self) -> None:
        for name in ("sym_fraction", "confusion", "unmatchable_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.grid < 8:
            raise ValueError("grid size must be >= 8")
        if self.parts < 2 or self.categories < 1 or self.instances < 2:
            raise ValueError("need at least 2 parts, 1 category, 2 instances")
        if self.blob < 1 or self.blob * self.blob * self.parts > self.grid ** 2:
            raise ValueError("parts do not fit the grid")
        if self.channels < self.signal_dims:
            raise ValueError(
                f"channels must be >= {self.signal_dims} for this layout")

    @property
    def n_pairs(self) -> int:
        return int(self.parts * self.sym_fraction) // 2

    @property
    def n_unique(self) -> int:
        return self.parts - 2 * self.n_pairs

    @property
    def n_groups(self) -> int:
        return self.n_pairs + self.n_unique

    @property
    def n_offsets(self) -> int:
        return self.blob * self.blob

    @property
    def signal_dims(self) -> int:
        # group bases + side directions + offsets + view + instance subspaces
        return self.n_groups + self.n_pairs + self.n_offsets + 12


@dataclass
class CategoryLayout:
    """Canonical per-category structure: parts on the sphere and their roles."""

    name: str
    part_points: np.ndarray          # (P, 3) unit rows
    group_of: np.ndarray             # (P,) int, feature group per part
    side_of: np.ndarray              # (P,) int in {-1, 0, +1}; 0 for unique parts
    mirror_of: np.ndarray            # (P,) int, symmetric partner (self if unique)

    @property
    def sym_pairs(self) -> list:
        return [(p, int(self.mirror_of[p])) for p in range(len(self.group_of))
                if self.side_of[p] > 0]


@dataclass
class SynthScene:
    """One rendered instance: features, mask, part identity, and pose."""

    record: ImageRecord
    fmap: FeatureMap
    mask: Mask
    part_grid: np.ndarray            # (G, G) int, -1 background
    offset_grid: np.ndarray          # (G, G) int, -1 background
    anchors: np.ndarray              # (P, 2) int, blob top-left, -1 if hidden
    pose_point: SpherePoint
    swapped: bool
    category_index: int
    instance_index: int

    @property
    def image_id(self) -> str:
        return self.record.image_id


def _rotation_for(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Scene camera rotation: tilt from the pole, then spin about z."""
    a = math.radians(elevation_deg)
    p = math.radians(azimuth_deg)
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, math.cos(a), -math.sin(a)],
                   [0.0, math.sin(a), math.cos(a)]])
    rz = np.array([[math.cos(p), -math.sin(p), 0.0],
                   [math.sin(p), math.cos(p), 0.0],
                   [0.0, 0.0, 1.0]])
    return rz @ rx


def view_direction(azimuth_deg: float) -> np.ndarray:
    """Equatorial viewing direction used for front-facing visibility."""
    p = math.radians(azimuth_deg)
    return np.array([math.cos(p), math.sin(p), 0.0])


class SynthWorld:
    """A generated dataset plus its exact correspondence oracle."""

    def __init__(self, config: SynthConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self._build_basis(rng)
        self.layouts = [self._build_layout(ci, rng)
                        for ci in range(config.categories)]
        self.scenes: list = []
        for ci, layout in enumerate(self.layouts):
            for ii in range(config.instances):
                self.scenes.append(self._render(ci, ii, layout, rng))
        self.by_id = {s.image_id: s for s in self.scenes}

    # ------------------------------------------------------------------
    # construction

    def _build_basis(self, rng) -> None:
        cfg = self.config
        q, _ = np.linalg.qr(rng.normal(size=(cfg.channels, cfg.channels)))
        cols = iter(range(cfg.channels))
        take = lambda n: q[:, [next(cols) for _ in range(n)]]
        self.base_dirs = take(cfg.n_groups)          # (C, n_groups)
        self.side_dirs = take(cfg.n_pairs)           # (C, n_pairs)
        self.offset_dirs = take(cfg.n_offsets)       # (C, n_offsets)
        self.view_basis = take(6)                    # (C, 6)
        self.inst_basis = take(6)                    # (C, 6)
        # Azimuth-harmonic directions per (group, offset), inside the view
        # subspace: zeta(phi) = slope * (cos(phi) u + sin(phi) v).
        g, o = cfg.n_groups, cfg.n_offsets
        u = rng.normal(size=(g, o, 6))
        u /= np.linalg.norm(u, axis=2, keepdims=True)
        v = rng.normal(size=(g, o, 6))
        v -= np.sum(v * u, axis=2, keepdims=True) * u
        v /= np.linalg.norm(v, axis=2, keepdims=True)
        self.view_u = u @ self.view_basis.T          # (g, o, C)
        self.view_v = v @ self.view_basis.T

    def _build_layout(self, ci: int, rng) -> CategoryLayout:
        cfg = self.config
        p = cfg.parts
        points = np.zeros((p, 3))
        group_of = np.zeros(p, dtype=int)
        side_of = np.zeros(p, dtype=int)
        mirror_of = np.arange(p)
        # Symmetric pairs first: mirrored across the xz-plane with |y| large
        # enough that the geodesic separation exceeds half pi.
        for k in range(cfg.n_pairs):
            y = rng.uniform(0.76, 0.95)
            rad = math.sqrt(1.0 - y * y)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            x, z = rad * math.cos(ang), rad * math.sin(ang)
            left, right = 2 * k, 2 * k + 1
            points[left] = (x, y, z)
            points[right] = (x, -y, z)
            group_of[left] = group_of[right] = k
            side_of[left], side_of[right] = 1, -1
            mirror_of[left], mirror_of[right] = right, left
        for j in range(cfg.n_unique):
            part = 2 * cfg.n_pairs + j
            z = rng.uniform(-0.6, 0.6)
            rad = math.sqrt(1.0 - z * z)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            points[part] = (rad * math.cos(ang), rad * math.sin(ang), z)
            group_of[part] = cfg.n_pairs + j
        return CategoryLayout(f"cat{ci:02d}", points, group_of, side_of,
                              mirror_of)

    def _render(self, ci: int, ii: int, layout: CategoryLayout, rng) -> SynthScene:
        cfg = self.config
        g, b = cfg.grid, cfg.blob
        # A scene with nothing visible is useless downstream (empty masks
        # cannot be matched); redraw the view until something shows.
        for _ in range(1000):
            azimuth = float(rng.uniform(0.0, 360.0))
            w = view_direction(azimuth)
            front = layout.part_points @ w > 0.0
            dropped = rng.random(cfg.parts) < cfg.unmatchable_prob
            visible = front & ~dropped
            if visible.any():
                break
        else:
            raise RuntimeError("no visible parts after 1000 view draws; "
                               "lower unmatchable_prob")
        swapped = math.sin(math.radians(azimuth)) < 0.0
        # Non-overlapping blob placement on a shuffled anchor list.
        anchors = np.full((cfg.parts, 2), -1, dtype=int)
        occupied = np.zeros((g, g), dtype=bool)
        cand = [(r, c) for r in range(g - b + 1) for c in range(g - b + 1)]
        order = rng.permutation(len(cand))
        part_grid = np.full((g, g), -1, dtype=int)
        offset_grid = np.full((g, g), -1, dtype=int)
        for part in np.flatnonzero(visible):
            placed = False
            for idx in order:
                r, c = cand[idx]
                if not occupied[r:r + b, c:c + b].any():
                    occupied[r:r + b, c:c + b] = True
                    anchors[part] = (r, c)
                    for o in range(cfg.n_offsets):
                        rr, cc = r + o // b, c + o % b
                        part_grid[rr, cc] = part
                        offset_grid[rr, cc] = o
                    placed = True
                    break
            if not placed:
                raise RuntimeError("could not place all parts; grid too small")
        # Feature synthesis. Background cells get incoherent low-amplitude
        # noise so they never mimic object cells.
        feats = rng.normal(0.0, cfg.background_sigma, (g, g, cfg.channels))
        phase = math.radians(azimuth)
        side_scale = (1.0 - cfg.confusion) * cfg.side_gain
        sign = -1.0 if swapped else 1.0
        inst_noise = rng.normal(size=(cfg.parts, 6))
        inst_noise /= np.maximum(
            np.linalg.norm(inst_noise, axis=1, keepdims=True), 1e-12)
        inst_noise = cfg.inst_sigma * (inst_noise @ self.inst_basis.T)
        for part in np.flatnonzero(visible):
            grp = layout.group_of[part]
            base = self.base_dirs[:, grp]
            side = layout.side_of[part]
            if side != 0:
                base = base + sign * side * side_scale * self.side_dirs[:, grp]
            r0, c0 = anchors[part]
            for o in range(cfg.n_offsets):
                zeta = cfg.view_noise_slope * (
                    math.cos(phase) * self.view_u[grp, o]
                    + math.sin(phase) * self.view_v[grp, o])
                f = (base + cfg.offset_gain * self.offset_dirs[:, o]
                     + zeta + inst_noise[part])
                feats[r0 + o // b, c0 + o % b] = f
        mask_bits = part_grid >= 0
        rows = np.flatnonzero(mask_bits.any(axis=1))
        colums = np.flatnonzero(mask_bits.any(axis=0))
        bbox = (float(colums[0] * PATCH_SIZE), float(rows[0] * PATCH_SIZE),
                float((colums[-1] - colums[0] + 1) * PATCH_SIZE),
                float((rows[-1] - rows[0] + 1) * PATCH_SIZE))
        rot = _rotation_for(azimuth, cfg.elevation_deg)
        image_id = f"{layout.name}_i{ii:03d}"
        record = ImageRecord(image_id=image_id, category=layout.name,
                             azimuth_deg=azimuth, rotation=rot, bbox=bbox,
                             patch_size=PATCH_SIZE)
        scene = SynthScene(
            record=record,
            fmap=FeatureMap(feats.astype(np.float32), image_id=image_id),
            mask=Mask(mask_bits),
            part_grid=part_grid, offset_grid=offset_grid, anchors=anchors,
            pose_point=rotation_to_sphere(rot), swapped=swapped,
            category_index=ci, instance_index=ii)
        return scene

    # ------------------------------------------------------------------
    # oracle

    def part_at(self, scene: SynthScene, point) -> tuple:
        """(part, offset) at a grid cell, (-1, -1) on background."""
        r, c = int(point[0]), int(point[1])
        return int(scene.part_grid[r, c]), int(scene.offset_grid[r, c])

    def correspond(self, src_id: str, tgt_id: str, points) -> tuple:
        """Oracle correspondence: targets and matchability flags.

        For each source grid point, returns the target-scene cell of the same
        part and sub-part offset, or NaN with flag False when the source cell
        is background or the part is not visible in the target. The map is an
        exact partial bijection between the two scenes.
        """
        src, tgt = self.by_id[src_id], self.by_id[tgt_id]
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        targets = np.full((len(pts), 2), np.nan)
        matchable = np.zeros(len(pts), dtype=bool)
        b = self.config.blob
        for i, (r, c) in enumerate(pts):
            part = int(src.part_grid[r, c])
            if part < 0:
                continue
            if tgt.anchors[part][0] < 0:
                continue
            o = int(src.offset_grid[r, c])
            tr, tc = tgt.anchors[part]
            targets[i] = (tr + o // b, tc + o % b)
            matchable[i] = True
        return targets, matchable

    def sphere_points_for(self, scene: SynthScene, points) -> np.ndarray:
        """True sphere coordinates of the parts under the given cells.

        Background cells get the north pole; callers normally pass masked
        points only. This is the oracle source for sphere-based rejection.
        """
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        layout = self.layouts[scene.category_index]
        out = np.zeros((len(pts), 3))
        out[:, 2] = 1.0
        for i, (r, c) in enumerate(pts):
            part = int(scene.part_grid[r, c])
            if part >= 0:
                out[i] = layout.part_points[part]
        return out

    def scenes_of(self, category: str) -> list:
        return [s for s in self.scenes if s.record.category == category]

    @property
    def records(self) -> list:
        return [s.record for s in self.scenes]


def generate(config: SynthConfig) -> SynthWorld:
    """Build the world for a config. Deterministic given ``config.seed``."""
    return SynthWorld(config)


def plant_report(world: SynthWorld) -> dict:
    """Descriptive statistics of what the generator planted.

    Reports symmetric-pair sphere separations, empirical visibility rate with
    its analytic expectation, and the expected naive cross-side error rate on
    symmetric parts implied by the planted mirror swaps.
    """
    cfg = world.config
    separations = []
    for layout in world.layouts:
        for left, right in layout.sym_pairs:
            dot = float(layout.part_points[left] @ layout.part_points[right])
            separations.append(math.acos(max(-1.0, min(1.0, dot))))
    rendered = sum(int((s.anchors[:, 0] >= 0).sum()) for s in world.scenes)
    total = len(world.scenes) * cfg.parts
    expected_rate = 0.5 * (1.0 - cfg.unmatchable_prob)
    # Expected naive flip rate on symmetric parts: a query flips sides when
    # the two scenes disagree on mirror swap, or when its own side is absent
    # from the target and the mirror side is present.
    flips, queries = 0, 0
    for layout_idx, layout in enumerate(world.layouts):
        scenes = [s for s in world.scenes if s.category_index == layout_idx]
        for a in scenes:
            for b in scenes:
                if a is b:
                    continue
                for left, right in layout.sym_pairs:
                    for part, mirror in ((left, right), (right, left)):
                        if a.anchors[part][0] < 0:
                            continue
                        queries += 1
                        same = b.anchors[part][0] >= 0
                        other = b.anchors[mirror][0] >= 0
                        if a.swapped != b.swapped:
                            if other or not same:
                                flips += int(other)
                        elif not same and other:
                            flips += 1
    return {
        "sym_separations_rad": np.array(separations),
        "min_sym_separation_rad": float(min(separations)) if separations else math.nan,
        "visibility_rate": rendered / total,
        "expected_visibility_rate": expected_rate,
        "expected_naive_flip_rate": flips / queries if queries else math.nan,
        "sym_query_count": queries,
    }
