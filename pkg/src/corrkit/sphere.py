"""Spherical viewpoint prior: pose conversion, mapping, loss, and rejection.

Viewpoints live on the unit two-sphere. A camera rotation is converted to the
sphere point its optical axis hits; a small learned mapper sends feature
vectors to sphere points; matches whose two mapped endpoints are geodesically
far apart get rejected. The mapper is trained so that dot products of
per-image mapped means reproduce dot products of the true pose points.

All gradients here are written out by hand; there is no autodiff anywhere in
this package. Arrays of sphere points are plain (N, 3) float64 arrays with
unit rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filters import FilterReport
from .matching import MatchSet

DEFAULT_THETA_TH = 0.15 * math.pi


@dataclass(frozen=True)
class SpherePoint:
    """A point on the unit sphere, held as a unit 3-vector.

    ``theta`` is the polar angle arccos(z) in [0, pi]; ``phi`` the azimuth
    atan2(y, x), defined as 0 at the poles.
    """

    vec: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vec, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"sphere point must be unit norm, got {n}")
        v = v / n
        v.flags.writeable = False
        object.__setattr__(self, "vec", v)

    @property
    def theta(self) -> float:
        return float(np.arccos(np.clip(self.vec[2], -1.0, 1.0)))

    @property
    def phi(self) -> float:
        x, y, z = self.vec
        if abs(abs(z) - 1.0) < 1e-12:
            return 0.0
        return float(np.arctan2(y, x))

    @classmethod
    def from_angles(cls, theta: float, phi: float) -> "SpherePoint":
        st = math.sin(theta)
        return cls(np.array([st * math.cos(phi), st * math.sin(phi),
                             math.cos(theta)]))


def rotation_to_sphere(rotation: np.ndarray) -> SpherePoint:
    """Sphere point hit by the rotated optical axis ``R @ (0, 0, 1)``."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise ValueError("rotation must be orthonormal")
    if not np.isclose(np.linalg.det(r), 1.0, atol=1e-6):
        raise ValueError("rotation must have determinant +1")
    return SpherePoint(r @ np.array([0.0, 0.0, 1.0]))


def _as_points(p) -> np.ndarray:
    if isinstance(p, SpherePoint):
        return p.vec.reshape(1, 3)
    return np.asarray(p, dtype=np.float64).reshape(-1, 3)


def geodesic(a, b) -> float:
    """Great-circle angle between two unit vectors, in [0, pi]."""
    va, vb = _as_points(a)[0], _as_points(b)[0]
    return float(np.arccos(np.clip(va @ vb, -1.0, 1.0)))


def geodesic_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise great-circle angles between two (N, 3) unit-vector arrays."""
    a, b = _as_points(a), _as_points(b)
    if a.shape != b.shape:
        raise ValueError("point arrays must have matching shapes")
    return np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0))


def mean_on_sphere(points, mask_weights=None) -> SpherePoint:
    """Normalized (optionally weighted) arithmetic mean of unit vectors.

    Raises on an empty input or a perfectly balanced set whose Euclidean
    mean is zero, where no direction is preferred.
    """
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("mean of empty point set")
    if mask_weights is None:
        m = pts.mean(axis=0)
    else:
        w = np.asarray(mask_weights, dtype=np.float64).reshape(-1)
        if len(w) != len(pts):
            raise ValueError("weights length mismatch")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        m = (w[:, None] * pts).sum(axis=0) / w.sum()
    n = float(np.linalg.norm(m))
    if n < 1e-12:
        raise ValueError("degenerate mean")
    return SpherePoint(m / n)


def sphere_reject(ms: MatchSet, src_sphere: np.ndarray, tgt_sphere: np.ndarray,
                  theta_th: float = DEFAULT_THETA_TH) -> tuple[MatchSet, FilterReport]:
    """Drop matches whose mapped endpoints are further than ``theta_th`` apart.

    ``src_sphere`` and ``tgt_sphere`` are (N, 3) unit-vector arrays aligned
    index-wise with the matches. A match is kept iff the geodesic angle
    between its two sphere points is at most ``theta_th``.
    """
    src_sphere, tgt_sphere = _as_points(src_sphere), _as_points(tgt_sphere)
    if len(src_sphere) != len(ms) or len(tgt_sphere) != len(ms):
        raise ValueError("sphere point arrays must align with matches")
    if len(ms) == 0:
        return ms, FilterReport(0, 0, 0)
    ang = geodesic_many(src_sphere, tgt_sphere)
    keep = ang <= theta_th
    kept = ms.take(np.flatnonzero(keep))
    return kept, FilterReport(len(ms), len(kept), int(np.sum(~keep)),
                              {"sphere_distance": int(np.sum(~keep))})


def sphere_loss(mapped_mean_pairs, pose_pairs) -> float:
    """Sum of squared dot-product residuals over an image-pair batch.

    ``mapped_mean_pairs`` and ``pose_pairs`` are sequences of (unit-vector,
    unit-vector) pairs; each pair contributes
    ``(pose . pose' - mapped . mapped')**2``. Empty batch gives 0.
    """
    total = 0.0
    for (mu_a, mu_b), (psi_a, psi_b) in zip(mapped_mean_pairs, pose_pairs):
        mu_a, mu_b = _as_points(mu_a)[0], _as_points(mu_b)[0]
        psi_a, psi_b = _as_points(psi_a)[0], _as_points(psi_b)[0]
        r = float(psi_a @ psi_b) - float(mu_a @ mu_b)
        total += r * r
    return total


def quantize_pose(point, bin_width_deg: float = 45.0) -> SpherePoint:
    """Snap a pose point's azimuth to its bin center, keeping the polar angle."""
    p = point if isinstance(point, SpherePoint) else SpherePoint(np.asarray(point))
    width = math.radians(bin_width_deg)
    phi = p.phi % (2.0 * math.pi)
    snapped = (math.floor(phi / width) + 0.5) * width
    return SpherePoint.from_angles(p.theta, snapped)


class SphereMapper:
    """Two-hidden-layer tanh network from feature vectors to unit 3-vectors.

    Forward: y = normalize(W3 tanh(W2 tanh(W1 x + b1) + b2) + b3). Gradients
    for the pose-correlation loss are computed analytically in
    :meth:`loss_and_grad`.
    """

    def __init__(self, in_dim: int, hidden: tuple = (256, 256), seed: int = 0):
        if in_dim <= 0 or any(h <= 0 for h in hidden) or len(hidden) != 2:
            raise ValueError("need positive in_dim and two positive hidden sizes")
        rng = np.random.default_rng(seed)
        d1, d2 = hidden
        # Xavier-style scales keep tanh preactivations in range at init.
        self.w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (d1, in_dim))
        self.b1 = np.zeros(d1)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(d1), (d2, d1))
        self.b2 = np.zeros(d2)
        self.w3 = rng.normal(0.0, 1.0 / math.sqrt(d2), (3, d2))
        self.b3 = np.zeros(3)
        self.in_dim = in_dim
        self.hidden = (d1, d2)

    # parameter names in a fixed order, used by flat packing and checkpoints
    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.PARAM_NAMES}

    def params_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.PARAM_NAMES])

    def set_params_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for n in self.PARAM_NAMES:
            arr = getattr(self, n)
            cnt = arr.size
            setattr(self, n, vec[off:off + cnt].reshape(arr.shape).copy())
            off += cnt
        if off != vec.size:
            raise ValueError("parameter vector length mismatch")

    def _forward_cached(self, feats: np.ndarray) -> dict:
        x = np.asarray(feats, dtype=np.float64).reshape(-1, self.in_dim)
        h1 = np.tanh(x @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        u = h2 @ self.w3.T + self.b3
        norms = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
        y = u / norms
        return {"x": x, "h1": h1, "h2": h2, "u": u, "norms": norms, "y": y}

    def map_points(self, feats: np.ndarray) -> np.ndarray:
        """Map feature vectors to unit sphere points, shape (N, 3)."""
        if len(np.atleast_2d(feats)) == 0:
            return np.empty((0, 3))
        return self._forward_cached(feats)["y"]

    def _zero_grads(self) -> dict:
        return {n: np.zeros_like(getattr(self, n)) for n in self.PARAM_NAMES}

    def _backprop_points(self, cache: dict, dy: np.ndarray, grads: dict) -> None:
        """Accumulate parameter grads given dLoss/d(mapped points)."""
        y, u, norms = cache["y"], cache["u"], cache["norms"]
        # Through normalization: du = (dy - (dy.y) y) / |u|
        du = (dy - np.sum(dy * y, axis=1, keepdims=True) * y) / norms
        grads["w3"] += du.T @ cache["h2"]
        grads["b3"] += du.sum(axis=0)
        dh2 = du @ self.w3
        dp2 = dh2 * (1.0 - cache["h2"] ** 2)
        grads["w2"] += dp2.T @ cache["h1"]
        grads["b2"] += dp2.sum(axis=0)
        dh1 = dp2 @ self.w2
        dp1 = dh1 * (1.0 - cache["h1"] ** 2)
        grads["w1"] += dp1.T @ cache["x"]
        grads["b1"] += dp1.sum(axis=0)

    def loss_and_grad(self, pair_batch, hemisphere_weight: float = 0.0):
        """Pose-correlation loss and analytic parameter gradients.

        ``pair_batch`` is a sequence of dicts with keys ``feats_a``,
        ``feats_b`` (arrays of feature vectors), optional ``weights_a``,
        ``weights_b``, and ``pose_a``, ``pose_b`` (unit 3-vectors). Each pair
        contributes ``(pose_a . pose_b - mu_a . mu_b)**2`` where ``mu`` is the
        normalized weighted mean of the mapped points. With
        ``hemisphere_weight > 0`` a term ``w * max(0, -mu . pose)**2`` per
        image pins the global orientation. Returns ``(loss, grads)``.
        """
        grads = self._zero_grads()
        total = 0.0
        for pair in pair_batch:
            sides = []
            for s in ("a", "b"):
                feats = np.asarray(pair[f"feats_{s}"], dtype=np.float64)
                w = pair.get(f"weights_{s}")
                cache = self._forward_cached(feats)
                y = cache["y"]
                if w is None:
                    w = np.ones(len(y))
                else:
                    w = np.asarray(w, dtype=np.float64).reshape(-1)
                wsum = w.sum()
                if wsum <= 0:
                    raise ValueError("weights must have positive sum")
                m = (w[:, None] * y).sum(axis=0) / wsum
                mn = float(np.linalg.norm(m))
                if mn < 1e-12:
                    raise ValueError("degenerate mean")
                mu = m / mn
                psi = _as_points(pair[f"pose_{s}"])[0]
                sides.append({"cache": cache, "w": w, "wsum": wsum,
                              "m": m, "mn": mn, "mu": mu, "psi": psi})
            a, b = sides
            r = float(a["psi"] @ b["psi"]) - float(a["mu"] @ b["mu"])
            total += r * r
            for side, other in ((a, b), (b, a)):
                dmu = -2.0 * r * other["mu"]
                if hemisphere_weight > 0.0:
                    dot = float(side["mu"] @ side["psi"])
                    if dot < 0.0:
                        total += hemisphere_weight * dot * dot
                        dmu = dmu + 2.0 * hemisphere_weight * dot * side["psi"]
                # Through mean normalization, then spread over points.
                dm = (dmu - float(dmu @ side["mu"]) * side["mu"]) / side["mn"]
                dy = (side["w"][:, None] / side["wsum"]) * dm[None, :]
                self._backprop_points(side["cache"], dy, grads)
        return total, grads
