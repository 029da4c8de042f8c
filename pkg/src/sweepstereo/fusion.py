"""Depth-map filtering by dynamic geometric consistency, and point fusion.

For a reference pixel with estimated depth, each source view contributes a
reprojection error psi (pixels) and a relative depth error phi. A view is
consistent at level mu when psi < mu/4 and phi < mu/1300. A pixel is
accepted when some mu in the configured range has strictly more than mu
consistent views AND the pixel's classification probability exceeds the
probability threshold at that mu:

    tau(mu) = 0.6 * exp((mu - 10) / 8)       (dynamic mode)
    tau(mu) = fixed_tau                      (fixed mode, the baseline)

The smallest accepting mu is reported. Note tau exceeds 1 for large mu, so
acceptance at those levels is impossible through the probability test;
this is the literal behavior of the thresholding law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraView, project, unproject
from .inference import DepthEstimate

__all__ = [
    "ConsistencyRecord",
    "FusionConfig",
    "PointCloud",
    "consistency_errors",
    "consistency_error_maps",
    "static_consistency_set",
    "dynamic_threshold",
    "dynamic_accept",
    "fixed_accept",
    "fuse",
    "save_fusion_report",
]


@dataclass
class ConsistencyRecord:
    """Geometric agreement of one source view at one reference pixel."""

    psi: float    # reprojection error, pixels
    phi: float    # relative depth error
    valid: bool   # reprojection landed inside the source image
    d_back: float = 0.0  # depth implied for the reference pixel by this view


@dataclass
class FusionConfig:
    """Thresholding law constants and fusion behavior."""

    mode: str = "dynamic"        # "dynamic" | "fixed"
    mu_min: int = 1
    mu_max: int | None = None    # default: number of source views
    prob_base: float = 0.6
    prob_scale: float = 8.0
    prob_pivot: float = 10.0
    eps_divisor: float = 4.0     # eps(mu) = mu / eps_divisor, pixels
    eta_divisor: float = 1300.0  # eta(mu) = mu / eta_divisor
    fixed_tau: float = 0.35
    average_depths: bool = True  # average ref depth with consistent d_back values

    def __post_init__(self):
        if self.mode not in ("dynamic", "fixed"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.mu_min < 1:
            raise ValueError("mu_min must be >= 1")

    def eps(self, mu: int) -> float:
        return mu / self.eps_divisor

    def eta(self, mu: int) -> float:
        return mu / self.eta_divisor

    def tau(self, mu: int) -> float:
        if self.mode == "fixed":
            return self.fixed_tau
        return dynamic_threshold(mu, self.prob_base, self.prob_scale, self.prob_pivot)


@dataclass
class PointCloud:
    """Fused 3D points with color and acceptance provenance."""

    points: np.ndarray                    # [M, 3]
    colors: np.ndarray                    # [M, 3] in [0, 1]
    source_view: np.ndarray               # [M] reference view index
    pixel: np.ndarray                     # [M, 2] (x, y) in the reference view
    mu: np.ndarray                        # [M] accepting consistency level
    per_view_accepted: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)


def dynamic_threshold(mu: int, base: float = 0.6, scale: float = 8.0,
                      pivot: float = 10.0) -> float:
    """Probability threshold tau(mu) = base * exp((mu - pivot) / scale)."""
    if mu < 1:
        raise ValueError("mu must be >= 1")
    return base * float(np.exp((mu - pivot) / scale))


def static_consistency_set(records: list[ConsistencyRecord], eps: float, eta: float) -> int:
    """|{i : psi_i < eps and phi_i < eta and valid_i}| (strict inequalities)."""
    return sum(1 for r in records if r.valid and r.psi < eps and r.phi < eta)


def fixed_accept(theta: float, records: list[ConsistencyRecord], eps: float,
                 eta: float, mu: int, tau: float) -> bool:
    """Single static-threshold test: |S| > mu and theta > tau."""
    return static_consistency_set(records, eps, eta) > mu and theta > tau


def dynamic_accept(theta: float, records: list[ConsistencyRecord],
                   config: FusionConfig) -> tuple[bool, int | None]:
    """Scan mu over the configured range; return the smallest accepting mu."""
    mu_max = config.mu_max if config.mu_max is not None else len(records)
    for mu in range(config.mu_min, mu_max + 1):
        if fixed_accept(theta, records, config.eps(mu), config.eta(mu), mu,
                        config.tau(mu)):
            return True, mu
    return False, None


# -- map-level geometry ------------------------------------------------------

def consistency_error_maps(ref_depth: np.ndarray, ref: CameraView, src: CameraView,
                           src_depth: np.ndarray):
    """Vectorized two-view round trip for every reference pixel.

    Returns (psi [H, W], phi [H, W], valid [H, W], d_back [H, W]). Source
    depth is looked up at the nearest pixel (not interpolated) to avoid
    mixing depths across discontinuities; the round trip unprojects the
    continuous reprojected coordinate at that depth.
    """
    h, w = ref_depth.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([xs, ys], axis=-1)
    depth_ok = ref_depth > 0
    safe_depth = np.where(depth_ok, ref_depth, 1.0)
    world = unproject(pix, safe_depth, ref)
    q, d_proj = project(world, src)
    qx = np.rint(q[..., 0]).astype(np.int64)
    qy = np.rint(q[..., 1]).astype(np.int64)
    sh, sw = src_depth.shape
    inside = (qx >= 0) & (qx < sw) & (qy >= 0) & (qy < sh)
    valid = depth_ok & (d_proj > 0) & inside
    d_src = src_depth[np.clip(qy, 0, sh - 1), np.clip(qx, 0, sw - 1)]
    valid &= d_src > 0
    back_world = unproject(q, np.where(valid, d_src, 1.0), src)
    p_back, d_back = project(back_world, ref)
    psi = np.linalg.norm(p_back - pix, axis=-1)
    phi = np.abs(d_back - ref_depth) / safe_depth
    psi = np.where(valid, psi, np.inf)
    phi = np.where(valid, phi, np.inf)
    return psi, phi, valid, d_back


def consistency_errors(p: tuple[int, int], ref_depth: DepthEstimate, ref: CameraView,
                       src: CameraView, src_depth: DepthEstimate) -> ConsistencyRecord:
    """Per-pixel form of :func:`consistency_error_maps` (p is (x, y))."""
    x, y = p
    d = float(ref_depth.depth[y, x])
    if d <= 0:
        return ConsistencyRecord(psi=np.inf, phi=np.inf, valid=False)
    pix = np.array([x, y], dtype=np.float64)
    world = unproject(pix, d, ref)
    q, d_proj = project(world, src)
    qx, qy = int(np.rint(q[0])), int(np.rint(q[1]))
    sh, sw = src_depth.depth.shape
    if d_proj <= 0 or not (0 <= qx < sw and 0 <= qy < sh):
        return ConsistencyRecord(psi=np.inf, phi=np.inf, valid=False)
    d_src = float(src_depth.depth[qy, qx])
    if d_src <= 0:
        return ConsistencyRecord(psi=np.inf, phi=np.inf, valid=False)
    back_world = unproject(q, d_src, src)
    p_back, d_back = project(back_world, ref)
    psi = float(np.linalg.norm(p_back - pix))
    phi = float(abs(d_back - d) / d)
    return ConsistencyRecord(psi=psi, phi=phi, valid=True, d_back=float(d_back))


# -- acceptance over whole maps ------------------------------------------------

def _accept_maps(theta: np.ndarray, psi: np.ndarray, phi: np.ndarray,
                 valid: np.ndarray, config: FusionConfig):
    """Vectorized mu-scan. psi/phi/valid are stacked [V, H, W].

    Returns (accepted [H, W], mu_at_accept [H, W], member [V, H, W]) where
    member marks the views of the consistency set at the accepting mu.
    """
    v, h, w = psi.shape
    mu_max = config.mu_max if config.mu_max is not None else v
    accepted = np.zeros((h, w), dtype=bool)
    mu_map = np.zeros((h, w), dtype=np.int64)
    member = np.zeros((v, h, w), dtype=bool)
    for mu in range(config.mu_min, mu_max + 1):
        ok = valid & (psi < config.eps(mu)) & (phi < config.eta(mu))
        count = ok.sum(axis=0)
        hit = (~accepted) & (count > mu) & (theta > config.tau(mu))
        if hit.any():
            accepted |= hit
            mu_map[hit] = mu
            member |= ok & hit[None]
    return accepted, mu_map, member


def _fuse_one_reference(r: int, views, estimates, config: FusionConfig):
    """Acceptance + unprojection for one reference view (order-independent)."""
    ref, est = views[r], estimates[r]
    psi, phi, valid, d_back = [], [], [], []
    for s, (src, src_est) in enumerate(zip(views, estimates)):
        if s == r:
            continue
        out = consistency_error_maps(est.depth, ref, src, src_est.depth)
        psi.append(out[0])
        phi.append(out[1])
        valid.append(out[2])
        d_back.append(out[3])
    psi, phi = np.stack(psi), np.stack(phi)
    valid, d_back = np.stack(valid), np.stack(d_back)
    accepted, mu_map, member = _accept_maps(est.probability, psi, phi, valid, config)
    if not accepted.any():
        return 0, None
    ys, xs = np.nonzero(accepted)
    depth = est.depth[ys, xs]
    if config.average_depths:
        m = member[:, ys, xs]
        back = np.where(m, d_back[:, ys, xs], 0.0)
        depth = (depth + back.sum(axis=0)) / (1.0 + m.sum(axis=0))
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    pts = unproject(pix, depth, ref)
    colors = ref.image[:, ys, xs].T
    return int(accepted.sum()), (pts, colors, pix, mu_map[ys, xs])


def fuse(views: list[CameraView], estimates: list[DepthEstimate],
         config: FusionConfig | None = None, workers: int = 1) -> PointCloud:
    """Filter every view's depth map and fuse survivors into one cloud.

    Each view serves as reference once; its pixels are tested against all
    other views. Accepted pixels unproject along their own ray (optionally
    at the mean of the reference depth and the consistent views' implied
    depths) and take the reference image color. Reference views are
    independent, so they may be processed by ``workers`` threads; results
    are collected in view order, keeping the output deterministic.
    """
    config = config or FusionConfig()
    if len(views) != len(estimates):
        raise ValueError(f"{len(views)} views but {len(estimates)} depth maps")
    if len(views) < 2:
        raise ValueError("fusion needs at least two views")
    for v, e in zip(views, estimates):
        if e.depth.shape != (v.height, v.width):
            raise ValueError(f"depth map shape {e.depth.shape} does not match "
                             f"image {(v.height, v.width)}")
    n_src = len(views) - 1
    if config.mu_max is not None and config.mu_max > n_src:
        raise ValueError(f"mu_max {config.mu_max} exceeds source count {n_src}")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda r: _fuse_one_reference(r, views, estimates, config),
                range(len(views))))
    else:
        results = [_fuse_one_reference(r, views, estimates, config)
                   for r in range(len(views))]

    all_pts, all_cols, all_views, all_pix, all_mu = [], [], [], [], []
    per_view: dict[int, int] = {}
    for r, (count, payload) in enumerate(results):
        per_view[r] = count
        if payload is None:
            continue
        pts, colors, pix, mus = payload
        all_pts.append(pts)
        all_cols.append(colors)
        all_views.append(np.full(len(pts), r, dtype=np.int64))
        all_pix.append(pix)
        all_mu.append(mus)

    if not all_pts:
        z3 = np.zeros((0, 3))
        return PointCloud(points=z3, colors=z3.copy(),
                          source_view=np.zeros(0, dtype=np.int64),
                          pixel=np.zeros((0, 2)), mu=np.zeros(0, dtype=np.int64),
                          per_view_accepted=per_view)
    return PointCloud(points=np.concatenate(all_pts),
                      colors=np.concatenate(all_cols),
                      source_view=np.concatenate(all_views),
                      pixel=np.concatenate(all_pix),
                      mu=np.concatenate(all_mu),
                      per_view_accepted=per_view)


def save_fusion_report(path, cloud: PointCloud, config: FusionConfig) -> None:
    """Structured-text summary: per-view accepted counts and the mu histogram."""
    mus, counts = np.unique(cloud.mu, return_counts=True) if len(cloud) else ([], [])
    report = {
        "mode": config.mode,
        "total_points": len(cloud),
        "per_view_accepted": {str(k): v for k, v in sorted(cloud.per_view_accepted.items())},
        "mu_histogram": {str(int(m)): int(c) for m, c in zip(mus, counts)},
    }
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
