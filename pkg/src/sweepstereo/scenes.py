"""Synthetic multi-view scenes with exact raycast ground truth.

Scenes are built from analytic primitives (fronto-parallel planes, spheres,
a two-level stepped background) in the world frame, which coincides with
the first camera's frame. Cameras form a pure-translation rig, so
ground-truth depth maps of different views are exactly consistent on
fronto-parallel geometry. Surfaces carry band-limited procedural value
noise evaluated at the 3D hit point (hence photoconsistent across views)
with Lambertian shading and a contrast floor so matching is well posed.

Everything is a pure function of (spec, seed): regeneration is bitwise
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraView, load_scene_manifest, save_scene_manifest
from .inference import load_depth_map, save_depth_map

__all__ = ["SceneSpec", "SyntheticScene", "generate_scene", "save_scene", "load_scene"]


@dataclass
class SceneSpec:
    """Declarative description of a synthetic scene and its camera rig."""

    kind: str = "plane-sphere"  # "plane" | "sphere" | "plane-sphere" | "two-level"
    n_views: int = 7
    height: int = 64
    width: int = 64
    baseline: float = 20.0      # horizontal camera spacing, scene units
    d_min: float = 425.0
    d_max: float = 905.0
    focal: float | None = None  # pixels; default 1.2 * width
    plane_depth: float | None = None
    sphere_depth: float | None = None
    sphere_radius: float | None = None
    texture_octaves: int = 4
    texture_scale: float = 60.0
    contrast_floor: float = 0.3
    cloud_stride: int = 2       # GT-cloud subsampling stride over pixels

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("a scene needs at least two views")
        if self.kind not in ("plane", "sphere", "plane-sphere", "two-level"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.baseline <= 0:
            raise ValueError("degenerate camera rig: baseline must be positive")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    views: list[CameraView]
    gt_depth: list[np.ndarray] = field(repr=False)
    gt_mask: list[np.ndarray] = field(repr=False)
    gt_cloud: np.ndarray = field(repr=False)


# -- procedural texture -----------------------------------------------------

def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1) (splitmix-style mixing)."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _lattice_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Trilinearly interpolated value noise on the unit lattice."""
    p0 = np.floor(points)
    f = points - p0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    i = p0.astype(np.int64)
    out = np.zeros(points.shape[:-1])
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                v = _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
                out += wx * wy * wz * v
    return out


def _value_noise(points: np.ndarray, seed: int, octaves: int, base_scale: float) -> np.ndarray:
    total = np.zeros(points.shape[:-1])
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        total += amp * _lattice_noise(points / (base_scale / 2 ** o), seed + 101 * o)
        norm += amp
        amp *= 0.55
    return total / norm


# -- primitives -------------------------------------------------------------

class _Plane:
    """Fronto-parallel plane z = depth, optionally restricted to x < edge."""

    def __init__(self, depth, color, x_max=None):
        self.depth, self.color, self.x_max = depth, np.asarray(color), x_max
        self.normal = np.array([0.0, 0.0, -1.0])

    def intersect(self, origin, dirs):
        denom = dirs[..., 2]
        t = np.where(np.abs(denom) > 1e-12, (self.depth - origin[2]) / denom, np.inf)
        if self.x_max is not None:
            hit_x = origin[0] + t * dirs[..., 0]
            t = np.where(hit_x < self.x_max, t, np.inf)
        return t

    def normal_at(self, pts):
        return np.broadcast_to(self.normal, pts.shape)


class _Sphere:
    def __init__(self, center, radius, color):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.color = np.asarray(color)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t = np.where(t1 > 1e-9, t1, t2)
        return np.where(ok & (t > 1e-9), t, np.inf)

    def normal_at(self, pts):
        return (pts - self.center) / self.radius


def _build_primitives(spec: SceneSpec):
    mid = 0.5 * (spec.d_min + spec.d_max)
    span = spec.d_max - spec.d_min
    plane_d = spec.plane_depth if spec.plane_depth is not None else mid + 0.25 * span
    sphere_d = spec.sphere_depth if spec.sphere_depth is not None else mid - 0.15 * span
    sphere_r = spec.sphere_radius if spec.sphere_radius is not None else 0.16 * mid
    if spec.kind == "plane":
        return [_Plane(plane_d, (0.8, 0.8, 0.9))]
    if spec.kind == "sphere":
        return [_Plane(plane_d, (0.75, 0.8, 0.9)),
                _Sphere((0.0, 0.0, sphere_d), sphere_r, (0.95, 0.75, 0.55))]
    if spec.kind == "plane-sphere":
        return [_Plane(plane_d, (0.7, 0.8, 0.95)),
                _Sphere((0.0, 0.0, sphere_d), sphere_r, (0.95, 0.7, 0.5))]
    # two-level: a nearer half-plane stepped in front of a far backdrop
    near_d = mid - 0.2 * span
    return [_Plane(plane_d, (0.7, 0.75, 0.95)),
            _Plane(near_d, (0.95, 0.8, 0.55), x_max=0.0)]


# -- rendering ----------------------------------------------------------------

def _make_rig(spec: SceneSpec) -> list[CameraView]:
    f = spec.focal if spec.focal is not None else 1.2 * spec.width
    K = np.array([[f, 0.0, (spec.width - 1) / 2.0],
                  [0.0, f, (spec.height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    views = []
    for i in range(spec.n_views):
        cx = (i - (spec.n_views - 1) / 2.0) * spec.baseline
        center = np.array([cx, 0.0, 0.0])
        R = np.eye(3)
        t = -R @ center
        img = np.zeros((3, spec.height, spec.width))
        views.append(CameraView(K=K, R=R, t=t, image=img,
                                d_min=spec.d_min, d_max=spec.d_max))
    return views


def _raycast(view: CameraView, prims):
    """Per-pixel (depth, hit point, primitive index); misses get depth=0/mask 0."""
    h, w = view.height, view.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    dirs = pix @ np.linalg.inv(view.K).T @ view.R  # camera-frame z of a hit = ray parameter
    origin = view.center()
    best = np.full((h, w), np.inf)
    winner = np.full((h, w), -1, dtype=np.int64)
    for pi, prim in enumerate(prims):
        t = prim.intersect(origin, dirs)
        better = t < best
        best = np.where(better, t, best)
        winner = np.where(better, pi, winner)
    mask = np.isfinite(best)
    depth = np.where(mask, best, 0.0)
    pts = origin + depth[..., None] * dirs
    return depth, mask, winner, pts


def _shade(spec: SceneSpec, seed: int, prims, pts, winner, mask) -> np.ndarray:
    light = np.array([0.35, -0.45, 0.82])
    light = light / np.linalg.norm(light)
    noise = _value_noise(pts, seed, spec.texture_octaves, spec.texture_scale)
    tex = spec.contrast_floor + (1.0 - spec.contrast_floor) * noise
    img = np.zeros(pts.shape[:-1] + (3,))
    for pi, prim in enumerate(prims):
        sel = mask & (winner == pi)
        if not sel.any():
            continue
        n = prim.normal_at(pts[sel])
        # surfaces face the cameras; flip normals toward -z if needed
        n = np.where(n[..., 2:3] > 0, -n, n)
        lambert = np.clip(-(n @ light), 0.0, None)
        shade = 0.45 + 0.55 * lambert
        img[sel] = prim.color * (tex[sel] * shade)[:, None]
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Raycast every view of the rig against the scene's primitives."""
    prims = _build_primitives(spec)
    views = _make_rig(spec)
    depths, masks = [], []
    cloud_pts = []
    for view in views:
        depth, mask, winner, pts = _raycast(view, prims)
        view.image = _shade(spec, seed, prims, pts, winner, mask)
        depths.append(depth)
        masks.append(mask)
        stride = max(1, spec.cloud_stride)
        sel = mask[::stride, ::stride]
        cloud_pts.append(pts[::stride, ::stride][sel])
    cloud = np.concatenate(cloud_pts, axis=0)
    return SyntheticScene(spec=spec, seed=seed, views=views, gt_depth=depths,
                          gt_mask=masks, gt_cloud=cloud)


# -- on-disk layout ------------------------------------------------------------

def save_scene(scene: SyntheticScene, out_dir) -> None:
    """Write manifest, per-view images (npy), GT depth maps, and GT cloud."""
    from .ply import save_ply  # local import to keep module deps one-way

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_paths = []
    for i, view in enumerate(scene.views):
        name = f"image_{i:04d}.npy"
        np.save(out / name, view.image)
        image_paths.append(name)
        save_depth_map(out / f"gt_depth_{i:04d}.nr2d", scene.gt_depth[i],
                       scene.gt_mask[i].astype(np.float64))
    save_scene_manifest(out / "manifest.json", scene.views, image_paths,
                        extra={"spec": asdict(scene.spec), "seed": scene.seed})
    save_ply(out / "gt_cloud.ply", scene.gt_cloud, binary=True)


def load_scene(path) -> SyntheticScene:
    """Load a scene directory written by :func:`save_scene`."""
    from .ply import load_ply

    path = Path(path)
    doc = json.loads((path / "manifest.json").read_text())
    views = load_scene_manifest(path / "manifest.json")
    spec = SceneSpec(**doc["spec"]) if "spec" in doc else SceneSpec(
        n_views=len(views), height=views[0].height, width=views[0].width)
    depths, masks = [], []
    for i in range(len(views)):
        gt_path = path / f"gt_depth_{i:04d}.nr2d"
        if gt_path.exists():
            d, m = load_depth_map(gt_path)
            depths.append(d)
            masks.append(m > 0.5)
        else:
            depths.append(np.zeros((views[i].height, views[i].width)))
            masks.append(np.zeros((views[i].height, views[i].width), dtype=bool))
    cloud_path = path / "gt_cloud.ply"
    cloud = load_ply(cloud_path)[0] if cloud_path.exists() else np.zeros((0, 3))
    return SyntheticScene(spec=spec, seed=int(doc.get("seed", 0)), views=views,
                          gt_depth=depths, gt_mask=masks, gt_cloud=cloud)
