"""Pinhole cameras, inverse-depth plane sampling, and plane-induced warping.

Conventions (fixed once, everywhere):

* A camera maps a world point X to pixel coordinates via
  ``x ~ K (R X + t)``; depth is the camera-frame z component.
* Pixel (x, y) samples the continuous image coordinate (x, y); bilinear
  sampling uses a zero border with a validity mask.
* The reference camera's frame doubles as the world frame for plane-sweep
  purposes; relative pose to a source view is computed as
  ``R_rel = R_src R_ref^T`` and ``t_rel = t_src - R_rel t_ref``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import Tensor

__all__ = [
    "CameraView",
    "DepthHypothesisSet",
    "GeometryError",
    "sample_inverse_depth",
    "relative_pose",
    "plane_homography",
    "warp_features",
    "project",
    "unproject",
    "pixel_grid",
    "save_scene_manifest",
    "load_scene_manifest",
]


class GeometryError(ValueError):
    """Invalid camera parameters or depth configuration."""


@dataclass
class CameraView:
    """One calibrated view: intrinsics, pose, image, and its depth range.

    ``image`` is a [3, H, W] float array in [0, 1]. ``R``/``t`` map world
    points into the camera frame.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image: np.ndarray
    d_min: float = 0.0
    d_max: float = 0.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.image = np.asarray(self.image, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise GeometryError("rotation determinant is not +1")
        if abs(self.K[1, 0]) > 1e-12 or abs(self.K[2, 0]) > 1e-12 or abs(self.K[2, 1]) > 1e-12:
            raise GeometryError("intrinsics must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise GeometryError(f"image must be [3, H, W], got {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass
class DepthHypothesisSet:
    """Strictly increasing depth values whose reciprocals are uniform."""

    d_min: float
    d_max: float
    values: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.values)

    def spacing_at(self, depth: float) -> float:
        """Local plane spacing around ``depth`` (width of the nearest gap)."""
        j = int(np.clip(np.searchsorted(self.values, depth), 1, self.count - 1))
        return float(self.values[j] - self.values[j - 1])

    def nearest_index(self, depth) -> np.ndarray:
        """Index of the hypothesis nearest to ``depth`` in inverse-depth space."""
        inv_min, inv_max = 1.0 / self.d_min, 1.0 / self.d_max
        step = (inv_max - inv_min) / (self.count - 1)
        j = np.rint((1.0 / np.asarray(depth, dtype=np.float64) - inv_min) / step)
        return np.clip(j, 0, self.count - 1).astype(np.int64)


def sample_inverse_depth(d_min: float, d_max: float, count: int) -> DepthHypothesisSet:
    """Sample ``count`` depths from d_min to d_max uniformly in 1/d."""
    if not (0 < d_min < d_max):
        raise GeometryError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if count < 2:
        raise GeometryError("need at least two depth hypotheses")
    recip = np.linspace(1.0 / d_min, 1.0 / d_max, count)
    values = 1.0 / recip
    values[0], values[-1] = d_min, d_max
    return DepthHypothesisSet(d_min=d_min, d_max=d_max, values=values)


def relative_pose(ref: CameraView, src: CameraView):
    r_rel = src.R @ ref.R.T
    t_rel = src.t - r_rel @ ref.t
    return r_rel, t_rel


def plane_homography(ref: CameraView, src: CameraView, depth: float) -> np.ndarray:
    """Homography mapping reference pixels to source pixels via the
    fronto-parallel plane at ``depth`` in the reference frame."""
    if depth <= 0:
        raise GeometryError("plane depth must be positive")
    if abs(np.linalg.det(ref.K)) < 1e-12 or abs(np.linalg.det(src.K)) < 1e-12:
        raise GeometryError("singular intrinsics")
    r_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    return src.K @ (r_rel + np.outer(t_rel, n) / depth) @ np.linalg.inv(ref.K)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Homogeneous pixel coordinates, shape [3, h, w]."""
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([xs, ys, np.ones_like(xs)])


def warp_features(src_feat: Tensor, homography: np.ndarray,
                  grid: np.ndarray | None = None):
    """Warp source features onto the reference grid through ``homography``.

    Returns (warped Tensor[C, H, W], valid mask ndarray[1, H, W]); samples
    that fall outside the source image are zero with mask 0. Differentiable
    w.r.t. ``src_feat``.
    """
    c, h, w = src_feat.shape
    if grid is None:
        grid = pixel_grid(h, w)
    q = np.tensordot(homography, grid, axes=1)
    z = q[2]
    # Points projecting behind the source camera are never valid samples.
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    px = np.where(z > 0, q[0] / safe, -1e9)
    py = np.where(z > 0, q[1] / safe, -1e9)
    return ops.bilinear_sample(src_feat, px, py)


def project(points: np.ndarray, cam: CameraView):
    """Project world points [..., 3] to (pixels [..., 2], depths [...])."""
    p = np.asarray(points, dtype=np.float64)
    y = p @ cam.R.T + cam.t
    depth = y[..., 2]
    safe = np.where(np.abs(depth) < 1e-300, 1e-300, depth)
    uvw = y @ cam.K.T
    pix = uvw[..., :2] / safe[..., None]
    return pix, depth


def unproject(pixels: np.ndarray, depths: np.ndarray, cam: CameraView) -> np.ndarray:
    """Lift pixels [..., 2] at positive ``depths`` to world points [..., 3]."""
    d = np.asarray(depths, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("unproject requires positive depth")
    pix = np.asarray(pixels, dtype=np.float64)
    ones = np.ones(pix.shape[:-1] + (1,))
    hom = np.concatenate([pix, ones], axis=-1)
    ray = hom @ np.linalg.inv(cam.K).T
    return (ray * d[..., None] - cam.t) @ cam.R


# -- scene manifest -------------------------------------------------------

def save_scene_manifest(path, views: list[CameraView], image_paths: list[str],
                        extra: dict | None = None) -> None:
    """Write the JSON scene manifest describing every view's camera."""
    doc = {
        "views": [
            {
                "K": v.K.reshape(-1).tolist(),
                "R": v.R.reshape(-1).tolist(),
                "t": v.t.tolist(),
                "image_path": ip,
                "d_min": v.d_min,
                "d_max": v.d_max,
            }
            for v, ip in zip(views, image_paths)
        ],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_scene_manifest(path) -> list[CameraView]:
    """Load and validate a scene manifest; images load from ``image_path``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise GeometryError(f"cannot read scene manifest {path}: {e}") from e
    views = []
    for i, entry in enumerate(doc.get("views", [])):
        try:
            img_path = path.parent / entry["image_path"]
            image = np.load(img_path)
            views.append(CameraView(
                K=np.asarray(entry["K"]).reshape(3, 3),
                R=np.asarray(entry["R"]).reshape(3, 3),
                t=np.asarray(entry["t"]),
                image=image,
                d_min=float(entry["d_min"]),
                d_max=float(entry["d_max"]),
            ))
        except KeyError as e:
            raise GeometryError(f"view {i} in {path} is missing field {e}") from e
        except OSError as e:
            raise GeometryError(f"view {i}: cannot load image: {e}") from e
    if not views:
        raise GeometryError(f"{path} contains no views")
    return views
