"""A scikit-learn style estimator facade over the depth pipeline.

``DepthMapEstimator`` follows the fit/predict/get_params contract (duck
typed; ``sklearn.base.clone`` works without importing sklearn here), so the
trainable depth network composes with the wider ecosystem. Samples are
synthetic scenes (anything exposing ``views``, ``gt_depth``, ``gt_mask``):
``fit`` trains on every non-held-out reference view, ``predict`` maps
(scene, reference-index) pairs to depth estimates.
"""

from __future__ import annotations

import inspect

import numpy as np

from .inference import DepthEstimate, TrainConfig, infer_depth, train
from .network import DepthNetwork, NetworkConfig

__all__ = ["DepthMapEstimator", "NotFittedError"]


class NotFittedError(RuntimeError):
    """predict/score called before fit."""


def _check_scene(scene, index: int) -> None:
    for attr in ("views", "gt_depth", "gt_mask"):
        if not hasattr(scene, attr):
            raise TypeError(f"scene #{index} lacks required attribute {attr!r}")
    if len(scene.views) < 2:
        raise ValueError(f"scene #{index} needs at least two views")
    h, w = scene.views[0].height, scene.views[0].width
    if h % 4 or w % 4:
        raise ValueError(f"scene #{index}: image extents must be divisible by 4")
    for v in scene.views:
        if (v.height, v.width) != (h, w):
            raise ValueError(f"scene #{index}: views disagree on image size")


def _as_scene_list(X) -> list:
    scenes = X if isinstance(X, (list, tuple)) else [X]
    for i, s in enumerate(scenes):
        _check_scene(s, i)
    return list(scenes)


class DepthMapEstimator:
    """Trainable multi-view depth estimator with an sklearn-shaped API.

    Parameters mirror the network and training configuration; they are
    stored verbatim (sklearn convention) and only interpreted inside
    ``fit``.
    """

    def __init__(self, depth_planes: int = 32, block_size: int = 8,
                 epochs: int = 10, learning_rate: float = 1e-3,
                 crop: int | None = 32, seed: int = 0, dtype: str = "float32",
                 nonlocal_enabled: bool = True, view_weight_channels: int = 1,
                 holdout_refs: tuple[int, ...] = (), kernel_size: int = 3):
        self.depth_planes = depth_planes
        self.block_size = block_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.crop = crop
        self.seed = seed
        self.dtype = dtype
        self.nonlocal_enabled = nonlocal_enabled
        self.view_weight_channels = view_weight_channels
        self.holdout_refs = holdout_refs
        self.kernel_size = kernel_size

    # -- sklearn plumbing --------------------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "DepthMapEstimator":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for DepthMapEstimator")
            setattr(self, name, value)
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "network_"):
            raise NotFittedError("this DepthMapEstimator is not fitted yet; call fit first")

    # -- the estimator contract ---------------------------------------------

    def fit(self, X, y=None) -> "DepthMapEstimator":
        """Train on scenes ``X`` (one scene or a list). ``y`` is ignored;
        supervision comes from the scenes' ground-truth depth."""
        scenes = _as_scene_list(X)
        net_cfg = NetworkConfig(block_size=self.block_size, dtype=self.dtype,
                                seed=self.seed,
                                nonlocal_enabled=self.nonlocal_enabled,
                                view_weight_channels=self.view_weight_channels,
                                kernel_size=self.kernel_size)
        self.network_ = DepthNetwork(net_cfg)
        train_cfg = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                                depth_planes=self.depth_planes, crop=self.crop,
                                seed=self.seed, holdout_refs=tuple(self.holdout_refs))
        self.loss_history_ = train(self.network_, scenes, train_cfg)
        return self

    def predict(self, X) -> list[DepthEstimate] | DepthEstimate:
        """Depth for (scene, ref_index) samples (or one such pair)."""
        self._require_fitted()
        single = isinstance(X, tuple) and len(X) == 2 and isinstance(X[1], (int, np.integer))
        pairs = [X] if single else list(X)
        out = []
        for scene, ref in pairs:
            _check_scene(scene, 0)
            out.append(infer_depth(scene.views, int(ref), self.network_,
                                   self.depth_planes))
        return out[0] if single else out

    def score(self, X, y=None) -> float:
        """Mean fraction of valid pixels within one depth plane of GT."""
        self._require_fitted()
        single = isinstance(X, tuple) and len(X) == 2 and isinstance(X[1], (int, np.integer))
        pairs = [X] if single else list(X)
        fracs = []
        for scene, ref in pairs:
            est = self.predict((scene, int(ref)))
            gt_idx = est.hypotheses.nearest_index(
                np.where(scene.gt_mask[ref], scene.gt_depth[ref], est.hypotheses.d_min))
            ok = np.abs(est.plane_index - gt_idx) <= 1
            mask = scene.gt_mask[ref].astype(bool)
            fracs.append(float(ok[mask].mean()))
        return float(np.mean(fracs))
