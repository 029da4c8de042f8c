"""Image feature extraction and per-depth-plane matching cost maps.

A cost map at depth d aggregates, over source views, the per-view weighted
squared difference between warped source features and reference features:

    C(d) = sum_i m_i * (1 + w_i(d)) * (F_i~(d) - F_0)^2 / count

where ``m_i`` masks pixels that warp outside source image i and ``count``
is the per-pixel number of valid views (the unweighted N-1 when every view
is valid). Pixels with no valid view get zero cost and a zeroed mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .geometry import CameraView, DepthHypothesisSet, pixel_grid, plane_homography, warp_features
from .layers import Conv2dLayer, ConvGnRelu, ResidualBlock
from .params import ParameterStore
from .tensor import Tensor

__all__ = ["CostMap", "FeatureExtractor", "ViewWeightNet", "cost_map", "cost_map_stream"]

# 3x3 stages, dilations chosen for a wide receptive field at full resolution.
_FEATURE_CHANNELS = (3, 16, 16, 32, 32, 32, 32, 32)
_FEATURE_DILATIONS = (1, 1, 2, 4, 2, 1, 1)


@dataclass
class CostMap:
    """Matching cost for one depth plane plus its validity mask."""

    cost: Tensor          # [C, H, W], nonnegative
    valid_mask: np.ndarray  # [1, H, W], 1 where at least one view was valid


class FeatureExtractor:
    """Stacked dilated convolutions producing [32, H, W] features at input
    resolution (no striding)."""

    def __init__(self, store: ParameterStore, rng: np.random.Generator,
                 name: str = "features", groups: int = 4):
        self.stages = []
        pairs = list(zip(_FEATURE_CHANNELS[:-1], _FEATURE_CHANNELS[1:]))
        for i, ((c_in, c_out), dil) in enumerate(zip(pairs[:-1], _FEATURE_DILATIONS[:-1])):
            self.stages.append(ConvGnRelu(store, f"{name}.stage{i}", c_in, c_out, rng,
                                          dilation=dil, groups=groups))
        c_in, c_out = pairs[-1]
        self.final = Conv2dLayer(store, f"{name}.final", c_in, c_out, rng,
                                 dilation=_FEATURE_DILATIONS[-1])

    @staticmethod
    def receptive_radius() -> int:
        """Chebyshev radius of the output receptive field, in input pixels."""
        return sum(_FEATURE_DILATIONS)

    def __call__(self, image: Tensor) -> Tensor:
        if image.shape[1] < 16 or image.shape[2] < 16:
            raise ValueError(f"image too small for feature stack: {image.shape}")
        x = image
        for stage in self.stages:
            x = stage(x)
        return self.final(x)


class ViewWeightNet:
    """Per-view matching confidence from the warped-feature difference.

    conv+GN+ReLU, a residual block, then a sigmoid-activated conv head.
    Output has ``out_channels`` channels (1 by default, broadcast across
    the feature channels when applied in the cost formula).
    """

    def __init__(self, store: ParameterStore, rng: np.random.Generator,
                 name: str = "view_weight", in_channels: int = 32,
                 hidden: int = 8, out_channels: int = 1, groups: int = 4):
        self.entry = ConvGnRelu(store, f"{name}.entry", in_channels, hidden, rng, groups=groups)
        self.res = ResidualBlock(store, f"{name}.res", hidden, rng, groups=groups)
        self.head = Conv2dLayer(store, f"{name}.head", hidden, out_channels, rng)

    def __call__(self, feat_diff: Tensor) -> Tensor:
        return ops.sigmoid(self.head(self.res(self.entry(feat_diff))))


def cost_map(ref_feat: Tensor, warped_feats: list[Tensor], weights: list[Tensor],
             masks: list[np.ndarray]) -> CostMap:
    """Aggregate warped source features into one cost map (see module doc)."""
    if len(warped_feats) < 1:
        raise ValueError("need at least one source view (N >= 2)")
    dt = ref_feat.dtype
    count = np.zeros((1,) + ref_feat.shape[1:], dtype=dt)
    for m in masks:
        count += m
    divisor = Tensor(np.maximum(count, 1.0), _check=False)
    total = None
    for feat, w, m in zip(warped_feats, weights, masks):
        diff = feat - ref_feat
        term = (1.0 + w) * diff.square() * Tensor(m.astype(dt), _check=False)
        total = term if total is None else total + term
    cost = total / divisor
    # Pixels with no valid view: the masked numerator is already zero there.
    return CostMap(cost=cost, valid_mask=(count > 0).astype(dt))


def cost_map_stream(ref: CameraView, sources: list[CameraView], ref_feat: Tensor,
                    src_feats: list[Tensor], hypotheses: DepthHypothesisSet,
                    weight_net: ViewWeightNet, order: str = "forward",
                    ref_window=None) -> Iterator[tuple[int, CostMap]]:
    """Lazily yield (plane_index, CostMap) along the depth hypotheses.

    ``order`` is "forward" (near to far) or "backward". ``ref_window``
    optionally restricts the reference grid to a (y0, y1, x0, x1) crop;
    source features stay full so warps can sample outside the crop.
    Successive planes are independent; the consumer imposes ordering.
    """
    if ref_window is not None:
        y0, y1, x0, x1 = ref_window
        grid = pixel_grid(ref.height, ref.width)[:, y0:y1, x0:x1]
        ref_feat = ref_feat[:, y0:y1, x0:x1]
    else:
        grid = pixel_grid(ref_feat.shape[1], ref_feat.shape[2])
    indices = range(hypotheses.count)
    if order == "backward":
        indices = reversed(indices)
    elif order != "forward":
        raise ValueError(f"unknown order {order!r}")
    for j in indices:
        d = float(hypotheses.values[j])
        warped, weights, masks = [], [], []
        for src, feat in zip(sources, src_feats):
            hom = plane_homography(ref, src, d)
            wf, mask = warp_features(feat, hom, grid=grid)
            warped.append(wf)
            masks.append(mask)
            weights.append(weight_net(wf - ref_feat))
        yield j, cost_map(ref_feat, warped, weights, masks)
