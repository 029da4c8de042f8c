"""The full trainable depth network: features, view weights, regularizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .cost import FeatureExtractor, ViewWeightNet, cost_map_stream
from .geometry import CameraView, DepthHypothesisSet
from .params import ParameterStore
from .regularizer import Regularizer, RegularizerConfig
from .tensor import Tensor

__all__ = ["NetworkConfig", "DepthNetwork"]

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class NetworkConfig:
    """Flat configuration for every learned component.

    ``dtype`` selects run precision ("float64" for gradient checking,
    "float32" for training throughput); it is a runtime choice, not a code
    fork. ``view_weight_channels`` may be 1 (broadcast across feature
    channels) or 32 (full per-channel weights).
    """

    block_size: int = 8
    kernel_size: int = 3
    view_weight_hidden: int = 8
    view_weight_channels: int = 1
    groups: int = 4
    dtype: str = "float64"
    seed: int = 0
    nonlocal_enabled: bool = True
    force_zero_block_state: bool = False
    sample_offset: int = 0
    tbptt_blocks: int | None = None

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.view_weight_channels not in (1, 32):
            raise ValueError("view_weight_channels must be 1 or 32")

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(
            block_size=self.block_size,
            kernel_size=self.kernel_size,
            groups=self.groups,
            sample_offset=self.sample_offset,
            nonlocal_enabled=self.nonlocal_enabled,
            force_zero_block_state=self.force_zero_block_state,
            tbptt_blocks=self.tbptt_blocks,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class DepthNetwork:
    """Bundles the learned stages and their shared parameter store."""

    def __init__(self, config: NetworkConfig | None = None):
        self.config = config or NetworkConfig()
        self.np_dtype = _DTYPES[self.config.dtype]
        self.store = ParameterStore(dtype=self.np_dtype)
        rng = np.random.default_rng(self.config.seed)
        self.features = FeatureExtractor(self.store, rng, groups=self.config.groups)
        self.view_weight = ViewWeightNet(
            self.store, rng, hidden=self.config.view_weight_hidden,
            out_channels=self.config.view_weight_channels, groups=self.config.groups)
        self.regularizer = Regularizer(self.store, rng,
                                       config=self.config.regularizer_config())

    def extract_features(self, image: np.ndarray) -> Tensor:
        """Deep features [32, H, W] for one [3, H, W] image in [0, 1]."""
        return self.features(Tensor(np.asarray(image, dtype=self.np_dtype), _check=False))

    def logit_stream(self, ref: CameraView, sources: list[CameraView],
                     hypotheses: DepthHypothesisSet, order: str = "forward",
                     ref_window=None,
                     src_feats: list[Tensor] | None = None,
                     ref_feat: Tensor | None = None) -> Iterator[tuple[int, Tensor]]:
        """Stream (plane_index, logit [1, h, w]) through the whole pipeline."""
        if ref_feat is None:
            ref_feat = self.extract_features(ref.image)
        if src_feats is None:
            src_feats = [self.extract_features(s.image) for s in sources]
        costs = cost_map_stream(ref, sources, ref_feat, src_feats, hypotheses,
                                self.view_weight, order=order, ref_window=ref_window)
        return self.regularizer.stream(costs, hypotheses.count)

    def save(self, path) -> None:
        self.store.save(path)

    def load(self, path) -> None:
        self.store.load(path)
