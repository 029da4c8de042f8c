"""Probability volumes, depth extraction, the training loop, and depth-map io.

Depth inference is winner-take-all classification over depth planes: the
regularized logits pass a per-pixel softmax along depth, the argmax plane
gives the depth and the maximum probability gives the confidence.

Depth map file layout (little-endian):

    magic   4 bytes  b"NR2D"
    version u32      currently 1
    H, W    u32 each
    depth   H*W float64, row-major
    prob    H*W float64, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .geometry import DepthHypothesisSet, sample_inverse_depth
from .network import DepthNetwork
from .tensor import Tensor, concat, no_grad

__all__ = [
    "ProbabilityVolume",
    "DepthEstimate",
    "GroundTruthDepth",
    "TrainConfig",
    "TrainingDiverged",
    "probability_volume",
    "wta_depth",
    "cross_entropy_loss",
    "train",
    "infer_depth",
    "save_depth_map",
    "load_depth_map",
]

_DEPTH_MAGIC = b"NR2D"
_DEPTH_VERSION = 1


@dataclass
class ProbabilityVolume:
    """Per-pixel distribution over depth planes ([D, H, W], sums to 1)."""

    p: Tensor
    hypotheses: DepthHypothesisSet
    log_p: Tensor | None = None


@dataclass
class DepthEstimate:
    """Winner-take-all depth, its probability, and the winning plane index."""

    depth: np.ndarray        # [H, W], scene units
    probability: np.ndarray  # [H, W], max classification probability
    plane_index: np.ndarray  # [H, W], int64
    hypotheses: DepthHypothesisSet | None = None


@dataclass
class GroundTruthDepth:
    depth: np.ndarray  # [H, W]
    mask: np.ndarray   # [H, W] bool, True where ground truth is valid


class TrainingDiverged(ArithmeticError):
    """Training loss became non-finite."""


def probability_volume(logits: Tensor, hypotheses: DepthHypothesisSet) -> ProbabilityVolume:
    """Softmax over the depth axis of [D, H, W] logits."""
    if logits.shape[0] != hypotheses.count:
        raise ValueError(f"{logits.shape[0]} logit planes vs {hypotheses.count} hypotheses")
    return ProbabilityVolume(p=ops.softmax_over_depth(logits), hypotheses=hypotheses,
                             log_p=ops.log_softmax_over_depth(logits))


def wta_depth(volume: ProbabilityVolume) -> DepthEstimate:
    """Per-pixel argmax plane; ties break toward the smaller plane index."""
    p = volume.p.data
    idx = p.argmax(axis=0)
    theta = np.take_along_axis(p, idx[None], axis=0)[0]
    return DepthEstimate(depth=volume.hypotheses.values[idx], probability=theta,
                         plane_index=idx, hypotheses=volume.hypotheses)


def cross_entropy_loss(volume: ProbabilityVolume, gt: GroundTruthDepth) -> Tensor:
    """Mean negative log-probability of the plane nearest (in inverse depth)
    to the ground truth, over valid pixels."""
    mask = np.asarray(gt.mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid ground-truth pixels")
    hyp = volume.hypotheses
    d = gt.depth[mask]
    if np.any(d < hyp.d_min) or np.any(d > hyp.d_max):
        raise ValueError("valid ground-truth depths fall outside the hypothesis range")
    targets = hyp.nearest_index(d)
    yy, xx = np.nonzero(mask)
    log_p = volume.log_p if volume.log_p is not None else ops.log(volume.p)
    picked = log_p[(targets, yy, xx)]
    return -picked.mean()


@dataclass
class TrainConfig:
    """Toy-scale training protocol settings."""

    epochs: int = 10
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    depth_planes: int = 32
    crop: int | None = 32          # random square crop of the reference view
    seed: int = 0
    holdout_refs: tuple[int, ...] = ()  # view indices never used as reference
    warmup_steps: int = 10         # linear lr ramp; tames Adam's first steps

    def __post_init__(self):
        if self.crop is not None and self.crop % 4:
            raise ValueError("crop size must be divisible by 4")


def _gt_for(scene, ref_index: int, window=None) -> GroundTruthDepth:
    depth = scene.gt_depth[ref_index]
    mask = scene.gt_mask[ref_index].astype(bool)
    if window is not None:
        y0, y1, x0, x1 = window
        depth = depth[y0:y1, x0:x1]
        mask = mask[y0:y1, x0:x1]
    ref = scene.views[ref_index]
    mask = mask & (depth >= ref.d_min) & (depth <= ref.d_max)
    return GroundTruthDepth(depth=depth, mask=mask)


def _train_sample(network: DepthNetwork, scene, ref_index: int,
                  config: TrainConfig, rng: np.random.Generator,
                  step: int) -> float:
    ref = scene.views[ref_index]
    sources = [v for i, v in enumerate(scene.views) if i != ref_index]
    hyps = sample_inverse_depth(ref.d_min, ref.d_max, config.depth_planes)
    order = "forward" if rng.random() < 0.5 else "backward"

    window = None
    if config.crop is not None and config.crop < min(ref.height, ref.width):
        c = config.crop
        y0 = int(rng.integers(0, ref.height - c + 1))
        x0 = int(rng.integers(0, ref.width - c + 1))
        y0 -= y0 % 4
        x0 -= x0 % 4
        window = (y0, y0 + c, x0, x0 + c)

    logits: list[Tensor | None] = [None] * hyps.count
    for j, logit in network.logit_stream(ref, sources, hyps, order=order,
                                         ref_window=window):
        logits[j] = logit
    vol = concat([lg for lg in logits], axis=0)
    pv = probability_volume(vol, hyps)
    loss = cross_entropy_loss(pv, _gt_for(scene, ref_index, window))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"loss is {value} (ref view {ref_index}, order {order}); aborting")
    loss.backward()
    lr = config.learning_rate
    if config.warmup_steps and step < config.warmup_steps:
        lr *= (step + 1) / config.warmup_steps
    network.store.adam_step(lr, betas=config.betas)
    return value


def train(network: DepthNetwork, scenes, config: TrainConfig,
          on_epoch=None) -> list[float]:
    """Train on all (scene, reference-view) pairs; returns per-epoch means.

    Each sample randomly traverses the depth planes front-to-back or
    back-to-front so estimates do not bias on recurrence order. Raises
    :class:`TrainingDiverged` if the loss goes non-finite.
    """
    rng = np.random.default_rng(config.seed)
    samples = [(s, r) for s in scenes
               for r in range(len(s.views)) if r not in config.holdout_refs]
    if not samples:
        raise ValueError("no training samples (all views held out?)")
    history = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for scene, ref in samples:
            losses.append(_train_sample(network, scene, ref, config, rng, step))
            step += 1
        mean = float(np.mean(losses))
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return history


def infer_depth(views, ref_index: int, network: DepthNetwork,
                depth_planes: int) -> DepthEstimate:
    """Full-pipeline depth inference for one reference view.

    Runs gradient-free and consumes the logit stream with running softmax
    statistics, so memory stays flat in the number of depth planes. Only
    the forward (near-to-far) traversal is used at inference time.
    """
    if not 0 <= ref_index < len(views):
        raise ValueError(f"reference index {ref_index} out of range for {len(views)} views")
    if len(views) < 2:
        raise ValueError("need at least two views")
    ref = views[ref_index]
    sources = [v for i, v in enumerate(views) if i != ref_index]
    hyps = sample_inverse_depth(ref.d_min, ref.d_max, depth_planes)
    h, w = ref.height, ref.width
    best = np.full((h, w), -np.inf)
    best_idx = np.zeros((h, w), dtype=np.int64)
    run_max = np.full((h, w), -np.inf)
    run_sum = np.zeros((h, w))
    with no_grad():
        for j, logit in network.logit_stream(ref, sources, hyps, order="forward"):
            l = logit.data[0].astype(np.float64)
            new_max = np.maximum(run_max, l)
            with np.errstate(under="ignore"):
                run_sum = run_sum * np.exp(run_max - new_max) + np.exp(l - new_max)
            run_max = new_max
            better = l > best
            best = np.where(better, l, best)
            best_idx = np.where(better, j, best_idx)
    theta = np.exp(best - run_max) / run_sum
    return DepthEstimate(depth=hyps.values[best_idx], probability=theta,
                         plane_index=best_idx, hypotheses=hyps)


# -- depth map files -------------------------------------------------------

def save_depth_map(path, depth: np.ndarray, probability: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f8")
    probability = np.ascontiguousarray(probability, dtype="<f8")
    if depth.shape != probability.shape or depth.ndim != 2:
        raise ValueError("depth and probability must share one [H, W] shape")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_MAGIC)
        f.write(struct.pack("<III", _DEPTH_VERSION, h, w))
        f.write(depth.tobytes())
        f.write(probability.tobytes())


def load_depth_map(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _DEPTH_MAGIC:
        raise IOError(f"{path}: bad magic {raw[:4]!r}")
    version, h, w = struct.unpack_from("<III", raw, 4)
    if version != _DEPTH_VERSION:
        raise IOError(f"{path}: unsupported version {version}")
    n = h * w
    expect = 16 + 16 * n
    if len(raw) != expect:
        raise IOError(f"{path}: expected {expect} bytes, found {len(raw)}")
    depth = np.frombuffer(raw, dtype="<f8", count=n, offset=16).reshape(h, w).copy()
    prob = np.frombuffer(raw, dtype="<f8", count=n, offset=16 + 8 * n).reshape(h, w).copy()
    return depth, prob
