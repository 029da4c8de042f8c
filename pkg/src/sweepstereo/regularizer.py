"""Streamed recurrent regularization of the cost-map sequence.

Cost maps arrive one depth plane at a time and pass through a 2D U-Net of
convolutional LSTM cells (three spatial scales, five cells total). The
finest-level cell is "non-local": its cell-state update adds a gated
injection of the previous depth block's state map B(t-1), so information
can flow between non-adjacent depth planes.

Depth planes are grouped into blocks of ``s`` consecutive planes. Within a
block, every other plane contributes its raw (32-channel) and regularized
(8-channel) cost features to a buffer; at the block boundary a depth
attention module distills the buffer into attention features, and a gated
recurrence updates the block state:

    B(t) = G_i(t) * tanh(F_att(t)) + G_f(t) * B(t-1)

The stream is strictly causal in block order and keeps at most one block
of features alive, so peak activation memory does not grow with the number
of depth planes.

Gate parameter layout: each LSTM cell stores one fused convolution
``<cell>.gates`` whose output channels are the four gates in the order
(forget, input, candidate, output), each ``hidden_channels`` wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from . import ops
from .cost import CostMap
from .layers import Conv2dLayer, ResidualBlock
from .params import ParameterStore
from .tensor import Tensor, concat, stack

__all__ = [
    "RegularizerConfig",
    "LstmCellState",
    "BlockState",
    "BlockBuffer",
    "ConvLstmCell",
    "NonLocalConvLstmCell",
    "DepthAttention",
    "BlockStateUpdater",
    "Regularizer",
]


@dataclass
class RegularizerConfig:
    """Shape/behavior knobs of the recurrent regularizer."""

    block_size: int = 8           # planes per depth block (even)
    kernel_size: int = 3
    fine_channels: int = 32       # finest-level LSTM (non-local) hidden size
    mid_channels: int = 16
    coarse_channels: int = 16
    out_channels: int = 8         # regularized cost features per plane
    block_channels: int = 16      # channels of B(t) and of F_att
    groups: int = 4
    sample_offset: int = 0        # 0: even in-block indices feed the buffer
    nonlocal_enabled: bool = True
    force_zero_block_state: bool = False
    tbptt_blocks: int | None = None  # detach states every K blocks; None = full unroll

    def __post_init__(self):
        if self.block_size < 2 or self.block_size % 2 != 0:
            raise ValueError("block size must be even and >= 2")
        if self.sample_offset not in (0, 1):
            raise ValueError("sample_offset must be 0 or 1")


@dataclass
class LstmCellState:
    hidden: Tensor
    cell: Tensor

    def detached(self) -> "LstmCellState":
        return LstmCellState(self.hidden.detach(), self.cell.detach())


@dataclass
class BlockState:
    b: Tensor  # [block_channels, H, W]

    def detached(self) -> "BlockState":
        return BlockState(self.b.detach())


@dataclass
class BlockBuffer:
    """Raw/regularized cost features sampled from the current block."""

    capacity: int
    raw: list[Tensor] = field(default_factory=list)
    reg: list[Tensor] = field(default_factory=list)

    def push(self, raw: Tensor, reg: Tensor) -> None:
        if self.full:
            raise ValueError("block buffer already full")
        self.raw.append(raw)
        self.reg.append(reg)

    @property
    def full(self) -> bool:
        return len(self.raw) == self.capacity

    def stacked(self) -> tuple[Tensor, Tensor]:
        """(raw [32, s/2, H, W], reg [8, s/2, H, W]) depth-stacked tensors."""
        if not self.full:
            raise ValueError(f"buffer holds {len(self.raw)}/{self.capacity} samples")
        return stack(self.raw, axis=1), stack(self.reg, axis=1)

    def clear(self) -> None:
        self.raw.clear()
        self.reg.clear()


class ConvLstmCell:
    """Convolutional LSTM over [C, H, W] maps.

    Gates come from one fused convolution of [input, previous hidden];
    the forget-gate bias starts at +1 so early recurrence passes state
    through.
    """

    def __init__(self, store: ParameterStore, name: str, in_channels: int,
                 hidden_channels: int, rng: np.random.Generator, k: int = 3,
                 forget_bias: float = 1.0):
        self.hidden_channels = hidden_channels
        self.gates = Conv2dLayer(store, f"{name}.gates", in_channels + hidden_channels,
                                 4 * hidden_channels, rng, k=k)
        if forget_bias:
            self.gates.bias.data[:hidden_channels] = forget_bias

    def init_state(self, h: int, w: int, dtype) -> LstmCellState:
        shape = (self.hidden_channels, h, w)
        return LstmCellState(Tensor.zeros(shape, dtype), Tensor.zeros(shape, dtype))

    def _gates(self, x: Tensor, state: LstmCellState):
        z = self.gates(concat([x, state.hidden], axis=0))
        c = self.hidden_channels
        f = ops.sigmoid(ops.slice_channels(z, 0, c))
        i = ops.sigmoid(ops.slice_channels(z, c, 2 * c))
        cand = ops.tanh(ops.slice_channels(z, 2 * c, 3 * c))
        o = ops.sigmoid(ops.slice_channels(z, 3 * c, 4 * c))
        return f, i, cand, o

    def step(self, x: Tensor, state: LstmCellState) -> tuple[Tensor, LstmCellState]:
        f, i, cand, o = self._gates(x, state)
        cell = f * state.cell + i * cand
        hidden = o * ops.tanh(cell)
        return hidden, LstmCellState(hidden, cell)


class NonLocalConvLstmCell(ConvLstmCell):
    """LSTM cell whose cell state additionally ingests the previous block
    state through a learned attention gate:

        cell = f * cell_prev + i * cand + A * proj(B(t-1))
        A    = sigmoid(conv([x, B(t-1)]) + b_a)

    ``proj`` is a bias-free 1x1 convolution aligning the block-state
    channels with the cell channels, so a zero block state contributes
    exactly zero and the cell degenerates to the vanilla update.
    """

    def __init__(self, store, name, in_channels, hidden_channels, block_channels,
                 rng, k=3, forget_bias=1.0):
        super().__init__(store, name, in_channels, hidden_channels, rng, k=k,
                         forget_bias=forget_bias)
        self.attention_gate = Conv2dLayer(store, f"{name}.attention_gate",
                                          in_channels + block_channels,
                                          hidden_channels, rng, k=k)
        self.block_proj = Conv2dLayer(store, f"{name}.block_proj", block_channels,
                                      hidden_channels, rng, k=1, bias=False)

    def step(self, x: Tensor, state: LstmCellState,
             block_prev: Tensor | None = None) -> tuple[Tensor, LstmCellState]:
        f, i, cand, o = self._gates(x, state)
        cell = f * state.cell + i * cand
        if block_prev is not None:
            a = ops.sigmoid(self.attention_gate(concat([x, block_prev], axis=0)))
            cell = cell + a * self.block_proj(block_prev)
        hidden = o * ops.tanh(cell)
        return hidden, LstmCellState(hidden, cell)


class DepthAttention:
    """Distill a block's sampled cost features into attention features.

    Concatenates raw and regularized features ([40, s/2, H, W]), pools the
    depth axis with max and average, and maps the concatenated pooled maps
    through a convolution plus residual block to [block_channels, H, W].
    """

    def __init__(self, store, name, raw_channels, reg_channels, out_channels, rng,
                 k=3, groups=4):
        comp = 2 * (raw_channels + reg_channels)
        self.conv = Conv2dLayer(store, f"{name}.conv", comp, out_channels, rng, k=k)
        self.res = ResidualBlock(store, f"{name}.res", out_channels, rng, k=k, groups=groups)

    def __call__(self, f_raw: Tensor, f_reg: Tensor) -> Tensor:
        f_comp = concat([f_raw, f_reg], axis=0)
        f_max = ops.pool_depth(f_comp, "max")
        f_avg = ops.pool_depth(f_comp, "avg")
        return self.res(self.conv(concat([f_max, f_avg], axis=0)))


class BlockStateUpdater:
    """Gated recurrence over block states (input/forget gates over the
    reshaped raw features and the previous state)."""

    def __init__(self, store, name, raw_channels, samples, block_channels, rng, k=3):
        c_in = raw_channels * samples + block_channels
        self.gate_i = Conv2dLayer(store, f"{name}.gate_i", c_in, block_channels, rng, k=k)
        self.gate_f = Conv2dLayer(store, f"{name}.gate_f", c_in, block_channels, rng, k=k)

    def __call__(self, f_raw: Tensor, f_att: Tensor, b_prev: Tensor) -> Tensor:
        c, s2, h, w = f_raw.shape
        flat = f_raw.reshape(c * s2, h, w)
        inp = concat([flat, b_prev], axis=0)
        g_i = ops.sigmoid(self.gate_i(inp))
        g_f = ops.sigmoid(self.gate_f(inp))
        return g_i * ops.tanh(f_att) + g_f * b_prev


@dataclass
class RegularizerState:
    """All recurrent state carried across depth planes."""

    cells: list[LstmCellState]
    block: BlockState
    buffer: BlockBuffer

    def detached(self) -> "RegularizerState":
        return RegularizerState([c.detached() for c in self.cells],
                                self.block.detached(), self.buffer)


class Regularizer:
    """The full streamed U-Net LSTM regularizer (five cells, three scales)."""

    def __init__(self, store: ParameterStore, rng: np.random.Generator,
                 cost_channels: int = 32, config: RegularizerConfig | None = None,
                 name: str = "regularizer"):
        cfg = config or RegularizerConfig()
        self.config = cfg
        self.cost_channels = cost_channels
        k, g = cfg.kernel_size, cfg.groups
        self.fine = NonLocalConvLstmCell(store, f"{name}.fine", cost_channels,
                                         cfg.fine_channels, cfg.block_channels, rng, k=k)
        self.down1 = Conv2dLayer(store, f"{name}.down1", cfg.fine_channels,
                                 cfg.mid_channels, rng, k=k, stride=2)
        self.enc_mid = ConvLstmCell(store, f"{name}.enc_mid", cfg.mid_channels,
                                    cfg.mid_channels, rng, k=k)
        self.down2 = Conv2dLayer(store, f"{name}.down2", cfg.mid_channels,
                                 cfg.coarse_channels, rng, k=k, stride=2)
        self.coarse = ConvLstmCell(store, f"{name}.coarse", cfg.coarse_channels,
                                   cfg.coarse_channels, rng, k=k)
        self.up1 = Conv2dLayer(store, f"{name}.up1", cfg.coarse_channels,
                               cfg.mid_channels, rng, k=k)
        self.dec_mid = ConvLstmCell(store, f"{name}.dec_mid",
                                    2 * cfg.mid_channels, cfg.mid_channels, rng, k=k)
        self.up2 = Conv2dLayer(store, f"{name}.up2", cfg.mid_channels,
                               cfg.mid_channels, rng, k=k)
        self.dec_fine = ConvLstmCell(store, f"{name}.dec_fine",
                                     cfg.mid_channels + cfg.fine_channels,
                                     cfg.out_channels, rng, k=k)
        # Zero-initialized head: logits start uniform (loss = log D), so
        # early training cannot overshoot an uncalibrated random head.
        self.head = Conv2dLayer(store, f"{name}.head", cfg.out_channels, 1, rng, k=k)
        self.head.weight.data[...] = 0.0
        self.attention = DepthAttention(store, f"{name}.attention", cost_channels,
                                        cfg.out_channels, cfg.block_channels, rng,
                                        k=k, groups=g)
        self.block_update = BlockStateUpdater(store, f"{name}.block_update",
                                              cost_channels, cfg.block_size // 2,
                                              cfg.block_channels, rng, k=k)

    # -- state ------------------------------------------------------------

    def init_state(self, h: int, w: int, dtype) -> RegularizerState:
        if h % 4 or w % 4:
            raise ValueError(f"spatial extents must be divisible by 4, got {h}x{w}")
        cells = [
            self.fine.init_state(h, w, dtype),
            self.enc_mid.init_state(h // 2, w // 2, dtype),
            self.coarse.init_state(h // 4, w // 4, dtype),
            self.dec_mid.init_state(h // 2, w // 2, dtype),
            self.dec_fine.init_state(h, w, dtype),
        ]
        block = BlockState(Tensor.zeros((self.config.block_channels, h, w), dtype))
        return RegularizerState(cells, block, BlockBuffer(self.config.block_size // 2))

    # -- one plane ----------------------------------------------------------

    def step(self, cost_map: CostMap, state: RegularizerState) -> tuple[Tensor, Tensor, RegularizerState]:
        """Regularize one cost map.

        Returns (regularized [out_channels, H, W], logit [1, H, W], new state).
        The block state used here is always the previous block's.
        """
        cfg = self.config
        x = cost_map.cost
        h, w = x.shape[1], x.shape[2]
        if h % 4 or w % 4:
            raise ValueError(f"spatial extents must be divisible by 4, got {h}x{w}")
        c1, c2, c3, c4, c5 = state.cells

        if cfg.nonlocal_enabled:
            bprev = state.block.b
            if cfg.force_zero_block_state:
                bprev = Tensor.zeros(bprev.shape, bprev.dtype)
            h1, c1 = self.fine.step(x, c1, block_prev=bprev)
        else:
            h1, c1 = self.fine.step(x, c1, block_prev=None)

        h2, c2 = self.enc_mid.step(self.down1(h1), c2)
        h3, c3 = self.coarse.step(self.down2(h2), c3)

        u1 = self.up1(ops.bilinear_resize(h3, h // 2, w // 2))
        h4, c4 = self.dec_mid.step(concat([u1, h2], axis=0), c4)
        u2 = self.up2(ops.bilinear_resize(h4, h, w))
        h5, c5 = self.dec_fine.step(concat([u2, h1], axis=0), c5)

        logit = self.head(h5)
        new = RegularizerState([c1, c2, c3, c4, c5], state.block, state.buffer)
        return h5, logit, new

    # -- the stream ---------------------------------------------------------

    def stream(self, cost_maps: Iterable[tuple[int, CostMap]],
               total_planes: int) -> Iterator[tuple[int, Tensor]]:
        """Consume an ordered stream of ``total_planes`` cost maps and yield
        (plane_index, logit [1, H, W]) per real plane.

        If ``total_planes`` is not a multiple of the block size the stream
        is padded by repeating the last cost map; padded logits are not
        emitted. Peak live depth extent is one block plus constants.
        """
        cfg = self.config
        s = cfg.block_size
        state: RegularizerState | None = None
        step_idx = 0
        blocks_done = 0
        last: tuple[int, CostMap] | None = None

        def consume(plane_idx: int, cm: CostMap, padded: bool):
            nonlocal state, step_idx, blocks_done
            if state is None:
                state = self.init_state(cm.cost.shape[1], cm.cost.shape[2], cm.cost.dtype)
            in_block = step_idx % s
            reg, logit, state = self.step(cm, state)
            if cfg.nonlocal_enabled:
                if in_block % 2 == cfg.sample_offset:
                    state.buffer.push(cm.cost, reg)
                if in_block == s - 1:
                    f_raw, f_reg = state.buffer.stacked()
                    f_att = self.attention(f_raw, f_reg)
                    b_new = self.block_update(f_raw, f_att, state.block.b)
                    state = replace(state, block=BlockState(b_new))
                    state.buffer.clear()
                    blocks_done += 1
                    if cfg.tbptt_blocks and blocks_done % cfg.tbptt_blocks == 0:
                        state = state.detached()
            elif cfg.tbptt_blocks and (step_idx + 1) % (s * cfg.tbptt_blocks) == 0:
                state = state.detached()
            step_idx += 1
            return None if padded else (plane_idx, logit)

        n_seen = 0
        for plane_idx, cm in cost_maps:
            last = (plane_idx, cm)
            n_seen += 1
            if n_seen > total_planes:
                raise ValueError(f"stream longer than the declared {total_planes} planes")
            out = consume(plane_idx, cm, padded=False)
            if out is not None:
                yield out
        if n_seen < total_planes:
            raise ValueError(f"stream ended after {n_seen} of {total_planes} planes")
        if n_seen % s and cfg.nonlocal_enabled:
            # Pad to a full block so the trailing block recurrence stays
            # well-formed; padded planes emit nothing.
            pad = s - n_seen % s
            for _ in range(pad):
                consume(last[0], last[1], padded=True)
