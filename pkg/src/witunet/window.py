"""Non-overlapping window partition/merge and windowed multi-head
self-attention with a learnable relative-position bias table.

Feature maps are (N,C,H,W); window tokens are (N*num_windows, M*M, C) with
windows raster-ordered over the grid and tokens raster-ordered inside each
window. Attention within a window: per head, scores = Q K^T / sqrt(d_k) plus
the bias gathered by token-pair offset, softmaxed, applied to V; heads are
concatenated and linearly projected back to C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .nn import linear, softmax
from .tensor import Tensor


@dataclass(frozen=True)
class WindowGrid:
    """Window tiling of an H x W map with side M."""

    height: int
    width: int
    side: int

    def __post_init__(self):
        m = self.side
        if self.height % m or self.width % m:
            raise ShapeError(
                f"extents ({self.height},{self.width}) not divisible by window side {m}; "
                "pad bottom/right to a multiple first"
            )

    @property
    def rows(self) -> int:
        return self.height // self.side

    @property
    def cols(self) -> int:
        return self.width // self.side

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def origin(self, index: int) -> tuple[int, int]:
        """Top-left (row, col) pixel of window `index` in raster order."""
        return (index // self.cols) * self.side, (index % self.cols) * self.side


def window_partition(x, m: int) -> Tensor:
    """(N,C,H,W) -> (N*num_windows, M*M, C) window tokens."""
    x = T._as_tensor(x)
    n, c, h, w = x.shape
    grid = WindowGrid(h, w, m)
    gh, gw = grid.rows, grid.cols
    t = T.reshape(x, (n, c, gh, m, gw, m))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))  # (N, gh, gw, M, M, C)
    return T.reshape(t, (n * gh * gw, m * m, c))


def window_merge(tokens, m: int, height: int, width: int) -> Tensor:
    """Inverse of window_partition; bit-exact roundtrip."""
    tokens = T._as_tensor(tokens)
    bw, mm, c = tokens.shape
    if mm != m * m:
        raise ShapeError(f"token count {mm} != M*M = {m * m}")
    grid = WindowGrid(height, width, m)
    if bw % grid.count:
        raise ShapeError(
            f"window batch {bw} not a multiple of grid count {grid.count} for ({height},{width},M={m})"
        )
    n = bw // grid.count
    t = T.reshape(tokens, (n, grid.rows, grid.cols, m, m, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))  # (N, C, gh, M, gw, M)
    return T.reshape(t, (n, c, height, width))


def relative_position_index(m: int) -> np.ndarray:
    """(M^2, M^2, 2) table coordinates: entry (i,j) = (ri-rj+M-1, ci-cj+M-1)."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"), axis=-1)
    coords = coords.reshape(m * m, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (m - 1)
    return rel.astype(np.int64)


def relative_position_flat_index(m: int) -> np.ndarray:
    """(M^2 * M^2,) flat indices into a (2M-1)*(2M-1) bias table."""
    rel = relative_position_index(m)
    return (rel[..., 0] * (2 * m - 1) + rel[..., 1]).reshape(-1)


@dataclass
class AttentionParams:
    """Weights for one W-MSA layer at channel width C.

    qkv/out projections are (C,C); the bias table has one (2M-1)^2 row per
    head (or a single shared row when built in single-table mode).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bias_table: Tensor  # (heads or 1, (2M-1)^2)
    heads: int
    side: int
    _flat_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by head count {self.heads}")
        if self._flat_index is None:
            self._flat_index = relative_position_flat_index(self.side)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def w_msa(x_windows, params: AttentionParams, key_mask: np.ndarray | None = None) -> Tensor:
    """Windowed multi-head self-attention over (B_w, M*M, C) tokens.

    ``key_mask`` is an optional additive logit mask broadcastable to
    (B_w, heads, M*M, M*M); padded key positions carry large negatives.
    """
    x = T._as_tensor(x_windows)
    bw, tokens, c = x.shape
    if c != params.channels:
        raise ShapeError(f"token width {c} != attention width {params.channels}")
    if tokens != params.side * params.side:
        raise ShapeError(f"tokens {tokens} != M^2 = {params.side ** 2}")
    h, dk = params.heads, params.head_dim

    def split_heads(t):  # (B_w, T, C) -> (B_w, h, T, dk)
        t = T.reshape(t, (bw, tokens, h, dk))
        return T.transpose(t, (0, 2, 1, 3))

    q = split_heads(linear(x, params.wq))
    k = split_heads(linear(x, params.wk))
    v = split_heads(linear(x, params.wv))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))

    bias_rows = params.bias_table.shape[0]  # heads, or 1 in single-table mode
    bias = T.index_select_last(params.bias_table, params._flat_index)
    bias = T.reshape(bias, (bias_rows, tokens, tokens))
    scores = T.add(scores, bias)  # broadcast over window batch (and heads if shared)

    attn = softmax(scores, additive_mask=key_mask)
    out = T.matmul(attn, v)  # (B_w, h, T, dk)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bw, tokens, c))
    return linear(out, params.wo)


def attention_flops(height: int, width: int, channels: int, m: int) -> tuple[int, int]:
    """Multiply counts (score + apply passes) for windowed vs global attention.

    windowed = 2*M^2*H*W*C, global = 2*H^2*W^2*C; the QKV/output projections
    (identical in both schemes) are excluded so the ratio is exactly H*W/M^2.
    """
    if min(height, width, channels, m) < 1:
        raise ConfigError("extents must be positive")
    windowed = 2 * m * m * height * width * channels
    global_ = 2 * height * height * width * width * channels
    return windowed, global_
