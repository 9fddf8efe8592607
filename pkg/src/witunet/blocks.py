"""Window Transformer block: LN -> W-MSA -> residual, then LN -> feed-forward
-> residual. The feed-forward is LiPe (tokenwise expand, 3x3 conv on the map,
tokenwise restore, GELU between layers) or a plain 2-layer MLP in the ablation
mode. Maps whose extents are not multiples of the window side are zero-padded
bottom/right around the attention step, padded keys are masked out of the
softmax, and the pad is cropped again before the residual add.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from . import tensor as T
from .nn import conv2d, depthwise_conv2d, gelu, layer_norm, linear
from .tensor import Tensor
from .window import AttentionParams, w_msa, window_merge, window_partition

_MASK_LOGIT = -1e9


@dataclass
class LiPeParams:
    expand_w: Tensor  # (e*C, C)
    expand_b: Tensor
    conv_w: Tensor  # (e*C, e*C, 3, 3), or (e*C, 1, 3, 3) depthwise
    conv_b: Tensor
    restore_w: Tensor  # (C, e*C)
    restore_b: Tensor
    depthwise: bool = False


@dataclass
class MlpParams:
    """Ablation feed-forward: expand -> GELU -> restore, no spatial conv."""

    expand_w: Tensor
    expand_b: Tensor
    restore_w: Tensor
    restore_b: Tensor


@dataclass
class WTBlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    attn: AttentionParams
    ffn: LiPeParams | MlpParams


def _to_channel_last(x):  # (N,C,H,W) -> (N,H,W,C)
    return T.transpose(x, (0, 2, 3, 1))


def _to_channel_first(x):  # (N,H,W,C) -> (N,C,H,W)
    return T.transpose(x, (0, 3, 1, 2))


def lipe(x, params: LiPeParams) -> Tensor:
    """Local-perception feed-forward on a (N,C,H,W) map; shape preserved."""
    n, c, h, w = x.shape
    if params.expand_w.shape[1] != c:
        raise ShapeError(f"lipe expects {params.expand_w.shape[1]} channels, got {c}")
    t = linear(_to_channel_last(x), params.expand_w, params.expand_b)
    t = gelu(t)
    t = _to_channel_first(t)  # (N, e*C, H, W)
    if params.depthwise:
        t = depthwise_conv2d(t, params.conv_w, params.conv_b, stride=1, padding=1)
    else:
        t = conv2d(t, params.conv_w, params.conv_b, stride=1, padding=1)
    t = gelu(t)
    t = linear(_to_channel_last(t), params.restore_w, params.restore_b)
    return _to_channel_first(t)


def mlp_ffn(x, params: MlpParams) -> Tensor:
    t = linear(_to_channel_last(x), params.expand_w, params.expand_b)
    t = gelu(t)
    t = linear(t, params.restore_w, params.restore_b)
    return _to_channel_first(t)


def feed_forward(x, params) -> Tensor:
    if isinstance(params, LiPeParams):
        return lipe(x, params)
    return mlp_ffn(x, params)


def _pad_amounts(h: int, w: int, m: int) -> tuple[int, int]:
    return (-h) % m, (-w) % m


def _padded_key_mask(n: int, h: int, w: int, hp: int, wp: int, m: int) -> np.ndarray:
    """Additive (N*nw, 1, 1, M^2) logit mask hiding padded key tokens."""
    valid = np.zeros((hp, wp), dtype=np.float32)
    valid[:h, :w] = 1.0
    gh, gw = hp // m, wp // m
    per_window = valid.reshape(gh, m, gw, m).transpose(0, 2, 1, 3).reshape(gh * gw, m * m)
    mask = np.where(per_window > 0, 0.0, _MASK_LOGIT).astype(np.float32)
    mask = np.tile(mask[None], (n, 1, 1))  # (N, nw, M^2)
    return mask.reshape(n * gh * gw, 1, 1, m * m)


def windowed_attention(x, attn: AttentionParams, ln_g, ln_b, m: int) -> Tensor:
    """LN + W-MSA on a feature map, handling non-divisible extents by
    pad -> mask -> crop. Returns the sublayer output (no residual)."""
    n, c, h, w = x.shape
    pb, pr = _pad_amounts(h, w, m)
    xp = T.pad2d(x, pb, pr)
    hp, wp = h + pb, w + pr
    tokens = window_partition(xp, m)
    tokens = layer_norm(tokens, ln_g, ln_b)
    mask = _padded_key_mask(n, h, w, hp, wp, m) if (pb or pr) else None
    tokens = w_msa(tokens, attn, key_mask=mask)
    out = window_merge(tokens, m, hp, wp)
    return T.crop2d(out, h, w)


def wt_block(x, params: WTBlockParams, m: int) -> Tensor:
    """Two residual sublayers: attention then feed-forward."""
    x = T._as_tensor(x)
    a = windowed_attention(x, params.attn, params.ln1_g, params.ln1_b, m)
    x = T.add(x, a)
    t = layer_norm(_to_channel_last(x), params.ln2_g, params.ln2_b)
    f = feed_forward(_to_channel_first(t), params.ffn)
    return T.add(x, f)


def channel_projection(x, weight, bias) -> Tensor:
    """1x1 pointwise channel map (N,Cin,H,W) -> (N,Cout,H,W), Cout <= Cin."""
    cout, cin = weight.shape
    if not 1 <= cout <= cin:
        raise ShapeError(f"projection must reduce channels: got {cin} -> {cout}")
    if x.shape[1] != cin:
        raise ShapeError(f"projection expects {cin} channels, got {x.shape[1]}")
    t = linear(_to_channel_last(x), weight, bias)
    return _to_channel_first(t)


def wt_stack(x, blocks: list[WTBlockParams], m: int, projection=None, projection_after: bool = False) -> Tensor:
    """Sequential WT blocks, with an optional decoder channel projection
    applied before the blocks (default) or after (figure-literal order)."""
    if not blocks:
        raise ShapeError("wt_stack needs at least one block")
    if projection is not None and not projection_after:
        x = channel_projection(x, *projection)
    for blk in blocks:
        x = wt_block(x, blk, m)
    if projection is not None and projection_after:
        x = channel_projection(x, *projection)
    return x
