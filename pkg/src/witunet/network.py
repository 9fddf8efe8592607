"""Full network assembly: input embedding, encoder levels, bottleneck, the
nested dense skip lattice, decoder levels, output projection, and the global
residual output = input + correction.

Nodes are indexed (k, v): k is the downsampling depth, v the lateral position.
v=0 is the encoder column (k=D is the bottleneck); v=D-k is the decoder; the
positions in between are dense convolutional nodes. A node at (k, v>0)
concatenates all same-level outputs x[k,0..v-1] with the upsampled x[k+1,v-1]
(v+1 inputs total, channel width (v+1)*2^k*C). Decoder nodes reduce the
concatenation back to 2^k*C with a 1x1 projection and run WT blocks;
intermediate nodes use two 3x3 convs with a GELU between.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .nn import conv2d, conv_transpose2d, gelu
from .blocks import LiPeParams, MlpParams, WTBlockParams, wt_stack
from .rng import uniform_field, derive_seed
from .tensor import Tensor, atomic_write_bytes
from .window import AttentionParams


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; `desk()` is the small CI/test preset."""

    base_channels: int = 32
    depth: int = 4
    window: int = 8
    blocks_per_level: int = 2
    head_dim: int = 16
    lipe_expansion: int = 2
    use_lipe: bool = True  # False -> plain MLP feed-forward
    use_nested: bool = True  # False -> plain U-shaped skips
    projection_after: bool = False
    lipe_depthwise: bool = False
    shared_bias_table: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.window < 1:
            raise ConfigError("depth, base_channels and window must be >= 1")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        if self.lipe_expansion < 1:
            raise ConfigError("lipe_expansion must be >= 1")
        if self.base_channels % self.head_dim:
            raise ConfigError(
                f"base_channels {self.base_channels} must be divisible by head_dim {self.head_dim}"
            )

    @classmethod
    def desk(cls, **overrides) -> "NetConfig":
        kw = dict(base_channels=8, depth=2, window=4, blocks_per_level=1, head_dim=4)
        kw.update(overrides)
        return cls(**kw)

    def level_channels(self, k: int) -> int:
        return (2**k) * self.base_channels

    def concat_channels(self, k: int, v: int) -> int:
        """Channel width entering node (k, v>0) after concatenation."""
        if self.use_nested:
            return (v + 1) * self.level_channels(k)
        return 2 * self.level_channels(k)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "NetConfig":
        return cls(**json.loads(blob))


@dataclass(frozen=True)
class NodeId:
    """Position in the skip lattice; equality/hash consider (k, v) only."""

    k: int
    v: int
    role: str = field(default="", compare=False)


def _make_node(k: int, v: int, depth: int) -> NodeId:
    if v > depth - k or v < 0 or (k == depth and v != 0):
        raise ConfigError(f"invalid node (k={k}, v={v}) for depth {depth}")
    if v == 0:
        role = "bottleneck" if k == depth else "encoder"
    else:
        role = "decoder" if v == depth - k else "intermediate"
    return NodeId(k, v, role)


def node_graph(cfg: NetConfig):
    """All nodes and directed edges of the skip lattice.

    Returns (nodes, edges); edges are (src, dst) with src None for the
    network input feeding the first encoder node.
    """
    d = cfg.depth
    nodes: list[NodeId] = []
    edges: list[tuple[NodeId | None, NodeId]] = []
    made: dict[tuple[int, int], NodeId] = {}

    for k in range(d + 1):
        made[(k, 0)] = _make_node(k, 0, d)
        nodes.append(made[(k, 0)])
        edges.append((made[(k - 1, 0)] if k else None, made[(k, 0)]))

    if cfg.use_nested:
        pairs = [(k, v) for v in range(1, d + 1) for k in range(0, d - v + 1)]
    else:
        pairs = [(k, d - k) for k in range(d - 1, -1, -1)]
    for k, v in pairs:
        node = _make_node(k, v, d)
        nodes.append(node)
        made[(k, v)] = node
        if cfg.use_nested:
            for i in range(v):
                edges.append((made[(k, i)], node))
            edges.append((made[(k + 1, v - 1)], node))
        else:
            edges.append((made[(k, 0)], node))
            below = made[(k + 1, d - k - 1)]  # bottleneck when k+1 == d
            edges.append((below, node))
    return nodes, edges


# ---------------------------------------------------------------------------
# parameter enumeration / initialization
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, c: int, cfg: NetConfig):
    """(name, shape, init) triples for one WT block of width c."""
    yield f"{prefix}.ln1.g", (c,), "ones"
    yield f"{prefix}.ln1.b", (c,), "zeros"
    for nm in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.attn.{nm}", (c, c), "linear"
    rows = 1 if cfg.shared_bias_table else c // cfg.head_dim
    side = 2 * cfg.window - 1
    yield f"{prefix}.attn.bias", (rows, side * side), "zeros"
    yield f"{prefix}.ln2.g", (c,), "ones"
    yield f"{prefix}.ln2.b", (c,), "zeros"
    e = cfg.lipe_expansion
    yield f"{prefix}.ffn.expand.w", (e * c, c), "linear"
    yield f"{prefix}.ffn.expand.b", (e * c,), "zeros"
    if cfg.use_lipe:
        conv_shape = (e * c, 1, 3, 3) if cfg.lipe_depthwise else (e * c, e * c, 3, 3)
        yield f"{prefix}.ffn.conv.w", conv_shape, "conv"
        yield f"{prefix}.ffn.conv.b", (e * c,), "zeros"
    yield f"{prefix}.ffn.restore.w", (c, e * c), "linear"
    yield f"{prefix}.ffn.restore.b", (c,), "zeros"


def _stack_shapes(prefix: str, c: int, cfg: NetConfig):
    for i in range(cfg.blocks_per_level):
        yield from _block_shapes(f"{prefix}.blk{i}", c, cfg)


def param_shapes(cfg: NetConfig):
    """Every (name, shape, init_kind) in the network, in build order.

    Per-component counts: a conv contributes Cout*Cin*kh*kw + Cout, a linear
    Dout*Din (+Dout with bias), layer-norm 2*C, a bias table rows*(2M-1)^2.
    """
    c, d = cfg.base_channels, cfg.depth
    yield "embed.w", (c, 1, 3, 3), "conv"
    yield "embed.b", (c,), "zeros"
    for k in range(d):
        ck = cfg.level_channels(k)
        yield from _stack_shapes(f"enc{k}", ck, cfg)
        yield f"down{k}.w", (2 * ck, ck, 4, 4), "conv"
        yield f"down{k}.b", (2 * ck,), "zeros"
    yield from _stack_shapes("bot", cfg.level_channels(d), cfg)

    def node_prefix(k, v):
        return f"node{k}_{v}"

    if cfg.use_nested:
        pairs = [(k, v) for v in range(1, d + 1) for k in range(0, d - v + 1)]
    else:
        pairs = [(k, d - k) for k in range(d - 1, -1, -1)]
    for k, v in pairs:
        ck = cfg.level_channels(k)
        p = node_prefix(k, v)
        yield f"{p}.up.w", (2 * ck, ck, 2, 2), "conv"
        yield f"{p}.up.b", (ck,), "zeros"
        cat = cfg.concat_channels(k, v)
        if cfg.use_nested and v < d - k:  # intermediate dense conv node
            yield f"{p}.conv1.w", (ck, cat, 3, 3), "conv"
            yield f"{p}.conv1.b", (ck,), "zeros"
            yield f"{p}.conv2.w", (ck, ck, 3, 3), "conv"
            yield f"{p}.conv2.b", (ck,), "zeros"
        else:  # decoder node: projection + WT blocks
            yield f"{p}.proj.w", (ck, cat), "linear"
            yield f"{p}.proj.b", (ck,), "zeros"
            width = cat if cfg.projection_after else ck
            yield from _stack_shapes(p, width, cfg)
    yield "out.w", (1, c, 3, 3), "out_zero"
    yield "out.b", (1,), "zeros"


def param_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_shapes(cfg))


class ParamStore:
    """Named parameter tensors plus per-parameter optimizer slots.

    Names are unique and hierarchical; iteration order is the registration
    (build) order, which is deterministic for a config.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


_INIT_KINDS = ("conv", "linear", "zeros", "ones", "out_zero")


def _fan_in(shape, kind) -> int:
    if kind == "conv":
        return int(np.prod(shape[1:]))
    return shape[-1]


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Build the store. Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases,
    bias tables and the output projection start at zero so the network is the
    identity map at step 0; layer-norm gains start at one."""
    store = ParamStore()
    for i, (name, shape, kind) in enumerate(param_shapes(cfg)):
        if kind in ("zeros", "out_zero"):
            arr = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(_fan_in(shape, kind))
            arr = uniform_field(derive_seed(seed, i), shape, -bound, bound).astype(dtype)
        store.register(name, Tensor(arr, requires_grad=True))
    return store


# ---------------------------------------------------------------------------
# parameter binding: structured views over the flat store
# ---------------------------------------------------------------------------

def _bind_block(store: ParamStore, prefix: str, cfg: NetConfig) -> WTBlockParams:
    heads_rows = store[f"{prefix}.attn.bias"].shape[0]
    c = store[f"{prefix}.attn.wq"].shape[0]
    attn = AttentionParams(
        wq=store[f"{prefix}.attn.wq"],
        wk=store[f"{prefix}.attn.wk"],
        wv=store[f"{prefix}.attn.wv"],
        wo=store[f"{prefix}.attn.wo"],
        bias_table=store[f"{prefix}.attn.bias"],
        heads=c // cfg.head_dim,
        side=cfg.window,
    )
    if cfg.use_lipe:
        ffn = LiPeParams(
            expand_w=store[f"{prefix}.ffn.expand.w"],
            expand_b=store[f"{prefix}.ffn.expand.b"],
            conv_w=store[f"{prefix}.ffn.conv.w"],
            conv_b=store[f"{prefix}.ffn.conv.b"],
            restore_w=store[f"{prefix}.ffn.restore.w"],
            restore_b=store[f"{prefix}.ffn.restore.b"],
            depthwise=cfg.lipe_depthwise,
        )
    else:
        ffn = MlpParams(
            expand_w=store[f"{prefix}.ffn.expand.w"],
            expand_b=store[f"{prefix}.ffn.expand.b"],
            restore_w=store[f"{prefix}.ffn.restore.w"],
            restore_b=store[f"{prefix}.ffn.restore.b"],
        )
    return WTBlockParams(
        ln1_g=store[f"{prefix}.ln1.g"],
        ln1_b=store[f"{prefix}.ln1.b"],
        ln2_g=store[f"{prefix}.ln2.g"],
        ln2_b=store[f"{prefix}.ln2.b"],
        attn=attn,
        ffn=ffn,
    )


def _bind_stack(store: ParamStore, prefix: str, cfg: NetConfig) -> list[WTBlockParams]:
    return [_bind_block(store, f"{prefix}.blk{i}", cfg) for i in range(cfg.blocks_per_level)]


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def input_embed(y, weight, bias) -> Tensor:
    """3x3 stride-1 pad-1 conv lifting the 1-channel image to C channels."""
    if y.shape[1] != 1:
        raise ShapeError(f"input must be single-channel, got {y.shape[1]}")
    return conv2d(y, weight, bias, stride=1, padding=1)


def downsample(x, weight, bias) -> Tensor:
    """4x4 stride-2 pad-1 conv: channels double, extents halve."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even extents, got ({h},{w})")
    if weight.shape[0] != 2 * c:
        raise ShapeError(f"downsample must double channels: {c} -> {weight.shape[0]}")
    return conv2d(x, weight, bias, stride=2, padding=1)


def upsample(x, weight, bias) -> Tensor:
    """2x2 stride-2 transposed conv: channels halve, extents double."""
    n, c, h, w = x.shape
    if c % 2:
        raise ConfigError(f"upsample needs an even channel count, got {c}")
    if weight.shape[0] != c or weight.shape[1] != c // 2:
        raise ShapeError(f"upsample weight {weight.shape} incompatible with {c} channels")
    return conv_transpose2d(x, weight, bias, stride=2)


def intermediate_node(inputs: list, upsampled, conv1, conv2) -> Tensor:
    """Dense lattice node: concat all inputs, then conv3x3 -> GELU -> conv3x3."""
    shapes = {tuple(t.shape[2:]) for t in inputs} | {tuple(upsampled.shape[2:])}
    if len(shapes) != 1:
        raise ShapeError(f"node inputs disagree on spatial extents: {sorted(shapes)}")
    cat = T.concat(list(inputs) + [upsampled], axis=1)
    h = gelu(conv2d(cat, conv1[0], conv1[1], stride=1, padding=1))
    return conv2d(h, conv2[0], conv2[1], stride=1, padding=1)


def forward(y, store: ParamStore, cfg: NetConfig, trace: dict | None = None) -> Tensor:
    """Denoise: returns input + predicted correction, same shape as y.

    Extents that are not multiples of 2^depth are zero-padded bottom/right for
    the pyramid and the correction is cropped back before the residual add
    (window divisibility inside blocks is handled by the block itself).
    """
    y = T._as_tensor(y)
    if y.ndim != 4 or y.shape[1] != 1:
        raise ShapeError(f"expected (N,1,H,W) input, got {y.shape}")
    d = cfg.depth
    n, _, h, w = y.shape
    mult = 2**d
    yp = T.pad2d(y, (-h) % mult, (-w) % mult)

    x = {}  # (k, v) -> node output
    t = input_embed(yp, store["embed.w"], store["embed.b"])
    x[0, 0] = wt_stack(t, _bind_stack(store, "enc0", cfg), cfg.window)
    for k in range(1, d + 1):
        down = downsample(x[k - 1, 0], store[f"down{k-1}.w"], store[f"down{k-1}.b"])
        prefix = "bot" if k == d else f"enc{k}"
        x[k, 0] = wt_stack(down, _bind_stack(store, prefix, cfg), cfg.window)
    if trace is not None:
        for k in range(d + 1):
            trace[("node", k, 0)] = tuple(x[k, 0].shape)

    def decode(k, v, prefix, inputs, up):
        cat = T.concat(inputs + [up], axis=1)
        if trace is not None:
            trace[("concat", k, v)] = cat.shape[1]
        projection = (store[f"{prefix}.proj.w"], store[f"{prefix}.proj.b"])
        return wt_stack(
            cat, _bind_stack(store, prefix, cfg), cfg.window,
            projection=projection, projection_after=cfg.projection_after,
        )

    if cfg.use_nested:
        for v in range(1, d + 1):
            for k in range(0, d - v + 1):
                prefix = f"node{k}_{v}"
                up = upsample(x[k + 1, v - 1], store[f"{prefix}.up.w"], store[f"{prefix}.up.b"])
                inputs = [x[k, i] for i in range(v)]
                if v < d - k:
                    cat_width = cfg.concat_channels(k, v)
                    if trace is not None:
                        trace[("concat", k, v)] = cat_width
                    x[k, v] = intermediate_node(
                        inputs, up,
                        (store[f"{prefix}.conv1.w"], store[f"{prefix}.conv1.b"]),
                        (store[f"{prefix}.conv2.w"], store[f"{prefix}.conv2.b"]),
                    )
                else:
                    x[k, v] = decode(k, v, prefix, inputs, up)
                if trace is not None:
                    trace[("node", k, v)] = tuple(x[k, v].shape)
    else:
        for k in range(d - 1, -1, -1):
            v = d - k
            prefix = f"node{k}_{v}"
            below = x[k + 1, d - (k + 1)] if k + 1 < d else x[d, 0]
            up = upsample(below, store[f"{prefix}.up.w"], store[f"{prefix}.up.b"])
            x[k, v] = decode(k, v, prefix, [x[k, 0]], up)
            if trace is not None:
                trace[("node", k, v)] = tuple(x[k, v].shape)

    r = conv2d(x[0, d], store["out.w"], store["out.b"], stride=1, padding=1)
    r = T.crop2d(r, h, w)
    return T.add(y, r)


# ---------------------------------------------------------------------------
# WITU checkpoints: magic "WITU", u32 version=1, u32 config length + JSON,
# u32 tensor count, then per tensor: u32 name length, name, u32 ndim,
# ndim x u64 extents, f32 LE data.
# ---------------------------------------------------------------------------

_WITU_MAGIC = b"WITU"
_WITU_VERSION = 1


def _expected_shapes(cfg: NetConfig) -> dict[str, tuple]:
    return {name: tuple(shape) for name, shape, _ in param_shapes(cfg)}


def save_checkpoint(path: str, cfg: NetConfig, store: ParamStore, include_optimizer: bool = True,
                    extra_scalars: dict[str, float] | None = None) -> None:
    """Serialize params (and optionally optimizer moments + counters).

    Tensors are written in sorted-name order so save -> load -> save is
    byte-identical.
    """
    entries: dict[str, np.ndarray] = {name: t.data for name, t in store.items()}
    if include_optimizer:
        for name, slots in store.opt_state.items():
            entries[f"opt.m.{name}"] = slots["m"]
            entries[f"opt.v.{name}"] = slots["v"]
        entries["opt.t"] = np.asarray(float(store.step), dtype=np.float32)
    for key, val in (extra_scalars or {}).items():
        entries[key] = np.asarray(float(val), dtype=np.float32)

    blob = bytearray()
    blob += _WITU_MAGIC
    cfg_bytes = cfg.to_json().encode("utf-8")
    blob += struct.pack("<II", _WITU_VERSION, len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype=np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", arr.ndim)
        if arr.ndim:
            blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path: str):
    """Read a checkpoint; returns (cfg, store, extras dict of scalar tensors).

    Validates that every parameter the config requires is present with the
    right shape and that no unexpected parameter tensors sneak in.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _WITU_MAGIC:
        raise ConfigError(f"{path}: not a WITU checkpoint")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != _WITU_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = NetConfig.from_json(blob[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        n_items = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off).reshape(shape)
        off += 4 * n_items
        raw[name] = arr.astype(np.float32)  # astype copies out of the read-only buffer

    expected = _expected_shapes(cfg)
    store = ParamStore()
    extras: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in raw:
            raise ConfigError(f"{path}: missing parameter {name!r}")
        if tuple(raw[name].shape) != shape:
            raise ConfigError(
                f"{path}: parameter {name!r} has shape {raw[name].shape}, config expects {shape}"
            )
        store.register(name, Tensor(raw[name], requires_grad=True))
    for name, arr in raw.items():
        if name in expected:
            continue
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            pname = name[6:]
            if pname not in expected:
                raise ConfigError(f"{path}: optimizer slot for unknown parameter {pname!r}")
            slot = store.opt_state.setdefault(
                pname,
                {"m": np.zeros(expected[pname], np.float32), "v": np.zeros(expected[pname], np.float32)},
            )
            slot["m" if name.startswith("opt.m.") else "v"] = arr
        elif name == "opt.t":
            store.step = int(arr.flat[0])
        else:
            extras[name] = arr
    return cfg, store, extras


class WiTUnet:
    """Config + parameters bundled for inference convenience."""

    def __init__(self, cfg: NetConfig, store: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg, seed)

    @classmethod
    def from_checkpoint(cls, path: str) -> "WiTUnet":
        cfg, store, _ = load_checkpoint(path)
        return cls(cfg, store)

    def forward(self, y, trace: dict | None = None) -> Tensor:
        return forward(y, self.store, self.cfg, trace=trace)

    def denoise(self, image: np.ndarray) -> np.ndarray:
        """Run on one (H,W) or (1,H,W) image without building a tape."""
        arr = np.asarray(image, dtype=np.float32)
        squeeze = arr.ndim == 2
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ShapeError(f"expected (H,W) or (1,H,W) image, got {arr.shape}")
        with T.no_grad():
            out = self.forward(Tensor(arr[None])).data[0]
        return out[0] if squeeze else out
