"""Forward-only GraphScan-Mamba backbone.

Layout (all feature maps are ``H x W x C`` float64 arrays):

* stem: 3x3 stride-2 conv to ``C1/2``, GELU, 3x3 stride-2 conv to ``C1``
* stage ``s``: (downsample for ``s > 0``: 3x3 stride-2 conv + LayerNorm),
  then ``N_s`` blocks
* block: ``X += DWConv(X)``; ``X += GSSM(LN(X))``; ``X += ConvFFN(BN(X))``
* GSSM: ``Proj_out(LN(SSM(GraphScan(SiLU(DWConv(Proj_in(X)))))))``
* global average pool of the last stage

All 3x3 convolutions pad by clamping coordinates (replicate padding), the
same boundary rule GraphScan windows use.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError
from .graphscan import ProjectionSet, TokenGrid, graphscan, window_size
from .selective_scan import SsmCore, selective_scan_fused
from .tensor import gelu, make_rng, silu, uniform_init

LN_EPS = 1e-6
BN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    mlp_ratios: tuple[float, float, float, float]
    radii: tuple[int, int, int, int] = (1, 1, 2, 3)
    heads: int = 1
    rel_bias: bool = True
    state_dim: int = 16
    expansion: int = 1
    qk_ratio: float = 0.25
    value_ratio: float = 0.25
    in_channels: int = 3
    name: str = "custom"

    def __post_init__(self):
        for f in ("channels", "depths", "mlp_ratios", "radii"):
            v = tuple(getattr(self, f))
            if len(v) != 4:
                raise ParameterError(f"{f} needs 4 entries, got {v}")
            object.__setattr__(self, f, v)
        if any(c < 1 for c in self.channels) or any(d < 0 for d in self.depths):
            raise ParameterError("channels must be positive and depths non-negative")
        if any(r < 0 for r in self.radii):
            raise ParameterError(f"radii must be >= 0, got {self.radii}")
        for s in range(4):
            inner = self.inner_width(s)
            d, dv = self.qk_dim(s), self.value_dim(s)
            if d < 1 or dv < 1 or d % self.heads or dv % self.heads:
                raise ParameterError(
                    f"stage {s + 1}: d={d}, d_v={dv} must be positive multiples of heads={self.heads}")
            if int(round(self.mlp_ratios[s] * self.channels[s])) < 1 or inner < 1:
                raise ParameterError(f"stage {s + 1}: widths must be positive")

    def inner_width(self, s: int) -> int:
        return int(self.expansion * self.channels[s])

    def qk_dim(self, s: int) -> int:
        return int(round(self.qk_ratio * self.inner_width(s)))

    def value_dim(self, s: int) -> int:
        return int(round(self.value_ratio * self.inner_width(s)))

    def hidden_width(self, s: int) -> int:
        return int(round(self.mlp_ratios[s] * self.channels[s]))

    def scaled(self, width_factor: float) -> "BackboneConfig":
        chans = tuple(int(round(c * width_factor)) for c in self.channels)
        return replace(self, channels=chans, name=f"{self.name}x{width_factor:g}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown backbone config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "BackboneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


PRESETS: dict[str, BackboneConfig] = {
    "tiny": BackboneConfig((80, 160, 320, 512), (3, 4, 12, 5), (4, 4, 3, 3), name="tiny"),
    "small": BackboneConfig((96, 192, 384, 512), (4, 8, 20, 6), (4, 4, 3, 3), name="small"),
    "base": BackboneConfig((112, 224, 448, 640), (4, 8, 25, 8), (4, 4, 3, 4), name="base"),
}

# published parameter / FLOP figures at 224x224
PUBLISHED_TARGETS: dict[str, tuple[float, float]] = {
    "tiny": (28e6, 5.2e9),
    "small": (49e6, 11.1e9),
    "base": (93e6, 17.8e9),
}


def preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ParameterError(f"unknown variant {name!r}; valid: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- layers


def _clamped_patches(x: np.ndarray, stride: int) -> np.ndarray:
    """``(Ho, Wo, 9, C)`` 3x3 neighbourhoods with clamped borders."""
    H, W, _ = x.shape
    Ho, Wo = -(-H // stride), -(-W // stride)
    rows = stride * np.arange(Ho)[:, None] + np.arange(-1, 2)[None, :]
    cols = stride * np.arange(Wo)[:, None] + np.arange(-1, 2)[None, :]
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    p = x[rows[:, None, :, None], cols[None, :, None, :]]  # (Ho, Wo, 3, 3, C)
    return p.reshape(Ho, Wo, 9, x.shape[2])


def conv3x3(x, w, b, stride: int = 1) -> np.ndarray:
    """Dense 3x3 convolution, ``w`` of shape ``(3, 3, Cin, Cout)``."""
    if w.shape[2] != x.shape[2]:
        raise DimensionError(f"conv expects {w.shape[2]} input channels, got {x.shape[2]}")
    p = _clamped_patches(x, stride)
    Ho, Wo = p.shape[:2]
    out = p.reshape(Ho * Wo, -1) @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(Ho, Wo, -1)


def dwconv3x3(x, w, b) -> np.ndarray:
    """Depthwise 3x3 convolution, ``w`` of shape ``(3, 3, C)``."""
    p = _clamped_patches(x, 1)
    return np.einsum("hwkc,kc->hwc", p, w.reshape(9, -1)) + b


def pointwise(x, w, b) -> np.ndarray:
    return x @ w + b


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def batch_norm(x, gamma, beta, eps: float = BN_EPS) -> np.ndarray:
    """Inference-mode BN with running mean 0 and running variance 1."""
    return x / np.sqrt(1.0 + eps) * gamma + beta


# ---------------------------------------------------------------- params


@dataclass
class GssmParams:
    proj_in_w: np.ndarray
    proj_in_b: np.ndarray
    dw_w: np.ndarray
    dw_b: np.ndarray
    graph: ProjectionSet
    ssm: SsmCore
    norm_g: np.ndarray
    norm_b: np.ndarray
    proj_out_w: np.ndarray
    proj_out_b: np.ndarray


@dataclass
class BlockParams:
    radius: int
    pos_w: np.ndarray
    pos_b: np.ndarray
    ln_g: np.ndarray
    ln_b: np.ndarray
    gssm: GssmParams
    bn_g: np.ndarray
    bn_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    ffn_dw_w: np.ndarray
    ffn_dw_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray


@dataclass
class BackboneParams:
    config: BackboneConfig
    stem: list[np.ndarray]  # conv1_w, conv1_b, conv2_w, conv2_b
    downsamples: list[list[np.ndarray]]  # per stage 2..4: conv_w, conv_b, ln_g, ln_b
    stages: list[list[BlockParams]] = field(default_factory=list)


def _uni(rng, shape, fan_in):
    return uniform_init(rng, shape, 1.0 / np.sqrt(fan_in))


def init_gssm(rng, dim: int, inner: int, radius: int, cfg: BackboneConfig, s: int,
              zero_output: bool = True) -> GssmParams:
    graph = ProjectionSet.init(rng, inner, radius, qk_dim=cfg.qk_dim(s), value_dim=cfg.value_dim(s),
                               heads=cfg.heads, rel_bias=cfg.rel_bias, zero_output=zero_output)
    return GssmParams(
        _uni(rng, (dim, inner), dim), np.zeros(inner),
        _uni(rng, (3, 3, inner), 9), np.zeros(inner),
        graph, SsmCore.init(rng, inner, cfg.state_dim),
        np.ones(inner), np.zeros(inner),
        _uni(rng, (inner, dim), inner), np.zeros(dim),
    )


def init_block(rng, cfg: BackboneConfig, s: int, zero_output: bool = True) -> BlockParams:
    C, hid = cfg.channels[s], cfg.hidden_width(s)
    return BlockParams(
        cfg.radii[s],
        _uni(rng, (3, 3, C), 9), np.zeros(C),
        np.ones(C), np.zeros(C),
        init_gssm(rng, C, cfg.inner_width(s), cfg.radii[s], cfg, s, zero_output),
        np.ones(C), np.zeros(C),
        _uni(rng, (C, hid), C), np.zeros(hid),
        _uni(rng, (3, 3, hid), 9), np.zeros(hid),
        _uni(rng, (hid, C), hid), np.zeros(C),
    )


def init_backbone(cfg: BackboneConfig, seed: int = 0, zero_output: bool = True) -> BackboneParams:
    """Seeded parameters. ``zero_output`` zero-initialises every GraphScan ``W_o``."""
    rng = make_rng(seed)
    c0, cin = cfg.channels[0], cfg.in_channels
    mid = max(c0 // 2, 1)
    stem = [_uni(rng, (3, 3, cin, mid), 9 * cin), np.zeros(mid),
            _uni(rng, (3, 3, mid, c0), 9 * mid), np.zeros(c0)]
    downs = []
    for s in range(1, 4):
        a, b = cfg.channels[s - 1], cfg.channels[s]
        downs.append([_uni(rng, (3, 3, a, b), 9 * a), np.zeros(b), np.ones(b), np.zeros(b)])
    params = BackboneParams(cfg, stem, downs)
    for s in range(4):
        params.stages.append([init_block(rng, cfg, s, zero_output) for _ in range(cfg.depths[s])])
    return params


def _arrays(obj):
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for o in obj:
            yield from _arrays(o)
    elif isinstance(obj, (GssmParams, BlockParams, BackboneParams)):
        for f in fields(obj):
            if f.name != "config":
                yield from _arrays(getattr(obj, f.name))
    elif isinstance(obj, ProjectionSet):
        yield from (a for a in (obj.w_q, obj.w_k, obj.w_v, obj.w_o, obj.b_rel) if a is not None)
    elif isinstance(obj, SsmCore):
        yield from (obj.A, obj.w_delta, obj.bias_delta, obj.w_b, obj.w_c)


def count_instantiated(params) -> int:
    """Number of learnable scalars actually held by a parameter tree."""
    return int(sum(a.size for a in _arrays(params)))


def zero_branches(block: BlockParams) -> BlockParams:
    """Copy of ``block`` with every branch weight and bias set to zero."""
    z = np.zeros_like
    g = block.gssm
    gz = GssmParams(z(g.proj_in_w), z(g.proj_in_b), z(g.dw_w), z(g.dw_b),
                    g.graph.with_output(z(g.graph.w_o)), g.ssm, g.norm_g, g.norm_b,
                    z(g.proj_out_w), z(g.proj_out_b))
    return replace(block, pos_w=z(block.pos_w), pos_b=z(block.pos_b), gssm=gz,
                   fc1_w=z(block.fc1_w), fc1_b=z(block.fc1_b), ffn_dw_w=z(block.ffn_dw_w),
                   ffn_dw_b=z(block.ffn_dw_b), fc2_w=z(block.fc2_w), fc2_b=z(block.fc2_b))


def set_graph_outputs(params: BackboneParams, fn) -> BackboneParams:
    """Replace every GraphScan ``W_o`` by ``fn(w_o)`` (in place; returns params)."""
    for stage in params.stages:
        for blk in stage:
            blk.gssm.graph = blk.gssm.graph.with_output(fn(blk.gssm.graph.w_o))
    return params


# ---------------------------------------------------------------- forward


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, TokenGrid) else np.asarray(x, dtype=np.float64)


def gssm_forward(x, p: GssmParams, radius: int, use_graphscan: bool = True,
                 backend: str | None = None) -> TokenGrid:
    x = _features(x)
    H, W, _ = x.shape
    t = silu(dwconv3x3(pointwise(x, p.proj_in_w, p.proj_in_b), p.dw_w, p.dw_b))
    grid = TokenGrid(t)
    if use_graphscan:
        grid = graphscan(grid, p.graph, radius, backend=backend)
    y = selective_scan_fused(p.ssm, grid.tokens, backend=backend).reshape(H, W, -1)
    return TokenGrid(pointwise(layer_norm(y, p.norm_g, p.norm_b), p.proj_out_w, p.proj_out_b))


def ffn_forward(x, p: BlockParams) -> np.ndarray:
    h = pointwise(x, p.fc1_w, p.fc1_b)
    h = gelu(dwconv3x3(h, p.ffn_dw_w, p.ffn_dw_b))
    return pointwise(h, p.fc2_w, p.fc2_b)


def block_forward(x, p: BlockParams, use_graphscan: bool = True,
                  backend: str | None = None) -> TokenGrid:
    x = _features(x)
    if x.shape[2] != p.pos_w.shape[2]:
        raise DimensionError(f"block expects {p.pos_w.shape[2]} channels, got {x.shape[2]}")
    x = x + dwconv3x3(x, p.pos_w, p.pos_b)
    x = x + gssm_forward(layer_norm(x, p.ln_g, p.ln_b), p.gssm, p.radius,
                         use_graphscan=use_graphscan, backend=backend).features
    x = x + ffn_forward(batch_norm(x, p.bn_g, p.bn_b), p)
    return TokenGrid(x)


def stage_shapes(cfg: BackboneConfig, height: int, width: int | None = None) -> list[tuple[int, int, int]]:
    width = height if width is None else width
    if height % 32 or width % 32:
        raise ParameterError(f"input {height}x{width} must be divisible by 32")
    return [(height // f, width // f, c) for f, c in zip((4, 8, 16, 32), cfg.channels)]


@dataclass(frozen=True)
class BackboneOutput:
    stages: list[np.ndarray]
    pooled: np.ndarray


def backbone_forward(img, params: BackboneParams, use_graphscan: bool = True,
                     backend: str | None = None) -> BackboneOutput:
    x = _features(img)
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.in_channels:
        raise DimensionError(f"image must be H x W x {cfg.in_channels}, got {x.shape}")
    stage_shapes(cfg, x.shape[0], x.shape[1])
    w1, b1, w2, b2 = params.stem
    x = conv3x3(gelu(conv3x3(x, w1, b1, stride=2)), w2, b2, stride=2)
    outs = []
    for s in range(4):
        if s > 0:
            cw, cb, g, b = params.downsamples[s - 1]
            x = layer_norm(conv3x3(x, cw, cb, stride=2), g, b)
        for blk in params.stages[s]:
            x = block_forward(x, blk, use_graphscan=use_graphscan, backend=backend).features
        outs.append(x)
    return BackboneOutput(outs, x.mean(axis=(0, 1)))


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int  # multiply-accumulates
    breakdown: dict[str, tuple[int, int]]


def count_params_flops(cfg: BackboneConfig, resolution: int = 224) -> CostReport:
    """Analytic parameter and FLOP counts, without building any tensors.

    FLOPs follow the vision-backbone convention of one multiply-accumulate per
    FLOP. Convolutions count per output position; GraphScan counts its four
    projections plus ``L * S * (d + d_v)`` for the window; the selective scan
    counts its three generator projections plus three MACs per state entry
    (discretize, update, readout). Biases, norms and activations are free.
    """
    parts: dict[str, list[int]] = {}

    def add(key, p, f):
        acc = parts.setdefault(key, [0, 0])
        acc[0] += int(p)
        acc[1] += int(f)

    c0, cin = cfg.channels[0], cfg.in_channels
    mid = max(c0 // 2, 1)
    r1, r2 = resolution // 2, resolution // 4
    add("stem", 9 * cin * mid + mid + 9 * mid * c0 + c0,
        r1 * r1 * 9 * cin * mid + r2 * r2 * 9 * mid * c0)
    for s in range(4):
        C = cfg.channels[s]
        side = resolution // (4 * 2**s)
        L = side * side
        if s > 0:
            a = cfg.channels[s - 1]
            add("downsample", 9 * a * C + C + 2 * C, L * 9 * a * C)
        n = cfg.depths[s]
        Ci, hid, N = cfg.inner_width(s), cfg.hidden_width(s), cfg.state_dim
        d, dv, S = cfg.qk_dim(s), cfg.value_dim(s), window_size(cfg.radii[s])
        add("pos_dwconv", n * 10 * C, n * L * 9 * C)
        add("norms", n * (2 * C + 2 * C + 2 * Ci), 0)
        add("gssm_proj", n * (C * Ci + Ci + Ci * C + C), n * L * 2 * C * Ci)
        add("gssm_dwconv", n * 10 * Ci, n * L * 9 * Ci)
        add("graphscan", n * (2 * Ci * d + 2 * Ci * dv + (S if cfg.rel_bias else 0)),
            n * L * (2 * Ci * d + 2 * Ci * dv + S * (d + dv)))
        add("ssm", n * (Ci * N + Ci * Ci + Ci + 2 * Ci * N),
            n * L * (Ci * Ci + 2 * Ci * N + 3 * Ci * N))
        add("ffn", n * (C * hid + hid + 10 * hid + hid * C + C),
            n * L * (2 * C * hid + 9 * hid))
    total_p = sum(v[0] for v in parts.values())
    total_f = sum(v[1] for v in parts.values())
    return CostReport(total_p, total_f, {k: (v[0], v[1]) for k, v in parts.items()})
