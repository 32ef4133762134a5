"""Shared representation trunk: windowed spatio-temporal attention stages.

Blocks are pre-norm residual transformer blocks whose attention is
restricted to local (Wt, Wh, Ww) windows of the token grid, with the
window partition cyclically shifted on alternating blocks (cross-window
mixing via masked attention on the rolled grid). Attention logits carry a
decomposed relative position bias: one learned table indexed by spatial
offset, one by temporal offset. Stages are separated by spatial 2x2 patch
merging; the temporal extent is never merged.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import LayerNorm, Linear, Mlp, collect_parameters, trunc_normal
from .tensor import (Parameter, ShapeError, Tensor, add, crop, matmul, mul,
                     pad, reshape, roll, softmax_last, split_last, take_rows,
                     transpose)

MASK_NEG = -1e9


@dataclass
class TrunkConfig:
    stage_depths: list = field(default_factory=lambda: [2, 2])
    stage_dims: list = field(default_factory=lambda: [16, 32])
    heads_per_stage: list = field(default_factory=lambda: [2, 4])
    window: tuple = (2, 2, 2)
    drop_path_rate: float = 0.1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.window = tuple(self.window)
        if not (len(self.stage_depths) == len(self.stage_dims) == len(self.heads_per_stage)):
            raise ValueError("stage_depths, stage_dims, heads_per_stage must align")
        for dim, heads in zip(self.stage_dims, self.heads_per_stage):
            if dim % heads:
                raise ValueError(f"stage dim {dim} not divisible by heads {heads}")

    @property
    def final_dim(self):
        return self.stage_dims[-1]

    @property
    def feature_stage(self):
        """Stage whose output grid feeds retrieval: the third stage when
        there are at least three, otherwise the last one."""
        return min(2, len(self.stage_depths) - 1)


# Full-scale presets are recorded for reference; the toy default is the
# config actually exercised on CPU.
PRESETS = {
    "toy": TrunkConfig(),
    "swin_t": TrunkConfig(stage_depths=[2, 2, 6, 2], stage_dims=[96, 192, 384, 768],
                          heads_per_stage=[3, 6, 12, 24], window=(8, 7, 7),
                          drop_path_rate=0.1),
    "swin_b": TrunkConfig(stage_depths=[2, 2, 18, 2], stage_dims=[128, 256, 512, 1024],
                          heads_per_stage=[4, 8, 16, 32], window=(16, 7, 7),
                          drop_path_rate=0.3),
}


def rel_pos_index(window):
    """Index maps from token-pair offsets into the two bias tables.

    Token order is row-major over (t, h, w) inside the window. For a pair
    with offsets (dt, dh, dw): spatial row = (dh+Wh-1)*(2Ww-1) + (dw+Ww-1),
    temporal row = dt+Wt-1. Returns two [N, N] int arrays.
    """
    wt, wh, ww = window
    coords = np.stack(np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww),
                                  indexing="ij"), axis=-1).reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :]
    spatial = (delta[..., 1] + wh - 1) * (2 * ww - 1) + (delta[..., 2] + ww - 1)
    temporal = delta[..., 0] + wt - 1
    return spatial, temporal


def _segments(size, win, shift):
    if shift == 0:
        return [slice(0, size)]
    return [slice(0, size - win), slice(size - win, size - shift), slice(size - shift, size)]


@dataclass
class WindowLayout:
    """Geometry of one windowed-attention pass over a token grid."""
    extents: tuple          # real grid extents (T, H, W)
    padded: tuple           # extents after pad-to-window-multiple
    window: tuple
    shift: tuple
    mask: object            # [nW, N, N] additive mask, or None when all-zero

    @property
    def num_windows(self):
        return int(np.prod([p // w for p, w in zip(self.padded, self.window)]))


def build_layout(extents, window, shift, dtype=np.float32):
    """Precompute padding, and the attention mask that blocks pairs whose
    tokens belong to different regions after the cyclic shift (and blocks
    padded tokens entirely, each padded cell forming its own region)."""
    T, H, W = extents
    wt, wh, ww = window
    pt, ph, pw = (math.ceil(T / wt) * wt, math.ceil(H / wh) * wh, math.ceil(W / ww) * ww)
    st, sh, sw = shift

    labels = np.zeros((pt, ph, pw), dtype=np.int64)
    cnt = 0
    for s0 in _segments(pt, wt, st):
        for s1 in _segments(ph, wh, sh):
            for s2 in _segments(pw, ww, sw):
                labels[s0, s1, s2] = cnt
                cnt += 1
    padded_cells = np.ones((pt, ph, pw), dtype=bool)
    padded_cells[:T, :H, :W] = False
    if any(shift):
        padded_cells = np.roll(padded_cells, (-st, -sh, -sw), axis=(0, 1, 2))
    if padded_cells.any():
        labels[padded_cells] = -1 - np.arange(int(padded_cells.sum()))

    win_labels = labels.reshape(pt // wt, wt, ph // wh, wh, pw // ww, ww)
    win_labels = win_labels.transpose(0, 2, 4, 1, 3, 5).reshape(-1, wt * wh * ww)
    diff = win_labels[:, :, None] != win_labels[:, None, :]
    mask = np.where(diff, MASK_NEG, 0.0).astype(dtype) if diff.any() else None
    return WindowLayout(extents=(T, H, W), padded=(pt, ph, pw),
                        window=window, shift=shift, mask=mask)


def window_partition(x, layout):
    """[B, T, H, W, d] -> [B*nW, N, d], cyclic shift applied first."""
    b, T, H, W, d = x.shape
    pt, ph, pw = layout.padded
    wt, wh, ww = layout.window
    if (pt, ph, pw) != (T, H, W):
        x = pad(x, ((0, 0), (0, pt - T), (0, ph - H), (0, pw - W), (0, 0)))
    if any(layout.shift):
        x = roll(x, tuple(-s for s in layout.shift), axes=(1, 2, 3))
    x = reshape(x, (b, pt // wt, wt, ph // wh, wh, pw // ww, ww, d))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(x, (b * layout.num_windows, wt * wh * ww, d))


def window_reverse(windows, layout, batch):
    """Inverse of window_partition, cropping any padding back off."""
    pt, ph, pw = layout.padded
    wt, wh, ww = layout.window
    d = windows.shape[-1]
    x = reshape(windows, (batch, pt // wt, ph // wh, pw // ww, wt, wh, ww, d))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    x = reshape(x, (batch, pt, ph, pw, d))
    if any(layout.shift):
        x = roll(x, layout.shift, axes=(1, 2, 3))
    T, H, W = layout.extents
    if (pt, ph, pw) != (T, H, W):
        x = crop(x, (slice(None), slice(0, T), slice(0, H), slice(0, W), slice(None)))
    return x


class RelPosBias:
    """Decomposed relative position bias: spatial table + temporal table."""

    def __init__(self, window, heads, name, rng, dtype=np.float32):
        wt, wh, ww = window
        self.heads = heads
        self.n_tokens = wt * wh * ww
        self.spatial_table = Parameter(
            trunc_normal(rng, ((2 * wh - 1) * (2 * ww - 1), heads), dtype=dtype),
            f"{name}.spatial_table", decay_exempt=True)
        self.temporal_table = Parameter(
            trunc_normal(rng, (2 * wt - 1, heads), dtype=dtype),
            f"{name}.temporal_table", decay_exempt=True)
        spatial_idx, temporal_idx = rel_pos_index(window)
        self.spatial_idx = spatial_idx.reshape(-1)
        self.temporal_idx = temporal_idx.reshape(-1)

    def parameters(self):
        return [self.spatial_table, self.temporal_table]

    def __call__(self):
        """Bias Tensor [heads, N, N] added to attention logits."""
        n = self.n_tokens
        b = add(take_rows(self.spatial_table, self.spatial_idx),
                take_rows(self.temporal_table, self.temporal_idx))
        return transpose(reshape(b, (n, n, self.heads)), (2, 0, 1))


class WindowAttention:
    """Multi-head self-attention inside one window, bias and mask on logits."""

    def __init__(self, dim, heads, window, name, rng, dtype=np.float32):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = Linear(dim, 3 * dim, f"{name}.qkv", rng, dtype)
        self.proj = Linear(dim, dim, f"{name}.proj", rng, dtype)
        self.bias = RelPosBias(window, heads, f"{name}.rel_pos", rng, dtype)

    def parameters(self):
        return self.qkv.parameters() + self.proj.parameters() + self.bias.parameters()

    def __call__(self, windows, mask=None, batch=1):
        bn, n, d = windows.shape
        q, k, v = split_last(self.qkv(windows), [d, d, d])
        q = transpose(reshape(q, (bn, n, self.heads, self.head_dim)), (0, 2, 1, 3))
        k = transpose(reshape(k, (bn, n, self.heads, self.head_dim)), (0, 2, 1, 3))
        v = transpose(reshape(v, (bn, n, self.heads, self.head_dim)), (0, 2, 1, 3))
        logits = matmul(mul(q, self.scale), transpose(k, (0, 1, 3, 2)))
        logits = add(logits, self.bias())
        if mask is not None:
            nw = mask.shape[0]
            logits = reshape(logits, (batch, nw, self.heads, n, n))
            logits = add(logits, Tensor(mask[:, None, :, :], dtype=mask.dtype))
            logits = reshape(logits, (bn, self.heads, n, n))
        attn = softmax_last(logits)
        out = transpose(matmul(attn, v), (0, 2, 1, 3))
        return self.proj(reshape(out, (bn, n, d)))


def drop_path(branch, p, train, rng):
    """Stochastic depth on a residual branch, per batch element, with
    keep-probability scaling so the expectation matches the p=0 output."""
    if not train or p == 0.0:
        return branch
    b = branch.shape[0]
    keep = (rng.random(b) >= p).astype(branch.dtype) / (1.0 - p)
    shape = (b,) + (1,) * (branch.ndim - 1)
    return mul(branch, Tensor(keep.reshape(shape), dtype=branch.dtype))


class TrunkBlock:
    """Pre-norm residual block: WMSA then MLP, each behind DropPath."""

    def __init__(self, dim, heads, window, shifted, drop_path_p, mlp_ratio,
                 name, rng, dtype=np.float32):
        self.window = tuple(window)
        self.shift = tuple(w // 2 for w in self.window) if shifted else (0, 0, 0)
        self.drop_path_p = drop_path_p
        self.dtype = dtype
        self.norm1 = LayerNorm(dim, f"{name}.norm1", dtype)
        self.attn = WindowAttention(dim, heads, self.window, f"{name}.attn", rng, dtype)
        self.norm2 = LayerNorm(dim, f"{name}.norm2", dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), f"{name}.mlp", rng, dtype)
        self._layouts = {}

    def parameters(self):
        return collect_parameters(self.norm1, self.attn, self.norm2, self.mlp)

    def layout_for(self, extents):
        key = tuple(extents)
        if key not in self._layouts:
            # clamp shift to zero on axes the window fully covers
            pt = [math.ceil(e / w) * w for e, w in zip(extents, self.window)]
            shift = tuple(0 if p <= w else s
                          for p, w, s in zip(pt, self.window, self.shift))
            self._layouts[key] = build_layout(key, self.window, shift, dtype=self.dtype)
        return self._layouts[key]

    def __call__(self, x, train=False, rng=None):
        b = x.shape[0]
        extents = x.shape[1:4]
        layout = self.layout_for(extents)
        h = window_partition(self.norm1(x), layout)
        h = self.attn(h, mask=layout.mask, batch=b)
        h = window_reverse(h, layout, b)
        x = add(x, drop_path(h, self.drop_path_p, train, rng))
        h = self.mlp(self.norm2(x))
        return add(x, drop_path(h, self.drop_path_p, train, rng))


class PatchMerge:
    """Concatenate 2x2 spatial neighbors (4d), LayerNorm, linear to 2d."""

    def __init__(self, dim, out_dim, name, rng, dtype=np.float32):
        self.dim = dim
        self.norm = LayerNorm(4 * dim, f"{name}.norm", dtype)
        self.reduce = Linear(4 * dim, out_dim, f"{name}.reduce", rng, dtype)

    def parameters(self):
        return collect_parameters(self.norm, self.reduce)

    def __call__(self, x):
        b, T, H, W, d = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"patch_merge needs even spatial extents, got {H}x{W}")
        x = reshape(x, (b, T, H // 2, 2, W // 2, 2, d))
        x = transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = reshape(x, (b, T, H // 2, W // 2, 4 * d))
        return self.reduce(self.norm(x))


class Trunk:
    """The shared model: stages of windowed-attention blocks plus merging.

    forward() returns the pooled representation and every stage's output
    grid; the feature_stage grid is what retrieval consumes.
    """

    def __init__(self, config, rng, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.stages = []
        self.merges = []
        total_blocks = sum(config.stage_depths)
        block_idx = 0
        for s, (depth, dim, heads) in enumerate(zip(config.stage_depths,
                                                    config.stage_dims,
                                                    config.heads_per_stage)):
            blocks = []
            for i in range(depth):
                dp = (config.drop_path_rate * block_idx / max(total_blocks - 1, 1))
                blocks.append(TrunkBlock(dim, heads, config.window, shifted=bool(i % 2),
                                         drop_path_p=dp, mlp_ratio=config.mlp_ratio,
                                         name=f"trunk.stage{s}.block{i}", rng=rng,
                                         dtype=dtype))
                block_idx += 1
            self.stages.append(blocks)
            if s + 1 < len(config.stage_depths):
                self.merges.append(PatchMerge(dim, config.stage_dims[s + 1],
                                              f"trunk.merge{s}", rng, dtype))
        self.norm = LayerNorm(config.final_dim, "trunk.norm", dtype)

    def parameters(self):
        params = []
        for blocks in self.stages:
            for blk in blocks:
                params.extend(blk.parameters())
        for m in self.merges:
            params.extend(m.parameters())
        params.extend(self.norm.parameters())
        return params

    def forward(self, tokens, train=False, rng=None):
        """tokens: Tensor [B, T', H', W', d0] -> (phi [B, final_dim], stage grids)."""
        x = tokens
        stage_grids = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x, train=train, rng=rng)
            stage_grids.append(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        x = self.norm(x)
        stage_grids[-1] = x
        phi = x.mean(axis=(1, 2, 3))
        return phi, stage_grids

    def feature_grid(self, stage_grids):
        return stage_grids[self.config.feature_stage]
