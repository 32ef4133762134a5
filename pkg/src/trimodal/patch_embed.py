"""Canonical 4D input layout, patchification and patch-to-token embedding.

Every modality becomes a T x H x W x C tensor: images are single-frame
RGB, videos are multi-frame RGB, RGBD is single-frame with a fourth
(disparity) channel. Patches are embedded by a single shared RGB
projection; the disparity channel goes through a separate projection
whose output is added to the RGB token.
"""

from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, collect_parameters
from .tensor import ShapeError, Tensor, add, matmul, reshape

IMAGE = "image"
VIDEO = "video"
RGBD = "rgbd"

MODALITIES = (IMAGE, VIDEO, RGBD)


@dataclass
class VisualSample:
    """A labeled input in canonical 4D layout.

    tensor is T x H x W x C float32: (T=1, C=3) for images, (T>1, C=3)
    for videos, (T=1, C=4) for RGBD with channel 3 holding normalized
    disparity in [0, 1].
    """
    modality: str
    tensor: np.ndarray
    label: int
    dataset_id: str

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 4:
            raise ShapeError(f"sample tensor must be 4D, got shape {t.shape}")
        T, _, _, C = t.shape
        expected = {IMAGE: (True, 3), VIDEO: (False, 3), RGBD: (True, 4)}
        if self.modality not in expected:
            raise ValueError(f"unknown modality {self.modality!r}")
        single, channels = expected[self.modality]
        if single and T != 1:
            raise ShapeError(f"{self.modality} requires T=1, got T={T}")
        if not single and T <= 1:
            raise ShapeError(f"video requires T>1, got T={T}")
        if C != channels:
            raise ShapeError(f"{self.modality} requires C={channels}, got C={C}")


@dataclass(frozen=True)
class PatchSpec:
    t: int
    h: int
    w: int
    d: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1 or self.d < 1:
            raise ValueError(f"invalid patch spec {self}")


@dataclass
class TokenGrid:
    """3D grid of d-dimensional tokens, the unit flowing through the trunk.

    tokens may be batched: [B, T', H', W', d] (single samples use B=1).
    """
    extents: tuple
    tokens: Tensor
    modality: str


def canonicalize(raw, modality, label=0, dataset_id="default"):
    """Lift a modality-specific array into the canonical 4D VisualSample.

    raw: image H x W x 3; video T x H x W x 3; rgbd either a 1 x H x W x 4
    tensor or an (rgb H x W x 3, disparity H x W) pair.
    """
    if modality == IMAGE:
        arr = np.asarray(raw, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ShapeError(f"image input must be HxWx3, got {arr.shape}")
        tensor = arr[None]
    elif modality == VIDEO:
        arr = np.asarray(raw, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"video input must be TxHxWx3, got {arr.shape}")
        tensor = arr
    elif modality == RGBD:
        if isinstance(raw, tuple):
            rgb, disparity = raw
            rgb = np.asarray(rgb, dtype=np.float32)
            disparity = np.asarray(disparity, dtype=np.float32)
            if rgb.ndim != 3 or rgb.shape[-1] != 3 or disparity.shape != rgb.shape[:2]:
                raise ShapeError(f"rgbd pair shapes {rgb.shape}/{disparity.shape} inconsistent")
            tensor = np.concatenate([rgb, disparity[..., None]], axis=-1)[None]
        else:
            arr = np.asarray(raw, dtype=np.float32)
            if arr.ndim == 3 and arr.shape[-1] == 4:
                arr = arr[None]
            if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[-1] != 4:
                raise ShapeError(f"rgbd input must be 1xHxWx4, got {arr.shape}")
            tensor = arr
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return VisualSample(modality=modality, tensor=tensor, label=label, dataset_id=dataset_id)


def grid_extents(sample_shape, spec):
    T, H, W, _ = sample_shape
    return (max(T // spec.t, 1), H // spec.h, W // spec.w)


def patch_array(sample, spec):
    """Split into non-overlapping patches: array [T', H', W', t, h, w, C].

    Single-frame inputs are zero-padded along time from 1 to t frames,
    padding appended after the real frame. Patch order when flattened is
    row-major over (T', H', W').
    """
    x = sample.tensor
    T, H, W, C = x.shape
    if H % spec.h:
        raise ShapeError(f"height {H} not divisible by patch h={spec.h}")
    if W % spec.w:
        raise ShapeError(f"width {W} not divisible by patch w={spec.w}")
    if T == 1 and spec.t > 1:
        x = np.concatenate([x, np.zeros((spec.t - 1, H, W, C), dtype=x.dtype)], axis=0)
        T = spec.t
    elif T % spec.t:
        raise ShapeError(f"time {T} not divisible by patch t={spec.t}")
    Tp, Hp, Wp = T // spec.t, H // spec.h, W // spec.w
    x = x.reshape(Tp, spec.t, Hp, spec.h, Wp, spec.w, C)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5, 6))


def patchify(sample, spec):
    """Patch list (each t x h x w x C), row-major over (T', H', W')."""
    arr = patch_array(sample, spec)
    flat = arr.reshape(-1, spec.t, spec.h, spec.w, sample.tensor.shape[-1])
    return [flat[i] for i in range(flat.shape[0])]


class PatchEmbedder:
    """Shared RGB patch projection plus the separate additive depth projection.

    rgbd_mode selects the RGBD path: "additive" (default) embeds the
    three RGB channels with the shared projection and adds the separate
    depth-channel embedding; "fused" uses a single 4-channel projection
    (the ablation alternative).
    """

    def __init__(self, spec, rng, dtype=np.float32, rgbd_mode="additive"):
        if rgbd_mode not in ("additive", "fused"):
            raise ValueError(f"unknown rgbd_mode {rgbd_mode!r}")
        self.spec = spec
        self.rgbd_mode = rgbd_mode
        self.dtype = dtype
        flat_rgb = spec.t * spec.h * spec.w * 3
        flat_depth = spec.t * spec.h * spec.w
        self.rgb_proj = Linear(flat_rgb, spec.d, "embed.rgb", rng, dtype)
        self.rgb_norm = LayerNorm(spec.d, "embed.rgb.norm", dtype)
        self.depth_proj = Linear(flat_depth, spec.d, "embed.depth", rng, dtype)
        self.depth_norm = LayerNorm(spec.d, "embed.depth.norm", dtype)
        self.fused_proj = Linear(flat_rgb + flat_depth, spec.d, "embed.fused", rng, dtype)
        self.fused_norm = LayerNorm(spec.d, "embed.fused.norm", dtype)

    def parameters(self):
        return collect_parameters(self.rgb_proj, self.rgb_norm,
                                  self.depth_proj, self.depth_norm,
                                  self.fused_proj, self.fused_norm)

    def embed_rgb(self, patch_rgb):
        """Token for one t x h x w x 3 patch via the shared projection."""
        patch_rgb = np.asarray(patch_rgb, dtype=self.dtype)
        if patch_rgb.shape[-1] != 3:
            raise ShapeError(f"embed_rgb needs 3 channels, got {patch_rgb.shape}")
        flat = Tensor(patch_rgb.reshape(1, -1), dtype=self.dtype)
        out = self.rgb_norm(self.rgb_proj(flat))
        return reshape(out, (self.spec.d,))

    def embed_depth(self, patch_d):
        """Token for one t x h x w x 1 depth patch via the depth projection."""
        patch_d = np.asarray(patch_d, dtype=self.dtype)
        if patch_d.shape[-1] != 1:
            raise ShapeError(f"embed_depth needs 1 channel, got {patch_d.shape}")
        flat = Tensor(patch_d.reshape(1, -1), dtype=self.dtype)
        out = self.depth_norm(self.depth_proj(flat))
        return reshape(out, (self.spec.d,))

    def _embed_flat(self, flat_patches, modality):
        """flat_patches: [B, P, t*h*w*C] -> tokens Tensor [B, P, d]."""
        x = Tensor(flat_patches, dtype=self.dtype)
        if modality in (IMAGE, VIDEO):
            return self.rgb_norm(self.rgb_proj(x))
        if self.rgbd_mode == "fused":
            return self.fused_norm(self.fused_proj(x))
        b, p, _ = flat_patches.shape
        per = flat_patches.reshape(b, p, self.spec.t, self.spec.h, self.spec.w, 4)
        rgb = np.ascontiguousarray(per[..., :3]).reshape(b, p, -1)
        depth = np.ascontiguousarray(per[..., 3:]).reshape(b, p, -1)
        rgb_tok = self.rgb_norm(self.rgb_proj(Tensor(rgb, dtype=self.dtype)))
        depth_tok = self.depth_norm(self.depth_proj(Tensor(depth, dtype=self.dtype)))
        return add(rgb_tok, depth_tok)

    def embed_batch(self, samples):
        """Embed same-shape, same-modality samples into one batched TokenGrid."""
        modality = samples[0].modality
        shape = samples[0].tensor.shape
        for s in samples:
            if s.modality != modality or s.tensor.shape != shape:
                raise ShapeError("embed_batch requires identical modality and extents")
        flats = np.stack([
            patch_array(s, self.spec).reshape(-1, np.prod(
                (self.spec.t, self.spec.h, self.spec.w, shape[-1])))
            for s in samples
        ])
        tokens = self._embed_flat(flats.astype(self.dtype), modality)
        tp, hp, wp = grid_extents(shape, self.spec)
        tokens = reshape(tokens, (len(samples), tp, hp, wp, self.spec.d))
        return TokenGrid(extents=(tp, hp, wp), tokens=tokens, modality=modality)

    def embed_sample(self, sample):
        """Embed one sample into a B=1 TokenGrid."""
        return self.embed_batch([sample])

    def embed_rgbd_conv(self, sample):
        """Ablation path: single fused 4-channel projection for RGBD."""
        if sample.modality != RGBD:
            raise ShapeError(f"embed_rgbd_conv requires rgbd input, got {sample.modality}")
        flat = patch_array(sample, self.spec).reshape(1, -1, self.spec.t * self.spec.h * self.spec.w * 4)
        tokens = self.fused_norm(self.fused_proj(Tensor(flat.astype(self.dtype))))
        tp, hp, wp = grid_extents(sample.tensor.shape, self.spec)
        tokens = reshape(tokens, (1, tp, hp, wp, self.spec.d))
        return TokenGrid(extents=(tp, hp, wp), tokens=tokens, modality=RGBD)
