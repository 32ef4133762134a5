"""Desk-scale data: procedural three-modality synthetic dataset, the
modality-specific preprocessing (disparity normalization, RGB-channel
drop), and replication-ratio epoch scheduling with the two batching
strategies (Separate and Mixed).

The synthetic world shares one class vocabulary (geometric shape x size
bucket) across all three modalities: the same class index denotes the
same concept whether rendered as a static image, a translating video, or
an RGB + analytic-depth pair. Everything is deterministic given the seed;
each sample's randomness derives from (seed, dataset_id, index), never
from draw order.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patch_embed import IMAGE, RGBD, VIDEO, VisualSample

SHAPES = ("circle", "square", "triangle", "cross")
SIZES = ("small", "large")

# Each shape category has a distinctive base hue and sits in a distinctive
# depth band, so every modality carries the class signal on its own: RGB via
# color + occupied area, depth via disparity level + occupied area. The bands
# are what make cross-modal retrieval possible for a jointly trained trunk.
_SHAPE_COLORS = np.array([
    (0.90, 0.25, 0.25),   # circle: red
    (0.25, 0.90, 0.25),   # square: green
    (0.25, 0.35, 0.90),   # triangle: blue
    (0.85, 0.80, 0.25),   # cross: yellow
], dtype=np.float32)
_SHAPE_DEPTH_NEAR = np.array([1.0, 1.55, 2.1, 2.65])
_SHAPE_DEPTH_SPAN = 0.35

SEPARATE = "separate"
MIXED = "mixed"


class DegenerateInputError(ValueError):
    """A depth map with no valid pixels."""


class EmptyScheduleError(ValueError):
    """Replication weights produce zero draws in total."""


def _ds_key(dataset_id):
    return zlib.crc32(dataset_id.encode())


def _sample_rng(seed, dataset_id, index):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _ds_key(dataset_id), index])))


# -- rendering ---------------------------------------------------------------

@dataclass
class SyntheticWorld:
    """Renderer config for the shape x size class vocabulary."""
    n_classes: int = 8
    image_size: int = 32
    video_frames: int = 8
    noise: float = 0.05
    background_depth: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes != len(SHAPES) * len(SIZES):
            raise ValueError(f"class vocabulary is fixed at {len(SHAPES) * len(SIZES)}")

    def class_name(self, label):
        return f"{SHAPES[label // len(SIZES)]}_{SIZES[label % len(SIZES)]}"


def _shape_mask(shape, size_px, cy, cx, hw):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = size_px
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # upward triangle: below the apex, inside the slanted sides
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        arm = max(r / 3.0, 1.0)
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def _render_frame(world, label, cy, cx, color, rng):
    hw = world.image_size
    shape = SHAPES[label // len(SIZES)]
    radius = 4.0 if SIZES[label % len(SIZES)] == "small" else 7.0
    mask = _shape_mask(shape, radius, cy, cx, hw)
    frame = np.full((hw, hw, 3), 0.15, dtype=np.float32)
    frame += (rng.standard_normal((hw, hw, 3)) * world.noise).astype(np.float32)
    frame[mask] = color
    return np.clip(frame, 0.0, 1.0), mask, radius


def _sample_geometry(world, label, rng):
    radius = 4.0 if SIZES[label % len(SIZES)] == "small" else 7.0
    lo, hi = radius + 1.0, world.image_size - radius - 2.0
    cy = rng.uniform(lo, hi)
    cx = rng.uniform(lo, hi)
    base = _SHAPE_COLORS[label // len(SIZES)]
    color = np.clip(base * rng.uniform(0.8, 1.1), 0.0, 1.0).astype(np.float32)
    return cy, cx, color


def render_image(world, label, rng):
    cy, cx, color = _sample_geometry(world, label, rng)
    frame, _, _ = _render_frame(world, label, cy, cx, color, rng)
    return frame[None]


def render_video(world, label, rng):
    cy, cx, color = _sample_geometry(world, label, rng)
    vy, vx = rng.uniform(-1.5, 1.5, size=2)
    radius = 4.0 if SIZES[label % len(SIZES)] == "small" else 7.0
    lo, hi = radius + 1.0, world.image_size - radius - 2.0
    frames = []
    for _ in range(world.video_frames):
        frame, _, _ = _render_frame(world, label, cy, cx, color, rng)
        frames.append(frame)
        cy = float(np.clip(cy + vy, lo, hi))
        cx = float(np.clip(cx + vx, lo, hi))
    return np.stack(frames)


def render_rgbd(world, label, rng):
    cy, cx, color = _sample_geometry(world, label, rng)
    frame, mask, _ = _render_frame(world, label, cy, cx, color, rng)
    depth = np.full(mask.shape, world.background_depth, dtype=np.float64)
    near = _SHAPE_DEPTH_NEAR[label // len(SIZES)]
    depth[mask] = near + rng.uniform(0.0, _SHAPE_DEPTH_SPAN)
    disparity = disparity_normalize(depth)
    return np.concatenate([frame, disparity[..., None].astype(np.float32)],
                          axis=-1)[None]


_RENDERERS = {IMAGE: render_image, VIDEO: render_video, RGBD: render_rgbd}


def gen_synthetic(world, dataset_id, modality, n):
    """n labeled samples, classes balanced within +/- 1, deterministic
    per (world.seed, dataset_id, index)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    render = _RENDERERS[modality]
    samples = []
    for i in range(n):
        rng = _sample_rng(world.seed, dataset_id, i)
        label = i % world.n_classes
        tensor = render(world, label, rng).astype(np.float32)
        samples.append(VisualSample(modality=modality, tensor=tensor,
                                    label=label, dataset_id=dataset_id))
    return samples


# -- preprocessing -----------------------------------------------------------

def disparity_normalize(depth, d_min=0.01, d_max=1.0, valid=None):
    """Depth map -> disparity in [0, 1].

    disparity = 1/depth, clamped to [d_min, d_max], then affinely mapped
    onto [0, 1]. Invalid pixels (non-positive depth, or flagged via
    `valid`) come out as 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0
    else:
        valid = np.asarray(valid, dtype=bool) & (depth > 0)
    if not valid.any():
        raise DegenerateInputError("depth map has no valid pixels")
    out = np.zeros_like(depth)
    disp = np.clip(1.0 / np.where(valid, depth, 1.0), d_min, d_max)
    out[valid] = (disp[valid] - d_min) / (d_max - d_min)
    return out.astype(np.float32)


def rgb_channel_drop(sample, p, rng):
    """With probability p, zero the RGB channels of an RGBD sample."""
    if sample.modality != RGBD:
        raise ValueError(f"rgb_channel_drop requires rgbd, got {sample.modality}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability {p} outside [0, 1]")
    if p > 0.0 and rng.random() < p:
        tensor = sample.tensor.copy()
        tensor[..., :3] = 0.0
        return VisualSample(modality=RGBD, tensor=tensor,
                            label=sample.label, dataset_id=sample.dataset_id)
    return sample


# -- scheduling ----------------------------------------------------------------

@dataclass
class DatasetSpec:
    dataset_id: str
    modality: str
    size: int
    n_classes: int
    replication_weight: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("dataset size must be >= 1")
        if not np.isfinite(self.replication_weight) or self.replication_weight < 0:
            raise ValueError("replication weight must be finite and >= 0")


@dataclass
class EpochSchedule:
    """The realized (dataset, index) batch sequence for one composite epoch."""
    batches: list
    strategy: str
    seed: int

    def draws_per_dataset(self):
        counts = {}
        for batch in self.batches:
            for dataset_id, _ in batch:
                counts[dataset_id] = counts.get(dataset_id, 0) + 1
        return counts

    def sample_multiset(self):
        items = [pair for batch in self.batches for pair in batch]
        return sorted(items)


def _draw_count(spec):
    return int(np.floor(spec.replication_weight * spec.size + 0.5))


def _index_stream(spec, rng):
    """Per-epoch draw order: fresh permutation per full pass; fractional
    remainders take a seeded uniform subsample (prefix of a fresh
    permutation)."""
    n = _draw_count(spec)
    out = []
    while len(out) < n:
        perm = rng.permutation(spec.size)
        out.extend(perm[:n - len(out)].tolist())
    return out


def build_epoch_schedule(specs, batch_size, strategy, seed, epoch=0):
    """Group each dataset's weighted draws into batches.

    Separate: every batch is single-dataset; batch order interleaves
    datasets proportionally. Mixed: each batch's composition follows the
    remaining weighted sizes via largest-remainder apportionment, so
    per-epoch totals are exact. Both strategies draw the identical
    per-dataset index multiset for a given (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if strategy not in (SEPARATE, MIXED):
        raise ValueError(f"unknown strategy {strategy!r}")
    streams = {}
    for spec in specs:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, epoch, _ds_key(spec.dataset_id)])))
        streams[spec.dataset_id] = _index_stream(spec, rng)
    total = sum(len(s) for s in streams.values())
    if total == 0:
        raise EmptyScheduleError("all replication weights round to zero draws")

    if strategy == SEPARATE:
        per_dataset = []
        for spec in specs:
            stream = streams[spec.dataset_id]
            chunks = [stream[i:i + batch_size] for i in range(0, len(stream), batch_size)]
            for j, chunk in enumerate(chunks):
                # fractional position interleaves datasets proportionally
                per_dataset.append(((j + 0.5) / len(chunks), spec.dataset_id, chunk))
        per_dataset.sort(key=lambda item: (item[0], item[1]))
        batches = [[(ds, i) for i in chunk] for _, ds, chunk in per_dataset]
    else:
        order = [spec.dataset_id for spec in specs]
        remaining = {ds: list(streams[ds]) for ds in order}
        batches = []
        while any(remaining[ds] for ds in order):
            left = sum(len(remaining[ds]) for ds in order)
            size = min(batch_size, left)
            quotas = {ds: size * len(remaining[ds]) / left for ds in order}
            take = {ds: int(np.floor(quotas[ds])) for ds in order}
            leftover = size - sum(take.values())
            by_frac = sorted(order, key=lambda ds: (-(quotas[ds] - take[ds]), order.index(ds)))
            for ds in by_frac[:leftover]:
                take[ds] += 1
            batch = []
            for ds in order:
                k = min(take[ds], len(remaining[ds]))
                batch.extend((ds, i) for i in remaining[ds][:k])
                del remaining[ds][:k]
            batches.append(batch)
    return EpochSchedule(batches=batches, strategy=strategy, seed=seed)


# -- dataset directory I/O -------------------------------------------------------

_MAGIC = b"TMD1"


def save_dataset(root, dataset_id, samples):
    """Write manifest.json + samples.bin under root/dataset_id/.

    samples.bin: magic, uint32 count, then per sample a uint32 ndim and
    uint32 dims header followed by little-endian float32 data.
    """
    out = Path(root) / dataset_id
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "dataset_id": dataset_id,
        "modality": samples[0].modality,
        "size": len(samples),
        "classes": sorted({int(s.label) for s in samples}),
        "labels": [int(s.label) for s in samples],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "samples.bin", "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(samples)))
        for s in samples:
            arr = np.ascontiguousarray(s.tensor, dtype="<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    return out


def load_dataset(root, dataset_id):
    path = Path(root) / dataset_id
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    samples = []
    with open(path / "samples.bin", "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}/samples.bin: bad magic")
        (count,) = struct.unpack("<I", f.read(4))
        for i in range(count):
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4")
            samples.append(VisualSample(
                modality=manifest["modality"],
                tensor=data.reshape(shape).copy(),
                label=manifest["labels"][i],
                dataset_id=dataset_id))
    return samples, manifest
