"""AdamW with decoupled weight decay, the warmup/cosine/cooldown learning
rate schedule, parameter EMA, and multi-clip video evaluation."""

import math
from dataclasses import dataclass

import numpy as np

from .patch_embed import VIDEO, VisualSample
from .tensor import softmax_last


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class AdamW:
    """Decoupled weight decay: the decay multiplies the parameter directly
    (p <- p * (1 - lr*wd), applied before the Adam update) and is skipped
    entirely for decay_exempt parameters. Bias-corrected moments."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} mismatches "
                                 f"parameter {p.name} {p.data.shape}")
            if self.weight_decay > 0 and not p.decay_exempt:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, step_count):
        for p in self.params:
            self.m[p.name] = arrays[f"opt.m.{p.name}"].astype(p.dtype).copy()
            self.v[p.name] = arrays[f"opt.v.{p.name}"].astype(p.dtype).copy()
        self.step_count = step_count


@dataclass
class LrSchedule:
    """Linear warmup to lr_peak over the first warmup_frac of training,
    cosine decay to a floor, then linear cooldown to zero over the last
    cooldown_frac. The floor keeps the final cooldown non-degenerate."""
    total_steps: int
    lr_peak: float
    warmup_frac: float = 0.1
    cooldown_frac: float = 0.1
    floor_frac: float = 0.1  # lr_floor = floor_frac * lr_peak


def lr_at(step, schedule):
    T = schedule.total_steps
    if not 0 <= step <= T:
        raise ValueError(f"step {step} outside [0, {T}]")
    warm = schedule.warmup_frac * T
    cool_start = T - schedule.cooldown_frac * T
    peak = schedule.lr_peak
    floor = schedule.floor_frac * peak
    if step <= warm:
        return peak * (step / warm) if warm > 0 else peak
    if step <= cool_start:
        frac = (step - warm) / (cool_start - warm)
        return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
    return floor * (T - step) / (T - cool_start)


class Ema:
    """Shadow parameter set: shadow <- (1-alpha)*shadow + alpha*params."""

    def __init__(self, params, alpha=1e-4):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("ema alpha must be in [0, 1]")
        self.alpha = alpha
        self.shadow = {p.name: p.data.copy() for p in params}

    def update(self, params):
        a = self.alpha
        for p in params:
            self.shadow[p.name] = (1.0 - a) * self.shadow[p.name] + a * p.data

    def state_arrays(self):
        return {f"ema.{name}": arr for name, arr in self.shadow.items()}

    def load_state_arrays(self, arrays):
        for name in self.shadow:
            self.shadow[name] = arrays[f"ema.{name}"].copy()


class swap_params:
    """Context manager that temporarily loads a shadow parameter set."""

    def __init__(self, model, shadow):
        self.model = model
        self.shadow = shadow
        self._saved = None

    def __enter__(self):
        params = self.model.param_dict()
        self._saved = {name: p.data for name, p in params.items()}
        for name, p in params.items():
            p.data = self.shadow[name].astype(p.dtype)
        return self.model

    def __exit__(self, *exc):
        for name, p in self.model.param_dict().items():
            p.data = self._saved[name]
        return False


def evaluate_clips(model, sample, dataset_id, clip_len, stride=1):
    """Multi-clip video inference: split the video into
    ceil(T / (clip_len*stride)) clips covering the full duration, average
    the per-clip softmax probabilities.

    Returns (probs [C], n_clips). A clip_len exceeding the video falls
    back to one full-video clip; clips are zero-padded along time up to
    the patch extent when needed.
    """
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    video = sample.tensor
    T = video.shape[0]
    span = clip_len * stride
    if span >= T:
        clips = [video]
    else:
        n_clips = math.ceil(T / span)
        clips = []
        for j in range(n_clips):
            idx = j * span + np.arange(clip_len) * stride
            idx = idx[idx < T]
            clips.append(video[idx])
    t = model.patch_spec.t
    probs = None
    for clip in clips:
        frames = clip.shape[0]
        padded = -frames % t
        if frames == 1:
            # single frames go through image-style zero padding; always pad
            # at least one frame so the clip stays a valid video tensor
            padded = max(t - 1, 1)
        if padded:
            clip = np.concatenate(
                [clip, np.zeros((padded,) + clip.shape[1:], dtype=clip.dtype)], axis=0)
        clip_sample = VisualSample(modality=VIDEO, tensor=clip,
                                   label=sample.label, dataset_id=dataset_id)
        logits = model.logits_for([clip_sample], dataset_id)
        p = softmax_last(logits).data[0].astype(np.float64)
        probs = p if probs is None else probs + p
    return probs / len(clips), len(clips)
