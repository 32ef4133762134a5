"""Joint multi-dataset training loop with checkpointing and metrics."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import RGBD, SEPARATE, build_epoch_schedule, rgb_channel_drop
from .heads import route_loss
from .optim import AdamW, DivergenceError, Ema, LrSchedule, lr_at, swap_params
from .serialize import load_container, save_container

_STEP_STREAM = 0xD0


def _step_rng(seed, epoch, batch_idx):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _STEP_STREAM, epoch, batch_idx])))


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    strategy: str = SEPARATE
    lr_peak: float = 3e-3
    warmup_frac: float = 0.1
    cooldown_frac: float = 0.1
    floor_frac: float = 0.1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    rgb_drop_p: float = 0.5
    ema_alpha: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only


def save_checkpoint(stem, model, optimizer=None, ema=None, epoch=0, step=0, meta=None):
    arrays = {f"param.{name}": p.data for name, p in model.param_dict().items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    if ema is not None:
        arrays.update(ema.state_arrays())
    full_meta = {"epoch": epoch, "step": step,
                 "opt_step_count": optimizer.step_count if optimizer else 0}
    if meta:
        full_meta.update(meta)
    return save_container(stem, arrays, meta=full_meta, kind="checkpoint")


def load_checkpoint(stem, model, optimizer=None, ema=None):
    """Restore parameters (and optionally optimizer/EMA state). Returns meta."""
    arrays, meta, kind = load_container(stem)
    if kind != "checkpoint":
        raise ValueError(f"container {stem} is a {kind!r}, not a checkpoint")
    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    model.load_param_arrays(params)
    if optimizer is not None:
        optimizer.load_state_arrays(arrays, meta.get("opt_step_count", 0))
    if ema is not None:
        ema.load_state_arrays(arrays)
    return meta


def evaluate_model(model, samples_by_dataset):
    return {ds: model.accuracy(samples, ds)
            for ds, samples in sorted(samples_by_dataset.items())}


def train(model, train_sets, val_sets, specs, settings, out_stem=None,
          resume_from=None):
    """Run the joint training loop.

    train_sets/val_sets: {dataset_id: [VisualSample]}. specs: DatasetSpecs
    driving the epoch schedule. Returns the list of metric rows produced
    by this call (a resumed run emits exactly the rows the uninterrupted
    run would from that epoch on).
    """
    optimizer = AdamW(model.parameters(), betas=settings.betas,
                      eps=settings.adam_eps, weight_decay=settings.weight_decay)
    ema = Ema(model.parameters(), alpha=settings.ema_alpha)

    steps_per_epoch = len(build_epoch_schedule(
        specs, settings.batch_size, settings.strategy, settings.seed, epoch=0).batches)
    total_steps = settings.epochs * steps_per_epoch
    schedule = LrSchedule(total_steps=total_steps, lr_peak=settings.lr_peak,
                          warmup_frac=settings.warmup_frac,
                          cooldown_frac=settings.cooldown_frac,
                          floor_frac=settings.floor_frac)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer=optimizer, ema=ema)
        start_epoch = meta["epoch"]
        global_step = meta["step"]

    rows = []
    for epoch in range(start_epoch, settings.epochs):
        epoch_schedule = build_epoch_schedule(
            specs, settings.batch_size, settings.strategy, settings.seed, epoch=epoch)
        for batch_idx, batch in enumerate(epoch_schedule.batches):
            rng = _step_rng(settings.seed, epoch, batch_idx)
            samples = []
            for dataset_id, index in batch:
                s = train_sets[dataset_id][index]
                if s.modality == RGBD and settings.rgb_drop_p > 0:
                    s = rgb_channel_drop(s, settings.rgb_drop_p, rng)
                samples.append(s)
            phi_rows = model.phi_rows(samples, train=True, rng=rng)
            loss = route_loss(
                [(row, s.label, s.dataset_id) for row, s in zip(phi_rows, samples)],
                model.heads, smoothing=settings.label_smoothing, train=True, rng=rng)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at step {global_step}")
            optimizer.zero_grad()
            loss.backward()
            # mid-step LR keeps both schedule endpoints (lr=0) off the trajectory
            lr = lr_at(min(global_step + 0.5, total_steps), schedule)
            optimizer.step(lr)
            ema.update(model.parameters())
            rows.append({"step": global_step, "epoch": epoch,
                         "lr": lr, "loss": loss_val})
            global_step += 1

        eval_row = {"step": global_step, "epoch": epoch, "lr": "", "loss": ""}
        for ds, samples in sorted(train_sets.items()):
            eval_row[f"acc_train_{ds}"] = model.accuracy(samples, ds)
        for ds, samples in sorted(val_sets.items()):
            eval_row[f"acc_val_{ds}"] = model.accuracy(samples, ds)
        with swap_params(model, ema.shadow):
            for ds, samples in sorted(val_sets.items()):
                eval_row[f"acc_val_ema_{ds}"] = model.accuracy(samples, ds)
        rows.append(eval_row)

        if out_stem is not None:
            last = epoch == settings.epochs - 1
            cadence = settings.checkpoint_every
            if last or (cadence and (epoch + 1) % cadence == 0):
                save_checkpoint(f"{out_stem}.epoch{epoch + 1:04d}", model,
                                optimizer, ema, epoch=epoch + 1, step=global_step)
                if last:
                    save_checkpoint(f"{out_stem}.final", model, optimizer, ema,
                                    epoch=epoch + 1, step=global_step)
    return rows


METRIC_BASE_COLUMNS = ["step", "epoch", "lr", "loss"]


def metric_columns(rows):
    extra = sorted({k for row in rows for k in row} - set(METRIC_BASE_COLUMNS))
    return METRIC_BASE_COLUMNS + extra


def format_metric(value):
    if value == "" or value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_metrics_csv(rows, path):
    columns = metric_columns(rows)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_metric(row.get(c, "")) for c in columns])
