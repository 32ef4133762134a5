"""Command-line surface: dataset generation, training, evaluation,
k-NN experiments, cross-modal retrieval, and static SVG plots."""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from .config import ConfigError
from .data import rgb_channel_drop, save_dataset
from .heads import RoutingError
from .optim import DivergenceError, evaluate_clips
from .patch_embed import IMAGE, RGBD, VIDEO
from .retrieval import (KnnConfig, cross_modal_retrieve, extract_features,
                        knn_accuracy, save_feature_index)
from .serialize import ContainerError
from .training import load_checkpoint, train, write_metrics_csv

MODALITY_KEYS = ("rgb", "d", "rgbd", "video")


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


def _load(args):
    if not Path(args.config).exists():
        raise CliError("usage", f"config file not found: {args.config}")
    try:
        cfg = cfg_mod.load_config(args.config)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    cfg = cfg_mod.with_overrides(cfg, seed=args.seed,
                                 strategy=getattr(args, "strategy", None))
    print(f"config_hash {cfg_mod.config_hash(cfg)}")
    return cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg, checkpoint):
    model = cfg_mod.build_model(cfg)
    try:
        load_checkpoint(checkpoint, model)
    except (ContainerError, FileNotFoundError) as exc:
        raise CliError("usage", f"cannot read checkpoint {checkpoint}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise CliError("compat", f"checkpoint/config mismatch: {exc}") from exc
    return model


def _modality_samples(cfg, sets, key):
    """Map a CLI modality key onto the matching dataset's samples.
    'd' is the rgbd dataset with the RGB channels zeroed (depth-only)."""
    wanted = {"rgb": IMAGE, "video": VIDEO, "rgbd": RGBD, "d": RGBD}[key]
    for ds in cfg["datasets"]:
        if ds["modality"] == wanted:
            samples = sets[ds["dataset_id"]]
            if key == "d":
                rng = np.random.Generator(np.random.PCG64(0))
                samples = [rgb_channel_drop(s, 1.0, rng) for s in samples]
            return ds["dataset_id"], samples
    raise CliError("usage", f"config has no dataset of modality for key {key!r}")


def _video_dataset(cfg):
    for ds in cfg["datasets"]:
        if ds["modality"] == VIDEO:
            return ds["dataset_id"]
    raise CliError("usage", "config has no video dataset")


# -- commands ----------------------------------------------------------------

def cmd_gen(args):
    cfg = _load(args)
    out = _out_dir(args)
    train_sets, val_sets = cfg_mod.generate_datasets(cfg)
    for split, sets in (("train", train_sets), ("val", val_sets)):
        for dataset_id, samples in sorted(sets.items()):
            save_dataset(out / split, dataset_id, samples)
            print(f"wrote {split}/{dataset_id}: {len(samples)} samples")
    return 0


def cmd_train(args):
    cfg = _load(args)
    out = _out_dir(args)
    cfg_mod.save_config(cfg, out / "resolved_config.json")
    model = cfg_mod.build_model(cfg)
    train_sets, val_sets = cfg_mod.generate_datasets(cfg)
    specs = cfg_mod.build_dataset_specs(cfg)
    settings = cfg_mod.build_train_settings(cfg)
    rows = train(model, train_sets, val_sets, specs, settings,
                 out_stem=str(out / "checkpoint"),
                 resume_from=args.resume)
    write_metrics_csv(rows, out / "metrics.csv")
    best = {}
    for row in rows:
        for key, value in row.items():
            if key.startswith("acc_val") and value != "":
                best[key] = max(best.get(key, 0.0), value)
    for key in sorted(best):
        print(f"best_{key} {best[key]:.4f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.final'}.*")
    return 0


def cmd_eval(args):
    cfg = _load(args)
    out = _out_dir(args)
    model = _load_model(cfg, args.checkpoint)
    _, val_sets = cfg_mod.generate_datasets(cfg)
    rows = [("dataset", "top1")]
    for ds, samples in sorted(val_sets.items()):
        acc = model.accuracy(samples, ds)
        rows.append((ds, f"{acc:.4f}"))
        print(f"top1 {ds} {acc:.4f}")
    with open(out / "eval.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)

    if args.clip_len:
        video_ds = _video_dataset(cfg)
        clip_rows = [("clip_len", "n_clips", "top1")]
        for clip_len in args.clip_len:
            correct = 0
            n_clips = None
            for s in val_sets[video_ds]:
                probs, n_clips = evaluate_clips(model, s, video_ds, clip_len,
                                                stride=args.stride)
                correct += int(probs.argmax()) == s.label
            acc = correct / len(val_sets[video_ds])
            clip_rows.append((clip_len, n_clips, f"{acc:.4f}"))
            print(f"clip_len {clip_len} n_clips {n_clips} top1 {acc:.4f}")
        with open(out / "clip_sweep.csv", "w", newline="") as f:
            csv.writer(f).writerows(clip_rows)
    return 0


def cmd_knn(args):
    cfg = _load(args)
    out = _out_dir(args)
    model = _load_model(cfg, args.checkpoint)
    train_sets, val_sets = cfg_mod.generate_datasets(cfg)
    knn_cfg = KnnConfig(k=cfg["knn"]["k"], tau=cfg["knn"]["tau"])
    pooling = cfg["knn"]["pooling"]
    query_keys = args.modality or list(MODALITY_KEYS)
    db_keys = list(MODALITY_KEYS)
    feats = {}
    for key in sorted(set(query_keys) | set(db_keys)):
        _, q_samples = _modality_samples(cfg, val_sets, key)
        _, db_samples = _modality_samples(cfg, train_sets, key)
        feats[key] = (extract_features(model, q_samples, pooling),
                      extract_features(model, db_samples, pooling))
    rows = [("query", "database", "top1")]
    for qk in query_keys:
        for dk in db_keys:
            acc = knn_accuracy(feats[qk][0], feats[dk][1], knn_cfg)
            rows.append((qk, dk, f"{acc:.4f}"))
            print(f"knn {qk}->{dk} top1 {acc:.4f}")
    with open(out / "knn.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    for key in sorted(feats):
        save_feature_index(out / f"index_{key}", feats[key][1],
                           meta={"modality_key": key})
    return 0


def cmd_retrieve(args):
    cfg = _load(args)
    out = _out_dir(args)
    model = _load_model(cfg, args.checkpoint)
    train_sets, val_sets = cfg_mod.generate_datasets(cfg)
    pooling = cfg["knn"]["pooling"]
    _, q_samples = _modality_samples(cfg, val_sets, args.query_modality)
    _, db_samples = _modality_samples(cfg, train_sets, args.db_modality)
    queries = extract_features(model, q_samples, pooling)
    database = extract_features(model, db_samples, pooling)
    ranked = cross_modal_retrieve(queries, database, args.top_n)
    rows = [("query_idx", "query_label", "rank", "db_idx", "similarity", "db_label")]
    for qi, matches in enumerate(ranked):
        for rank, (dbi, sim, label) in enumerate(matches):
            rows.append((qi, queries[qi].label, rank, dbi, f"{sim:.6f}", label))
    path = out / f"retrieve_{args.query_modality}_to_{args.db_modality}.csv"
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(f"wrote {path}")
    return 0


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args)
    if args.metrics:
        steps, losses = [], []
        with open(args.metrics) as f:
            for row in csv.DictReader(f):
                if row["loss"]:
                    steps.append(int(row["step"]))
                    losses.append(float(row["loss"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("training loss")
        fig.tight_layout()
        fig.savefig(out / "loss.svg")
        plt.close(fig)
        print(f"wrote {out / 'loss.svg'}")
    if args.clip_csv:
        lens, accs = [], []
        with open(args.clip_csv) as f:
            for row in csv.DictReader(f):
                lens.append(int(row["clip_len"]))
                accs.append(float(row["top1"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(lens, accs, marker="o")
        ax.set_xlabel("clip length (frames)")
        ax.set_ylabel("top-1 accuracy")
        ax.set_xscale("log", base=2)
        fig.tight_layout()
        fig.savefig(out / "clip_accuracy.svg")
        plt.close(fig)
        print(f"wrote {out / 'clip_accuracy.svg'}")
    if not args.metrics and not args.clip_csv:
        raise CliError("usage", "plot needs --metrics and/or --clip-csv")
    return 0


# -- parser ------------------------------------------------------------------

def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trimodal",
        description="Train and probe a modality-agnostic image/video/RGBD classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint stem (without .manifest.json/.blob)")

    p = sub.add_parser("gen", help="generate the synthetic datasets to disk")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="joint training run")
    common(p)
    p.add_argument("--strategy", choices=["separate", "mixed"], default=None)
    p.add_argument("--resume", default=None, help="checkpoint stem to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out accuracy, optional clip-length sweep")
    common(p, checkpoint=True)
    p.add_argument("--clip-len", type=_int_list, default=None,
                   help="comma list of clip lengths, e.g. 1,2,4,8")
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("knn", help="temperature-weighted k-NN accuracy table")
    common(p, checkpoint=True)
    p.add_argument("--modality", choices=MODALITY_KEYS, nargs="*", default=None,
                   help="restrict query modalities")
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("retrieve", help="cross-modal nearest-neighbor retrieval")
    common(p, checkpoint=True)
    p.add_argument("--query-modality", choices=MODALITY_KEYS, required=True)
    p.add_argument("--db-modality", choices=MODALITY_KEYS, required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("plot", help="emit SVG plots from metrics CSVs")
    p.add_argument("--metrics", default=None, help="training metrics CSV")
    p.add_argument("--clip-csv", default=None, help="clip sweep CSV from eval")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_plot)
    return parser


_EXIT_CODES = {"usage": 2, "config": 2, "compat": 3, "runtime": 1}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)
    except (ConfigError,) as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except (RoutingError, DivergenceError, ContainerError) as exc:
        print(f"error:runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
