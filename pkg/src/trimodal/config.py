"""Run configuration: one JSON document from which a run is fully
reproducible (together with nothing but its seed, which it contains)."""

import copy
import hashlib
import json

import numpy as np

from .data import MIXED, SEPARATE, DatasetSpec, SyntheticWorld, gen_synthetic
from .model import MultiModalModel
from .patch_embed import IMAGE, RGBD, VIDEO, PatchSpec
from .training import TrainSettings
from .trunk import TrunkConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Missing or invalid configuration field; message carries the path."""


def default_config():
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "patch": {"t": 2, "h": 4, "w": 4, "d": 16},
        "trunk": {
            "stage_depths": [2, 2],
            "stage_dims": [16, 32],
            "heads_per_stage": [2, 4],
            "window": [2, 2, 2],
            "drop_path_rate": 0.1,
            "mlp_ratio": 4.0,
        },
        "rgbd_mode": "additive",
        "world": {"image_size": 32, "video_frames": 8, "noise": 0.05},
        "datasets": [
            {"dataset_id": "syn_image", "modality": IMAGE, "train_size": 320,
             "val_size": 48, "n_classes": 8, "replication_weight": 1.0,
             "head_dropout": 0.0},
            {"dataset_id": "syn_video", "modality": VIDEO, "train_size": 320,
             "val_size": 48, "n_classes": 8, "replication_weight": 1.0,
             "head_dropout": 0.0},
            {"dataset_id": "syn_rgbd", "modality": RGBD, "train_size": 320,
             "val_size": 48, "n_classes": 8, "replication_weight": 1.0,
             "head_dropout": 0.0},
        ],
        "train": {
            "epochs": 100,
            "batch_size": 8,
            "strategy": SEPARATE,
            "lr_peak": 3e-4,
            "warmup_frac": 0.1,
            "cooldown_frac": 0.1,
            "floor_frac": 0.25,
            "betas": [0.9, 0.999],
            "adam_eps": 1e-8,
            "weight_decay": 0.05,
            "label_smoothing": 0.1,
            "rgb_drop_p": 0.5,
            "ema_alpha": 1e-4,
            "checkpoint_every": 0,
        },
        "knn": {"k": 20, "tau": 0.07, "pooling": "mean"},
    }


def validate_config(cfg):
    """Raise ConfigError naming the offending field path."""
    ref = default_config()

    def check(ref_node, node, path):
        if isinstance(ref_node, dict):
            if not isinstance(node, dict):
                raise ConfigError(f"{path or '<root>'}: expected object")
            for key, sub in ref_node.items():
                if key not in node:
                    raise ConfigError(f"{path + '.' if path else ''}{key}: missing field")
                if key != "datasets":
                    check(sub, node[key], f"{path + '.' if path else ''}{key}")

    check(ref, cfg, "")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, "
                          f"got {cfg['schema_version']}")
    if not cfg["datasets"]:
        raise ConfigError("datasets: need at least one dataset")
    ref_ds = ref["datasets"][0]
    for i, ds in enumerate(cfg["datasets"]):
        for key in ref_ds:
            if key not in ds:
                raise ConfigError(f"datasets[{i}].{key}: missing field")
        if ds["modality"] not in (IMAGE, VIDEO, RGBD):
            raise ConfigError(f"datasets[{i}].modality: unknown {ds['modality']!r}")
    if cfg["train"]["strategy"] not in (SEPARATE, MIXED):
        raise ConfigError(f"train.strategy: unknown {cfg['train']['strategy']!r}")
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: invalid JSON: {exc}") from exc
    return validate_config(cfg)


def save_config(cfg, path):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(cfg):
    """Hash over the canonical JSON form; every field is semantic."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- constructors ------------------------------------------------------------

def build_patch_spec(cfg):
    p = cfg["patch"]
    return PatchSpec(t=p["t"], h=p["h"], w=p["w"], d=p["d"])


def build_trunk_config(cfg):
    t = cfg["trunk"]
    return TrunkConfig(stage_depths=list(t["stage_depths"]),
                       stage_dims=list(t["stage_dims"]),
                       heads_per_stage=list(t["heads_per_stage"]),
                       window=tuple(t["window"]),
                       drop_path_rate=t["drop_path_rate"],
                       mlp_ratio=t["mlp_ratio"])


def build_model(cfg, dtype=np.float32):
    head_specs = {ds["dataset_id"]: (ds["n_classes"], ds["head_dropout"])
                  for ds in cfg["datasets"]}
    return MultiModalModel(build_patch_spec(cfg), build_trunk_config(cfg),
                           head_specs, seed=cfg["seed"], dtype=dtype,
                           rgbd_mode=cfg["rgbd_mode"])


def build_dataset_specs(cfg, only=None):
    specs = []
    for ds in cfg["datasets"]:
        if only is not None and ds["dataset_id"] not in only:
            continue
        specs.append(DatasetSpec(dataset_id=ds["dataset_id"], modality=ds["modality"],
                                 size=ds["train_size"], n_classes=ds["n_classes"],
                                 replication_weight=ds["replication_weight"]))
    return specs


def build_world(cfg, seed_offset=0):
    w = cfg["world"]
    return SyntheticWorld(image_size=w["image_size"], video_frames=w["video_frames"],
                          noise=w["noise"], seed=cfg["seed"] + seed_offset)


def generate_datasets(cfg):
    """Synthesize (train_sets, val_sets) per the config. Validation uses a
    disjoint seed stream so held-out samples are never seen in training."""
    train_world = build_world(cfg, seed_offset=0)
    val_world = build_world(cfg, seed_offset=1_000_003)
    train_sets, val_sets = {}, {}
    for ds in cfg["datasets"]:
        train_sets[ds["dataset_id"]] = gen_synthetic(
            train_world, ds["dataset_id"], ds["modality"], ds["train_size"])
        val_sets[ds["dataset_id"]] = gen_synthetic(
            val_world, ds["dataset_id"], ds["modality"], ds["val_size"])
    return train_sets, val_sets


def build_train_settings(cfg):
    t = cfg["train"]
    return TrainSettings(epochs=t["epochs"], batch_size=t["batch_size"],
                         strategy=t["strategy"], lr_peak=t["lr_peak"],
                         warmup_frac=t["warmup_frac"], cooldown_frac=t["cooldown_frac"],
                         floor_frac=t["floor_frac"], betas=tuple(t["betas"]),
                         adam_eps=t["adam_eps"], weight_decay=t["weight_decay"],
                         label_smoothing=t["label_smoothing"],
                         rgb_drop_p=t["rgb_drop_p"], ema_alpha=t["ema_alpha"],
                         seed=cfg["seed"], checkpoint_every=t["checkpoint_every"])


def with_overrides(cfg, seed=None, strategy=None):
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = seed
    if strategy is not None:
        cfg["train"]["strategy"] = strategy
    return cfg
