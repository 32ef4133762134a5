import csv

import numpy as np
import pytest

from trimodal import config as cfg_mod
from trimodal.training import (TrainSettings, load_checkpoint,
                               save_checkpoint, train, write_metrics_csv)


@pytest.fixture(scope="module")
def tiny_run():
    """A small three-modality setup shared across the tests here."""
    cfg = cfg_mod.default_config()
    for ds in cfg["datasets"]:
        ds["train_size"] = 16
        ds["val_size"] = 8
    cfg["train"]["epochs"] = 2
    train_sets, val_sets = cfg_mod.generate_datasets(cfg)
    specs = cfg_mod.build_dataset_specs(cfg)
    settings = cfg_mod.build_train_settings(cfg)
    return cfg, train_sets, val_sets, specs, settings


def _final_params(model):
    return {name: p.data.copy() for name, p in model.param_dict().items()}


class TestTrainLoop:
    def test_metric_rows_structure(self, tiny_run):
        cfg, tr, va, specs, settings = tiny_run
        model = cfg_mod.build_model(cfg)
        rows = train(model, tr, va, specs, settings)
        step_rows = [r for r in rows if r["loss"] != ""]
        eval_rows = [r for r in rows if r["loss"] == ""]
        assert len(eval_rows) == settings.epochs
        # 3 datasets x 16 samples / batch 8 = 6 steps per epoch
        assert len(step_rows) == 6 * settings.epochs
        assert all(np.isfinite(r["loss"]) for r in step_rows)
        assert all(0 < r["lr"] <= settings.lr_peak for r in step_rows)
        for key in ("acc_train_syn_image", "acc_val_syn_video",
                    "acc_val_ema_syn_rgbd"):
            assert key in eval_rows[0]

    def test_same_seed_reproduces_exactly(self, tiny_run):
        cfg, tr, va, specs, settings = tiny_run
        m1 = cfg_mod.build_model(cfg)
        m2 = cfg_mod.build_model(cfg)
        r1 = train(m1, tr, va, specs, settings)
        r2 = train(m2, tr, va, specs, settings)
        assert [r["loss"] for r in r1] == [r["loss"] for r in r2]
        for name, arr in _final_params(m1).items():
            assert np.array_equal(arr, _final_params(m2)[name]), name

    def test_different_seed_differs(self, tiny_run):
        cfg, tr, va, specs, settings = tiny_run
        m1 = cfg_mod.build_model(cfg)
        r1 = train(m1, tr, va, specs, settings)
        cfg2 = cfg_mod.with_overrides(cfg, seed=1)
        settings2 = cfg_mod.build_train_settings(cfg2)
        m2 = cfg_mod.build_model(cfg2)
        r2 = train(m2, cfg_mod.generate_datasets(cfg2)[0], va, specs, settings2)
        assert [r["loss"] for r in r1] != [r["loss"] for r in r2]


class TestResume:
    def test_resume_matches_uninterrupted(self, tiny_run, tmp_path):
        """Stop after epoch 1, resume, and land on bit-identical parameters
        and identical metric rows for the remaining epochs."""
        cfg, tr, va, specs, settings = tiny_run
        full_model = cfg_mod.build_model(cfg)
        full_rows = train(full_model, tr, va, specs, settings)

        stem = str(tmp_path / "ckpt")
        part_model = cfg_mod.build_model(cfg)
        part_settings = TrainSettings(**{**settings.__dict__,
                                         "checkpoint_every": 1})
        train(part_model, tr, va, specs, part_settings, out_stem=stem)

        resumed = cfg_mod.build_model(cfg)
        tail_rows = train(resumed, tr, va, specs, settings,
                          resume_from=f"{stem}.epoch0001")
        full_tail = [r for r in full_rows if r["epoch"] >= 1]
        assert [r["loss"] for r in tail_rows] == [r["loss"] for r in full_tail]
        for name, arr in _final_params(full_model).items():
            assert np.array_equal(arr, _final_params(resumed)[name]), name


class TestCheckpoint:
    def test_roundtrip_restores_everything(self, tiny_run, tmp_path):
        from trimodal.optim import AdamW, Ema
        cfg, tr, va, specs, settings = tiny_run
        model = cfg_mod.build_model(cfg)
        opt = AdamW(model.parameters())
        ema = Ema(model.parameters(), alpha=0.1)
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        opt.step(1e-3)
        ema.update(model.parameters())
        stem = str(tmp_path / "c")
        save_checkpoint(stem, model, opt, ema, epoch=2, step=17)

        model2 = cfg_mod.build_model(cfg)
        opt2 = AdamW(model2.parameters())
        ema2 = Ema(model2.parameters(), alpha=0.1)
        meta = load_checkpoint(stem, model2, optimizer=opt2, ema=ema2)
        assert meta["epoch"] == 2 and meta["step"] == 17
        assert opt2.step_count == 1
        for name, p in model.param_dict().items():
            assert np.array_equal(p.data, model2.param_dict()[name].data)
            assert np.array_equal(opt.m[name], opt2.m[name])
            assert np.array_equal(ema.shadow[name], ema2.shadow[name])

    def test_wrong_kind_rejected(self, tiny_run, tmp_path):
        from trimodal.serialize import save_container
        cfg = tiny_run[0]
        stem = str(tmp_path / "idx")
        save_container(stem, {"vectors": np.zeros((1, 2))}, kind="feature_index")
        model = cfg_mod.build_model(cfg)
        with pytest.raises(ValueError, match="feature_index"):
            load_checkpoint(stem, model)

    def test_architecture_mismatch(self, tiny_run, tmp_path):
        cfg, *_ = tiny_run
        model = cfg_mod.build_model(cfg)
        stem = str(tmp_path / "c")
        save_checkpoint(stem, model)
        import copy
        other = copy.deepcopy(cfg)
        other["trunk"]["stage_dims"] = [16, 24]
        other["trunk"]["heads_per_stage"] = [2, 2]
        model2 = cfg_mod.build_model(other)
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(stem, model2)


class TestMetricsCsv:
    def test_columns_and_precision(self, tmp_path):
        rows = [{"step": 0, "epoch": 0, "lr": 1e-3, "loss": 2.0791234567},
                {"step": 1, "epoch": 0, "lr": "", "loss": "",
                 "acc_val_a": 0.5}]
        path = tmp_path / "m.csv"
        write_metrics_csv(rows, path)
        with open(path) as f:
            parsed = list(csv.DictReader(f))
        assert parsed[0]["loss"] == "2.079123457"  # 10 significant digits
        assert parsed[0]["acc_val_a"] == ""
        assert parsed[1]["acc_val_a"] == "0.5"
