import copy
import csv
import json

import numpy as np
import pytest

from trimodal import config as cfg_mod
from trimodal.cli import main


@pytest.fixture(scope="module")
def small_cfg():
    cfg = cfg_mod.default_config()
    for ds in cfg["datasets"]:
        ds["train_size"] = 16
        ds["val_size"] = 8
    cfg["train"]["epochs"] = 1
    cfg["train"]["checkpoint_every"] = 1
    return cfg


@pytest.fixture(scope="module")
def cfg_path(small_cfg, tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    cfg_mod.save_config(small_cfg, path)
    return str(path)


@pytest.fixture(scope="module")
def trained(cfg_path, tmp_path_factory):
    """One tiny training run shared by the checkpoint-consuming commands."""
    out = tmp_path_factory.mktemp("train_out")
    rc = main(["train", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    return out


class TestGen:
    def test_writes_datasets(self, cfg_path, tmp_path, capsys):
        rc = main(["gen", "--config", cfg_path, "--out", str(tmp_path)])
        assert rc == 0
        captured = capsys.readouterr().out
        assert "config_hash" in captured
        for split in ("train", "val"):
            for ds in ("syn_image", "syn_video", "syn_rgbd"):
                assert (tmp_path / split / ds / "manifest.json").exists()
                assert (tmp_path / split / ds / "samples.bin").exists()

    def test_seed_override_changes_hash(self, cfg_path, tmp_path, capsys):
        main(["gen", "--config", cfg_path, "--out", str(tmp_path / "a")])
        h1 = capsys.readouterr().out.splitlines()[0]
        main(["gen", "--config", cfg_path, "--seed", "9",
              "--out", str(tmp_path / "b")])
        h2 = capsys.readouterr().out.splitlines()[0]
        assert h1.startswith("config_hash") and h1 != h2


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "metrics.csv").exists()
        assert (trained / "resolved_config.json").exists()
        assert (trained / "checkpoint.final.manifest.json").exists()
        assert (trained / "checkpoint.final.blob").exists()
        with open(trained / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert any(r["loss"] for r in rows)
        assert any(r.get("acc_val_syn_image") for r in rows)


class TestEval:
    def test_accuracy_and_clip_sweep(self, cfg_path, trained, tmp_path, capsys):
        rc = main(["eval", "--config", cfg_path, "--out", str(tmp_path),
                   "--checkpoint", str(trained / "checkpoint.final"),
                   "--clip-len", "2,8"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "top1 syn_image" in out
        with open(tmp_path / "clip_sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["clip_len"] for r in rows] == ["2", "8"]
        assert rows[0]["n_clips"] == "4"
        assert rows[1]["n_clips"] == "1"

    def test_missing_checkpoint_is_usage_error(self, cfg_path, tmp_path):
        rc = main(["eval", "--config", cfg_path, "--out", str(tmp_path),
                   "--checkpoint", str(tmp_path / "nope")])
        assert rc == 2


class TestKnn:
    def test_table_and_indexes(self, cfg_path, trained, tmp_path, capsys):
        rc = main(["knn", "--config", cfg_path, "--out", str(tmp_path),
                   "--checkpoint", str(trained / "checkpoint.final"),
                   "--modality", "rgb"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "knn rgb->d top1" in out
        with open(tmp_path / "knn.csv") as f:
            rows = list(csv.DictReader(f))
        assert {r["database"] for r in rows} == {"rgb", "d", "rgbd", "video"}
        assert all(r["query"] == "rgb" for r in rows)
        for key in ("rgb", "d", "rgbd", "video"):
            assert (tmp_path / f"index_{key}.blob").exists()


class TestRetrieve:
    def test_ranked_csv(self, cfg_path, trained, tmp_path):
        rc = main(["retrieve", "--config", cfg_path, "--out", str(tmp_path),
                   "--checkpoint", str(trained / "checkpoint.final"),
                   "--query-modality", "rgb", "--db-modality", "d",
                   "--top-n", "3"])
        assert rc == 0
        with open(tmp_path / "retrieve_rgb_to_d.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 8 * 3
        by_query = {}
        for r in rows:
            by_query.setdefault(r["query_idx"], []).append(float(r["similarity"]))
        for sims in by_query.values():
            assert sims == sorted(sims, reverse=True)


class TestPlot:
    def test_loss_and_clip_plots(self, trained, cfg_path, tmp_path):
        rc = main(["plot", "--metrics", str(trained / "metrics.csv"),
                   "--out", str(tmp_path)])
        assert rc == 0
        svg = (tmp_path / "loss.svg").read_text()
        assert svg.lstrip().startswith("<?xml")

    def test_no_inputs_is_usage_error(self, tmp_path):
        assert main(["plot", "--out", str(tmp_path)]) == 2


class TestErrors:
    def test_missing_config_file(self, tmp_path):
        rc = main(["gen", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path)])
        assert rc == 2

    def test_invalid_config_field(self, small_cfg, tmp_path):
        bad = copy.deepcopy(small_cfg)
        del bad["train"]["lr_peak"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        rc = main(["gen", "--config", str(path), "--out", str(tmp_path)])
        assert rc == 2

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        rc = main(["gen", "--config", str(path), "--out", str(tmp_path)])
        assert rc == 2

    def test_incompatible_checkpoint_exit_code(self, small_cfg, trained,
                                               tmp_path):
        """A checkpoint trained under a different architecture must be
        rejected with the compatibility exit code."""
        other = copy.deepcopy(small_cfg)
        other["trunk"]["stage_dims"] = [16, 24]
        other["trunk"]["heads_per_stage"] = [2, 2]
        path = tmp_path / "other.json"
        cfg_mod.save_config(other, path)
        rc = main(["eval", "--config", str(path), "--out", str(tmp_path),
                   "--checkpoint", str(trained / "checkpoint.final")])
        assert rc == 3
