"""CLI plumbing: config validation, exit codes, end-to-end command flows."""

import json
from pathlib import Path

import pytest
import yaml

from advguide.cli import main

pytestmark = pytest.mark.usefixtures("desk")


def base_config(desk, out_dir, mode="targeted"):
    cfg = {
        "seed": 11,
        "output_dir": str(out_dir),
        "mode": mode,
        "data": {
            "train_manifest": str(desk.train_manifest),
            "eval_manifest": str(desk.eval_manifest),
            "image_size": 32,
        },
        "surrogate": {
            "id": "sur",
            "arch": "small_cnn_wide",
            "weights": str(desk.surrogate_ckpt),
            "num_classes": 10,
        },
        "generator": {
            "residual_blocks": 2,
            "sim_placements": [1, 2],
            "base_width": 8,
            "trunk_channels": 8,
        },
        "train": {"max_steps": 2, "batch_size": 8},
        "loss": {"n_guides": 4},
        "guides": {"manifest": str(desk.guide_manifest)},
        "roster": {
            "targets": [
                {
                    "id": "sur",
                    "arch": "small_cnn_wide",
                    "weights": str(desk.surrogate_ckpt),
                    "num_classes": 10,
                    "group": "conv",
                },
                {
                    "id": "twin",
                    "arch": "small_cnn",
                    "weights": str(desk.transfer_ckpt),
                    "num_classes": 10,
                    "group": "vit",
                },
            ],
            "target_classes": [3],
        },
        "baselines": {
            "pgd": {"steps": 3, "step_size": 0.00784, "random_init": True},
            "di": {"steps": 3, "diversity_prob": 0.7, "resize_range": [32, 40]},
            "dr": {"steps": 3},
        },
        "evaluate": {"batch_size": 100},
    }
    if mode == "targeted":
        cfg["train"]["target_class"] = 3
    return cfg


def write_config(tmp_path, cfg, name="exp.yml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


@pytest.fixture
def targeted_config(desk, tmp_path):
    return write_config(tmp_path, base_config(desk, tmp_path / "out"))


class TestValidation:
    def test_dry_run_exits_zero_without_training(self, targeted_config, tmp_path, capsys):
        assert main(["train", "-c", str(targeted_config), "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "epsilon" in out
        assert not (tmp_path / "out" / "checkpoint.pt").exists()

    def test_missing_target_class_exits_2(self, desk, tmp_path):
        cfg = base_config(desk, tmp_path / "out")
        del cfg["train"]["target_class"]
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path), "--dry-run"]) == 2

    def test_unknown_key_line_anchored(self, desk, tmp_path, capsys):
        cfg = base_config(desk, tmp_path / "out")
        cfg["train"]["warmup_steps"] = 5
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path), "--dry-run"]) == 2
        err = capsys.readouterr().err
        assert "train.warmup_steps" in err
        line_no = None
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            if "warmup_steps" in line:
                line_no = i
        assert f":{line_no}:" in err

    def test_type_error_exits_2(self, desk, tmp_path, capsys):
        cfg = base_config(desk, tmp_path / "out")
        cfg["train"]["batch_size"] = "many"
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path), "--dry-run"]) == 2
        assert "batch_size" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "-c", str(tmp_path / "nope.yml"), "--dry-run"]) == 2

    def test_set_override(self, targeted_config, capsys):
        assert (
            main(
                [
                    "train",
                    "-c",
                    str(targeted_config),
                    "--dry-run",
                    "--set",
                    "train.max_steps=7",
                ]
            )
            == 0
        )
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["resolved"]["train"]["max_steps"] == 7

    def test_bad_override_path(self, targeted_config):
        assert main(["train", "-c", str(targeted_config), "--dry-run",
                     "--set", "train.bogus_key=1"]) == 2


class TestTrainFlow:
    def test_train_writes_checkpoint_and_log(self, targeted_config, tmp_path, capsys):
        assert main(["train", "-c", str(targeted_config)]) == 0
        out_dir = tmp_path / "out"
        assert (out_dir / "checkpoint.pt").exists()
        assert (out_dir / "loss_log.csv").exists()
        assert "checkpoint" in capsys.readouterr().out

    def test_generate_outputs_and_audit(self, desk, tmp_path, capsys):
        cfg = base_config(desk, tmp_path / "out")
        cfg["data"]["eval_manifest"] = str(desk.eval_manifest)
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path)]) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.pt")

        # restrict generation to a small manifest
        small = tmp_path / "small_manifest.txt"
        lines = Path(desk.eval_manifest).read_text().splitlines()[:6]
        small.write_text(
            "\n".join(f"{Path(desk.eval_manifest).parent / l.split()[0]} {l.split()[1]}"
                      for l in lines) + "\n"
        )
        adv_dir = tmp_path / "adv"
        args = ["generate", "-c", str(path), "--checkpoint", ckpt,
                "--inputs", str(small), "--guide", "auto", "--out", str(adv_dir),
                "--seed", "4"]
        assert main(args) == 0
        pngs = sorted(adv_dir.glob("*.png"))
        sidecars = sorted(adv_dir.glob("*.json"))
        assert len(pngs) == 6 and len(sidecars) == 6
        meta = json.loads(sidecars[0].read_text())
        assert {"epsilon", "guide", "checkpoint_sha256", "source"} <= set(meta)

        first_bytes = [p.read_bytes() for p in pngs]
        assert main(args) == 0  # rerun with the same seed
        assert [p.read_bytes() for p in sorted(adv_dir.glob("*.png"))] == first_bytes

        assert main(["audit-budget", "--adv", str(adv_dir)]) == 0
        # corrupt one pixel beyond the budget and re-audit
        from PIL import Image
        import numpy as np

        arr = np.array(Image.open(pngs[0]))
        arr[0, 0, 0] = 255 if arr[0, 0, 0] < 128 else 0
        Image.fromarray(arr).save(pngs[0])
        assert main(["audit-budget", "--adv", str(adv_dir)]) == 1


class TestEvaluateFlow:
    def test_identity_evaluate_matches_clean(self, desk, tmp_path, capsys):
        cfg = base_config(desk, tmp_path / "out", mode="untargeted")
        path = write_config(tmp_path, cfg)
        assert main(["evaluate", "-c", str(path), "--attack", "identity"]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        row = report["rows"][0]
        assert row["attack"] == "identity"
        assert row["accuracies"]["sur"] == pytest.approx(desk.surrogate_clean_acc, abs=1e-6)

    def test_baseline_then_evaluate_adv_dir(self, desk, tmp_path):
        cfg = base_config(desk, tmp_path / "out", mode="untargeted")
        path = write_config(tmp_path, cfg)
        adv_dir = tmp_path / "out" / "adv_pgd"
        assert main(["baseline", "-c", str(path), "--attack", "pgd", "--out", str(adv_dir)]) == 0
        assert len(list(adv_dir.glob("*.png"))) == 300
        assert main(["evaluate", "-c", str(path), "--adv-dir", str(adv_dir),
                     "--attack", "pgd"]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["rows"][0]["attack"] == "pgd"
        # pgd crafted on the surrogate beats its clean accuracy badly
        assert report["rows"][0]["accuracies"]["sur"] < desk.surrogate_clean_acc - 30

    def test_profile_command(self, targeted_config, capsys):
        assert main(["profile", "-c", str(targeted_config), "--n-runs", "3"]) == 0
        out = capsys.readouterr().out
        assert "params with SIM" in out and "params without SIM" in out

    def test_scored_guide_strategy_via_subprocess(self, desk, tmp_path):
        import sys

        scorer = tmp_path / "scorer.py"
        scorer.write_text("import sys\nprint(len(sys.argv[1]))\n")
        cfg = base_config(desk, tmp_path / "out")
        cfg["guides"]["strategy"] = "score_max"
        cfg["guides"]["scorer_command"] = [sys.executable, str(scorer)]
        path = write_config(tmp_path, cfg)
        from advguide.config import load_config

        pools = load_config(path).guide_pools()
        assert pools["eval"].scores is not None
        assert pools["eval"].scores == sorted(pools["eval"].scores)

    def test_visualize_command(self, desk, tmp_path):
        cfg = base_config(desk, tmp_path / "out")
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path)]) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.pt")
        fig_dir = tmp_path / "figs"
        assert main(["visualize", "-c", str(path), "--checkpoint", ckpt,
                     "--n", "2", "--out", str(fig_dir)]) == 0
        assert (fig_dir / "gradcam_grid.png").exists()

    def test_evaluate_ours_attack(self, desk, tmp_path):
        cfg = base_config(desk, tmp_path / "out")
        path = write_config(tmp_path, cfg)
        assert main(["train", "-c", str(path)]) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.pt")
        assert main(["evaluate", "-c", str(path), "--attack", "identity,ours",
                     "--checkpoint", ckpt]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        attacks = {r["attack"] for r in report["rows"]}
        assert attacks == {"identity", "ours"}
        # eval-run guide identities are logged per target class
        assert "guides/ours" in report["metadata"]

    def test_evaluate_ours_requires_checkpoint(self, desk, tmp_path):
        cfg = base_config(desk, tmp_path / "out")
        path = write_config(tmp_path, cfg)
        assert main(["evaluate", "-c", str(path), "--attack", "ours"]) == 2
