"""Training loop: determinism, frozen surrogate, resume replay, NaN handling."""

import csv

import pytest
import torch

from advguide.errors import ConfigError, VersionError
from advguide.generator import load_generator
from advguide.losses import LossConfig
from advguide.training import TrainConfig, resume, train

from conftest import DESK_TARGET_CLASS, desk_generator_config


def tiny_cfg(mode="targeted", **overrides):
    base = dict(
        mode=mode,
        target_class=DESK_TARGET_CLASS if mode == "targeted" else None,
        seed=5,
        max_steps=2,
        batch_size=8,
        loss=LossConfig(n_guides=4),
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_gen_cfg():
    return desk_generator_config(residual_blocks=2, sim_placements=(1, 2), base_width=8)


class TestConfig:
    def test_targeted_requires_target(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="targeted")

    def test_epsilon_defaults(self):
        assert TrainConfig(mode="targeted", target_class=0).resolved_epsilon() == 16 / 255
        assert TrainConfig(mode="untargeted").resolved_epsilon() == 10 / 255
        assert TrainConfig(mode="untargeted", epsilon=0.1).resolved_epsilon() == 0.1

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="untargeted", lr=0)
        with pytest.raises(ConfigError):
            TrainConfig(mode="untargeted", epsilon=2.0)
        with pytest.raises(ConfigError):
            TrainConfig(mode="sideways")


@pytest.mark.parametrize("mode", ["targeted", "untargeted"])
def test_two_step_determinism(mode, desk_train_ds, desk_surrogate, desk_pools, tmp_path):
    runs = []
    for name in ("a", "b"):
        result = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg(mode),
            tiny_gen_cfg(),
            out_dir=tmp_path / f"{mode}_{name}",
        )
        runs.append(result.history)
    assert runs[0] == runs[1]


def test_surrogate_frozen_through_training(desk_train_ds, desk_surrogate, desk_pools, tmp_path):
    before = desk_surrogate.param_hash()
    train(
        desk_train_ds,
        desk_surrogate,
        desk_pools["train"],
        tiny_cfg("targeted"),
        tiny_gen_cfg(),
        out_dir=tmp_path / "frozen",
    )
    assert desk_surrogate.param_hash() == before


def test_loss_log_columns(desk_train_ds, desk_surrogate, desk_pools, tmp_path):
    result = train(
        desk_train_ds,
        desk_surrogate,
        desk_pools["train"],
        tiny_cfg("targeted"),
        tiny_gen_cfg(),
        out_dir=tmp_path / "log",
    )
    with open(result.loss_log_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "tlc", "tfs", "total"]
    assert len(rows) == 3  # header + 2 steps


class TestResume:
    def test_step_counter_advances(self, desk_train_ds, desk_surrogate, desk_pools, tmp_path):
        out = tmp_path / "short"
        first = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted", max_steps=2),
            tiny_gen_cfg(),
            out_dir=out,
        )
        state = resume(first.checkpoint_path)
        assert state.step == 2
        extended = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted", max_steps=3),
            out_dir=out,
            resume_from=first.checkpoint_path,
        )
        assert extended.final_step == 3
        assert [h["step"] for h in extended.history] == [2]

    def test_interrupted_matches_uninterrupted(
        self, desk_train_ds, desk_surrogate, desk_pools, tmp_path
    ):
        full = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted", max_steps=10),
            tiny_gen_cfg(),
            out_dir=tmp_path / "full",
        )
        part = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted", max_steps=5),
            tiny_gen_cfg(),
            out_dir=tmp_path / "part",
        )
        rest = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted", max_steps=10),
            out_dir=tmp_path / "part",
            resume_from=part.checkpoint_path,
        )
        merged = part.history + rest.history
        assert len(merged) == len(full.history)
        for a, b in zip(full.history, merged):
            assert a["step"] == b["step"]
            assert a["total"] == pytest.approx(b["total"], rel=1e-5)

    def test_resume_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"garbage")
        with pytest.raises(VersionError):
            resume(bad)

    def test_resume_inference_checkpoint_rejected(self, tmp_path):
        from advguide.generator import GuidedGenerator, save_checkpoint

        gen = GuidedGenerator(tiny_gen_cfg())
        path = save_checkpoint(tmp_path / "infer.pt", gen)  # no optimizer state
        with pytest.raises(VersionError):
            resume(path)

    def test_resume_seed_mismatch(self, desk_train_ds, desk_surrogate, desk_pools, tmp_path):
        first = train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted"),
            tiny_gen_cfg(),
            out_dir=tmp_path / "seeded",
        )
        with pytest.raises(ConfigError):
            train(
                desk_train_ds,
                desk_surrogate,
                desk_pools["train"],
                tiny_cfg("targeted", seed=99, max_steps=3),
                out_dir=tmp_path / "seeded",
                resume_from=first.checkpoint_path,
            )


def test_nan_loss_aborts_with_dump(
    desk_train_ds, desk_surrogate, desk_pools, tmp_path, monkeypatch
):
    import advguide.training as train_module

    def poisoned(*args, **kwargs):
        bad = torch.tensor(float("nan"), requires_grad=True)
        return bad, {"tlc": bad}

    monkeypatch.setattr(train_module, "targeted_total", poisoned)
    out = tmp_path / "nan"
    with pytest.raises(RuntimeError, match="non-finite"):
        train(
            desk_train_ds,
            desk_surrogate,
            desk_pools["train"],
            tiny_cfg("targeted"),
            tiny_gen_cfg(),
            out_dir=out,
        )
    assert list(out.glob("nan_batch_step*.pt"))


def test_trained_sim_guide_sensitivity(desk_targeted, desk_eval_ds, desk_pools):
    """Non-zero SIM weights: different guides give different adversarial outputs."""
    gen = load_generator(desk_targeted["result"].checkpoint_path)
    x = desk_eval_ds.batch([0, 1]).pixels
    from advguide.data import load_image
    from advguide.guides import select

    pool = desk_pools["eval"]
    g1 = load_image(select(pool, -1, 1, seed=1, mode="targeted", target_class=3)[0].path, 32)
    g2 = load_image(select(pool, -1, 1, seed=2, mode="targeted", target_class=5)[0].path, 32)
    with torch.no_grad():
        a = gen.generate(x, g1.unsqueeze(0).expand(2, -1, -1, -1))
        b = gen.generate(x, g2.unsqueeze(0).expand(2, -1, -1, -1))
    assert (a - b).abs().max().item() > 0.0


def test_training_loss_decreases(desk_targeted):
    history = desk_targeted["result"].history
    first = sum(h["total"] for h in history[:10]) / 10
    last = sum(h["total"] for h in history[-10:]) / 10
    assert last < first
