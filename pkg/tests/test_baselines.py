"""Iterative baselines: reductions, bit-exact trajectories, budget, mode contracts."""

import pytest
import torch

from advguide.baselines import IterAttackConfig, di_fgsm, dr, feature_std, pgd
from advguide.errors import ConfigError
from advguide.evaluation import assert_budget
from advguide.surrogate import Surrogate, SurrogateHandle


@pytest.fixture(scope="module")
def rand_surrogate():
    torch.manual_seed(0)
    return Surrogate(SurrogateHandle("small_cnn", num_classes=10))


@pytest.fixture(scope="module")
def batch():
    torch.manual_seed(1)
    x = torch.rand(8, 3, 32, 32)
    y = torch.randint(0, 10, (8,))
    return x, y


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            IterAttackConfig(steps=0)
        with pytest.raises(ConfigError):
            IterAttackConfig(step_size=0)
        with pytest.raises(ConfigError):
            IterAttackConfig(diversity_prob=1.5)
        with pytest.raises(ConfigError):
            IterAttackConfig(resize_range=(250, 224))
        with pytest.raises(ConfigError):
            IterAttackConfig(mode="sideways")


class TestPGD:
    def test_budget(self, rand_surrogate, batch):
        x, y = batch
        cfg = IterAttackConfig(steps=5, epsilon=10 / 255, random_init=True)
        adv = pgd(x, y, rand_surrogate, cfg, seed=0)
        assert_budget(x, adv, 10 / 255)

    def test_single_step_no_init_is_fgsm(self, rand_surrogate, batch):
        x, y = batch
        cfg = IterAttackConfig(steps=1, step_size=10 / 255, epsilon=10 / 255, random_init=False)
        adv = pgd(x, y, rand_surrogate, cfg, seed=0)
        # hand-rolled FGSM step
        x_in = x.clone().requires_grad_(True)
        loss = torch.nn.functional.cross_entropy(rand_surrogate.logits(x_in), y)
        grad = torch.autograd.grad(loss, x_in)[0]
        fgsm = torch.clamp(x + (10 / 255) * grad.sign(), 0, 1)
        delta = torch.clamp(fgsm - x, -10 / 255, 10 / 255)
        fgsm = torch.clamp(x + delta, 0, 1)
        assert torch.equal(adv, fgsm)

    def test_seeded_reproducibility(self, rand_surrogate, batch):
        x, y = batch
        cfg = IterAttackConfig(steps=3, random_init=True)
        assert torch.equal(
            pgd(x, y, rand_surrogate, cfg, seed=5), pgd(x, y, rand_surrogate, cfg, seed=5)
        )
        assert not torch.equal(
            pgd(x, y, rand_surrogate, cfg, seed=5), pgd(x, y, rand_surrogate, cfg, seed=6)
        )

    def test_targeted_direction(self, rand_surrogate, batch):
        x, _ = batch
        cfg = IterAttackConfig(steps=5, epsilon=16 / 255, random_init=False, mode="targeted")
        adv = pgd(x, 3, rand_surrogate, cfg, seed=0)
        ce = torch.nn.functional.cross_entropy
        target = torch.full((x.shape[0],), 3)
        with torch.no_grad():
            before = ce(rand_surrogate.logits(x), target)
            after = ce(rand_surrogate.logits(adv), target)
        assert after.item() < before.item()

    def test_loss_increase_oracle(self, desk_surrogate, desk_eval_ds):
        # untargeted PGD strictly increases per-sample loss on >=95% of samples
        batch = desk_eval_ds.batch(list(range(100)))
        cfg = IterAttackConfig(steps=10, step_size=2 / 255, epsilon=10 / 255, random_init=True)
        adv = pgd(batch.pixels, batch.labels, desk_surrogate, cfg, seed=0)
        ce = torch.nn.functional.cross_entropy
        with torch.no_grad():
            before = ce(desk_surrogate.logits(batch.pixels), batch.labels, reduction="none")
            after = ce(desk_surrogate.logits(adv), batch.labels, reduction="none")
        frac = (after > before).float().mean().item()
        assert frac >= 0.95, f"loss increased on only {frac:.0%}"


class TestDI:
    def test_zero_diversity_matches_ifgsm_bitwise(self, rand_surrogate, batch):
        x, y = batch
        cfg_di = IterAttackConfig(steps=6, random_init=False, diversity_prob=0.0,
                                  resize_range=(32, 40))
        cfg_pgd = IterAttackConfig(steps=6, random_init=False)
        a = di_fgsm(x, y, rand_surrogate, cfg_di, seed=3)
        b = pgd(x, y, rand_surrogate, cfg_pgd, seed=3)
        assert torch.equal(a, b)

    def test_full_diversity_changes_view(self, rand_surrogate, batch):
        x, y = batch
        cfg0 = IterAttackConfig(steps=2, random_init=False, diversity_prob=0.0,
                                resize_range=(32, 40))
        cfg1 = IterAttackConfig(steps=2, random_init=False, diversity_prob=1.0,
                                resize_range=(32, 40))
        a = di_fgsm(x, y, rand_surrogate, cfg0, seed=3)
        b = di_fgsm(x, y, rand_surrogate, cfg1, seed=3)
        assert not torch.equal(a, b)

    def test_budget(self, rand_surrogate, batch):
        x, y = batch
        cfg = IterAttackConfig(steps=4, diversity_prob=0.7, resize_range=(32, 40))
        adv = di_fgsm(x, y, rand_surrogate, cfg, seed=1)
        assert_budget(x, adv, cfg.epsilon)

    def test_seeded_transform_reproducibility(self, rand_surrogate, batch):
        x, y = batch
        cfg = IterAttackConfig(steps=3, diversity_prob=1.0, resize_range=(32, 40),
                               random_init=True)
        assert torch.equal(
            di_fgsm(x, y, rand_surrogate, cfg, seed=7),
            di_fgsm(x, y, rand_surrogate, cfg, seed=7),
        )


class TestDR:
    def test_reduces_feature_std(self, desk_surrogate, desk_eval_ds):
        batch = desk_eval_ds.batch(list(range(60)))
        cfg = IterAttackConfig(steps=10, step_size=2 / 255, epsilon=10 / 255)
        adv = dr(batch.pixels, desk_surrogate, cfg, seed=0)
        before = feature_std(desk_surrogate, batch.pixels)
        after = feature_std(desk_surrogate, adv)
        frac = (after < before).float().mean().item()
        assert frac >= 0.9, f"std reduced on only {frac:.0%}"
        assert_budget(batch.pixels, adv, cfg.epsilon)

    def test_rejects_target(self, rand_surrogate, batch):
        x, _ = batch
        with pytest.raises(ConfigError):
            dr(x, rand_surrogate, IterAttackConfig(), seed=0, target=3)
        with pytest.raises(ConfigError):
            dr(x, rand_surrogate, IterAttackConfig(mode="targeted"), seed=0)
