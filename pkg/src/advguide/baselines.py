"""Iterative comparison attacks: PGD, DI-FGSM and feature-dispersion reduction.

All three share the generator module's budget projection and a common
signed-gradient iteration, so the budget invariant and seeding behavior are
identical across attacks. DI with diversity_prob=0 consumes no randomness and
reproduces the plain iterative-FGSM trajectory bit-exactly.
"""

from dataclasses import dataclass
from random import Random

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .generator import project
from .surrogate import Surrogate


@dataclass
class IterAttackConfig:
    steps: int = 10
    step_size: float = 2 / 255
    epsilon: float = 10 / 255
    random_init: bool = True
    diversity_prob: float = 0.7  # DI only
    resize_range: tuple = (224, 250)  # DI only
    dr_layer: str = ""  # DR only; empty -> surrogate default tap
    mode: str = "untargeted"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise ConfigError(f"diversity_prob must lie in [0, 1], got {self.diversity_prob}")
        lo, hi = self.resize_range
        if lo >= hi:
            raise ConfigError(f"resize_range must be (low, high) with low < high, got {self.resize_range}")
        if self.mode not in ("targeted", "untargeted"):
            raise ConfigError(f"mode must be targeted|untargeted, got {self.mode!r}")


def _random_start(x, epsilon, seed):
    gen = torch.Generator().manual_seed(seed)
    noise = (torch.rand(x.shape, generator=gen) * 2 - 1) * epsilon
    return torch.clamp(x + noise, 0.0, 1.0)


def _diversity_transform(x, resize_range, rng):
    """Random resize + random pad back to the original resolution."""
    h, w = x.shape[-2:]
    lo, hi = resize_range
    rnd = rng.randint(lo, hi - 1)
    resized = F.interpolate(x, size=(rnd, rnd), mode="bilinear", align_corners=False)
    rem = hi - rnd
    top = rng.randint(0, rem)
    left = rng.randint(0, rem)
    padded = F.pad(resized, (left, rem - left, top, rem - top), value=0.0)
    return F.interpolate(padded, size=(h, w), mode="bilinear", align_corners=False)


def _iterative_attack(x, surrogate, cfg, loss_fn, ascend, seed, transform_prob=0.0):
    if not isinstance(surrogate, Surrogate):
        raise ConfigError("surrogate must be a loaded Surrogate adapter")
    rng = Random(seed)
    x = x.detach()
    x_adv = _random_start(x, cfg.epsilon, seed) if cfg.random_init else x.clone()
    sign = 1.0 if ascend else -1.0
    for _ in range(cfg.steps):
        x_in = x_adv.detach().requires_grad_(True)
        view = x_in
        if transform_prob > 0 and rng.random() < transform_prob:
            view = _diversity_transform(x_in, cfg.resize_range, rng)
        loss = loss_fn(view)
        grad = torch.autograd.grad(loss, x_in)[0]
        x_adv = x_in.detach() + sign * cfg.step_size * grad.sign()
        x_adv = project(x, x_adv, cfg.epsilon)
    return x_adv.detach()


def pgd(x, label_or_target, surrogate, cfg: IterAttackConfig, seed=0):
    """Projected signed-gradient steps on cross-entropy.

    Untargeted: ascend the loss of the true labels. Targeted: descend the
    loss toward the target class.
    """
    labels = torch.as_tensor(label_or_target, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(x.shape[0])

    def ce(view):
        return F.cross_entropy(surrogate.logits(view), labels)

    return _iterative_attack(
        x, surrogate, cfg, ce, ascend=cfg.mode == "untargeted", seed=seed
    )


def di_fgsm(x, label_or_target, surrogate, cfg: IterAttackConfig, seed=0):
    """PGD with each step's gradient taken on a randomly resized-and-padded copy."""
    labels = torch.as_tensor(label_or_target, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(x.shape[0])

    def ce(view):
        return F.cross_entropy(surrogate.logits(view), labels)

    return _iterative_attack(
        x,
        surrogate,
        cfg,
        ce,
        ascend=cfg.mode == "untargeted",
        seed=seed,
        transform_prob=cfg.diversity_prob,
    )


def feature_std(surrogate, x, layer=None):
    """Per-sample standard deviation of the mid-layer activation."""
    feats = surrogate.features(x, layer or None).values
    return feats.flatten(1).std(dim=1)


def dr(x, surrogate, cfg: IterAttackConfig, seed=0, target=None):
    """Iterative descent on the dispersion (std) of a mid-layer activation."""
    if target is not None or cfg.mode == "targeted":
        raise ConfigError("dispersion reduction is untargeted only")
    layer = cfg.dr_layer or None

    def dispersion(view):
        return feature_std(surrogate, view, layer).mean()

    return _iterative_attack(x, surrogate, cfg, dispersion, ascend=False, seed=seed)
