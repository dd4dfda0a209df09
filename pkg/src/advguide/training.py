"""Generator training loop for targeted and untargeted attack modes.

Per step: draw a data batch, select guiding images, run the generator (its
output is already budget-projected), push adversarial/clean/guide batches
through the frozen surrogate in one pass, and take an Adam step on the
generator only. Batch order and guide choices are derived from (seed, step)
alone, so an interrupted run resumed from a checkpoint replays the exact
uninterrupted trajectory.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from random import Random

import torch

from .data import load_image
from .errors import ConfigError, DataError
from .generator import (
    GeneratorConfig,
    GuidedGenerator,
    load_checkpoint,
    save_checkpoint,
)
from .guides import select
from .losses import LossConfig, targeted_total, untargeted_total

TARGETED_EPS = 16 / 255
UNTARGETED_EPS = 10 / 255


@dataclass
class TrainConfig:
    mode: str = "targeted"
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    epochs: int = 1
    batch_size: int = 16
    epsilon: float = None  # None -> mode default (16/255 targeted, 10/255 untargeted)
    target_class: int = None
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    max_steps: int = None
    checkpoint_every: int = None

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ConfigError(f"mode must be targeted|untargeted, got {self.mode!r}")
        if self.mode == "targeted" and self.target_class is None:
            raise ConfigError("targeted mode requires target_class")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be > 0, epochs and batch_size >= 1")
        if self.epsilon is not None and not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def resolved_epsilon(self):
        if self.epsilon is not None:
            return self.epsilon
        return TARGETED_EPS if self.mode == "targeted" else UNTARGETED_EPS


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    history: list
    final_step: int


@dataclass
class TrainingState:
    generator: GuidedGenerator
    optimizer_state: dict
    step: int
    train_config: TrainConfig


def _train_config_from_dict(d):
    d = dict(d)
    d["loss"] = LossConfig(**d["loss"])
    d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def resume(checkpoint_path):
    """Restore generator weights, optimizer state and the step counter."""
    payload = load_checkpoint(checkpoint_path)
    from .generator import load_generator

    gen = load_generator(checkpoint_path)
    extra = payload.get("extra", {})
    if "train_config" not in extra or "optimizer_state" not in payload:
        from .errors import VersionError

        raise VersionError(f"{checkpoint_path} was not saved by a training run")
    return TrainingState(
        generator=gen,
        optimizer_state=payload["optimizer_state"],
        step=payload["step"],
        train_config=_train_config_from_dict(extra["train_config"]),
    )


def _step_seed(seed, step):
    return (seed * 1_000_003 + 7919 * step) % (2**31 - 1)


def _epoch_order(seed, epoch, n):
    order = list(range(n))
    Random((seed * 9_999_991 + epoch) % (2**31 - 1)).shuffle(order)
    return order


def _load_guide_batch(entries, size):
    return torch.stack([load_image(e.path, size) for e in entries])


def train(
    dataset,
    surrogate,
    guide_pool,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig = None,
    out_dir="runs/train",
    resume_from=None,
):
    """Run (or resume) generator training; returns checkpoint + loss-log paths.

    ``dataset`` is a ManifestDataset whose image size matches the generator
    input size; ``surrogate`` is a loaded frozen adapter; ``guide_pool`` is
    the train-phase pool.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = resume(resume_from)
        # caller-supplied cfg may extend max_steps/epochs; seed and mode must
        # match the checkpoint for the replay to be exact
        cfg = cfg if cfg is not None else state.train_config
        if (cfg.seed, cfg.mode) != (state.train_config.seed, state.train_config.mode):
            raise ConfigError("resume requires the checkpoint's seed and mode")
        generator = state.generator
        optimizer = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=cfg.betas)
        optimizer.load_state_dict(state.optimizer_state)
        start_step = state.step
    else:
        if gen_cfg is None:
            raise ConfigError("gen_cfg is required when starting a fresh run")
        epsilon = cfg.resolved_epsilon()
        gen_cfg = replace(gen_cfg, epsilon=epsilon)
        torch.manual_seed(cfg.seed)
        generator = GuidedGenerator(gen_cfg)
        optimizer = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=cfg.betas)
        start_step = 0

    size = generator.cfg.input_size[0]
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    term_names = cfg.loss.enabled_terms(cfg.mode)
    loss_log = out_dir / "loss_log.csv"
    ckpt_path = out_dir / "checkpoint.pt"
    history = []

    surrogate_hash = surrogate.param_hash()
    generator.train()
    fresh_log = resume_from is None or not loss_log.exists()
    with open(loss_log, "w" if resume_from is None else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh_log:
            writer.writerow(["step", *term_names, "total"])
        for step in range(start_step, total_steps):
            epoch, offset = divmod(step, steps_per_epoch)
            order = _epoch_order(cfg.seed, epoch, n)
            idx = order[offset * cfg.batch_size : (offset + 1) * cfg.batch_size]
            batch = dataset.batch(idx)
            x = batch.pixels
            if x.shape[-2:] != tuple(generator.cfg.input_size):
                raise ConfigError(
                    f"dataset images {tuple(x.shape[-2:])} do not match generator "
                    f"input size {tuple(generator.cfg.input_size)}"
                )
            seed_s = _step_seed(cfg.seed, step)

            if cfg.mode == "targeted":
                entries = select(
                    guide_pool,
                    source_class=-1,
                    k=len(batch),
                    seed=seed_s,
                    mode="targeted",
                    target_class=cfg.target_class,
                )
                guide = _load_guide_batch(entries, size)
                x_adv = generator.generate(x, guide)
                stacked = torch.cat([x_adv, x, guide])
                logits, feats = surrogate.forward_with_features(stacked)
                b = len(batch)
                total, terms = targeted_total(
                    logits[:b],
                    logits[2 * b :],
                    logits[b : 2 * b],
                    feats.values[:b],
                    feats.values[b : 2 * b],
                    feats.values[2 * b :],
                    cfg.loss,
                )
            else:
                batch_classes = set(batch.labels.tolist())
                pool_classes = {e.label for e in guide_pool.entries}
                # one guide class shared across the step, never equal to any kept
                # sample's class; when the batch spans every pool class the
                # clashing samples are dropped from this step instead
                exclude = batch_classes if pool_classes - batch_classes else set()
                entries = select(
                    guide_pool,
                    source_class=-1,
                    k=cfg.loss.n_guides,
                    seed=seed_s,
                    exclude_classes=exclude,
                )
                guide_class = entries[0].label
                keep = batch.labels != guide_class
                if int(keep.sum()) == 0:
                    raise DataError(
                        "guide pool has no class distinct from the current batch"
                    )
                x = x[keep]
                guide_imgs = _load_guide_batch(entries, size)
                guide = guide_imgs[0:1].expand(x.shape[0], -1, -1, -1)
                x_adv = generator.generate(x, guide)
                stacked = torch.cat([x_adv, x])
                _, feats = surrogate.forward_with_features(stacked)
                b = x.shape[0]
                with torch.no_grad():
                    guide_feats = surrogate.features(guide_imgs).values
                total, terms = untargeted_total(
                    feats.values[:b],
                    feats.values[b:],
                    guide_feats,
                    cfg.loss,
                    guide_labels=[e.label for e in entries],
                )

            if not torch.isfinite(total):
                dump = out_dir / f"nan_batch_step{step}.pt"
                torch.save({"step": step, "pixels": x, "guide": guide}, dump)
                raise RuntimeError(
                    f"non-finite loss at step {step}; offending batch dumped to {dump}"
                )

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            row = {
                "step": step,
                **{k: v.detach().item() for k, v in terms.items()},
                "total": total.detach().item(),
            }
            history.append(row)
            writer.writerow([row["step"], *[f"{row[k]:.6f}" for k in term_names],
                             f"{row['total']:.6f}"])

            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save(ckpt_path, generator, optimizer, step + 1, cfg)

    _save(ckpt_path, generator, optimizer, total_steps, cfg)
    assert surrogate.param_hash() == surrogate_hash, "surrogate weights drifted during training"
    return TrainResult(
        checkpoint_path=ckpt_path,
        loss_log_path=loss_log,
        history=history,
        final_step=total_steps,
    )


def _save(path, generator, optimizer, step, cfg):
    save_checkpoint(
        path,
        generator,
        optimizer=optimizer,
        step=step,
        extra={"train_config": asdict(cfg)},
    )
