"""Guide-conditioned adversarial generator.

A ResNet-style image-to-image generator augmented with semantic injection
layers: each injection layer reads the guiding image, resizes it to the
current feature resolution, and predicts per-position scale/shift maps that
modulate the feature map as ``(1 + scale) * f + shift``. The final output is
squashed to [0, 1] and projected into the L-inf budget around the source
image, so every generated example satisfies the perturbation constraint by
construction.
"""

import hashlib
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, VersionError

CHECKPOINT_SCHEMA = "advguide.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GeneratorConfig:
    """Architecture description for :class:`GuidedGenerator`.

    ``sim_placements`` lists 1-based residual-block indices that receive a
    semantic injection layer after the block. ``base_width`` is the stem
    width; the residual trunk runs at ``4 * base_width`` channels.
    """

    residual_blocks: int = 6
    sim_placements: tuple = tuple(range(1, 7))
    epsilon: float = 16 / 255
    input_size: tuple = (224, 224)
    base_width: int = 64
    trunk_channels: int = 128

    def __post_init__(self):
        self.sim_placements = tuple(int(i) for i in self.sim_placements)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.residual_blocks < 1:
            raise ConfigError("residual_blocks must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        bad = [i for i in self.sim_placements if not 1 <= i <= self.residual_blocks]
        if bad:
            raise ConfigError(f"sim_placements {bad} outside [1, {self.residual_blocks}]")
        if len(set(self.sim_placements)) != len(self.sim_placements):
            raise ConfigError("sim_placements must be unique")
        if self.base_width < 1 or self.trunk_channels < 1:
            raise ConfigError("base_width and trunk_channels must be positive")
        if len(self.input_size) != 2 or min(self.input_size) < 8:
            raise ConfigError(f"input_size must be (H, W) with H, W >= 8, got {self.input_size}")


class SemanticInjection(nn.Module):
    """Affine feature modulation driven by a guiding image.

    The guiding image is bilinearly resized to the feature resolution and
    passed through a shared conv trunk; two parallel conv heads emit the
    scale and shift maps. Both heads are zero-initialized, so a freshly
    constructed layer is an exact identity.
    """

    def __init__(self, channels, trunk_channels=128, index=1):
        super().__init__()
        self.index = index
        self.channels = channels
        self.trunk_channels = trunk_channels
        self.trunk = nn.Conv2d(3, trunk_channels, kernel_size=3, padding=1)
        self.scale_head = nn.Conv2d(trunk_channels, channels, kernel_size=3, padding=1)
        self.shift_head = nn.Conv2d(trunk_channels, channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.scale_head.weight)
        nn.init.zeros_(self.scale_head.bias)
        nn.init.zeros_(self.shift_head.weight)
        nn.init.zeros_(self.shift_head.bias)

    def forward(self, f, guide):
        if f.dim() != 4:
            raise InputError(f"feature map must be 4-D, got shape {tuple(f.shape)}")
        if torch.isnan(guide).any():
            raise InputError("guiding image contains NaN")
        if f.shape[1] != self.channels:
            raise ConfigError(
                f"injection layer emits {self.channels} channels but feature map has {f.shape[1]}"
            )
        resized = F.interpolate(guide, size=f.shape[-2:], mode="bilinear", align_corners=False)
        h = F.relu(self.trunk(resized))
        scale = self.scale_head(h)
        shift = self.shift_head(h)
        return (1 + scale) * f + shift


def apply_sim(f, guide, sim):
    """Functional form of the injection layer; returns the modulated feature map."""
    return sim(f, guide)


class ResidualBlock(nn.Module):
    """Two reflection-padded 3x3 convs with instance norm and a skip connection."""

    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


def project(x, raw, epsilon):
    """Clamp ``raw`` into the L-inf ball of radius ``epsilon`` around ``x``, then into [0, 1].

    Differentiable; used both inside :meth:`GuidedGenerator.generate` and by
    the iterative baselines.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if x.shape != raw.shape:
        raise InputError(f"shape mismatch: x {tuple(x.shape)} vs raw {tuple(raw.shape)}")
    delta = torch.clamp(raw - x, -epsilon, epsilon)
    return torch.clamp(x + delta, 0.0, 1.0)


class GuidedGenerator(nn.Module):
    """ResNet generator taking (source image, guiding image) to an adversarial example.

    Layout: 7x7 conv stem -> two stride-2 downsampling convs -> residual
    blocks with semantic injection layers interleaved per the config -> two
    transposed-conv upsampling layers -> 7x7 conv head squashed to [0, 1].
    ``generate`` applies the budget projection; ``forward`` returns the raw
    squashed image.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, w, kernel_size=7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(w, 2 * w, kernel_size=3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, kernel_size=3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.ModuleList(ResidualBlock(4 * w) for _ in range(cfg.residual_blocks))
        self.injections = nn.ModuleDict(
            {
                str(i): SemanticInjection(4 * w, cfg.trunk_channels, index=i)
                for i in cfg.sim_placements
            }
        )
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, 3, kernel_size=7),
        )

    def forward(self, x, guide):
        if x.shape[0] != guide.shape[0]:
            raise InputError(
                f"source batch {x.shape[0]} != guide batch {guide.shape[0]}"
            )
        h = self.stem(x)
        h = self.down(h)
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            key = str(i)
            if key in self.injections:
                h = self.injections[key](h, guide)
        h = self.up(h)
        raw = (torch.tanh(self.head(h)) + 1) / 2
        return raw

    def generate(self, x, guide):
        """Adversarial example for ``x``: forward pass followed by budget projection."""
        return project(x, self.forward(x, guide), self.cfg.epsilon)


def save_checkpoint(path, generator, optimizer=None, step=0, extra=None):
    """Write a versioned checkpoint archive (atomic; plain-type payload only)."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "generator_config": asdict(generator.cfg),
        "generator_state": generator.state_dict(),
        "step": int(step),
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    """Read and validate a checkpoint archive; raises VersionError on any defect."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise VersionError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise VersionError(f"{path} is not an advguide checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    for key in ("generator_config", "generator_state", "step"):
        if key not in payload:
            raise VersionError(f"checkpoint missing field {key!r}")
    return payload


def load_generator(path):
    """Rebuild a :class:`GuidedGenerator` from a checkpoint file."""
    payload = load_checkpoint(path)
    cfg = GeneratorConfig(**payload["generator_config"])
    gen = GuidedGenerator(cfg)
    try:
        gen.load_state_dict(payload["generator_state"])
    except RuntimeError as exc:
        raise VersionError(f"checkpoint state incompatible with config: {exc}") from exc
    gen.eval()
    return gen


def checkpoint_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ProfileResult:
    param_count: int
    param_count_no_sim: int
    flop_estimate: int
    flop_estimate_no_sim: int
    avg_gen_time_ms: float
    n_runs: int
    input_size: tuple = (224, 224)
    extra: dict = field(default_factory=dict)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def count_macs(module, *inputs):
    """Multiply-accumulate count of conv/linear layers for one forward pass.

    Normalization, activations and interpolation are ignored; convolutions
    dominate for this architecture.
    """
    macs = [0]
    hooks = []

    def conv_hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        macs[0] += out.numel() * (mod.in_channels // mod.groups) * k

    def deconv_hook(mod, inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        macs[0] += inp[0].numel() * (mod.out_channels // mod.groups) * k

    def linear_hook(mod, inp, out):
        macs[0] += out.numel() * mod.in_features

    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.ConvTranspose2d):
            hooks.append(m.register_forward_hook(deconv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return macs[0]


def profile(cfg: GeneratorConfig, n_runs=100, batch_size=1, seed=0):
    """Parameter/FLOP counts with and without injection layers plus forward latency.

    Timing averages ``n_runs`` projected forward passes on random inputs at
    the configured resolution; counts are analytic.
    """
    if n_runs < 1 or batch_size < 1:
        raise ConfigError("n_runs and batch_size must be >= 1")
    torch.manual_seed(seed)
    h, w = cfg.input_size
    gen = GuidedGenerator(cfg).eval()
    bare_cfg = GeneratorConfig(**{**asdict(cfg), "sim_placements": ()})
    bare = GuidedGenerator(bare_cfg).eval()

    x = torch.rand(batch_size, 3, h, w)
    guide = torch.rand(batch_size, 3, h, w)
    macs = count_macs(gen, x, guide)
    macs_bare = count_macs(bare, x, guide)

    with torch.no_grad():
        for _ in range(3):  # warmup
            gen.generate(x, guide)
        start = time.perf_counter()
        for _ in range(n_runs):
            gen.generate(x, guide)
        elapsed = time.perf_counter() - start
    per_image_ms = elapsed / (n_runs * batch_size) * 1000.0

    return ProfileResult(
        param_count=count_parameters(gen),
        param_count_no_sim=count_parameters(bare),
        flop_estimate=2 * macs,
        flop_estimate_no_sim=2 * macs_bare,
        avg_gen_time_ms=per_image_ms,
        n_runs=n_runs,
        input_size=cfg.input_size,
    )
