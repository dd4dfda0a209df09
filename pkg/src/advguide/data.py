"""Image batches, manifest datasets and the synthetic desk-scale corpus."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, InputError


@dataclass
class ImageBatch:
    """Batch of RGB images, pixels in [0, 1], with optional per-item labels."""

    pixels: torch.Tensor
    labels: torch.Tensor = None

    def __post_init__(self):
        check_image_batch(self.pixels)
        if self.labels is not None and len(self.labels) != self.pixels.shape[0]:
            raise InputError(
                f"{len(self.labels)} labels for {self.pixels.shape[0]} images"
            )

    def __len__(self):
        return self.pixels.shape[0]


def check_image_batch(pixels):
    if not torch.is_tensor(pixels) or pixels.dim() != 4:
        raise InputError("pixels must be a 4-D [B, 3, H, W] tensor")
    if pixels.shape[1] != 3:
        raise InputError(f"channel count must be 3, got {pixels.shape[1]}")
    if pixels.shape[2] < 8 or pixels.shape[3] < 8:
        raise InputError(f"H, W must be >= 8, got {tuple(pixels.shape[2:])}")
    if not torch.isfinite(pixels).all():
        raise InputError("pixels contain NaN/Inf")
    if pixels.min() < 0 or pixels.max() > 1:
        raise InputError("pixel values must lie in [0, 1]")
    return pixels


def load_image(path, size=None):
    """Decode PNG/JPEG to a [3, H, W] float tensor in [0, 1].

    With ``size`` given, the shorter side is resized to ``size`` and a center
    crop of ``size x size`` is taken.
    """
    img = Image.open(path).convert("RGB")
    if size is not None:
        w, h = img.size
        scale = size / min(w, h)
        img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
        w, h = img.size
        left, top = (w - size) // 2, (h - size) // 2
        img = img.crop((left, top, left + size, top + size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor, path):
    """Write a [3, H, W] tensor in [0, 1] as PNG (round-to-nearest uint8)."""
    arr = tensor.detach().cpu().clamp(0, 1).numpy()
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


class ManifestDataset:
    """Dataset backed by a ``<path> <label>`` manifest; paths relative to the manifest."""

    def __init__(self, manifest_path, image_size=None):
        self.manifest_path = Path(manifest_path)
        self.image_size = image_size
        if not self.manifest_path.exists():
            raise DataError(f"manifest not found: {manifest_path}")
        root = self.manifest_path.parent
        self.items = []
        with open(self.manifest_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DataError(f"{manifest_path}:{lineno}: expected '<path> <label>'")
                path = Path(parts[0])
                if not path.is_absolute():
                    path = root / path
                self.items.append((path, int(parts[1])))
        if not self.items:
            raise DataError(f"manifest {manifest_path} lists no images")

    def __len__(self):
        return len(self.items)

    def __getitem__(self, idx):
        path, label = self.items[idx]
        return load_image(path, self.image_size), label

    def batch(self, indices):
        pixels = torch.stack([self[i][0] for i in indices])
        labels = torch.tensor([self.items[i][1] for i in indices], dtype=torch.long)
        return ImageBatch(pixels=pixels, labels=labels)

    def labels(self):
        return [lbl for _, lbl in self.items]


def iter_batches(dataset, order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if chunk:
            yield dataset.batch(chunk)


# --- synthetic desk-scale corpus -------------------------------------------
#
# Ten classes at 32x32. The scene content (an oriented colored grating) is
# class-neutral; class identity is carried by a fixed low-amplitude,
# high-frequency per-class sign pattern. A small CNN learns the pattern to
# >90% accuracy in a couple of epochs, yet the cue amplitude (~14 uint8
# levels) sits inside typical attack budgets, so the learned boundaries are
# adversarially fragile and fragile in the same way across models.

N_SYNTH_CLASSES = 10

_SIGNATURES = {}


def class_signature(label, size):
    key = (int(label), int(size))
    if key not in _SIGNATURES:
        rng = np.random.default_rng(10_000 + key[0])
        _SIGNATURES[key] = rng.choice([-1.0, 1.0], size=(3, size, size)).astype(np.float32)
    return _SIGNATURES[key]


def synth_image(label, rng, size=32, noise=0.09, cue=0.055):
    angle = rng.uniform(0.0, math.pi)
    freq = rng.uniform(2.5, 4.5)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    ax = np.linspace(0.0, 1.0, size, dtype=np.float32)
    xx, yy = np.meshgrid(ax, ax)
    wave = np.sin(2 * math.pi * freq * (math.cos(angle) * xx + math.sin(angle) * yy) + phase)
    base = 0.5 + 0.5 * wave  # [0, 1]
    color = rng.uniform(0.4, 0.9, size=3).astype(np.float32)
    img = 0.325 + 0.35 * base[None] * color[:, None, None]
    img = img + cue * class_signature(label, size)
    img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_synth_split(out_dir, n, seed, size=32, prefix="img", noise=0.09):
    """Materialize n synthetic images + manifest under out_dir; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        label = i % N_SYNTH_CLASSES
        arr = synth_image(label, rng, size=size, noise=noise)
        name = f"{prefix}_{i:05d}.png"
        save_image(torch.from_numpy(arr), out_dir / name)
        lines.append(f"{name} {label}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def write_guide_manifest(path, entries):
    """Write guide-pool lines of ``<path> <class_id> <phase>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for img_path, label, phase in entries:
            fh.write(f"{img_path} {label} {phase}\n")
    return path
