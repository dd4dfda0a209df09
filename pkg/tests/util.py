"""Shared test helpers: finite-difference oracles and a localized synthetic set."""

import numpy as np
import torch

from advguide.data import class_signature, save_image


def fd_gradient(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar function, coordinate by coordinate."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def autograd_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    out.backward()
    return x.grad.detach()


def rel_error(analytic, reference):
    denom = reference.norm().clamp_min(1e-12)
    return ((analytic - reference).norm() / denom).item()


def write_localized_split(out_dir, n, seed, size=32, patch=16):
    """Images whose class cue occupies one known quadrant; returns (manifest, bboxes).

    Background is uniform noise; the class signature pattern fills a patch at
    a random corner, giving a ground-truth relevance region per image.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    corners = [(0, 0), (0, size - patch), (size - patch, 0), (size - patch, size - patch)]
    lines, bboxes = [], []
    for i in range(n):
        label = i % 10
        top, left = corners[rng.integers(0, 4)]
        img = 0.45 + rng.normal(0.0, 0.04, size=(3, size, size)).astype(np.float32)
        sig = class_signature(label, patch)
        img[:, top : top + patch, left : left + patch] += 0.25 * sig
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        name = f"loc_{i:04d}.png"
        save_image(torch.from_numpy(img), out_dir / name)
        lines.append(f"{name} {label}")
        bboxes.append((top, left, patch))
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest, bboxes
