"""Uniform adapter over pretrained classifiers.

A :class:`Surrogate` wraps a frozen classifier behind a single entry point
that accepts [0, 1] RGB batches, applies the model's input normalization
internally, and exposes logits, mid-layer features (captured during the same
forward pass, with gradients flowing to the input) and Grad-CAM heatmaps.
"""

import hashlib
import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHT_CACHE_ENV = "ADVGUIDE_CACHE_DIR"

# Mid-depth feature taps per architecture; an open gap in the protocol this
# reproduces, so every entry is overridable via handle or layer-map file.
DEFAULT_MID_LAYERS = {
    "vgg16": "features.21",
    "vgg19": "features.25",
    "resnet50": "layer3",
    "resnet152": "layer3",
    "densenet121": "features.denseblock3",
    "densenet169": "features.denseblock3",
    "inception_v3": "Mixed_6e",
    "vit_b_16": "encoder.layers.encoder_layer_5",
    "vit_b_32": "encoder.layers.encoder_layer_5",
    "swin_b": "features.5",
    "small_cnn": "features.12",
    "small_cnn_wide": "features.12",
}

TORCHVISION_ARCHS = (
    "vgg16",
    "vgg19",
    "resnet50",
    "resnet152",
    "densenet121",
    "densenet169",
    "inception_v3",
    "vit_b_16",
    "vit_b_32",
    "swin_b",
)


class SmallCNN(nn.Module):
    """Six-conv classifier for 32x32 desk-scale experiments."""

    def __init__(self, num_classes=10, width=32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1),
            nn.BatchNorm2d(4 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1),
            nn.BatchNorm2d(4 * w),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Linear(4 * w, num_classes)

    def forward(self, x):
        h = self.features(x)
        return self.classifier(h.flatten(1))


def _build_torchvision(arch_id, num_classes, pretrained):
    from torchvision import models

    kwargs = {"num_classes": num_classes}
    if pretrained:
        if num_classes != 1000:
            raise ConfigError("pretrained torchvision weights require num_classes=1000")
        kwargs = {"weights": "DEFAULT"}
    builder = getattr(models, arch_id)
    return builder(**kwargs)


ARCH_BUILDERS = {
    "small_cnn": lambda num_classes: SmallCNN(num_classes=num_classes, width=32),
    "small_cnn_wide": lambda num_classes: SmallCNN(num_classes=num_classes, width=48),
}


def register_arch(arch_id, builder, mid_layer=None):
    """Register a local architecture; ``builder(num_classes) -> nn.Module``."""
    ARCH_BUILDERS[arch_id] = builder
    if mid_layer is not None:
        DEFAULT_MID_LAYERS[arch_id] = mid_layer


def load_layer_map(path):
    """Parse a layer-map override file of ``<arch_id> <layer_name>`` lines."""
    overrides = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"bad layer-map line: {line!r}")
            overrides[parts[0]] = parts[1]
    return overrides


@dataclass(frozen=True)
class SurrogateHandle:
    """Locator for a classifier: architecture, weight source, feature tap.

    ``weight_source``: "none" (fresh init), "torchvision" (pretrained zoo,
    cached under $ADVGUIDE_CACHE_DIR), or a local checkpoint path.
    """

    arch_id: str
    weight_source: str = "none"
    feature_layer: str = ""
    num_classes: int = 1000
    normalize: tuple = ()  # ((mean...), (std...)); empty -> per-source default
    sha256: str = ""

    def resolved_feature_layer(self):
        layer = self.feature_layer or DEFAULT_MID_LAYERS.get(self.arch_id, "")
        if not layer:
            raise ConfigError(f"no feature layer configured for arch {self.arch_id!r}")
        return layer


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_model(handle: SurrogateHandle):
    arch = handle.arch_id
    src = handle.weight_source
    if arch in ARCH_BUILDERS:
        model = ARCH_BUILDERS[arch](handle.num_classes)
        if src == "torchvision":
            raise ConfigError(f"arch {arch!r} is a local architecture, not a torchvision one")
    elif arch in TORCHVISION_ARCHS:
        cache = os.environ.get(WEIGHT_CACHE_ENV)
        if cache:
            torch.hub.set_dir(cache)
        try:
            model = _build_torchvision(arch, handle.num_classes, pretrained=src == "torchvision")
        except ConfigError:
            raise
        except Exception as exc:
            raise OSError(f"failed to build/fetch weights for {arch}: {exc}") from exc
    else:
        raise ConfigError(f"unknown arch_id {arch!r}")

    if src not in ("none", "torchvision"):
        if not os.path.exists(src):
            raise OSError(f"weight file not found: {src}")
        if handle.sha256:
            digest = _file_sha256(src)
            if digest != handle.sha256:
                raise OSError(f"weight hash mismatch for {src}: got {digest}")
        state = torch.load(src, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state)
    return model


@dataclass
class FeatureView:
    """Mid-layer activation plus the layer identifier it was captured at."""

    values: torch.Tensor
    layer_id: str


class _Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class Surrogate:
    """Loaded, frozen classifier with a single normalized entry point.

    Callers always pass [0, 1] pixels; normalization happens exactly once
    inside. Weights never receive gradients, but input gradients flow for
    attack/loss backprop. Immutable after construction, so concurrent
    inference is safe.
    """

    def __init__(self, handle: SurrogateHandle):
        self.handle = handle
        self.feature_layer = handle.resolved_feature_layer()
        net = _build_model(handle)
        if handle.normalize:
            mean, std = handle.normalize
        elif handle.arch_id in TORCHVISION_ARCHS:
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        else:
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.net = net
        self.model = nn.Sequential(_Normalize(mean, std), net)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._modules_by_name = dict(self.net.named_modules())
        if self.feature_layer not in self._modules_by_name:
            raise ConfigError(
                f"layer {self.feature_layer!r} not found in {handle.arch_id}"
            )

    @property
    def arch_id(self):
        return self.handle.arch_id

    @property
    def num_classes(self):
        return self.handle.num_classes

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputError(f"expected [B, 3, H, W] pixels, got {tuple(x.shape)}")
        if x.min() < 0 or x.max() > 1:
            raise InputError("pixel values must lie in [0, 1]; adapter normalizes internally")

    def _capture_forward(self, x, layer):
        if layer not in self._modules_by_name:
            raise ConfigError(f"layer {layer!r} not found in {self.arch_id}")
        captured = {}

        def hook(mod, inp, out):
            captured["out"] = out

        h = self._modules_by_name[layer].register_forward_hook(hook)
        try:
            logits = self.model(x)
        finally:
            h.remove()
        if isinstance(logits, (tuple, list)):
            logits = logits[0]
        return logits, captured["out"]

    def forward_with_features(self, x, layer=None):
        """Logits plus the mid-layer FeatureView from one shared forward pass."""
        self._check_input(x)
        layer = layer or self.feature_layer
        logits, feats = self._capture_forward(x, layer)
        if not torch.isfinite(feats).all():
            raise InputError(f"non-finite activation at layer {layer!r}")
        if not torch.isfinite(logits).all():
            raise InputError("non-finite logits")
        return logits, FeatureView(values=feats, layer_id=layer)

    def logits(self, x):
        logits, _ = self.forward_with_features(x)
        return logits

    def features(self, x, layer=None):
        _, view = self.forward_with_features(x, layer)
        return view

    def predict(self, x):
        with torch.no_grad():
            return self.logits(x).argmax(dim=1)

    def gradcam(self, x, class_idx, layer=None):
        """Gradient-weighted class activation heatmap, [B, H, W] in [0, 1].

        ReLU of the gradient-weighted activation sum, per-image
        max-normalized; an all-zero map is returned when every weighted
        activation is non-positive.
        """
        self._check_input(x)
        if not 0 <= int(class_idx) < self.num_classes:
            raise InputError(f"class_idx {class_idx} outside [0, {self.num_classes})")
        layer = layer or self.feature_layer
        x = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            logits, act = self._capture_forward(x, layer)
            if act.dim() != 4:
                raise ConfigError(
                    f"gradcam needs a 4-D activation; layer {layer!r} gives {act.dim()}-D"
                )
            score = logits[:, int(class_idx)].sum()
            grads = torch.autograd.grad(score, act)[0]
        weights = grads.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * act).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
        cam = cam.squeeze(1)
        peak = cam.amax(dim=(1, 2), keepdim=True)
        return (cam / torch.clamp(peak, min=1e-12)).detach()

    def param_hash(self):
        """SHA-256 over all parameter and buffer bytes; detects any weight drift."""
        h = hashlib.sha256()
        for name, t in list(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def load_surrogate(handle_or_kwargs, **kwargs):
    if isinstance(handle_or_kwargs, SurrogateHandle):
        handle = handle_or_kwargs
    else:
        handle = SurrogateHandle(handle_or_kwargs, **kwargs)
    return Surrogate(handle)
