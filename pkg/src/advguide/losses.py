"""Training objectives for the guided generator.

Targeted suite: a contrastive logit loss that pulls adversarial logits onto
the guide's logits while hinging them at least a margin away from the clean
logits, plus a feature similarity loss that moves mid-layer features toward
the guide and away from the clean image. Untargeted suite: plain cosine
similarity against the clean features, plus a semantic injection term over a
bundle of guide features from a single incorrect class.

Cosine terms operate on per-sample globally flattened features and denote the
cosine similarity value itself (the sign conventions are carried explicitly
in each formula). All losses are batch-averaged scalars.
"""

from dataclasses import dataclass

import torch

from .errors import ConfigError, InputError

USI_VARIANTS = ("literal_eq6", "adv_pull", "adv_push")


@dataclass
class LossConfig:
    margin: float = 0.2
    n_guides: int = 16
    tlc: bool = True
    tfs: bool = True
    ufs: bool = True
    usi: bool = True
    usi_variant: str = "adv_pull"

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.n_guides < 1:
            raise ConfigError(f"n_guides must be >= 1, got {self.n_guides}")
        if self.usi_variant not in USI_VARIANTS:
            raise ConfigError(
                f"usi_variant must be one of {USI_VARIANTS}, got {self.usi_variant!r}"
            )
        if not (self.tlc or self.tfs or self.ufs or self.usi):
            raise ConfigError("at least one loss term must be enabled")

    def enabled_terms(self, mode):
        if mode == "targeted":
            return [name for name, on in (("tlc", self.tlc), ("tfs", self.tfs)) if on]
        return [name for name, on in (("ufs", self.ufs), ("usi", self.usi)) if on]


def _values(f):
    """Accept a raw tensor or anything exposing a ``.values`` tensor (FeatureView)."""
    return f.values if hasattr(f, "values") and torch.is_tensor(f.values) else f


def _flatten(f):
    v = _values(f)
    return v.reshape(v.shape[0], -1)


def cosine_rows(a, b, eps=1e-12):
    """Per-sample cosine similarity between flattened features; zero-norm guarded."""
    a2, b2 = _flatten(a), _flatten(b)
    if a2.shape != b2.shape:
        raise InputError(f"feature shape mismatch: {tuple(a2.shape)} vs {tuple(b2.shape)}")
    num = (a2 * b2).sum(dim=1)
    return num / ((a2.norm(dim=1) + eps) * (b2.norm(dim=1) + eps))


def targeted_logit_contrastive(z_adv, z_guide, z_clean, margin=0.2):
    """Pull adversarial logits to the guide's, hinge them ``margin`` away from clean.

    0.5 * sum_k (z_adv - z_guide)_k^2 + 0.5 * max(0, margin - ||z_adv - z_clean||_2)^2,
    averaged over the batch.
    """
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    if not (z_adv.shape == z_guide.shape == z_clean.shape):
        raise InputError(
            f"logit shape mismatch: {tuple(z_adv.shape)}, {tuple(z_guide.shape)}, "
            f"{tuple(z_clean.shape)}"
        )
    pull = 0.5 * ((z_adv - z_guide) ** 2).sum(dim=1)
    # stabilized L2 distance; the 1e-24 keeps the norm gradient finite at zero
    dist = torch.sqrt(((z_adv - z_clean) ** 2).sum(dim=1) + 1e-24)
    push = 0.5 * torch.clamp(margin - dist, min=0) ** 2
    return (pull + push).mean()


def targeted_feature_similarity(f_adv, f_clean, f_guide):
    """cos(adv, clean) - cos(adv, guide), batch-averaged; range [-2, 2]."""
    return (cosine_rows(f_adv, f_clean) - cosine_rows(f_adv, f_guide)).mean()


def untargeted_feature_loss(f_adv, f_clean):
    """Batch-averaged cosine similarity between adversarial and clean features."""
    return cosine_rows(f_adv, f_clean).mean()


def _stack_guides(guides):
    if torch.is_tensor(guides):
        stack = guides
    else:
        rows = []
        for g in guides:
            v = _values(g)
            rows.append(v if v.dim() > 0 else v.reshape(1))
        if not rows:
            raise InputError("empty guide feature list")
        stack = torch.stack([r.squeeze(0) if r.shape[0] == 1 and r.dim() > 1 else r for r in rows])
    return stack.reshape(stack.shape[0], -1)


def untargeted_semantic_injection(
    f_adv, f_clean, guides, variant="adv_pull", guide_labels=None, eps=1e-12
):
    """Semantic injection term over N guide features from one incorrect class.

    ``literal_eq6`` averages cos(guide_i, clean); it involves no
    generator-dependent quantity, so its generator-path gradient is exactly
    zero (kept selectable for auditability). ``adv_pull`` (default) averages
    -cos(adv, guide_i); ``adv_push`` flips the sign.
    """
    if variant not in USI_VARIANTS:
        raise ConfigError(f"unknown usi variant {variant!r}")
    if guide_labels is not None and len(set(int(l) for l in guide_labels)) > 1:
        raise InputError(f"guide features span multiple classes: {sorted(set(guide_labels))}")
    g = _stack_guides(guides)  # [N, D]
    if g.shape[0] < 1:
        raise InputError("need at least one guide feature")

    anchor = _flatten(f_clean) if variant == "literal_eq6" else _flatten(f_adv)
    if anchor.shape[1] != g.shape[1]:
        raise InputError(
            f"guide feature dim {g.shape[1]} != anchor feature dim {anchor.shape[1]}"
        )
    a_hat = anchor / (anchor.norm(dim=1, keepdim=True) + eps)
    g_hat = g / (g.norm(dim=1, keepdim=True) + eps)
    cos = a_hat @ g_hat.T  # [B, N]
    mean_cos = cos.mean()
    if variant == "adv_pull":
        return -mean_cos
    return mean_cos


def targeted_total(z_adv, z_guide, z_clean, f_adv, f_clean, f_guide, cfg: LossConfig):
    """Targeted objective: enabled-term sum; returns (total, per-term values)."""
    if not (cfg.tlc or cfg.tfs):
        raise ConfigError("targeted mode requires tlc and/or tfs enabled")
    terms = {}
    if cfg.tlc:
        terms["tlc"] = targeted_logit_contrastive(z_adv, z_guide, z_clean, cfg.margin)
    if cfg.tfs:
        terms["tfs"] = targeted_feature_similarity(f_adv, f_clean, f_guide)
    total = sum(terms.values())
    return total, terms


def untargeted_total(f_adv, f_clean, guides, cfg: LossConfig, guide_labels=None):
    """Untargeted objective: enabled-term sum; returns (total, per-term values)."""
    if not (cfg.ufs or cfg.usi):
        raise ConfigError("untargeted mode requires ufs and/or usi enabled")
    terms = {}
    if cfg.ufs:
        terms["ufs"] = untargeted_feature_loss(f_adv, f_clean)
    if cfg.usi:
        terms["usi"] = untargeted_semantic_injection(
            f_adv, f_clean, guides, cfg.usi_variant, guide_labels
        )
    total = sum(terms.values())
    return total, terms
