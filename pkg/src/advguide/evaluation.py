"""Transferability harness: attack a roster of target models and aggregate top-1 accuracy.

Targeted runs report the percentage of adversarial examples classified AS the
target class (higher = stronger), averaged over the configured target
classes, excluding source images already of the target class. Untargeted
runs report accuracy on the ground truth (lower = stronger). Row aggregates
(Avg/Conv, Avg/ViT, Avg/All) use exact decimal arithmetic with half-up
rounding to two places.
"""

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import torch

from .data import iter_batches
from .errors import ConfigError, DataError, InputError, StateError
from .generator import load_generator
from .guides import select

# Table-style roster labels: seven convolutional targets, three transformers.
DEFAULT_GROUPS = {
    "V16": "conv",
    "V19": "conv",
    "R50": "conv",
    "R152": "conv",
    "D121": "conv",
    "D169": "conv",
    "Inc": "conv",
    "VB/16": "vit",
    "VB/32": "vit",
    "Swin/B": "vit",
}

BUDGET_SLACK = 1e-7


def assert_budget(x, x_adv, epsilon, slack=BUDGET_SLACK):
    """Raise StateError unless ||x_adv - x||_inf <= epsilon + slack and x_adv in [0, 1]."""
    delta = (x_adv - x).abs().max().item()
    lo, hi = x_adv.min().item(), x_adv.max().item()
    if delta > epsilon + slack or lo < 0.0 or hi > 1.0:
        raise StateError(
            f"budget violation: max|delta|={delta:.8f} (eps={epsilon:.8f}), "
            f"range [{lo:.6f}, {hi:.6f}]"
        )


def _round2(value):
    return float(Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _decimal_mean(values):
    total = sum((Decimal(str(v)) for v in values), Decimal(0))
    return float((total / len(values)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class Aggregates:
    avg_conv: float = None
    avg_vit: float = None
    avg_all: float = None
    partial: bool = False
    missing: tuple = ()

    def astuple(self):
        return (self.avg_conv, self.avg_vit, self.avg_all)


def aggregate(row, groups=None):
    """Exact-arithmetic means over conv, transformer and all roster members.

    ``row`` maps model id -> accuracy percent. A roster member absent from the
    row marks the result partial (explicit ``missing`` list, never silent).
    """
    groups = groups or DEFAULT_GROUPS
    unknown = [m for m in row if m not in groups]
    if unknown:
        raise InputError(f"models {unknown} missing a conv/vit roster label")
    for m, v in row.items():
        if not 0.0 <= float(v) <= 100.0:
            raise InputError(f"accuracy for {m} outside [0, 100]: {v}")
    missing = tuple(m for m in groups if m not in row)
    conv = [row[m] for m in groups if groups[m] == "conv" and m in row]
    vit = [row[m] for m in groups if groups[m] == "vit" and m in row]
    present = [row[m] for m in groups if m in row]
    return Aggregates(
        avg_conv=_decimal_mean(conv) if conv else None,
        avg_vit=_decimal_mean(vit) if vit else None,
        avg_all=_decimal_mean(present) if present else None,
        partial=bool(missing),
        missing=missing,
    )


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)  # (attack_id, surrogate_id) -> {model: acc}
    groups: dict = field(default_factory=dict)  # model id -> "conv" | "vit"
    metadata: dict = field(default_factory=dict)

    def aggregates(self):
        return {key: aggregate(row, self.groups) for key, row in self.rows.items()}

    def to_json(self):
        payload = {
            "groups": self.groups,
            "metadata": self.metadata,
            "rows": [
                {
                    "attack": attack,
                    "surrogate": surrogate,
                    "accuracies": accs,
                    "aggregates": {
                        "avg_conv": agg.avg_conv,
                        "avg_vit": agg.avg_vit,
                        "avg_all": agg.avg_all,
                        "partial": agg.partial,
                        "missing": list(agg.missing),
                    },
                }
                for (attack, surrogate), accs in self.rows.items()
                for agg in [aggregate(accs, self.groups)]
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        rows = {
            (r["attack"], r["surrogate"]): dict(r["accuracies"]) for r in payload["rows"]
        }
        return cls(rows=rows, groups=dict(payload["groups"]), metadata=payload["metadata"])

    def to_csv(self):
        lines = [["attack", "surrogate", "target_model", "group", "top1_accuracy"]]
        for (attack, surrogate), accs in self.rows.items():
            for model, acc in accs.items():
                lines.append([attack, surrogate, model, self.groups.get(model, "?"), f"{acc:.2f}"])
        return lines

    def to_text_table(self):
        """Fixed-width table mirroring the cross-model result layout."""
        models = list(self.groups)
        header = ["Sur.", "Attack", *models, "Avg/Conv", "Avg/ViT", "Avg/All"]
        body = []
        footnotes = []
        for (attack, surrogate), accs in self.rows.items():
            agg = aggregate(accs, self.groups)
            star = "*" if agg.partial else ""
            if agg.partial:
                footnotes.append(
                    f"* partial aggregate for ({surrogate}, {attack}); "
                    f"missing: {', '.join(agg.missing)}"
                )
            cells = [surrogate, attack]
            for m in models:
                cells.append(f"{accs[m]:.2f}" if m in accs else "-")
            for v in agg.astuple():
                cells.append((f"{v:.2f}" if v is not None else "-") + star)
            body.append(cells)
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        lines += [fmt.format(*r) for r in body]
        lines += footnotes
        return "\n".join(lines) + "\n"


def emit_report(report, out_dir, stem="report", formats=("json", "csv", "txt")):
    """Serialize a report; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out_dir / f"{stem}.{fmt}"
        if fmt == "json":
            path.write_text(report.to_json())
        elif fmt == "csv":
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows(report.to_csv())
        elif fmt == "txt":
            path.write_text(report.to_text_table())
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


# --- attack adapters ---------------------------------------------------------


def identity_attack():
    """No-op attack; evaluating it reproduces each model's clean accuracy."""
    return ("identity", lambda x, labels, target=None: x)


def generator_attack(checkpoint_or_gen, guide_pool, seed=0, attack_id="ours"):
    """Wrap a trained generator as an eval attack.

    Targeted: one fixed guide per target class, selected from the eval-phase
    pool by its strategy and reused for the whole run. Untargeted: per-sample
    guides, each drawn from a class different from that sample's label.
    """
    if isinstance(checkpoint_or_gen, (str, Path)):
        gen = load_generator(checkpoint_or_gen)
    else:
        gen = checkpoint_or_gen
    gen.eval()
    size = gen.cfg.input_size[0]
    from .data import load_image

    guide_cache = {}
    counter = {"sample": 0}
    guide_log = {}

    def fn(x, labels, target=None):
        if target is not None:
            if target not in guide_cache:
                entry = select(
                    guide_pool, source_class=-1, k=1, seed=seed + int(target),
                    mode="targeted", target_class=int(target),
                )[0]
                guide_cache[target] = load_image(entry.path, size)
                guide_log[f"class_{target}"] = entry.path
            guide = guide_cache[target].unsqueeze(0).expand(x.shape[0], -1, -1, -1)
        else:
            rows = []
            for j, lbl in enumerate(labels.tolist()):
                entry = select(
                    guide_pool,
                    source_class=int(lbl),
                    k=1,
                    seed=seed * 1_000_003 + counter["sample"] + j,
                )[0]
                rows.append(load_image(entry.path, size))
            counter["sample"] += len(rows)
            guide = torch.stack(rows)
        with torch.no_grad():
            return gen.generate(x, guide)

    fn.guide_log = guide_log
    return (attack_id, fn)


def baseline_attack(name, surrogate, cfg, seed=0):
    """Wrap one of the iterative baselines as an eval attack."""
    from . import baselines

    if name == "pgd":
        fn = lambda x, labels, target=None: baselines.pgd(
            x, labels if target is None else int(target), surrogate, cfg, seed=seed
        )
    elif name == "di":
        fn = lambda x, labels, target=None: baselines.di_fgsm(
            x, labels if target is None else int(target), surrogate, cfg, seed=seed
        )
    elif name == "dr":
        fn = lambda x, labels, target=None: baselines.dr(x, surrogate, cfg, seed=seed)
    else:
        raise ConfigError(f"unknown baseline {name!r}; expected pgd|di|dr")
    return (name, fn)


def precomputed_attack(adv_dir, dataset, attack_id="precomputed"):
    """Evaluate adversarial images written earlier (paired with the manifest by filename)."""
    from .data import load_image

    adv_dir = Path(adv_dir)
    lookup = {}
    for path, _ in dataset.items:
        adv_path = adv_dir / Path(path).name
        if not adv_path.exists():
            raise DataError(f"missing adversarial image for {Path(path).name} in {adv_dir}")
        lookup[str(path)] = adv_path
    order = [str(p) for p, _ in dataset.items]

    state = {"cursor": 0}

    def fn(x, labels, target=None):
        names = order[state["cursor"] : state["cursor"] + x.shape[0]]
        state["cursor"] = (state["cursor"] + x.shape[0]) % len(order)
        return torch.stack([load_image(lookup[n], dataset.image_size) for n in names])

    return (attack_id, fn)


# --- the harness -------------------------------------------------------------


def evaluate(
    attacks,
    targets,
    data,
    mode,
    target_classes=None,
    surrogate_id="surrogate",
    batch_size=50,
    epsilon=None,
    groups=None,
    metadata=None,
):
    """Run attacks over the eval data and score every target model.

    ``attacks``: one ``(attack_id, fn)`` pair or a list of them, with
    ``fn(x, labels, target) -> x_adv``. ``targets``: list of
    ``(model_id, Surrogate)``. When ``epsilon`` is given every adversarial
    batch is audited against the budget (identity passes trivially).
    """
    if isinstance(attacks, tuple) and callable(attacks[1]):
        attacks = [attacks]
    if not targets:
        raise ConfigError("no target models configured")
    if len(data) == 0:
        raise DataError("empty evaluation dataset")
    if mode == "targeted" and not target_classes:
        raise ConfigError("targeted evaluation requires target_classes")

    groups = dict(groups) if groups else {model_id: "conv" for model_id, _ in targets}
    report = EvalReport(groups=groups, metadata=dict(metadata or {}))
    report.metadata.setdefault("mode", mode)
    if epsilon is not None:
        report.metadata.setdefault("epsilon", epsilon)
    if target_classes:
        report.metadata.setdefault("target_classes", list(target_classes))
    exclusions = {}

    order = list(range(len(data)))
    for attack_id, fn in attacks:
        if mode == "targeted":
            per_class = {model_id: [] for model_id, _ in targets}
            for cls in target_classes:
                hits = {model_id: 0 for model_id, _ in targets}
                kept = 0
                excluded = 0
                for batch in iter_batches(data, order, batch_size):
                    x_adv = fn(batch.pixels, batch.labels, target=int(cls))
                    if epsilon is not None:
                        assert_budget(batch.pixels, x_adv, epsilon)
                    keep = batch.labels != int(cls)
                    excluded += int((~keep).sum())
                    kept += int(keep.sum())
                    for model_id, model in targets:
                        pred = model.predict(x_adv[keep])
                        hits[model_id] += int((pred == int(cls)).sum())
                if kept == 0:
                    raise DataError(f"no eval samples outside target class {cls}")
                exclusions[f"{attack_id}/class_{cls}"] = excluded
                for model_id, _ in targets:
                    per_class[model_id].append(100.0 * hits[model_id] / kept)
            row = {m: sum(v) / len(v) for m, v in per_class.items()}
        else:
            correct = {model_id: 0 for model_id, _ in targets}
            seen = 0
            for batch in iter_batches(data, order, batch_size):
                x_adv = fn(batch.pixels, batch.labels, target=None)
                if epsilon is not None:
                    assert_budget(batch.pixels, x_adv, epsilon)
                seen += len(batch)
                for model_id, model in targets:
                    pred = model.predict(x_adv)
                    correct[model_id] += int((pred == batch.labels).sum())
            row = {m: 100.0 * c / seen for m, c in correct.items()}
        report.rows[(attack_id, surrogate_id)] = row
        if hasattr(fn, "guide_log") and fn.guide_log:
            report.metadata[f"guides/{attack_id}"] = dict(fn.guide_log)

    if exclusions:
        report.metadata["excluded_target_class_sources"] = exclusions
    return report


def visualize(x, x_guide, adv_sets, target, class_idx, out_dir, alpha=0.45):
    """Grad-CAM grid: rows are samples, columns are (clean, guide, each attack).

    Each panel overlays the target model's heatmap for ``class_idx`` on its
    own image; returns the written file paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.cm as cm
    import matplotlib.pyplot as plt

    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"overlay alpha must lie in (0, 1), got {alpha}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    panels = [("clean", x), ("guide", x_guide)] + list(adv_sets.items())
    n_rows = x.shape[0]
    n_cols = len(panels)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.2 * n_rows), squeeze=False)
    for col, (title, imgs) in enumerate(panels):
        heat = target.gradcam(imgs, class_idx)
        for rowi in range(n_rows):
            img = imgs[rowi].permute(1, 2, 0).detach().cpu().numpy()
            hm = cm.jet(heat[rowi].cpu().numpy())[..., :3]
            blend = (1 - alpha) * img + alpha * hm
            ax = axes[rowi][col]
            ax.imshow(blend.clip(0, 1))
            ax.set_axis_off()
            if rowi == 0:
                ax.set_title(title, fontsize=9)
    fig.tight_layout()
    grid_path = out_dir / "gradcam_grid.png"
    fig.savefig(grid_path, dpi=120)
    plt.close(fig)
    return [grid_path]
