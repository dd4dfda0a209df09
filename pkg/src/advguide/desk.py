"""Desk-scale experiment assets: synthetic corpus splits and reference classifiers.

Everything here exists so the full pipeline can be exercised on one CPU in
minutes: a 10-class 32x32 synthetic dataset, a 6-conv surrogate trained on
it, and a differently-seeded/wider twin for transfer measurements. The
trained classifiers play the role of externally supplied checkpoints.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import ManifestDataset, iter_batches, write_synth_split
from .surrogate import SmallCNN, Surrogate, SurrogateHandle


def fit_classifier(model, dataset, epochs=4, lr=1e-3, batch_size=64, seed=0):
    """Train a classifier on a manifest dataset; returns (model, final train acc %)."""
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    n = len(dataset)
    gen = torch.Generator().manual_seed(seed)
    correct = total = 0
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen).tolist()
        correct = total = 0
        for batch in iter_batches(dataset, order, batch_size):
            opt.zero_grad()
            logits = model(batch.pixels)
            loss = F.cross_entropy(logits, batch.labels)
            loss.backward()
            opt.step()
            correct += (logits.argmax(1) == batch.labels).sum().item()
            total += len(batch)
    model.eval()
    return model, 100.0 * correct / max(total, 1)


def eval_accuracy(model, dataset, batch_size=100):
    model.eval()
    correct = 0
    with torch.no_grad():
        for batch in iter_batches(dataset, list(range(len(dataset))), batch_size):
            pred = model(batch.pixels).argmax(1)
            correct += (pred == batch.labels).sum().item()
    return 100.0 * correct / len(dataset)


def save_classifier(model, arch_id, num_classes, path):
    torch.save(
        {"state_dict": model.state_dict(), "arch_id": arch_id, "num_classes": num_classes},
        path,
    )
    return path


@dataclass
class DeskAssets:
    root: Path
    train_manifest: Path
    eval_manifest: Path
    guide_manifest: Path
    surrogate_ckpt: Path
    transfer_ckpt: Path
    surrogate_clean_acc: float
    transfer_clean_acc: float
    image_size: int = 32
    num_classes: int = 10
    build_seconds: float = 0.0

    def surrogate(self):
        return Surrogate(
            SurrogateHandle(
                "small_cnn_wide", weight_source=str(self.surrogate_ckpt), num_classes=10
            )
        )

    def transfer_model(self):
        return Surrogate(
            SurrogateHandle("small_cnn", weight_source=str(self.transfer_ckpt), num_classes=10)
        )


def build_desk_assets(
    root,
    train_n=6000,
    eval_n=400,
    guide_train_n=400,
    guide_eval_n=200,
    seed=7,
    classifier_epochs=4,
    image_size=32,
):
    """Materialize the full desk-scale setup under ``root``.

    Produces train/eval image manifests, a disjoint two-phase guide manifest,
    and two trained classifiers (surrogate + wider transfer twin).
    """
    t0 = time.perf_counter()
    root = Path(root)
    train_manifest = write_synth_split(root / "train", train_n, seed=seed, size=image_size)
    eval_manifest = write_synth_split(root / "eval", eval_n, seed=seed + 1, size=image_size)
    gtrain = write_synth_split(root / "guides_train", guide_train_n, seed=seed + 2, size=image_size)
    geval = write_synth_split(root / "guides_eval", guide_eval_n, seed=seed + 3, size=image_size)

    # one combined guide manifest with absolute paths and phase tags
    lines = []
    for manifest, phase in ((gtrain, "train"), (geval, "eval")):
        ds = ManifestDataset(manifest)
        for path, label in ds.items:
            lines.append(f"{Path(path).resolve()} {label} {phase}")
    guide_manifest = root / "guides.txt"
    guide_manifest.write_text("\n".join(lines) + "\n")

    train_ds = ManifestDataset(train_manifest)
    eval_ds = ManifestDataset(eval_manifest)

    surrogate = SmallCNN(num_classes=10, width=48)
    surrogate, _ = fit_classifier(surrogate, train_ds, epochs=classifier_epochs, seed=seed)
    surrogate_acc = eval_accuracy(surrogate, eval_ds)
    surrogate_ckpt = save_classifier(surrogate, "small_cnn_wide", 10, root / "surrogate.pt")

    transfer = SmallCNN(num_classes=10, width=32)
    transfer, _ = fit_classifier(transfer, train_ds, epochs=classifier_epochs, seed=seed + 101)
    transfer_acc = eval_accuracy(transfer, eval_ds)
    transfer_ckpt = save_classifier(transfer, "small_cnn", 10, root / "transfer.pt")

    return DeskAssets(
        root=root,
        train_manifest=train_manifest,
        eval_manifest=eval_manifest,
        guide_manifest=guide_manifest,
        surrogate_ckpt=surrogate_ckpt,
        transfer_ckpt=transfer_ckpt,
        surrogate_clean_acc=surrogate_acc,
        transfer_clean_acc=transfer_acc,
        image_size=image_size,
        build_seconds=time.perf_counter() - t0,
    )
