#!/usr/bin/env python3
"""Build the desk-scale demo workspace: dataset, guide pools, surrogate, config.

Creates everything the CLI walkthrough in the README needs:

    python3 scripts/make_demo_assets.py demo/
    advguide train -c demo/experiment.yml
"""

import argparse
import sys
from pathlib import Path

import yaml

from advguide.desk import build_desk_assets


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output directory for the demo workspace")
    parser.add_argument("--train-n", type=int, default=4000)
    parser.add_argument("--eval-n", type=int, default=300)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--mode", choices=("targeted", "untargeted"), default="targeted")
    args = parser.parse_args(argv)

    root = Path(args.out)
    assets = build_desk_assets(
        root,
        train_n=args.train_n,
        eval_n=args.eval_n,
        guide_train_n=300,
        guide_eval_n=150,
        seed=args.seed,
    )
    print(f"dataset + classifiers ready in {assets.build_seconds:.0f}s")
    print(f"  surrogate clean accuracy: {assets.surrogate_clean_acc:.1f}%")
    print(f"  transfer-model clean accuracy: {assets.transfer_clean_acc:.1f}%")

    def rel(path):
        # paths in the config resolve against the config file's directory
        return str(Path(path).resolve().relative_to(root.resolve()))

    config = {
        "seed": args.seed,
        "output_dir": "runs/demo",
        "mode": args.mode,
        "data": {
            "train_manifest": rel(assets.train_manifest),
            "eval_manifest": rel(assets.eval_manifest),
            "image_size": 32,
        },
        "surrogate": {
            "id": "sur",
            "arch": "small_cnn_wide",
            "weights": rel(assets.surrogate_ckpt),
            "num_classes": 10,
        },
        "generator": {
            "residual_blocks": 6,
            "sim_placements": [1, 2, 3, 4, 5, 6],
            "base_width": 16,
            "trunk_channels": 32,
        },
        "train": {"epochs": 1, "batch_size": 16},
        "loss": {"n_guides": 16},
        "guides": {"manifest": rel(assets.guide_manifest)},
        "roster": {
            "targets": [
                {
                    "id": "sur",
                    "arch": "small_cnn_wide",
                    "weights": rel(assets.surrogate_ckpt),
                    "num_classes": 10,
                    "group": "conv",
                },
                {
                    "id": "twin",
                    "arch": "small_cnn",
                    "weights": rel(assets.transfer_ckpt),
                    "num_classes": 10,
                    "group": "conv",
                },
            ],
            "target_classes": [3],
        },
        "baselines": {
            "pgd": {"steps": 10, "step_size": 0.00784, "random_init": True},
            "di": {"steps": 10, "step_size": 0.00784, "diversity_prob": 0.7,
                   "resize_range": [32, 40]},
            "dr": {"steps": 10, "step_size": 0.00784},
        },
        "evaluate": {"batch_size": 100},
    }
    if args.mode == "targeted":
        config["train"]["target_class"] = 3
    cfg_path = root / "experiment.yml"
    cfg_path.write_text(yaml.safe_dump(config, sort_keys=False))
    print(f"experiment config written to {cfg_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
