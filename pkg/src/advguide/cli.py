"""Command-line driver: train, generate, evaluate, baseline, visualize, profile, audit-budget.

Every command takes an experiment config file; flags override config keys.
Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .data import ManifestDataset, load_image
from .errors import ConfigError, DataError, InputError, StateError, VersionError
from .evaluation import (
    baseline_attack,
    emit_report,
    evaluate,
    generator_attack,
    identity_attack,
    precomputed_attack,
    visualize,
)
from .generator import checkpoint_sha256, load_generator, profile
from .guides import select
from .training import train


def parse_epsilon(text):
    """Accept plain floats or fractions like 16/255."""
    if isinstance(text, (int, float)):
        return float(text)
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _budget_levels(epsilon):
    # uint8 projection radius: the largest integer level delta within epsilon
    return int(math.floor(epsilon * 255 + 1e-9))


def _to_u8(tensor):
    return np.round(tensor.detach().cpu().clamp(0, 1).numpy() * 255.0).astype(np.int16)


def write_adversarial_images(dataset, attack_fn, epsilon, out_dir, meta, batch_size=50, target=None):
    """Run an attack over a manifest and write uint8 PNGs plus sidecar JSON.

    The uint8 encoding is re-projected in integer space so the written files
    satisfy the budget exactly under the audit tool's level metric.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = _budget_levels(epsilon)
    order = list(range(len(dataset)))
    written = []
    cursor = 0
    from .data import iter_batches

    for batch in iter_batches(dataset, order, batch_size):
        x_adv = attack_fn(batch.pixels, batch.labels, target=target)
        x_u8 = _to_u8(batch.pixels)
        adv_u8 = _to_u8(x_adv)
        adv_u8 = np.clip(adv_u8, x_u8 - k, x_u8 + k)
        adv_u8 = np.clip(adv_u8, 0, 255).astype(np.uint8)
        for j in range(len(batch)):
            src_path, label = dataset.items[cursor + j]
            name = Path(src_path).name
            img_path = out_dir / name
            Image.fromarray(adv_u8[j].transpose(1, 2, 0)).save(img_path)
            sidecar = dict(meta)
            sidecar.update(
                {
                    "source": str(src_path),
                    "label": int(label),
                    "epsilon": epsilon,
                    "budget_levels": k,
                }
            )
            (out_dir / f"{name}.json").write_text(json.dumps(sidecar, indent=2))
            written.append(img_path)
        cursor += len(batch)
    return written


def audit_budget(adv_dir, orig=None, epsilon=None):
    """Verify every adversarial PNG against its source within the level budget.

    Source paths and epsilon come from the sidecars unless overridden.
    Returns (checked, violations:list of str).
    """
    adv_dir = Path(adv_dir)
    sidecars = sorted(adv_dir.glob("*.json"))
    if not sidecars:
        raise DataError(f"no sidecar files in {adv_dir}")
    orig_dir = Path(orig) if orig else None
    checked, violations = 0, []
    for sc in sidecars:
        meta = json.loads(sc.read_text())
        img_path = adv_dir / sc.name[: -len(".json")]
        src = orig_dir / Path(meta["source"]).name if orig_dir else Path(meta["source"])
        eps = epsilon if epsilon is not None else meta["epsilon"]
        k = _budget_levels(eps)
        adv = _to_u8(load_image(img_path))
        x = _to_u8(load_image(src))
        delta = int(np.abs(adv - x).max())
        checked += 1
        if delta > k:
            violations.append(f"{img_path.name}: level delta {delta} > {k}")
    return checked, violations


def _resolve_guide_fn(exp, spec, gen, seed):
    """Turn a --guide spec (path, class:<id>, auto) into fn(batch) -> guide batch."""
    size = gen.cfg.input_size[0]
    pools = exp.guide_pools()
    pool = pools["eval"]

    if spec and spec not in ("auto",) and not spec.startswith("class:"):
        fixed = load_image(Path(spec), size)
        return lambda batch: fixed.unsqueeze(0).expand(len(batch), -1, -1, -1), spec

    if spec and spec.startswith("class:"):
        cls = int(spec.split(":", 1)[1])
        entry = select(pool, source_class=-1, k=1, seed=seed, mode="targeted", target_class=cls)[0]
        fixed = load_image(entry.path, size)
        return lambda batch: fixed.unsqueeze(0).expand(len(batch), -1, -1, -1), entry.path

    # auto
    if exp.mode == "targeted":
        cls = exp.train_config().target_class
        entry = select(pool, source_class=-1, k=1, seed=seed, mode="targeted", target_class=cls)[0]
        fixed = load_image(entry.path, size)
        return lambda batch: fixed.unsqueeze(0).expand(len(batch), -1, -1, -1), entry.path

    counter = {"i": 0}

    def per_sample(batch):
        rows = []
        for j, lbl in enumerate(batch.labels.tolist()):
            entry = select(
                pool,
                source_class=int(lbl),
                k=1,
                seed=seed * 1_000_003 + counter["i"] + j,
            )[0]
            rows.append(load_image(entry.path, size))
        counter["i"] += len(rows)
        return torch.stack(rows)

    return per_sample, "auto(per-sample)"


def cmd_train(args):
    exp = load_config(args.config, args.set or ())
    cfg = exp.train_config()
    gen_cfg = exp.generator_config()
    if args.dry_run:
        print(json.dumps({"resolved": exp.raw, "epsilon": cfg.resolved_epsilon()}, indent=2))
        return 0
    dataset = exp.dataset("train")
    surrogate = exp.surrogate()
    pools = exp.guide_pools()
    out_dir = Path(args.out or exp.output_dir)
    result = train(
        dataset,
        surrogate,
        pools["train"],
        cfg,
        gen_cfg,
        out_dir=out_dir,
        resume_from=args.resume,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path} ({result.final_step} steps)")
    return 0


def cmd_generate(args):
    exp = load_config(args.config, args.set or ())
    gen = load_generator(args.checkpoint)
    seed = args.seed if args.seed is not None else exp.seed
    manifest = args.inputs or exp.require("data.eval_manifest")
    inputs = ManifestDataset(exp._resolve(manifest), image_size=gen.cfg.input_size[0])
    guide_fn, guide_id = _resolve_guide_fn(exp, args.guide, gen, seed)
    ckpt_hash = checkpoint_sha256(args.checkpoint)

    def attack(x, labels, target=None):
        from .data import ImageBatch

        guide = guide_fn(ImageBatch(pixels=x, labels=labels))
        with torch.no_grad():
            return gen.generate(x, guide)

    out_dir = Path(args.out or (exp.output_dir / "adversarial"))
    written = write_adversarial_images(
        inputs,
        attack,
        gen.cfg.epsilon,
        out_dir,
        meta={
            "attack": "ours",
            "mode": exp.mode,
            "guide": guide_id,
            "checkpoint_sha256": ckpt_hash,
            "seed": seed,
        },
    )
    checked, violations = audit_budget(out_dir)
    if violations:
        raise StateError(f"budget violation after write: {violations[:3]}")
    print(f"wrote {len(written)} adversarial images to {out_dir} (audited {checked}, clean)")
    return 0


def _build_attacks(exp, args):
    attacks = []
    names = (args.attack or "identity").split(",")
    for name in names:
        name = name.strip()
        if name == "identity":
            attacks.append(identity_attack())
        elif name == "ours":
            if not args.checkpoint:
                raise ConfigError("--checkpoint is required for --attack ours")
            pools = exp.guide_pools()
            attacks.append(
                generator_attack(args.checkpoint, pools["eval"], seed=exp.seed, attack_id="ours")
            )
        elif name in ("pgd", "di", "dr"):
            surrogate = exp.surrogate()
            attacks.append(baseline_attack(name, surrogate, exp.baseline_config(name), seed=exp.seed))
        else:
            raise ConfigError(f"unknown attack {name!r}")
    return attacks


def cmd_evaluate(args):
    exp = load_config(args.config, args.set or ())
    data = exp.dataset("eval")
    targets, groups = exp.roster()
    if args.adv_dir:
        attacks = [precomputed_attack(args.adv_dir, data, attack_id=args.attack or "precomputed")]
        epsilon = None
    else:
        attacks = _build_attacks(exp, args)
        epsilon = exp.train_config().resolved_epsilon()
    report = evaluate(
        attacks,
        targets,
        data,
        exp.mode,
        target_classes=exp.target_classes() if exp.mode == "targeted" else None,
        surrogate_id=exp.surrogate_id(),
        batch_size=exp.eval_batch_size(),
        epsilon=epsilon,
        groups=groups,
        metadata={"seed": exp.seed},
    )
    out_dir = Path(args.out or exp.output_dir)
    paths = emit_report(report, out_dir)
    print(report.to_text_table())
    print(f"report files: {', '.join(str(p) for p in paths)}")
    return 0


def cmd_baseline(args):
    exp = load_config(args.config, args.set or ())
    name = args.attack
    if name not in ("pgd", "di", "dr"):
        raise ConfigError(f"--attack must be pgd|di|dr, got {name!r}")
    surrogate = exp.surrogate()
    cfg = exp.baseline_config(name)
    data = exp.dataset("eval")
    _, fn = baseline_attack(name, surrogate, cfg, seed=exp.seed)
    target = None
    if exp.mode == "targeted" and name != "dr":
        classes = exp.target_classes()
        if not classes:
            raise ConfigError("targeted baseline requires roster.target_classes")
        target = classes[0]
    out_dir = Path(args.out or (exp.output_dir / f"adv_{name}"))
    written = write_adversarial_images(
        data,
        fn,
        cfg.epsilon,
        out_dir,
        meta={"attack": name, "mode": cfg.mode, "seed": exp.seed},
        target=target,
    )
    print(f"wrote {len(written)} adversarial images to {out_dir}")
    return 0


def cmd_visualize(args):
    exp = load_config(args.config, args.set or ())
    data = exp.dataset("eval")
    targets, _ = exp.roster()
    model_id, model = targets[0]
    n = args.n
    batch = data.batch(list(range(min(n, len(data)))))
    gen = load_generator(args.checkpoint)
    pools = exp.guide_pools()
    attacks = _build_attacks(exp, args) if args.attack else []
    if exp.mode == "targeted":
        cls = args.class_idx if args.class_idx is not None else exp.target_classes()[0]
    else:
        cls = args.class_idx if args.class_idx is not None else int(batch.labels[0])
    guide_fn, _ = _resolve_guide_fn(exp, f"class:{cls}" if exp.mode == "targeted" else "auto", gen, exp.seed)
    guide = guide_fn(batch)
    adv_sets = {}
    with torch.no_grad():
        adv_sets["ours"] = gen.generate(batch.pixels, guide)
    for attack_id, fn in attacks:
        if attack_id == "ours":
            continue
        adv_sets[attack_id] = fn(batch.pixels, batch.labels, target=cls if exp.mode == "targeted" else None)
    out_dir = Path(args.out or (exp.output_dir / "figures"))
    paths = visualize(batch.pixels, guide, adv_sets, model, cls, out_dir)
    print(f"wrote {', '.join(str(p) for p in paths)} (target model {model_id})")
    return 0


def cmd_profile(args):
    exp = load_config(args.config, args.set or ())
    result = profile(exp.generator_config(), n_runs=args.n_runs)
    print(f"params with SIM:    {result.param_count}")
    print(f"params without SIM: {result.param_count_no_sim}")
    print(f"flops with SIM:     {result.flop_estimate}")
    print(f"flops without SIM:  {result.flop_estimate_no_sim}")
    print(f"avg generation time: {result.avg_gen_time_ms:.3f} ms/image "
          f"({result.n_runs} runs at {result.input_size})")
    return 0


def cmd_audit_budget(args):
    epsilon = parse_epsilon(args.epsilon) if args.epsilon else None
    checked, violations = audit_budget(args.adv, orig=args.orig, epsilon=epsilon)
    for v in violations:
        print(f"VIOLATION {v}", file=sys.stderr)
    print(f"audited {checked} images, {len(violations)} violation(s)")
    return 1 if violations else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="advguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="experiment config YAML")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config key")
        p.add_argument("--out", help="output directory (default: config output_dir)")

    p = sub.add_parser("train", help="train the guided generator")
    common(p)
    p.add_argument("--dry-run", action="store_true", help="print resolved config and exit")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="write adversarial images for a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", help="input manifest (default: data.eval_manifest)")
    p.add_argument("--guide", default="auto", help="guide image path, class:<id>, or auto")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="run the transferability harness")
    common(p)
    p.add_argument("--attack", help="comma list: identity,ours,pgd,di,dr")
    p.add_argument("--checkpoint", help="generator checkpoint for --attack ours")
    p.add_argument("--adv-dir", help="evaluate precomputed adversarial images")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("baseline", help="run an iterative baseline attack")
    common(p)
    p.add_argument("--attack", required=True, choices=("pgd", "di", "dr"))
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("visualize", help="Grad-CAM grid for clean/guide/adversarial images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", help="extra attacks to include (comma list)")
    p.add_argument("--n", type=int, default=2, help="number of samples")
    p.add_argument("--class-idx", type=int)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("profile", help="parameter/FLOP counts and generation latency")
    common(p)
    p.add_argument("--n-runs", type=int, default=100)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("audit-budget", help="re-check written adversarial images")
    p.add_argument("--adv", required=True, help="directory of adversarial PNGs + sidecars")
    p.add_argument("--orig", help="directory of originals (default: sidecar source paths)")
    p.add_argument("--epsilon", help="override epsilon, e.g. 16/255")
    p.set_defaults(fn=cmd_audit_budget)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InputError, StateError, VersionError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
