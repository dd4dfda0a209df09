"""Experiment configuration: one YAML document per run.

The loader rejects unknown keys and type mismatches with line-anchored
messages, resolves relative paths against the config file location, and
assembles the per-module config objects. CLI ``--set a.b=value`` overrides
are applied before validation.
"""

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baselines import IterAttackConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossConfig
from .surrogate import Surrogate, SurrogateHandle, load_layer_map
from .training import TrainConfig

_NUM = (int, float)

_MODEL_SCHEMA = {
    "id": str,
    "arch": str,
    "weights": str,
    "num_classes": int,
    "group": str,
    "feature_layer": str,
    "sha256": str,
}

SCHEMA = {
    "seed": int,
    "output_dir": str,
    "mode": str,
    "data": {
        "train_manifest": str,
        "eval_manifest": str,
        "image_size": int,
    },
    "surrogate": dict(_MODEL_SCHEMA),
    "generator": {
        "residual_blocks": int,
        "sim_placements": [int],
        "base_width": int,
        "trunk_channels": int,
        "epsilon": _NUM,
        "input_size": [int],
    },
    "train": {
        "lr": _NUM,
        "betas": [_NUM],
        "epochs": int,
        "batch_size": int,
        "epsilon": _NUM,
        "target_class": int,
        "max_steps": int,
        "checkpoint_every": int,
    },
    "loss": {
        "margin": _NUM,
        "n_guides": int,
        "tlc": bool,
        "tfs": bool,
        "ufs": bool,
        "usi": bool,
        "usi_variant": str,
    },
    "guides": {
        "manifest": str,
        "strategy": str,
        "manual_ids": [str],
        "scorer_command": [str],
        "target_name": str,
    },
    "roster": {
        "targets": [dict(_MODEL_SCHEMA)],
        "target_classes": [int],
    },
    "baselines": {
        "pgd": {"steps": int, "step_size": _NUM, "epsilon": _NUM, "random_init": bool},
        "di": {
            "steps": int,
            "step_size": _NUM,
            "epsilon": _NUM,
            "random_init": bool,
            "diversity_prob": _NUM,
            "resize_range": [int],
        },
        "dr": {"steps": int, "step_size": _NUM, "epsilon": _NUM, "dr_layer": str},
    },
    "evaluate": {
        "batch_size": int,
    },
    "layer_map": str,
}


def _compose(text, source):
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: YAML parse error: {exc}") from exc
    if node is None:
        raise ConfigError(f"{source}: empty config")
    return node


def _collect_lines(node, path, lines):
    lines.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key_node, val_node in node.value:
            child = f"{path}.{key_node.value}" if path else str(key_node.value)
            lines[child] = key_node.start_mark.line + 1
            _collect_lines(val_node, child, lines)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _collect_lines(item, f"{path}[{i}]", lines)


def _type_name(schema):
    if isinstance(schema, tuple):
        return "number"
    if isinstance(schema, type):
        return schema.__name__
    if isinstance(schema, dict):
        return "mapping"
    return "sequence"


def _validate(value, schema, path, lines, source):
    where = f"{source}:{lines.get(path, '?')}"
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: {path or 'document'} must be a mapping")
        for key in value:
            child = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError(
                    f"{source}:{lines.get(child, '?')}: unknown key {child!r}"
                )
            if value[key] is not None:
                _validate(value[key], schema[key], child, lines, source)
        return
    if isinstance(schema, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: {path} must be a sequence")
        for i, item in enumerate(value):
            _validate(item, schema[0], f"{path}[{i}]", lines, source)
        return
    if schema is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {path} must be a bool, got {value!r}")
        return
    if isinstance(value, bool) or not isinstance(value, schema):
        raise ConfigError(
            f"{where}: {path} must be a {_type_name(schema)}, got {value!r}"
        )


def _apply_override(data, lines, expr):
    if "=" not in expr:
        raise ConfigError(f"--set expects key.path=value, got {expr!r}")
    dotted, raw = expr.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {expr!r}: bad value: {exc}") from exc
    cursor = data
    for i, key in enumerate(keys[:-1]):
        cursor = cursor.setdefault(key, {})
        if not isinstance(cursor, dict):
            raise ConfigError(f"--set {expr!r}: {'.'.join(keys[: i + 1])} is not a mapping")
    cursor[keys[-1]] = value
    lines.setdefault(dotted.strip(), "--set")


@dataclass
class ExperimentConfig:
    """Validated experiment document plus helpers building module configs."""

    raw: dict
    source: Path
    lines: dict = field(default_factory=dict)

    @property
    def root(self):
        return self.source.parent

    def _resolve(self, path_str):
        p = Path(path_str)
        return p if p.is_absolute() else self.root / p

    def get(self, dotted, default=None):
        cursor = self.raw
        for key in dotted.split("."):
            if not isinstance(cursor, dict) or key not in cursor or cursor[key] is None:
                return default
            cursor = cursor[key]
        return cursor

    def require(self, dotted):
        value = self.get(dotted)
        if value is None:
            raise ConfigError(f"{self.source}: missing required key {dotted!r}")
        return value

    @property
    def seed(self):
        return int(self.get("seed", 0))

    @property
    def mode(self):
        mode = self.require("mode")
        if mode not in ("targeted", "untargeted"):
            raise ConfigError(
                f"{self.source}:{self.lines.get('mode', '?')}: "
                f"mode must be targeted|untargeted, got {mode!r}"
            )
        return mode

    @property
    def output_dir(self):
        return self._resolve(self.get("output_dir", "runs/experiment"))

    def image_size(self):
        return int(self.get("data.image_size", 224))

    def dataset(self, split):
        key = f"data.{split}_manifest"
        manifest = self.require(key)
        from .data import ManifestDataset

        return ManifestDataset(self._resolve(manifest), image_size=self.image_size())

    def loss_config(self):
        section = self.get("loss", {}) or {}
        try:
            return LossConfig(**section)
        except TypeError as exc:
            raise ConfigError(f"{self.source}: bad loss section: {exc}") from exc

    def train_config(self):
        section = dict(self.get("train", {}) or {})
        if "betas" in section:
            section["betas"] = tuple(section["betas"])
        section.setdefault("seed", self.seed)
        return TrainConfig(mode=self.mode, loss=self.loss_config(), **section)

    def generator_config(self):
        section = dict(self.get("generator", {}) or {})
        if "sim_placements" in section:
            section["sim_placements"] = tuple(section["sim_placements"])
        size = section.pop("input_size", None)
        section["input_size"] = tuple(size) if size else (self.image_size(), self.image_size())
        return GeneratorConfig(**section)

    def _handle(self, section, dotted):
        if not section or "arch" not in section:
            raise ConfigError(f"{self.source}: {dotted} needs at least an 'arch' key")
        weights = section.get("weights", "none")
        if weights not in ("none", "torchvision"):
            weights = str(self._resolve(weights))
        layer = section.get("feature_layer", "")
        layer_map_path = self.get("layer_map")
        if not layer and layer_map_path:
            layer = load_layer_map(self._resolve(layer_map_path)).get(section["arch"], "")
        return SurrogateHandle(
            arch_id=section["arch"],
            weight_source=weights,
            feature_layer=layer,
            num_classes=int(section.get("num_classes", 1000)),
            sha256=section.get("sha256", ""),
        )

    def surrogate(self):
        return Surrogate(self._handle(self.get("surrogate"), "surrogate"))

    def surrogate_id(self):
        section = self.get("surrogate") or {}
        return section.get("id", section.get("arch", "surrogate"))

    def roster(self):
        """(model_id, Surrogate) pairs plus the conv/vit group map."""
        entries = self.get("roster.targets")
        if not entries:
            raise ConfigError(f"{self.source}: roster.targets is empty")
        targets, groups = [], {}
        for i, section in enumerate(entries):
            model_id = section.get("id", section.get("arch", f"model{i}"))
            group = section.get("group", "conv")
            if group not in ("conv", "vit"):
                raise ConfigError(
                    f"{self.source}: roster.targets[{i}].group must be conv|vit, got {group!r}"
                )
            targets.append((model_id, Surrogate(self._handle(section, f"roster.targets[{i}]"))))
            groups[model_id] = group
        return targets, groups

    def target_classes(self):
        return [int(c) for c in self.get("roster.target_classes", [])]

    def guide_pools(self):
        from .guides import load_guide_manifest, score_rank, subprocess_scorer

        manifest = self.require("guides.manifest")
        strategy = self.get("guides.strategy", "random")
        pools = load_guide_manifest(
            self._resolve(manifest),
            strategy=strategy,
            manual_ids=tuple(self.get("guides.manual_ids", []) or []),
        )
        command = self.get("guides.scorer_command")
        if command and strategy in ("score_min", "score_max"):
            scorer = subprocess_scorer([str(c) for c in command])
            name = self.get("guides.target_name", str(self.get("train.target_class", "")))
            pools = {phase: score_rank(pool, scorer, name) for phase, pool in pools.items()}
        return pools

    def baseline_config(self, name):
        section = dict(self.get(f"baselines.{name}", {}) or {})
        if "resize_range" in section:
            section["resize_range"] = tuple(section["resize_range"])
        section.setdefault("epsilon", self.train_config().resolved_epsilon())
        mode = self.mode if name != "dr" else "untargeted"
        return IterAttackConfig(mode=mode, **section)

    def eval_batch_size(self):
        return int(self.get("evaluate.batch_size", 50))


def load_config(path, overrides=()):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    node = _compose(text, str(path))
    lines = {}
    _collect_lines(node, "", lines)
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    for expr in overrides:
        _apply_override(data, lines, expr)
    _validate(data, SCHEMA, "", lines, str(path))
    return ExperimentConfig(raw=data, source=path, lines=lines)
