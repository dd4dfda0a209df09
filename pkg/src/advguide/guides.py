"""Guiding-image selection.

Pools are split by phase (train vs eval, disjoint by image identity) and
support four strategies: uniform random, score-ranked extremes via a
pluggable external scorer, and manual ids. Targeted selection draws from the
target class only; untargeted selection draws all k images from one uniformly
chosen incorrect class.
"""

import subprocess
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from random import Random

from .errors import ConfigError, DataError

STRATEGIES = ("random", "score_min", "score_max", "manual")


@dataclass(frozen=True)
class GuideEntry:
    path: str
    label: int

    @property
    def image_id(self):
        return Path(self.path).stem


@dataclass
class GuidePool:
    entries: list
    phase: str = "train"
    strategy: str = "random"
    manual_ids: tuple = ()
    scores: list = None  # aligned with entries once score_rank has run

    def __post_init__(self):
        if self.phase not in ("train", "eval"):
            raise ConfigError(f"phase must be train|eval, got {self.phase!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        self.manual_ids = tuple(str(i) for i in self.manual_ids or ())

    def classes(self):
        return sorted({e.label for e in self.entries})

    def identities(self):
        return {str(Path(e.path)) for e in self.entries}


def load_guide_manifest(path, strategy="random", manual_ids=()):
    """Parse ``<path> <class_id> <phase>`` lines into per-phase pools.

    Raises DataError if any image identity appears in both phases.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"guide manifest not found: {path}")
    root = path.parent
    by_phase = {"train": [], "eval": []}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in by_phase:
                raise DataError(f"{path}:{lineno}: expected '<path> <class_id> <train|eval>'")
            img = Path(parts[0])
            if not img.is_absolute():
                img = root / img
            by_phase[parts[2]].append(GuideEntry(path=str(img), label=int(parts[1])))
    pools = {
        phase: GuidePool(entries=entries, phase=phase, strategy=strategy, manual_ids=manual_ids)
        for phase, entries in by_phase.items()
    }
    overlap = pools["train"].identities() & pools["eval"].identities()
    if overlap:
        raise DataError(
            f"train/eval guide pools share {len(overlap)} image(s), e.g. {sorted(overlap)[0]}"
        )
    return pools


def _matching_indices(pool, mode, source_class, target_class, exclude_classes):
    if mode == "targeted":
        if target_class is None:
            raise ConfigError("targeted selection requires a target class")
        return [i for i, e in enumerate(pool.entries) if e.label == int(target_class)]
    excluded = {int(source_class)} | {int(c) for c in (exclude_classes or ())}
    return [i for i, e in enumerate(pool.entries) if e.label not in excluded]


def select(
    pool: GuidePool,
    source_class,
    k,
    seed,
    mode="untargeted",
    target_class=None,
    exclude_classes=None,
):
    """Pick ``k`` guide entries per the pool's strategy; deterministic under ``seed``.

    Untargeted mode first draws one incorrect class uniformly (never
    ``source_class`` nor anything in ``exclude_classes``) and returns k
    entries of that single class.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = Random(seed)
    idx = _matching_indices(pool, mode, source_class, target_class, exclude_classes)
    if not idx:
        raise DataError(
            f"guide pool ({pool.phase}) empty after class filtering "
            f"(mode={mode}, source={source_class}, target={target_class})"
        )
    if mode != "targeted":
        chosen_class = rng.choice(sorted({pool.entries[i].label for i in idx}))
        idx = [i for i in idx if pool.entries[i].label == chosen_class]

    strategy = pool.strategy
    if strategy in ("score_min", "score_max") and pool.scores is None:
        warnings.warn(
            f"strategy {strategy} requires score_rank() first; falling back to random",
            stacklevel=2,
        )
        strategy = "random"

    if strategy == "random":
        if len(idx) >= k:
            chosen = rng.sample(idx, k)
        else:
            chosen = [rng.choice(idx) for _ in range(k)]
        return [pool.entries[i] for i in chosen]
    if strategy in ("score_min", "score_max"):
        sign = 1.0 if strategy == "score_min" else -1.0
        ordered = sorted(idx, key=lambda i: (sign * pool.scores[i], i))
        return [pool.entries[ordered[i % len(ordered)]] for i in range(k)]
    # manual
    wanted = pool.manual_ids
    if not wanted:
        raise ConfigError("manual strategy requires manual_ids")
    by_id = [
        i for i in idx if pool.entries[i].image_id in wanted or pool.entries[i].path in wanted
    ]
    if not by_id:
        raise DataError(f"manual ids {wanted} not present in the filtered pool")
    return [pool.entries[by_id[i % len(by_id)]] for i in range(k)]


def score_rank(pool: GuidePool, scorer, target_class_name):
    """Return a copy of the pool sorted ascending by scorer output (stable).

    ``scorer(path, class_name) -> float``; on a missing or failing scorer the
    original pool is returned unchanged with a warning, which makes the
    score_min/score_max strategies fall back to random selection.
    """
    if scorer is None:
        warnings.warn("no scorer provided; score strategies fall back to random", stacklevel=2)
        return pool
    try:
        scored = [(float(scorer(e.path, target_class_name)), i) for i, e in enumerate(pool.entries)]
    except Exception as exc:
        warnings.warn(f"scorer failed ({exc}); score strategies fall back to random", stacklevel=2)
        return pool
    order = sorted(range(len(scored)), key=lambda i: scored[i])
    return replace(
        pool,
        entries=[pool.entries[i] for i in order],
        scores=[scored[i][0] for i in order],
    )


def subprocess_scorer(command):
    """Wrap an external scoring program as a scorer callback.

    The program is invoked as ``command <image_path> <class_name>`` and must
    print one real number on stdout.
    """

    def score(path, class_name):
        out = subprocess.run(
            [*command, str(path), str(class_name)],
            capture_output=True,
            text=True,
            check=True,
        )
        return float(out.stdout.strip().split()[0])

    return score
