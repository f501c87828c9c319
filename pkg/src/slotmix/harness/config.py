"""Run configuration: defaults, TOML loading, flag overrides and total validation."""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

MODELS = ("sa", "smm", "kmeans", "gmm")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    model: str = "smm"
    K: int = 7
    D: int = 64
    hidden: int = 64
    iterations_train: int = 5
    iterations_eval: int = 7
    detach_last: bool = True
    batch_size: int = 64
    total_steps: int = 20_000
    max_lr: float = 4e-4
    warmup_frac: float = 0.1
    seed: int = 0
    dataset: str = "data/scenes.jsonl"
    output_dir: str = "runs/default"
    # evaluation / logging
    eval_scenes: int = 500
    eval_every: int = 1000
    log_every: int = 50
    # dataset generation
    n_scenes: int = 5000
    max_objects: int = 6
    points_per_object: int = 14
    background_points: int = 12
    # vanilla k-means temperature
    kmeans_beta: float = 50.0
    # compare-vanilla
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    # sweeps / concept demo
    checkpoint: str = ""
    iteration_list: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7])
    object_counts: list = field(default_factory=lambda: [6, 7, 8, 9, 10])
    sweep_scenes: int = 200
    concepts: int = 3
    # checks
    instances: int = 50

    def validate(self):
        """Every problem at once, so nothing runs on a half-valid config."""
        p = []
        if self.model not in MODELS:
            p.append(f"model: {self.model!r} not in {MODELS}")
        for name in ("K", "D", "hidden", "iterations_train", "iterations_eval", "batch_size",
                     "total_steps", "eval_scenes", "eval_every", "log_every", "n_scenes",
                     "max_objects", "points_per_object", "sweep_scenes", "concepts",
                     "instances"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name}: must be a positive integer, got {v!r}")
        if not isinstance(self.background_points, int) or self.background_points < 0:
            p.append("background_points: must be a non-negative integer")
        for name in ("max_lr", "kmeans_beta"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                p.append(f"{name}: must be a positive finite number, got {v!r}")
        if not isinstance(self.warmup_frac, (int, float)) or not 0 <= self.warmup_frac < 1:
            p.append("warmup_frac: must lie in [0, 1)")
        if not isinstance(self.detach_last, bool):
            p.append("detach_last: must be a boolean")
        if not isinstance(self.seed, int) or self.seed < 0:
            p.append("seed: must be a non-negative integer")
        for name in ("seeds", "iteration_list", "object_counts"):
            v = getattr(self, name)
            if not isinstance(v, list) or not v or not all(
                    isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in v):
                p.append(f"{name}: must be a non-empty list of non-negative integers")
        if isinstance(self.iteration_list, list) and any(
                isinstance(i, int) and i < 1 for i in self.iteration_list):
            p.append("iteration_list: iteration counts must be >= 1")
        if isinstance(self.K, int) and isinstance(self.max_objects, int) and self.K < self.max_objects:
            p.append(f"K: {self.K} slots cannot cover max_objects={self.max_objects}")
        if p:
            raise ConfigError(p)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def fingerprint(self):
        """Short hash of every field that can change results (not the output location)."""
        data = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        blob = tomli_w.dumps(data).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(name, raw):
    default = RunConfig().to_dict()[name]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        if isinstance(raw, int) and not isinstance(raw, bool):
            return raw
        return int(str(raw))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        if isinstance(raw, list):
            return raw
        return [int(v) for v in str(raw).split(",") if v.strip()]
    return str(raw)


def build_config(toml_path=None, overrides=None):
    """Defaults <- TOML file <- flag overrides, then validate."""
    values = {}
    problems = []
    if toml_path:
        with open(toml_path, "rb") as fh:
            data = tomllib.load(fh)
        for k, v in data.items():
            if k not in FIELD_TYPES:
                problems.append(f"{k}: unknown field in {toml_path}")
            else:
                values[k] = v
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in FIELD_TYPES:
            problems.append(f"{k}: unknown field")
            continue
        values[k] = v
    coerced = {}
    for k, v in values.items():
        try:
            coerced[k] = _coerce(k, v)
        except ValueError as exc:
            msg = str(exc)
            problems.append(msg if msg.startswith(f"{k}:") else f"{k}: {msg}")
    cfg = RunConfig(**coerced)
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def write_echo(cfg, path, extra=None):
    data = cfg.to_dict()
    if extra:
        data = {**data, **extra}
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)


def read_echo(path):
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    known = {k: v for k, v in data.items() if k in FIELD_TYPES}
    return RunConfig(**known)
