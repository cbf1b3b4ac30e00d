"""Flat ``key = value`` run configuration shared by every subcommand.

Top-level keys configure datasets and evaluation. Keys prefixed ``train.`` and
``estimate.`` override fields of :class:`TrainConfig` and :class:`PipelineConfig`.
Unknown keys are rejected. ``seed`` is the master seed: it drives dataset
generation and is added to ``train.rng_seed`` and ``estimate.rng_seed``.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields

from surfdist.errors import InvalidConfig
from surfdist.pipeline import PipelineConfig
from surfdist.training import TrainConfig, config_from_mapping, parse_value, read_kv_file

OBJECT_KINDS = ("blob", "cylinder", "cube", "sphere")
# Keys that change how a run executes but not what it computes.
UNHASHED = ("threads",)


@dataclass
class RunConfig:
    objects: str = "blob,cylinder"
    object_size: float = 100.0
    sample_count: int = 4096
    train_scenes: int = 2000
    test_scenes: int = 200
    crop_size: int = 112
    max_occluders: int = 2
    seed: int = 0
    threads: int = 1
    oracle: bool = False
    thresholds: str = "0.02,0.05,0.10"
    visualize_scene: int = 0
    ablate_objects: str = "blob"
    ablate_dims: str = "6,12"
    ablate_gammas: str = "1.0,1.5"
    ablate_scenes: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    estimate: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        for kind in self.object_list:
            if kind not in OBJECT_KINDS:
                raise InvalidConfig(f"unknown object kind {kind!r}")
        if not self.object_list:
            raise InvalidConfig("objects must name at least one object")
        for name in ("train_scenes", "test_scenes", "sample_count", "crop_size", "threads"):
            if int(getattr(self, name)) < (0 if name.endswith("scenes") else 1):
                raise InvalidConfig(f"{name} out of range")
        if self.ablate_scenes < 0:
            raise InvalidConfig("ablate_scenes must be non-negative (0 means every test scene)")
        if self.max_occluders < 0:
            raise InvalidConfig("max_occluders must be non-negative")
        if not self.object_size > 0:
            raise InvalidConfig("object_size must be positive")
        try:
            ths = self.threshold_list
            dims = self.ablate_dim_list
            gammas = self.ablate_gamma_list
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from exc
        if any(not 0 < t for t in ths) or any(d < 1 for d in dims) or any(not g > 0 for g in gammas):
            raise InvalidConfig("thresholds, ablate_dims and ablate_gammas must be positive")

    @property
    def object_list(self) -> list:
        return [s.strip() for s in self.objects.split(",") if s.strip()]

    @property
    def ablate_object_list(self) -> list:
        return [s.strip() for s in self.ablate_objects.split(",") if s.strip()]

    @property
    def threshold_list(self) -> list:
        return [float(s) for s in self.thresholds.split(",") if s.strip()]

    @property
    def ablate_dim_list(self) -> list:
        return [int(s) for s in self.ablate_dims.split(",") if s.strip()]

    @property
    def ablate_gamma_list(self) -> list:
        return [float(s) for s in self.ablate_gammas.split(",") if s.strip()]

    def items(self) -> list:
        """Every resolved key with its value, sorted, sub-configs flattened with prefixes."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("train", "estimate"):
                out += [(f"{f.name}.{k}", v) for k, v in asdict(value).items()]
            else:
                out.append((f.name, value))
        return sorted(out)

    def text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def config_hash(self) -> str:
        canon = "".join(f"{k}={_fmt(v)}\n" for k, v in self.items() if k not in UNHASHED)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_items(mapping: dict) -> RunConfig:
    """Build a :class:`RunConfig` from string (or typed) values keyed as in a config file."""
    top, sub = {}, {"train": {}, "estimate": {}}
    names = {f.name for f in fields(RunConfig)} - {"train", "estimate"}
    defaults = RunConfig()
    for key, value in mapping.items():
        prefix, _, rest = key.partition(".")
        if rest and prefix in sub:
            sub[prefix][rest] = value
        elif key in names:
            top[key] = parse_value(value, getattr(defaults, key)) if isinstance(value, str) else value
        else:
            raise InvalidConfig(f"unknown config key {key!r}")
    try:
        train = config_from_mapping(TrainConfig, sub["train"])
        estimate = config_from_mapping(PipelineConfig, sub["estimate"])
        return RunConfig(train=train, estimate=estimate, **top)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides`` on top."""
    mapping = {}
    if path is not None:
        try:
            mapping.update(read_kv_file(path))
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    mapping.update(overrides or {})
    return config_from_items(mapping)
