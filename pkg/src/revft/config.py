"""Declarative run configuration loaded from JSON.

Every section is a frozen dataclass. Loading is strict: unknown keys,
wrong value types and inconsistent settings raise :class:`ConfigError`
before anything is allocated. The schema is documented in the README.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace

from revft.analysis import ReconConfig, SweepSpec
from revft.exceptions import ConfigError
from revft.model import MergeMode, ModelDims, SegmentPlan
from revft.peft import SCHEMES, InitScheme, ProbeExperiment
from revft.reversible import DEFAULT_SCALING, MeftKind, ScalingConfig
from revft.tensor import Precision
from revft.train import TaskSpec, TrainConfig


@dataclass(frozen=True)
class ScalingSection:
    lam: float | None = None
    beta: float | None = None
    gamma: float = 0.1


@dataclass(frozen=True)
class SweepSection:
    depth: list = field(default_factory=lambda: [2, 4, 8, 16])
    lam: list = field(default_factory=lambda: [1.0])
    beta: list | None = None
    mu: list = field(default_factory=lambda: [0.0])
    sigma: list = field(default_factory=lambda: [0.02])
    precision: list = field(default_factory=lambda: ["single"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    kind: str = "meft3"
    d_model: int = 64
    heads: int = 4
    r: int = 8
    batch: int = 2
    seq_len: int = 8


@dataclass(frozen=True)
class SchemeSection:
    kind: str = "lora_probe"
    c: float = 0.0
    alpha: float = 1.0
    dist: str = "constant"
    sigma: float = 0.02
    train_alpha: bool = False


def _default_schemes():
    return [SchemeSection("lora_probe", 0.0), SchemeSection("lora_probe", 0.3),
            SchemeSection("ia3_probe", 0.1, 1.0), SchemeSection("ia3_probe", 0.1, 10.0)]


@dataclass(frozen=True)
class InitSweepSection:
    schemes: list = field(default_factory=_default_schemes)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    experiment: ProbeExperiment = field(default_factory=ProbeExperiment)


@dataclass(frozen=True)
class MemorySection:
    batch: int = 2
    seq_len: int = 32


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    precision: str = "double"
    kind: str = "meft1"
    dims: ModelDims = field(default_factory=ModelDims)
    plan: list = field(default_factory=lambda: [0, 4, 0])
    scaling: ScalingSection = field(default_factory=ScalingSection)
    r: int = 8
    sigma: float = 0.02
    mu: float = 0.0
    merge: MergeMode = field(default_factory=MergeMode)
    head_mode: str = "classify"
    cache_mode: str = "reversible"
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    init_sweep: InitSweepSection = field(default_factory=InitSweepSection)
    memory: MemorySection = field(default_factory=MemorySection)

    # derived views -------------------------------------------------------

    @property
    def meft_kind(self) -> MeftKind:
        return MeftKind(self.kind)

    @property
    def segment_plan(self) -> SegmentPlan:
        return SegmentPlan(*self.plan)

    @property
    def scaling_config(self) -> ScalingConfig:
        default = DEFAULT_SCALING[self.meft_kind]
        s = self.scaling
        return ScalingConfig(default.lam if s.lam is None else s.lam,
                             default.beta if s.beta is None else s.beta, s.gamma)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, grad_mode=self.cache_mode)

    def sweep_spec(self) -> SweepSpec:
        s = self.sweep
        base = ReconConfig(kind=s.kind, d_model=s.d_model, heads=s.heads, r=s.r,
                           batch=s.batch, seq_len=s.seq_len)
        return SweepSpec(tuple(s.depth), tuple(s.lam), None if s.beta is None else tuple(s.beta),
                         tuple(s.mu), tuple(s.sigma), tuple(s.precision), tuple(s.seeds), base)

    def init_schemes(self) -> list[InitScheme]:
        return [InitScheme(s.kind, s.c, s.alpha, s.dist, s.sigma, s.train_alpha)
                for s in self.init_sweep.schemes]

    def validate(self) -> "RunConfig":
        """Cross-field checks; returns self."""
        try:
            MeftKind(self.kind)
            Precision(self.precision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.cache_mode not in ("vanilla", "reversible"):
            raise ConfigError(f"cache_mode must be vanilla or reversible, got {self.cache_mode!r}")
        if self.head_mode not in ("classify", "lm_tied"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if len(self.plan) != 3:
            raise ConfigError("plan must be [n_frozen, n_reversible, n_vanilla]")
        plan = self.segment_plan
        if plan.n_reversible + plan.n_vanilla == 0:
            raise ConfigError("plan has no trainable (reversible or vanilla) layers")
        if self.merge.kind == "gamma_lm" and self.head_mode != "lm_tied":
            raise ConfigError("gamma_lm merge requires head_mode lm_tied")
        if self.r < 1 or self.sigma < 0:
            raise ConfigError("r must be >= 1 and sigma >= 0")
        if self.task.vocab != self.dims.vocab or self.task.seq_len > self.dims.max_len:
            raise ConfigError("task vocab must equal dims.vocab and seq_len must fit dims.max_len")
        if (self.task.kind == "synth_lm") != (self.head_mode == "lm_tied") and self.task.kind != "jsonl_dataset":
            raise ConfigError(f"task {self.task.kind} does not match head_mode {self.head_mode}")
        if self.memory.seq_len > self.dims.max_len or self.memory.batch < 1:
            raise ConfigError("memory batch must be >= 1 and seq_len must fit dims.max_len")
        if self.cache_mode == "reversible" and plan.n_reversible > 0:
            self.scaling_config.check_invertible()  # raises ScalingDegenerate
        if not 0.0 <= self.train.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        for value in self.sweep.precision:
            if value not in ("single", "double"):
                raise ConfigError(f"unknown sweep precision {value!r}")
        if self.sweep.kind not in {k.value for k in MeftKind}:
            raise ConfigError(f"unknown sweep kind {self.sweep.kind!r}")
        for s in self.init_sweep.schemes:
            if s.kind not in SCHEMES:
                raise ConfigError(f"unknown init scheme {s.kind!r}")
        self.sweep_spec()
        self.init_schemes()
        return self


# ---------------------------------------------------------------------------
# strict loading

_NESTED = {
    "dims": ModelDims, "scaling": ScalingSection, "merge": MergeMode, "task": TaskSpec,
    "train": TrainConfig, "sweep": SweepSection, "init_sweep": InitSweepSection,
    "memory": MemorySection, "experiment": ProbeExperiment,
}
# fields owned by RunConfig rather than the nested section
_RESERVED = {TrainConfig: {"seed", "grad_mode"}}


def _check_type(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is typing.Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        return _check_type(value, next(a for a in args if a is not type(None)), where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        return value
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in fields(cls)} - _RESERVED.get(cls, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        if name in _NESTED and value is not None:
            kwargs[name] = _build(_NESTED[name], value, path)
        elif cls is InitSweepSection and name == "schemes":
            _check_type(value, list, path)
            kwargs[name] = [_build(SchemeSection, s, f"{path}[{i}]") for i, s in enumerate(value)]
        else:
            kwargs[name] = _check_type(value, hints[name], path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data)


def config_to_dict(config) -> dict:
    """Plain JSON-ready form; ``config_from_dict`` inverts it."""
    out = {}
    for f in fields(config):
        if f.name in _RESERVED.get(type(config), set()):
            continue
        value = getattr(config, f.name)
        if is_dataclass(value):
            value = config_to_dict(value)
        elif isinstance(value, list):
            value = [config_to_dict(v) if is_dataclass(v) else v for v in value]
        out[f.name] = value
    return out


def set_path(data: dict, dotted: str, value) -> None:
    """``set_path(d, "train.lr", 0.1)``; intermediate objects are created."""
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not an object")
    node[keys[-1]] = value


__all__ = ["RunConfig", "ScalingSection", "SweepSection", "SchemeSection", "InitSweepSection",
           "MemorySection", "config_from_dict", "load_config", "config_to_dict", "set_path"]
