"""Run configuration files and the dataset/model construction they imply.

A run config is plain ``key = value`` text. Every key below must be present
exactly once; unknown keys are rejected. ``seed`` appears once and every
random stream in a run derives from it by a fixed label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import ConfigError, DatasetSpec, LabeledDataset, generate, preprocess
from .diffcore import Network
from .energy import JemModel
from .rng import make_rng
from .robustness import AttackConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig

__all__ = ["ModelConfig", "PrepConfig", "RunConfig", "parse_config", "load_config", "build_data", "build_model"]


@dataclass
class ModelConfig:
    hidden: tuple = (64, 64)
    activation: str = "softplus"


@dataclass
class PrepConfig:
    noise_std: float = 0.03
    renoise: bool = True


# keys owned by the top-level seed, not settable per section
_SEEDED = {"data": {"seed"}, "train": {"seed", "sampler"}}


@dataclass
class RunConfig:
    seed: int = 0
    data: DatasetSpec = field(default_factory=DatasetSpec)
    prep: PrepConfig = field(default_factory=PrepConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        self.data.seed = self.seed
        self.train.seed = self.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return parse_config(self.to_text(), seed=seed)

    def sections(self) -> dict:
        return {
            "data": self.data,
            "prep": self.prep,
            "model": self.model,
            "train": self.train,
            "sampler": self.train.sampler,
            "attack": self.attack,
        }

    def items(self) -> list:
        out = [("seed", self.seed)]
        for name, obj in self.sections().items():
            skip = _SEEDED.get(name, set())
            out.extend((f"{name}.{f.name}", getattr(obj, f.name)) for f in fields(obj) if f.name not in skip)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(e) for e in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _expected_keys() -> list:
    return [k for k, _ in RunConfig().items()]


def parse_config(text: str, seed: int | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``seed`` overrides the file's seed."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"duplicate config key: {key}")
        raw[key] = value
    expected = _expected_keys()
    unknown = sorted(set(raw) - set(expected))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    missing = [k for k in expected if k not in raw]
    if missing:
        raise ConfigError(f"missing config key: {missing[0]}")

    proto = RunConfig()
    values = {k: _coerce(k, raw[k], v) for k, v in proto.items()}
    if seed is not None:
        values["seed"] = int(seed)

    def section(name, cls, **extra):
        kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(name + ".")}
        try:
            return cls(**kw, **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from None

    sampler = section("sampler", SamplerConfig)
    return RunConfig(
        seed=values["seed"],
        data=section("data", DatasetSpec),
        prep=section("prep", PrepConfig),
        model=section("model", ModelConfig),
        train=section("train", TrainConfig, sampler=sampler),
        attack=section("attack", AttackConfig),
    )


def load_config(path, seed: int | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), seed=seed)


@dataclass
class RunData:
    train: LabeledDataset  # preprocessed training view (re-noising if configured)
    val: LabeledDataset  # preprocessed, noise-free
    raw_train: LabeledDataset
    raw_val: LabeledDataset


def build_data(run: RunConfig) -> RunData:
    """Generate, split and normalize the run's dataset deterministically."""
    raw = generate(run.data, make_rng(run.seed, "data"))
    raw_train, raw_val = raw.split(run.train.val_fraction, make_rng(run.seed, "split"))
    norm = (raw_train.inputs.min(axis=0), raw_train.inputs.max(axis=0))
    p = run.prep
    train = preprocess(raw_train, make_rng(run.seed, "noise"), noise_std=p.noise_std, renoise=p.renoise,
                       normalization=norm)
    val = preprocess(raw_val, noise_std=0.0, normalization=norm)
    if len(val) == 0:
        raise ConfigError("validation split is empty")
    return RunData(train, val, raw_train, raw_val)


def build_model(run: RunConfig, dim: int, num_classes: int) -> JemModel:
    sizes = [dim, *run.model.hidden, num_classes]
    try:
        net = Network.mlp(sizes, run.model.activation, rng=make_rng(run.seed, "init"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid model settings: {exc}") from None
    return JemModel(net)

